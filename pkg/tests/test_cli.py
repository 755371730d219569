"""CLI wiring: exit codes, artifacts, determinism."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from ebm_concepts.cli import main
from ebm_concepts.datasets import load_dataset


def run_cli(*args):
    return main(list(args))


@pytest.fixture
def points_data(tmp_path):
    out = tmp_path / "data"
    assert run_cli("gen-data", "--spec", "points2g", "--n", "200", "--seed", "3",
                   "--out", str(out)) == 0
    return out / "dataset.ebmd"


@pytest.fixture
def quad_models_dir(tmp_path):
    # train two tiny point models quickly so sampling has real checkpoints
    from ebm_concepts.datasets import PointsSpec, GaussianCluster, gen_points
    from ebm_concepts.models import Arch, init_model, save_checkpoint
    from ebm_concepts.trainer import TrainerConfig, train

    d = tmp_path / "models"
    d.mkdir()
    spec = PointsSpec((GaussianCluster((0.35, 0.5), 0.1),
                       GaussianCluster((0.65, 0.5), 0.1)))
    ds = gen_points(spec, 256, seed=0)
    cfg = TrainerConfig(epochs=1, batch_size=128, negative_steps=5, step_size=0.01,
                        max_steps=2, seed=0)
    for name in ("pa", "pb"):
        model = init_model(Arch("point2d", "position", 2, hidden=(8, 8, 8)),
                           seed=hash(name) % 1000, model_id=name)
        train(model, ds, cfg)
        save_checkpoint(model, d / f"{name}.ebmc")
    return d


class TestGenData:
    def test_identical_flags_identical_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run_cli("gen-data", "--spec", "scenes16", "--n", "8", "--seed", "4",
                           "--out", str(out)) == 0
        assert (a / "dataset.ebmd").read_bytes() == (b / "dataset.ebmd").read_bytes()
        assert (a / "manifest.json").read_text() == (b / "manifest.json").read_text()

    def test_n_zero_exits_2(self, tmp_path, capsys):
        code = run_cli("gen-data", "--spec", "points2g", "--n", "0",
                       "--out", str(tmp_path / "x"))
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_unknown_builtin_exits_2(self, tmp_path):
        assert run_cli("gen-data", "--spec", "nope99", "--n", "5",
                       "--out", str(tmp_path / "x")) == 2

    def test_manifest_has_spec_hash(self, tmp_path):
        out = tmp_path / "g"
        run_cli("gen-data", "--spec", "points2g", "--n", "10", "--seed", "1",
                "--out", str(out))
        manifest = json.loads((out / "manifest.json").read_text())
        assert set(manifest) >= {"spec", "spec_hash", "n", "seed"}


class TestTrain:
    def test_smoke_checkpoint_loads(self, tmp_path, points_data):
        out = tmp_path / "run"
        code = run_cli("train", "--data", str(points_data), "--concept", "position",
                       "--out", str(out), "--max-steps", "2", "--batch-size", "64",
                       "--seed", "1", "--config", str(_tiny_cfg(tmp_path)))
        assert code == 0
        from ebm_concepts.models import load_checkpoint
        ckpts = list((out / "checkpoints").glob("*.ebmc"))
        assert len(ckpts) == 1
        model = load_checkpoint(ckpts[0])
        assert model.arch.concept_kind == "position"
        assert (out / "reports" / "loss.csv").read_text().startswith("step,cd_loss")
        assert (out / "config.echo").exists()

    def test_missing_data_exits_2(self, tmp_path):
        assert run_cli("train", "--data", str(tmp_path / "none.ebmd"),
                       "--concept", "position", "--out", str(tmp_path / "o")) == 2

    def test_frozen_checkpoints_byte_identical(self, tmp_path, points_data, quad_models_dir):
        frozen_file = tmp_path / "frozen.dsl"
        frozen_file.write_text("pa()")
        before = (quad_models_dir / "pa.ebmc").read_bytes()
        out = tmp_path / "run2"
        code = run_cli("train", "--data", str(points_data), "--concept", "position",
                       "--out", str(out), "--max-steps", "2", "--batch-size", "64",
                       "--frozen", str(frozen_file), "--models", str(quad_models_dir),
                       "--config", str(_tiny_cfg(tmp_path)))
        assert code == 0
        assert (quad_models_dir / "pa.ebmc").read_bytes() == before


def _tiny_cfg(tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("negative_steps=4\nstep_size=0.01\n# comment\nepochs=1\n")
    return cfg


class TestSample:
    def test_smoke_points_csv(self, tmp_path, quad_models_dir):
        out = tmp_path / "s"
        code = run_cli("sample", "--expr", "AND(pa(x=0.4,y=0.5),pb(x=0.6,y=0.5))",
                       "--models", str(quad_models_dir), "--n", "16", "--k", "5",
                       "--seed", "2", "--out", str(out))
        assert code == 0
        text = (out / "samples" / "samples.csv").read_text()
        assert text.splitlines()[0] == "x,y"
        assert len(text.splitlines()) == 17
        assert (out / "reports" / "trace.csv").exists()

    def test_bare_not_exits_2(self, tmp_path, quad_models_dir, capsys):
        code = run_cli("sample", "--expr", "NOT(pa(x=0.4,y=0.5))",
                       "--models", str(quad_models_dir), "--out", str(tmp_path / "x"))
        assert code == 2
        assert "grounding" in capsys.readouterr().err

    def test_parse_error_has_caret(self, tmp_path, quad_models_dir, capsys):
        code = run_cli("sample", "--expr", "AND(pa(x=0.4)",
                       "--models", str(quad_models_dir), "--out", str(tmp_path / "x"))
        assert code == 2
        err = capsys.readouterr().err
        assert "^" in err

    def test_unresolved_model_exits_2(self, tmp_path, quad_models_dir):
        assert run_cli("sample", "--expr", "ghost(x=0.1,y=0.1)",
                       "--models", str(quad_models_dir), "--out", str(tmp_path / "x")) == 2

    def test_k0_equals_init_distribution(self, tmp_path, quad_models_dir):
        out = tmp_path / "k0"
        run_cli("sample", "--expr", "pa(x=0.5,y=0.5)", "--models", str(quad_models_dir),
                "--n", "64", "--k", "0", "--seed", "9", "--out", str(out))
        rows = (out / "samples" / "samples.csv").read_text().splitlines()[1:]
        vals = np.array([[float(v) for v in r.split(",")] for r in rows])
        expected = np.random.default_rng(9).random((64, 2))
        np.testing.assert_allclose(vals, expected, atol=1e-12)

    def test_rerun_byte_identical(self, tmp_path, quad_models_dir):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            run_cli("sample", "--expr", "pa(x=0.5,y=0.5)", "--models",
                    str(quad_models_dir), "--n", "8", "--k", "3", "--seed", "5",
                    "--out", str(out))
            outs.append((out / "samples" / "samples.csv").read_bytes())
        assert outs[0] == outs[1]


class TestInfer:
    def test_matches_library(self, tmp_path, points_data, quad_models_dir):
        out = tmp_path / "inf"
        code = run_cli("infer", "--model", str(quad_models_dir / "pa.ebmc"),
                       "--images", str(points_data), "--grid", "8", "--count", "1",
                       "--out", str(out), "--map")
        assert code == 0
        payload = json.loads((out / "reports" / "inference.json").read_text())
        from ebm_concepts.models import load_checkpoint
        from ebm_concepts.inference import map_infer
        ds = load_dataset(points_data)
        result = map_infer(load_checkpoint(quad_models_dir / "pa.ebmc"),
                           ds.samples[:1], grid_resolution=8)
        assert payload["values"] == [float(v) for v in result.concept_star.values]
        assert (out / "reports" / "energy_map.pgm").exists()
        assert (out / "reports" / "energy_map.minmax.txt").exists()

    def test_objective_additivity_over_images(self, tmp_path, points_data, quad_models_dir):
        out = tmp_path / "inf8"
        assert run_cli("infer", "--model", str(quad_models_dir / "pa.ebmc"),
                       "--images", str(points_data), "--grid", "6", "--count", "8",
                       "--out", str(out)) == 0
        payload = json.loads((out / "reports" / "inference.json").read_text())
        from ebm_concepts.models import load_checkpoint, ConceptCode, energy
        ds = load_dataset(points_data)
        model = load_checkpoint(quad_models_dir / "pa.ebmc")
        c = ConceptCode("position", np.asarray(payload["values"]))
        total = sum(energy(model, x, c) for x in ds.samples[:8])
        assert payload["energy_at_min"] == pytest.approx(total, rel=1e-9)

    def test_grid_zero_exits_2(self, tmp_path, points_data, quad_models_dir):
        assert run_cli("infer", "--model", str(quad_models_dir / "pa.ebmc"),
                       "--images", str(points_data), "--grid", "0",
                       "--out", str(tmp_path / "x")) == 2


class TestEval:
    def test_density_assert_pass_and_fail(self, tmp_path, quad_models_dir):
        out = tmp_path / "d"
        code = run_cli("eval", "density", "--expr", "pa(x=0.5,y=0.5)",
                       "--models", str(quad_models_dir), "--res", "16", "--n", "1000",
                       "--k", "4", "--seed", "1", "--out", str(out),
                       "--assert", "tv<=1.0")
        assert code == 0
        report = json.loads((out / "reports" / "density.json").read_text())
        assert 0.0 <= report["tv"] <= 1.0
        code = run_cli("eval", "density", "--expr", "pa(x=0.5,y=0.5)",
                       "--models", str(quad_models_dir), "--res", "16", "--n", "1000",
                       "--k", "4", "--seed", "1", "--out", str(tmp_path / "d2"),
                       "--assert", "tv<=0.0")
        assert code == 4

    def test_balance_smoke(self, tmp_path, quad_models_dir):
        sdir = tmp_path / "s"
        run_cli("sample", "--expr", "pa(x=0.5,y=0.5)", "--models", str(quad_models_dir),
                "--n", "50", "--k", "2", "--seed", "3", "--out", str(sdir))
        out = tmp_path / "bal"
        code = run_cli("eval", "balance", "--samples",
                       str(sdir / "samples" / "samples.csv"),
                       "--region", "0,0.5,0,1", "--region", "0.5,1.0001,0,1",
                       "--out", str(out))
        assert code == 0
        report = json.loads((out / "reports" / "balance.json").read_text())
        assert len(report["proportions"]) == 2

    def test_extrapolate_p100_exits_2(self, tmp_path, quad_models_dir):
        code = run_cli("eval", "extrapolate", "--models", str(quad_models_dir),
                       "--pos-model", "pa", "--size-model", "pb",
                       "--baseline", "x", "--regressor", "y", "--p", "100",
                       "--out", str(tmp_path / "x"))
        assert code == 2

    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "bogus", "--out", "/tmp/x"])
        assert exc.value.code == 2

    def test_histogram_smoke(self, tmp_path, points_data, quad_models_dir):
        out = tmp_path / "h"
        code = run_cli("eval", "histogram", "--model", str(quad_models_dir / "pa.ebmc"),
                       "--data", str(points_data), "--bins", "20", "--out", str(out))
        assert code == 0
        report = json.loads((out / "reports" / "histogram.json").read_text())
        assert report["spread"] == report["max"] - report["min"]


class TestHelp:
    @pytest.mark.parametrize("args", [
        ["--help"], ["gen-data", "--help"], ["train", "--help"], ["sample", "--help"],
        ["infer", "--help"], ["eval", "--help"], ["eval", "density", "--help"],
    ])
    def test_help_exits_zero(self, args, capsys):
        with pytest.raises(SystemExit) as exc:
            main(args)
        assert exc.value.code == 0
        assert "usage" in capsys.readouterr().out

    def test_ebm_seed_env_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("EBM_SEED", "17")
        a, b = tmp_path / "a", tmp_path / "b"
        run_cli("gen-data", "--spec", "points2g", "--n", "20", "--out", str(a))
        run_cli("gen-data", "--spec", "points2g", "--n", "20", "--seed", "17",
                "--out", str(b))
        assert (a / "dataset.ebmd").read_bytes() == (b / "dataset.ebmd").read_bytes()

    def test_console_script_installed(self):
        proc = subprocess.run([sys.executable, "-m", "ebm_concepts.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
