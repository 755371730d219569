"""Command-line entry point: ``ebmc``.

Commands wire datasets, training, composition sampling, inference and
evaluation into reproducible runs.  Every command writes its effective
settings to ``<out>/config.echo`` and keeps artifacts under a fixed layout
(``checkpoints/``, ``samples/``, ``reports/``) so reruns with identical
flags and seeds produce byte-identical output trees.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure,
4 assertion failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import fileio
from .compose import CompositionError, Conj, leaves
from .datasets import (BUILTIN_SPECS, DatasetError, builtin_spec, generate,
                       extrapolation_split, load_dataset, save_dataset, spec_from_dict,
                       spec_hash)
from .dsl import ParseError, format_expr, parse_expr
from .evaluation import (EvalError, Lattice, composition_accuracy, energy_histogram,
                         extrapolation_score, grid_density, load_classifier,
                         mode_balance, tv_distance)
from .inference import InferenceError, energy_map, map_infer
from .models import CheckpointError, Arch, ModelError, init_model, load_checkpoint, save_checkpoint
from .sampler import SamplerConfig, SamplerError, run_chain
from .trainer import (TrainerConfig, TrainingError, TrainingDiverged, continual_train,
                      load_generator, train)

USAGE_ERROR = 2
NUMERICAL_ERROR = 3
ASSERTION_ERROR = 4


class AssertionFailed(Exception):
    pass


def _default_seed() -> int:
    env = os.environ.get("EBM_SEED")
    return int(env) if env else 0


def _load_config_file(path) -> dict[str, str]:
    if path is None:
        return {}
    return fileio.parse_config_file(path)


def _resolve(args, names: list[str], config_file: dict[str, str]) -> dict:
    """Effective settings: defaults < config file < explicit flags."""
    out = {}
    for name in names:
        flag = getattr(args, name.replace("-", "_"), None)
        if flag is not None:
            out[name] = flag
        elif name in config_file:
            out[name] = config_file[name]
    return out


def _echo(outdir: Path, settings: dict):
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.echo").write_text(
        fileio.config_echo({k: str(v) for k, v in settings.items()}), encoding="utf-8")


def _load_registry(models_dir, expr) -> dict:
    registry = {}
    d = Path(models_dir)
    for leaf in leaves(expr):
        if leaf.model_id in registry:
            continue
        path = d / f"{leaf.model_id}.ebmc"
        if not path.exists():
            raise CompositionError(f"unresolved model {leaf.model_id!r}: {path} not found")
        registry[leaf.model_id] = load_checkpoint(path)
    return registry


def _trainer_config_from(settings: dict) -> TrainerConfig:
    cfg_fields = {f.name: f for f in dataclasses.fields(TrainerConfig)}
    kwargs = {}
    for key, value in settings.items():
        if key not in cfg_fields or key == "clamp":
            continue
        ftype = str(cfg_fields[key].type)
        if isinstance(value, str):
            if value.lower() in ("none", ""):
                value = None
            elif ftype.startswith("bool"):
                value = value.lower() in ("1", "true", "yes")
            elif ftype.startswith("int"):
                value = int(value)
            else:
                value = float(value)
        kwargs[key] = value
    return TrainerConfig(**kwargs)


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfgfile = _load_config_file(args.config)
    settings = _resolve(args, ["spec", "n", "seed"], cfgfile)
    settings.setdefault("seed", _default_seed())
    n = int(settings.get("n", 1000))
    seed = int(settings["seed"])
    name = settings["spec"]
    if name in BUILTIN_SPECS:
        spec = builtin_spec(name)
    else:
        spec = spec_from_dict(json.loads(Path(name).read_text(encoding="utf-8")))
    ds = generate(spec, n, seed)
    out = Path(args.out)
    _echo(out, {**settings, "n": n})
    save_dataset(ds, out / "dataset.ebmd")
    manifest = {"spec": spec.to_dict(), "spec_hash": spec_hash(spec), "n": n, "seed": seed}
    (out / "manifest.json").write_text(fileio.report_json(manifest), encoding="utf-8")
    print(f"wrote {n} items to {out / 'dataset.ebmd'}")
    return 0


def _arch_for(dataset, kind: str) -> Arch:
    names = dataset.names.get(kind)
    arity = dataset.concepts[kind].shape[1]
    if dataset.samples.ndim == 4:
        return Arch("raster", kind, arity, value_names=names,
                    raster_shape=tuple(dataset.samples.shape[1:]))
    return Arch("point2d", kind, arity, value_names=names)


def cmd_train(args) -> int:
    cfgfile = _load_config_file(args.config)
    names = [f.name for f in dataclasses.fields(TrainerConfig)]
    settings = _resolve(args, names + ["model-id"], cfgfile)
    if "seed" not in settings:
        settings["seed"] = _default_seed()
    settings["seed"] = int(settings["seed"])
    dataset = load_dataset(args.data)
    if args.concept not in dataset.concepts:
        raise DatasetError(f"dataset lacks {args.concept!r} labels")
    config = _trainer_config_from(settings)
    if dataset.samples.ndim == 4:
        config.clamp = (-1.0, 1.0)
    model_id = settings.get("model-id") or f"ebm-{args.concept}"
    model = init_model(_arch_for(dataset, args.concept), seed=config.seed, model_id=model_id)

    out = Path(args.out)
    _echo(out, {**settings, "concept": args.concept, "model-id": model_id})
    if args.frozen:
        frozen_expr = parse_expr(Path(args.frozen).read_text(encoding="utf-8").strip())
        if args.models is None:
            raise CompositionError("--frozen requires --models to resolve checkpoints")
        registry = _load_registry(args.models, frozen_expr)
        frozen_children = (list(frozen_expr.children) if isinstance(frozen_expr, Conj)
                           else [frozen_expr])
        history = continual_train(frozen_children, model, dataset, config, registry)
    else:
        history = train(model, dataset, config)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt_dir / f"{model_id}.ebmc")
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "loss.csv").write_text(fileio.loss_history_csv(history), encoding="utf-8")
    print(f"trained {model_id}: {len(history)} steps")
    return 0


def cmd_sample(args) -> int:
    cfgfile = _load_config_file(args.config)
    settings = _resolve(args, ["expr", "n", "k", "lmbda", "noise", "seed"], cfgfile)
    settings.setdefault("seed", _default_seed())
    expr = parse_expr(settings["expr"])
    registry = _load_registry(args.models, expr)
    input_kind = next(iter(registry.values())).arch.input_kind
    clamp = (-1.0, 1.0) if input_kind == "raster" else (0.0, 1.0)
    config = SamplerConfig(
        steps=int(settings.get("k", 300)),
        step_size=float(settings.get("lmbda", 0.05)),
        noise_scale=None if settings.get("noise") is None else float(settings["noise"]),
        clamp=clamp,
        seed=int(settings["seed"]),
    )
    n = int(settings.get("n", 64))
    samples, trace = run_chain(expr, registry, config, count=n)
    out = Path(args.out)
    _echo(out, {**settings, "n": n, "k": config.steps, "lmbda": config.step_size})
    sdir = out / "samples"
    sdir.mkdir(parents=True, exist_ok=True)
    if input_kind == "raster":
        for i, img in enumerate(samples):
            fileio.write_ppm(sdir / f"sample_{i:05d}.ppm", img)
    else:
        dims = ["x", "y"] if samples.shape[1] == 2 else None
        (sdir / "samples.csv").write_text(fileio.samples_csv(samples, dims), encoding="utf-8")
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "trace.csv").write_text(fileio.trace_csv(trace), encoding="utf-8")
    print(f"wrote {n} samples from {format_expr(expr)}")
    return 0


def cmd_infer(args) -> int:
    cfgfile = _load_config_file(args.config)
    settings = _resolve(args, ["grid", "refine", "count"], cfgfile)
    grid = int(settings.get("grid", 20))
    refine = int(settings.get("refine", 0))
    if grid < 1:
        raise InferenceError("grid resolution must be >= 1")
    model = load_checkpoint(args.model)
    dataset = load_dataset(args.images)
    count = int(settings.get("count", 1))
    if count < 1 or len(dataset) < 1:
        raise InferenceError("need at least one observation")
    images = dataset.samples[:count]
    result = map_infer(model, images, grid_resolution=grid, refine_steps=refine)
    out = Path(args.out)
    _echo(out, {**settings, "grid": grid, "refine": refine, "count": count})
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    payload = {
        "concept_kind": result.concept_star.kind,
        "values": [float(v) for v in result.concept_star.values],
        "energy_at_min": result.energy_at_min,
        "method": result.method,
        "grid_resolution": list(result.grid_resolution),
        "observations": int(count),
    }
    (reports / "inference.json").write_text(fileio.report_json(payload), encoding="utf-8")
    if args.map:
        total = None
        for img in images:
            emap = energy_map(model, img, grid_resolution=grid)
            total = emap if total is None else type(emap)(emap.xs, emap.ys,
                                                          total.values + emap.values)
        fileio.write_pgm16(reports / "energy_map.pgm", total.values,
                           reports / "energy_map.minmax.txt")
        (reports / "energy_map.csv").write_text(total.to_csv(), encoding="utf-8")
    print(f"MAP {result.concept_star.kind} = {payload['values']}")
    return 0


def _apply_assertion(report: dict, assertion: str | None, reports_dir: Path, name: str) -> int:
    reports_dir.mkdir(parents=True, exist_ok=True)
    (reports_dir / f"{name}.json").write_text(fileio.report_json(report), encoding="utf-8")
    print(fileio.report_json(report), end="")
    if assertion:
        ok, detail = fileio.check_assertion(assertion, report)
        if not ok:
            raise AssertionFailed(f"assertion failed: {detail}")
        print(f"assertion ok: {detail}")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    reports = out / "reports"
    sub = args.subcommand
    seed = args.seed if args.seed is not None else _default_seed()

    if sub == "density":
        expr = parse_expr(args.expr)
        registry = _load_registry(args.models, expr)
        b = [float(v) for v in args.bounds.split(",")]
        lattice = Lattice(((b[0], b[1]), (b[2], b[3])), (args.res, args.res))
        grid = grid_density(expr, registry, lattice, threads=args.threads)
        config = SamplerConfig(steps=args.k, step_size=args.lmbda, seed=seed,
                               clamp=(min(b[0], b[2]), max(b[1], b[3])))
        samples, _ = run_chain(expr, registry, config, count=args.n)
        report = {"tv": tv_distance(samples, grid), "log_partition": grid.log_partition,
                  "n": args.n, "res": args.res}
        _echo(out, {"expr": args.expr, "n": args.n, "k": args.k, "res": args.res,
                    "seed": seed})
        return _apply_assertion(report, args.assert_, reports, "density")

    if sub == "accuracy":
        expr = parse_expr(args.expr)
        registry = _load_registry(args.models, expr)
        classifiers = {}
        for path in sorted(Path(args.classifiers).glob("*.ebmc")):
            try:
                clf = load_classifier(path)
            except CheckpointError:
                continue
            for kind in clf.kinds:
                classifiers[kind] = clf
        input_kind = next(iter(registry.values())).arch.input_kind
        clamp = (-1.0, 1.0) if input_kind == "raster" else (0.0, 1.0)
        config = SamplerConfig(steps=args.k, step_size=args.lmbda, seed=seed, clamp=clamp)
        report = composition_accuracy(expr, registry, config, classifiers, args.n,
                                      threshold=args.threshold).to_dict()
        _echo(out, {"expr": args.expr, "n": args.n, "k": args.k,
                    "threshold": args.threshold, "seed": seed})
        return _apply_assertion(report, args.assert_, reports, "accuracy")

    if sub == "balance":
        samples = fileio.read_samples_csv(args.samples)
        regions = []
        for spec in args.region:
            x0, x1, y0, y1 = (float(v) for v in spec.split(","))
            regions.append(lambda s, b=(x0, x1, y0, y1): (
                (s[:, 0] >= b[0]) & (s[:, 0] < b[1]) & (s[:, 1] >= b[2]) & (s[:, 1] < b[3])))
        props, unassigned = mode_balance(samples, regions)
        report = {"proportions": props, "unassigned": unassigned, "n": len(samples)}
        _echo(out, {"samples": args.samples, "regions": ";".join(args.region)})
        return _apply_assertion(report, args.assert_, reports, "balance")

    if sub == "histogram":
        model = load_checkpoint(args.model)
        dataset = load_dataset(args.data)
        hist = energy_histogram(model, dataset, bins=args.bins)
        report = {"min": hist.emin, "max": hist.emax, "spread": hist.spread,
                  "bins": args.bins, "counts": [int(c) for c in hist.counts]}
        _echo(out, {"model": args.model, "data": args.data, "bins": args.bins})
        return _apply_assertion(report, args.assert_, reports, "histogram")

    if sub == "extrapolate":
        spec = builtin_spec("extrap16")
        _, held_out = extrapolation_split(spec, args.p, n=1, seed=seed)
        if not held_out:
            raise EvalError("empty held-out combination list (p=100 holds nothing out)")
        registry = {}
        for mid in (args.pos_model, args.size_model):
            path = Path(args.models) / f"{mid}.ebmc"
            registry[mid] = load_checkpoint(path)
        baseline = load_generator(args.baseline)
        regressor = load_classifier(args.regressor)
        config = SamplerConfig(steps=args.k, step_size=args.lmbda, seed=seed,
                               clamp=(-1.0, 1.0))
        report = extrapolation_score(registry, args.pos_model, args.size_model, baseline,
                                     held_out, regressor, config,
                                     n_per_combo=args.n_per_combo,
                                     max_combos=args.combos, seed=seed).to_dict()
        _echo(out, {"p": args.p, "combos": args.combos, "k": args.k, "seed": seed})
        return _apply_assertion(report, args.assert_, reports, "extrapolate")

    raise EvalError(f"unknown eval subcommand {sub!r}")


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ebmc",
        description="Train, compose, sample and evaluate energy-based concept models.")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="cap on worker threads for grid evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic concept dataset")
    p.add_argument("--spec", required=True, help="builtin name or spec JSON file")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a conditional energy model")
    p.add_argument("--data", required=True)
    p.add_argument("--concept", required=True,
                   choices=["position", "size", "color", "shape", "attribute"])
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--frozen", default=None, help="DSL file of frozen predecessor expression")
    p.add_argument("--models", default=None, help="directory of frozen checkpoints")
    p.add_argument("--model-id", dest="model_id", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample a composition expression")
    p.add_argument("--expr", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--lambda", dest="lmbda", type=float, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("infer", help="MAP concept inference from observations")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True, help="dataset file of observations")
    p.add_argument("--grid", type=int, default=None)
    p.add_argument("--refine", type=int, default=None)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--map", action="store_true", help="also write the energy map")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="quantitative evaluation reports")
    ev = p.add_subparsers(dest="subcommand", required=True)

    d = ev.add_parser("density", help="TV distance between samples and the exact grid")
    d.add_argument("--expr", required=True)
    d.add_argument("--models", required=True)
    d.add_argument("--res", type=int, default=48)
    d.add_argument("--bounds", default="0,1,0,1")
    d.add_argument("--n", type=int, default=5000)
    d.add_argument("--k", type=int, default=300)
    d.add_argument("--lambda", dest="lmbda", type=float, default=0.05)
    d.add_argument("--seed", type=int, default=None)
    d.add_argument("--assert", dest="assert_", default=None)
    d.add_argument("--out", required=True)

    a = ev.add_parser("accuracy", help="classifier accuracy of composed generations")
    a.add_argument("--expr", required=True)
    a.add_argument("--models", required=True)
    a.add_argument("--classifiers", required=True)
    a.add_argument("--n", type=int, default=500)
    a.add_argument("--k", type=int, default=120)
    a.add_argument("--lambda", dest="lmbda", type=float, default=0.05)
    a.add_argument("--threshold", type=float, default=0.1)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--assert", dest="assert_", default=None)
    a.add_argument("--out", required=True)

    b = ev.add_parser("balance", help="sample proportions across regions")
    b.add_argument("--samples", required=True)
    b.add_argument("--region", action="append", required=True,
                   help="x0,x1,y0,y1 box; repeatable")
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--assert", dest="assert_", default=None)
    b.add_argument("--out", required=True)

    h = ev.add_parser("histogram", help="energy histogram over a dataset")
    h.add_argument("--model", required=True)
    h.add_argument("--data", required=True)
    h.add_argument("--bins", type=int, default=50)
    h.add_argument("--seed", type=int, default=None)
    h.add_argument("--assert", dest="assert_", default=None)
    h.add_argument("--out", required=True)

    x = ev.add_parser("extrapolate", help="held-out (position, size) errors vs baseline")
    x.add_argument("--models", required=True)
    x.add_argument("--pos-model", dest="pos_model", required=True)
    x.add_argument("--size-model", dest="size_model", required=True)
    x.add_argument("--baseline", required=True)
    x.add_argument("--regressor", required=True)
    x.add_argument("--p", type=float, default=10.0)
    x.add_argument("--combos", type=int, default=20)
    x.add_argument("--n-per-combo", dest="n_per_combo", type=int, default=6)
    x.add_argument("--k", type=int, default=120)
    x.add_argument("--lambda", dest="lmbda", type=float, default=0.05)
    x.add_argument("--seed", type=int, default=None)
    x.add_argument("--assert", dest="assert_", default=None)
    x.add_argument("--out", required=True)

    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        expr_text = getattr(args, "expr", None)
        if expr_text and exc.line == 1:
            print(f"  {expr_text}", file=sys.stderr)
            print(f"  {' ' * (exc.col - 1)}^", file=sys.stderr)
        return USAGE_ERROR
    except (DatasetError, CompositionError, ModelError, CheckpointError, EvalError,
            InferenceError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (TrainingDiverged, SamplerError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except AssertionFailed as exc:
        print(f"{exc}", file=sys.stderr)
        return ASSERTION_ERROR


if __name__ == "__main__":
    sys.exit(main())
