"""Quantitative verification against exactly normalized grid densities.

Low-dimensional sample spaces (1D/2D points) admit exact normalization of
any composition's density on a lattice, which turns the operator algebra
into testable arithmetic: conjunction = renormalized product, disjunction =
partition-weighted mixture, negation = renormalized ratio.  Raster spaces
are evaluated with small supervised classifiers instead, mirroring the
position/color accuracy protocol with a configurable position threshold.
"""

from __future__ import annotations

import io
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .compose import Bias, Conj, Disj, Leaf, Neg, expr_energy_batch, leaves, _bind_leaf_code, _lookup
from .models import (CheckpointError, ConceptCode, DISCRETE_KINDS, _read_tensor_record,
                     _write_tensor_record)
from .sampler import SamplerConfig, run_chain
from .tensor import Tensor
from .trainer import AdamState, TrainerConfig, adam_update


class EvalError(ValueError):
    pass


# -- exact grid densities ----------------------------------------------------


@dataclass(frozen=True)
class Lattice:
    """Uniform cell lattice over a 1D or 2D box; at most 256 cells per dim."""

    bounds: tuple[tuple[float, float], ...]
    shape: tuple[int, ...]

    def __post_init__(self):
        if len(self.bounds) != len(self.shape) or not 1 <= len(self.shape) <= 2:
            raise EvalError("lattice must be 1D or 2D with one bound pair per dim")
        for (lo, hi), n in zip(self.bounds, self.shape):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise EvalError("lattice bounds must be finite and ordered")
            if not 1 <= n <= 256:
                raise EvalError("lattice resolution must lie in [1, 256]")

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def cell_volume(self) -> float:
        v = 1.0
        for (lo, hi), n in zip(self.bounds, self.shape):
            v *= (hi - lo) / n
        return v

    def axis_centers(self, d: int) -> np.ndarray:
        lo, hi = self.bounds[d]
        step = (hi - lo) / self.shape[d]
        return lo + step * (np.arange(self.shape[d]) + 0.5)

    def centers(self) -> np.ndarray:
        """Cell centers as an (N, ndim) array in C (row-major) order."""
        axes = [self.axis_centers(d) for d in range(self.ndim)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=1)

    def cell_index(self, xs: np.ndarray) -> np.ndarray:
        """Linear cell index per sample; -1 for samples outside the box."""
        xs = np.asarray(xs, dtype=np.float64).reshape(len(xs), self.ndim)
        idx = np.zeros(len(xs), dtype=np.int64)
        inside = np.ones(len(xs), dtype=bool)
        for d in range(self.ndim):
            lo, hi = self.bounds[d]
            n = self.shape[d]
            j = np.floor((xs[:, d] - lo) / (hi - lo) * n).astype(np.int64)
            inside &= (xs[:, d] >= lo) & (xs[:, d] <= hi)
            j = np.clip(j, 0, n - 1)  # boundary samples count in the edge cell
            idx = idx * n + j
        idx[~inside] = -1
        return idx


@dataclass
class GridDensity:
    """Exactly normalized probabilities of a composition on a lattice."""

    lattice: Lattice
    probs: np.ndarray
    log_partition: float


def grid_density(expr, registry, lattice: Lattice, threads: int = 1) -> GridDensity:
    """Normalize exp(-E) cellwise; log_partition includes the cell volume."""
    for leaf in leaves(expr):
        if _lookup(registry, leaf.model_id).arch.input_kind == "raster":
            raise EvalError("grid densities are intractable on raster spaces; "
                            "use classifier metrics instead")
    cells = lattice.centers()
    if threads > 1:
        chunks = np.array_split(np.arange(len(cells)), threads * 4)
        energies = np.empty(len(cells))
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for idx, vals in zip(chunks, pool.map(
                    lambda ix: expr_energy_batch(expr, registry, cells[ix]), chunks)):
                energies[idx] = vals
    else:
        energies = expr_energy_batch(expr, registry, cells)
    neg = -energies
    m = neg.max()
    w = np.exp(neg - m)
    total = w.sum()
    probs = (w / total).reshape(lattice.shape)
    log_partition = float(m + np.log(total) + np.log(lattice.cell_volume))
    return GridDensity(lattice, probs, log_partition)


def tv_distance(samples: np.ndarray, grid: GridDensity) -> float:
    """Half L1 between the empirical cell histogram and the grid probs.

    Samples outside the lattice land in a sink cell with zero grid mass.
    """
    samples = np.asarray(samples)
    if len(samples) < 1000:
        raise EvalError("tv_distance needs at least 1000 samples")
    idx = grid.lattice.cell_index(samples)
    n_cells = int(np.prod(grid.lattice.shape))
    counts = np.bincount(idx[idx >= 0], minlength=n_cells).astype(np.float64)
    outside = float((idx < 0).sum())
    phat = counts / len(samples)
    return float(0.5 * (np.abs(phat - grid.probs.reshape(-1)).sum()
                        + outside / len(samples)))


# -- supervised evaluation networks -------------------------------------------


@dataclass
class EvalNetConfig:
    steps: int = 800
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    holdout_frac: float = 0.2
    conv_channels: tuple[int, int] = (8, 16)
    dense_width: int = 64
    pool_after: tuple[bool, bool] = (True, True)   # pooling trades precision for speed


class Classifier:
    """Small conv/dense network reading concept values off samples.

    ``task`` is "classify" (cross-entropy over one-hot kinds) or "regress"
    (MSE over continuous values, possibly several kinds concatenated).
    """

    def __init__(self, kinds: tuple[str, ...], task: str, out_dim: int,
                 sample_shape: tuple[int, ...], names: tuple[str, ...] | None,
                 params: dict[str, Tensor], config: EvalNetConfig):
        self.kinds = kinds
        self.task = task
        self.out_dim = out_dim
        self.sample_shape = tuple(sample_shape)
        self.names = names
        self.params = params
        self.config = config
        self.report: dict[str, float] = {}

    @property
    def kind(self) -> str:
        return self.kinds[0]

    def _forward(self, xs: Tensor, trainable: bool = False) -> Tensor:
        p = self.params if trainable else {k: v.detach() for k, v in self.params.items()}
        h = xs
        if len(self.sample_shape) == 3:
            for i in range(len(self.config.conv_channels)):
                h = T.swish(T.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], pad=1))
                if self.config.pool_after[i]:
                    h = T.mean_pool(h, 2)
            h = T.reshape(h, (xs.data.shape[0], -1))
        h = T.swish(T.affine(h, p["dense.w"], p["dense.b"]))
        return T.affine(h, p["out.w"], p["out.b"])

    def predict(self, samples: np.ndarray, chunk: int = 512) -> np.ndarray:
        """Raw outputs: logits for classify, values for regress."""
        samples = np.asarray(samples, dtype=np.float64)
        outs = [self._forward(Tensor(samples[i:i + chunk])).data
                for i in range(0, len(samples), chunk)]
        return np.concatenate(outs, axis=0)

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None


def _init_eval_net(kinds, task, out_dim, sample_shape, names, cfg: EvalNetConfig) -> Classifier:
    rng = np.random.default_rng(cfg.seed)
    params = {}

    def mat(name, fi, fo):
        lim = 1.0 / np.sqrt(fi)
        params[name + ".w"] = Tensor(rng.uniform(-lim, lim, (fi, fo)), requires_grad=True)
        params[name + ".b"] = Tensor(np.zeros(fo), requires_grad=True)

    if len(sample_shape) == 3:
        cin = sample_shape[0]
        hw = sample_shape[1]
        for i, cout in enumerate(cfg.conv_channels):
            lim = 1.0 / np.sqrt(cin * 9)
            params[f"conv{i}.w"] = Tensor(rng.uniform(-lim, lim, (cout, cin, 3, 3)),
                                          requires_grad=True)
            params[f"conv{i}.b"] = Tensor(np.zeros(cout), requires_grad=True)
            cin = cout
        pools = sum(1 for p_ in cfg.pool_after[:len(cfg.conv_channels)] if p_)
        flat = cfg.conv_channels[-1] * (hw // (2 ** pools)) ** 2
        mat("dense", flat, cfg.dense_width)
    else:
        mat("dense", sample_shape[0], cfg.dense_width)
    mat("out", cfg.dense_width, out_dim)
    return Classifier(kinds, task, out_dim, sample_shape, names, params, cfg)


def _train_eval_net(clf: Classifier, samples, targets, cfg: EvalNetConfig):
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState()
    opt_cfg = TrainerConfig(learning_rate=cfg.learning_rate, adam_beta1=0.9,
                            adam_beta2=0.999)
    n = len(samples)
    bsz = min(cfg.batch_size, n)
    for step in range(cfg.steps):
        idx = rng.integers(n, size=bsz)
        clf.zero_grads()
        out = clf._forward(Tensor(samples[idx]), trainable=True)
        tgt = Tensor(targets[idx])
        if clf.task == "classify":
            lse = T.logsumexp(out, axis=1)
            picked = T.sum_reduce(T.multiply(out, tgt), axis=1)
            loss = T.mean_reduce(T.subtract(lse, picked))
        else:
            loss = T.mean_reduce(T.square(T.subtract(out, tgt)))
        loss.backward()
        grads = {name: p.grad for name, p in clf.params.items() if p.grad is not None}
        adam_update(clf.params, grads, opt, opt_cfg)


def train_classifier(dataset, kind: str, config: EvalNetConfig | None = None) -> Classifier:
    """Supervised concept reader: cross-entropy for discrete kinds, MSE else.

    Holds out a split for the accuracy/error report stored on ``report``.
    """
    cfg = config or EvalNetConfig()
    if kind not in dataset.concepts:
        raise EvalError(f"dataset lacks {kind!r} labels")
    targets = dataset.concepts[kind]
    task = "classify" if kind in DISCRETE_KINDS else "regress"
    if task == "classify" and len(np.unique(np.argmax(targets, axis=1))) < 2:
        raise EvalError(f"cannot train a {kind} classifier on a single-class dataset")
    names = dataset.names.get(kind)
    clf = _init_eval_net((kind,), task, targets.shape[1], dataset.samples.shape[1:],
                         names, cfg)
    n_hold = max(1, int(len(dataset) * cfg.holdout_frac))
    rng = np.random.default_rng(cfg.seed + 1)
    perm = rng.permutation(len(dataset))
    hold, fit = perm[:n_hold], perm[n_hold:]
    _train_eval_net(clf, dataset.samples[fit], targets[fit], cfg)
    preds = clf.predict(dataset.samples[hold])
    if task == "classify":
        acc = float(np.mean(np.argmax(preds, axis=1) == np.argmax(targets[hold], axis=1)))
        clf.report = {"holdout_accuracy": acc, "holdout_count": len(hold)}
    else:
        mae = float(np.mean(np.abs(preds - targets[hold])))
        clf.report = {"holdout_mae": mae, "holdout_count": len(hold)}
    return clf


def train_regressor(dataset, kinds: tuple[str, ...],
                    config: EvalNetConfig | None = None) -> Classifier:
    """Multi-kind continuous reader (e.g. position and size together)."""
    cfg = config or EvalNetConfig()
    for kind in kinds:
        if kind in DISCRETE_KINDS:
            raise EvalError(f"{kind!r} is discrete; regressors read continuous kinds")
        if kind not in dataset.concepts:
            raise EvalError(f"dataset lacks {kind!r} labels")
    targets = np.concatenate([dataset.concepts[k] for k in kinds], axis=1)
    clf = _init_eval_net(tuple(kinds), "regress", targets.shape[1],
                         dataset.samples.shape[1:], None, cfg)
    n_hold = max(1, int(len(dataset) * cfg.holdout_frac))
    rng = np.random.default_rng(cfg.seed + 1)
    perm = rng.permutation(len(dataset))
    hold, fit = perm[:n_hold], perm[n_hold:]
    _train_eval_net(clf, dataset.samples[fit], targets[fit], cfg)
    preds = clf.predict(dataset.samples[hold])
    clf.report = {"holdout_mae": float(np.mean(np.abs(preds - targets[hold]))),
                  "holdout_count": len(hold)}
    return clf


def classify(clf: Classifier, sample: np.ndarray) -> ConceptCode:
    """Predicted concept code of one sample."""
    out = clf.predict(np.asarray(sample)[None])[0]
    if clf.task == "classify":
        return ConceptCode.one_hot(clf.kind, int(np.argmax(out)), clf.names)
    if clf.kind == "position":
        return ConceptCode.position(*np.clip(out[:2], 0.0, 1.0))
    return ConceptCode.size(float(np.clip(out[0], 1e-6, 1.0)))


def save_classifier(clf: Classifier, path):
    manifest = {
        "type": "classifier",
        "kinds": list(clf.kinds),
        "task": clf.task,
        "out_dim": clf.out_dim,
        "sample_shape": list(clf.sample_shape),
        "names": list(clf.names) if clf.names else None,
        "conv_channels": list(clf.config.conv_channels),
        "dense_width": clf.config.dense_width,
        "pool_after": list(clf.config.pool_after),
        "report": clf.report,
    }
    mjson = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(b"EBMC")
    buf.write(struct.pack("<H", 1))
    buf.write(struct.pack("<I", len(mjson)))
    buf.write(mjson)
    for name in sorted(clf.params):
        _write_tensor_record(buf, name, clf.params[name].data)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_classifier(path) -> Classifier:
    with open(path, "rb") as fh:
        offset = 0
        head = fh.read(10)
        if len(head) != 10 or head[:4] != b"EBMC":
            raise CheckpointError("bad classifier checkpoint header", 0)
        (mlen,) = struct.unpack("<I", head[6:10])
        offset = 10
        raw = fh.read(mlen)
        if len(raw) != mlen:
            raise CheckpointError("truncated classifier manifest", offset + len(raw))
        offset += mlen
        manifest = json.loads(raw.decode("utf-8"))
        if manifest.get("type") != "classifier":
            raise CheckpointError("not a classifier checkpoint", 10)
        params = {}
        while True:
            rec = _read_tensor_record(fh, offset)
            if rec is None:
                break
            name, data, offset = rec
            params[name] = Tensor(data, requires_grad=True)
    cfg = EvalNetConfig(conv_channels=tuple(manifest["conv_channels"]),
                        dense_width=int(manifest["dense_width"]),
                        pool_after=tuple(manifest.get("pool_after", (True, True))))
    clf = Classifier(tuple(manifest["kinds"]), manifest["task"], int(manifest["out_dim"]),
                     tuple(manifest["sample_shape"]),
                     tuple(manifest["names"]) if manifest.get("names") else None,
                     params, cfg)
    clf.report = manifest.get("report", {})
    return clf


# -- composition accuracy ------------------------------------------------------


@dataclass
class AccuracyReport:
    accuracy: dict[str, float]
    counts: dict[str, int]
    threshold: float
    frequencies: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "counts": self.counts,
                "threshold": self.threshold, "frequencies": self.frequencies}


def _conditioned_codes(expr, registry, negated=False, pos=None, neg=None):
    """Concept codes per kind, split by polarity (under Neg.negated or not)."""
    if pos is None:
        pos, neg = {}, {}
    if isinstance(expr, Leaf):
        kind = _lookup(registry, expr.model_id).arch.concept_kind
        code = _bind_leaf_code(expr, _lookup(registry, expr.model_id))
        (neg if negated else pos).setdefault(kind, []).append(code)
    elif isinstance(expr, (Conj, Disj)):
        for c in expr.children:
            _conditioned_codes(c, registry, negated, pos, neg)
    elif isinstance(expr, Neg):
        _conditioned_codes(expr.negated, registry, True, pos, neg)
        _conditioned_codes(expr.grounding, registry, negated, pos, neg)
    elif isinstance(expr, Bias):
        _conditioned_codes(expr.child, registry, negated, pos, neg)
    return pos, neg


def composition_accuracy(expr, registry, config: SamplerConfig,
                         classifiers: dict[str, Classifier], n: int,
                         threshold: float = 0.1) -> AccuracyReport:
    """Sample the expression and score each conditioned concept.

    A position is correct when the predicted position lies within
    ``threshold`` of the conditioned one; discrete concepts require an exact
    match.  A kind that appears only under negation is scored against the
    negated value (low is good).  Predicted-value frequencies are reported
    for discrete kinds.
    """
    samples, _ = run_chain(expr, registry, config, count=n)
    pos_codes, neg_codes = _conditioned_codes(expr, registry)
    conditioned = set(pos_codes) | set(neg_codes)
    missing = conditioned - set(classifiers)
    if missing:
        raise EvalError(f"no classifier for conditioned kinds {sorted(missing)}")

    accuracy, counts, frequencies = {}, {}, {}
    for kind in sorted(conditioned):
        clf = classifiers[kind]
        preds = clf.predict(samples)
        targets = pos_codes.get(kind) or neg_codes.get(kind)
        if kind in DISCRETE_KINDS:
            pred_idx = np.argmax(preds, axis=1)
            frequencies[kind] = {name: float(np.mean(pred_idx == i))
                                 for i, name in enumerate(clf.names)}
            if len({c.label for c in targets}) == 1:
                accuracy[kind] = float(np.mean(pred_idx == int(np.argmax(targets[0].values))))
                counts[kind] = n
        else:
            target = targets[0].values
            dist = np.linalg.norm(preds[:, :len(target)] - target, axis=1)
            accuracy[kind] = float(np.mean(dist < threshold))
            counts[kind] = n
    return AccuracyReport(accuracy, counts, threshold, frequencies)


# -- balance, histograms, extrapolation ---------------------------------------


def mode_balance(samples: np.ndarray, regions) -> tuple[list[float], float]:
    """Fraction of samples in each (disjoint) region plus the unassigned rest."""
    samples = np.asarray(samples)
    masks = np.stack([np.asarray(region(samples), dtype=bool) for region in regions])
    per_sample = masks.sum(axis=0)
    if np.any(per_sample > 1):
        raise EvalError("regions overlap")
    props = [float(m.mean()) for m in masks]
    return props, float(np.mean(per_sample == 0))


@dataclass
class EnergyHistogram:
    counts: np.ndarray
    edges: np.ndarray
    emin: float
    emax: float
    spread: float


def energy_histogram(model, dataset, bins: int = 50, chunk: int = 512) -> EnergyHistogram:
    """Histogram of model energies over a dataset, conditioned on its labels."""
    kind = model.arch.concept_kind
    energies = []
    for i in range(0, len(dataset), chunk):
        xs = dataset.samples[i:i + chunk]
        cs = dataset.concepts[kind][i:i + chunk]
        energies.append(model.energy_batch(xs, cs).data)
    e = np.concatenate(energies)
    counts, edges = np.histogram(e, bins=bins)
    return EnergyHistogram(counts, edges, float(e.min()), float(e.max()),
                           float(e.max() - e.min()))


@dataclass
class ExtrapolationReport:
    ebm: dict[str, float]
    baseline: dict[str, float]

    def to_dict(self):
        return {"ebm": self.ebm, "baseline": self.baseline}


def extrapolation_score(registry, pos_model_id: str, size_model_id: str, baseline,
                        held_out, regressor: Classifier, config: SamplerConfig,
                        n_per_combo: int = 8, max_combos: int | None = None,
                        seed: int = 0) -> ExtrapolationReport:
    """Held-out (position, size) errors for the composed EBM and the baseline.

    The regressor reads (x, y, size) off generated samples; errors are mean
    absolute, per dimension for position.
    """
    held_out = list(held_out)
    if not held_out:
        raise EvalError("empty held-out combination list")
    rng = np.random.default_rng(seed)
    if max_combos is not None and len(held_out) > max_combos:
        pick = rng.choice(len(held_out), size=max_combos, replace=False)
        held_out = [held_out[i] for i in sorted(pick)]

    ebm_pos, ebm_size, base_pos, base_size = [], [], [], []
    for i, (position, size_value) in enumerate(held_out):
        expr = Conj([
            Leaf(pos_model_id, code=ConceptCode.position(*position)),
            Leaf(size_model_id, code=ConceptCode.size(size_value)),
        ])
        chain_cfg = SamplerConfig(steps=config.steps, step_size=config.step_size,
                                  noise_scale=config.noise_scale, init=config.init,
                                  clamp=config.clamp, seed=config.seed + i)
        samples, _ = run_chain(expr, registry, chain_cfg, count=n_per_combo)
        preds = regressor.predict(samples)
        ebm_pos.append(np.mean(np.abs(preds[:, :2] - np.asarray(position))))
        ebm_size.append(np.mean(np.abs(preds[:, 2] - size_value)))

        code = np.concatenate([np.asarray(position), [size_value]])[None]
        image = baseline.generate(code)
        bpred = regressor.predict(image)
        base_pos.append(np.mean(np.abs(bpred[:, :2] - np.asarray(position))))
        base_size.append(np.mean(np.abs(bpred[:, 2] - size_value)))

    return ExtrapolationReport(
        ebm={"pos_err": float(np.mean(ebm_pos)), "size_err": float(np.mean(ebm_size))},
        baseline={"pos_err": float(np.mean(base_pos)), "size_err": float(np.mean(base_size))},
    )
