"""Contrastive-divergence training with Adam, spectral normalization and an
L2 penalty on energies.

The per-step loss whose parameter gradient is applied is

    mean E(x+) - mean E(x-) + l2 * (mean E(x+)^2 + mean E(x-)^2)

with negatives produced by Langevin chains on the training expression and
conditioned on the positive batch's concept codes.  Continual learning
wraps a new model in a conjunction with frozen, previously trained models;
only the new model's parameters receive updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .compose import Conj, Leaf, expr_energy_tensor, leaves, rebind_codes
from .models import ConceptCode, EnergyModel
from .sampler import ReplayBuffer, SamplerConfig, run_chain
from .tensor import Tensor, spectral_norm_estimate


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, step: int, stats: dict):
        self.step = step
        self.stats = stats
        pretty = ", ".join(f"{k}={v:.4g}" for k, v in stats.items())
        super().__init__(f"non-finite loss at step {step} ({pretty})")


@dataclass
class TrainerConfig:
    learning_rate: float = 3e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.999
    batch_size: int = 128
    l2_energy_coeff: float = 1.0
    negative_steps: int = 80
    epochs: int = 1
    seed: int = 0
    # Langevin settings for negative chains
    step_size: float = 0.05
    noise_scale: float | None = None
    clamp: tuple[float, float] = (0.0, 1.0)
    buffer_capacity: int = 50000
    replacement_rate: float = 0.05
    spectral_norm: bool = True
    spectral_iters: int = 1
    max_steps: int | None = None       # optional cap on total optimizer steps

    def sampler_config(self, seed: int = 0) -> SamplerConfig:
        return SamplerConfig(steps=self.negative_steps, step_size=self.step_size,
                             noise_scale=self.noise_scale, init="buffer",
                             clamp=self.clamp, seed=seed)


@dataclass
class TrainBatch:
    """Positive samples from the data, negative samples from the model."""

    positives: np.ndarray
    negatives: np.ndarray
    codes: dict[str, ConceptCode]

    def __post_init__(self):
        if len(self.positives) == 0:
            raise TrainingError("empty training batch")
        if len(self.positives) != len(self.negatives):
            raise TrainingError("positive and negative batches must have equal counts")


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_update(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                state: AdamState, config: TrainerConfig, eps: float = 1e-8):
    """Standard bias-corrected Adam; parameters are updated in place."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.t += 1
    t = state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.m[name] = m
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        params[name].data -= config.learning_rate * mhat / (np.sqrt(vhat) + eps)


def apply_spectral_norm(model: EnergyModel, iters: int = 1):
    """Divide each kernel by max(1, estimated top singular value)."""
    for name in model.kernel_names():
        p = model.params[name]
        w2d = p.data.reshape(p.data.shape[0], -1) if p.data.ndim > 2 else p.data
        state = model.spectral_state.get(name)
        sigma, state = spectral_norm_estimate(w2d, iters=iters, state=state, seed=0)
        model.spectral_state[name] = state
        if sigma > 1.0:
            p.data /= sigma


def cd_gradient(train_expr, trainable_model: EnergyModel, registry,
                batch: TrainBatch, l2_energy_coeff: float = 1.0
                ) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    """Gradient of the CD loss for the trainable model's parameters.

    Energies of both batches are taken under the full training expression;
    frozen registry models are evaluated detached so no gradient can reach
    them, and the negatives enter as plain data (no gradient flows through
    the sampling that produced them).
    """
    expr = rebind_codes(train_expr, batch.codes, registry)
    trainable_model.zero_grads()
    tset = frozenset([trainable_model.model_id])
    e_pos = expr_energy_tensor(expr, registry, Tensor(batch.positives), tset)
    e_neg = expr_energy_tensor(expr, registry, Tensor(batch.negatives), tset)
    cd = T.subtract(T.mean_reduce(e_pos), T.mean_reduce(e_neg))
    l2 = T.add(T.mean_reduce(T.square(e_pos)), T.mean_reduce(T.square(e_neg)))
    loss = T.add(cd, T.multiply(l2, l2_energy_coeff))
    loss.backward()
    stats = {
        "cd_loss": float(cd.data),
        "l2_loss": float(l2.data) * l2_energy_coeff,
        "mean_pos_energy": float(e_pos.data.mean()),
        "mean_neg_energy": float(e_neg.data.mean()),
    }
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for name, p in trainable_model.params.items()}
    return grads, stats


def _dataset_codes(dataset, idx) -> dict[str, ConceptCode]:
    return {kind: ConceptCode(kind, values[idx], dataset.names.get(kind))
            for kind, values in dataset.concepts.items()}


def _expr_concept_kinds(expr, registry):
    return {registry[leaf.model_id].arch.concept_kind for leaf in leaves(expr)}


def train_expression(train_expr, trainable_model: EnergyModel, dataset,
                     config: TrainerConfig, buffer: ReplayBuffer | None = None,
                     registry=None) -> list[dict]:
    """Train one model inside an arbitrary expression; returns loss history."""
    registry = dict(registry) if registry else {}
    registry[trainable_model.model_id] = trainable_model

    needed = _expr_concept_kinds(train_expr, registry)
    missing = needed - set(dataset.concepts)
    if missing:
        raise TrainingError(f"dataset lacks concept labels {sorted(missing)}")

    if buffer is None:
        buffer = ReplayBuffer(config.buffer_capacity, config.replacement_rate,
                              seed=config.seed)
    rng = np.random.default_rng(config.seed)
    seeds = np.random.SeedSequence(config.seed)
    state = AdamState()
    history = []
    n = len(dataset)
    bsz = min(config.batch_size, n)
    step = 0
    for _epoch in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n - bsz + 1, bsz):
            if config.max_steps is not None and step >= config.max_steps:
                return history
            idx = perm[start:start + bsz]
            codes = _dataset_codes(dataset, idx)
            bound = rebind_codes(train_expr, codes, registry)
            chain_rng = np.random.default_rng(seeds.spawn(1)[0])
            negatives, _ = run_chain(bound, registry, config.sampler_config(),
                                     count=bsz, buffer=buffer, rng=chain_rng)
            batch = TrainBatch(dataset.samples[idx], negatives, codes)
            grads, stats = cd_gradient(train_expr, trainable_model, registry,
                                       batch, config.l2_energy_coeff)
            loss = stats["cd_loss"] + stats["l2_loss"]
            if not math.isfinite(loss):
                raise TrainingDiverged(step, stats)
            adam_update(trainable_model.params, grads, state, config)
            if config.spectral_norm:
                apply_spectral_norm(trainable_model, config.spectral_iters)
            history.append({"step": step, **stats})
            step += 1
    return history


def train(model: EnergyModel, dataset, config: TrainerConfig,
          buffer: ReplayBuffer | None = None) -> list[dict]:
    """Contrastive-divergence training of a single conditional model."""
    kind = model.arch.concept_kind
    if kind not in dataset.concepts:
        raise TrainingError(f"dataset lacks {kind!r} labels required by the model")
    expr = Leaf(model.model_id, code=_dataset_codes(dataset, slice(0, 1))[kind])
    return train_expression(expr, model, dataset, config, buffer)


def continual_train(frozen_exprs, new_model: EnergyModel, dataset,
                    config: TrainerConfig, registry,
                    buffer: ReplayBuffer | None = None) -> list[dict]:
    """Train a new concept in conjunction with frozen, earlier models.

    The training expression is Conj[frozen..., Leaf(new)]; negatives are
    sampled from the conjunction, and only the new model's parameters are
    updated.
    """
    kind = new_model.arch.concept_kind
    if kind not in dataset.concepts:
        raise TrainingError(f"dataset lacks {kind!r} labels required by the model")
    children = list(frozen_exprs)
    children.append(Leaf(new_model.model_id, code=_dataset_codes(dataset, slice(0, 1))[kind]))
    return train_expression(Conj(children), new_model, dataset, config,
                            buffer=buffer, registry=registry)


# -- joint MSE baseline ------------------------------------------------------


class GeneratorModel:
    """Feedforward generator mapping concept codes to samples, MSE-trained."""

    def __init__(self, code_dim: int, sample_shape: tuple[int, ...],
                 params: dict[str, Tensor], model_id: str = "mse-generator"):
        self.code_dim = code_dim
        self.sample_shape = tuple(sample_shape)
        self.params = params
        self.model_id = model_id

    def forward(self, codes, trainable: bool = False) -> Tensor:
        cs = codes if isinstance(codes, Tensor) else Tensor(codes)
        p = self.params if trainable else {k: v.detach() for k, v in self.params.items()}
        h = T.swish(T.affine(cs, p["h0.w"], p["h0.b"]))
        h = T.swish(T.affine(h, p["h1.w"], p["h1.b"]))
        out = T.affine(h, p["out.w"], p["out.b"])
        return T.reshape(out, (cs.data.shape[0],) + self.sample_shape)

    def generate(self, codes: np.ndarray) -> np.ndarray:
        return self.forward(codes).data

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None


def init_generator(code_dim: int, sample_shape, seed: int,
                   hidden: tuple[int, int] = (128, 256)) -> GeneratorModel:
    rng = np.random.default_rng(seed)
    out_dim = int(np.prod(sample_shape))
    params = {}
    dims = [code_dim, hidden[0], hidden[1], out_dim]
    names = ["h0", "h1", "out"]
    for name, (fi, fo) in zip(names, zip(dims[:-1], dims[1:])):
        lim = 1.0 / np.sqrt(fi)
        params[name + ".w"] = Tensor(rng.uniform(-lim, lim, (fi, fo)), requires_grad=True)
        params[name + ".b"] = Tensor(np.zeros(fo), requires_grad=True)
    return GeneratorModel(code_dim, tuple(sample_shape), params, f"mse-generator-{seed}")


def save_generator(model: GeneratorModel, path):
    import io
    import json
    import struct

    from .models import _write_tensor_record

    manifest = {"type": "generator", "model_id": model.model_id,
                "code_dim": model.code_dim, "sample_shape": list(model.sample_shape)}
    mjson = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(b"EBMC")
    buf.write(struct.pack("<H", 1))
    buf.write(struct.pack("<I", len(mjson)))
    buf.write(mjson)
    for name in sorted(model.params):
        _write_tensor_record(buf, name, model.params[name].data)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_generator(path) -> GeneratorModel:
    import json
    import struct

    from .models import CheckpointError, _read_exact, _read_tensor_record

    with open(path, "rb") as fh:
        offset = 0
        raw, offset = _read_exact(fh, 4, offset, "magic")
        if raw != b"EBMC":
            raise CheckpointError("bad generator checkpoint magic", 0)
        _, offset = _read_exact(fh, 2, offset, "version")
        raw, offset = _read_exact(fh, 4, offset, "manifest length")
        (mlen,) = struct.unpack("<I", raw)
        raw, offset = _read_exact(fh, mlen, offset, "manifest")
        manifest = json.loads(raw.decode("utf-8"))
        if manifest.get("type") != "generator":
            raise CheckpointError("not a generator checkpoint", 10)
        params = {}
        while True:
            rec = _read_tensor_record(fh, offset)
            if rec is None:
                break
            name, data, offset = rec
            params[name] = Tensor(data, requires_grad=True)
    return GeneratorModel(int(manifest["code_dim"]), tuple(manifest["sample_shape"]),
                          params, manifest["model_id"])


def train_joint_baseline(dataset, config: TrainerConfig,
                         kinds: tuple[str, ...] = ("position", "size")) -> GeneratorModel:
    """Train the joint MSE generator on (concept pair -> sample) supervision."""
    for kind in kinds:
        if kind not in dataset.concepts:
            raise TrainingError(f"dataset lacks {kind!r} labels required by the baseline")
    codes = np.concatenate([dataset.concepts[k] for k in kinds], axis=1)
    model = init_generator(codes.shape[1], dataset.samples.shape[1:], config.seed)
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    n = len(dataset)
    bsz = min(config.batch_size, n)
    step = 0
    for _epoch in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n - bsz + 1, bsz):
            if config.max_steps is not None and step >= config.max_steps:
                return model
            idx = perm[start:start + bsz]
            model.zero_grads()
            out = model.forward(codes[idx], trainable=True)
            err = T.subtract(out, Tensor(dataset.samples[idx]))
            loss = T.mean_reduce(T.square(err))
            loss.backward()
            if not math.isfinite(float(loss.data)):
                raise TrainingDiverged(step, {"mse": float(loss.data)})
            grads = {name: p.grad for name, p in model.params.items() if p.grad is not None}
            adam_update(model.params, grads, state, config)
            step += 1
    return model
