"""Conditional energy networks E(x | c) over points and tiny rasters.

A model maps a sample ``x`` (2D point or CxHxW raster) and a concept code
``c`` to a single scalar energy.  Conditioning enters by concatenating the
code to the input of every dense layer; on rasters the code additionally
feeds each convolution block through a learned per-channel bias, so the
energy stays differentiable in ``c`` for concept inference.

Checkpoints are a binary container: magic ``EBMC``, a little-endian u16
format version, a length-prefixed canonical-JSON manifest, then one record
per parameter (name, rank, dims, row-major float32 values).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import SpectralState, Tensor

CONCEPT_KINDS = ("position", "size", "color", "shape", "attribute")
DISCRETE_KINDS = ("color", "shape", "attribute")

CHECKPOINT_MAGIC = b"EBMC"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    """Raised on malformed checkpoint bytes; carries the failing offset."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ConceptCode:
    """A concept conditioning vector: continuous (position, size) or one-hot.

    ``values`` is either a single code of shape (arity,) or a batch of codes
    of shape (batch, arity).  Discrete kinds carry their value names so a
    code can be formatted back to text without a registry.
    """

    __slots__ = ("kind", "values", "names")

    def __init__(self, kind: str, values, names: tuple[str, ...] | None = None):
        if kind not in CONCEPT_KINDS:
            raise ModelError(f"unknown concept kind {kind!r}")
        vals = np.ascontiguousarray(values, dtype=np.float64)
        if vals.ndim not in (1, 2) or vals.shape[-1] == 0:
            raise ModelError(f"concept values must be (arity,) or (batch, arity), got {vals.shape}")
        self.kind = kind
        self.values = vals
        self.names = tuple(names) if names is not None else None
        self._validate()

    def _validate(self):
        v = self.values.reshape(-1, self.values.shape[-1])
        if self.kind == "position":
            if v.shape[1] != 2:
                raise ModelError("position codes have arity 2")
            if np.any(v < 0.0) or np.any(v > 1.0):
                raise ModelError("position values must lie in [0, 1]^2")
        elif self.kind == "size":
            if v.shape[1] != 1:
                raise ModelError("size codes have arity 1")
            if np.any(v <= 0.0) or np.any(v > 1.0):
                raise ModelError("size values must lie in (0, 1]")
        else:
            if self.names is not None and len(self.names) != v.shape[1]:
                raise ModelError("value names must match one-hot arity")
            ok = np.all(np.isin(v, (0.0, 1.0))) and np.all(v.sum(axis=1) == 1.0)
            if not ok:
                raise ModelError(f"{self.kind} codes must be one-hot")

    @property
    def arity(self) -> int:
        return self.values.shape[-1]

    @property
    def batched(self) -> bool:
        return self.values.ndim == 2

    @property
    def label(self) -> str:
        """Value name of a single discrete code."""
        if self.kind not in DISCRETE_KINDS or self.batched:
            raise ModelError("label is only defined for single discrete codes")
        if self.names is None:
            raise ModelError("code carries no value names")
        return self.names[int(np.argmax(self.values))]

    @classmethod
    def position(cls, x: float, y: float) -> "ConceptCode":
        return cls("position", [x, y])

    @classmethod
    def size(cls, s: float) -> "ConceptCode":
        return cls("size", [s])

    @classmethod
    def one_hot(cls, kind: str, value: str | int, names: tuple[str, ...]) -> "ConceptCode":
        idx = names.index(value) if isinstance(value, str) else int(value)
        if not 0 <= idx < len(names):
            raise ModelError(f"one-hot index {idx} out of range for {names}")
        vec = np.zeros(len(names))
        vec[idx] = 1.0
        return cls(kind, vec, names)

    def tiled(self, batch: int) -> np.ndarray:
        """Code values as a (batch, arity) array."""
        if self.batched:
            if self.values.shape[0] != batch:
                raise ModelError(f"batched code of {self.values.shape[0]} codes used with batch {batch}")
            return self.values
        return np.broadcast_to(self.values, (batch, self.arity))

    def __eq__(self, other):
        return (isinstance(other, ConceptCode) and self.kind == other.kind
                and self.values.shape == other.values.shape
                and np.array_equal(self.values, other.values)
                and self.names == other.names)

    __hash__ = None

    def __repr__(self):
        return f"ConceptCode({self.kind!r}, {self.values.tolist()})"


@dataclass(frozen=True)
class Arch:
    """Architecture descriptor for an energy network."""

    input_kind: str                      # "point2d" | "raster"
    concept_kind: str
    concept_arity: int
    value_names: tuple[str, ...] | None = None
    raster_shape: tuple[int, int, int] | None = None   # (C, H, W)
    hidden: tuple[int, ...] = (128, 128, 128)
    conv_channels: tuple[int, ...] = (16, 32)
    dense_width: int = 64

    def __post_init__(self):
        if self.input_kind not in ("point2d", "point1d", "raster"):
            raise ModelError(f"unsupported input kind {self.input_kind!r}")
        if self.concept_kind not in CONCEPT_KINDS:
            raise ModelError(f"unsupported concept kind {self.concept_kind!r}")
        if self.input_kind == "raster":
            if self.raster_shape is None or len(self.raster_shape) != 3:
                raise ModelError("raster models need a (C, H, W) raster_shape")
            _, h, w = self.raster_shape
            if h % 4 or w % 4 or h > 32 or w > 32:
                raise ModelError("raster extent must be a multiple of 4 and at most 32")
        if self.concept_kind in DISCRETE_KINDS and self.value_names is not None \
                and len(self.value_names) != self.concept_arity:
            raise ModelError("value_names must match concept arity")

    @property
    def input_dim(self) -> int:
        if self.input_kind == "point2d":
            return 2
        if self.input_kind == "point1d":
            return 1
        c, h, w = self.raster_shape
        return c * h * w

    @property
    def sample_shape(self) -> tuple[int, ...]:
        if self.input_kind == "raster":
            return tuple(self.raster_shape)
        return (self.input_dim,)

    def to_dict(self) -> dict:
        return {
            "input_kind": self.input_kind,
            "concept_kind": self.concept_kind,
            "concept_arity": self.concept_arity,
            "value_names": list(self.value_names) if self.value_names else None,
            "raster_shape": list(self.raster_shape) if self.raster_shape else None,
            "hidden": list(self.hidden),
            "conv_channels": list(self.conv_channels),
            "dense_width": self.dense_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Arch":
        try:
            return cls(
                input_kind=d["input_kind"],
                concept_kind=d["concept_kind"],
                concept_arity=int(d["concept_arity"]),
                value_names=tuple(d["value_names"]) if d.get("value_names") else None,
                raster_shape=tuple(d["raster_shape"]) if d.get("raster_shape") else None,
                hidden=tuple(d.get("hidden", (128, 128, 128))),
                conv_channels=tuple(d.get("conv_channels", (16, 32))),
                dense_width=int(d.get("dense_width", 64)),
            )
        except KeyError as exc:
            raise ModelError(f"arch descriptor missing field {exc}") from exc


class EnergyModel:
    """A parameterized scalar energy network with named parameters."""

    def __init__(self, arch: Arch, params: dict[str, Tensor], model_id: str):
        self.arch = arch
        self.params = params
        self.model_id = model_id
        self.spectral_state: dict[str, SpectralState] = {}

    def kernel_names(self) -> list[str]:
        """Weight matrices subject to spectral normalization (not biases)."""
        return [n for n in self.params if n.endswith(".w")]

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def _check_inputs(self, xs: np.ndarray, cs: np.ndarray):
        if xs.shape[1:] != self.arch.sample_shape:
            raise ModelError(
                f"model {self.model_id}: sample shape {xs.shape[1:]} does not match "
                f"arch {self.arch.sample_shape}")
        if cs.shape != (xs.shape[0], self.arch.concept_arity):
            raise ModelError(
                f"model {self.model_id}: concept shape {cs.shape} does not match "
                f"arity {self.arch.concept_arity}")

    def energy_batch(self, xs, cs, trainable: bool = False) -> Tensor:
        """Energies of a batch: xs (B, ...sample), cs (B, arity) -> (B,).

        With ``trainable`` False the parameters are detached, so gradients
        flow only into the inputs; evaluation never mutates parameters.
        """
        xs_t = xs if isinstance(xs, Tensor) else Tensor(xs)
        if isinstance(cs, ConceptCode):
            if cs.kind != self.arch.concept_kind:
                raise ModelError(
                    f"model {self.model_id} conditions on {self.arch.concept_kind}, "
                    f"got {cs.kind}")
            cs = cs.tiled(xs_t.data.shape[0])
        cs_t = cs if isinstance(cs, Tensor) else Tensor(cs)
        self._check_inputs(xs_t.data, cs_t.data)
        p = self.params if trainable else {k: v.detach() for k, v in self.params.items()}
        if self.arch.input_kind == "raster":
            return self._forward_raster(p, xs_t, cs_t)
        return self._forward_point(p, xs_t, cs_t)

    def _forward_point(self, p, xs, cs):
        h = xs
        for i in range(len(self.arch.hidden)):
            h = T.swish(T.affine(T.concat([h, cs]), p[f"h{i}.w"], p[f"h{i}.b"]))
        e = T.affine(T.concat([h, cs]), p["out.w"], p["out.b"])
        return T.reshape(e, (xs.data.shape[0],))

    def _forward_raster(self, p, xs, cs):
        h = xs
        for i in range(len(self.arch.conv_channels)):
            h = T.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], pad=1)
            h = T.channel_bias(h, T.affine(cs, p[f"cond{i}.w"], p[f"cond{i}.b"]))
            h = T.mean_pool(T.swish(h), 2)
        h = T.reshape(h, (xs.data.shape[0], -1))
        h = T.swish(T.affine(T.concat([h, cs]), p["dense.w"], p["dense.b"]))
        e = T.affine(T.concat([h, cs]), p["out.w"], p["out.b"])
        return T.reshape(e, (xs.data.shape[0],))


def init_model(arch: Arch, seed: int, model_id: str | None = None) -> EnergyModel:
    """Fresh model with fan-in-scaled uniform weights, deterministic in seed.

    The output layer is scaled by 0.01 so freshly initialized energies sit
    near zero and early Langevin steps are noise-dominated.
    """
    rng = np.random.default_rng(seed)
    a = arch.concept_arity
    params: dict[str, Tensor] = {}

    def mat(name, fan_in, fan_out, scale=1.0):
        lim = scale / np.sqrt(fan_in)
        params[name + ".w"] = Tensor(rng.uniform(-lim, lim, (fan_in, fan_out)), requires_grad=True)
        params[name + ".b"] = Tensor(np.zeros(fan_out), requires_grad=True)

    if arch.input_kind == "raster":
        c, h, w = arch.raster_shape
        cin = c
        for i, cout in enumerate(arch.conv_channels):
            lim = 1.0 / np.sqrt(cin * 9)
            params[f"conv{i}.w"] = Tensor(rng.uniform(-lim, lim, (cout, cin, 3, 3)), requires_grad=True)
            params[f"conv{i}.b"] = Tensor(np.zeros(cout), requires_grad=True)
            mat(f"cond{i}", a, cout)
            cin = cout
        flat = arch.conv_channels[-1] * (h // (2 ** len(arch.conv_channels))) ** 2
        mat("dense", flat + a, arch.dense_width)
        mat("out", arch.dense_width + a, 1, scale=0.01)
    else:
        d = arch.input_dim
        for i, width in enumerate(arch.hidden):
            mat(f"h{i}", d + a, width)
            d = width
        mat("out", d + a, 1, scale=0.01)

    mid = model_id if model_id is not None else f"ebm-{arch.concept_kind}-{seed}"
    return EnergyModel(arch, params, mid)


def energy(model, x, c: ConceptCode) -> float:
    """Scalar energy of a single sample under a single concept code."""
    xs = np.asarray(x, dtype=np.float64)[None]
    out = model.energy_batch(xs, c.tiled(1))
    e = float(out.data[0])
    if not np.isfinite(e):
        raise ModelError(f"model {model.model_id}: non-finite energy")
    return e


def grad_x(model, x, c: ConceptCode) -> np.ndarray:
    """Gradient of the energy with respect to the sample only."""
    xs = Tensor(np.asarray(x, dtype=np.float64)[None], requires_grad=True)
    out = model.energy_batch(xs, c.tiled(1))
    out.sum().backward()
    return xs.grad[0]


# -- analytic models for oracles and tests ----------------------------------


class QuadraticModel:
    """Analytic energy E(x|c) = ||x - c||^2 / (2 sigma^2); no parameters.

    Its normalized density on a grid is an isotropic Gaussian, which gives
    closed-form oracles for composition checks.
    """

    def __init__(self, sigma: float = 1.0, model_id: str = "quad",
                 input_kind: str = "point2d"):
        dim = 2 if input_kind == "point2d" else 1
        kind = "position" if dim == 2 else "size"
        self.arch = Arch(input_kind=input_kind, concept_kind=kind, concept_arity=dim)
        self.sigma = float(sigma)
        self.model_id = model_id

    def energy_batch(self, xs, cs, trainable: bool = False) -> Tensor:
        xs_t = xs if isinstance(xs, Tensor) else Tensor(xs)
        if isinstance(cs, ConceptCode):
            cs = cs.tiled(xs_t.data.shape[0])
        cs_t = cs if isinstance(cs, Tensor) else Tensor(cs)
        d = T.subtract(xs_t, cs_t)
        return T.sum_reduce(T.square(d), axis=1) * (0.5 / self.sigma ** 2)


class ConstantModel:
    """Analytic energy that ignores its input: E(x|c) = value.

    Carries a default concept code so bare DSL leaves like ``c()`` bind.
    """

    def __init__(self, value: float, model_id: str = "const",
                 input_kind: str = "point2d"):
        dim = 2 if input_kind == "point2d" else 1
        kind = "position" if dim == 2 else "size"
        self.arch = Arch(input_kind=input_kind, concept_kind=kind, concept_arity=dim)
        self.value = float(value)
        self.model_id = model_id
        self.default_code = (ConceptCode.position(0.5, 0.5) if dim == 2
                             else ConceptCode.size(0.5))

    def energy_batch(self, xs, cs, trainable: bool = False) -> Tensor:
        xs_t = xs if isinstance(xs, Tensor) else Tensor(xs)
        flat = T.reshape(xs_t, (xs_t.data.shape[0], -1))
        return T.sum_reduce(flat * 0.0, axis=1) + self.value


# -- checkpoint serialization ------------------------------------------------


def _write_tensor_record(buf, name: str, data: np.ndarray):
    enc = name.encode("utf-8")
    buf.write(struct.pack("<H", len(enc)))
    buf.write(enc)
    buf.write(struct.pack("<B", data.ndim))
    for d in data.shape:
        buf.write(struct.pack("<I", d))
    buf.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_exact(buf, n: int, offset: int, what: str) -> tuple[bytes, int]:
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated file while reading {what}", offset + len(b))
    return b, offset + n


def _read_tensor_record(buf, offset: int) -> tuple[str, np.ndarray, int] | None:
    head = buf.read(2)
    if head == b"":
        return None
    if len(head) != 2:
        raise CheckpointError("truncated record header", offset + len(head))
    offset += 2
    (nlen,) = struct.unpack("<H", head)
    raw, offset = _read_exact(buf, nlen, offset, "record name")
    name = raw.decode("utf-8")
    raw, offset = _read_exact(buf, 1, offset, f"rank of {name!r}")
    rank = raw[0]
    dims = []
    for _ in range(rank):
        raw, offset = _read_exact(buf, 4, offset, f"dims of {name!r}")
        dims.append(struct.unpack("<I", raw)[0])
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    raw, offset = _read_exact(buf, 4 * count, offset, f"values of {name!r}")
    data = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
    return name, data, offset


def save_checkpoint(model: EnergyModel, path) -> None:
    """Write the arch descriptor and parameters; values downcast to float32."""
    manifest = {
        "model_id": model.model_id,
        "arch": model.arch.to_dict(),
        "concept_kind": model.arch.concept_kind,
        "concept_arity": model.arch.concept_arity,
    }
    mjson = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(mjson)))
    buf.write(mjson)
    for name in sorted(model.params):
        _write_tensor_record(buf, name, model.params[name].data)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> EnergyModel:
    with open(path, "rb") as fh:
        offset = 0
        raw, offset = _read_exact(fh, 4, offset, "magic")
        if raw != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {raw!r}", 0)
        raw, offset = _read_exact(fh, 2, offset, "version")
        (version,) = struct.unpack("<H", raw)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}", 4)
        raw, offset = _read_exact(fh, 4, offset, "manifest length")
        (mlen,) = struct.unpack("<I", raw)
        raw, offset = _read_exact(fh, mlen, offset, "manifest")
        try:
            manifest = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt manifest: {exc}", offset - mlen) from exc
        arch = Arch.from_dict(manifest["arch"])
        params = {}
        while True:
            rec = _read_tensor_record(fh, offset)
            if rec is None:
                break
            name, data, offset = rec
            params[name] = Tensor(data, requires_grad=True)
    model = EnergyModel(arch, params, manifest["model_id"])
    expected = set(init_model(arch, seed=0).params)
    if set(params) != expected:
        raise CheckpointError(
            f"parameter set {sorted(params)} does not match arch (expected {sorted(expected)})")
    return model
