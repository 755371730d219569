"""Deterministic synthetic concept datasets.

Two families:

* 2D point clouds drawn from per-concept Gaussians or annuli with known
  closed-form densities, used to verify composition operators against
  exactly normalized grids.
* Tiny raster scenes (3 x H x W, values in [-1, 1]) with one central object
  labeled by position, size, color and shape, plus background clutter and a
  global brightness jitter.

Every generator is a pure function of (spec, seed): regeneration is
bitwise identical.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .models import ConceptCode

COLOR_RGB = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.85, 0.20),
    "blue": (0.20, 0.30, 0.90),
    "purple": (0.60, 0.20, 0.80),
    "yellow": (0.92, 0.88, 0.15),
    "cyan": (0.15, 0.85, 0.85),
    "orange": (0.95, 0.55, 0.10),
    "magenta": (0.90, 0.20, 0.70),
}

SHAPE_NAMES = ("cube", "sphere", "cylinder")

DATASET_MAGIC = b"EBMD"
DATASET_VERSION = 1

BACKGROUND = 0.15
MAX_RADIUS_FRAC = 0.75   # radius_px = size * MAX_RADIUS_FRAC * (H / 2)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianCluster:
    mean: tuple[float, float]
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise DatasetError(f"degenerate covariance: sigma={self.sigma}")


@dataclass(frozen=True)
class RingCluster:
    center: tuple[float, float]
    radius: float
    width: float

    def __post_init__(self):
        if not (self.radius > 0 and self.width > 0):
            raise DatasetError("ring radius and width must be positive")


@dataclass(frozen=True)
class PointsSpec:
    clusters: tuple

    def to_dict(self):
        out = []
        for c in self.clusters:
            if isinstance(c, GaussianCluster):
                out.append({"type": "gaussian", "mean": list(c.mean), "sigma": c.sigma})
            else:
                out.append({"type": "ring", "center": list(c.center),
                            "radius": c.radius, "width": c.width})
        return {"type": "points", "clusters": out}

    @classmethod
    def from_dict(cls, d):
        clusters = []
        for c in d["clusters"]:
            if c["type"] == "gaussian":
                clusters.append(GaussianCluster(tuple(c["mean"]), c["sigma"]))
            elif c["type"] == "ring":
                clusters.append(RingCluster(tuple(c["center"]), c["radius"], c["width"]))
            else:
                raise DatasetError(f"unknown cluster type {c['type']!r}")
        return cls(tuple(clusters))


@dataclass(frozen=True)
class SceneSpec:
    size: int = 16
    palette: tuple[str, ...] = ("red", "green", "blue", "purple", "yellow")
    shapes: tuple[str, ...] = ("cube", "sphere", "cylinder")
    size_range: tuple[float, float] = (0.25, 0.45)
    position_range: tuple[float, float] = (0.24, 0.76)
    clutter: tuple[int, int] = (0, 2)
    clutter_excludes: tuple[str, ...] = ()
    jitter: float = 0.08
    jitter_range: tuple[float, float] | None = None   # overrides +-jitter when set

    def __post_init__(self):
        if self.size not in (16, 32):
            raise DatasetError("raster size must be 16 or 32")
        for name in self.palette + self.clutter_excludes:
            if name not in COLOR_RGB:
                raise DatasetError(f"unknown color {name!r}")
        for name in self.shapes:
            if name not in SHAPE_NAMES:
                raise DatasetError(f"unknown shape {name!r}")
        lo, hi = self.size_range
        if not 0 < lo <= hi <= 1:
            raise DatasetError("size_range must satisfy 0 < lo <= hi <= 1")

    def to_dict(self):
        return {"type": "scenes", "size": self.size, "palette": list(self.palette),
                "shapes": list(self.shapes), "size_range": list(self.size_range),
                "position_range": list(self.position_range), "clutter": list(self.clutter),
                "clutter_excludes": list(self.clutter_excludes), "jitter": self.jitter,
                "jitter_range": list(self.jitter_range) if self.jitter_range else None}

    @classmethod
    def from_dict(cls, d):
        return cls(size=int(d["size"]), palette=tuple(d["palette"]),
                   shapes=tuple(d["shapes"]), size_range=tuple(d["size_range"]),
                   position_range=tuple(d["position_range"]), clutter=tuple(d["clutter"]),
                   clutter_excludes=tuple(d.get("clutter_excludes", ())),
                   jitter=float(d["jitter"]),
                   jitter_range=tuple(d["jitter_range"]) if d.get("jitter_range") else None)


def spec_from_dict(d: dict):
    if d.get("type") == "points":
        return PointsSpec.from_dict(d)
    if d.get("type") == "scenes":
        return SceneSpec.from_dict(d)
    raise DatasetError(f"unknown spec type {d.get('type')!r}")


def spec_json(spec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":"))


def spec_hash(spec) -> str:
    return hashlib.sha256(spec_json(spec).encode("utf-8")).hexdigest()


class ConceptDataset:
    """Labeled samples: every declared concept kind is labeled on every item."""

    def __init__(self, samples: np.ndarray, concepts: dict[str, np.ndarray],
                 names: dict[str, tuple[str, ...]], spec, seed: int):
        self.samples = samples
        self.concepts = concepts
        self.names = names
        self.spec = spec
        self.seed = int(seed)
        for kind, vals in concepts.items():
            if len(vals) != len(samples):
                raise DatasetError(f"{kind} labels do not cover every item")

    def __len__(self):
        return len(self.samples)

    @property
    def spec_hash(self) -> str:
        return spec_hash(self.spec)

    def code(self, kind: str, idx) -> ConceptCode:
        return ConceptCode(kind, self.concepts[kind][idx], self.names.get(kind))

    def subset(self, idx) -> "ConceptDataset":
        return ConceptDataset(self.samples[idx],
                              {k: v[idx] for k, v in self.concepts.items()},
                              self.names, self.spec, self.seed)


# -- point datasets ----------------------------------------------------------


def gen_points(spec: PointsSpec, n: int, seed: int) -> ConceptDataset:
    """2D samples from per-concept Gaussians/annuli, labeled by concept.

    Items cycle through the clusters so concept marginals stay balanced.
    """
    if n < 1:
        raise DatasetError("n must be >= 1")
    if not spec.clusters:
        raise DatasetError("points spec declares no clusters")
    rng = np.random.default_rng(seed)
    samples = np.empty((n, 2))
    labels = np.empty((n, 2))
    for i in range(n):
        c = spec.clusters[i % len(spec.clusters)]
        if isinstance(c, GaussianCluster):
            samples[i] = np.asarray(c.mean) + c.sigma * rng.standard_normal(2)
            labels[i] = c.mean
        else:
            theta = rng.uniform(0.0, 2.0 * np.pi)
            rho = c.radius + c.width * rng.standard_normal()
            samples[i] = np.asarray(c.center) + rho * np.array([np.cos(theta), np.sin(theta)])
            labels[i] = c.center
    labels = np.clip(labels, 0.0, 1.0)
    return ConceptDataset(samples, {"position": labels}, {}, spec, seed)


# -- scene rendering ---------------------------------------------------------


def _shape_coverage(shape: str, cx: float, cy: float, r: float, hw: int) -> np.ndarray:
    """Soft coverage mask of one shape; centers in pixel coordinates."""
    ys, xs = np.mgrid[0:hw, 0:hw].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    if shape == "sphere":
        sdf = np.hypot(dx, dy) - r
    elif shape == "cube":
        sdf = np.maximum(np.abs(dx), np.abs(dy)) - r
    else:  # cylinder: rounded rectangle, taller than wide
        rr = 0.35 * r
        qx = np.abs(dx) - (0.75 * r - rr)
        qy = np.abs(dy) - (1.1 * r - rr)
        sdf = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0)) \
            + np.minimum(np.maximum(qx, qy), 0.0) - rr
    return np.clip(0.5 - sdf, 0.0, 1.0)


def _paint(img: np.ndarray, coverage: np.ndarray, rgb):
    for ch in range(3):
        img[ch] = img[ch] * (1.0 - coverage) + rgb[ch] * coverage


def radius_px(size_value: float, hw: int) -> float:
    return size_value * MAX_RADIUS_FRAC * (hw / 2.0)


def render_scene(spec: SceneSpec, position, size_value: float, color: str,
                 shape: str, rng: np.random.Generator) -> np.ndarray:
    """One (3, H, W) raster in [-1, 1]; clutter under the target object."""
    hw = spec.size
    img = np.full((3, hw, hw), BACKGROUND)
    lo, hi = spec.clutter
    count = int(rng.integers(lo, hi + 1)) if hi > lo else lo
    allowed = [c for c in COLOR_RGB if c not in spec.clutter_excludes]
    for _ in range(count):
        cshape = SHAPE_NAMES[int(rng.integers(len(SHAPE_NAMES)))]
        ccolor = allowed[int(rng.integers(len(allowed)))]
        cpos = rng.uniform(0.1, 0.9, size=2)
        cr = rng.uniform(0.6, 1.4)
        cov = _shape_coverage(cshape, cpos[0] * hw - 0.5, cpos[1] * hw - 0.5, cr, hw)
        _paint(img, cov, COLOR_RGB[ccolor])
    r = radius_px(size_value, hw)
    cov = _shape_coverage(shape, position[0] * hw - 0.5, position[1] * hw - 0.5, r, hw)
    _paint(img, cov, COLOR_RGB[color])
    if spec.jitter_range is not None:
        j = rng.uniform(*spec.jitter_range) * (1 if rng.random() < 0.5 else -1)
    else:
        j = rng.uniform(-spec.jitter, spec.jitter)
    img = np.clip(img * (1.0 + j), 0.0, 1.0)
    return img * 2.0 - 1.0


def _object_fits(position, size_value: float, hw: int) -> bool:
    # cylinder is the tallest shape: 1.1 * r plus one pixel of soft edge
    extent = 1.1 * radius_px(size_value, hw) + 1.0
    cx, cy = position[0] * hw - 0.5, position[1] * hw - 0.5
    return (cx - extent >= -0.5 and cx + extent <= hw - 0.5
            and cy - extent >= -0.5 and cy + extent <= hw - 0.5)


def gen_scenes(spec: SceneSpec, n: int, seed: int, max_retries: int = 100) -> ConceptDataset:
    """Rasters with one labeled central object plus clutter and jitter."""
    if n < 1:
        raise DatasetError("n must be >= 1")
    rng = np.random.default_rng(seed)
    hw = spec.size
    samples = np.empty((n, 3, hw, hw))
    pos = np.empty((n, 2))
    sizes = np.empty((n, 1))
    color_idx = np.empty(n, dtype=np.int64)
    shape_idx = np.empty(n, dtype=np.int64)
    p0, p1 = spec.position_range
    for i in range(n):
        color_idx[i] = i % len(spec.palette)
        shape_idx[i] = (i // len(spec.palette)) % len(spec.shapes)
        s = rng.uniform(*spec.size_range)
        for attempt in range(max_retries + 1):
            p = rng.uniform(p0, p1, size=2)
            if _object_fits(p, s, hw):
                break
        else:
            raise DatasetError(
                f"object of size {s:.3f} cannot fit in frame after {max_retries} retries")
        pos[i] = p
        sizes[i, 0] = s
        samples[i] = render_scene(spec, p, s, spec.palette[color_idx[i]],
                                  spec.shapes[shape_idx[i]], rng)
    concepts = {
        "position": pos,
        "size": sizes,
        "color": np.eye(len(spec.palette))[color_idx],
        "shape": np.eye(len(spec.shapes))[shape_idx],
    }
    names = {"color": spec.palette, "shape": spec.shapes}
    return ConceptDataset(samples, concepts, names, spec, seed)


# -- splits and variants -----------------------------------------------------


def position_lattice(spec: SceneSpec, cells: int = 20) -> np.ndarray:
    """Cell-center positions of a cells x cells lattice over the position range."""
    lo, hi = spec.position_range
    step = (hi - lo) / cells
    centers = lo + step * (np.arange(cells) + 0.5)
    gx, gy = np.meshgrid(centers, centers, indexing="ij")
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def extrapolation_split(spec: SceneSpec, p: float, n: int, seed: int,
                        cells: int = 20, size_levels: int = 4,
                        shape: str = "sphere", color: str = "red"
                        ) -> tuple[ConceptDataset, list[tuple[np.ndarray, float]]]:
    """Cross-product split: all sizes only in the top-right p% of positions.

    Positions on a ``cells x cells`` lattice are ranked by x + y descending;
    the top ceil(p% of cells) carry all size levels, the rest only the
    largest.  Returns the train set and the held-out (position, size) combos.
    """
    if not 0 < p <= 100:
        raise DatasetError("p must lie in (0, 100]")
    if n < 1:
        raise DatasetError("n must be >= 1")
    lattice = position_lattice(spec, cells)
    order = np.lexsort((-lattice[:, 0], -(lattice[:, 0] + lattice[:, 1])))
    k = int(np.ceil(p / 100.0 * len(lattice)))
    all_size_cells = set(order[:k].tolist())
    levels = np.linspace(spec.size_range[0], spec.size_range[1], size_levels)

    rng = np.random.default_rng(seed)
    hw = spec.size
    samples = np.empty((n, 3, hw, hw))
    pos = np.empty((n, 2))
    sizes = np.empty((n, 1))
    for i in range(n):
        cell = int(rng.integers(len(lattice)))
        if cell in all_size_cells:
            s = float(levels[int(rng.integers(size_levels))])
        else:
            s = float(levels[-1])
        p_xy = lattice[cell]
        pos[i] = p_xy
        sizes[i, 0] = s
        samples[i] = render_scene(spec, p_xy, s, color, shape, rng)

    held_out = [(lattice[cell], float(level))
                for cell in range(len(lattice)) if cell not in all_size_cells
                for level in levels[:-1]]
    concepts = {"position": pos, "size": sizes}
    return ConceptDataset(samples, concepts, {}, spec, seed), held_out


def ood_variants(spec: SceneSpec, n: int, seed: int) -> dict[str, ConceptDataset]:
    """Color / Light / Size / Type test sets outside the training ranges."""
    unseen_colors = tuple(c for c in COLOR_RGB if c not in spec.palette)
    if not unseen_colors:
        raise DatasetError("no colors left outside the training palette")
    unseen_shapes = tuple(s for s in SHAPE_NAMES if s not in spec.shapes)
    if not unseen_shapes:
        raise DatasetError("no shape is absent from training")
    smax = spec.size_range[1]
    if 2.0 * smax > 1.0:
        raise DatasetError("doubled sizes exceed the size-code range")
    big = (2.0 * spec.size_range[0], 2.0 * smax)
    # narrow the position band so doubled objects still fit in frame
    margin = min(0.5 - 1e-3, (1.1 * radius_px(big[1], spec.size) + 1.5) / spec.size)
    variants = {
        "color": replace(spec, palette=unseen_colors),
        "light": replace(spec, jitter_range=(spec.jitter + 0.1, spec.jitter + 0.25)),
        "size": replace(spec, size_range=big,
                        position_range=(margin, 1.0 - margin)),
        "type": replace(spec, shapes=unseen_shapes),
    }
    out = {}
    for i, (name, vspec) in enumerate(sorted(variants.items())):
        out[name] = gen_scenes(vspec, n, seed + i + 1)
    return out


# -- builtins ----------------------------------------------------------------

BUILTIN_SPECS = {
    "scenes16": SceneSpec(),
    "cubes16": SceneSpec(palette=("purple",), shapes=("cube",)),
    "shapes16": SceneSpec(palette=("purple",)),
    "greencube16": SceneSpec(palette=("green",), shapes=("cube",), clutter=(2, 4),
                             clutter_excludes=("green",)),
    "spherecube16": SceneSpec(palette=("red", "blue", "purple", "yellow"),
                              shapes=("cube", "sphere"), jitter=0.08),
    "extrap16": SceneSpec(palette=("red",), shapes=("sphere",), clutter=(0, 0),
                          jitter=0.04),
    "points2g": PointsSpec((GaussianCluster((0.35, 0.5), 0.05),
                            GaussianCluster((0.65, 0.5), 0.05))),
}


def builtin_spec(name: str):
    try:
        return BUILTIN_SPECS[name]
    except KeyError:
        raise DatasetError(f"unknown builtin spec {name!r} "
                           f"(available: {', '.join(sorted(BUILTIN_SPECS))})") from None


def generate(spec, n: int, seed: int) -> ConceptDataset:
    if isinstance(spec, PointsSpec):
        return gen_points(spec, n, seed)
    return gen_scenes(spec, n, seed)


# -- dataset files -----------------------------------------------------------


def save_dataset(ds: ConceptDataset, path):
    """Header (spec JSON, seed, count, concept layout) + per-item records."""
    layout = [[kind, int(ds.concepts[kind].shape[1])] for kind in sorted(ds.concepts)]
    header = {
        "spec": ds.spec.to_dict(),
        "spec_hash": ds.spec_hash,
        "seed": ds.seed,
        "count": len(ds),
        "layout": layout,
        "names": {k: list(v) for k, v in ds.names.items()},
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<H", DATASET_VERSION))
    buf.write(struct.pack("<I", len(hjson)))
    buf.write(hjson)
    sample_shape = ds.samples.shape[1:]
    for i in range(len(ds)):
        for kind, arity in layout:
            buf.write(np.ascontiguousarray(ds.concepts[kind][i], dtype="<f4").tobytes())
        buf.write(struct.pack("<B", len(sample_shape)))
        for d in sample_shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(ds.samples[i], dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_dataset(path) -> ConceptDataset:
    from .models import CheckpointError  # same binary-container error contract

    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated dataset file while reading {what}", len(raw))
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != DATASET_MAGIC:
        raise CheckpointError("bad dataset magic", 0)
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != DATASET_VERSION:
        raise CheckpointError(f"unsupported dataset version {version}", 4)
    (hlen,) = struct.unpack("<I", take(4, "header length"))
    header = json.loads(take(hlen, "header").decode("utf-8"))
    spec = spec_from_dict(header["spec"])
    count = int(header["count"])
    layout = [(k, int(a)) for k, a in header["layout"]]
    names = {k: tuple(v) for k, v in header.get("names", {}).items()}

    concepts = {k: np.empty((count, a)) for k, a in layout}
    samples = None
    for i in range(count):
        for kind, arity in layout:
            vals = np.frombuffer(take(4 * arity, f"{kind} code"), dtype="<f4")
            concepts[kind][i] = vals.astype(np.float64)
        (rank,) = struct.unpack("<B", take(1, "sample rank"))
        dims = [struct.unpack("<I", take(4, "sample dims"))[0] for _ in range(rank)]
        n_vals = int(np.prod(dims))
        data = np.frombuffer(take(4 * n_vals, "sample values"), dtype="<f4")
        if samples is None:
            samples = np.empty((count,) + tuple(dims))
        samples[i] = data.astype(np.float64).reshape(dims)
    if off != len(raw):
        raise CheckpointError("trailing bytes after final record", off)
    return ConceptDataset(samples, concepts, names, spec, int(header["seed"]))
