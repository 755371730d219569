"""Plain-text and image artifact writers shared by the CLI.

All writers are deterministic: fixed float formatting (shortest round-trip
repr), sorted keys, no timestamps, so identical runs produce byte-identical
artifacts.
"""

from __future__ import annotations

import json
import struct

import numpy as np


def fmt_float(v) -> str:
    return repr(float(v))


def write_ppm(path, image: np.ndarray):
    """Binary P6 image from a (3, H, W) array in [-1, 1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {image.shape}")
    img01 = np.clip((image + 1.0) / 2.0, 0.0, 1.0)
    pixels = np.round(img01 * 255.0).astype(np.uint8).transpose(1, 2, 0)
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_pgm16(path, values: np.ndarray, sidecar_path=None):
    """Binary 16-bit P5 map, min-max normalized per map.

    The true (min, max) pair is recorded in a sidecar text file so the
    normalization is invertible.
    """
    v = np.asarray(values, dtype=np.float64)
    vmin, vmax = float(v.min()), float(v.max())
    scale = (v - vmin) / (vmax - vmin) if vmax > vmin else np.zeros_like(v)
    pixels = np.round(scale * 65535.0).astype(">u2")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(pixels.tobytes())
    if sidecar_path is not None:
        with open(sidecar_path, "w", encoding="utf-8") as fh:
            fh.write(f"min {fmt_float(vmin)}\nmax {fmt_float(vmax)}\n")


def read_ppm(path) -> np.ndarray:
    """Inverse of write_ppm: returns a (3, H, W) array in [-1, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4:
        raise ValueError("not a binary PPM file")
    w, h = (int(t) for t in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=w * h * 3)
    img01 = pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
    return img01 * 2.0 - 1.0


def samples_csv(samples: np.ndarray, dim_names: list[str] | None = None) -> str:
    """One row per sample; header names the dimensions."""
    flat = samples.reshape(len(samples), -1)
    if dim_names is None:
        dim_names = [f"d{i}" for i in range(flat.shape[1])]
    lines = [",".join(dim_names)]
    for row in flat:
        lines.append(",".join(fmt_float(v) for v in row))
    return "\n".join(lines) + "\n"


def read_samples_csv(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    return np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])


def loss_history_csv(history: list[dict]) -> str:
    cols = ["step", "cd_loss", "l2_loss", "mean_pos_energy", "mean_neg_energy"]
    lines = [",".join(cols)]
    for row in history:
        lines.append(",".join(
            str(row["step"]) if c == "step" else fmt_float(row[c]) for c in cols))
    return "\n".join(lines) + "\n"


def trace_csv(trace: np.ndarray) -> str:
    lines = ["step,mean_energy"]
    for i, v in enumerate(trace):
        lines.append(f"{i},{fmt_float(v)}")
    return "\n".join(lines) + "\n"


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def parse_config_file(path) -> dict[str, str]:
    """Flat key=value lines; '#' starts a comment."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def config_echo(values: dict) -> str:
    lines = [f"{k}={values[k]}" for k in sorted(values)]
    return "\n".join(lines) + "\n"


_ASSERT_OPS = {
    "<=": lambda a, b: a <= b,
    ">=": lambda a, b: a >= b,
    "<": lambda a, b: a < b,
    ">": lambda a, b: a > b,
    "==": lambda a, b: a == b,
}


def check_assertion(expr: str, report: dict) -> tuple[bool, str]:
    """Evaluate an assertion like "tv<=0.1" against a flattened report."""
    flat = {}

    def flatten(prefix, obj):
        if isinstance(obj, dict):
            for k, v in obj.items():
                flatten(f"{prefix}.{k}" if prefix else str(k), v)
        elif isinstance(obj, (int, float)):
            flat[prefix] = float(obj)

    flatten("", report)
    for op in ("<=", ">=", "==", "<", ">"):
        if op in expr:
            key, value = expr.split(op, 1)
            key = key.strip()
            if key not in flat:
                raise ValueError(f"assertion metric {key!r} not in report "
                                 f"(available: {', '.join(sorted(flat))})")
            ok = _ASSERT_OPS[op](flat[key], float(value))
            return ok, f"{key}={fmt_float(flat[key])} {op} {value.strip()}"
    raise ValueError(f"no comparison operator in assertion {expr!r}")
