"""Langevin-dynamics MCMC over composition expressions.

Each step moves a batch of chains along the negative energy gradient with
Gaussian noise:

    x' = clamp(x - (step_size / 2) * grad E(x) + noise_scale * w),  w ~ N(0, I)

``noise_scale`` defaults to sqrt(step_size), reading the update's N(0, lambda)
as a variance; passing a different scale supports the std reading.  Samples
are clamped to the data domain after every step.  A replay buffer persists
finished chains so that most training chains restart from past negatives,
with a small uniform-noise replacement fraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .compose import (_energy_grad_raw, expr_energy_batch, expr_energy_grad_batch,
                      find_nonfinite, sample_shape, validate_expr)
from .dsl import format_expr


class SamplerError(RuntimeError):
    pass


class EmptyBufferError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    """Langevin chain settings.

    ``clamp`` is an ordered (low, high) pair applied per dimension; scalars
    apply to every dimension.
    """

    steps: int = 300
    step_size: float = 0.05
    noise_scale: float | None = None
    init: str = "uniform"              # "uniform" | "buffer"
    clamp: tuple[float, float] = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.noise_scale is not None and self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        lo, hi = self.clamp
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ValueError("clamp bounds must be finite and ordered")
        if self.init not in ("uniform", "buffer"):
            raise ValueError(f"unknown init mode {self.init!r}")

    @property
    def noise(self) -> float:
        return math.sqrt(self.step_size) if self.noise_scale is None else self.noise_scale


class ReplayBuffer:
    """Fixed-capacity store of past negative samples.

    Pushing past capacity evicts uniformly at random; sampling draws
    uniformly with replacement.  Eviction randomness is owned by the buffer
    so pushes stay deterministic for a given buffer history.
    """

    def __init__(self, capacity: int = 50000, replacement_rate: float = 0.05, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not 0.0 <= replacement_rate <= 1.0:
            raise ValueError("replacement_rate must lie in [0, 1]")
        self.capacity = capacity
        self.replacement_rate = replacement_rate
        self.entries: list[np.ndarray] = []
        self._rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self.entries)

    def push(self, samples: np.ndarray):
        for s in np.asarray(samples, dtype=np.float64):
            if len(self.entries) < self.capacity:
                self.entries.append(s.copy())
            else:
                self.entries[int(self._rng.integers(self.capacity))] = s.copy()

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be >= 0")
        if not self.entries:
            raise EmptyBufferError("cannot sample from an empty replay buffer")
        idx = rng.integers(len(self.entries), size=n)
        return np.stack([self.entries[i] for i in idx]) if n else \
            np.empty((0,) + self.entries[0].shape)


def buffer_push(buffer: ReplayBuffer, samples: np.ndarray):
    buffer.push(samples)


def buffer_sample(buffer: ReplayBuffer, n: int, rng: np.random.Generator) -> np.ndarray:
    return buffer.sample(n, rng)


def langevin_step(expr, registry, x: np.ndarray, step_size: float, noise_scale: float,
                  rng: np.random.Generator, clamp=(0.0, 1.0)) -> np.ndarray:
    """One Langevin update of a batch of chains.

    Consumes exactly one standard-normal draw per element regardless of
    noise_scale, so chains with different scales stay draw-aligned.
    """
    noise = rng.standard_normal(x.shape)
    energies, grad = expr_energy_grad_batch(expr, registry, x)
    if not np.all(np.isfinite(grad)):
        node = find_nonfinite(expr, registry, x)
        where = format_expr(node) if node is not None else format_expr(expr)
        raise SamplerError(f"non-finite gradient at expression node {where}")
    lo, hi = clamp
    return np.clip(x - 0.5 * step_size * grad + noise_scale * noise, lo, hi)


def _uniform_init(rng, count, shape, clamp):
    lo, hi = clamp
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), shape)
    return lo + (hi - lo) * rng.random((count,) + shape)


def run_chain(expr, registry, config: SamplerConfig, count: int,
              buffer: ReplayBuffer | None = None,
              rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Run ``count`` parallel chains for ``config.steps`` steps.

    Chains initialize from the replay buffer with probability
    1 - replacement_rate when one is supplied and non-empty, otherwise from
    uniform noise over the clamp domain.  Returns the final batch and the
    per-step trace of mean energies (length steps + 1, entry 0 at
    initialization).  Final samples are pushed to the buffer.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    validate_expr(expr, registry)
    shape = sample_shape(expr, registry)

    x = _uniform_init(rng, count, shape, config.clamp)
    if buffer is not None and config.init == "buffer" and len(buffer) > 0 and count > 0:
        from_buffer = rng.random(count) >= buffer.replacement_rate
        k = int(from_buffer.sum())
        if k:
            x[from_buffer] = buffer.sample(k, rng)

    trace = np.empty(config.steps + 1)
    noise = config.noise
    for step in range(config.steps):
        draw = rng.standard_normal(x.shape)
        energies, grad = _energy_grad_raw(expr, registry, x)
        if not np.all(np.isfinite(grad)):
            node = find_nonfinite(expr, registry, x)
            where = format_expr(node) if node is not None else format_expr(expr)
            raise SamplerError(f"non-finite gradient at step {step}, expression node {where}")
        trace[step] = energies.mean() if count else np.nan
        lo, hi = config.clamp
        x = np.clip(x - 0.5 * config.step_size * grad + noise * draw, lo, hi)
    trace[config.steps] = expr_energy_batch(expr, registry, x).mean() if count else np.nan

    if buffer is not None:
        buffer.push(x)
    return x, trace
