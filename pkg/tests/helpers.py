"""Shared test utilities: random expression generator, analytic oracles."""

from __future__ import annotations

import numpy as np

from ebm_concepts.compose import Conj, Disj, Leaf, Neg
from ebm_concepts.models import ConceptCode, ConstantModel, QuadraticModel


def make_registry():
    """A small registry of analytic 2D models for composition tests."""
    return {
        "qa": QuadraticModel(sigma=0.2, model_id="qa"),
        "qb": QuadraticModel(sigma=0.1, model_id="qb"),
        "qc": QuadraticModel(sigma=0.3, model_id="qc"),
        "flat": ConstantModel(0.7, model_id="flat"),
    }


def random_leaf(rng: np.random.Generator) -> Leaf:
    name = ["qa", "qb", "qc", "flat"][rng.integers(4)]
    if name == "flat":
        return Leaf(name, raw=())
    x, y = np.round(rng.uniform(0.05, 0.95, size=2), 4)
    return Leaf(name, raw=(("x", float(x)), ("y", float(y))))


def random_expr(rng: np.random.Generator, depth: int):
    """Random tree over the analytic registry; all operators reachable."""
    if depth <= 0:
        return random_leaf(rng)
    kind = rng.integers(4)
    if kind == 0:
        return random_leaf(rng)
    if kind == 1:
        return Conj([random_expr(rng, depth - 1)
                     for _ in range(int(rng.integers(1, 4)))])
    if kind == 2:
        return Disj([random_expr(rng, depth - 1)
                     for _ in range(int(rng.integers(2, 4)))])
    alpha = float(np.round(rng.uniform(0.0, 0.2), 4))
    return Neg(random_expr(rng, depth - 1), random_expr(rng, depth - 1), alpha)


def gaussian_cell_probs(lattice, mean, sigma) -> np.ndarray:
    """Isotropic Gaussian density at cell centers, renormalized on the lattice."""
    centers = lattice.centers()
    e = ((centers - np.asarray(mean, dtype=np.float64)) ** 2).sum(axis=1) / (2.0 * sigma ** 2)
    w = np.exp(-(e - e.min()))
    return (w / w.sum()).reshape(lattice.shape)


def product_gaussian(mean_a, sigma_a, mean_b, sigma_b):
    """Precision-weighted product of two isotropic Gaussians."""
    pa, pb = 1.0 / sigma_a ** 2, 1.0 / sigma_b ** 2
    mean = (pa * np.asarray(mean_a) + pb * np.asarray(mean_b)) / (pa + pb)
    sigma = float(np.sqrt(1.0 / (pa + pb)))
    return mean, sigma
