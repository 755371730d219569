"""Recursive composition algebra over energy models.

An expression is a tree of Leaf / Conj / Disj / Neg nodes (plus an internal
Bias node used by diagnostics).  Its energy is the negative unnormalized
log-density of the composed distribution:

    Leaf          E(x | c)
    Conj(e1..en)  sum of child energies           (product of densities)
    Disj(e1..en)  -logsumexp(-E1, ..., -En)       (equal-partition mixture)
    Neg(n, g, a)  E_g(x) - a * E_n(x)             (density p_g / p_n^a)

Leaves may carry either a resolved concept code or raw DSL parameters that
are bound against the model registry at evaluation time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import DISCRETE_KINDS, ConceptCode, ModelError
from .tensor import Tensor


class CompositionError(ValueError):
    pass


class Leaf:
    """Reference to one registered model conditioned on one concept code."""

    __slots__ = ("model_id", "code", "raw")

    def __init__(self, model_id: str, code: ConceptCode | None = None,
                 raw: tuple[tuple[str, float | str], ...] | None = None):
        if (code is None) == (raw is None):
            raise CompositionError("a leaf needs exactly one of code or raw params")
        self.model_id = model_id
        self.code = code
        self.raw = tuple(raw) if raw is not None else None

    def params(self) -> tuple[tuple[str, float | str], ...]:
        """Canonical (name, value) parameters, derived from the code if bound."""
        if self.raw is not None:
            return self.raw
        c = self.code
        if c.batched:
            raise CompositionError("batched leaf codes have no textual form")
        if c.kind == "position":
            return (("x", float(c.values[0])), ("y", float(c.values[1])))
        if c.kind == "size":
            return (("s", float(c.values[0])),)
        return (("name", c.label),)

    def __eq__(self, other):
        return (isinstance(other, Leaf) and self.model_id == other.model_id
                and self.params() == other.params())

    __hash__ = None

    def __repr__(self):
        return f"Leaf({self.model_id!r}, {self.params()!r})"


@dataclass(eq=True)
class Conj:
    children: tuple

    def __init__(self, children):
        children = tuple(children)
        if len(children) < 1:
            raise CompositionError("AND needs at least one child")
        self.children = children


@dataclass(eq=True)
class Disj:
    children: tuple

    def __init__(self, children):
        children = tuple(children)
        if len(children) < 1:
            raise CompositionError("OR needs at least one child")
        self.children = children


@dataclass(eq=True)
class Neg:
    """Grounded negation: suppress ``negated`` while anchored to ``grounding``."""

    negated: object
    grounding: object
    alpha: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise CompositionError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass(eq=True)
class Bias:
    """Internal node adding a constant to a child's energy.

    Not part of the DSL; used to offset or partition-equalize children in
    diagnostics and tests.
    """

    child: object
    offset: float


CompositionExpr = Leaf | Conj | Disj | Neg | Bias


def leaves(expr):
    if isinstance(expr, Leaf):
        yield expr
    elif isinstance(expr, (Conj, Disj)):
        for c in expr.children:
            yield from leaves(c)
    elif isinstance(expr, Neg):
        yield from leaves(expr.negated)
        yield from leaves(expr.grounding)
    elif isinstance(expr, Bias):
        yield from leaves(expr.child)
    else:
        raise CompositionError(f"not a composition expression: {expr!r}")


def _bind_leaf_code(leaf: Leaf, model) -> ConceptCode:
    """Resolve a leaf's raw DSL parameters against its model's arch."""
    if leaf.code is not None:
        return leaf.code
    kind = model.arch.concept_kind
    params = dict(leaf.raw)
    if not params:
        default = getattr(model, "default_code", None)
        if default is not None:
            return default
    try:
        if kind == "position":
            code = ConceptCode.position(float(params.pop("x")), float(params.pop("y")))
        elif kind == "size":
            code = ConceptCode.size(float(params.pop("s")))
        else:
            names = model.arch.value_names
            if names is None:
                raise CompositionError(
                    f"model {leaf.model_id!r} declares no value names for {kind}")
            value = params.pop("name")
            if not isinstance(value, str) or value not in names:
                raise CompositionError(
                    f"unknown {kind} value {value!r} for model {leaf.model_id!r} "
                    f"(expected one of {names})")
            code = ConceptCode.one_hot(kind, value, names)
    except KeyError as exc:
        raise CompositionError(
            f"leaf {leaf.model_id!r} is missing parameter {exc} for kind {kind!r}") from exc
    if params:
        raise CompositionError(
            f"leaf {leaf.model_id!r} has unknown parameters {sorted(params)} for kind {kind!r}")
    return code


def _lookup(registry, model_id: str):
    try:
        return registry[model_id]
    except KeyError:
        raise CompositionError(f"unresolved model id {model_id!r}") from None


def validate_expr(expr, registry):
    """Check model resolution and that all leaves share one input kind."""
    kinds = set()
    for leaf in leaves(expr):
        model = _lookup(registry, leaf.model_id)
        kinds.add(model.arch.input_kind)
        code = _bind_leaf_code(leaf, model)
        if code.kind != model.arch.concept_kind:
            raise CompositionError(
                f"model {leaf.model_id!r} conditions on {model.arch.concept_kind}, "
                f"leaf carries {code.kind}")
    if len(kinds) > 1:
        raise CompositionError(f"mixed leaf input kinds {sorted(kinds)}")
    return kinds.pop() if kinds else None


def sample_shape(expr, registry) -> tuple[int, ...]:
    for leaf in leaves(expr):
        return tuple(_lookup(registry, leaf.model_id).arch.sample_shape)
    raise CompositionError("expression has no leaves")


def rebind_codes(expr, codes_by_kind: dict[str, ConceptCode], registry):
    """Copy of ``expr`` with leaf codes replaced per concept kind.

    Used by the trainer to bind per-batch concept labels onto a fixed
    expression shape; leaves whose kind has no replacement keep their code.
    """
    if isinstance(expr, Leaf):
        kind = _lookup(registry, expr.model_id).arch.concept_kind
        if kind in codes_by_kind:
            return Leaf(expr.model_id, code=codes_by_kind[kind])
        return Leaf(expr.model_id, code=_bind_leaf_code(expr, _lookup(registry, expr.model_id)))
    if isinstance(expr, Conj):
        return Conj([rebind_codes(c, codes_by_kind, registry) for c in expr.children])
    if isinstance(expr, Disj):
        return Disj([rebind_codes(c, codes_by_kind, registry) for c in expr.children])
    if isinstance(expr, Neg):
        return Neg(rebind_codes(expr.negated, codes_by_kind, registry),
                   rebind_codes(expr.grounding, codes_by_kind, registry), expr.alpha)
    if isinstance(expr, Bias):
        return Bias(rebind_codes(expr.child, codes_by_kind, registry), expr.offset)
    raise CompositionError(f"not a composition expression: {expr!r}")


def _flatten_conj(children):
    flat = []
    for c in children:
        if isinstance(c, Conj):
            flat.extend(_flatten_conj(c.children))
        else:
            flat.append(c)
    return flat


def expr_energy_tensor(expr, registry, xs: Tensor,
                       trainable: frozenset[str] = frozenset()) -> Tensor:
    """Energy of a batch as a graph node: xs (B, ...) -> (B,).

    Models named in ``trainable`` contribute parameter gradients; all other
    models are evaluated with detached parameters.
    """
    if isinstance(expr, Leaf):
        model = _lookup(registry, expr.model_id)
        code = _bind_leaf_code(expr, model)
        return model.energy_batch(xs, code.tiled(xs.data.shape[0]),
                                  trainable=expr.model_id in trainable)
    if isinstance(expr, Conj):
        # nested conjunctions flatten first, so Conj[a, Conj[b, c]] and
        # Conj[a, b, c] sum in the same order and agree bitwise
        total = None
        for child in _flatten_conj(expr.children):
            e = expr_energy_tensor(child, registry, xs, trainable)
            total = e if total is None else T.add(total, e)
        return total
    if isinstance(expr, Disj):
        negs = [T.multiply(expr_energy_tensor(c, registry, xs, trainable), -1.0)
                for c in expr.children]
        return T.multiply(T.logsumexp(T.stack(negs, axis=0), axis=0), -1.0)
    if isinstance(expr, Neg):
        ge = expr_energy_tensor(expr.grounding, registry, xs, trainable)
        ne = expr_energy_tensor(expr.negated, registry, xs, trainable)
        return T.add(ge, T.multiply(ne, -expr.alpha))
    if isinstance(expr, Bias):
        return T.add(expr_energy_tensor(expr.child, registry, xs, trainable), expr.offset)
    raise CompositionError(f"not a composition expression: {expr!r}")


def expr_energy_batch(expr, registry, xs: np.ndarray) -> np.ndarray:
    """Energies of a batch without building a gradient tape."""
    validate_expr(expr, registry)
    return expr_energy_tensor(expr, registry, Tensor(xs)).data


def expr_energy(expr, registry, x) -> float:
    """Energy of one sample; the negative unnormalized log-density."""
    out = expr_energy_batch(expr, registry, np.asarray(x, dtype=np.float64)[None])
    return float(out[0])


def _energy_grad_raw(expr, registry, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xs_t = Tensor(xs, requires_grad=True)
    e = expr_energy_tensor(expr, registry, xs_t)
    T.sum_reduce(e).backward()
    return e.data, xs_t.grad


def expr_energy_grad_batch(expr, registry, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(energies, gradient w.r.t. xs) in one forward/backward pass."""
    validate_expr(expr, registry)
    return _energy_grad_raw(expr, registry, xs)


def expr_grad_x(expr, registry, x) -> np.ndarray:
    """Exact gradient of the expression energy with respect to one sample."""
    _, g = expr_energy_grad_batch(expr, registry, np.asarray(x, dtype=np.float64)[None])
    return g[0]


def find_nonfinite(expr, registry, xs: np.ndarray):
    """Deepest subexpression whose energy is non-finite, for error reports."""
    children = []
    if isinstance(expr, (Conj, Disj)):
        children = expr.children
    elif isinstance(expr, Neg):
        children = (expr.negated, expr.grounding)
    elif isinstance(expr, Bias):
        children = (expr.child,)
    for c in children:
        hit = find_nonfinite(c, registry, xs)
        if hit is not None:
            return hit
    e = expr_energy_tensor(expr, registry, Tensor(xs)).data
    if not np.all(np.isfinite(e)):
        return expr
    return None
