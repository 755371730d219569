"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is the closure of what small conditional energy networks need:
elementwise arithmetic, matmul, reductions, square, swish, a numerically
stable logsumexp, affine layers, stride-1 2D convolution and mean pooling.
Graphs are built by executing ops (define-by-run); calling ``backward`` on a
scalar root fills ``grad`` on every reachable tensor that requires it.

All data is float64 and row-major.  Broadcasting is restricted to
scalar-with-tensor; shape mismatches raise :class:`ShapeError` naming the op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """An operation received incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    """A dense float64 array, optionally participating in the gradient tape.

    Attributes:
        data: the underlying ndarray (row-major float64).
        requires_grad: whether backward() should fill ``grad``.
        grad: accumulated gradient ndarray of identical shape, or None.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """A view sharing this tensor's data but outside any gradient tape."""
        return Tensor(self.data, requires_grad=False, op="detach")

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.data.shape)
        return float(self.data.reshape(()))

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(_as_tensor(other), self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_reduce(self, axis)

    def mean(self, axis=None):
        return mean_reduce(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def backward(self, seed: float = 1.0):
        backward(self, seed)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, data, parents, backward_fn) -> Tensor:
    """Create an op node; drops the tape when no parent requires grad."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op,
                      _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data, op=op)


def _is_scalar_shape(shape) -> bool:
    return int(np.prod(shape, dtype=np.int64)) == 1


def _binary_shapes(op: str, a: Tensor, b: Tensor):
    # scalar-with-tensor is the only permitted broadcast
    if a.data.shape == b.data.shape:
        return
    if _is_scalar_shape(a.data.shape) or _is_scalar_shape(b.data.shape):
        return
    raise ShapeError(op, a.data.shape, b.data.shape)


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to a scalar operand's shape."""
    if grad.shape == tuple(shape):
        return grad
    return np.asarray(grad.sum(), dtype=np.float64).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    out = a.data + b.data

    def bw(g):
        return (_reduce_to(g, a.data.shape) if a.requires_grad else None,
                _reduce_to(g, b.data.shape) if b.requires_grad else None)

    return _node("add", out, (a, b), bw)


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("subtract", a, b)
    out = a.data - b.data

    def bw(g):
        return (_reduce_to(g, a.data.shape) if a.requires_grad else None,
                _reduce_to(-g, b.data.shape) if b.requires_grad else None)

    return _node("subtract", out, (a, b), bw)


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("multiply", a, b)
    out = a.data * b.data

    def bw(g):
        return (_reduce_to(g * b.data, a.data.shape) if a.requires_grad else None,
                _reduce_to(g * a.data, b.data.shape) if b.requires_grad else None)

    return _node("multiply", out, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)
    out = a.data @ b.data

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _node("matmul", out, (a, b), bw)


def sum_reduce(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _node("sum", out, (a,), bw)


def mean_reduce(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.data.shape[axis]

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, a.data.shape).copy(),)

    return _node("mean", out, (a,), bw)


def square(a) -> Tensor:
    a = _as_tensor(a)
    out = a.data * a.data

    def bw(g):
        return (2.0 * a.data * g,)

    return _node("square", out, (a,), bw)


def swish(a) -> Tensor:
    """x * sigmoid(x)."""
    a = _as_tensor(a)
    s = expit(a.data)
    out = a.data * s

    def bw(g):
        t = 1.0 - s
        t *= a.data
        t += 1.0
        t *= s
        t *= g
        return (t,)

    return _node("swish", out, (a,), bw)


def logsumexp(a, axis=0) -> Tensor:
    """Stable log-sum-exp along one axis, via max subtraction.

    Shift invariant: logsumexp(x + K) == logsumexp(x) + K up to roundoff
    even for K on the order of 1e6, which keeps disjunction energies stable
    when children differ by hundreds of nats.
    """
    a = _as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    out = np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a.data - m), axis=axis))

    def bw(g):
        soft = np.exp(a.data - np.expand_dims(out, axis))
        return (np.expand_dims(g, axis) * soft,)

    return _node("logsumexp", out, (a,), bw)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    first = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != first:
            raise ShapeError("stack", *(t.data.shape for t in tensors))
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node("stack", out, tuple(tensors), bw)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _node("concat", out, tuple(tensors), bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.data.shape),)

    return _node("reshape", out, (a,), bw)


def affine(x, w, b) -> Tensor:
    """x @ w + b for a batch of row vectors; bias gradient sums over rows."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if (x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1
            or x.data.shape[1] != w.data.shape[0] or b.data.shape[0] != w.data.shape[1]):
        raise ShapeError("affine", x.data.shape, w.data.shape, b.data.shape)
    out = x.data @ w.data
    out += b.data

    def bw(g):
        return (g @ w.data.T if x.requires_grad else None,
                x.data.T @ g if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)

    return _node("affine", out, (x, w, b), bw)


def conv2d(x, w, b, pad: int = 1) -> Tensor:
    """Stride-1 2D convolution over (B, C, H, W) with an (O, C, kh, kw) kernel."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError("conv2d", x.data.shape, w.data.shape)
    bsz, cin, h, ww = x.data.shape
    cout, _, kh, kw = w.data.shape
    if b.data.shape != (cout,):
        raise ShapeError("conv2d", b.data.shape, (cout,))
    ho, wo = h + 2 * pad - kh + 1, ww + 2 * pad - kw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d", x.data.shape, w.data.shape)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # (B, ho*wo, C*kh*kw) patch matrix; one BLAS matmul does the convolution
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz, ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw).T
    out = (cols @ wmat + b.data).transpose(0, 2, 1).reshape(bsz, cout, ho, wo)

    def bw(g):
        gmat = g.reshape(bsz, cout, ho * wo).transpose(0, 2, 1)
        gw = gb = gx = None
        if w.requires_grad:
            flat_cols = cols.reshape(bsz * ho * wo, cin * kh * kw)
            flat_g = np.ascontiguousarray(gmat).reshape(bsz * ho * wo, cout)
            gw = (flat_cols.T @ flat_g).T.reshape(w.data.shape)
        if b.requires_grad:
            gb = gmat.sum(axis=(0, 1))
        if x.requires_grad:
            gcols = (gmat @ wmat.T).reshape(bsz, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, :, di:di + ho, dj:dj + wo] += \
                        gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + ww] if pad else gxp
        return gx, gw, gb

    return _node("conv2d", out, (x, w, b), bw)


def mean_pool(x, k: int = 2) -> Tensor:
    """k x k mean pooling with stride k over (B, C, H, W)."""
    x = _as_tensor(x)
    bsz, c, h, w = x.data.shape
    if h % k or w % k:
        raise ShapeError("mean_pool", x.data.shape, (k, k))
    out = x.data.reshape(bsz, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _node("mean_pool", out, (x,), bw)


def channel_bias(x, b) -> Tensor:
    """Add a per-sample, per-channel bias (B, C) to a (B, C, H, W) map."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.data.ndim != 4 or b.data.shape != x.data.shape[:2]:
        raise ShapeError("channel_bias", x.data.shape, b.data.shape)
    out = x.data + b.data[:, :, None, None]

    def bw(g):
        return (g if x.requires_grad else None,
                g.sum(axis=(2, 3)) if b.requires_grad else None)

    return _node("channel_bias", out, (x, b), bw)


# -- backward pass --------------------------------------------------------


def backward(root: Tensor, seed: float = 1.0):
    """Reverse-mode pass from a scalar root; accumulates into ``grad``.

    Gradients add over fan-out, and are not zeroed here: callers zero
    explicitly between passes so multi-term losses stay visible.
    """
    if root.data.size != 1:
        raise ShapeError("backward", root.data.shape)
    order = []
    visited = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack_.append((p, False))

    # reverse post-order == topological order: each node is fully
    # accumulated before its own backward runs, so every node is
    # visited exactly once
    local = {id(root): np.full(root.data.shape, float(seed))}
    for node in reversed(order):
        g = local.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                acc = local.get(id(parent))
                local[id(parent)] = pg if acc is None else acc + pg
        else:
            node.grad = g if node.grad is None else node.grad + g


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# -- gradient checking -----------------------------------------------------


def grad_check(f, inputs, eps: float = 1e-5) -> float:
    """Worst relative error between backward gradients and central differences.

    ``f`` maps the given input tensors to a scalar Tensor; every input with
    ``requires_grad`` is checked componentwise against
    (f(x+eps) - f(x-eps)) / (2 eps) with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    inputs = list(inputs)
    checked = [t for t in inputs if t.requires_grad]
    zero_grads(checked)
    out = f(*inputs)
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in checked]

    worst = 0.0
    for t, ga in zip(checked, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            fp = f(*inputs).item()
            flat[i] = keep - eps
            fm = f(*inputs).item()
            flat[i] = keep
            num = (fp - fm) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(num), 1e-8)
            worst = max(worst, abs(gflat[i] - num) / denom)
    return worst


# -- spectral norm ----------------------------------------------------------


@dataclass
class SpectralState:
    """Persistent power-iteration vectors for one weight matrix."""

    u: np.ndarray
    v: np.ndarray

    @classmethod
    def init(cls, shape, seed: int = 0) -> "SpectralState":
        rng = np.random.default_rng(seed)
        u = rng.standard_normal(shape[0])
        v = rng.standard_normal(shape[1])
        return cls(u / np.linalg.norm(u), v / np.linalg.norm(v))


def spectral_norm_estimate(w, iters: int = 1, state: SpectralState | None = None,
                           seed: int = 0) -> tuple[float, SpectralState]:
    """Power-iteration estimate of the largest singular value of a matrix.

    The left/right vectors persist in ``state`` across calls, so one
    iteration per optimizer step converges over training. A zero matrix
    estimates 0.
    """
    wd = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if wd.ndim != 2:
        raise ShapeError("spectral_norm_estimate", wd.shape)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if state is None:
        state = SpectralState.init(wd.shape, seed)
    u, v = state.u, state.v
    sigma = 0.0
    for _ in range(iters):
        v = wd.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0, state
        v = v / nv
        u = wd @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0, state
        u = u / nu
        sigma = float(u @ (wd @ v))
    state.u, state.v = u, v
    return sigma, state
