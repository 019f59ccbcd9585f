"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` whose ``node``
points at the inputs and a closure computing the input gradients from the
output gradient. :func:`backward` orders the graph topologically and sweeps
it once in reverse, accumulating into the ``grad`` buffers of leaves.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPES = {"float32": np.float32, "float64": np.float64}

_state = threading.local()

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


class ShapeError(ValueError):
    pass


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class RngStream:
    """Seeded counter-based random stream (Philox).

    The output depends only on the seed and the sequence of draws.
    """

    def __init__(self, seed: int, *path: int):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.path])
        self._gen = np.random.Generator(np.random.Philox(seq))

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)

    def truncated_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        out = self._gen.standard_normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std

    def spawn(self, key: int) -> "RngStream":
        """Independent child stream derived from (seed, key)."""
        return RngStream(self.seed, *self.path, key)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A dense real array that can take part in reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, node: Optional[Node] = None):
        if isinstance(dtype, str):
            dtype = DTYPES[dtype]
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = node
        self.grad: Optional[np.ndarray] = None
        if self.requires_grad and node is None:
            self.grad = np.zeros_like(arr)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis):
        return mean(self, axis)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _make(data: np.ndarray, op: str, inputs: tuple, grad_fn) -> Tensor:
    needs = _recording() and any(t.requires_grad for t in inputs)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, node=Node(op, inputs, grad_fn))


def _leading_broadcast(a_shape: tuple, b_shape: tuple) -> tuple:
    """Result shape when the shapes differ only by leading unit extents."""
    n = max(len(a_shape), len(b_shape))
    pa = (1,) * (n - len(a_shape)) + tuple(a_shape)
    pb = (1,) * (n - len(b_shape)) + tuple(b_shape)
    k = n
    while k > 0 and pa[k - 1] == pb[k - 1]:
        k -= 1
    if not (all(e == 1 for e in pa[:k]) or all(e == 1 for e in pb[:k])):
        raise ShapeError(f"shapes {a_shape} and {b_shape} are not broadcast-compatible")
    return tuple(max(x, y) for x, y in zip(pa, pb))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may carry extra leading unit extents."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _leading_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _leading_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(
        a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * a.data.dtype.type(c), "scale", (a,), lambda g: (g * c,))
    _leading_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, "square", (x,), lambda g: (2.0 * xd * g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    inner = GELU_C * (xd + GELU_K * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def grad_fn(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_K * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out.astype(x.dtype), "gelu", (x,), grad_fn)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[RngStream]) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an RngStream")
    keep = (rng.uniform(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _make(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


# --- shape ---------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def grad_fn(g):
        out = np.zeros(src_shape, dtype=dtype)
        out[index] = g
        return (out,)

    return _make(x.data[index], "getitem", (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        "concat",
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


# --- reductions ----------------------------------------------------------


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} is invalid for shape {x.shape}")
    return axis % x.ndim


def sum_(x: Tensor, axis=None) -> Tensor:
    src = x.shape
    if axis is None:
        return _make(
            np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,),
            lambda g: (np.broadcast_to(g, src).copy(),),
        )
    axis = _check_axis(x, axis)
    return _make(
        x.data.sum(axis=axis), "sum", (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), src).copy(),),
    )


def mean(x: Tensor, axis: int) -> Tensor:
    """Arithmetic mean along ``axis``; the axis is dropped."""
    axis = _check_axis(x, axis)
    src, n = x.shape, x.shape[axis]
    return _make(
        x.data.mean(axis=axis), "mean", (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, src).copy(),),
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, "softmax", (x,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then scale by gamma and shift by beta."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"layer_norm needs a non-empty last axis, got {x.shape}")
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def grad_fn(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make((xhat * gd + beta.data).astype(x.dtype), "layer_norm", (x, gamma, beta), grad_fn)


# --- linear algebra ------------------------------------------------------


def _matmul_grads(a: np.ndarray, b: np.ndarray, g: np.ndarray):
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    if b.ndim == 2 and gb.ndim > 2:
        gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
    return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is (..., m, k); ``b`` is (k, n) or (..., k, n) with the same leading extents.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"leading extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, "matmul", (a, b), lambda g: _matmul_grads(ad, bd, g))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def patchify_project(x: Tensor, weight: Tensor, bias: Tensor, patch: int) -> Tensor:
    """Non-overlapping ``patch``x``patch`` patch embedding.

    Equivalent to a stride-``patch`` convolution with a ``patch``-sized kernel.
    Patches are flattened channel-major (c, dy, dx), so ``weight`` has shape
    (C_in * patch * patch, D_out). Returns (B, num_patches, D_out) with patches
    in row-major grid order.
    """
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"image size H={h}, W={w} is not divisible by patch size P={patch}")
    if weight.shape[0] != c * patch * patch:
        raise ShapeError(f"weight rows {weight.shape[0]} != C_in*P*P = {c * patch * patch}")
    gh, gw = h // patch, w // patch
    t = reshape(x, (b, c, gh, patch, gw, patch))
    t = transpose(t, (0, 2, 4, 1, 3, 5))
    t = reshape(t, (b, gh * gw, c * patch * patch))
    return linear(t, weight, bias)


# --- backward ------------------------------------------------------------


def computation_record(root: Tensor) -> list:
    """Tensors reachable from ``root``, topologically ordered (inputs first)."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf's ``grad``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(computation_record(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.astype(t.dtype) if t.grad is None else t.grad + g
            continue
        for inp, gi in zip(t.node.inputs, t.node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = gi if key not in grads else grads[key] + gi


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# --- verification --------------------------------------------------------


def _rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check_many(
    f: Callable[[], Tensor],
    tensors: dict,
    eps: float = 1e-5,
    coords: Optional[dict] = None,
) -> dict:
    """Central-difference check of ``f``'s gradient w.r.t. several leaves.

    ``f`` takes no arguments and reads the leaves in ``tensors``, which are
    perturbed in place and restored. ``coords`` optionally maps a name to the
    flat indices to probe (default: all). Returns name -> max relative error.
    """
    for t in tensors.values():
        t.zero_grad()
    backward(f())
    out = {}
    with no_grad():
        for name, t in tensors.items():
            analytic = t.grad.reshape(-1)
            flat = t.data.reshape(-1)
            idx = range(flat.size) if coords is None or name not in coords else coords[name]
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                fd = (fp - fm) / (2.0 * eps)
                worst = max(worst, float(_rel_err(np.float64(analytic[i]), np.float64(fd))))
            out[name] = worst
    return out


def grad_check_directional(
    f: Callable[[], Tensor],
    tensors: dict,
    rng: RngStream,
    eps: float = 1e-5,
) -> dict:
    """Check each leaf's gradient along one random unit direction.

    Compares ``<grad, d>`` against ``(f(x + eps d) - f(x - eps d)) / 2 eps``.
    Every coordinate of the leaf takes part, and a generic direction keeps
    the projected derivative well above finite-difference roundoff.
    """
    for t in tensors.values():
        t.zero_grad()
    backward(f())
    out = {}
    with no_grad():
        for name, t in tensors.items():
            d = rng.normal(t.shape)
            d /= np.linalg.norm(d)
            analytic = float(np.sum(t.grad * d))
            orig = t.data.copy()
            t.data = orig + eps * d
            fp = f().item()
            t.data = orig - eps * d
            fm = f().item()
            t.data = orig
            out[name] = float(_rel_err(np.float64(analytic), np.float64((fp - fm) / (2.0 * eps))))
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backward's gradient and central differences."""
    leaf = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
    return grad_check_many(lambda: f(leaf), {"x": leaf}, eps)["x"]


# --- debug dump ----------------------------------------------------------


def dumps(t: Tensor) -> str:
    """Text dump: ``shape: e1 e2 ...`` then one value per line (17 significant digits)."""
    lines = ["shape: " + " ".join(str(n) for n in t.shape)]
    lines.extend(f"{v:.17g}" for v in t.data.reshape(-1).astype(np.float64))
    return "\n".join(lines) + "\n"


def loads(text: str, dtype="float64") -> Tensor:
    lines = text.strip().splitlines()
    head = lines[0]
    if not head.startswith("shape:"):
        raise ValueError("tensor dump must start with 'shape:'")
    shape = tuple(int(s) for s in head[len("shape:"):].split())
    values = np.array([float(v) for v in lines[1:]], dtype=np.float64)
    if values.size != math.prod(shape):
        raise ShapeError(f"dump holds {values.size} values for shape {shape}")
    return Tensor(values.reshape(shape), dtype=dtype)
