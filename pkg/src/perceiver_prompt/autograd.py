"""Dense numpy tensors with reverse-mode automatic differentiation.

Every op builds its output with :func:`_node`, which records the parents and a
closure mapping the output gradient to one gradient per parent. ``backward``
orders the recorded graph topologically (a :class:`ComputationTape`) and
replays it in reverse.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_STATE = {"dtype": np.float32, "grad": True}


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def get_default_dtype():
    return _STATE["dtype"]


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the float dtype used for new tensors (float64 for gradient checks)."""
    old = _STATE["dtype"]
    _STATE["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _STATE["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = old


def is_grad_enabled() -> bool:
    return _STATE["grad"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f" or arr.dtype.type is not _STATE["dtype"]:
            arr = arr.astype(_STATE["dtype"])
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> Tensor:
        return _wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, params: Iterable[Tensor] | None = None) -> None:
        backward(self, params)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __len__(self):
        return self.shape[0]

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _wrap(data) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    t.op = "const"
    t.name = None
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return _wrap(np.asarray(x, dtype=ref.data.dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = _wrap(data)
    out.op = op
    if _STATE["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- elementwise arithmetic --------------------------------------------------
def add(a, b) -> Tensor:
    a = as_tensor(a) if not isinstance(b, Tensor) else _const_like(a, b)
    b = _const_like(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a) if not isinstance(b, Tensor) else _const_like(a, b)
    b = _const_like(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a) if not isinstance(b, Tensor) else _const_like(a, b)
    b = _const_like(b, a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a) if not isinstance(b, Tensor) else _const_like(a, b)
    b = _const_like(b, a)

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return _node(a.data / b.data, (a, b), bw, "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,), "scale")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return _node(x.data * m, (x,), lambda g: (g * m,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _node(y, (x,), bw, "gelu")


# -- reductions / shape ------------------------------------------------------
def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[:-2] + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (the sequence axis for [T x D] inputs)."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def pad_stack(tensors: Sequence[Tensor], length: int | None = None) -> Tensor:
    """Stack [T_i x F] tensors into a zero-padded [B x T_max x F] batch."""
    length = length or max(t.shape[0] for t in tensors)
    feat = tensors[0].shape[1:]
    out = np.zeros((len(tensors), length) + feat, dtype=tensors[0].data.dtype)
    for i, t in enumerate(tensors):
        out[i, : t.shape[0]] = t.data

    def bw(g):
        return tuple(g[i, : t.shape[0]] for i, t in enumerate(tensors))

    return _node(out, tuple(tensors), bw, "pad_stack")


# -- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias with weight stored [out x in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in-features {weight.shape[1]}")
    w = weight.data
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ w.T
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(y.reshape(lead + (w.shape[0],)), parents, bw, "linear")


# -- normalisation / probabilities -----------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _node(y, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis; a constant row maps to zeros before the affine part."""
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]
    n = v.shape[-1]

    def bw(g):
        gh = g * gamma.data if gamma is not None else g
        gx = rstd / n * (n * gh - gh.sum(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, n).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, n).sum(axis=0))
        return tuple(grads)

    return _node(y, parents, bw, "layer_norm")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding id out of range [0, {weight.shape[0]})")
    shape = weight.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _node(weight.data[ids], (weight,), bw, "embedding")


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` [..., V]."""
    V = logits.shape[-1]
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    z = logits.data.reshape(-1, V)
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"cross_entropy: {z.shape[0]} logit rows vs {t.shape[0]} targets")
    keep = np.ones_like(t, dtype=bool) if ignore_index is None else t != ignore_index
    tk = t[keep]
    if tk.size and (tk.min() < 0 or tk.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    n = max(int(keep.sum()), 1)
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    tt = np.where(keep, t, 0)
    nll = lse - zs[np.arange(len(t)), tt]
    loss = (nll * keep).sum() / n

    def bw(g):
        p = np.exp(zs - lse[:, None])
        p[np.arange(len(t)), tt] -= 1.0
        p *= (keep[:, None] * (g / n))
        return (p.reshape(logits.shape).astype(logits.data.dtype),)

    return _node(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw, "cross_entropy")


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=pred.data.dtype).reshape(pred.shape)
    d = pred.data - target
    n = d.size

    def bw(g):
        return (g * 2.0 * d / n,)

    return _node(np.asarray((d * d).mean(), dtype=pred.data.dtype), (pred,), bw, "mse")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 1) -> Tensor:
    """Convolve along time: x [B x T x Cin], weight [Cout x Cin x K] -> [B x T' x Cout]."""
    B, T, Cin = x.shape
    Cout, Cin_w, K = weight.shape
    if Cin != Cin_w:
        raise ShapeError(f"conv1d: input channels {Cin} != weight channels {Cin_w}")
    Tp = T + 2 * padding
    if Tp < K:
        raise ShapeError(f"conv1d: sequence of length {T} too short for kernel {K}")
    To = (Tp - K) // stride + 1
    xp = np.zeros((B, Tp, Cin), dtype=x.data.dtype)
    xp[:, padding : padding + T] = x.data
    idx = np.arange(To)[:, None] * stride + np.arange(K)[None, :]
    cols = xp[:, idx, :].reshape(B * To, K * Cin)  # [.., K, Cin] flattened
    w2 = weight.data.transpose(2, 1, 0).reshape(K * Cin, Cout)
    y = cols @ w2
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(B * To, Cout)
        gw = (cols.T @ g2).reshape(K, Cin, Cout).transpose(2, 1, 0) if weight.requires_grad else None
        if not x.requires_grad:
            return (None, gw) if bias is None else (None, gw, g2.sum(axis=0))
        gcols = (g2 @ w2.T).reshape(B, To, K, Cin)
        gxp = np.zeros_like(xp)
        for k in range(K):
            gxp[:, idx[:, k], :] += gcols[:, :, k, :]
        gx = gxp[:, padding : padding + T]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(y.reshape(B, To, Cout), parents, bw, "conv1d")


# -- backward -----------------------------------------------------------------
@dataclass
class ComputationTape:
    """Operations reachable from a root, in topological order (inputs first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> ComputationTape:
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n._parents]


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` on every requires-grad leaf feeding ``loss``.

    Gradients accumulate into existing ``.grad`` arrays. Leaves listed in
    ``params`` that do not participate receive zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError(f"loss is not finite: {loss.data}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        tape = ComputationTape.from_root(loss)
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if not p.requires_grad or pg is None:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# -- checks ---------------------------------------------------------------------
def numerical_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-4, indices=None) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``x.data`` (mutated in place, restored).

    ``indices`` restricts the sweep to those flat positions; the rest of the result stays zero.
    """
    out = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            fp = float(fn().data)
        flat[i] = orig - eps
        with no_grad():
            fm = float(fn().data)
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return out


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray, scale: float = 0.0) -> float:
    """Max abs deviation scaled by the largest gradient magnitude (or ``scale`` if larger)."""
    scale_ = max(np.abs(numeric).max(), np.abs(analytic).max(), scale, 1e-8)
    return float(np.abs(analytic - numeric).max() / scale_)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-4, rtol: float = 1e-3,
              max_entries: int | None = None, seed: int = 0) -> float:
    """Compare backward() against central differences for each input; return worst relative error.

    With ``max_entries`` only that many randomly chosen positions per input are
    perturbed, which keeps checks of whole models affordable.
    """
    for x in inputs:
        x.grad = None
    backward(fn(), inputs)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for x in inputs:
        if max_entries is None or x.data.size <= max_entries:
            worst = max(worst, grad_rel_error(x.grad, numerical_grad(fn, x, eps)))
            continue
        idx = rng.choice(x.data.size, max_entries, replace=False)
        num = numerical_grad(fn, x, eps, idx)
        analytic = x.grad.reshape(-1)
        worst = max(worst, grad_rel_error(analytic[idx], num.reshape(-1)[idx], np.abs(analytic).max()))
    if worst > rtol:
        raise AssertionError(f"gradient mismatch: relative error {worst:.2e} > {rtol:.0e}")
    return worst


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"{what} contains NaN/Inf")
    return t
