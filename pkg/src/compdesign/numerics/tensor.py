"""Dense tensors with reverse-mode differentiation.

Each op records its parents and a closure mapping the output gradient to
parent gradients; :func:`backward` walks the graph in reverse topological
order. Only the ops the denoiser and surrogates need are provided.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_STATE = {"dtype": np.float32, "grad": True, "checked": False}


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_default_dtype(dtype) -> None:
    _STATE["dtype"] = np.dtype(dtype).type


def get_default_dtype():
    return _STATE["dtype"]


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _STATE["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _STATE["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = prev


@contextlib.contextmanager
def checked_mode(enabled: bool = True):
    """Raise :class:`NonFiniteError` as soon as any op produces NaN/inf."""
    prev = _STATE["checked"]
    _STATE["checked"] = enabled
    try:
        yield
    finally:
        _STATE["checked"] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dt = dtype or (data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f"
                       else _STATE["dtype"])
        self.data = np.asarray(data, dtype=dt)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_STATE["dtype"]))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._parents = ()
    out._backward = None
    if _STATE["checked"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {op}")
    needs = _STATE["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise ------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = as_tensor(a)
        c = b

        def bw_scalar(g):
            return (g * c,)

        return _make(a.data * c, (a,), bw_scalar, "scale")
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), bw, "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data

    def bw(g):
        return (2.0 * g * ad,)

    return _make(ad * ad, (a,), bw, "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), bw, "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), bw, "relu")


def _logistic(x):
    # exp overflow for very negative x saturates to the correct limit 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a: Tensor) -> Tensor:
    out = _logistic(a.data)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bw, "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _logistic(x)

    def bw(g):
        return (g * (s * (1.0 + x * (1.0 - s))),)

    return _make(x * s, (a,), bw, "silu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), bw, "tanh")


# reductions (64-bit accumulation) ---------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    n = a.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).astype(a.dtype),)

    return _make(np.asarray(out), (a,), bw, "mean")


def mse(a, b) -> Tensor:
    """Mean squared error over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.mean(np.square(diff, dtype=np.float64)), dtype=a.dtype)

    def bw(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return _make(out, (a, b), bw, "mse")


# shape ops -------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(old),)

    return _make(out, (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), bw, "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if _is_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), bw, "slice")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} along axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tensors, bw, "concat")


def gather(a: Tensor, index, axis: int = -1) -> Tensor:
    """Select entries ``index`` (1-D ints) along ``axis``."""
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape
    ax = axis % a.ndim

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[ax] = index
        np.add.at(full, tuple(sl), g)
        return (full,)

    return _make(np.take(a.data, index, axis=ax), (a,), bw, "gather")


def scatter_add(a: Tensor, index, size: int, axis: int = -1) -> Tensor:
    """Adjoint of :func:`gather`: add slices of ``a`` into a zero tensor of length ``size``."""
    index = np.asarray(index, dtype=np.intp)
    ax = axis % a.ndim
    if a.shape[ax] != index.size:
        raise ShapeError(f"scatter_add: axis {ax} of {a.shape} does not match {index.size} indices")
    shape = list(a.shape)
    shape[ax] = size
    out = np.zeros(shape, dtype=a.dtype)
    sl = [slice(None)] * len(shape)
    sl[ax] = index
    np.add.at(out, tuple(sl), a.data)

    def bw(g):
        return (np.take(g, index, axis=ax),)

    return _make(out, (a,), bw, "scatter_add")


def upsample_nearest(a: Tensor, factor: int = 2, axis: int = 1) -> Tensor:
    ax = axis % a.ndim
    shape = a.shape

    def bw(g):
        new = list(shape)
        new.insert(ax + 1, factor)
        return (g.reshape(new).sum(axis=ax + 1),)

    return _make(np.repeat(a.data, factor, axis=ax), (a,), bw, "upsample")


# linear algebra / conv -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` with leading-batch broadcast of either operand."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def conv1d_out_len(length: int, kernel: int, stride: int = 1, pad: int = 0) -> int:
    return (length + 2 * pad - kernel) // stride + 1


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Channels-last 1-D convolution.

    ``x``: ``[B, L, Cin]``, ``w``: ``[K, Cin, Cout]``, ``b``: ``[Cout]`` -> ``[B, Lout, Cout]``.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with weight {w.shape}")
    B, L, Cin = x.shape
    K, _, Cout = w.shape
    Lout = conv1d_out_len(L, K, stride, pad)
    if Lout < 1:
        raise ShapeError(f"conv1d: input length {L} too short for kernel {K}")
    xd = x.data
    xp = np.pad(xd, ((0, 0), (pad, pad), (0, 0))) if pad else xd
    span = stride * (Lout - 1) + 1
    cols = np.stack([xp[:, k:k + span:stride, :] for k in range(K)], axis=2)  # [B, Lout, K, Cin]
    cols2 = cols.reshape(B * Lout, K * Cin)
    wmat = w.data.reshape(K * Cin, Cout)
    out = (cols2 @ wmat).reshape(B, Lout, Cout)
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(B * Lout, Cout)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, Lout, K, Cin)
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, k:k + span:stride, :] += gcols[:, :, k, :]
            gx = gxp[:, pad:pad + L, :] if pad else gxp
        if w.requires_grad:
            gw = (cols2.T @ g2).reshape(K, Cin, Cout)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _make(out, parents, bw, "conv1d")


def _group_sum(a: np.ndarray, groups: int) -> np.ndarray:
    """Sum ``[B, L, C]`` over length and over channels within each group -> ``[B, G]`` (float64)."""
    B, _, C = a.shape
    return a.sum(axis=1, dtype=np.float64).reshape(B, groups, C // groups).sum(axis=2)


def _per_channel(stat: np.ndarray, cg: int, dtype) -> np.ndarray:
    """Expand ``[B, G]`` group statistics to ``[B, 1, C]``."""
    return np.repeat(stat, cg, axis=1)[:, None, :].astype(dtype, copy=False)


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization of channels-last ``[B, L, C]`` over (length, channels-in-group)."""
    B, L, C = x.shape
    if C % groups:
        raise ShapeError(f"group_norm: {C} channels not divisible into {groups} groups")
    cg = C // groups
    n = L * cg
    xd = x.data
    mu = _per_channel(_group_sum(xd, groups) / n, cg, xd.dtype)
    xc = xd - mu
    var = _group_sum(xc * xc, groups) / n
    inv = _per_channel(1.0 / np.sqrt(var + eps), cg, xd.dtype)
    xhat = xc * inv
    out = xhat * weight.data + bias.data

    def bw(g):
        gw = (g * xhat).sum(axis=(0, 1)) if weight.requires_grad else None
        gb = g.sum(axis=(0, 1)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * weight.data
            s1 = _per_channel(_group_sum(gh, groups) / n, cg, xd.dtype)
            s2 = _per_channel(_group_sum(gh * xhat, groups) / n, cg, xd.dtype)
            gx = inv * (gh - s1 - xhat * s2)
        return gx, gw, gb

    return _make(out, (x, weight, bias), bw, "group_norm")


# engine ----------------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from scalar ``loss``.

    Leaf gradients accumulate across calls; interior gradients are discarded.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if _STATE["checked"] and not np.all(np.isfinite(pg)):
                raise NonFiniteError(f"non-finite gradient through {node.op}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
