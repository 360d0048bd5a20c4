"""Dense float tensors on numpy storage with tape-based reverse-mode autodiff.

Every numeric array in the model flows through :class:`Tensor`: broadcasting
arithmetic, 2D/batched matrix products, the stable softmax used by masked
attention, and a few structured ops (row gather, 3x3 unfold, log-softmax)
that keep the network code compact. Each forward op records its backward
closure on a tape; ``backward`` replays the tape in reverse topological
order and accumulates gradients into every ``requires_grad`` leaf.

float32 is the working precision. float64 is supported end to end so tests
can compare analytic gradients against central finite differences without
float32 evaluation noise. The -inf of additive attention masks is the
finite sentinel ``NEG_INF``: after softmax's max-subtraction, masked
entries underflow to an exact zero weight while all arithmetic stays
finite. Reductions use numpy's row-major order, so results are
bit-reproducible for a fixed environment.
"""

from __future__ import annotations

import json
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# Finite stand-in for the -inf entries of additive attention masks.
# exp(NEG_INF - rowmax) underflows to exactly 0.0 in both float32 and float64.
NEG_INF = -1.0e9

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class Tensor:
    """N-dimensional float array with an optional gradient record.

    ``data`` is a numpy array (float32 or float64), ``grad`` is either None
    or an array of identical shape. Ops on tensors build the autodiff tape;
    ops on tensors with ``requires_grad=False`` everywhere record nothing.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("Tensor(data) expects array-like, not Tensor")
        arr = np.asarray(data, dtype=DEFAULT_DTYPE if dtype is None else dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[..., None] | None = None

    # ------------------------------------------------------------------
    # basics

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

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # operator sugar

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_coerce(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    # method aliases used throughout the model code
    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


# ----------------------------------------------------------------------
# tape plumbing


def _coerce(x, dtype=DEFAULT_DTYPE) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap plain values next to a Tensor operand, matching its dtype."""
    if isinstance(a, Tensor):
        return a, _coerce(b, a.dtype)
    if isinstance(b, Tensor):
        return _coerce(a, b.dtype), b
    return _coerce(a), _coerce(b)


def _from_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _send(grads: dict[int, np.ndarray], t: Tensor, g: np.ndarray) -> None:
    """Route a gradient contribution to `t`: leaves accumulate persistently
    into .grad, intermediates collect in the transient per-pass dict."""
    if not t.requires_grad:
        return
    if t._backward is None:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g
        return
    key = id(t)
    if key in grads:
        grads[key] += g
    else:
        grads[key] = g.astype(t.data.dtype, copy=True) if g.dtype != t.data.dtype else g.copy()


def backward(loss: Tensor) -> None:
    """Reverse-mode gradient pass from a scalar loss.

    Accumulates into ``grad`` of every reachable ``requires_grad`` leaf;
    calling again without resetting grads accumulates on top.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data)
    if loss._backward is None:
        # the loss is itself a leaf
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad += seed
        return

    # iterative DFS postorder over intermediate nodes; reversed it is a
    # valid topological order (graphs can exceed the recursion limit).
    # visited is marked at expansion, not discovery: marking earlier can
    # append a pending node after one of its consumers on diamond rejoins.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p._backward is not None and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is not None:
            node._backward(g, grads)


# ----------------------------------------------------------------------
# elementwise / broadcasting arithmetic


def add(a, b) -> Tensor:
    """Broadcasting addition; gradients sum over broadcast dimensions."""
    a, b = _coerce_pair(a, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    data = a.data + b.data

    def back(g, grads):
        _send(grads, a, _unbroadcast(g, a.shape))
        _send(grads, b, _unbroadcast(g, b.shape))

    return _from_op(data, (a, b), back)


broadcast_add = add


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    data = a.data * b.data

    def back(g, grads):
        _send(grads, a, _unbroadcast(g * b.data, a.shape))
        _send(grads, b, _unbroadcast(g * a.data, b.shape))

    return _from_op(data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    data = a.data / b.data

    def back(g, grads):
        _send(grads, a, _unbroadcast(g / b.data, a.shape))
        _send(grads, b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _from_op(data, (a, b), back)


# ----------------------------------------------------------------------
# matrix products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D matrix product [m,k] x [k,n]; dA = g Bᵀ, dB = Aᵀ g."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def back(g, grads):
        _send(grads, a, g @ b.data.T)
        _send(grads, b, a.data.T @ g)

    return _from_op(data, (a, b), back)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul [B,m,k] x [B,k,n] -> [B,m,n]."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm shape mismatch: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def back(g, grads):
        _send(grads, a, np.matmul(g, b.data.transpose(0, 2, 1)))
        _send(grads, b, np.matmul(a.data.transpose(0, 2, 1), g))

    return _from_op(data, (a, b), back)


# ----------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    a = _coerce(a)
    data = a.data.reshape(shape)

    def back(g, grads):
        _send(grads, a, g.reshape(a.shape))

    return _from_op(data, (a,), back)


def transpose(a: Tensor, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def back(g, grads):
        _send(grads, a, np.transpose(g, inv))

    return _from_op(data, (a,), back)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows along axis 0; backward scatter-adds into the source."""
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.int64)
    data = a.data[idx]

    def back(g, grads):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _send(grads, a, ga)

    return _from_op(data, (a,), back)


# ----------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g, grads):
        if axis is None:
            _send(grads, a, np.broadcast_to(g, a.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _send(grads, a, np.broadcast_to(gg, a.shape).copy())

    return _from_op(np.asarray(data), (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def back(g, grads):
        if axis is None:
            _send(grads, a, np.broadcast_to(g / n, a.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _send(grads, a, np.broadcast_to(gg / n, a.shape).copy())

    return _from_op(np.asarray(data), (a,), back)


# ----------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    a = _coerce(a)
    data = np.maximum(a.data, 0)

    def back(g, grads):
        _send(grads, a, g * (a.data > 0))

    return _from_op(data, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic; output in (0,1), gradient out*(1-out)."""
    a = _coerce(a)
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def back(g, grads):
        _send(grads, a, g * data * (1.0 - data))

    return _from_op(data, (a,), back)


def exp(a: Tensor) -> Tensor:
    a = _coerce(a)
    data = np.exp(a.data)

    def back(g, grads):
        _send(grads, a, g * data)

    return _from_op(data, (a,), back)


def log(a: Tensor) -> Tensor:
    a = _coerce(a)
    data = np.log(a.data)

    def back(g, grads):
        _send(grads, a, g / a.data)

    return _from_op(data, (a,), back)


def sqrt(a: Tensor) -> Tensor:
    a = _coerce(a)
    data = np.sqrt(a.data)

    def back(g, grads):
        _send(grads, a, g * 0.5 / data)

    return _from_op(data, (a,), back)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Row softmax over the last dimension, max-subtracted for stability.

    Entries at the NEG_INF sentinel get weight exactly 0 whenever the row
    has at least one unmasked entry; an all-sentinel row comes out uniform.
    """
    a = _coerce(a)
    if a.shape[-1] < 1:
        raise ValueError("softmax_lastdim requires a non-empty last dimension")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def back(g, grads):
        inner = (g * data).sum(axis=-1, keepdims=True)
        _send(grads, a, data * (g - inner))

    return _from_op(data, (a,), back)


def log_softmax_lastdim(a: Tensor) -> Tensor:
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def back(g, grads):
        _send(grads, a, g - soft * g.sum(axis=-1, keepdims=True))

    return _from_op(data, (a,), back)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy from logits: max(z,0) - z*y + log1p(exp(-|z|))."""
    logits = _coerce(logits)
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.dtype)
    z = logits.data
    data = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def back(g, grads):
        p = np.empty_like(z)
        pos = z >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        p[~pos] = ez / (1.0 + ez)
        _send(grads, logits, g * (p - y))

    return _from_op(data, (logits,), back)


# ----------------------------------------------------------------------
# structured ops for the pixel encoder


def unfold3x3(a: Tensor) -> Tensor:
    """im2col for a 3x3 window over [T,H,W,C] -> [T,H,W,9C], edge-padded.

    Edge padding (replicate) keeps spatially constant inputs spatially
    constant, which zero padding would break at the border.
    """
    a = _coerce(a)
    if a.ndim != 4:
        raise ValueError(f"unfold3x3 expects [T,H,W,C], got {a.shape}")
    T, H, W, C = a.shape
    xp = np.pad(a.data, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    cols = [xp[:, di:di + H, dj:dj + W, :] for di in range(3) for dj in range(3)]
    data = np.concatenate(cols, axis=-1)

    def back(g, grads):
        gp = np.zeros((T, H + 2, W + 2, C), dtype=g.dtype)
        for k in range(9):
            di, dj = divmod(k, 3)
            gp[:, di:di + H, dj:dj + W, :] += g[..., k * C:(k + 1) * C]
        ga = gp[:, 1:H + 1, 1:W + 1, :].copy()
        # fold the replicated border reads back onto the edge pixels
        ga[:, 0, :, :] += gp[:, 0, 1:W + 1, :]
        ga[:, -1, :, :] += gp[:, H + 1, 1:W + 1, :]
        ga[:, :, 0, :] += gp[:, 1:H + 1, 0, :]
        ga[:, :, -1, :] += gp[:, 1:H + 1, W + 1, :]
        ga[:, 0, 0, :] += gp[:, 0, 0, :]
        ga[:, 0, -1, :] += gp[:, 0, W + 1, :]
        ga[:, -1, 0, :] += gp[:, H + 1, 0, :]
        ga[:, -1, -1, :] += gp[:, H + 1, W + 1, :]
        _send(grads, a, ga)

    return _from_op(data, (a,), back)


# ----------------------------------------------------------------------
# bilinear resizing (shared by the model, the attention-mask builder,
# ground-truth preparation and evaluation upsampling)


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic [n_out, n_in] bilinear interpolation weights.

    Half-pixel centers (align_corners=False) with edge clamping; used for
    both up- and downsampling so every resize in the system agrees.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("bilinear_matrix requires positive sizes")
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        w_hi = src - lo
        m[i, lo] += 1.0 - w_hi
        m[i, hi] += w_hi
    return m.astype(dtype, copy=False)


def resize_bilinear(arr: np.ndarray, out_hw: tuple[int, int], h_axis: int = -2, w_axis: int = -1) -> np.ndarray:
    """Bilinear resize of two axes of a plain numpy array (no gradient)."""
    h_out, w_out = out_hw
    if h_out < 1 or w_out < 1:
        raise ValueError(f"target resolution must be positive, got {out_hw}")
    nd = arr.ndim
    h_axis, w_axis = h_axis % nd, w_axis % nd
    moved = np.moveaxis(arr, (h_axis, w_axis), (-2, -1))
    rh = bilinear_matrix(moved.shape[-2], h_out, dtype=arr.dtype if arr.dtype == np.float64 else np.float32)
    rw = bilinear_matrix(moved.shape[-1], w_out, dtype=rh.dtype)
    out = np.matmul(np.matmul(rh, moved), rw.T)
    return np.moveaxis(out, (-2, -1), (h_axis, w_axis))


# ----------------------------------------------------------------------
# tensor file format: one JSON header line, then the raw little-endian array


def save_tensor(path, array) -> None:
    arr = array.data if isinstance(array, Tensor) else np.asarray(array)
    tag = "f64" if arr.dtype == np.float64 else "f32"
    arr = arr.astype(_DTYPE_TAGS[tag], copy=False)
    header = json.dumps({"shape": list(arr.shape), "dtype": tag, "byte_order": "little"})
    with open(path, "wb") as f:
        f.write(header.encode("ascii") + b"\n")
        f.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("ascii"))
        dtype = _DTYPE_TAGS[header["dtype"]]
        arr = np.frombuffer(f.read(), dtype=dtype)
    shape = tuple(header["shape"])
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise ValueError(f"{path}: payload size {arr.size} does not match header shape {shape}")
    return arr.reshape(shape).astype(dtype.newbyteorder("="), copy=False).copy()
