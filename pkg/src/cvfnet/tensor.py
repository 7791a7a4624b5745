"""Dense tensors with reverse-mode differentiation.

Only the operations the detector needs are provided. Every differentiable
op is a plain function taking and returning :class:`Tensor`; the result
remembers its parents and a closure mapping the output gradient to the
input gradients. :func:`backward` orders the recorded graph into a
:class:`Tape` and walks it in reverse.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, ContractError, DimensionError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = np.float64
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        return add(self, mul_scalar(other, -1.0))

    def __truediv__(self, s):
        return mul_scalar(self, 1.0 / s)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def apply_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap a forward result and hook it into the graph.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out.op = op
    return out


class Tape:
    """Topologically ordered list of the graph nodes reachable from a root.

    Producers always precede consumers; :meth:`run` visits nodes in reverse.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def run(self, root: Tensor, seed: np.ndarray):
        grads = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every leaf that requires grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return Tape([])
    tape = Tape.record(loss)
    tape.run(loss, np.ones_like(loss.data))
    return tape


def _check_same(x: Tensor, y: Tensor, what: str):
    if x.shape != y.shape:
        for axis, (a, b) in enumerate(zip(x.shape, y.shape)):
            if a != b:
                raise DimensionError(f"{what}: axis {axis} differs ({a} vs {b})")
        raise DimensionError(f"{what}: rank differs ({x.ndim} vs {y.ndim})")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(x: Tensor, y: Tensor) -> Tensor:
    _check_same(x, y, "add")
    return apply_op(x.data + y.data, (x, y), lambda g: (g, g), "add")


def mul(x: Tensor, y: Tensor) -> Tensor:
    _check_same(x, y, "mul")
    xd, yd = x.data, y.data
    return apply_op(xd * yd, (x, y), lambda g: (g * yd, g * xd), "mul")


def mul_scalar(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return apply_op(x.data * x.data.dtype.type(s), (x,), lambda g: (g * s,), "mul_scalar")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply_op(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                    lambda g: (g * mask,), "relu")


def sigmoid_np(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_np(x.data)
    return apply_op(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return apply_op(s, (x,), bw, "softmax")


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select from ``a`` where mask is true, else from ``b``. Mask is constant."""
    _check_same(a, b, "where")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        mask = np.broadcast_to(mask, a.shape)
    return apply_op(np.where(mask, a.data, b.data), (a, b),
                    lambda g: (np.where(mask, g, 0), np.where(mask, 0, g)), "where")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the tensor-library spelling
    shape = x.shape
    return apply_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                    lambda g: (np.full(shape, g, dtype=g.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    return mul_scalar(sum(x), 1.0 / max(x.size, 1))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return apply_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return apply_op(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                    lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise DimensionError("concat of an empty list")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0]
    ax = axis % ref.ndim
    for t in xs[1:]:
        if t.ndim != ref.ndim:
            raise DimensionError(f"concat: rank differs ({ref.ndim} vs {t.ndim})")
        for i, (a, b) in enumerate(zip(ref.shape, t.shape)):
            if i != ax and a != b:
                raise DimensionError(f"concat: axis {i} differs ({a} vs {b})")
    sizes = [t.shape[ax] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return apply_op(np.concatenate([t.data for t in xs], axis=ax), xs, bw, "concat")


def _check_index(idx: np.ndarray, m: int):
    if idx.size:
        lo, hi = idx.min(), idx.max()
        if lo < 0:
            raise IndexError(f"row index {lo} out of range [0, {m})")
        if hi >= m:
            raise IndexError(f"row index {hi} out of range [0, {m})")


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    m = x.shape[0]
    _check_index(idx, m)

    def bw(g):
        gx = np.zeros((m,) + g.shape[1:], dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return apply_op(x.data[idx], (x,), bw, "gather_rows")


def stable_argsort_int(keys: np.ndarray) -> np.ndarray:
    """Stable argsort of non-negative integer keys.

    Keys below 2**32 go through one or two uint16 passes, which numpy
    sorts with a radix sort; much faster than a general stable sort.
    """
    keys = np.asarray(keys).reshape(-1)
    if keys.size == 0:
        return np.zeros(0, dtype=np.int64)
    top = int(keys.max())
    if int(keys.min()) < 0 or top >= 1 << 32:
        return np.argsort(keys, kind="stable")
    if top < 1 << 16:
        return np.argsort(keys.astype(np.uint16), kind="stable")
    order = np.argsort((keys & 0xFFFF).astype(np.uint16), kind="stable")
    return order[np.argsort((keys[order] >> 16).astype(np.uint16), kind="stable")]


def last_write_winners(idx: np.ndarray) -> np.ndarray:
    """Input positions that win under the last-write rule (largest position per target)."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        return np.zeros(0, dtype=np.int64)
    order = stable_argsort_int(idx)
    s = idx[order]
    last = np.empty(s.size, dtype=bool)
    last[:-1] = s[1:] != s[:-1]
    last[-1] = True
    return order[last]


def scatter_rows(x: Tensor, idx, m: int, reduce: str = "overwrite_last", unique: bool = False) -> Tensor:
    """Write row ``i`` of ``x`` to output row ``idx[i]``.

    Collisions keep the row with the largest input position; rows nobody
    writes are zero. Gradient reaches the winning rows only. ``unique``
    promises distinct indices and skips collision resolution.
    """
    if reduce != "overwrite_last":
        raise ConfigurationError(f"unsupported scatter reduction {reduce!r}")
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size != x.shape[0]:
        raise DimensionError(f"scatter_rows: axis 0 differs ({x.shape[0]} rows vs {idx.size} indices)")
    _check_index(idx, m)
    win = np.arange(idx.size) if unique else last_write_winners(idx)
    dest = idx[win]
    out = np.zeros((m,) + x.shape[1:], dtype=x.dtype)
    out[dest] = x.data[win]
    n = x.shape[0]

    def bw(g):
        gx = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
        gx[win] = g[dest]
        return (gx,)

    return apply_op(out, (x,), bw, "scatter_rows")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"linear expects 2-D operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"linear: axis 1 of input ({x.shape[1]}) != axis 0 of weight ({weight.shape[0]})")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias axis 0 is {bias.shape}, expected ({weight.shape[1]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return apply_op(out, parents, bw, "linear")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (C,H,W) map with (K,C,kh,kw) kernels (im2col)."""
    if x.ndim != 3 or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects (C,H,W) and (K,C,kh,kw), got {x.shape}, {kernels.shape}")
    c, h, w = x.shape
    k, kc, kh, kw = kernels.shape
    if kc != c:
        raise DimensionError(f"conv2d: axis 0 of input ({c}) != axis 1 of kernels ({kc})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d kernel must be odd-sized, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"bad stride/padding {stride}/{padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"conv2d output would be {ho}x{wo} for input {h}x{w}")
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"conv2d: bias shape {bias.shape}, expected ({k},)")

    xd = x.data
    if kh == 1 and kw == 1 and padding == 0:
        cols = np.ascontiguousarray(xd[:, ::stride, ::stride]).reshape(c, ho * wo)
    else:
        xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        win = win[:, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride]
        cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)
    kmat = kernels.data.reshape(k, -1)
    out = kmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(k, ho, wo)
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def bw(g):
        g2 = g.reshape(k, ho * wo)
        gk = (g2 @ cols.T).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ g2).reshape(c, kh, kw, ho, wo)
            hp, wp = h + 2 * padding, w + 2 * padding
            gxp = np.zeros((c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i: i + stride * (ho - 1) + 1: stride,
                        j: j + stride * (wo - 1) + 1: stride] += gcols[:, i, j]
            gx = gxp[:, padding: padding + h, padding: padding + w] if padding else gxp
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=1)

    return apply_op(out, parents, bw, "conv2d")


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) align-corners linear interpolation matrix."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    if n_in == n_out:
        return np.eye(n_out, dtype=dtype)
    src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 2)
    frac = src - i0
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - frac
    m[rows, i0 + 1] += frac
    return m


def bilinear_resize(x: Tensor, target_h: int, target_w: int) -> Tensor:
    if target_h < 1 or target_w < 1:
        raise ConfigurationError(f"resize target must be >= 1, got {target_h}x{target_w}")
    c, h, w = x.shape
    if (h, w) == (target_h, target_w):
        return apply_op(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    ry = resize_matrix(h, target_h, x.dtype)
    rx = resize_matrix(w, target_w, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def bw(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return apply_op(out, (x,), bw, "bilinear_resize")


def bilinear_weights(coords: np.ndarray, h: int, w: int, mask=None, dtype=np.float64) -> sp.csr_matrix:
    """Sparse (N, h*w) matrix of 4-neighbour weights for (u, v) samples.

    Coordinates are clamped into the map first. Rows with ``mask`` false
    are left empty.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    n = coords.shape[0]
    keep = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    u = np.clip(np.nan_to_num(coords[:, 0]), 0.0, w - 1)
    v = np.clip(np.nan_to_num(coords[:, 1]), 0.0, h - 1)
    u0 = np.minimum(np.floor(u).astype(np.int64), max(w - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(h - 2, 0))
    du = u - u0
    dv = v - v0
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    rows = np.repeat(np.nonzero(keep)[0], 4)
    cols = np.stack([v0 * w + u0, v0 * w + u1, v1 * w + u0, v1 * w + u1], axis=1)[keep].reshape(-1)
    vals = np.stack([(1 - du) * (1 - dv), du * (1 - dv), (1 - du) * dv, du * dv], axis=1)[keep].reshape(-1)
    # duplicate (row, col) pairs on 1-pixel-wide maps are summed by scipy
    return sp.csr_matrix((vals.astype(dtype), (rows, cols)), shape=(n, h * w))


def sample_with_matrix(x: Tensor, weights: sp.csr_matrix) -> Tensor:
    """Rows ``weights @ x_flat`` where x is (C,H,W) flattened to (H*W, C)."""
    c, h, w = x.shape
    flat = x.data.reshape(c, h * w)
    out = np.asarray(weights @ flat.T, dtype=x.dtype)
    wt = weights.T.tocsr()

    def bw(g):
        return (np.asarray(wt @ g, dtype=g.dtype).T.reshape(c, h, w),)

    return apply_op(out, (x,), bw, "bilinear_sample")


def bilinear_sample(x: Tensor, coords, mask=None) -> Tensor:
    """Sample a (C,H,W) map at N (u, v) positions -> (N, C).

    u indexes columns, v rows. Coordinates are constants.
    """
    if x.ndim != 3:
        raise DimensionError(f"bilinear_sample expects (C,H,W), got {x.shape}")
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    _, h, w = x.shape
    return sample_with_matrix(x, bilinear_weights(coords, h, w, mask=mask, dtype=x.dtype))


def max_pool_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Boolean max-pooling (non-differentiable) of an (H, W) mask."""
    h, w = mask.shape
    if h % stride or w % stride:
        raise ConfigurationError(f"mask {h}x{w} not divisible by stride {stride}")
    return mask.reshape(h // stride, stride, w // stride, stride).any(axis=(1, 3))


def parameters_of(objs: Iterable) -> list:
    return [t for t in objs if isinstance(t, Tensor) and t.requires_grad]
