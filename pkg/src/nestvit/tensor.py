"""Dense tensors with reverse-mode automatic differentiation.

Everything downstream (the classifier, the aggregation variants, the
generator, the training loop) is expressed in terms of the ops defined here.
Design points:

* f32 storage by default; any op family also runs in f64 when its inputs are
  f64, which is how the finite-difference "replay" checks isolate float noise.
* Broadcasting is deliberately restricted: trailing dimensions must match
  exactly, only *leading* dimensions may be expanded (a bias ``(d,)`` against
  an activation ``(b, blocks, n, d)`` is fine; stretching interior size-1 axes
  is not). This catches most silent shape bugs at op boundaries.
* The tape is implicit: every tensor created by an op holds its parents and a
  backward closure, plus a monotonically increasing id. Creation order is a
  topological order, so ``backward`` just replays reachable nodes by
  descending id.
* Tensors are treated as immutable once created by an op; gradients accumulate
  into ``.grad`` until explicitly zeroed, so repeated ``backward`` calls add up.
* Forward outputs are checked for NaN/Inf (disable with
  ``NEST_FINITE_CHECKS=0`` if profiling).
"""

from __future__ import annotations

import itertools
import os

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes (or dtypes) violate an op's contract."""


class GraphError(RuntimeError):
    """Raised when the autodiff contract is violated (e.g. non-scalar root)."""


_FINITE_CHECKS = os.environ.get("NEST_FINITE_CHECKS", "1") != "0"
_grad_enabled = True
_ids = itertools.count()


class no_grad:
    """Context manager disabling tape recording (eval / finite differences)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense float array participating in the gradient tape.

    Attributes:
        data: the underlying numpy array (float32 or float64, row major).
        grad: accumulated gradient of the same shape, or None.
        requires_grad: whether backward should reach this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not (isinstance(data, np.ndarray) and data.dtype == np.float64):
            # Default storage is f32; f64 ndarrays are kept as-is so the
            # finite-difference replay mode can run the whole graph in f64.
            arr = arr.astype(np.float32, copy=False)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"
        self._id = next(_ids)

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {tuple(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """The raw array. Callers must not mutate it after the forward pass."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, op={self._op})"

    # -- autodiff ------------------------------------------------------------
    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            # Copy: the same upstream buffer may be routed to several parents.
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self):
        """Populate ``.grad`` on every requires-grad tensor reachable from here.

        The root must be scalar (size 1). Grads accumulate across calls.
        """
        if self.data.size != 1:
            raise GraphError(f"backward root must be scalar, got shape {tuple(self.shape)}")
        if not self.requires_grad:
            raise GraphError("backward on a tensor detached from the tape")
        # Creation ids increase parent -> child, so descending id is a valid
        # reverse topological order of the recorded tape.
        seen = {self._id}
        stack = [self]
        nodes = []
        while stack:
            node = stack.pop()
            nodes.append(node)
            for p in node._parents:
                if p.requires_grad and p._id not in seen:
                    seen.add(p._id)
                    stack.append(p)
        nodes.sort(key=lambda t: t._id, reverse=True)
        # Each call propagates exactly one unit of seed and then adds its
        # contribution to whatever was already accumulated, so repeated
        # backward calls add up instead of compounding stale buffers.
        prior = [node.grad for node in nodes]
        for node in nodes:
            node.grad = None
        self._accum(np.ones_like(self.data))
        for node in nodes:
            if node._backward is not None and node.grad is not None:
                node._backward()
        for node, old in zip(nodes, prior):
            if old is not None:
                if node.grad is None:
                    node.grad = old
                else:
                    node.grad += old

    # -- operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _result(data: np.ndarray, parents, op: str) -> Tensor:
    if _FINITE_CHECKS and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = None
    out._op = op
    out._id = next(_ids)
    return out


def _check_same_dtype(op, *ts):
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise ShapeError(f"{op}: mixed dtypes {d0} and {t.data.dtype}")


def _leading_broadcast_ok(sa, sb) -> bool:
    """True when shapes agree on all trailing dims (leading dims may differ)."""
    for da, db in zip(reversed(sa), reversed(sb)):
        if da != db:
            return False
    return True


def _check_broadcast(op, a, b):
    if not _leading_broadcast_ok(a.shape, b.shape):
        raise ShapeError(
            f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} only broadcast "
            "over leading dimensions"
        )


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after leading-dim broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _as_tensor(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.data.dtype))


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_dtype("add", a, b)
    _check_broadcast("add", a, b)
    out = _result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad, b.shape))
        out._backward = bw
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_dtype("sub", a, b)
    _check_broadcast("sub", a, b)
    out = _result(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-out.grad, b.shape))
        out._backward = bw
    return out


def neg(a: Tensor) -> Tensor:
    out = _result(-a.data, (a,), "neg")
    if out.requires_grad:
        out._backward = lambda: a._accum(-out.grad)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    _check_broadcast("mul", a, b)
    out = _result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad * a.data, b.shape))
        out._backward = bw
    return out


def scale(a: Tensor, s) -> Tensor:
    """Multiply by a constant scalar or ndarray (no gradient w.r.t. ``s``)."""
    s = np.asarray(s, dtype=a.data.dtype)
    if s.ndim and not _leading_broadcast_ok(a.shape, s.shape):
        raise ShapeError(f"scale: constant shape {s.shape} incompatible with {tuple(a.shape)}")
    out = _result(a.data * s, (a,), "scale")
    if out.requires_grad:
        out._backward = lambda: a._accum(out.grad * s)
    return out


def scale_rows(a: Tensor, m: np.ndarray) -> Tensor:
    """Scale each leading-index slice of ``a`` by ``m[i]`` (stochastic depth).

    ``m`` is a constant 1-D array of length ``a.shape[0]``; no gradient flows
    to it.
    """
    m = np.asarray(m, dtype=a.data.dtype)
    if m.ndim != 1 or m.shape[0] != a.shape[0]:
        raise ShapeError(f"scale_rows: mask shape {m.shape} vs tensor {tuple(a.shape)}")
    col = m.reshape((a.shape[0],) + (1,) * (a.ndim - 1))
    out = _result(a.data * col, (a,), "scale_rows")
    if out.requires_grad:
        out._backward = lambda: a._accum(out.grad * col)
    return out


def relu(a: Tensor) -> Tensor:
    out = _result(np.maximum(a.data, 0), (a,), "relu")
    if out.requires_grad:
        mask = a.data > 0
        out._backward = lambda: a._accum(out.grad * mask)
    return out


def tanh(a: Tensor) -> Tensor:
    out = _result(np.tanh(a.data), (a,), "tanh")
    if out.requires_grad:
        out._backward = lambda: a._accum(out.grad * (1.0 - out.data * out.data))
    return out


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = _result(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        out._backward = lambda: a._accum(out.grad.reshape(a.shape))
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} not a permutation for ndim {a.ndim}")
    inv = tuple(int(i) for i in np.argsort(axes))
    out = _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), "transpose")
    if out.requires_grad:
        out._backward = lambda: a._accum(out.grad.transpose(inv))
    return out


def take(a: Tensor, axis: int, index: int) -> Tensor:
    """Select a single slice along ``axis`` (the axis is dropped)."""
    axis = int(axis)
    index = int(index)
    if not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"take: axis {axis} out of range for ndim {a.ndim}")
    if not (0 <= index < a.shape[axis]):
        raise ShapeError(f"take: index {index} out of range for extent {a.shape[axis]}")
    # np.take returns a fresh copy; asarray (not ascontiguousarray) keeps a
    # 0-d result 0-d instead of promoting it to shape (1,)
    out = _result(np.asarray(np.take(a.data, index, axis=axis)), (a,), "take")
    if out.requires_grad:
        def bw():
            g = np.zeros_like(a.data)
            sl = [slice(None)] * a.ndim
            sl[axis] = index
            g[tuple(sl)] = out.grad
            a._accum(g)
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False))
        out._backward = bw
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in axis]))
    out = _result(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean")
    if out.requires_grad:
        def bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False) / count)
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}")
    if not _leading_broadcast_ok(a.shape[:-2], b.shape[:-2]):
        raise ShapeError(f"matmul: batch dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}")
    out = _result(np.matmul(a.data, b.data), (a, b), "matmul")
    if out.requires_grad:
        def bw():
            g = out.grad
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accum(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accum(_unbroadcast(gb, b.shape))
        out._backward = bw
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` with ``w`` of shape (d_in, d_out) and bias (d_out,)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# normalization / attention pieces
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)
    out = _result(y, (a,), "softmax")
    if out.requires_grad:
        def bw():
            g = out.grad
            inner = (g * y).sum(axis=ax, keepdims=True)
            a._accum((g - inner) * y)
        out._backward = bw
    return out


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Layer normalization over the last (channel) axis with affine params."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: affine shapes {tuple(gamma.shape)}/{tuple(beta.shape)} vs channels {d}")
    _check_same_dtype("layernorm", x, gamma, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _result(xhat * gamma.data + beta.data, (x, gamma, beta), "layernorm")
    if out.requires_grad:
        def bw():
            g = out.grad
            red = tuple(range(g.ndim - 1))
            if gamma.requires_grad:
                gamma._accum((g * xhat).sum(axis=red))
            if beta.requires_grad:
                beta._accum(g.sum(axis=red))
            if x.requires_grad:
                gy = g * gamma.data
                m1 = gy.mean(axis=-1, keepdims=True)
                m2 = (gy * xhat).mean(axis=-1, keepdims=True)
                x._accum(inv * (gy - m1 - xhat * m2))
        out._backward = bw
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray, label_smoothing: float = 0.0) -> Tensor:
    """Mean softmax cross-entropy with optional label smoothing (fused op).

    ``labels`` is a constant int array of shape (batch,). The smoothed target
    for class k is ``(1-s)·1[k==y] + s/num_classes``.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (batch, classes), got {tuple(logits.shape)}")
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} vs batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    q = np.full((b, k), label_smoothing / k, dtype=logits.data.dtype)
    q[np.arange(b), labels] += 1.0 - label_smoothing
    loss = -(q * logp).mean(axis=0).sum()
    out = _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), "cross_entropy")
    if out.requires_grad:
        p = np.exp(logp)
        out._backward = lambda: logits._accum((p - q) * (out.grad / b))
    return out


# ---------------------------------------------------------------------------
# spatial ops (NHWC)
# ---------------------------------------------------------------------------

def _same_pad(extent: int, window: int, stride: int) -> tuple[int, int]:
    """SAME padding amounts (before, after); extra padding goes after."""
    out = -(-extent // stride)  # ceil div
    total = max((out - 1) * stride + window - extent, 0)
    before = total // 2
    return before, total - before


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(b, Ho, Wo, kh, kw, c) view of all stride-spaced kh x kw windows."""
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    v = v[:, ::stride, ::stride]               # (b, Ho, Wo, c, kh, kw)
    return v.transpose(0, 1, 2, 4, 5, 3)       # (b, Ho, Wo, kh, kw, c)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """2-D cross-correlation, NHWC, SAME zero padding, stride 1 or 2."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected NHWC input and (kh,kw,ci,co) kernel, got {tuple(x.shape)} and {tuple(kernel.shape)}")
    kh, kw, ci, co = kernel.shape
    if x.shape[3] != ci:
        raise ShapeError(f"conv2d: input channels {x.shape[3]} vs kernel channels {ci}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    _check_same_dtype("conv2d", x, kernel)
    b, h, w, _ = x.shape
    (pt, pb), (pl, pr) = _same_pad(h, kh, stride), _same_pad(w, kw, stride)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = _windows(xp, kh, kw, stride)                       # (b,Ho,Wo,kh,kw,ci)
    bo, ho, wo = cols.shape[:3]
    kmat = kernel.data.reshape(kh * kw * ci, co)
    y = cols.reshape(bo * ho * wo, kh * kw * ci) @ kmat
    y = y.reshape(bo, ho, wo, co)
    if bias is not None:
        if bias.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {tuple(bias.shape)} vs out channels {co}")
        y = y + bias.data
    out = _result(y, (x, kernel) + ((bias,) if bias is not None else ()), "conv2d")
    if out.requires_grad:
        cols_flat = cols.reshape(bo * ho * wo, kh * kw * ci).copy()
        def bw():
            g = out.grad                                     # (b,Ho,Wo,co)
            if bias is not None and bias.requires_grad:
                bias._accum(g.sum(axis=(0, 1, 2)))
            gmat = g.reshape(bo * ho * wo, co)
            if kernel.requires_grad:
                kernel._accum((cols_flat.T @ gmat).reshape(kernel.shape))
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                kd = kernel.data
                for di in range(kh):
                    for dj in range(kw):
                        contrib = gmat @ kd[di, dj].T         # (b*Ho*Wo, ci)
                        gxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += \
                            contrib.reshape(bo, ho, wo, ci)
                x._accum(gxp[:, pt:pt + h, pl:pl + w, :])
        out._backward = bw
    return out


def maxpool2d(x: Tensor, window: int = 3, stride: int = 2) -> Tensor:
    """Max pooling, SAME padding; gradient routes to the argmax (ties: lowest
    linear index within the window)."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected NHWC, got {tuple(x.shape)}")
    b, h, w, c = x.shape
    if stride == 2 and (h % 2 or w % 2):
        raise ShapeError(f"maxpool2d: spatial dims must be even for stride 2, got {h}x{w}")
    (pt, pb), (pl, pr) = _same_pad(h, window, stride), _same_pad(w, window, stride)
    neg = np.finfo(x.data.dtype).min
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=neg)
    wins = _windows(xp, window, window, stride)               # (b,Ho,Wo,kh,kw,c)
    bo, ho, wo = wins.shape[:3]
    flat = wins.reshape(bo, ho, wo, window * window, c)
    arg = flat.argmax(axis=3)                                 # first max = lowest linear index
    out = _result(np.take_along_axis(flat, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :], (x,), "maxpool2d")
    if out.requires_grad:
        def bw():
            g = out.grad
            gxp = np.zeros_like(xp)
            bi, oi, oj, ci = np.indices(arg.shape)
            rows = oi * stride + arg // window
            cols = oj * stride + arg % window
            np.add.at(gxp, (bi, rows, cols, ci), g)
            x._accum(gxp[:, pt:pt + h, pl:pl + w, :])
        out._backward = bw
    return out


def avgpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Average pooling, SAME padding, padded cells excluded from the count
    (a constant map pools to the same constant)."""
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d: expected NHWC, got {tuple(x.shape)}")
    b, h, w, c = x.shape
    if stride == 2 and (h % 2 or w % 2):
        raise ShapeError(f"avgpool2d: spatial dims must be even for stride 2, got {h}x{w}")
    (pt, pb), (pl, pr) = _same_pad(h, window, stride), _same_pad(w, window, stride)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    ones = np.pad(np.ones((1, h, w, 1), dtype=x.data.dtype), ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    wins = _windows(xp, window, window, stride)
    cnt = _windows(ones, window, window, stride).sum(axis=(3, 4))   # (1,Ho,Wo,1)
    y = wins.sum(axis=(3, 4)) / cnt
    out = _result(y, (x,), "avgpool2d")
    if out.requires_grad:
        bo, ho, wo = y.shape[:3]
        def bw():
            share = out.grad / cnt
            gxp = np.zeros_like(xp)
            for di in range(window):
                for dj in range(window):
                    gxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += share
            x._accum(gxp[:, pt:pt + h, pl:pl + w, :])
        out._backward = bw
    return out


def _s2d(a: np.ndarray, f: int) -> np.ndarray:
    b, h, w, c = a.shape
    a = a.reshape(b, h // f, f, w // f, f, c)
    return np.ascontiguousarray(a.transpose(0, 1, 3, 2, 4, 5)).reshape(b, h // f, w // f, f * f * c)


def _d2s(a: np.ndarray, f: int) -> np.ndarray:
    b, h, w, c = a.shape
    a = a.reshape(b, h, w, f, f, c // (f * f))
    return np.ascontiguousarray(a.transpose(0, 1, 3, 2, 4, 5)).reshape(b, h * f, w * f, c // (f * f))


def space_to_depth(x: Tensor, factor: int = 2) -> Tensor:
    """(b,h,w,c) -> (b,h/f,w/f,f*f*c); channel index runs (dy, dx, c)."""
    if x.ndim != 4:
        raise ShapeError(f"space_to_depth: expected NHWC, got {tuple(x.shape)}")
    if x.shape[1] % factor or x.shape[2] % factor:
        raise ShapeError(f"space_to_depth: spatial dims {x.shape[1]}x{x.shape[2]} not divisible by {factor}")
    out = _result(_s2d(x.data, factor), (x,), "space_to_depth")
    if out.requires_grad:
        out._backward = lambda: x._accum(_d2s(out.grad, factor))
    return out


def pixel_shuffle(x: Tensor, factor: int = 2) -> Tensor:
    """(b,h,w,f*f*c) -> (b,f*h,f*w,c); exact inverse of ``space_to_depth``."""
    if x.ndim != 4:
        raise ShapeError(f"pixel_shuffle: expected NHWC, got {tuple(x.shape)}")
    if x.shape[3] % (factor * factor):
        raise ShapeError(f"pixel_shuffle: channels {x.shape[3]} not divisible by {factor * factor}")
    out = _result(_d2s(x.data, factor), (x,), "pixel_shuffle")
    if out.requires_grad:
        out._backward = lambda: x._accum(_s2d(out.grad, factor))
    return out
