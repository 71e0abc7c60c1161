"""Dense tensors with reverse-mode automatic differentiation.

Only the handful of primitives needed by the depth networks and their losses
are provided. Arrays are float32 unless a tensor is explicitly created with
another dtype; every op preserves the dtype of its inputs, which lets the
gradient checks run the exact same code paths in float64.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
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
    """An n-d array plus the bookkeeping needed for backprop.

    Leaf tensors created with ``requires_grad=True`` receive ``.grad`` when
    :meth:`backward` is called on a scalar that depends on them. Gradients of
    intermediate results are not retained.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op output, recording it on the graph when needed.

    ``backward_fn(g)`` returns one gradient (or None) per parent.
    """
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topo_order(root: Tensor) -> list:
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
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = g.astype(node.data.dtype, copy=False)
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


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _result(x.data + x.dtype.type(c), (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    s = x.dtype.type(slope)
    out = np.where(mask, x.data, x.data * s)
    return _result(out, (x,), lambda g: (np.where(mask, g, g * s),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * out * (1 - out),))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of a nonpositive value; clamp the input first")
    d = x.data
    return _result(np.log(d), (x,), lambda g: (g / d,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return _result(np.clip(d, lo, hi).astype(x.dtype), (x,), lambda g: (g * inside,))


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape, dt = x.shape, x.dtype

    def bw(g):
        return (np.full(shape, g / n, dtype=dt),)

    return _result(np.asarray(x.data.mean(dtype=np.float64), dtype=dt), (x,), bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape, dt = x.shape, x.dtype
    return _result(np.asarray(x.data.sum(dtype=np.float64), dtype=dt), (x,),
                   lambda g: (np.full(shape, g, dtype=dt),))


# ---------------------------------------------------------------------------
# channel plumbing
# ---------------------------------------------------------------------------

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects 4-d tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    return _result(np.concatenate([a.data, b.data], axis=1), (a, b),
                   lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape, dt = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dt)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop].copy(), (x,), bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

try:
    import torch as _torch
except ImportError:  # pragma: no cover - numpy kernels still work
    _torch = None

_conv_backend = "torch" if _torch is not None else "numpy"


@contextlib.contextmanager
def flush_subnormals():
    """Treat subnormal floats as zero inside the block (CPU flag, torch only).

    Long training runs accumulate subnormal activations that slow the conv
    kernels; IEEE behaviour is restored on exit.
    """
    if _torch is None:
        yield
        return
    _torch.set_flush_denormal(True)
    try:
        yield
    finally:
        _torch.set_flush_denormal(False)


def conv_backend() -> str:
    return _conv_backend


def set_conv_backend(name: str) -> str:
    """Select the conv kernels ("numpy" or "torch"); returns the previous choice.

    Both compute the same cross-correlation and its gradients. The torch
    kernels are only a faster array routine: the graph stays in numpy.
    """
    global _conv_backend
    if name not in ("numpy", "torch"):
        raise ValueError(f"unknown conv backend {name!r}")
    if name == "torch" and _torch is None:
        raise RuntimeError("torch is not installed")
    prev, _conv_backend = _conv_backend, name
    return prev


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW layout, square kernels."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    B, C, H, W = x.shape
    O, Cw, k, k2 = weight.shape
    if Cw != C or k != k2:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Cw} (kernel {k}x{k2})")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({O},)")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be positive and pad nonnegative")
    if H + 2 * pad < k or W + 2 * pad < k:
        raise ShapeError(f"conv2d: padded input {H + 2 * pad}x{W + 2 * pad} smaller than kernel {k}")
    if _conv_backend == "torch":
        out, bw = _conv_torch(x.data, weight.data, stride, pad)
    elif stride == 1:
        out, bw = _conv_shift(x.data, weight.data, pad)
    else:
        out, bw = _conv_im2col(x.data, weight.data, stride, pad)
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)
        parents = (x, weight, bias)

        def backward_fn(g):
            gx, gw = bw(g, x.requires_grad)
            return gx, gw, g.sum(axis=(0, 2, 3))
    else:
        parents = (x, weight)

        def backward_fn(g):
            return bw(g, x.requires_grad)

    return _result(out, parents, backward_fn)


def _conv_torch(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    dt = np.result_type(x, w)
    xt = _torch.from_numpy(np.ascontiguousarray(x, dtype=dt))
    wt = _torch.from_numpy(np.ascontiguousarray(w, dtype=dt))
    with _torch.no_grad():
        out = _torch.nn.functional.conv2d(xt, wt, None, stride, pad).numpy()

    def bw(g, need_x):
        gt = _torch.from_numpy(np.ascontiguousarray(g, dtype=dt))
        gx, gw, _ = _torch.ops.aten.convolution_backward(
            gt, xt, wt, None, [stride, stride], [pad, pad], [1, 1], False, [0, 0], 1, [need_x, True, False])
        return (gx.numpy().astype(x.dtype, copy=False) if need_x else None), gw.numpy().astype(w.dtype, copy=False)

    return out, bw


def _conv_shift(x: np.ndarray, w: np.ndarray, pad: int):
    """Stride-1 conv as k*k GEMMs over shifted views of the flattened padded input.

    The padded input is laid out channels-last and flattened to rows
    (B*Hp*Wp, C), so a kernel offset (i, j) becomes a row offset i*Wp + j and
    every GEMM operand is a contiguous block; no im2col buffer is built.
    Rows that straddle image rows or batch items only feed cropped outputs.
    """
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho, Wo = Hp - k + 1, Wp - k + 1
    dt = x.dtype
    xp = np.zeros((B, Hp, Wp, C), dtype=dt)
    xp[:, pad:pad + H, pad:pad + W] = x.transpose(0, 2, 3, 1)
    xf = xp.reshape(-1, C)
    L = xf.shape[0]
    n = L - (k - 1) * Wp - (k - 1)
    wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))  # k, k, C, O
    acc = np.zeros((L, O), dtype=dt)
    for i in range(k):
        for j in range(k):
            off = i * Wp + j
            acc[:n] += xf[off:off + n] @ wt[i, j]
    out = np.ascontiguousarray(acc.reshape(B, Hp, Wp, O)[:, :Ho, :Wo].transpose(0, 3, 1, 2))

    def bw(g, need_x):
        gp = np.zeros((B, Hp, Wp, O), dtype=dt)
        gp[:, :Ho, :Wo] = g.transpose(0, 2, 3, 1)
        gf = gp.reshape(-1, O)[:n]
        gw = np.empty((k, k, C, O), dtype=dt)
        gx = np.zeros((L, C), dtype=dt) if need_x else None
        for i in range(k):
            for j in range(k):
                off = i * Wp + j
                gw[i, j] = xf[off:off + n].T @ gf
                if need_x:
                    if O == 1:
                        gx[off:off + n] += gf * wt[i, j, :, 0]
                    else:
                        gx[off:off + n] += gf @ wt[i, j].T
        gw = np.ascontiguousarray(gw.transpose(3, 2, 0, 1))
        if need_x:
            gx = np.ascontiguousarray(gx.reshape(B, Hp, Wp, C)[:, pad:pad + H, pad:pad + W].transpose(0, 3, 1, 2))
        return gx, gw

    return out, bw


def _conv_im2col(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    Ho, Wo = conv_output_size(H, k, stride, pad), conv_output_size(W, k, stride, pad)
    dt = x.dtype
    xt = np.pad(x.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((C, k, k, B, Ho, Wo), dtype=dt)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    cols = cols.reshape(C * k * k, -1)
    w2 = w.reshape(O, -1)
    out = np.ascontiguousarray((w2 @ cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))

    def bw(g, need_x):
        gm = g.transpose(1, 0, 2, 3).reshape(O, -1)
        gw = (gm @ cols.T).reshape(w.shape)
        if not need_x:
            return None, gw
        gcols = (w2.T @ gm).reshape(C, k, k, B, Ho, Wo)
        gxp = np.zeros((C, B, H + 2 * pad, W + 2 * pad), dtype=dt)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, i, j]
        gx = np.ascontiguousarray(gxp[:, :, pad:pad + H, pad:pad + W].transpose(1, 0, 2, 3))
        return gx, gw

    return out, bw


def upsample_nearest2x(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _result(out, (x,), lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),))


def upsample2x_conv(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Learned 2x upsampling: nearest-neighbour resize then a 'same' conv."""
    k = weight.shape[2]
    return conv2d(upsample_nearest2x(x), weight, bias, stride=1, pad=k // 2)


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over (B, H, W).

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({C},)")
    d = x.data
    dt = x.dtype
    n = B * H * W
    if training:
        if n < 2:
            raise ShapeError("batchnorm2d in train mode needs at least 2 values per channel")
        mu = d.mean(axis=(0, 2, 3), dtype=np.float64)
        var = d.var(axis=(0, 2, 3), dtype=np.float64)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu.astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1 - momentum) * (var * n / (n - 1)).astype(running_var.dtype)
    else:
        mu, var = running_mean.astype(np.float64), running_var.astype(np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (d - mu.astype(dt).reshape(1, C, 1, 1)) * inv.reshape(1, C, 1, 1)
    out = xhat * gamma.data.reshape(1, C, 1, 1) + beta.data.reshape(1, C, 1, 1)
    g_data = gamma.data

    def bw(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * g_data.reshape(1, C, 1, 1)
        if training:
            gx = (inv.reshape(1, C, 1, 1) / n) * (
                n * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(1, C, 1, 1)
        return gx.astype(dt), ggamma, gbeta

    return _result(out.astype(dt), (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# custom ops
# ---------------------------------------------------------------------------

def custom_op(data: np.ndarray, parents: Iterable[Tensor], backward_fn: Callable) -> Tensor:
    """Record an op implemented outside this module (e.g. the warp)."""
    return _result(data, tuple(parents), backward_fn)
