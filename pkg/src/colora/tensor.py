"""Dense tensors, convolution primitives and a small reverse-mode tape.

Layout is channels-last: an image batch is ``(N, *spatial, C)`` and a dense
kernel is ``(*spatial, C, T)``.  Convolutions are cross-correlations
(kernel offsets are added to the output index).  The number of spatial
dimensions is taken from the kernel, so the same routines handle 1D, 2D and
3D inputs.

Values are stored as float32.  Every op lifts its operands to float64,
computes, and rounds the result back to float32, so reductions accumulate
in double precision.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from . import _kernels
except ImportError:  # numba unavailable: fall back to einsum
    _kernels = None

__all__ = [
    "Tensor",
    "ConvKernel",
    "GradTape",
    "backward",
    "is_recording",
    "no_grad",
    "finite_diff_grad",
    "conv",
    "conv1d",
    "conv2d",
    "conv3d",
    "depthwise_conv",
    "depthwise_conv2d",
    "pointwise_conv",
    "pointwise_conv2d",
    "separable_delta_conv",
    "add",
    "mul",
    "tensor_sum",
    "relu",
    "bias_add",
    "affine",
    "max_pool2d",
    "global_avg_pool",
    "flatten",
    "dense",
    "linear",
    "softmax",
    "softmax_cross_entropy",
]

_name_counter = itertools.count()


class Tensor:
    """A float32 array with an optional trainable flag and a name.

    Construction from external data rejects NaN and Inf.  Results of ops are
    wrapped without that check so a diverging run surfaces at the loss.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float32)
        if arr.ndim and min(arr.shape) < 1:
            raise ValueError(f"tensor extents must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        if name is None and requires_grad:
            name = f"tensor{next(_name_counter)}"
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.asarray(arr, dtype=np.float32)
        t.requires_grad = requires_grad
        t.name = None
        return t

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False, name: Optional[str] = None) -> "Tensor":
        return cls(np.zeros(shape, dtype=np.float32), requires_grad=requires_grad, name=name)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", trainable" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


@dataclass
class ConvKernel:
    """Dense kernel ``(*spatial, C, T)`` with an optional per-filter bias."""

    weights: Tensor
    bias: Optional[Tensor] = None

    def __post_init__(self):
        if self.weights.ndim < 3:
            raise ValueError(f"kernel needs (*spatial, C, T), got {self.weights.shape}")
        if self.bias is not None and self.bias.shape != (self.weights.shape[-1],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[-1]} filters"
            )

    @property
    def spatial(self) -> tuple:
        return self.weights.shape[:-2]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[-2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[-1]


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class GradTape:
    """Records differentiable ops issued while it is the active tape.

    Use as a context manager; tapes are per thread.  ``no_grad()`` pushes a
    placeholder that suspends recording.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.records)


class no_grad:
    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()


def _active_tape() -> Optional[GradTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def is_recording() -> bool:
    return _active_tape() is not None


def _emit(out: np.ndarray, inputs: tuple, vjp) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs)
    if needs:
        tape.records.append(_Record(result, inputs, vjp))
    return result


def backward(tape: GradTape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse sweep over ``tape`` from the scalar ``loss``.

    Returns one gradient per trainable leaf, keyed by the leaf's name.  Leaves
    with ``requires_grad=False`` never appear.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(r.out) for r in tape.records}
    if id(loss) not in produced:
        raise ValueError("loss was not produced by an op recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    out: dict[str, np.ndarray] = {}
    for key, leaf in leaves.items():
        if leaf.name in out:
            raise ValueError(f"two trainable leaves share the name {leaf.name!r}")
        out[leaf.name] = grads[key].astype(np.float32)
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], at, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` at ``at``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(at.data if isinstance(at, Tensor) else at, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x.copy()))
        flat[i] = orig - eps
        lo = float(f(x.copy()))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"f returned a non-finite value near element {i}")
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


# ---------------------------------------------------------------------------
# convolution helpers
# ---------------------------------------------------------------------------

def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64)


def _batched(x: Tensor, ndim: int) -> bool:
    """True when ``x`` already carries a leading batch axis."""
    if x.ndim == ndim + 2:
        return True
    if x.ndim == ndim + 1:
        return False
    raise ValueError(f"expected input with {ndim} spatial dims (+channels, optional batch), got {x.shape}")


def _geometry(spatial: tuple, ksize: tuple, padding: str, stride: int):
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if padding == "same":
        pads = [(k // 2, k - 1 - k // 2) for k in ksize]
    else:
        pads = [(0, 0)] * len(ksize)
    out = []
    for n, k, (lo, hi) in zip(spatial, ksize, pads):
        span = n + lo + hi - k + 1
        if span < 1:
            raise ValueError(f"kernel {ksize} larger than padded input {spatial}")
        out.append((span - 1) // stride + 1)
    return pads, tuple(out)


def _window(xp: np.ndarray, offset: tuple, out_spatial: tuple, stride: int) -> tuple:
    idx = tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out_spatial))
    return (slice(None),) + idx + (slice(None),)


def _pad(x64: np.ndarray, pads) -> np.ndarray:
    if all(p == (0, 0) for p in pads):
        return x64
    return np.pad(x64, [(0, 0)] + list(pads) + [(0, 0)])


def _crop(xp: np.ndarray, pads, spatial: tuple) -> np.ndarray:
    idx = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, spatial))
    return xp[(slice(None),) + idx + (slice(None),)]


def _unbatch(arr: np.ndarray, batched: bool) -> np.ndarray:
    return arr if batched else arr[0]


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def _windows(xp: np.ndarray, ksize: tuple, out_spatial: tuple, stride: int) -> np.ndarray:
    """Strided view ``(N, *out, C, *k)`` of every kernel placement."""
    nd = len(ksize)
    win = sliding_window_view(xp, ksize, axis=tuple(range(1, nd + 1)))
    if stride > 1:
        win = win[(slice(None),) + (slice(None, None, stride),) * nd]
    return win[(slice(None),) + tuple(slice(0, n) for n in out_spatial)]


def _im2col(xp: np.ndarray, ksize: tuple, out_spatial: tuple, stride: int) -> np.ndarray:
    """Rows ``(N * prod(out), prod(k) * C)`` ordered to match ``weight.reshape(-1, T)``."""
    nd = len(ksize)
    win = _windows(xp, ksize, out_spatial, stride)
    perm = tuple(range(nd + 1)) + tuple(range(nd + 2, 2 * nd + 2)) + (nd + 1,)
    return win.transpose(perm).reshape(-1, int(np.prod(ksize)) * xp.shape[-1])


def _conv_input_grad(g: np.ndarray, w64: np.ndarray, pads, spatial: tuple, stride: int) -> np.ndarray:
    """Gradient of a dense correlation with respect to its unpadded input."""
    ksize = w64.shape[:-2]
    nd, C = len(ksize), w64.shape[-2]
    out_sp = g.shape[1:-1]
    if stride == 1:
        # correlate the output gradient with the flipped kernel, only over
        # positions that survive the crop
        gpads = [(k - 1 - lo, lo + n - m) for k, (lo, _), n, m in zip(ksize, pads, spatial, out_sp)]
        flipped = np.swapaxes(w64[(slice(None, None, -1),) * nd], -1, -2)
        gcols = _im2col(_pad(g, gpads), ksize, spatial, 1)
        return (gcols @ flipped.reshape(-1, C)).reshape(g.shape[:1] + spatial + (C,))
    xp_shape = g.shape[:1] + tuple(n + lo + hi for n, (lo, hi) in zip(spatial, pads)) + (C,)
    gxp = np.zeros(xp_shape)
    for off in np.ndindex(*ksize):
        gxp[_window(gxp, off, out_sp, stride)] += g @ w64[off].T
    return _crop(gxp, pads, spatial)


def _dw_letters(nd: int) -> tuple:
    # kernel offsets, output positions
    return "abcdefgh"[:nd], "pqrstuvw"[:nd]


def _dw_forward(xp: np.ndarray, w64: np.ndarray, out_sp: tuple, stride: int) -> np.ndarray:
    ksize = w64.shape[:-1]
    if len(ksize) == 2 and _kernels is not None:
        return _kernels.dw2d_forward(np.ascontiguousarray(xp), w64, stride, *out_sp)
    k, p = _dw_letters(len(ksize))
    return np.einsum(f"n{p}g{k},{k}g->n{p}g", _windows(xp, ksize, out_sp, stride), w64)


def _dw_weight_grad(xp: np.ndarray, g: np.ndarray, ksize: tuple, stride: int) -> np.ndarray:
    if len(ksize) == 2 and _kernels is not None:
        return _kernels.dw2d_weight_grad(np.ascontiguousarray(xp), np.ascontiguousarray(g),
                                         stride, *ksize)
    k, p = _dw_letters(len(ksize))
    win = _windows(xp, ksize, g.shape[1:-1], stride)
    return np.einsum(f"n{p}g{k},n{p}g->{k}g", win, g)


def _dw_input_grad(g: np.ndarray, w64: np.ndarray, xp_shape: tuple, stride: int) -> np.ndarray:
    ksize = w64.shape[:-1]
    nd = len(ksize)
    if nd == 2 and _kernels is not None:
        return _kernels.dw2d_input_grad(np.ascontiguousarray(g), w64, stride, *xp_shape[1:3])
    if stride == 1:
        k, p = _dw_letters(nd)
        gwin = _windows(_pad(g, [(n - 1, n - 1) for n in ksize]), ksize, xp_shape[1:-1], 1)
        return np.einsum(f"n{p}g{k},{k}g->n{p}g", gwin, w64[(slice(None, None, -1),) * nd])
    gxp = np.zeros(xp_shape)
    for off in np.ndindex(*ksize):
        gxp[_window(gxp, off, g.shape[1:-1], stride)] += g * w64[off]
    return gxp


def conv(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
         padding: str = "same", stride: int = 1) -> Tensor:
    """N-d cross-correlation with kernel ``weight`` of shape ``(*k, C, T)``."""
    ksize = weight.shape[:-2]
    nd = len(ksize)
    batched = _batched(x, nd)
    x64 = _f64(x) if batched else _f64(x)[None]
    C, T = weight.shape[-2:]
    if x64.shape[-1] != C:
        raise ValueError(f"input has {x64.shape[-1]} channels, kernel expects {C}")
    if bias is not None and bias.shape != (T,):
        raise ValueError(f"bias shape {bias.shape} does not match {T} filters")
    spatial = x64.shape[1:-1]
    pads, out_sp = _geometry(spatial, ksize, padding, stride)
    xp = _pad(x64, pads)
    w64 = _f64(weight)
    wmat = w64.reshape(-1, T)
    cols = _im2col(xp, ksize, out_sp, stride)
    out = (cols @ wmat).reshape((x64.shape[0],) + out_sp + (T,))
    if bias is not None:
        out = out + _f64(bias)
    if not weight.requires_grad:
        cols = None

    def vjp(g):
        g = g if batched else g[None]
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (cols.T @ g.reshape(-1, T)).reshape(w64.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=tuple(range(nd + 1)))
        if x.requires_grad:
            gx = _unbatch(_conv_input_grad(g, w64, pads, spatial, stride), batched)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(_unbatch(out, batched), inputs, vjp)


def _conv_kernel(x: Tensor, k: ConvKernel, nd: int, padding: str, stride: int) -> Tensor:
    if len(k.spatial) != nd:
        raise ValueError(f"expected a {nd}D kernel, got spatial shape {k.spatial}")
    return conv(x, k.weights, k.bias, padding=padding, stride=stride)


def conv1d(x: Tensor, k: ConvKernel, padding: str = "same", stride: int = 1) -> Tensor:
    return _conv_kernel(x, k, 1, padding, stride)


def conv2d(x: Tensor, k: ConvKernel, padding: str = "same", stride: int = 1) -> Tensor:
    """2D convolution ``y(i,j,t) = sum_{l,m,c} K(l,m,c,t) x(i+l, j+m, c) + b(t)``.

    ``same`` pads with zeros, placing the kernel origin at ``(h//2, w//2)``.
    """
    return _conv_kernel(x, k, 2, padding, stride)


def conv3d(x: Tensor, k: ConvKernel, padding: str = "same", stride: int = 1) -> Tensor:
    return _conv_kernel(x, k, 3, padding, stride)


def depthwise_conv(x: Tensor, weight: Tensor, padding: str = "same", stride: int = 1) -> Tensor:
    """Per-channel N-d cross-correlation with ``weight`` of shape ``(*k, G)``."""
    ksize = weight.shape[:-1]
    nd = len(ksize)
    batched = _batched(x, nd)
    x64 = _f64(x) if batched else _f64(x)[None]
    G = weight.shape[-1]
    if x64.shape[-1] != G:
        raise ValueError(f"input has {x64.shape[-1]} channels, depthwise kernel has {G}")
    spatial = x64.shape[1:-1]
    pads, out_sp = _geometry(spatial, ksize, padding, stride)
    xp = _pad(x64, pads)
    w64 = _f64(weight)
    out = _dw_forward(xp, w64, out_sp, stride)

    def vjp(g):
        g = g if batched else g[None]
        gx = gw = None
        if weight.requires_grad:
            gw = _dw_weight_grad(xp, g, ksize, stride)
        if x.requires_grad:
            gx = _unbatch(_crop(_dw_input_grad(g, w64, xp.shape, stride), pads, spatial), batched)
        return gx, gw

    return _emit(_unbatch(out, batched), (x, weight), vjp)

    win = _windows(xp, ksize, out_sp, stride)
    letters = "abcdefgh"[:nd]
    # n, output positions, channel g, kernel offsets
    pos = "pqrstuvw"[:nd]
    fwd_spec = f"n{pos}g{letters},{letters}g->n{pos}g"
    out = np.einsum(fwd_spec, win, w64)

    def vjp(g):
        g = g if batched else g[None]
        gx = gw = None
        if weight.requires_grad:
            gw = np.einsum(f"n{pos}g{letters},n{pos}g->{letters}g", win, g)
        if x.requires_grad:
            if stride == 1:
                gwin = _windows(_pad(g, [(k - 1, k - 1) for k in ksize]), ksize, xp.shape[1:-1], 1)
                gxp = np.einsum(fwd_spec, gwin, w64[(slice(None, None, -1),) * nd])
            else:
                gxp = np.zeros_like(xp)
                for off in np.ndindex(*ksize):
                    gxp[_window(xp, off, out_sp, stride)] += g * w64[off]
            gx = _unbatch(_crop(gxp, pads, spatial), batched)
        return gx, gw

    return _emit(_unbatch(out, batched), (x, weight), vjp)


def depthwise_conv2d(x: Tensor, weight: Tensor, padding: str = "same", stride: int = 1) -> Tensor:
    if weight.ndim != 3:
        raise ValueError(f"2D depthwise kernel must be (h, w, G), got {weight.shape}")
    return depthwise_conv(x, weight, padding=padding, stride=stride)


def pointwise_conv(x: Tensor, weight: Tensor) -> Tensor:
    """Channel mixing at every position: ``y[..., t] = sum_c x[..., c] K(c, t)``."""
    if weight.ndim != 2:
        raise ValueError(f"pointwise kernel must be (C, T), got {weight.shape}")
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"input has {x.shape[-1]} channels, pointwise kernel expects {weight.shape[0]}")
    x64 = _f64(x)
    w64 = _f64(weight)
    out = (x64.reshape(-1, w64.shape[0]) @ w64).reshape(x64.shape[:-1] + (w64.shape[1],))

    def vjp(g):
        gx = g @ w64.T if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            C, T = w64.shape
            gw = x64.reshape(-1, C).T @ g.reshape(-1, T)
        return gx, gw

    return _emit(out, (x, weight), vjp)


pointwise_conv2d = pointwise_conv


def separable_delta_conv(x: Tensor, weight: Tensor, bias: Optional[Tensor], kp: Tensor, kd: Tensor,
                         pw_first: bool = True, padding: str = "same", stride: int = 1,
                         bias_delta: Optional[Tensor] = None) -> Tensor:
    """Correlation with ``weight + dK`` where ``dK`` is the separable product of ``kp`` and ``kd``.

    ``dK[..., c, t]`` is ``kp[c, t] * kd[..., t]`` when ``pw_first`` and
    ``kd[..., c] * kp[c, t]`` otherwise.  The result equals the frozen
    correlation plus the two-stage residual (plus ``bias_delta``), but runs
    a single dense correlation forward.  Gradients reach ``x``, ``kp``,
    ``kd`` and ``bias_delta`` only; ``weight`` and ``bias`` must be frozen.
    """
    if weight.requires_grad or (bias is not None and bias.requires_grad):
        raise ValueError("separable_delta_conv needs a frozen base kernel")
    ksize = weight.shape[:-2]
    nd = len(ksize)
    C, T = weight.shape[-2:]
    if kp.shape != (C, T) or kd.shape != ksize + ((T,) if pw_first else (C,)):
        raise ValueError(f"factor shapes {kp.shape}, {kd.shape} do not match kernel {weight.shape}")
    if bias_delta is not None and bias_delta.shape != (T,):
        raise ValueError(f"bias delta shape {bias_delta.shape} does not match {T} filters")
    batched = _batched(x, nd)
    x64 = _f64(x) if batched else _f64(x)[None]
    if x64.shape[-1] != C:
        raise ValueError(f"input has {x64.shape[-1]} channels, kernel expects {C}")
    spatial = x64.shape[1:-1]
    pads, out_sp = _geometry(spatial, ksize, padding, stride)
    xp = _pad(x64, pads)
    kp64, kd64 = _f64(kp), _f64(kd)
    dk = kp64 * kd64[..., None, :] if pw_first else kd64[..., :, None] * kp64
    w64 = _f64(weight) + dk
    cols = _im2col(xp, ksize, out_sp, stride)
    out = (cols @ w64.reshape(-1, T)).reshape((x64.shape[0],) + out_sp + (T,))
    if bias is not None:
        out += _f64(bias)
    if bias_delta is not None:
        out += _f64(bias_delta)
    # Per output position the factor route costs 2CT plus 2kT (or 2kC)
    # multiply-adds against kCT for the dense one; narrow layers favour dense.
    k = int(np.prod(ksize))
    dense = k * C * T <= 2 * C * T + 2 * k * (T if pw_first else C)
    if not dense:
        cols = None
    axes = tuple(range(nd))

    def vjp(g):
        g = np.ascontiguousarray(g if batched else g[None])
        gx = gkp = gkd = gdb = None
        if x.requires_grad:
            gx = _unbatch(_conv_input_grad(g, w64, pads, spatial, stride), batched)
        if bias_delta is not None and bias_delta.requires_grad:
            gdb = g.reshape(-1, T).sum(axis=0)
        if dense:
            gw = (cols.T @ g.reshape(-1, T)).reshape(w64.shape)
            if pw_first:
                gkp = (gw * kd64[..., None, :]).sum(axis=axes) if kp.requires_grad else None
                gkd = (gw * kp64).sum(axis=-2) if kd.requires_grad else None
            else:
                gkp = (gw * kd64[..., :, None]).sum(axis=axes) if kp.requires_grad else None
                gkd = (gw * kp64).sum(axis=-1) if kd.requires_grad else None
        elif pw_first:
            if kd.requires_grad:
                z = (xp.reshape(-1, C) @ kp64).reshape(xp.shape[:-1] + (T,))
                gkd = _dw_weight_grad(z, g, ksize, stride)
            if kp.requires_grad:
                gz = _dw_input_grad(g, kd64, xp.shape[:-1] + (T,), stride)
                gkp = xp.reshape(-1, C).T @ gz.reshape(-1, T)
        else:
            if kp.requires_grad:
                z = _dw_forward(xp, kd64, out_sp, stride)
                gkp = z.reshape(-1, C).T @ g.reshape(-1, T)
            if kd.requires_grad:
                gkd = _dw_weight_grad(xp, (g.reshape(-1, T) @ kp64.T).reshape(g.shape[:-1] + (C,)),
                                      ksize, stride)
        return gx, gkp, gkd, gdb

    inputs = (x, kp, kd) if bias_delta is None else (x, kp, kd, bias_delta)
    return _emit(_unbatch(out, batched), inputs, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _f64(a) + _f64(b)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _emit(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a64, b64 = _f64(a), _f64(b)

    def vjp(g):
        return (_unbroadcast(g * b64, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a64, b.shape) if b.requires_grad else None)

    return _emit(a64 * b64, (a, b), vjp)


def tensor_sum(x: Tensor) -> Tensor:
    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(np.asarray(_f64(x).sum()), (x,), vjp)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias along the last axis."""
    if b.shape != (x.shape[-1],):
        raise ValueError(f"bias shape {b.shape} does not match {x.shape[-1]} channels")
    return add(x, b)


def relu(x: Tensor) -> Tensor:
    x64 = _f64(x)
    mask = x64 > 0

    def vjp(g):
        return (g * mask,)

    return _emit(np.where(mask, x64, 0.0), (x,), vjp)


def affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """``scale * x + shift`` with scalar ``scale`` and ``shift``."""
    x64 = _f64(x)
    s = float(scale.data)

    def vjp(g):
        return (g * s if x.requires_grad else None,
                np.asarray((g * x64).sum()) if scale.requires_grad else None,
                np.asarray(g.sum()) if shift.requires_grad else None)

    return _emit(x64 * s + float(shift.data), (x, scale, shift), vjp)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling on ``(N, H, W, C)``; trailing rows/cols are dropped."""
    if x.ndim != 4:
        raise ValueError(f"max_pool2d expects (N, H, W, C), got {x.shape}")
    N, H, W, C = x.shape
    Ho, Wo = H // size, W // size
    if Ho < 1 or Wo < 1:
        raise ValueError(f"input {H}x{W} too small for {size}x{size} pooling")
    x64 = _f64(x)[:, :Ho * size, :Wo * size, :]
    blocks = x64.reshape(N, Ho, size, Wo, size, C).transpose(0, 1, 3, 5, 2, 4).reshape(N, Ho, Wo, C, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(N, Ho, Wo, C, size, size).transpose(0, 1, 4, 2, 5, 3).reshape(N, Ho * size, Wo * size, C)
        gx = np.zeros(x.shape)
        gx[:, :Ho * size, :Wo * size, :] = gb
        return (gx,)

    return _emit(out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial axes of ``(N, *spatial, C)``."""
    axes = tuple(range(1, x.ndim - 1))
    count = int(np.prod([x.shape[a] for a in axes]))

    def vjp(g):
        shape = (g.shape[0],) + (1,) * len(axes) + (g.shape[-1],)
        return (np.broadcast_to(g.reshape(shape) / count, x.shape).copy(),)

    return _emit(_f64(x).mean(axis=axes), (x,), vjp)


def flatten(x: Tensor) -> Tensor:
    def vjp(g):
        return (g.reshape(x.shape),)

    return _emit(_f64(x).reshape(x.shape[0], -1), (x,), vjp)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ W + b`` with ``W`` of shape ``(in, out)``."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match weight {weight.shape}")
    x64, w64 = _f64(x), _f64(weight)
    out = x64 @ w64
    if bias is not None:
        out = out + _f64(bias)

    def vjp(g):
        gx = g @ w64.T if x.requires_grad else None
        gw = x64.reshape(-1, w64.shape[0]).T @ g.reshape(-1, w64.shape[1]) if weight.requires_grad else None
        gb = g.reshape(-1, w64.shape[1]).sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, vjp)


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """``x @ W.T`` with ``W`` of shape ``(out, in)``."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} does not match weight {weight.shape}")
    x64, w64 = _f64(x), _f64(weight)

    def vjp(g):
        gx = g @ w64 if x.requires_grad else None
        gw = g.reshape(-1, w64.shape[0]).T @ x64.reshape(-1, w64.shape[1]) if weight.requires_grad else None
        return gx, gw

    return _emit(x64 @ w64.T, (x, weight), vjp)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Iterable[int]) -> Tensor:
    """Mean softmax cross-entropy of ``(N, K)`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    z = _f64(logits)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    loss = np.mean(logsum - z[rows, labels])

    def vjp(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / len(labels)),)

    return _emit(np.asarray(loss), (logits,), vjp)
