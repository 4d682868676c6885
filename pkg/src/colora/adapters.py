"""Convolutional low-rank residuals and the baseline adapters they are compared to.

A :class:`CoLoRALayer` keeps a frozen dense kernel ``K0`` and learns a
separable residual built from a pointwise kernel ``Kp`` (C -> T) and a
depthwise kernel ``Kd``.  Two factorization orders are supported:

``DW_THEN_PW``
    depthwise over the C input channels, then pointwise mixing;
    ``dK[..., c, t] = Kd[..., c] * Kp[c, t]``.
``PW_THEN_DW`` (default)
    pointwise mixing first, then depthwise over the T output channels;
    ``dK[..., c, t] = Kp[c, t] * Kd[..., t]``.

Either way the residual is a dense kernel with the base kernel's shape, so it
can be folded into ``K0`` after training and inference cost is unchanged.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import (
    ConvKernel,
    Tensor,
    add,
    affine,
    bias_add,
    conv,
    depthwise_conv,
    is_recording,
    linear,
    pointwise_conv,
    relu,
    separable_delta_conv,
)

__all__ = [
    "Order",
    "CoLoRALayer",
    "CnnAdapterLayer",
    "DenseLoraLayer",
    "glorot_uniform",
    "make_colora",
    "colora_forward",
    "compose",
    "merge",
    "reinit",
    "MergeCheck",
    "merge_equivalence_suite",
    "cnn_adapter_forward",
    "dense_lora_forward",
    "dense_lora_merge",
]


class Order(enum.Enum):
    DW_THEN_PW = "dw_then_pw"
    PW_THEN_DW = "pw_then_dw"

    @classmethod
    def parse(cls, value) -> "Order":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {"dwthenpw": cls.DW_THEN_PW, "dwpw": cls.DW_THEN_PW,
                   "pwthendw": cls.PW_THEN_DW, "pwdw": cls.PW_THEN_DW, "inception": cls.PW_THEN_DW}
        if key not in aliases:
            raise ValueError(f"unknown CoLoRA order {value!r}")
        return aliases[key]


def glorot_uniform(fan_in: int, fan_out: int, shape, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


@dataclass
class CoLoRALayer:
    base: ConvKernel
    kp: Tensor
    kd: Tensor
    db: Optional[Tensor] = None
    order: Order = Order.PW_THEN_DW
    merge_count: int = 0
    padding: str = "same"
    stride: int = 1

    def __post_init__(self):
        self.order = Order.parse(self.order)
        ksize = self.base.spatial
        C, T = self.base.in_channels, self.base.out_channels
        if self.kp.shape != (C, T):
            raise ValueError(f"pointwise kernel must be {(C, T)}, got {self.kp.shape}")
        groups = C if self.order is Order.DW_THEN_PW else T
        if self.kd.shape != ksize + (groups,):
            raise ValueError(f"depthwise kernel must be {ksize + (groups,)} for {self.order.value}, "
                             f"got {self.kd.shape}")
        if self.db is not None and self.db.shape != (T,):
            raise ValueError(f"bias delta must be ({T},), got {self.db.shape}")

    @property
    def in_channels(self) -> int:
        return self.base.in_channels

    @property
    def out_channels(self) -> int:
        return self.base.out_channels

    def trainable(self) -> list[Tensor]:
        return [t for t in (self.kp, self.kd, self.db) if t is not None]

    def residual_is_zero(self) -> bool:
        return not self.kd.data.any() and (self.db is None or not self.db.data.any())


def make_colora(base: ConvKernel, order=Order.PW_THEN_DW, seed: int = 0,
                bias_delta: Optional[bool] = None, name: str = "colora",
                padding: str = "same", stride: int = 1) -> CoLoRALayer:
    """Wrap a frozen kernel in a freshly initialized CoLoRA layer.

    ``bias_delta`` defaults to whether the base kernel carries a bias.
    """
    order = Order.parse(order)
    base.weights.requires_grad = False
    if base.bias is not None:
        base.bias.requires_grad = False
    C, T = base.in_channels, base.out_channels
    groups = C if order is Order.DW_THEN_PW else T
    if bias_delta is None:
        bias_delta = base.bias is not None
    layer = CoLoRALayer(
        base=base,
        kp=Tensor.zeros((C, T), requires_grad=True, name=f"{name}.kp"),
        kd=Tensor.zeros(base.spatial + (groups,), requires_grad=True, name=f"{name}.kd"),
        db=Tensor.zeros((T,), requires_grad=True, name=f"{name}.db") if bias_delta else None,
        order=order,
        padding=padding,
        stride=stride,
    )
    reinit(layer, seed)
    return layer


def _residual(layer: CoLoRALayer, x: Tensor) -> Tensor:
    if layer.order is Order.DW_THEN_PW:
        z = depthwise_conv(x, layer.kd, padding=layer.padding, stride=layer.stride)
        return pointwise_conv(z, layer.kp)
    z = pointwise_conv(x, layer.kp)
    return depthwise_conv(z, layer.kd, padding=layer.padding, stride=layer.stride)


def colora_forward(layer: CoLoRALayer, x: Tensor, fused: bool = True) -> Tensor:
    """Frozen branch plus separable residual (plus bias delta).

    With ``fused`` and a frozen base, the residual is added to the kernel
    before the single dense correlation; otherwise the two branches are
    evaluated separately and summed.
    """
    base = layer.base
    frozen = not base.weights.requires_grad and (base.bias is None or not base.bias.requires_grad)
    # Skipping keeps the zero-init output bit-identical to the base output.
    if not is_recording() and layer.residual_is_zero():
        return conv(x, base.weights, base.bias, padding=layer.padding, stride=layer.stride)
    if fused and frozen:
        return separable_delta_conv(x, base.weights, base.bias, layer.kp, layer.kd,
                                    pw_first=layer.order is Order.PW_THEN_DW,
                                    padding=layer.padding, stride=layer.stride, bias_delta=layer.db)
    y = conv(x, base.weights, base.bias, padding=layer.padding, stride=layer.stride)
    y = add(y, _residual(layer, x))
    if layer.db is not None:
        y = bias_add(y, layer.db)
    return y


def compose(layer: CoLoRALayer) -> ConvKernel:
    """Dense kernel equivalent to the residual branch, with the bias delta."""
    kp = layer.kp.data.astype(np.float64)
    kd = layer.kd.data.astype(np.float64)
    if layer.order is Order.DW_THEN_PW:
        dk = kd[..., :, None] * kp
    else:
        dk = kp * kd[..., None, :]
    db = None if layer.db is None else Tensor(layer.db.data)
    return ConvKernel(Tensor(dk), db)


def merge(layer: CoLoRALayer) -> None:
    """Fold the current residual into the frozen base kernel.

    ``kp``, ``kd`` and ``db`` are left untouched; call :func:`reinit` to
    start a fresh residual.
    """
    delta = compose(layer)
    w = layer.base.weights
    w.data = (w.data.astype(np.float64) + delta.weights.data).astype(np.float32)
    if delta.bias is not None:
        if layer.base.bias is None:
            layer.base.bias = Tensor.zeros(delta.bias.shape, name=_sibling(w.name, "bias"))
        b = layer.base.bias
        b.data = (b.data.astype(np.float64) + delta.bias.data).astype(np.float32)
    layer.merge_count += 1


def _sibling(name: Optional[str], suffix: str) -> Optional[str]:
    if not name:
        return None
    return name.rsplit(".", 1)[0] + "." + suffix


def reinit(layer: CoLoRALayer, seed: int) -> None:
    """Glorot-uniform ``kp`` (fan_in=C, fan_out=T); zero ``kd`` and ``db``."""
    rng = np.random.default_rng(seed)
    C, T = layer.kp.shape
    layer.kp.data = glorot_uniform(C, T, (C, T), rng)
    layer.kd.data = np.zeros_like(layer.kd.data)
    if layer.db is not None:
        layer.db.data = np.zeros_like(layer.db.data)


@dataclass
class MergeCheck:
    layers: int
    max_deviation: float
    worst: dict


def merge_equivalence_suite(n_layers: int = 100, seed: int = 0, spatial: int = 7,
                            kernel_sizes=(1, 3, 5), channels=(1, 2, 4, 8)) -> MergeCheck:
    """Compare the two-branch forward with the merged-kernel forward on random layers.

    Each layer draws ``h, w`` from ``kernel_sizes``, ``C, T`` from
    ``channels`` and an order, with random nonzero factors and bias delta.
    The deviation of a layer is ``max|y_branch - y_merged| / max|y_merged|``.
    """
    rng = np.random.default_rng(seed)
    orders = list(Order)
    worst = {"deviation": -1.0}
    for i in range(n_layers):
        h, w = (int(v) for v in rng.choice(kernel_sizes, size=2))
        C, T = (int(v) for v in rng.choice(channels, size=2))
        order = orders[i % len(orders)]
        base = ConvKernel(Tensor(rng.normal(size=(h, w, C, T))), Tensor(rng.normal(size=T)))
        layer = make_colora(base, order=order, seed=int(rng.integers(2**31)), bias_delta=True,
                            name=f"check{i}")
        layer.kd.data = rng.normal(size=layer.kd.shape).astype(np.float32)
        layer.db.data = rng.normal(size=layer.db.shape).astype(np.float32)
        x = Tensor(rng.normal(size=(2, spatial, spatial, C)))
        y_branch = colora_forward(layer, x, fused=False).data.astype(np.float64)
        merge(layer)
        y_merged = conv(x, layer.base.weights, layer.base.bias).data.astype(np.float64)
        dev = float(np.abs(y_branch - y_merged).max() / np.abs(y_merged).max())
        if dev > worst["deviation"]:
            worst = {"deviation": dev, "h": h, "w": w, "C": C, "T": T, "order": order.value}
    return MergeCheck(n_layers, worst["deviation"], worst)


@dataclass
class CnnAdapterLayer:
    """Frozen convolution followed by affine norm, ReLU and a 1x1 mixing matrix.

    The norm is a single scale and shift shared across channels, giving the two
    extra trainable scalars counted for this adapter.
    """

    base: ConvKernel
    a: Tensor
    norm_scale: Tensor = field(default_factory=lambda: Tensor(1.0, requires_grad=True))
    norm_shift: Tensor = field(default_factory=lambda: Tensor(0.0, requires_grad=True))
    padding: str = "same"
    stride: int = 1

    def __post_init__(self):
        if self.a.ndim != 2 or self.a.shape[0] != self.base.out_channels:
            raise ValueError(f"adapter matrix must be ({self.base.out_channels}, T), got {self.a.shape}")

    def trainable(self) -> list[Tensor]:
        return [self.a, self.norm_scale, self.norm_shift]


def cnn_adapter_forward(layer: CnnAdapterLayer, x: Tensor) -> Tensor:
    y = conv(x, layer.base.weights, layer.base.bias, padding=layer.padding, stride=layer.stride)
    y = relu(affine(y, layer.norm_scale, layer.norm_shift))
    return pointwise_conv(y, layer.a)


@dataclass
class DenseLoraLayer:
    """``y = W0 x + B A x`` with ``W0`` frozen, ``A`` (r, d) and ``B`` (k, r)."""

    w0: Tensor
    a: Tensor
    b: Tensor

    def __post_init__(self):
        k, d = self.w0.shape
        r = self.a.shape[0]
        if self.a.shape != (r, d) or self.b.shape != (k, r):
            raise ValueError(f"A must be (r, {d}) and B ({k}, r); got {self.a.shape}, {self.b.shape}")
        if not 1 <= r <= min(d, k):
            raise ValueError(f"rank {r} must lie in [1, min(d, k)={min(d, k)}]")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @classmethod
    def create(cls, w0, rank: int, seed: int = 0, name: str = "lora") -> "DenseLoraLayer":
        w0 = Tensor(w0, name=f"{name}.w0")
        k, d = w0.shape
        rng = np.random.default_rng(seed)
        a = rng.normal(0.0, 1.0 / math.sqrt(d), size=(rank, d))
        return cls(w0, Tensor(a, requires_grad=True, name=f"{name}.a"),
                   Tensor.zeros((k, rank), requires_grad=True, name=f"{name}.b"))

    def delta(self) -> np.ndarray:
        return self.b.data.astype(np.float64) @ self.a.data.astype(np.float64)


def dense_lora_forward(layer: DenseLoraLayer, x) -> Tensor:
    """Accepts a vector or a batch of row vectors."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    return add(linear(x, layer.w0), linear(linear(x, layer.a), layer.b))


def dense_lora_merge(layer: DenseLoraLayer) -> None:
    layer.w0.data = (layer.w0.data.astype(np.float64) + layer.delta()).astype(np.float32)
    layer.b.data = np.zeros_like(layer.b.data)
