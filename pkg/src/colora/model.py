"""Small CNN graphs, adapter injection, freeze policies and parameter accounting."""

from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import adapters
from .adapters import CnnAdapterLayer, CoLoRALayer, DenseLoraLayer, Order
from .tensor import (
    ConvKernel,
    Tensor,
    add,
    conv,
    dense,
    flatten,
    global_avg_pool,
    max_pool2d,
    no_grad,
    relu,
    softmax,
)

__all__ = [
    "Layer",
    "Conv",
    "CoLoRA",
    "CnnAdapter",
    "ReLU",
    "MaxPool",
    "GlobalAvgPool",
    "Flatten",
    "Dense",
    "DenseLora",
    "Residual",
    "ModelGraph",
    "HeadSpec",
    "ParamRow",
    "ParamReport",
    "build_tiny_vgg",
    "build_tiny_resnet",
    "inject_colora",
    "inject_cnn_adapter",
    "inject_dense_lora",
    "set_trainable",
    "merge_all",
    "reinit_all",
    "count_params",
    "table1_counts",
    "colora_trainable_count",
    "layer_seed",
]


def layer_seed(seed: int, *parts) -> int:
    """Stable 32-bit seed from a base seed and labels such as an epoch or layer name."""
    key = ":".join(str(p) for p in (seed,) + parts).encode()
    return zlib.crc32(key)


def _glorot_kernel(shape, rng: np.random.Generator) -> np.ndarray:
    *k, C, T = shape
    area = int(np.prod(k)) if k else 1
    limit = np.sqrt(6.0 / (area * C + area * T))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    kind = "layer"

    def __init__(self, name: str, head: bool = False):
        self.name = name
        self.head = head

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def params(self) -> dict[str, Tensor]:
        return {}

    def spec(self) -> dict:
        return {"kind": self.kind, "name": self.name, "head": self.head}

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


def _named(layer: str, **tensors) -> dict[str, Tensor]:
    return {f"{layer}.{k}": t for k, t in tensors.items() if t is not None}


class Conv(Layer):
    kind = "conv"

    def __init__(self, name, kernel: ConvKernel, padding="same", stride=1, head=False):
        super().__init__(name, head)
        self.kernel = kernel
        self.padding = padding
        self.stride = stride
        kernel.weights.name = f"{name}.weight"
        if kernel.bias is not None:
            kernel.bias.name = f"{name}.bias"

    def forward(self, x):
        return conv(x, self.kernel.weights, self.kernel.bias, padding=self.padding, stride=self.stride)

    def params(self):
        return _named(self.name, weight=self.kernel.weights, bias=self.kernel.bias)

    def spec(self):
        return {**super().spec(), "padding": self.padding, "stride": self.stride}


class CoLoRA(Layer):
    kind = "colora"

    def __init__(self, name, layer: CoLoRALayer, head=False):
        super().__init__(name, head)
        self.layer = layer
        for key, t in self.params().items():
            t.name = key

    def forward(self, x):
        return adapters.colora_forward(self.layer, x)

    def params(self):
        lay = self.layer
        return _named(self.name, weight=lay.base.weights, bias=lay.base.bias,
                      kp=lay.kp, kd=lay.kd, db=lay.db)

    def adapter_params(self) -> dict[str, Tensor]:
        return _named(self.name, kp=self.layer.kp, kd=self.layer.kd, db=self.layer.db)

    def spec(self):
        return {**super().spec(), "padding": self.layer.padding, "stride": self.layer.stride,
                "order": self.layer.order.value}


class CnnAdapter(Layer):
    kind = "cnn_adapter"

    def __init__(self, name, layer: CnnAdapterLayer, head=False):
        super().__init__(name, head)
        self.layer = layer
        for key, t in self.params().items():
            t.name = key

    def forward(self, x):
        return adapters.cnn_adapter_forward(self.layer, x)

    def params(self):
        lay = self.layer
        return _named(self.name, weight=lay.base.weights, bias=lay.base.bias, a=lay.a,
                      norm_scale=lay.norm_scale, norm_shift=lay.norm_shift)

    def adapter_params(self) -> dict[str, Tensor]:
        lay = self.layer
        return _named(self.name, a=lay.a, norm_scale=lay.norm_scale, norm_shift=lay.norm_shift)

    def spec(self):
        return {**super().spec(), "padding": self.layer.padding, "stride": self.layer.stride}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return relu(x)


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, name, size=2, head=False):
        super().__init__(name, head)
        self.size = size

    def forward(self, x):
        return max_pool2d(x, self.size)

    def spec(self):
        return {**super().spec(), "size": self.size}


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x):
        return global_avg_pool(x)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        return flatten(x)


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, weight: Tensor, bias: Optional[Tensor] = None, head=False):
        super().__init__(name, head)
        self.weight = weight
        self.bias = bias
        for key, t in self.params().items():
            t.name = key

    def forward(self, x):
        return dense(x, self.weight, self.bias)

    def params(self):
        return _named(self.name, weight=self.weight, bias=self.bias)


class DenseLora(Layer):
    kind = "dense_lora"

    def __init__(self, name, layer: DenseLoraLayer, bias: Optional[Tensor] = None, head=False):
        super().__init__(name, head)
        self.layer = layer
        self.bias = bias
        for key, t in self.params().items():
            t.name = key

    def forward(self, x):
        y = adapters.dense_lora_forward(self.layer, x)
        return y if self.bias is None else add(y, self.bias)

    def params(self):
        return _named(self.name, w0=self.layer.w0, a=self.layer.a, b=self.layer.b, bias=self.bias)

    def adapter_params(self) -> dict[str, Tensor]:
        return _named(self.name, a=self.layer.a, b=self.layer.b)


class Residual(Layer):
    """``relu(x + body(x))`` with an identity shortcut."""

    kind = "residual"

    def __init__(self, name, body: list[Layer], head=False):
        super().__init__(name, head)
        self.body = body

    def forward(self, x):
        y = x
        for layer in self.body:
            y = layer.forward(y)
        return relu(add(x, y))

    def params(self):
        out = {}
        for layer in self.body:
            out.update(layer.params())
        return out

    def spec(self):
        return {**super().spec(), "body": [lay.spec() for lay in self.body]}


_ADAPTER_KINDS = (CoLoRA, CnnAdapter, DenseLora)


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

class ModelGraph:
    """An ordered stack of layers with a named parameter table.

    The freeze mask lives on the tensors: a parameter is trainable exactly
    when its ``requires_grad`` flag is set.
    """

    def __init__(self, layers: list[Layer], input_shape: tuple, num_classes: int):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes

    def __iter__(self):
        return iter(self.layers)

    def walk(self) -> Iterable[Layer]:
        """Every layer, descending into residual blocks."""
        for layer in self.layers:
            yield layer
            if isinstance(layer, Residual):
                yield from layer.body

    def layer(self, name: str) -> Layer:
        for lay in self.walk():
            if lay.name == name:
                return lay
        raise KeyError(f"no layer named {name!r}")

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float32))
        if x.ndim == len(self.input_shape):
            x = Tensor._wrap(x.data[None])
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            for key, t in layer.params().items():
                if key in out:
                    raise ValueError(f"duplicate parameter name {key!r}")
                out[key] = t
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_parameters().items() if t.requires_grad}

    def freeze_mask(self) -> dict[str, bool]:
        """Parameter name -> True when frozen."""
        return {k: not t.requires_grad for k, t in self.named_parameters().items()}

    def colora_layers(self) -> list[CoLoRA]:
        return [lay for lay in self.walk() if isinstance(lay, CoLoRA)]

    def adapter_parameter_names(self) -> set[str]:
        names: set[str] = set()
        for lay in self.walk():
            if isinstance(lay, _ADAPTER_KINDS):
                names.update(lay.adapter_params())
        return names

    def validate(self) -> tuple:
        """Push one zero sample through the graph and return the output shape."""
        with no_grad():
            out = self.forward(np.zeros((1,) + self.input_shape, dtype=np.float32))
        if out.shape != (1, self.num_classes):
            raise ValueError(f"graph emits {out.shape[1:]}, expected ({self.num_classes},)")
        return out.shape[1:]

    def predict_proba(self, images, batch_size: int = 256) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        chunks = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                chunks.append(softmax(self.forward(images[start:start + batch_size])))
        if not chunks:
            return np.zeros((0, self.num_classes))
        return np.concatenate(chunks)

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def spec(self) -> dict:
        return {"input_shape": list(self.input_shape), "num_classes": self.num_classes,
                "layers": [lay.spec() for lay in self.layers]}

    def __repr__(self) -> str:
        body = ", ".join(lay.name for lay in self.layers)
        return f"ModelGraph(input={self.input_shape}, classes={self.num_classes}, layers=[{body}])"


@dataclass
class HeadSpec:
    """1x1 reduction to ``reduce_to`` channels, global pooling, dense ReLU, linear output."""

    reduce_to: int
    hidden: int
    classes: int
    in_channels: Optional[int] = None

    def __post_init__(self):
        for key in ("reduce_to", "hidden", "classes"):
            if getattr(self, key) < 1:
                raise ValueError(f"head {key} must be >= 1")


def _conv_layer(name, k, C, T, rng, bias=True, head=False) -> Conv:
    w = Tensor(_glorot_kernel((k, k, C, T), rng), requires_grad=True)
    b = Tensor.zeros((T,), requires_grad=True) if bias else None
    return Conv(name, ConvKernel(w, b), head=head)


def _dense_layer(name, n_in, n_out, rng, head=True) -> Dense:
    limit = np.sqrt(6.0 / (n_in + n_out))
    w = Tensor(rng.uniform(-limit, limit, size=(n_in, n_out)), requires_grad=True)
    return Dense(name, w, Tensor.zeros((n_out,), requires_grad=True), head=head)


def _head_layers(C: int, head: HeadSpec, rng, bias: bool) -> list[Layer]:
    if head.in_channels is not None and head.in_channels != C:
        raise ValueError(f"head expects {head.in_channels} input channels, backbone gives {C}")
    return [
        _conv_layer("head_conv", 1, C, head.reduce_to, rng, bias=bias, head=True),
        GlobalAvgPool("head_pool", head=True),
        _dense_layer("head_dense", head.reduce_to, head.hidden, rng),
        ReLU("head_relu", head=True),
        _dense_layer("head_out", head.hidden, head.classes, rng),
    ]


def build_tiny_vgg(input_shape, widths, head: HeadSpec, seed: int = 0,
                   kernel_size: int = 3, bias: bool = True) -> ModelGraph:
    """Blocks of two ``kernel_size`` conv+ReLU pairs, 2x2 max-pool between blocks."""
    widths = list(widths)
    if not widths:
        raise ValueError("widths must be nonempty")
    H, W, C = input_shape
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    for b, T in enumerate(widths, start=1):
        if b > 1:
            if H < 2 or W < 2:
                raise ValueError(f"spatial dims exhausted by pooling before block {b}")
            layers.append(MaxPool(f"pool{b - 1}"))
            H, W = H // 2, W // 2
        for i in (1, 2):
            layers.append(_conv_layer(f"block{b}_conv{i}", kernel_size, C, T, rng, bias=bias))
            layers.append(ReLU(f"block{b}_relu{i}"))
            C = T
    layers += _head_layers(C, head, rng, bias)
    g = ModelGraph(layers, tuple(input_shape), head.classes)
    g.validate()
    return g


def build_tiny_resnet(input_shape, widths, head: HeadSpec, seed: int = 0,
                      kernel_size: int = 3, bias: bool = True) -> ModelGraph:
    """Per stage: a conv+ReLU that sets the width, then one identity-shortcut block."""
    widths = list(widths)
    if not widths:
        raise ValueError("widths must be nonempty")
    H, W, C = input_shape
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    for s, T in enumerate(widths, start=1):
        if s > 1:
            if H < 2 or W < 2:
                raise ValueError(f"spatial dims exhausted by pooling before stage {s}")
            layers.append(MaxPool(f"pool{s - 1}"))
            H, W = H // 2, W // 2
        layers.append(_conv_layer(f"stage{s}_conv", kernel_size, C, T, rng, bias=bias))
        layers.append(ReLU(f"stage{s}_relu"))
        body = [
            _conv_layer(f"stage{s}_res_conv1", kernel_size, T, T, rng, bias=bias),
            ReLU(f"stage{s}_res_relu"),
            _conv_layer(f"stage{s}_res_conv2", kernel_size, T, T, rng, bias=bias),
        ]
        layers.append(Residual(f"stage{s}_res", body))
        C = T
    layers += _head_layers(C, head, rng, bias)
    g = ModelGraph(layers, tuple(input_shape), head.classes)
    g.validate()
    return g


# ---------------------------------------------------------------------------
# injection and freezing
# ---------------------------------------------------------------------------

def _backbone_convs(g: ModelGraph) -> list[str]:
    return [lay.name for lay in g.walk() if isinstance(lay, Conv) and not lay.head]


def _resolve_targets(g: ModelGraph, targets) -> list[str]:
    if targets is None:
        return []
    if isinstance(targets, str):
        if targets == "all":
            return _backbone_convs(g)
        if targets in ("", "none"):
            return []
        targets = [t.strip() for t in targets.split(",") if t.strip()]
    return list(targets)


def _replace(g: ModelGraph, name: str, make) -> None:
    def swap(seq: list[Layer]) -> bool:
        for i, lay in enumerate(seq):
            if lay.name == name:
                seq[i] = make(lay)
                return True
            if isinstance(lay, Residual) and swap(lay.body):
                return True
        return False

    if not swap(g.layers):
        raise KeyError(f"no layer named {name!r}")


def _check_target(g: ModelGraph, name: str) -> None:
    try:
        lay = g.layer(name)
    except KeyError:
        raise KeyError(f"unknown layer {name!r}") from None
    if isinstance(lay, _ADAPTER_KINDS):
        raise ValueError(f"layer {name!r} already carries an adapter")
    if not isinstance(lay, Conv):
        raise ValueError(f"layer {name!r} is a {lay.kind}, not a convolution")


def set_trainable(g: ModelGraph, policy: str) -> ModelGraph:
    """Apply a freeze policy in place.

    ``full``: everything trainable.  ``head``: only head layers.
    ``backbone``: backbone weights frozen; head and adapter parameters trainable.
    """
    adapter_names = g.adapter_parameter_names()
    head_names = {k for lay in g.walk() if lay.head for k in lay.params()}
    for key, t in g.named_parameters().items():
        if policy == "full":
            t.requires_grad = True
        elif policy == "head":
            t.requires_grad = key in head_names
        elif policy == "backbone":
            t.requires_grad = key in head_names or key in adapter_names
        else:
            raise ValueError(f"unknown freeze policy {policy!r}")
    return g


def inject_colora(g: ModelGraph, targets="all", order=Order.PW_THEN_DW, seed: int = 0,
                  freeze: str = "backbone", bias_delta: Optional[bool] = None) -> ModelGraph:
    """Return a copy of ``g`` with CoLoRA residuals on the targeted convolutions.

    Targeted kernels become frozen bases.  ``freeze`` is applied to the rest
    of the graph afterwards (see :func:`set_trainable`); the head stays
    trainable under every policy except an explicit ``head``.
    """
    names = _resolve_targets(g, targets)
    for name in names:
        _check_target(g, name)
    if len(set(names)) != len(names):
        raise ValueError("duplicate injection target")
    out = g.copy()
    order = Order.parse(order)

    def make(conv_layer: Conv) -> CoLoRA:
        lay = adapters.make_colora(conv_layer.kernel, order=order, seed=layer_seed(seed, conv_layer.name),
                                   bias_delta=bias_delta, name=conv_layer.name,
                                   padding=conv_layer.padding, stride=conv_layer.stride)
        return CoLoRA(conv_layer.name, lay, head=conv_layer.head)

    for name in names:
        _replace(out, name, make)
    return set_trainable(out, freeze)


def inject_cnn_adapter(g: ModelGraph, targets="all", freeze: str = "backbone") -> ModelGraph:
    """Copy of ``g`` with a 1x1 adapter after each targeted convolution.

    The adapter matrix starts at the identity and the norm at scale 1, shift 0.
    """
    names = _resolve_targets(g, targets)
    for name in names:
        _check_target(g, name)
    out = g.copy()

    def make(conv_layer: Conv) -> CnnAdapter:
        kernel = conv_layer.kernel
        kernel.weights.requires_grad = False
        if kernel.bias is not None:
            kernel.bias.requires_grad = False
        T = kernel.out_channels
        lay = CnnAdapterLayer(kernel, Tensor(np.eye(T), requires_grad=True),
                              Tensor(1.0, requires_grad=True), Tensor(0.0, requires_grad=True),
                              padding=conv_layer.padding, stride=conv_layer.stride)
        return CnnAdapter(conv_layer.name, lay, head=conv_layer.head)

    for name in names:
        _replace(out, name, make)
    return set_trainable(out, freeze)


def inject_dense_lora(g: ModelGraph, targets, rank: int, seed: int = 0,
                      freeze: str = "backbone") -> ModelGraph:
    out = g.copy()
    for name in _resolve_targets(g, targets):
        lay = out.layer(name)
        if not isinstance(lay, Dense):
            raise ValueError(f"layer {name!r} is not a dense layer")

        def make(d: Dense) -> DenseLora:
            lora = DenseLoraLayer.create(d.weight.data.T, rank, seed=layer_seed(seed, d.name), name=d.name)
            return DenseLora(d.name, lora, Tensor(d.bias.data) if d.bias is not None else None, head=d.head)

        _replace(out, name, make)
    set_trainable(out, freeze)
    for lay in out.walk():
        if isinstance(lay, DenseLora) and freeze != "full":
            lay.layer.w0.requires_grad = False
            for t in lay.adapter_params().values():
                t.requires_grad = True
    return out


def merge_all(g: ModelGraph) -> None:
    for lay in g.colora_layers():
        adapters.merge(lay.layer)


def reinit_all(g: ModelGraph, seed: int, epoch: int) -> None:
    for lay in g.colora_layers():
        adapters.reinit(lay.layer, layer_seed(seed, epoch, lay.name))


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def table1_counts(h: int, w: int, C: int, T: int) -> dict[str, int]:
    """Trainable counts for one convolution: full, 1x1 adapter, CoLoRA."""
    return {"original": h * w * C * T, "adapter": C * T + 2, "colora": h * w * T + C * T}


def colora_trainable_count(h: int, w: int, C: int, T: int, order=Order.PW_THEN_DW,
                           bias_delta: bool = False) -> int:
    groups = T if Order.parse(order) is Order.PW_THEN_DW else C
    return h * w * groups + C * T + (T if bias_delta else 0)


@dataclass
class ParamRow:
    name: str
    kind: str
    original: int
    adapter: Optional[int]
    trainable: int
    frozen: int

    @property
    def total(self) -> int:
        return self.trainable + self.frozen


@dataclass
class ParamReport:
    rows: list[ParamRow] = field(default_factory=list)

    @property
    def trainable(self) -> int:
        return sum(r.trainable for r in self.rows)

    @property
    def frozen(self) -> int:
        return sum(r.frozen for r in self.rows)

    @property
    def total(self) -> int:
        return self.trainable + self.frozen

    @property
    def trainable_fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0

    def to_csv(self) -> str:
        lines = ["layer,kind,original,adapter,trainable,frozen"]
        for r in self.rows:
            lines.append(f"{r.name},{r.kind},{r.original},{'' if r.adapter is None else r.adapter},"
                         f"{r.trainable},{r.frozen}")
        lines.append(f"TOTAL,,,,{self.trainable},{self.frozen}")
        lines.append(f"TRAINABLE_FRACTION,,,,{self.trainable_fraction:.6f},")
        return "\n".join(lines) + "\n"


def _split_counts(params: dict[str, Tensor]) -> tuple[int, int]:
    trainable = sum(t.size for t in params.values() if t.requires_grad)
    frozen = sum(t.size for t in params.values() if not t.requires_grad)
    return trainable, frozen


def count_params(g: ModelGraph) -> ParamReport:
    """Per-layer counts.

    ``original`` is the kernel size ``h*w*C*T`` for convolutional layers and
    the weight count otherwise.  ``adapter`` is the adapter's own parameter
    count (CoLoRA: ``h*w*T + C*T`` or ``h*w*C + C*T`` by order, plus ``T``
    with a bias delta; 1x1 adapter: matrix size ``+ 2``).
    """
    report = ParamReport()
    for lay in g.walk():
        if isinstance(lay, Residual):
            continue
        params = lay.params()
        if not params:
            continue
        adapter = None
        if isinstance(lay, Conv):
            original = lay.kernel.weights.size
        elif isinstance(lay, CoLoRA):
            original = lay.layer.base.weights.size
            adapter = sum(t.size for t in lay.adapter_params().values())
        elif isinstance(lay, CnnAdapter):
            original = lay.layer.base.weights.size
            adapter = lay.layer.a.size + 2
        elif isinstance(lay, DenseLora):
            original = lay.layer.w0.size
            adapter = lay.layer.a.size + lay.layer.b.size
        else:
            original = lay.params()[f"{lay.name}.weight"].size
        trainable, frozen = _split_counts(params)
        report.rows.append(ParamRow(lay.name, lay.kind, original, adapter, trainable, frozen))
    return report
