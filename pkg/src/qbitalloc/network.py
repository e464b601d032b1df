"""Small quantizable models: MLP, a 4-conv CNN, and a tiny residual net.

Each parameterized layer normalizes its weights, fake-quantizes them and its
input activations (in quantized mode), then applies a full-precision scalar
gain and bias. The first and last parameterized layers are pinned to 8 bits;
everything in between forms the bit-allocation search space.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .quant import QuantSpec, check_bits, fake_quant_acts, fake_quant_weights, normalize_weights
from .tensor import ShapeError, Tensor

PINNED_BITS = 8
QUANTIZED = "quantized"
FULL_PRECISION = "full-precision"
FAMILIES = ("mlp", "cnn-small", "resnet-tiny")

DEFAULT_WEIGHT_ALPHA = 3.0  # 3 * std of the normalized weights, which is 1
DEFAULT_ACT_ALPHA = 8.0
GAIN_LEARNED = False


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class PinnedLayerError(StateError):
    pass


@dataclass
class LayerSpec:
    kind: str
    shape: Tuple[int, ...]
    quantizable: bool = False
    weight_spec: Optional[QuantSpec] = None
    act_spec: Optional[QuantSpec] = None


class QuantLayer:
    """Base for dense/conv layers carrying weight + activation quantizers."""

    kind = "param"

    def __init__(self, weight_shape, fan_in: int, rng: np.random.Generator,
                 out_features: int, act_alpha: float = DEFAULT_ACT_ALPHA):
        self.weight = Tensor(rng.standard_normal(weight_shape) * math.sqrt(2.0 / fan_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)
        self.gain = Tensor(math.sqrt(2.0 / fan_in), requires_grad=GAIN_LEARNED)
        w_hat = normalize_weights(self.weight.data).data
        self.w_alpha = Tensor(3.0 * float(w_hat.std()) or DEFAULT_WEIGHT_ALPHA, requires_grad=True)
        self.x_alpha = Tensor(float(act_alpha), requires_grad=True)
        self.pinned = False
        self._wbits: Optional[int] = None
        self._xbits: Optional[int] = None

    # bit widths, guarded for pinned layers
    @property
    def wbits(self) -> Optional[int]:
        return self._wbits

    @wbits.setter
    def wbits(self, b: int) -> None:
        if self.pinned and b != PINNED_BITS:
            raise PinnedLayerError("pinned layers stay at 8 bits")
        check_bits(b, signed=True)
        self._wbits = int(b)

    @property
    def xbits(self) -> Optional[int]:
        return self._xbits

    @xbits.setter
    def xbits(self, b: int) -> None:
        if self.pinned and b != PINNED_BITS:
            raise PinnedLayerError("pinned layers stay at 8 bits")
        check_bits(b, signed=False)
        self._xbits = int(b)

    def pin(self) -> None:
        self._wbits = self._xbits = PINNED_BITS
        self.pinned = True

    @property
    def weight_spec(self) -> Optional[QuantSpec]:
        return None if self._wbits is None else QuantSpec(True, self._wbits, self.w_alpha)

    @property
    def act_spec(self) -> Optional[QuantSpec]:
        return None if self._xbits is None else QuantSpec(False, self._xbits, self.x_alpha)

    @property
    def n_weights(self) -> int:
        return self.weight.size

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias, self.gain, self.w_alpha, self.x_alpha]

    def named_parameters(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias),
                (f"{prefix}.gain", self.gain), (f"{prefix}.w_alpha", self.w_alpha),
                (f"{prefix}.x_alpha", self.x_alpha)]

    def effective_weight(self, mode: str) -> Tensor:
        w = normalize_weights(self.weight)
        if mode == QUANTIZED:
            w = fake_quant_weights(w, self.weight_spec)
        return w

    def quantize_input(self, x: Tensor, mode: str) -> Tensor:
        if mode == QUANTIZED:
            if self._wbits is None or self._xbits is None:
                raise StateError("quantized forward with no bit assignment on a searchable layer")
            return fake_quant_acts(x, self.act_spec)
        return x


class Dense(QuantLayer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng, act_alpha: float = DEFAULT_ACT_ALPHA):
        super().__init__((n_in, n_out), n_in, rng, n_out, act_alpha)
        self.shape = (n_in, n_out)

    def spec(self) -> LayerSpec:
        return LayerSpec("dense", self.shape, True, self.weight_spec, self.act_spec)

    def forward(self, x: Tensor, mode: str, train: bool = False) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.shape[0]:
            raise ShapeError(f"dense expects (N, {self.shape[0]}), got {x.shape}")
        x = self.quantize_input(x, mode)
        w = self.effective_weight(mode)
        return T.add(T.mul(T.matmul(x, w), self.gain), self.bias)


class Conv(QuantLayer):
    kind = "conv"

    def __init__(self, c_in: int, c_out: int, k: int, rng, act_alpha: float = DEFAULT_ACT_ALPHA):
        super().__init__((c_out, c_in, k, k), c_in * k * k, rng, c_out, act_alpha)
        self.shape = (c_out, c_in, k, k)
        self.padding = k // 2

    def spec(self) -> LayerSpec:
        return LayerSpec("conv", self.shape, True, self.weight_spec, self.act_spec)

    def forward(self, x: Tensor, mode: str, train: bool = False) -> Tensor:
        x = self.quantize_input(x, mode)
        w = self.effective_weight(mode)
        y = T.conv2d(x, w, stride=1, padding=self.padding)
        return T.add(T.mul(y, self.gain), T.reshape(self.bias, (1, -1, 1, 1)))


class ReLU:
    kind = "relu"

    def forward(self, x, mode, train=False):
        return T.relu(x)


class MaxPool:
    kind = "pool"

    def __init__(self, size: int = 2):
        self.size = size

    def forward(self, x, mode, train=False):
        return T.max_pool2d(x, self.size)


class GlobalAvgPool:
    kind = "pool"

    def forward(self, x, mode, train=False):
        return T.mean(x, axis=(2, 3))


class Flatten:
    kind = "flatten"

    def forward(self, x, mode, train=False):
        return T.reshape(x, (x.shape[0], -1))


class BatchNorm:
    """Per-channel batch normalization for (N, C, H, W); kept in full precision."""

    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones((1, channels, 1, 1)), requires_grad=True)
        self.beta = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True)
        self.running_mean = np.zeros((1, channels, 1, 1))
        self.running_var = np.ones((1, channels, 1, 1))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, mode, train=False):
        if train:
            mu = T.mean(x, axis=(0, 2, 3), keepdims=True)
            d = T.sub(x, mu)
            var = T.mean(T.mul(d, d), axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data
            self.running_var = (1 - m) * self.running_var + m * var.data
            xh = T.div(d, T.sqrt(T.add(var, self.eps)))
        else:
            xh = T.div(T.sub(x, self.running_mean), np.sqrt(self.running_var + self.eps))
        return T.add(T.mul(xh, self.gamma), self.beta)


class ResidualBlock:
    """relu(conv2(relu(conv1(x))) + x); channel count preserved."""

    kind = "residual-add"

    def __init__(self, channels: int, rng, batchnorm: bool, act_alpha: float):
        self.conv1 = Conv(channels, channels, 3, rng, act_alpha)
        self.conv2 = Conv(channels, channels, 3, rng, act_alpha)
        self.bn1 = BatchNorm(channels) if batchnorm else None
        self.bn2 = BatchNorm(channels) if batchnorm else None

    def forward(self, x, mode, train=False):
        h = self.conv1.forward(x, mode, train)
        if self.bn1 is not None:
            h = self.bn1.forward(h, mode, train)
        h = T.relu(h)
        h = self.conv2.forward(h, mode, train)
        if self.bn2 is not None:
            h = self.bn2.forward(h, mode, train)
        return T.relu(T.add(h, x))


class Model:
    def __init__(self, layers: Sequence, input_shape: Tuple[int, ...], classes: int, arch: dict):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.classes = int(classes)
        self.arch = dict(arch)
        self.param_layers: List[QuantLayer] = []
        self.batchnorms: List[BatchNorm] = []
        for layer in self.layers:
            self._collect(layer)
        if len(self.param_layers) < 2:
            raise ConfigError("a model needs at least two parameterized layers")
        self.param_layers[0].pin()
        self.param_layers[-1].pin()
        self.searchable = self.param_layers[1:-1]
        # both maps send a search-space index to its layer
        self.weight_index = {i: layer for i, layer in enumerate(self.searchable)}
        self.act_index = {i: layer for i, layer in enumerate(self.searchable)}

    def _collect(self, layer) -> None:
        if isinstance(layer, QuantLayer):
            self.param_layers.append(layer)
        elif isinstance(layer, BatchNorm):
            self.batchnorms.append(layer)
        elif isinstance(layer, ResidualBlock):
            self.param_layers.extend([layer.conv1, layer.conv2])
            self.batchnorms.extend(bn for bn in (layer.bn1, layer.bn2) if bn is not None)

    @property
    def L(self) -> int:
        return len(self.searchable)

    def forward(self, x, mode: str = QUANTIZED, train: bool = False) -> Tensor:
        if mode not in (QUANTIZED, FULL_PRECISION):
            raise ValueError(f"unknown mode {mode!r}")
        x = T.as_tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"model expects inputs of shape (N, {self.input_shape}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, mode, train)
        return x

    __call__ = forward

    def set_bit_allocation(self, r_w: Sequence[int], r_x: Sequence[int]) -> None:
        r_w, r_x = list(r_w), list(r_x)
        if len(r_w) != self.L or len(r_x) != self.L:
            raise ShapeError(f"expected {self.L} weight and activation bit widths, "
                             f"got {len(r_w)} and {len(r_x)}")
        for b in r_w:
            check_bits(b, signed=True)
        for b in r_x:
            check_bits(b, signed=False)
        for i, layer in self.weight_index.items():
            layer.wbits = r_w[i]
        for i, layer in self.act_index.items():
            layer.xbits = r_x[i]

    def bit_allocation(self) -> Tuple[List[Optional[int]], List[Optional[int]]]:
        return ([self.weight_index[i].wbits for i in range(self.L)],
                [self.act_index[i].xbits for i in range(self.L)])

    def param_counts(self) -> List[Tuple[int, int, bool]]:
        """(layer id, weight count, pinned) for each parameterized layer."""
        return [(i, layer.n_weights, layer.pinned) for i, layer in enumerate(self.param_layers)]

    def layer_specs(self) -> List[LayerSpec]:
        return [layer.spec() for layer in self.param_layers]

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.param_layers):
            out.extend(layer.named_parameters(f"p{i}"))
        for j, bn in enumerate(self.batchnorms):
            out.extend([(f"bn{j}.gamma", bn.gamma), (f"bn{j}.beta", bn.beta)])
        return out

    def weight_parameter_count(self) -> int:
        return sum(layer.weight.size for layer in self.param_layers)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        sd = OrderedDict((name, t.data.copy()) for name, t in self.named_parameters())
        for j, bn in enumerate(self.batchnorms):
            sd[f"bn{j}.running_mean"] = bn.running_mean.copy()
            sd[f"bn{j}.running_var"] = bn.running_var.copy()
        return sd

    def load_state_dict(self, sd: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        expected = set(params) | {f"bn{j}.{k}" for j in range(len(self.batchnorms))
                                  for k in ("running_mean", "running_var")}
        if set(sd) != expected:
            missing, extra = expected - set(sd), set(sd) - expected
            raise StateError(f"state dict mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in params.items():
            arr = np.asarray(sd[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"{name}: expected shape {t.data.shape}, got {arr.shape}")
            t.data = arr.copy()
        for j, bn in enumerate(self.batchnorms):
            bn.running_mean = np.asarray(sd[f"bn{j}.running_mean"], dtype=np.float64).copy()
            bn.running_var = np.asarray(sd[f"bn{j}.running_var"], dtype=np.float64).copy()


def build_model(arch: dict, seed: int = 0) -> Model:
    """Build a registered family from an architecture description.

    Keys: ``family``, ``input_shape``, ``classes`` and per-family sizes
    (``width``/``depth`` for mlp, ``channels`` for cnn-small,
    ``channels``/``blocks`` for resnet-tiny), plus optional ``batchnorm``
    and ``act_alpha``.
    """
    family = arch.get("family")
    if family not in FAMILIES:
        raise ConfigError(f"unknown model family {family!r}; expected one of {FAMILIES}")
    rng = np.random.default_rng(seed)
    classes = int(arch.get("classes", 10))
    act_alpha = float(arch.get("act_alpha", DEFAULT_ACT_ALPHA))
    bn = bool(arch.get("batchnorm", False))
    shape = tuple(int(s) for s in arch.get("input_shape", (784,) if family == "mlp" else (1, 8, 8)))

    if family == "mlp":
        n_in = int(np.prod(shape))
        width = int(arch.get("width", 128))
        depth = int(arch.get("depth", 1))
        layers = [Flatten(), Dense(n_in, width, rng, act_alpha), ReLU()]
        for _ in range(depth):
            layers += [Dense(width, width, rng, act_alpha), ReLU()]
        layers.append(Dense(width, classes, rng, act_alpha))
        return Model(layers, shape, classes, arch)

    if len(shape) != 3:
        raise ConfigError(f"{family} needs input_shape (C, H, W), got {shape}")
    c_in, h, w = shape

    if family == "cnn-small":
        ch = [int(c) for c in arch.get("channels", (8, 8, 16, 16))]
        if len(ch) != 4:
            raise ConfigError("cnn-small takes exactly 4 conv channel counts")
        if h % 4 or w % 4:
            raise ConfigError("cnn-small needs spatial dims divisible by 4")
        layers = []
        prev = c_in
        for i, c in enumerate(ch):
            layers.append(Conv(prev, c, 3, rng, act_alpha))
            if bn:
                layers.append(BatchNorm(c))
            layers.append(ReLU())
            if i in (1, 3):
                layers.append(MaxPool(2))
            prev = c
        layers += [Flatten(), Dense(prev * (h // 4) * (w // 4), classes, rng, act_alpha)]
        return Model(layers, shape, classes, arch)

    c = int(arch.get("channels", 8) if not isinstance(arch.get("channels"), (list, tuple))
            else arch["channels"][0])
    blocks = int(arch.get("blocks", 3))
    layers = [Conv(c_in, c, 3, rng, act_alpha)]
    if bn:
        layers.append(BatchNorm(c))
    layers.append(ReLU())
    layers += [ResidualBlock(c, rng, bn, act_alpha) for _ in range(blocks)]
    layers += [GlobalAvgPool(), Dense(c, classes, rng, act_alpha)]
    return Model(layers, shape, classes, arch)
