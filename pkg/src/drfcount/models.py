"""Toy fully-convolutional backbones for the rough and precise networks.

Both networks share the same topology: a few conv/relu/pool stages down to
a 1/8-resolution grid, a block of trailing 3x3 convolutions, and a 1x1
head with a final ReLU so the predicted map is a valid density. In the
precise network the trailing convolutions consume a dilation map; in the
rough network they are plain convolutions.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .density import DensityMap
from .dilated import refined_dilated_conv


@dataclass
class ModelConfig:
    stage_channels: tuple = (8, 12, 16)
    pool_stages: int = 3
    trailing_channels: tuple = (16, 16, 16)
    refined_layers: int = 3

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.trailing_channels = tuple(self.trailing_channels)
        if len(self.stage_channels) != self.pool_stages:
            raise ValueError(
                f"config needs one channel width per pool stage: "
                f"{len(self.stage_channels)} widths, {self.pool_stages} stages"
            )
        if self.refined_layers > len(self.trailing_channels):
            raise ValueError(
                f"refined layer count {self.refined_layers} exceeds "
                f"trailing conv count {len(self.trailing_channels)}"
            )
        if any(c < 1 for c in self.stage_channels + self.trailing_channels):
            raise ValueError("channel widths must be positive")

    @property
    def downsample(self):
        return 2**self.pool_stages

    def param_count(self):
        """Closed-form parameter count (weights + biases)."""
        total = 0
        cin = 1
        for c in self.stage_channels + self.trailing_channels:
            total += c * cin * 9 + c
            cin = c
        total += cin + 1  # 1x1 head
        return total


class ConvLayer:
    def __init__(self, name, cin, cout, kernel=3, pad=1, dilation=1, refined=False):
        self.name = name
        self.cin = cin
        self.cout = cout
        self.kernel = kernel
        self.pad = pad
        self.dilation = dilation
        self.refined = refined
        self.weight = None
        self.bias = None

    def init_params(self, rng):
        std = np.sqrt(2.0 / (self.cin * self.kernel * self.kernel))
        self.weight = T.Tensor(
            rng.normal(0.0, std, size=(self.cout, self.cin, self.kernel, self.kernel)),
            requires_grad=True,
        )
        self.bias = T.Tensor(np.zeros(self.cout), requires_grad=True)

    def params(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def forward(self, x, dmap=None):
        if self.refined:
            if dmap is None:
                raise ValueError(f"layer {self.name} needs a dilation map")
            return refined_dilated_conv(x, self.weight, self.bias, dmap)
        return T.conv2d(x, self.weight, self.bias, pad=self.pad, dilation=self.dilation)


class ReLULayer:
    name = "relu"

    def params(self):
        return {}

    def forward(self, x, dmap=None):
        return T.relu(x)


class PoolLayer:
    name = "pool"

    def params(self):
        return {}

    def forward(self, x, dmap=None):
        return T.max_pool2(x)


class Model:
    """Ordered layer stack with named parameters and a role tag."""

    def __init__(self, layers, config, role):
        if role not in ("rough", "precise"):
            raise ValueError(f"unknown model role {role!r}")
        self.layers = layers
        self.config = config
        self.role = role

    def params(self):
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def forward(self, x, dmap=None):
        """Run the stack on a [B, 1, H, W] tensor; returns a [B, 1, h, w] tensor.

        ``dmap`` (required for precise models) feeds every refined layer.
        """
        for layer in self.layers:
            x = layer.forward(x, dmap=dmap)
        return x

    def load_state(self, named_arrays):
        params = self.params()
        missing = set(params) - set(named_arrays)
        extra = set(named_arrays) - set(params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(named_arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def state(self):
        return {name: p.data.copy() for name, p in self.params().items()}


def build_model(cfg, seed, role="rough"):
    """Deterministically initialized model: He-scaled normal conv weights,
    zero biases, drawn in layer order from the given seed."""
    rng = np.random.default_rng(seed)
    layers = []
    cin = 1
    for i, c in enumerate(cfg.stage_channels):
        layers.append(ConvLayer(f"stage{i}", cin, c))
        layers.append(ReLULayer())
        layers.append(PoolLayer())
        cin = c
    n_trailing = len(cfg.trailing_channels)
    first_refined = n_trailing - cfg.refined_layers if role == "precise" else n_trailing
    for i, c in enumerate(cfg.trailing_channels):
        layers.append(ConvLayer(f"trailing{i}", cin, c, refined=i >= first_refined))
        layers.append(ReLULayer())
        cin = c
    layers.append(ConvLayer("head", cin, 1, kernel=1, pad=0))
    layers.append(ReLULayer())
    for layer in layers:
        if isinstance(layer, ConvLayer):
            layer.init_params(rng)
    return Model(layers, cfg, role)


def _single_forward(model, image, dmap=None):
    x = image.data if isinstance(image, T.Tensor) else np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    out = model.forward(T.Tensor(x), dmap=dmap)
    return DensityMap(out.data[0, 0], scale=1.0 / model.config.downsample)


def forward_rough(model, image):
    """Rough-network inference on one image; returns a 1/8-scale DensityMap."""
    if model.role != "rough":
        raise ValueError(f"forward_rough needs a rough model, got role {model.role!r}")
    return _single_forward(model, image)


def forward_precise(model, image, dmap):
    """Precise-network inference on one image with its dilation map."""
    if model.role != "precise":
        raise ValueError(f"forward_precise needs a precise model, got role {model.role!r}")
    return _single_forward(model, image, dmap=dmap)
