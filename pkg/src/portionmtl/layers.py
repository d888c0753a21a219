"""Layers built on :mod:`portionmtl.autodiff`: linear, conv, layer/batch norm,
and the small CNN backbone used in place of ResNet-18."""

import math
from dataclasses import asdict, dataclass

import numpy as np

from portionmtl.autodiff import ShapeError, Tensor


class Parameter(Tensor):
    def __init__(self, values, name=None):
        super().__init__(values, requires_grad=True, name=name)


def glorot_uniform(rng, shape, fan_in, fan_out):
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


class Module:
    """Holds parameters in a fixed registration order."""

    def named_parameters(self, prefix=""):
        out = []
        for name, obj in self._children():
            full = f"{prefix}{name}"
            if isinstance(obj, Parameter):
                out.append((full, obj))
            else:
                out.extend(obj.named_parameters(full + "."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        out = []
        for name, obj in self._children():
            if isinstance(obj, Module):
                out.extend(obj.named_buffers(f"{prefix}{name}."))
        return out

    def _children(self):
        raise NotImplementedError


class Linear(Module):
    """y = x @ W + b with W stored (in_features, out_features)."""

    def __init__(self, in_features, out_features, rng):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(glorot_uniform(rng, (in_features, out_features), in_features, out_features))
        self.bias = Parameter(np.zeros(out_features))

    def _children(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, g, x):
        n, d = g.value(x).shape
        if d != self.in_features:
            raise ShapeError("linear", (n, d), self.weight.shape)
        y = g.matmul(x, g.leaf(self.weight))
        return g.add(y, g.expand(g.leaf(self.bias), (n, self.out_features)))


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, padding=0):
        k = kernel_size
        self.padding = padding
        self.weight = Parameter(
            glorot_uniform(rng, (out_channels, in_channels, k, k), in_channels * k * k, out_channels * k * k)
        )
        self.bias = Parameter(np.zeros(out_channels))

    def _children(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, g, x):
        return g.conv2d(x, g.leaf(self.weight), g.leaf(self.bias), padding=self.padding)


class NormLayer(Module):
    """Learnable per-feature affine over a normalized input.

    ``mode="layer"`` normalizes each sample over its features; ``mode="batch"``
    normalizes each feature over the mini-batch and tracks running stats.
    """

    def __init__(self, features, mode, epsilon=1e-5, momentum=0.1):
        if mode not in ("layer", "batch"):
            raise ValueError(f"mode must be 'layer' or 'batch', got {mode!r}")
        if epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not 0 < momentum <= 1:
            raise ValueError("momentum must be in (0, 1]")
        self.features = features
        self.mode = mode
        self.epsilon = epsilon
        self.momentum = momentum
        self.gamma = Parameter(np.ones(features))
        self.beta = Parameter(np.zeros(features))
        if mode == "batch":
            self.running_mean = np.zeros(features)
            self.running_var = np.ones(features)

    def _children(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def named_buffers(self, prefix=""):
        if self.mode != "batch":
            return []
        return [(prefix + "running_mean", self.running_mean), (prefix + "running_var", self.running_var)]

    def forward(self, g, x, training=True):
        if self.mode == "layer":
            return layer_norm_forward(g, x, self)
        return batch_norm_forward(g, x, self, training)


def _check_features(g, x, layer, op):
    shape = g.value(x).shape
    if len(shape) != 2 or shape[1] != layer.features:
        raise ShapeError(op, shape, (None, layer.features))
    return shape


def _affine(g, xhat, layer, shape):
    y = g.mul(xhat, g.expand(g.leaf(layer.gamma), shape))
    return g.add(y, g.expand(g.leaf(layer.beta), shape))


def layer_norm_forward(g, x, layer):
    """Per-sample normalization over the H features of each row of ``x``."""
    if layer.mode != "layer":
        raise ValueError("layer_norm_forward needs a layer-mode NormLayer")
    shape = _check_features(g, x, layer, "layer_norm")
    mu = g.mean(x, axis=1, keepdims=True)
    xc = g.sub(x, g.expand(mu, shape))
    var = g.mean(g.square(xc), axis=1, keepdims=True)
    std = g.sqrt(g.add_const(var, layer.epsilon))
    xhat = g.div(xc, g.expand(std, shape))
    return _affine(g, xhat, layer, shape)


def batch_norm_forward(g, x, layer, training):
    """Per-feature normalization over the mini-batch (training) or by the
    running statistics (inference). Variance is the biased estimator."""
    if layer.mode != "batch":
        raise ValueError("batch_norm_forward needs a batch-mode NormLayer")
    shape = _check_features(g, x, layer, "batch_norm")
    if training:
        if shape[0] < 2:
            raise ValueError("batch norm in training mode needs at least 2 samples per batch")
        mu = g.mean(x, axis=0, keepdims=True)
        xc = g.sub(x, g.expand(mu, shape))
        var = g.mean(g.square(xc), axis=0, keepdims=True)
        m = layer.momentum
        layer.running_mean[:] = (1 - m) * layer.running_mean + m * g.value(mu)[0]
        layer.running_var[:] = (1 - m) * layer.running_var + m * g.value(var)[0]
        std = g.sqrt(g.add_const(var, layer.epsilon))
    else:
        xc = g.sub(x, g.expand(g.const(layer.running_mean), shape))
        std = g.const(np.sqrt(layer.running_var + layer.epsilon))
    xhat = g.div(xc, g.expand(std, shape))
    return _affine(g, xhat, layer, shape)


@dataclass(frozen=True)
class BackboneSpec:
    input_size: int = 32
    in_channels: int = 3
    channels: tuple = (8, 16, 32)
    kernel_size: int = 3
    pool_size: int = 2
    feature_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        shrink = self.pool_size ** len(self.channels)
        if self.input_size % shrink:
            raise ValueError(
                f"input_size {self.input_size} must be divisible by {shrink} "
                f"({len(self.channels)} pooling stages of {self.pool_size})"
            )
        if self.feature_dim < 1 or not self.channels:
            raise ValueError("feature_dim and channels must be positive")

    @property
    def flat_dim(self):
        side = self.input_size // self.pool_size ** len(self.channels)
        return self.channels[-1] * side * side

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Backbone(Module):
    """(conv 3x3 -> relu -> max-pool) x len(channels) -> linear -> relu."""

    def __init__(self, spec, rng):
        self.spec = spec
        pad = spec.kernel_size // 2
        self.convs = []
        cin = spec.in_channels
        for cout in spec.channels:
            self.convs.append(Conv2d(cin, cout, spec.kernel_size, rng, padding=pad))
            cin = cout
        self.fc = Linear(spec.flat_dim, spec.feature_dim, rng)

    @property
    def feature_dim(self):
        return self.spec.feature_dim

    @property
    def layers(self):
        return [*self.convs, self.fc]

    def _children(self):
        return [(f"layer{i}", layer) for i, layer in enumerate(self.layers)]

    def forward(self, g, x):
        shape = g.value(x).shape
        s = self.spec
        if len(shape) != 4 or shape[1:] != (s.in_channels, s.input_size, s.input_size):
            raise ShapeError("backbone", shape, (None, s.in_channels, s.input_size, s.input_size))
        h = x
        for conv in self.convs:
            h = g.maxpool2d(g.relu(conv.forward(g, h)), s.pool_size)
        h = g.reshape(h, (shape[0], s.flat_dim))
        return g.relu(self.fc.forward(g, h))


def backbone_forward(g, image, backbone):
    return backbone.forward(g, image)


def flatten_params(module, layers=None):
    """Concatenate parameters in registration order: layer index, then
    weight before bias, each raveled row-major. ``layers`` limits the
    result to the first ``layers`` entries of ``module.layers``."""
    if layers is None:
        params = module.parameters()
    else:
        params = [p for layer in module.layers[:layers] for p in layer.parameters()]
    if not params:
        return np.zeros(0)
    return np.concatenate([p.values.ravel() for p in params])


def copy_module_values(src, dst):
    for (na, a), (nb, b) in zip(src.named_parameters(), dst.named_parameters(), strict=True):
        if a.shape != b.shape:
            raise ShapeError("copy", a.shape, b.shape, detail=f"{na} -> {nb}")
        b.values[...] = a.values
