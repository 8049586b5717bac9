"""Network definitions: declarative layer stacks for the encoder, decoder,
discriminator, auxiliary classifier, and the standalone CNN classifier.

Shapes are validated at construction by chaining each layer's ``out_shape``
from the probe input. A network may carry a feature tap: the index of its
final fully connected layer, whose *input* vector is exported on forward and
accepts an extra gradient on backward (used by the feature-matching losses).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import (
    TRAIN,
    Activation,
    BatchNorm,
    CacheError,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    Layer,
    Reshape,
    ShapeError,
    Softmax,
    TConv2d,
)

LATENT_DIM = 128


@dataclass
class LayerSpec:
    """Declarative description of one layer, used for table conformance."""

    kind: str
    out: int | None = None
    kernel: int | None = None
    stride: int | None = None
    leak: float | None = None
    rate: float | None = None


def spec_of(layer: Layer) -> LayerSpec:
    if isinstance(layer, Conv2d):
        return LayerSpec("conv", layer.out_channels, layer.kernel, layer.stride)
    if isinstance(layer, TConv2d):
        return LayerSpec("tconv", layer.out_channels, layer.kernel, layer.stride)
    if isinstance(layer, Dense):
        return LayerSpec("fc", layer.out_features)
    if isinstance(layer, Activation):
        return LayerSpec(layer.kind, leak=layer.leak if layer.kind == "lrelu" else None)
    if isinstance(layer, Dropout):
        return LayerSpec("dropout", rate=layer.rate)
    return LayerSpec(layer.kind)


@dataclass
class LatentParams:
    """Gaussian latent description produced by the encoder head."""

    mu: np.ndarray
    log_sigma: np.ndarray


def split_latent(head_out: np.ndarray) -> LatentParams:
    if head_out.ndim != 2 or head_out.shape[1] != 2 * LATENT_DIM:
        raise ShapeError(
            f"latent head output must be (n, {2 * LATENT_DIM}), got {head_out.shape}"
        )
    return LatentParams(head_out[:, :LATENT_DIM], head_out[:, LATENT_DIM:])


@dataclass
class NetPass:
    """One forward pass: final output, optional tap features, layer caches."""

    output: np.ndarray
    features: np.ndarray | None
    caches: list = field(repr=False, default_factory=list)


class Network:
    """An ordered layer stack with bound parameters."""

    def __init__(self, name, layers, in_shape, feature_tap=None):
        self.name = name
        self.layers = list(layers)
        self.in_shape = tuple(in_shape)
        self.feature_tap = feature_tap
        if feature_tap is not None and not isinstance(self.layers[feature_tap], Dense):
            raise ValueError("feature_tap must point at a fully connected layer")
        shape = self.in_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        self.out_shape = shape

    @property
    def specs(self) -> list[LayerSpec]:
        return [spec_of(l) for l in self.layers]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for pname, arr in layer.params.items():
                out[f"{i:02d}.{layer.kind}.{pname}"] = arr
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = dict(self.params())
        for i, layer in enumerate(self.layers):
            for bname, arr in layer.buffers.items():
                out[f"{i:02d}.{layer.kind}.{bname}"] = arr
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        own = self.state_dict()
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"{self.name}: state is missing tensors {sorted(missing)[:3]}...")
        for name, arr in own.items():
            src = state[name]
            if src.shape != arr.shape:
                raise ShapeError(
                    f"{self.name}: tensor {name} has shape {src.shape}, expected {arr.shape}"
                )
            arr[...] = src

    def num_params(self) -> int:
        return sum(int(a.size) for a in self.params().values())

    def forward(self, x, mode=TRAIN, rng=None, keep_cols=True, update_running=True) -> NetPass:
        if x.shape[1:] != self.in_shape[1:]:
            raise ShapeError(
                f"{self.name}: input shape {x.shape} does not match probe {self.in_shape}"
            )
        features = None
        caches = []
        for i, layer in enumerate(self.layers):
            if i == self.feature_tap:
                features = x
            if isinstance(layer, BatchNorm):
                x, cache = layer.forward(x, mode, rng, keep_cols, update_running=update_running)
            else:
                x, cache = layer.forward(x, mode, rng, keep_cols)
            caches.append(cache)
        return NetPass(x, features, caches)

    def backward(self, netpass: NetPass, grad_output=None, grad_features=None,
                 need_param_grads=True):
        """Backpropagate to the network input.

        Either gradient may be omitted; ``grad_features`` is injected at the
        feature tap. Returns (grad_input, param_grads dict).
        """
        if len(netpass.caches) != len(self.layers):
            raise CacheError(f"{self.name}: cache list does not match layer stack")
        if grad_output is None:
            if grad_features is None:
                raise ValueError("backward needs grad_output and/or grad_features")
            g = np.zeros_like(netpass.output)
        else:
            g = grad_output
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            g, pgrads = layer.backward(netpass.caches[i], g, need_param_grads)
            if pgrads:
                for pname, arr in pgrads.items():
                    grads[f"{i:02d}.{layer.kind}.{pname}"] = arr
            if i == self.feature_tap and grad_features is not None:
                g = g + grad_features
        return g, grads


def build_encoder(rng=None) -> Network:
    """Stride-2 conv stack to a 4096 flatten, two FC blocks, then a linear
    256-wide head that splits into (mu, log_sigma) of 128 each."""
    rng = rng or np.random.default_rng(0)
    layers = [
        Conv2d(1, 32, 2, rng=rng), Activation("lrelu"),
        Conv2d(32, 64, 2, rng=rng), BatchNorm(64), Activation("lrelu"),
        Conv2d(64, 128, 2, rng=rng), BatchNorm(128), Activation("lrelu"),
        Conv2d(128, 256, 2, rng=rng), BatchNorm(256), Activation("lrelu"),
        Flatten(),
        Dense(4096, 1024, rng=rng), BatchNorm(1024), Activation("lrelu"),
        Dense(1024, 128, rng=rng), BatchNorm(128), Activation("lrelu"),
        Dense(128, 2 * LATENT_DIM, rng=rng),
    ]
    return Network("encoder", layers, in_shape=(1, 1, 64, 64))


def build_decoder(num_classes: int = 9, rng=None) -> Network:
    """Latent-plus-label vector up through four stride-2 transposed convs to
    a tanh-bounded (n, 1, 64, 64) patch."""
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    rng = rng or np.random.default_rng(0)
    layers = [
        Dense(LATENT_DIM + num_classes, 1024, rng=rng), BatchNorm(1024), Activation("lrelu"),
        Dense(1024, 4096, rng=rng), BatchNorm(4096), Activation("lrelu"),
        Reshape(256, 4, 4),
        TConv2d(256, 128, rng=rng), BatchNorm(128), Activation("lrelu"),
        TConv2d(128, 64, rng=rng), BatchNorm(64), Activation("lrelu"),
        TConv2d(64, 32, rng=rng), BatchNorm(32), Activation("lrelu"),
        TConv2d(32, 1, rng=rng), BatchNorm(1), Activation("tanh"),
    ]
    net = Network("decoder", layers, in_shape=(1, LATENT_DIM + num_classes))
    net.num_classes = num_classes
    return net


def _disc_trunk(rng):
    return [
        Conv2d(1, 32, 1, rng=rng), BatchNorm(32), Activation("relu"),
        Conv2d(32, 64, 2, rng=rng), BatchNorm(64), Activation("relu"),
        Conv2d(64, 128, 2, rng=rng), BatchNorm(128), Activation("relu"),
        Flatten(),
        Dense(128 * 16 * 16, 512, rng=rng), BatchNorm(512), Activation("relu"),
    ]


def build_discriminator(rng=None) -> Network:
    """Real/fake critic with the 512-dim feature tap at its final FC input."""
    rng = rng or np.random.default_rng(0)
    layers = _disc_trunk(rng) + [Dense(512, 1, rng=rng), Activation("sigmoid")]
    return Network("discriminator", layers, in_shape=(1, 1, 64, 64),
                   feature_tap=len(layers) - 2)


def build_gan_classifier(rng=None) -> Network:
    """Auxiliary 9-way classifier sharing the discriminator's table shape
    (parameters are disjoint), tapped at its final FC input."""
    rng = rng or np.random.default_rng(0)
    layers = _disc_trunk(rng) + [Dense(512, 9, rng=rng), Softmax()]
    return Network("gan_classifier", layers, in_shape=(1, 1, 64, 64),
                   feature_tap=len(layers) - 2)


def build_cnn_classifier(num_outputs: int, rng=None) -> Network:
    """Standalone patch classifier; first conv carries no batch norm."""
    if num_outputs not in (2, 10):
        raise ValueError(f"num_outputs must be 2 or 10, got {num_outputs}")
    rng = rng or np.random.default_rng(0)
    layers = [
        Conv2d(1, 32, 1, rng=rng), Activation("relu"),
        Conv2d(32, 64, 2, rng=rng), BatchNorm(64), Activation("relu"),
        Conv2d(64, 128, 2, rng=rng), BatchNorm(128), Activation("relu"),
        Conv2d(128, 256, 2, rng=rng), BatchNorm(256), Activation("relu"),
        Flatten(),
        Dense(256 * 8 * 8, 1024, rng=rng), BatchNorm(1024), Activation("relu"), Dropout(0.5),
        Dense(1024, num_outputs, rng=rng), Softmax(),
    ]
    return Network("cnn_classifier", layers, in_shape=(1, 1, 64, 64))
