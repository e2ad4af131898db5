"""Sequential network description, evaluation and accounting.

A :class:`Network` is an ordered list of layer specs plus an input shape.
Parameters live outside the network in a *weight store*: a plain dict that
maps ``"layer{i}.weight"`` / ``"layer{i}.bias"`` to arrays.
"""

from dataclasses import asdict, dataclass, field, fields
from typing import Union

import numpy as np

from .errors import ShapeError
from .tensor import check_finite, col2im_batch, conv_output_size, im2col_batch

WeightStore = dict  # "layer{i}.weight" / "layer{i}.bias" -> np.ndarray


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("Conv2d channel counts must be positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}")
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ShapeError("Conv2d needs kernel, stride >= 1 and padding >= 0")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    @property
    def is_depthwise(self):
        return self.groups > 1 and self.groups == self.in_channels == self.out_channels

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"Conv2d({self.in_channels}->...) got input {tuple(in_shape)}")
        _, h, w = in_shape
        return (self.out_channels,
                conv_output_size(h, self.kernel, self.stride, self.padding),
                conv_output_size(w, self.kernel, self.stride, self.padding))


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int
    bias: bool = True

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise ShapeError("Linear feature counts must be positive")

    @property
    def weight_shape(self):
        return (self.out_features, self.in_features)

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"Linear({self.in_features}->...) got input {tuple(in_shape)}")
        return (self.out_features,)


@dataclass(frozen=True)
class ReLU:
    def out_shape(self, in_shape):
        return tuple(in_shape)


@dataclass(frozen=True)
class Softmax:
    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"Softmax expects flat features, got {tuple(in_shape)}")
        return tuple(in_shape)


@dataclass(frozen=True)
class Flatten:
    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


@dataclass(frozen=True)
class MaxPool2d:
    kernel: int
    stride: int = 0  # 0 means "same as kernel"

    def out_shape(self, in_shape):
        return _pool_shape(self, in_shape)


@dataclass(frozen=True)
class AvgPool2d:
    kernel: int
    stride: int = 0

    def out_shape(self, in_shape):
        return _pool_shape(self, in_shape)


def _pool_stride(layer):
    return layer.stride or layer.kernel


def _pool_shape(layer, in_shape):
    if len(in_shape) != 3:
        raise ShapeError(f"{type(layer).__name__} expects [c, h, w], got {tuple(in_shape)}")
    c, h, w = in_shape
    s = _pool_stride(layer)
    return (c, conv_output_size(h, layer.kernel, s, 0), conv_output_size(w, layer.kernel, s, 0))


Layer = Union[Conv2d, Linear, ReLU, Softmax, Flatten, MaxPool2d, AvgPool2d]
LAYER_KINDS = {cls.__name__: cls for cls in (Conv2d, Linear, ReLU, Softmax, Flatten,
                                              MaxPool2d, AvgPool2d)}
PARAMETERIZED = (Conv2d, Linear)


def layer_to_dict(layer):
    return {"kind": type(layer).__name__, **asdict(layer)}


def layer_from_dict(d):
    d = dict(d)
    kind = d.pop("kind")
    cls = LAYER_KINDS.get(kind)
    if cls is None:
        raise ValueError(f"unknown layer kind {kind!r}")
    names = {f.name for f in fields(cls)}
    if set(d) - names:
        raise ValueError(f"unexpected fields for {kind}: {sorted(set(d) - names)}")
    return cls(**d)


@dataclass
class Network:
    layers: list
    input_shape: tuple
    name: str = "net"
    shapes: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.layers = list(self.layers)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        shape = self.input_shape
        shapes = [shape]
        for i, layer in enumerate(self.layers):
            try:
                shape = tuple(layer.out_shape(shape))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({type(layer).__name__}): {exc}") from None
            shapes.append(shape)
        self.shapes = shapes

    @property
    def output_shape(self):
        return self.shapes[-1]

    def parameterized(self):
        """Indices of layers that own weights."""
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, PARAMETERIZED)]

    def to_dict(self):
        return {"name": self.name, "input_shape": list(self.input_shape),
                "layers": [layer_to_dict(layer) for layer in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls([layer_from_dict(x) for x in d["layers"]], tuple(d["input_shape"]),
                   d.get("name", "net"))


def weight_key(i):
    return f"layer{i}.weight"


def bias_key(i):
    return f"layer{i}.bias"


def check_weights(net, weights):
    """Raise :class:`ShapeError` unless ``weights`` matches ``net`` exactly."""
    expected = {}
    for i, layer in enumerate(net.layers):
        if isinstance(layer, PARAMETERIZED):
            expected[weight_key(i)] = layer.weight_shape
            if layer.bias:
                expected[bias_key(i)] = (layer.weight_shape[0],)
    missing = sorted(set(expected) - set(weights))
    if missing:
        raise ShapeError(f"missing weight entries: {missing}")
    extra = sorted(set(weights) - set(expected))
    if extra:
        raise ShapeError(f"unexpected weight entries: {extra}")
    for key, shape in expected.items():
        if tuple(weights[key].shape) != tuple(shape):
            raise ShapeError(f"{key} has shape {weights[key].shape}, expected {shape}")


def init_weights(net, rng, dtype=np.float32):
    """He-normal weights and zero biases for every parameterized layer."""
    weights = {}
    for i in net.parameterized():
        layer = net.layers[i]
        shape = layer.weight_shape
        fan_in = int(np.prod(shape[1:]))
        weights[weight_key(i)] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        if layer.bias:
            weights[bias_key(i)] = np.zeros(shape[0], dtype=dtype)
    return weights


# -- per-layer kernels -------------------------------------------------------
# Each *_forward returns (output, cache); caches feed the backward pass in
# rpk.training.

def conv_forward(layer, w, b, x):
    bsz = x.shape[0]
    g = layer.groups
    cols = im2col_batch(x, layer.kernel, layer.stride, layer.padding)
    _, oh, ow = layer.out_shape(x.shape[1:])
    ncols = cols.shape[1] // g
    cols_g = cols.reshape(bsz, g, ncols, oh * ow)
    w_g = w.reshape(g, layer.out_channels // g, ncols)
    y = np.matmul(w_g[None], cols_g).reshape(bsz, layer.out_channels, oh, ow)
    if b is not None:
        y = y + b.reshape(1, -1, 1, 1)
    return y, cols_g


def conv_backward(layer, w, cache, x_shape, dy):
    cols_g = cache
    bsz = dy.shape[0]
    g = layer.groups
    ncols = cols_g.shape[2]
    dy_g = dy.reshape(bsz, g, layer.out_channels // g, -1)
    dw = np.matmul(dy_g, cols_g.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
    w_g = w.reshape(g, layer.out_channels // g, ncols)
    dcols = np.matmul(w_g.transpose(0, 2, 1)[None], dy_g).reshape(bsz, g * ncols, -1)
    dx = col2im_batch(dcols, x_shape, layer.kernel, layer.stride, layer.padding)
    db = dy.sum(axis=(0, 2, 3)) if layer.bias else None
    return dx, dw, db


def _pool_windows(layer, x):
    s = _pool_stride(layer)
    k = layer.kernel
    _, oh, ow = _pool_shape(layer, x.shape[1:])
    cols = im2col_batch(x, k, s, 0)
    bsz, c = x.shape[0], x.shape[1]
    return cols.reshape(bsz, c, k * k, oh, ow)


def pool_forward(layer, x):
    win = _pool_windows(layer, x)
    if isinstance(layer, MaxPool2d):
        idx = win.argmax(axis=2)
        y = np.take_along_axis(win, idx[:, :, None], axis=2)[:, :, 0]
        return y, idx
    return win.mean(axis=2), None


def pool_backward(layer, cache, x_shape, dy):
    k = layer.kernel
    s = _pool_stride(layer)
    bsz, c = x_shape[0], x_shape[1]
    oh, ow = dy.shape[2], dy.shape[3]
    if isinstance(layer, MaxPool2d):
        dwin = np.zeros((bsz, c, k * k, oh, ow), dtype=dy.dtype)
        np.put_along_axis(dwin, cache[:, :, None], dy[:, :, None], axis=2)
    else:
        dwin = np.broadcast_to(dy[:, :, None] / (k * k), (bsz, c, k * k, oh, ow))
    return col2im_batch(dwin.reshape(bsz, c * k * k, oh * ow), x_shape, k, s, 0)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def layer_forward(layer, weights, i, x):
    """Evaluate layer ``i`` on batch ``x``; returns (output, cache)."""
    if isinstance(layer, Conv2d):
        return conv_forward(layer, weights[weight_key(i)], weights.get(bias_key(i)), x)
    if isinstance(layer, Linear):
        y = x @ weights[weight_key(i)].T
        if layer.bias:
            y = y + weights[bias_key(i)]
        return y, None
    if isinstance(layer, ReLU):
        return np.maximum(x, 0), None
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), None
    if isinstance(layer, Softmax):
        return softmax(x), None
    if isinstance(layer, (MaxPool2d, AvgPool2d)):
        return pool_forward(layer, x)
    raise TypeError(f"unsupported layer {layer!r}")


def forward_trace(net, weights, x):
    """Like :func:`forward` but also returns per-layer caches."""
    x = np.asarray(x)
    if tuple(x.shape[1:]) != net.input_shape or x.ndim != len(net.input_shape) + 1:
        raise ShapeError(f"input batch {x.shape} does not match input shape {net.input_shape}")
    if x.shape[0] < 1:
        raise ShapeError("empty batch")
    for i in net.parameterized():
        if weight_key(i) not in weights:
            raise ShapeError(f"missing weight entry {weight_key(i)}")
    acts, caches = [], []
    # overflow surfaces as a typed NonFiniteError below, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        for i, layer in enumerate(net.layers):
            x, cache = layer_forward(layer, weights, i, x)
            acts.append(x)
            caches.append(cache)
    if acts:
        check_finite(acts[-1], "network output")
    return acts, caches


def forward(net, weights, x):
    """Evaluate ``net`` on batch ``x``; returns one activation per layer."""
    return forward_trace(net, weights, x)[0]


def predict(net, weights, x):
    acts = forward(net, weights, x)
    return acts[-1] if acts else np.asarray(x)


# -- accounting --------------------------------------------------------------

FLOP_CONVENTION = "1 multiply-accumulate = 2 FLOPs"


@dataclass
class ModelStats:
    param_count: int
    flops: int
    per_layer: list
    convention: str = FLOP_CONVENTION

    def to_dict(self):
        return asdict(self)


def model_stats(net, input_shape=None):
    """Parameter and FLOP counts per layer and in total."""
    if input_shape is not None and tuple(input_shape) != net.input_shape:
        net = Network(net.layers, tuple(input_shape), net.name)
    rows = []
    for i, layer in enumerate(net.layers):
        params = flops = 0
        if isinstance(layer, Conv2d):
            n, mg, k, _ = layer.weight_shape
            _, oh, ow = net.shapes[i + 1]
            params = n * mg * k * k + (n if layer.bias else 0)
            flops = 2 * n * mg * k * k * oh * ow
        elif isinstance(layer, Linear):
            n, m = layer.weight_shape
            params = n * m + (n if layer.bias else 0)
            flops = 2 * n * m
        rows.append({"index": i, "kind": type(layer).__name__, "params": params, "flops": flops})
    return ModelStats(sum(r["params"] for r in rows), sum(r["flops"] for r in rows), rows)
