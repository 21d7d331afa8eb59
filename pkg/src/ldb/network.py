"""
Feed-forward layer graph with a split backward pass.

Each layer's backward is two separate calls: ``backward_input`` (gradient
w.r.t. the layer input, always executed so that earlier layers keep
receiving signal) and ``backward_weights`` (gradient w.r.t. the layer's own
parameters, executed only for selected layers). Skipping the second call is
where LayerDropBack saves compute.
"""

import copy
import math
import struct
from contextlib import nullcontext

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, FormatError, ShapeError

PARAM_KINDS = ("dense", "conv2d")


class Layer:
    kind = ""
    has_params = False

    def __init__(self):
        self.id = None
        self.cached_input = None

    def forward(self, x):
        raise NotImplementedError

    def backward_input(self, grad):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape

    def _fail(self, msg):
        raise ShapeError(f"layer {self.id} ({self.kind}): {msg}")

    def __repr__(self):
        return f"{type(self).__name__}(id={self.id})"


class ParamLayer(Layer):
    has_params = True

    def __init__(self):
        super().__init__()
        self.weights = None
        self.bias = None
        self.weight_grad = None
        self.bias_grad = None

    def zero_grad(self):
        if self.weight_grad is None:
            self.weight_grad = np.zeros_like(self.weights)
            self.bias_grad = np.zeros_like(self.bias)
        else:
            self.weight_grad.fill(0.0)
            self.bias_grad.fill(0.0)

    def backward_weights(self, grad):
        raise NotImplementedError

    def init_params(self, rng):
        raise NotImplementedError


class Dense(ParamLayer):
    """y = x @ W + b with W of shape (in_features, out_features)."""

    kind = "dense"

    def __init__(self, in_features, out_features):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weights = np.zeros((in_features, out_features))
        self.bias = np.zeros(out_features)

    def init_params(self, rng):
        # He-uniform
        bound = math.sqrt(6.0 / self.in_features)
        self.weights = rng.uniform_range(-bound, bound, (self.in_features, self.out_features))
        self.bias = np.zeros(self.out_features)
        self.weight_grad = self.bias_grad = None

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.in_features:
            self._fail(f"expected per-sample input ({self.in_features},), got {tuple(shape)}")
        return (self.out_features,)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            self._fail(f"expected input (B, {self.in_features}), got {x.shape}")
        self.cached_input = x
        try:
            return T.matmul(x, self.weights) + self.bias
        except (ShapeError, ValueError) as e:
            self._fail(str(e))

    def backward_input(self, grad):
        return grad @ self.weights.T

    def backward_weights(self, grad):
        self.weight_grad = self.cached_input.T @ grad
        self.bias_grad = grad.sum(axis=0)


class Conv2d(ParamLayer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.weights = np.zeros((out_channels, in_channels, kernel_size, kernel_size))
        self.bias = np.zeros(out_channels)

    def init_params(self, rng):
        fan_in = self.in_channels * self.kernel_size ** 2
        bound = math.sqrt(6.0 / fan_in)
        self.weights = rng.uniform_range(-bound, bound, self.weights.shape)
        self.bias = np.zeros(self.out_channels)
        self.weight_grad = self.bias_grad = None

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            self._fail(f"expected per-sample input ({self.in_channels}, H, W), got {tuple(shape)}")
        k, s, p = self.kernel_size, self.stride, self.padding
        h, w = (T.conv_output_size(d, k, s, p) for d in shape[1:])
        if h <= 0 or w <= 0:
            self._fail(f"input {tuple(shape)} too small for kernel {k}")
        return (self.out_channels, h, w)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            self._fail(f"expected input (B, {self.in_channels}, H, W), got {x.shape}")
        self.cached_input = x
        return T.conv2d(x, self.weights, self.bias, self.stride, self.padding)

    def backward_input(self, grad):
        return T.conv2d_grad_input(grad, self.weights, self.cached_input.shape, self.stride, self.padding)

    def backward_weights(self, grad):
        k = self.kernel_size
        self.weight_grad = T.conv2d_grad_weight(self.cached_input, grad, (k, k), self.stride, self.padding)
        self.bias_grad = grad.sum(axis=(0, 2, 3))


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self.cached_input = x
        return np.maximum(x, 0.0)

    def backward_input(self, grad):
        return grad * (self.cached_input > 0)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        self.cached_input = x
        return x.reshape(x.shape[0], -1)

    def backward_input(self, grad):
        return grad.reshape(self.cached_input.shape)


class ResidualAdd(Layer):
    """Adds the input of layer ``skip_from`` to the incoming activation."""

    kind = "residual-add"

    def __init__(self, skip_from):
        super().__init__()
        self.skip_from = skip_from

    def forward(self, x, skip=None):
        if skip is None or skip.shape != x.shape:
            got = None if skip is None else skip.shape
            self._fail(f"skip shape {got} does not match branch shape {x.shape}")
        self.cached_input = x
        return x + skip

    def backward_input(self, grad):
        return grad


class Network:
    """Ordered list of layers evaluated in sequence.

    Args:
        layers: layer objects in forward order; ids are assigned here.
        input_shape: per-sample input shape, e.g. ``(32,)`` or ``(1, 14, 14)``.
    """

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        for i, layer in enumerate(self.layers):
            layer.id = i
        self.param_layer_ids = [l.id for l in self.layers if l.has_params]
        shape = self.input_shape
        for layer in self.layers:
            if isinstance(layer, ResidualAdd) and not 0 <= layer.skip_from < layer.id:
                raise ConfigError(f"layer {layer.id}: skip source {layer.skip_from} is not an earlier layer")
            shape = layer.output_shape(shape)
        self.output_shape = shape

    @property
    def param_layers(self):
        return [self.layers[i] for i in self.param_layer_ids]

    def init_params(self, seed):
        rng = T.RngStream(seed, (1,))
        for layer in self.param_layers:
            layer.init_params(rng.spawn(layer.id))

    def forward(self, x):
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"layer 0 ({self.layers[0].kind}): network expects samples of shape "
                             f"{self.input_shape}, got {x.shape[1:]}")
        inputs = []
        for layer in self.layers:
            inputs.append(x)
            if isinstance(layer, ResidualAdd):
                x = layer.forward(x, inputs[layer.skip_from])
            else:
                x = layer.forward(x)
        return x

    __call__ = forward

    def backward_selective(self, loss_grad, selected, timer=None):
        """Backpropagate ``loss_grad``; compute weight gradients only for ``selected``.

        Input gradients run through every layer. Parameter gradients of
        layers outside ``selected`` are zeroed and never computed. Returns the
        gradient w.r.t. the network input. ``timer`` is an optional
        :class:`ldb.bench.PhaseTimer`.
        """
        selected = set(selected)
        bad = selected.difference(self.param_layer_ids)
        if bad:
            raise ConfigError(f"selected ids {sorted(bad)} are not parameterized layers")

        def phase(name):
            return timer.phase(name) if timer is not None else nullcontext()

        for layer in self.param_layers:
            if layer.id not in selected:
                layer.zero_grad()

        pending = {}
        grad = loss_grad
        for layer in reversed(self.layers):
            if layer.has_params and layer.id in selected:
                with phase("backward_dw"):
                    layer.backward_weights(grad)
            with phase("backward_dx"):
                grad = layer.backward_input(grad)
                if isinstance(layer, ResidualAdd):
                    pending[layer.skip_from] = pending.get(layer.skip_from, 0.0) + grad
                extra = pending.pop(layer.id, None)
                if extra is not None:
                    grad = grad + extra
        self.clear_cache()
        return grad

    def backward(self, loss_grad, timer=None):
        return self.backward_selective(loss_grad, self.param_layer_ids, timer)

    def clear_cache(self):
        for layer in self.layers:
            layer.cached_input = None

    def zero_grad(self):
        for layer in self.param_layers:
            layer.zero_grad()

    def clone(self):
        return copy.deepcopy(self)

    def num_params(self):
        return sum(l.weights.size + l.bias.size for l in self.param_layers)


def cross_entropy_loss(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DataError(f"got {labels.shape[0] if labels.ndim else 0} labels for {n} logit rows")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label out of range [0, {k}): min={labels.min()}, max={labels.max()}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= n
    return float(loss), grad


PRESETS = ("mlp-8", "cnn-small", "resnet-toy")


def build_preset(name, input_shape, classes, width=64, seed=0):
    """Construct one of the built-in architectures with seeded init.

    mlp-8: eight dense layers (``width`` hidden units) with ReLU between.
    cnn-small: four 3x3 conv layers (two of them stride 2) and a two-layer head.
    resnet-toy: dense stem, two residual blocks of two dense layers, dense head.
    Inputs with more than one dimension are flattened for the dense presets.
    """
    input_shape = tuple(int(d) for d in input_shape)
    layers = []
    flat = int(np.prod(input_shape))
    if name != "cnn-small" and len(input_shape) > 1:
        layers.append(Flatten())

    if name == "mlp-8":
        dims = [flat] + [width] * 7
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [Dense(a, b), ReLU()]
        layers.append(Dense(width, classes))
    elif name == "cnn-small":
        if len(input_shape) != 3:
            raise ConfigError(f"cnn-small needs (C, H, W) input, got {input_shape}")
        c = input_shape[0]
        for cin, cout, stride in ((c, 4, 1), (4, 8, 2), (8, 8, 1), (8, 8, 2)):
            layers += [Conv2d(cin, cout, 3, stride=stride, padding=1), ReLU()]
        h, w = input_shape[1:]
        for stride in (1, 2, 1, 2):
            h, w = T.conv_output_size(h, 3, stride, 1), T.conv_output_size(w, 3, stride, 1)
        layers += [Flatten(), Dense(8 * h * w, 32), ReLU(), Dense(32, classes)]
    elif name == "resnet-toy":
        layers += [Dense(flat, width), ReLU()]
        for _ in range(2):
            start = len(layers)
            layers += [Dense(width, width), ReLU(), Dense(width, width), ResidualAdd(start), ReLU()]
        layers.append(Dense(width, classes))
    else:
        raise ConfigError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}")

    net = Network(layers, input_shape)
    net.init_params(seed)
    return net


# checkpoint file: magic, u32 layer count, then per parameterized layer
# u32 id, weight shape, weight data, bias shape, bias data (all little-endian)
CHECKPOINT_MAGIC = b"LDBCKPT1"


def _pack_array(a):
    head = struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f8").tobytes()


def checkpoint_bytes(net):
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(net.param_layer_ids))]
    for layer in net.param_layers:
        parts += [struct.pack("<I", layer.id), _pack_array(layer.weights), _pack_array(layer.bias)]
    return b"".join(parts)


def save_checkpoint(net, path):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(net))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def array(self, what):
        ndim = self.u32(f"{what} rank")
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim, f"{what} shape"))
        count = int(np.prod(shape))
        data = np.frombuffer(self.take(8 * count, f"{what} data"), dtype="<f8")
        return data.astype(np.float64).reshape(shape)


def read_checkpoint(buf):
    """Parse checkpoint bytes into ``{layer_id: (weights, bias)}``."""
    r = _Reader(buf)
    if r.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    count = r.u32("layer count")
    out = {}
    for _ in range(count):
        lid = r.u32("layer id")
        out[lid] = (r.array(f"layer {lid} weights"), r.array(f"layer {lid} bias"))
    if r.pos != len(buf):
        raise FormatError("trailing bytes after checkpoint", r.pos)
    return out


def load_checkpoint(net, path):
    """Load parameters saved by :func:`save_checkpoint` into ``net`` in place."""
    with open(path, "rb") as f:
        params = read_checkpoint(f.read())
    if sorted(params) != net.param_layer_ids:
        raise ShapeError(f"checkpoint layers {sorted(params)} do not match network {net.param_layer_ids}")
    for lid, (w, b) in params.items():
        layer = net.layers[lid]
        if w.shape != layer.weights.shape or b.shape != layer.bias.shape:
            raise ShapeError(f"layer {lid}: checkpoint shapes {w.shape}/{b.shape} do not match "
                             f"{layer.weights.shape}/{layer.bias.shape}")
        layer.weights = w
        layer.bias = b
        layer.weight_grad = layer.bias_grad = None
    return net
