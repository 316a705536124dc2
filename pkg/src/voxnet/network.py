"""Layer graph with forward evaluation, reverse-mode gradients and persistence.

A :class:`Network` is a linear chain of layers ending in a single
:class:`SoftmaxOutput`. Residual blocks keep their skip connection internal,
so the chain never branches at the network level.
"""

import copy
import struct
from collections import OrderedDict

import numpy as np

from . import ops
from .errors import ConfigError, DataError, ShapeError, StateError, TruncationError, VersionError

MODEL_MAGIC = b"VOX3D\x00"
MODEL_VERSION = 1
_HEADER = struct.Struct("<6sHQ")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def _fmt(t):
    return "x".join(str(v) for v in t)


class Layer:
    """Base layer: owns parameters, buffers, gradient slots and a forward cache."""

    kind = "layer"

    def __init__(self):
        self.params = OrderedDict()
        self.buffers = OrderedDict()
        self.grads = OrderedDict()
        self.cache = None

    def output_shape(self, shape):
        return shape

    def forward(self, x, mode, rng):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def spec_string(self):
        return self.kind

    def init(self, rng):
        pass

    def children(self):
        return []

    def clear_cache(self):
        self.cache = None
        for child in self.children():
            child.clear_cache()

    def _need_cache(self):
        if self.cache is None:
            raise StateError(f"{self.kind}: backward called without a cached train-mode forward")
        return self.cache

    def named_tensors(self, prefix, include_buffers=True):
        for name, arr in self.params.items():
            yield f"{prefix}{name}", arr
        if include_buffers:
            for name, arr in self.buffers.items():
                yield f"{prefix}{name}", arr
        for j, child in enumerate(self.children()):
            yield from child.named_tensors(f"{prefix}{j}.", include_buffers)

    def named_grads(self, prefix):
        for name, arr in self.grads.items():
            yield f"{prefix}{name}", arr
        for j, child in enumerate(self.children()):
            yield from child.named_grads(f"{prefix}{j}.")

    def astype(self, dtype):
        for store in (self.params, self.buffers):
            for name in store:
                store[name] = store[name].astype(dtype)
        for child in self.children():
            child.astype(dtype)


class Conv3D(Layer):
    kind = "conv3d"

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=1):
        super().__init__()
        self.spec = ops.ConvSpec(in_channels, out_channels, kernel, stride, padding)
        self.params["weight"] = np.zeros((out_channels, in_channels) + self.spec.kernel, np.float32)
        self.params["bias"] = np.zeros(out_channels, np.float32)

    def output_shape(self, shape):
        if len(shape) != 4 or shape[0] != self.spec.in_channels:
            raise ShapeError(f"conv3d expects [{self.spec.in_channels},D,H,W], got {list(shape)}", axis=1)
        return (self.spec.out_channels,) + self.spec.output_extents(shape[1:])

    def forward(self, x, mode, rng):
        if mode == "train":
            self.cache = x
        return ops.conv3d(x, self.params["weight"], self.params["bias"], self.spec)

    def backward(self, grad):
        x = self._need_cache()
        dx, dw, db = ops.conv3d_backward(x, self.params["weight"], grad, self.spec)
        self.grads["weight"], self.grads["bias"] = dw, db
        return dx

    def init(self, rng):
        w = self.params["weight"]
        fan_in = int(np.prod(w.shape[1:]))
        w[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w.shape)
        self.params["bias"][...] = 0

    def spec_string(self):
        s = self.spec
        return (f"conv3d({s.in_channels},{s.out_channels},k{_fmt(s.kernel)},"
                f"s{_fmt(s.stride)},p{_fmt(s.padding)})")


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, channels, momentum=ops.BN_MOMENTUM, epsilon=ops.BN_EPSILON):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.params["gamma"] = np.ones(channels, np.float32)
        self.params["beta"] = np.zeros(channels, np.float32)
        self.buffers["running_mean"] = np.zeros(channels, np.float32)
        self.buffers["running_var"] = np.ones(channels, np.float32)

    def output_shape(self, shape):
        if shape[0] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {shape[0]}", axis=1)
        return shape

    def forward(self, x, mode, rng):
        out, cache = ops.batchnorm(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            mode, self.momentum, self.epsilon,
        )
        if mode == "train":
            self.cache = cache
        return out

    def backward(self, grad):
        dx, dg, db = ops.batchnorm_backward(grad, self.params["gamma"], self._need_cache())
        self.grads["gamma"], self.grads["beta"] = dg, db
        return dx

    def init(self, rng):
        self.params["gamma"][...] = 1
        self.params["beta"][...] = 0
        self.buffers["running_mean"][...] = 0
        self.buffers["running_var"][...] = 1

    def spec_string(self):
        return f"batchnorm({self.channels},m{self.momentum!r},e{self.epsilon!r})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode, rng):
        if mode == "train":
            self.cache = x
        return ops.relu(x)

    def backward(self, grad):
        return ops.relu_backward(self._need_cache(), grad)


class MaxPool3D(Layer):
    kind = "maxpool3d"

    def __init__(self, window=2, stride=None):
        super().__init__()
        self.window = ops._triple(window)
        self.stride = self.window if stride is None else ops._triple(stride)

    def output_shape(self, shape):
        out = [shape[0]]
        for axis, (n, w, s) in enumerate(zip(shape[1:], self.window, self.stride)):
            if w > n:
                raise ConfigError(f"pooling window {w} exceeds extent {n} on spatial axis {axis}")
            out.append((n - w) // s + 1)
        return tuple(out)

    def forward(self, x, mode, rng):
        out, argmax = ops.maxpool3d(x, self.window, self.stride)
        if mode == "train":
            self.cache = (argmax, x.shape)
        return out

    def backward(self, grad):
        argmax, shape = self._need_cache()
        return ops.maxpool3d_backward(grad, argmax, shape)

    def spec_string(self):
        return f"maxpool3d(w{_fmt(self.window)},s{_fmt(self.stride)})"


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, mode, rng):
        if mode == "train":
            self.cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._need_cache())


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params["weight"] = np.zeros((out_features, in_features), np.float32)
        self.params["bias"] = np.zeros(out_features, np.float32)

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.in_features:
            raise ShapeError(f"dense expects [{self.in_features}] features, got {list(shape)}", axis=1)
        return (self.out_features,)

    def forward(self, x, mode, rng):
        if mode == "train":
            self.cache = x
        return ops.dense(x, self.params["weight"], self.params["bias"])

    def backward(self, grad):
        dx, dw, db = ops.dense_backward(self._need_cache(), self.params["weight"], grad)
        self.grads["weight"], self.grads["bias"] = dw, db
        return dx

    def init(self, rng):
        w = self.params["weight"]
        w[...] = rng.normal(0.0, np.sqrt(2.0 / self.in_features), size=w.shape)
        self.params["bias"][...] = 0

    def spec_string(self):
        return f"dense({self.in_features},{self.out_features})"


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p=0.5):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x, mode, rng):
        out, mask = ops.dropout(x, self.p, mode, rng)
        if mode == "train":
            self.cache = ("mask", mask)
        return out

    def backward(self, grad):
        _, mask = self._need_cache()
        return grad if mask is None else grad * mask

    def spec_string(self):
        return f"dropout({self.p!r})"


class VoxResBlock(Layer):
    """Pre-activation residual unit: ``x + conv(relu(bn(conv(relu(bn(x))))))``."""

    kind = "voxres_block"

    def __init__(self, channels, kernel=3):
        super().__init__()
        self.channels = channels
        pad = kernel // 2
        self.branch = [
            BatchNorm(channels),
            ReLU(),
            Conv3D(channels, channels, kernel, 1, pad),
            BatchNorm(channels),
            ReLU(),
            Conv3D(channels, channels, kernel, 1, pad),
        ]

    def children(self):
        return self.branch

    def output_shape(self, shape):
        out = shape
        for layer in self.branch:
            out = layer.output_shape(out)
        if tuple(out) != tuple(shape):
            raise ShapeError(f"voxres_block branch changes shape {list(shape)} -> {list(out)}")
        return shape

    def forward(self, x, mode, rng):
        h = x
        for layer in self.branch:
            h = layer.forward(h, mode, rng)
        if mode == "train":
            self.cache = True
        return x + h

    def backward(self, grad):
        self._need_cache()
        g = grad
        for layer in reversed(self.branch):
            g = layer.backward(g)
        return grad + g

    def init(self, rng):
        for layer in self.branch:
            layer.init(rng)

    def spec_string(self):
        return f"voxres_block({self.channels};" + ";".join(l.spec_string() for l in self.branch) + ")"


class SoftmaxOutput(Layer):
    """Terminal softmax; its gradient is fused with cross-entropy in :meth:`Network.backward`."""

    kind = "softmax_output"

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] < 2:
            raise ShapeError(f"softmax_output expects [k>=2] logits, got {list(shape)}")
        return shape

    def forward(self, x, mode, rng):
        return ops.softmax(x)


class Network:
    """Ordered layer chain with train/infer modes and a seeded dropout stream."""

    def __init__(self, layers, input_shape, rng_seed=0, mode="train", name="network", meta=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.name = name
        self.meta = dict(meta or {})
        self.mode = mode
        self.rng_seed = int(rng_seed)
        self.rng = np.random.default_rng(self.rng_seed)
        self._probs = None
        self.input_grad = None
        kinds = [layer.kind for layer in self.layers]
        if kinds.count("softmax_output") != 1 or kinds[-1] != "softmax_output":
            raise ConfigError("network must end in exactly one softmax_output layer")
        self.shapes = self.trace()

    # -- structure -------------------------------------------------------
    def trace(self):
        """Per-layer output shapes (batch axis excluded), validated end to end."""
        shapes = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = tuple(layer.output_shape(shape))
            except (ShapeError, ConfigError) as exc:
                raise type(exc)(f"layer {i} ({layer.kind}): {exc}") from exc
            shapes.append(shape)
        return shapes

    @property
    def num_classes(self):
        return self.shapes[-1][0]

    def spec_string(self):
        body = ";".join(layer.spec_string() for layer in self.layers)
        return f"input({_fmt(self.input_shape)});{body}"

    def arch_hash(self):
        return fnv1a64(self.spec_string().encode("utf-8"))

    def parameters(self):
        """Learnable tensors keyed by dotted name, in layer order (live arrays)."""
        return OrderedDict(
            kv for i, layer in enumerate(self.layers) for kv in layer.named_tensors(f"{i}.", False)
        )

    def state(self):
        """Parameters and buffers in serialization order."""
        return OrderedDict(
            kv for i, layer in enumerate(self.layers) for kv in layer.named_tensors(f"{i}.", True)
        )

    def num_params(self):
        return int(sum(p.size for p in self.parameters().values()))

    def reseed(self, seed=None):
        self.rng = np.random.default_rng(self.rng_seed if seed is None else seed)

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    @property
    def dtype(self):
        for arr in self.state().values():
            return arr.dtype
        return np.dtype(np.float32)

    def clear_cache(self):
        for layer in self.layers:
            layer.clear_cache()
        self._probs = None

    def copy(self):
        return copy.deepcopy(self)

    # -- evaluation ------------------------------------------------------
    def forward(self, x, mode=None):
        mode = self.mode if mode is None else mode
        if mode not in ("train", "infer"):
            raise ConfigError(f"unknown mode {mode!r}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        if x.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"input shape {list(x.shape)} does not match declared [b,{_fmt(self.input_shape)}]", axis=0
            )
        if mode == "infer":
            self._probs = None
        h = x
        for i, layer in enumerate(self.layers):
            try:
                h = layer.forward(h, mode, self.rng)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}", axis=i) from exc
        if mode == "train":
            self._probs = h
        return h

    def predict(self, x, batch_size=8):
        """Infer-mode class probabilities, evaluated in chunks."""
        x = np.asarray(x)
        out = [self.forward(x[s:s + batch_size], mode="infer") for s in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)

    def loss(self, labels):
        if self._probs is None:
            raise StateError("loss requires a cached train-mode forward")
        return ops.cross_entropy(self._probs, labels)

    def backward(self, labels):
        """Gradients of mean cross-entropy for every parameter, keyed like :meth:`parameters`."""
        if self._probs is None:
            raise StateError("backward called without a cached train-mode forward")
        probs = self._probs
        labels = np.asarray(labels, dtype=np.int64)
        b, k = probs.shape
        if labels.shape != (b,) or np.any(labels < 0) or np.any(labels >= k):
            raise ValueError(f"labels must be {b} ints in [0, {k})")
        g = probs.copy()
        g[np.arange(b), labels] -= 1
        g /= b
        for layer in reversed(self.layers[:-1]):
            g = layer.backward(g)
        self.input_grad = g
        grads = OrderedDict()
        for i, layer in enumerate(self.layers):
            grads.update(layer.named_grads(f"{i}."))
        return grads


def init_params(net, seed):
    """He-normal conv/dense weights, zero biases, unit gamma; deterministic from ``seed``."""
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        layer.init(rng)
    return net


def num_params(net):
    return net.num_params()


def save(net, path):
    """Write parameters and buffers (little-endian f32) behind a magic/version/hash header."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, net.arch_hash()))
        for arr in net.state().values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load(path, template):
    """Read a model file into a copy of ``template`` (which fixes the architecture)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise TruncationError(f"{path}: file shorter than model header")
    magic, version, arch = _HEADER.unpack_from(blob)
    if magic != MODEL_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise VersionError(f"{path}: unsupported model format version {version}")
    if arch != template.arch_hash():
        raise VersionError(
            f"{path}: architecture hash {arch:016x} does not match expected {template.arch_hash():016x}"
        )
    net = template.copy()
    net.astype(np.float32)
    offset = _HEADER.size
    for name, arr in net.state().items():
        nbytes = arr.size * 4
        if offset + nbytes > len(blob):
            raise TruncationError(f"{path}: truncated while reading {name}")
        arr[...] = np.frombuffer(blob, dtype="<f4", count=arr.size, offset=offset).reshape(arr.shape)
        offset += nbytes
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes")
    net.clear_cache()
    return net
