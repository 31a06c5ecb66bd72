"""Small sequential CNN kernel: conv, max-pool and dense layers with exact
backprop, plain SGD and a little-endian weight file.

Tensors are float32 numpy arrays laid out (H, W, C).  Dense layers accept a
vector or a (N, in_dim) matrix; anything else is flattened.
"""
import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

ACTIVATIONS = ("identity", "relu", "leaky_relu", "sigmoid")
LEAKY_SLOPE = 0.1

WEIGHT_MAGIC = b"FTW1"
WEIGHT_VERSION = 1
_TAG_CONV, _TAG_DENSE, _TAG_POOL = 1, 2, 3


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class WeightFileError(ValueError):
    pass


def as_tensor(x):
    """Coerce to a float32 (H, W, C) tensor; 2-D input gets a channel axis."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ShapeError(f"tensor must be rank 3 (H, W, C), got shape {x.shape}")
    return x


def activate(z, kind):
    if kind == "identity":
        return z
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "leaky_relu":
        return np.where(z > 0, z, z * DTYPE(LEAKY_SLOPE))
    if kind == "sigmoid":
        return sigmoid(z)
    raise ValueError(f"unknown activation {kind!r}")


def activate_grad(z, kind):
    """Derivative of the activation evaluated at pre-activation z."""
    if kind == "identity":
        return np.ones_like(z)
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "leaky_relu":
        return np.where(z > 0, 1, LEAKY_SLOPE).astype(z.dtype)
    if kind == "sigmoid":
        s = sigmoid(z)
        return s * (1 - s)
    raise ValueError(f"unknown activation {kind!r}")


def sigmoid(z):
    z = np.asarray(z)
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.result_type(z.dtype, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def glorot_uniform(rng, shape, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape).astype(DTYPE)


def conv_output_size(n, kernel, stride, padding):
    return (n + 2 * padding - kernel) // stride + 1


def _im2col(x, kh, kw, stride):
    """(H, W, C) -> (Ho, Wo, kh, kw, C) strided view of receptive fields."""
    win = sliding_window_view(x, (kh, kw), axis=(0, 1))  # (Ho', Wo', C, kh, kw)
    win = win[::stride, ::stride]
    return win.transpose(0, 1, 3, 4, 2)


def _col2im(cols, in_shape, kh, kw, stride):
    """Scatter-add (Ho, Wo, kh, kw, C) patches back onto an (H, W, C) grid."""
    out = np.zeros(in_shape, dtype=cols.dtype)
    ho, wo = cols.shape[:2]
    for i in range(kh):
        for j in range(kw):
            out[i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    return out


class ConvLayer:
    """2-D cross-correlation + bias + activation.

    With ``depthwise_separable`` the k x k filter is factored into a per-channel
    depthwise kernel (kh, kw, C_in) followed by a 1x1 pointwise mix (C_in, C_out).
    """

    kind = "conv"

    def __init__(self, kernel_h, kernel_w, in_channels, out_channels, stride=1, padding=0,
                 activation="identity", depthwise_separable=False, rng=None):
        if min(kernel_h, kernel_w, in_channels, out_channels, stride) < 1 or padding < 0:
            raise ShapeError("conv layer sizes must be positive (padding nonnegative)")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.kernel_h, self.kernel_w = kernel_h, kernel_w
        self.in_channels, self.out_channels = in_channels, out_channels
        self.stride, self.padding = stride, padding
        self.activation = activation
        self.depthwise_separable = bool(depthwise_separable)
        rng = rng if rng is not None else np.random.default_rng(0)
        k = kernel_h * kernel_w
        if self.depthwise_separable:
            self.params = {
                "depthwise": glorot_uniform(rng, (kernel_h, kernel_w, in_channels), k, k),
                "pointwise": glorot_uniform(rng, (in_channels, out_channels), in_channels, out_channels),
                "b": np.zeros(out_channels, dtype=DTYPE),
            }
        else:
            self.params = {
                "W": glorot_uniform(rng, (kernel_h, kernel_w, in_channels, out_channels),
                                    k * in_channels, k * out_channels),
                "b": np.zeros(out_channels, dtype=DTYPE),
            }
        self._cache = None

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} channels, got {c}")
        ho = conv_output_size(h, self.kernel_h, self.stride, self.padding)
        wo = conv_output_size(w, self.kernel_w, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for {self.kernel_h}x{self.kernel_w} kernel")
        return (ho, wo, self.out_channels)

    def _pad(self, x):
        p = self.padding
        if p == 0:
            return x
        return np.pad(x, ((p, p), (p, p), (0, 0)))

    def forward(self, x):
        x = as_tensor(x)
        self.output_shape(x.shape)
        xp = self._pad(x)
        cols = _im2col(xp, self.kernel_h, self.kernel_w, self.stride)
        if self.depthwise_separable:
            dw = np.einsum("hwijc,ijc->hwc", cols, self.params["depthwise"], optimize=True)
            z = dw @ self.params["pointwise"] + self.params["b"]
        else:
            dw = None
            ho, wo = cols.shape[:2]
            flat = cols.reshape(ho * wo, -1)
            z = (flat @ self.params["W"].reshape(-1, self.out_channels)).reshape(ho, wo, -1)
            z += self.params["b"]
        z = z.astype(DTYPE, copy=False)
        self._cache = (x.shape, xp.shape, cols, dw, z)
        return activate(z, self.activation)

    def backward(self, grad_out):
        if self._cache is None:
            raise StateError("conv backward called before forward")
        in_shape, pad_shape, cols, dw, z = self._cache
        gz = (grad_out * activate_grad(z, self.activation)).astype(DTYPE)
        ho, wo = gz.shape[:2]
        grads = {"b": gz.sum(axis=(0, 1))}
        if self.depthwise_separable:
            grads["pointwise"] = dw.reshape(ho * wo, -1).T @ gz.reshape(ho * wo, -1)
            gdw = gz @ self.params["pointwise"].T  # (ho, wo, C_in)
            grads["depthwise"] = np.einsum("hwijc,hwc->ijc", cols, gdw, optimize=True)
            gcols = gdw[:, :, None, None, :] * self.params["depthwise"][None, None]
        else:
            k = self.kernel_h * self.kernel_w * self.in_channels
            flat = cols.reshape(ho * wo, k)
            g2 = gz.reshape(ho * wo, -1)
            grads["W"] = (flat.T @ g2).reshape(self.params["W"].shape)
            gcols = (g2 @ self.params["W"].reshape(k, -1).T).reshape(
                ho, wo, self.kernel_h, self.kernel_w, self.in_channels)
        gxp = _col2im(gcols.astype(DTYPE), pad_shape, self.kernel_h, self.kernel_w, self.stride)
        p = self.padding
        gx = gxp[p:p + in_shape[0], p:p + in_shape[1]] if p else gxp
        return {k: v.astype(DTYPE) for k, v in grads.items()}, gx


class MaxPoolLayer:
    kind = "pool"

    def __init__(self, window, stride=None):
        self.window = int(window)
        self.stride = int(stride if stride is not None else window)
        if self.window < 1 or self.stride < 1:
            raise ShapeError("pool window and stride must be positive")
        self.params = {}
        self._cache = None

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if self.window > h or self.window > w:
            raise ShapeError(f"pool window {self.window} larger than input {h}x{w}")
        return ((h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1, c)

    def forward(self, x):
        x = as_tensor(x)
        self.output_shape(x.shape)
        cols = _im2col(x, self.window, self.window, self.stride)
        ho, wo, _, _, c = cols.shape
        flat = cols.reshape(ho, wo, self.window * self.window, c)
        idx = flat.argmax(axis=2)
        self._cache = (x.shape, idx)
        return np.take_along_axis(flat, idx[:, :, None, :], axis=2)[:, :, 0, :]

    def backward(self, grad_out):
        if self._cache is None:
            raise StateError("pool backward called before forward")
        in_shape, idx = self._cache
        ho, wo, c = grad_out.shape
        k = self.window
        gcols = np.zeros((ho, wo, k * k, c), dtype=DTYPE)
        np.put_along_axis(gcols, idx[:, :, None, :], grad_out[:, :, None, :].astype(DTYPE), axis=2)
        gx = _col2im(gcols.reshape(ho, wo, k, k, c), in_shape, k, k, self.stride)
        return {}, gx


class DenseLayer:
    kind = "dense"

    def __init__(self, in_dim, out_dim, activation="identity", rng=None):
        if in_dim < 1 or out_dim < 1:
            raise ShapeError("dense layer sizes must be positive")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "W": glorot_uniform(rng, (in_dim, out_dim), in_dim, out_dim),
            "b": np.zeros(out_dim, dtype=DTYPE),
        }
        self._cache = None

    def output_shape(self, in_shape):
        n = int(np.prod(in_shape)) if len(in_shape) != 2 else in_shape[1]
        if n != self.in_dim:
            raise ShapeError(f"dense expects {self.in_dim} inputs, got {n}")
        return (in_shape[0], self.out_dim) if len(in_shape) == 2 else (self.out_dim,)

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        in_shape = x.shape
        x2 = x if x.ndim == 2 else x.reshape(1, -1)
        if x2.shape[1] != self.in_dim:
            raise ShapeError(f"dense expects {self.in_dim} inputs, got {x2.shape[1]}")
        z = x2 @ self.params["W"] + self.params["b"]
        self._cache = (in_shape, x2, z)
        y = activate(z, self.activation)
        return y if x.ndim == 2 else y[0]

    def backward(self, grad_out):
        if self._cache is None:
            raise StateError("dense backward called before forward")
        in_shape, x2, z = self._cache
        g = np.asarray(grad_out, dtype=DTYPE).reshape(z.shape)
        gz = g * activate_grad(z, self.activation)
        grads = {"W": (x2.T @ gz).astype(DTYPE), "b": gz.sum(axis=0).astype(DTYPE)}
        gx = (gz @ self.params["W"].T).reshape(in_shape)
        return grads, gx


def dense_forward(layer, x):
    return layer.forward(x)


def conv2d_forward(layer, x):
    return layer.forward(x)


def max_pool(x, window, stride=None):
    return MaxPoolLayer(window, stride).forward(x)


class Network:
    """Ordered list of layers; forward caches activations for ``backward``."""

    def __init__(self, layers, seed=None):
        self.layers = list(layers)
        self.seed = seed
        self.activations = []
        self._forward_done = False

    @classmethod
    def from_spec(cls, spec, seed=0):
        """Build from a list of layer dicts (see ``Config`` for the format)."""
        rng = np.random.default_rng(seed)
        layers = []
        for d in spec:
            d = dict(d)
            kind = d.pop("type")
            if kind == "conv":
                k = d.pop("kernel")
                layers.append(ConvLayer(k, k, d.pop("in_channels"), d.pop("out_channels"),
                                        stride=d.pop("stride", 1), padding=d.pop("padding", 0),
                                        activation=d.pop("activation", "identity"),
                                        depthwise_separable=d.pop("depthwise_separable", False),
                                        rng=rng))
            elif kind == "pool":
                layers.append(MaxPoolLayer(d.pop("window"), d.pop("stride", None)))
            elif kind == "dense":
                layers.append(DenseLayer(d.pop("in_dim"), d.pop("out_dim"),
                                         activation=d.pop("activation", "identity"), rng=rng))
            else:
                raise ValueError(f"unknown layer type {kind!r}")
            if d:
                raise ValueError(f"unknown keys for {kind} layer: {sorted(d)}")
        return cls(layers, seed=seed)

    @property
    def parameter_count(self):
        return sum(p.size for layer in self.layers for p in layer.params.values())

    def output_shape(self, in_shape):
        shape = tuple(in_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def forward(self, x):
        self.activations = []
        for layer in self.layers:
            x = layer.forward(x)
            self.activations.append(x)
        self._forward_done = True
        return x

    def backward(self, upstream_grad):
        """Returns (per-layer parameter gradients, gradient w.r.t. the input)."""
        if not self._forward_done:
            raise StateError("backward called without a cached forward pass")
        grads = [None] * len(self.layers)
        g = upstream_grad
        for i in range(len(self.layers) - 1, -1, -1):
            grads[i], g = self.layers[i].backward(g)
        return grads, g

    def zero_grads(self):
        return [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in self.layers]

    def parameter_vector(self):
        parts = [v.ravel() for layer in self.layers for _, v in sorted(layer.params.items())]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=DTYPE)


def sgd_step(net, grads, learning_rate):
    """In-place θ ← θ − lr·g.  Validates every gradient before touching any weight."""
    if len(grads) != len(net.layers):
        raise ShapeError("gradient list does not match layer count")
    for i, (layer, g) in enumerate(zip(net.layers, grads)):
        for k, p in layer.params.items():
            if g[k].shape != p.shape:
                raise ShapeError(f"layer {i} gradient {k} has shape {g[k].shape}, expected {p.shape}")
            if not np.all(np.isfinite(g[k])):
                raise TrainingError(f"non-finite gradient in layer {i} ({k})", layer_index=i)
    lr = DTYPE(learning_rate)
    for layer, g in zip(net.layers, grads):
        for k in layer.params:
            layer.params[k] -= lr * g[k]
    return net


# -- weight file ---------------------------------------------------------------

def _conv_param_order(layer):
    return ("depthwise", "pointwise", "b") if layer.depthwise_separable else ("W", "b")


def write_weights(fh, layers):
    fh.write(WEIGHT_MAGIC)
    fh.write(struct.pack("<II", WEIGHT_VERSION, len(layers)))
    for layer in layers:
        if layer.kind == "conv":
            fh.write(struct.pack("<B", _TAG_CONV))
            fh.write(struct.pack("<8I", layer.kernel_h, layer.kernel_w, layer.in_channels,
                                 layer.out_channels, layer.stride, layer.padding,
                                 ACTIVATIONS.index(layer.activation), int(layer.depthwise_separable)))
            order = _conv_param_order(layer)
        elif layer.kind == "dense":
            fh.write(struct.pack("<B", _TAG_DENSE))
            fh.write(struct.pack("<3I", layer.in_dim, layer.out_dim, ACTIVATIONS.index(layer.activation)))
            order = ("W", "b")
        else:
            fh.write(struct.pack("<B", _TAG_POOL))
            fh.write(struct.pack("<2I", layer.window, layer.stride))
            order = ()
        for k in order:
            fh.write(np.ascontiguousarray(layer.params[k], dtype="<f4").tobytes())


def _read_exact(fh, n):
    b = fh.read(n)
    if len(b) != n:
        raise WeightFileError("truncated weight file")
    return b


def read_weights(fh):
    """Parse a weight file into a list of freshly built layers."""
    if _read_exact(fh, 4) != WEIGHT_MAGIC:
        raise WeightFileError("bad magic: not a weight file")
    version, count = struct.unpack("<II", _read_exact(fh, 8))
    if version != WEIGHT_VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    layers = []
    for _ in range(count):
        (tag,) = struct.unpack("<B", _read_exact(fh, 1))
        if tag == _TAG_CONV:
            kh, kw, cin, cout, stride, pad, act, ds = struct.unpack("<8I", _read_exact(fh, 32))
            if act >= len(ACTIVATIONS):
                raise WeightFileError(f"bad activation code {act}")
            layer = ConvLayer(kh, kw, cin, cout, stride, pad, ACTIVATIONS[act], bool(ds))
            order = _conv_param_order(layer)
        elif tag == _TAG_DENSE:
            din, dout, act = struct.unpack("<3I", _read_exact(fh, 12))
            if act >= len(ACTIVATIONS):
                raise WeightFileError(f"bad activation code {act}")
            layer = DenseLayer(din, dout, ACTIVATIONS[act])
            order = ("W", "b")
        elif tag == _TAG_POOL:
            window, stride = struct.unpack("<2I", _read_exact(fh, 8))
            layer = MaxPoolLayer(window, stride)
            order = ()
        else:
            raise WeightFileError(f"unknown layer tag {tag}")
        for k in order:
            shape = layer.params[k].shape
            n = int(np.prod(shape))
            raw = np.frombuffer(_read_exact(fh, 4 * n), dtype="<f4")
            layer.params[k] = raw.astype(DTYPE).reshape(shape)
        layers.append(layer)
    if fh.read(1):
        raise WeightFileError("trailing bytes after last layer")
    return layers
