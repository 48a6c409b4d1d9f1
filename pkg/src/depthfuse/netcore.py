"""Minimal reverse-mode differentiable layer set.

All math runs in float64: the gradient checks in the test suite demand
central finite differences at eps=1e-4, which float32 cannot support.
Layers follow the usual forward/backward contract: ``forward`` caches what
``backward`` needs, ``backward`` returns the input gradient and accumulates
parameter gradients into the layer's :class:`LayerParams`.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TrainingError, UsageError


class FeatureMap:
    """A rank-4 (batch, channel, height, width) tensor with a paired gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        data = np.ascontiguousarray(data, dtype=np.float64)
        if data.ndim != 4:
            raise ShapeError(f"FeatureMap needs a rank-4 array, got rank {data.ndim}")
        if not np.all(np.isfinite(data)):
            raise ShapeError("FeatureMap entries must be finite")
        self.data = data
        self.grad = np.zeros_like(data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad.fill(0.0)


def _data_of(x):
    if isinstance(x, FeatureMap):
        return x.data
    return np.asarray(x, dtype=np.float64)


@dataclass
class LayerParams:
    """Weights and bias of one layer plus their gradient buffers."""

    weights: np.ndarray
    bias: np.ndarray
    weight_grad: np.ndarray = field(default=None)
    bias_grad: np.ndarray = field(default=None)
    name: str = ""

    def __post_init__(self):
        if self.weight_grad is None:
            self.weight_grad = np.zeros_like(self.weights)
        if self.bias_grad is None:
            self.bias_grad = np.zeros_like(self.bias)
        if self.weight_grad.shape != self.weights.shape:
            raise ShapeError("weight_grad shape must mirror weights")
        if self.bias_grad.shape != self.bias.shape:
            raise ShapeError("bias_grad shape must mirror bias")

    def zero_grads(self):
        self.weight_grad.fill(0.0)
        self.bias_grad.fill(0.0)

    @property
    def size(self):
        return self.weights.size + self.bias.size


def kaiming_uniform(rng, shape, fan_in):
    """Kaiming-uniform fan-in init: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base layer. Subclasses implement forward/backward on float64 ndarrays."""

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def params(self):
        return []

    def _require_cache(self):
        if getattr(self, "_cache", None) is None:
            raise UsageError(f"{type(self).__name__}.backward called before forward")

    def __call__(self, x):
        return self.forward(x)


class Dense(Layer):
    """Fully-connected layer y = x W^T + b on (batch, features) inputs."""

    def __init__(self, in_dim, out_dim, rng=None, name="dense"):
        rng = rng or np.random.default_rng(0)
        w = kaiming_uniform(rng, (out_dim, in_dim), fan_in=in_dim)
        self.p = LayerParams(w, np.zeros(out_dim), name=name)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self._cache = None

    def forward(self, x):
        x = _data_of(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"{self.p.name}: expected (n, {self.in_dim}) input, got {x.shape}"
            )
        self._cache = x
        return x @ self.p.weights.T + self.p.bias

    def backward(self, dout):
        self._require_cache()
        x = self._cache
        dout = np.asarray(dout, dtype=np.float64)
        self.p.weight_grad += dout.T @ x
        self.p.bias_grad += dout.sum(axis=0)
        return dout @ self.p.weights

    def params(self):
        return [self.p]


class Conv2d(Layer):
    """2-D convolution, stride 1, zero-filled 'same' padding, odd kernel size."""

    def __init__(self, in_channels, out_channels, kernel_size=3, rng=None, name="conv"):
        if kernel_size % 2 != 1:
            raise ShapeError("same-padded conv requires an odd kernel size")
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        w = kaiming_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        self.p = LayerParams(w, np.zeros(out_channels), name=name)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self._cache = None

    def forward(self, x):
        x = _data_of(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"{self.p.name}: expected (n, {self.in_channels}, h, w) input, got {x.shape}"
            )
        n, c, h, w = x.shape
        k, pad = self.k, self.k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        # (n, c, h, w, k, k) -> (n, h*w, c*k*k)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, c * k * k)
        wmat = self.p.weights.reshape(self.out_channels, c * k * k)
        y = cols @ wmat.T + self.p.bias
        self._cache = (x.shape, cols)
        return y.transpose(0, 2, 1).reshape(n, self.out_channels, h, w)

    def backward(self, dout):
        self._require_cache()
        (n, c, h, w), cols = self._cache
        k, pad = self.k, self.k // 2
        dout = np.asarray(dout, dtype=np.float64)
        dyf = dout.reshape(n, self.out_channels, h * w).transpose(0, 2, 1)
        wmat = self.p.weights.reshape(self.out_channels, c * k * k)
        self.p.weight_grad += np.einsum("npo,npk->ok", dyf, cols).reshape(self.p.weights.shape)
        self.p.bias_grad += dout.sum(axis=(0, 2, 3))
        dcols = (dyf @ wmat).reshape(n, h, w, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki : ki + h, kj : kj + w] += dcols[..., ki, kj]
        return dxp[:, :, pad : pad + h, pad : pad + w]

    def params(self):
        return [self.p]


class ReLU(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x):
        x = _data_of(x)
        self._cache = x > 0
        return x * self._cache

    def backward(self, dout):
        self._require_cache()
        return np.asarray(dout, dtype=np.float64) * self._cache


class MaxPool2d(Layer):
    """Max pooling with window k and stride s; output dims use floor division."""

    def __init__(self, size=2, stride=None):
        self.k = size
        self.s = stride if stride is not None else size
        self._cache = None

    def forward(self, x):
        x = _data_of(x)
        n, c, h, w = x.shape
        k, s = self.k, self.s
        if h < k or w < k:
            raise ShapeError(f"pool window {k} larger than input {h}x{w}")
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
        win = win[:, :, ::s, ::s][:, :, :ho, :wo]
        flat = win.reshape(n, c, ho, wo, k * k)
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, arg)
        return y

    def backward(self, dout):
        self._require_cache()
        (n, c, h, w), arg = self._cache
        k, s = self.k, self.s
        ho, wo = arg.shape[2], arg.shape[3]
        dout = np.asarray(dout, dtype=np.float64)
        dx = np.zeros((n, c, h, w))
        ii, jj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        rows = ii[None, None] * s + arg // k
        cols = jj[None, None] * s + arg % k
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(dx, (np.broadcast_to(nn, arg.shape), np.broadcast_to(cc, arg.shape), rows, cols), dout)
        return dx


class Softmax(Layer):
    """Softmax over a given axis with the exact Jacobian-vector backward."""

    def __init__(self, axis=-1):
        self.axis = axis
        self._cache = None

    def forward(self, x):
        x = _data_of(x)
        shifted = x - x.max(axis=self.axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=self.axis, keepdims=True)
        self._cache = y
        return y

    def backward(self, dout):
        self._require_cache()
        y = self._cache
        dout = np.asarray(dout, dtype=np.float64)
        dot = (dout * y).sum(axis=self.axis, keepdims=True)
        return y * (dout - dot)


class Flatten(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x):
        x = _data_of(x)
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        self._require_cache()
        return np.asarray(dout, dtype=np.float64).reshape(self._cache)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out


def sgd_step(params, lr, weight_decay=0.0):
    """w <- w - lr*(grad + wd*w) for every tensor; gradients are zeroed afterwards.

    Raises TrainingError with a per-tensor diagnostic when a gradient is non-finite.
    """
    params = list(params)
    for p in params:
        for label, g in (("weight", p.weight_grad), ("bias", p.bias_grad)):
            if not np.all(np.isfinite(g)):
                bad = np.abs(g[~np.isfinite(g)])
                raise TrainingError(
                    f"non-finite {label} gradient in layer '{p.name or '?'}' "
                    f"({np.count_nonzero(~np.isfinite(g))} bad entries, e.g. {g.flat[np.argmax(~np.isfinite(g).ravel())]})"
                )
    for p in params:
        p.weights -= lr * (p.weight_grad + weight_decay * p.weights)
        p.bias -= lr * (p.bias_grad + weight_decay * p.bias)
        p.zero_grads()


class StepDecay:
    """lr(epoch) = initial * factor**(epoch // every). Defaults mirror the
    reference schedule: decay by 0.4 every 5 epochs."""

    def __init__(self, initial, factor=0.4, every=5):
        self.initial = float(initial)
        self.factor = float(factor)
        self.every = int(every)

    def __call__(self, epoch):
        return self.initial * self.factor ** (epoch // self.every)


def zero_all_grads(params):
    for p in params:
        p.zero_grads()


def named_param_tensors(named_layers):
    """Flatten [(name, layer), ...] into an ordered {tensor_name: array} dict."""
    out = {}
    for name, layer in named_layers:
        for i, p in enumerate(layer.params()):
            stem = f"{name}{i}" if len(layer.params()) > 1 else name
            out[f"{stem}.weights"] = p.weights
            out[f"{stem}.bias"] = p.bias
    return out


def save_checkpoint(path, tensors):
    """Write tensors as a text manifest (one `name dims...` line each) followed
    by the concatenated little-endian float64 data in manifest order."""
    with open(path, "wb") as fh:
        fh.write(f"tensors {len(tensors)}\n".encode("ascii"))
        for name, arr in tensors.items():
            if " " in name or "\n" in name:
                raise ValueError(f"tensor name {name!r} may not contain whitespace")
            dims = " ".join(str(d) for d in np.shape(arr))
            fh.write(f"{name} {dims}".rstrip().encode("ascii") + b"\n")
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    from .errors import ParseError

    with open(path, "rb") as fh:
        blob = fh.read()
    pos = blob.find(b"\n")
    if pos < 0 or not blob[:pos].startswith(b"tensors "):
        raise ParseError("checkpoint must start with a 'tensors N' line", offset=0)
    try:
        count = int(blob[8:pos])
    except ValueError:
        raise ParseError("unreadable tensor count", offset=8) from None
    specs = []
    cursor = pos + 1
    for _ in range(count):
        end = blob.find(b"\n", cursor)
        if end < 0:
            raise ParseError("truncated manifest", offset=cursor)
        parts = blob[cursor:end].decode("ascii").split()
        if not parts:
            raise ParseError("empty manifest line", offset=cursor)
        specs.append((parts[0], tuple(int(d) for d in parts[1:])))
        cursor = end + 1
    out = {}
    for name, shape in specs:
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        chunk = blob[cursor : cursor + nbytes]
        if len(chunk) != nbytes:
            raise ParseError(f"truncated data for tensor {name!r}", offset=cursor)
        out[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        cursor += nbytes
    return out
