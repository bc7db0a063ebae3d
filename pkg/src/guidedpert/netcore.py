"""Feed-forward CNN: layers, forward evaluation with caching, reverse mode.

All layer math runs on batches shaped ``[N, ...]``. The public functions
(`forward`, `backward_from_seed`, ...) also accept a single unbatched sample
whose shape equals ``net.input_shape`` and return unbatched results for it.

Conventions:
  * zero padding for convolutions,
  * max-pool windows that do not fit are dropped (floor division),
  * max-pool gradient goes to the first (row-major) maximal element,
  * bilinear upsampling uses the align-corners-false sampling grid.
"""
from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE

INPUT = "INPUT"

KINDS = ("conv2d", "maxpool2d", "relu", "linear", "bilinear_upsample", "flatten")


class Layer:
    kind = None
    param_names = ()

    def __init__(self, name):
        self.name = name
        self.params = {}

    def config(self):
        """Integer hyper-parameters, in a fixed order (used by serialization)."""
        return []

    def out_shape(self, in_shape):
        raise NotImplementedError

    def forward(self, x):
        """Return ``(y, cache)`` for a batch ``x``."""
        raise NotImplementedError

    def backward(self, g, x, cache, want_params=False, want_input=True):
        """Return ``(dx, param_grads)``; ``param_grads`` is {} unless requested."""
        raise NotImplementedError

    def __repr__(self):
        cfg = ",".join(str(c) for c in self.config())
        return f"{self.kind}[{self.name}]({cfg})"


class Conv2d(Layer):
    kind = "conv2d"
    param_names = ("weight", "bias")

    def __init__(self, name, weight, bias, stride=1, padding=0):
        super().__init__(name)
        weight = np.ascontiguousarray(weight, dtype=DTYPE)
        bias = np.ascontiguousarray(bias, dtype=DTYPE)
        if weight.ndim != 4 or bias.shape != (weight.shape[0],):
            raise ValueError(f"{name}: bad conv parameter shapes {weight.shape}, {bias.shape}")
        self.params = {"weight": weight, "bias": bias}
        self.stride = int(stride)
        self.padding = int(padding)

    def config(self):
        return [self.stride, self.padding]

    def out_shape(self, in_shape):
        c, h, w = in_shape
        o, ci, kh, kw = self.params["weight"].shape
        if c != ci:
            raise ValueError(f"{self.name}: expects {ci} input channels, got {c}")
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"{self.name}: input {in_shape} smaller than kernel")
        return (o, ho, wo)

    def _columns(self, x):
        """im2col: contiguous [N, Ho, Wo, C*kh*kw] patch matrix."""
        p, s = self.padding, self.stride
        kh, kw = self.params["weight"].shape[2:]
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)

    def forward(self, x):
        W, b = self.params["weight"], self.params["bias"]
        cols = self._columns(x)
        y = cols @ W.reshape(W.shape[0], -1).T  # [N, Ho, Wo, O]
        y += b
        return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), cols

    def backward(self, g, x, cols, want_params=False, want_input=True):
        W = self.params["weight"]
        o, c, kh, kw = W.shape
        n, _, ho, wo = g.shape
        p, s = self.padding, self.stride
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        grads = {}
        if want_params:
            if cols is None:
                cols = self._columns(x)
            grads["weight"] = (gt.T @ cols.reshape(-1, c * kh * kw)).reshape(W.shape)
            grads["bias"] = gt.sum(axis=0)
        if not want_input:
            return None, grads
        dcols = (gt @ W.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
        hp, wp = x.shape[2] + 2 * p, x.shape[3] + 2 * p
        gxp = np.zeros((n, c, hp, wp), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:hp - p, p:wp - p] if p else gxp
        return np.ascontiguousarray(gx), grads


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __init__(self, name, window=2, stride=None):
        super().__init__(name)
        self.window = int(window)
        self.stride = int(stride if stride is not None else window)

    def config(self):
        return [self.window, self.stride]

    def out_shape(self, in_shape):
        c, h, w = in_shape
        k, s = self.window, self.stride
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"{self.name}: input {in_shape} smaller than pool window")
        return (c, ho, wo)

    def forward(self, x):
        k, s = self.window, self.stride
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = win.reshape(win.shape[:4] + (k * k,))
        idx = np.argmax(flat, axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return np.ascontiguousarray(y), idx

    def backward(self, g, x, idx, want_params=False, want_input=True):
        k, s = self.window, self.stride
        _, _, ho, wo = g.shape
        gx = np.zeros_like(x)
        for p in range(k * k):
            i, j = divmod(p, k)
            gx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += np.where(idx == p, g, 0.0)
        return gx, {}


class ReLU(Layer):
    kind = "relu"

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        return np.maximum(x, 0.0), None

    def backward(self, g, x, cache, want_params=False, want_input=True):
        return np.where(x > 0, g, 0.0), {}


class Linear(Layer):
    kind = "linear"
    param_names = ("weight", "bias")

    def __init__(self, name, weight, bias):
        super().__init__(name)
        weight = np.ascontiguousarray(weight, dtype=DTYPE)
        bias = np.ascontiguousarray(bias, dtype=DTYPE)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ValueError(f"{name}: bad linear parameter shapes {weight.shape}, {bias.shape}")
        self.params = {"weight": weight, "bias": bias}

    def out_shape(self, in_shape):
        out, inp = self.params["weight"].shape
        if tuple(in_shape) != (inp,):
            raise ValueError(f"{self.name}: expects input ({inp},), got {tuple(in_shape)}")
        return (out,)

    def forward(self, x):
        return x @ self.params["weight"].T + self.params["bias"], None

    def backward(self, g, x, cache, want_params=False, want_input=True):
        grads = {}
        if want_params:
            grads["weight"] = g.T @ x
            grads["bias"] = g.sum(axis=0)
        return g @ self.params["weight"], grads


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), None

    def backward(self, g, x, cache, want_params=False, want_input=True):
        return g.reshape(x.shape), {}


def bilinear_matrix(n_in, n_out):
    """Row-stochastic [n_out, n_in] interpolation matrix, align-corners-false."""
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


class BilinearUpsample(Layer):
    kind = "bilinear_upsample"

    def __init__(self, name, out_h, out_w):
        super().__init__(name)
        self.out_h = int(out_h)
        self.out_w = int(out_w)
        self._mats = {}

    def config(self):
        return [self.out_h, self.out_w]

    def out_shape(self, in_shape):
        c, _, _ = in_shape
        return (c, self.out_h, self.out_w)

    def _matrices(self, h, w):
        key = (h, w)
        if key not in self._mats:
            self._mats[key] = (bilinear_matrix(h, self.out_h), bilinear_matrix(w, self.out_w))
        return self._mats[key]

    def forward(self, x):
        mh, mw = self._matrices(x.shape[2], x.shape[3])
        y = np.matmul(np.matmul(mh, x), mw.T)
        return y, None

    def backward(self, g, x, cache, want_params=False, want_input=True):
        mh, mw = self._matrices(x.shape[2], x.shape[3])
        return np.matmul(np.matmul(mh.T, g), mw), {}


@dataclass
class Network:
    layers: list
    input_shape: tuple
    num_classes: int
    channel_mean: np.ndarray = None
    shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        if INPUT in names:
            raise ValueError(f"{INPUT!r} is reserved")
        if self.channel_mean is None:
            self.channel_mean = np.zeros(self.input_shape[0] if len(self.input_shape) == 3 else 1)
        self.channel_mean = np.asarray(self.channel_mean, dtype=DTYPE)
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = tuple(layer.out_shape(shape))
            self.shapes.append(shape)
        out = self.shapes[-1]
        if out[0] != self.num_classes:
            raise ValueError(f"final layer yields {out}, expected {self.num_classes} class channels")

    @property
    def output_shape(self):
        return self.shapes[-1]

    @property
    def dense(self):
        """True for per-position labeling nets ([C_out, H, W] scores)."""
        return len(self.output_shape) == 3

    def index(self, name):
        if name == INPUT:
            return -1
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(f"unknown layer {name!r}")

    def layer(self, name):
        return self.layers[self.index(name)]

    def activation_shape(self, name):
        """Shape of the output of ``name`` (or of the input for INPUT)."""
        return self.shapes[self.index(name) + 1]

    def next_layer(self, name):
        """Name of the layer consuming the output of ``name``; None after the last."""
        i = self.index(name) + 1
        return self.layers[i].name if i < len(self.layers) else None

    def param_count(self):
        return sum(p.size for l in self.layers for p in l.params.values())


@dataclass
class ForwardTrace:
    """Per-layer inputs/outputs of one forward call, keyed by layer name."""
    inputs: dict
    outputs: dict
    caches: dict
    scores: np.ndarray
    batched: bool


@dataclass
class GradientBundle:
    input_grad: np.ndarray
    param_grads: dict = None


def _batch(net, x, shape):
    x = np.asarray(x, dtype=DTYPE)
    if x.shape == tuple(shape):
        return x[None], False
    if x.ndim == len(shape) + 1 and x.shape[1:] == tuple(shape):
        return x, True
    raise ValueError(f"expected shape {tuple(shape)} (optionally batched), got {x.shape}")


def _run(net, start, x, batched):
    inputs, outputs, caches = {}, {}, {}
    for layer in net.layers[start:]:
        y, cache = layer.forward(x)
        inputs[layer.name] = x
        outputs[layer.name] = y
        caches[layer.name] = cache
        x = y
    scores = x if batched else x[0]
    return ForwardTrace(inputs, outputs, caches, scores, batched)


def forward(net, x):
    """Evaluate ``net`` on ``x``; return ``(scores, trace)``. Scores are pre-softmax."""
    xb, batched = _batch(net, x, net.input_shape)
    trace = _run(net, 0, xb, batched)
    return trace.scores, trace


def forward_from(net, layer, activation, return_trace=False):
    """Re-enter ``net`` at ``layer`` with ``activation`` as that layer's input.

    ``layer`` may be None (past the last layer), in which case the activation
    is returned as the scores.
    """
    if layer is None:
        scores = np.asarray(activation, dtype=DTYPE)
        return (scores, None) if return_trace else scores
    i = net.index(layer)
    if i < 0:
        scores, trace = forward(net, activation)
        return (scores, trace) if return_trace else scores
    ab, batched = _batch(net, activation, net.shapes[i])
    trace = _run(net, i, ab, batched)
    return (trace.scores, trace) if return_trace else trace.scores


def _backward(net, trace, g, stop_index, want_params, want_input=True):
    param_grads = {}
    for k in range(len(net.layers) - 1, stop_index, -1):
        layer = net.layers[k]
        if layer.name not in trace.inputs:
            raise ValueError(f"trace has no entry for layer {layer.name!r}")
        last = k == stop_index + 1 and not want_input
        g, pg = layer.backward(g, trace.inputs[layer.name], trace.caches[layer.name], want_params,
                               want_input=not last)
        if want_params and pg:
            param_grads[layer.name] = pg
    return g, param_grads


def backward_from_seed(net, trace, seed, stop_layer=INPUT):
    """Vector-Jacobian product of the scores with ``seed``.

    Returns d(scores . seed)/d(activation), where the activation is the
    network input for INPUT, or the output of ``stop_layer`` otherwise.
    """
    stop = net.index(stop_layer)
    seed = np.asarray(seed, dtype=DTYPE)
    if seed.shape != trace.scores.shape:
        raise ValueError(f"seed shape {seed.shape} != scores shape {trace.scores.shape}")
    g = seed if trace.batched else seed[None]
    g, _ = _backward(net, trace, g, stop, False)
    return GradientBundle(g if trace.batched else g[0])


def backward_params(net, trace, loss_grad, input_grad=True):
    """Parameter (and, unless ``input_grad`` is False, input) gradients given dL/dscores."""
    loss_grad = np.asarray(loss_grad, dtype=DTYPE)
    if loss_grad.shape != trace.scores.shape:
        raise ValueError(f"loss gradient shape {loss_grad.shape} != scores shape {trace.scores.shape}")
    g = loss_grad if trace.batched else loss_grad[None]
    g, pg = _backward(net, trace, g, -1, True, input_grad)
    if g is not None and not trace.batched:
        g = g[0]
    return GradientBundle(g, pg)


def softmax(z, axis=None):
    """Softmax over the class axis (0 for unbatched maps/vectors).

    For batched input pass ``axis=1``.
    """
    z = np.asarray(z, dtype=DTYPE)
    if axis is None:
        axis = 0
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def predict(net, x, batch_size=64):
    """Argmax class labels for a batch of inputs, evaluated in chunks."""
    x = np.asarray(x, dtype=DTYPE)
    out = []
    for i in range(0, len(x), batch_size):
        scores, _ = forward(net, x[i:i + batch_size])
        out.append(np.argmax(scores, axis=1))
    return np.concatenate(out)


def clone(net):
    """Deep copy of a network's parameters (layers are rebuilt)."""
    from .modelio import layer_from_parts
    layers = [layer_from_parts(l.kind, l.name, l.config(), {k: v.copy() for k, v in l.params.items()})
              for l in net.layers]
    return Network(layers, net.input_shape, net.num_classes, net.channel_mean.copy())


def numeric_input_grad(net, x, seed, step=1e-5):
    """Central finite differences of ``scores . seed`` with respect to ``x``."""
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(np.sum(forward(net, x)[0] * seed))
        flat[i] = orig - step
        fm = float(np.sum(forward(net, x)[0] * seed))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad
