"""Baseline models: the MNIST/CIFAR classifiers and the toy FCN, plus SGD training."""
import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from .netcore import (BilinearUpsample, Conv2d, Flatten, Linear, MaxPool2d, Network, ReLU,
                      backward_params, forward, softmax)
from .tensor import DTYPE

log = logging.getLogger(__name__)

ARCHS = ("mnist_20_50_500_10", "cifar_64x2_128x4_10", "toyfcn")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    arch: str = "mnist_20_50_500_10"
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 4
    seed: int = 1
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if min(self.lr, self.batch_size, self.epochs) <= 0 or self.momentum < 0:
            raise ValueError("hyper-parameters must be positive")

    def as_dict(self):
        return asdict(self)


# per-architecture defaults used by the command line
ARCH_DEFAULTS = {
    "mnist_20_50_500_10": dict(lr=0.01, batch_size=64, epochs=4, weight_decay=5e-4),
    "cifar_64x2_128x4_10": dict(lr=0.01, batch_size=64, epochs=10, weight_decay=5e-4),
    "toyfcn": dict(lr=0.05, batch_size=16, epochs=25, weight_decay=1e-4),
}
ALIASES = {"mnist": "mnist_20_50_500_10", "cifar": "cifar_64x2_128x4_10"}


def default_config(arch, **overrides):
    arch = ALIASES.get(arch, arch)
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}")
    kw = dict(ARCH_DEFAULTS[arch])
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(arch=arch, **kw)


def _init(rng, shape, fan_in):
    # variance 1/fan_in ("xavier" in Caffe's fan-in form)
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def conv(rng, name, c_in, c_out, k, stride=1, padding=0):
    w = _init(rng, (c_out, c_in, k, k), c_in * k * k)
    return Conv2d(name, w, np.zeros(c_out), stride=stride, padding=padding)


def linear(rng, name, d_in, d_out):
    return Linear(name, _init(rng, (d_out, d_in), d_in), np.zeros(d_out))


def build_arch(arch, seed=0, input_shape=None, num_classes=None, channel_mean=None):
    """Construct an untrained network for one of ``ARCHS``.

    mnist_20_50_500_10: 5x5 convs (no padding) with 2x2 max-pool, 1x28x28 input.
    cifar_64x2_128x4_10: 3x3 padded convs, pools after conv2 and conv4, 3x32x32 input.
    toyfcn: three conv/relu/pool stages, a 1x1 score conv and a bilinear
    upsample back to input size (default 3x64x64 input, 4 classes).
    """
    arch = ALIASES.get(arch, arch)
    rng = np.random.default_rng(seed)
    if arch == "mnist_20_50_500_10":
        input_shape = input_shape or (1, 28, 28)
        num_classes = num_classes or 10
        c, h, w = input_shape
        hf, wf = ((h - 4) // 2 - 4) // 2, ((w - 4) // 2 - 4) // 2
        layers = [
            conv(rng, "conv1", c, 20, 5), MaxPool2d("pool1", 2),
            conv(rng, "conv2", 20, 50, 5), MaxPool2d("pool2", 2),
            Flatten("flatten"),
            linear(rng, "ip1", 50 * hf * wf, 500), ReLU("relu1"),
            linear(rng, "ip2", 500, num_classes),
        ]
    elif arch == "cifar_64x2_128x4_10":
        # five 3x3 convs (64-64-128-128-128) then two fully connected layers (128-10)
        input_shape = input_shape or (3, 32, 32)
        num_classes = num_classes or 10
        c, h, w = input_shape
        layers = [
            conv(rng, "conv1", c, 64, 3, padding=1), ReLU("relu1"),
            conv(rng, "conv2", 64, 64, 3, padding=1), ReLU("relu2"), MaxPool2d("pool1", 2),
            conv(rng, "conv3", 64, 128, 3, padding=1), ReLU("relu3"),
            conv(rng, "conv4", 128, 128, 3, padding=1), ReLU("relu4"), MaxPool2d("pool2", 2),
            conv(rng, "conv5", 128, 128, 3, padding=1), ReLU("relu5"), MaxPool2d("pool3", 2),
            Flatten("flatten"),
            linear(rng, "fc1", 128 * (h // 8) * (w // 8), 128), ReLU("relu6"),
            linear(rng, "fc2", 128, num_classes),
        ]
    elif arch == "toyfcn":
        input_shape = input_shape or (3, 64, 64)
        num_classes = num_classes or 4
        c, h, w = input_shape
        layers = [
            conv(rng, "conv1", c, 16, 3, padding=1), ReLU("relu1"), MaxPool2d("pool1", 2),
            conv(rng, "conv2", 16, 32, 3, padding=1), ReLU("relu2"), MaxPool2d("pool2", 2),
            conv(rng, "conv3", 32, 32, 3, padding=1), ReLU("relu3"), MaxPool2d("pool3", 2),
            conv(rng, "score", 32, num_classes, 1),
            BilinearUpsample("upscore", h, w),
        ]
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    return Network(layers, input_shape, num_classes, channel_mean)


def cross_entropy(scores, targets, ignore_label=None):
    """Mean softmax cross-entropy over samples (and pixels) plus dL/dscores.

    ``scores`` is [N, C] or [N, C, H, W]; ``targets`` is [N] or [N, H, W].
    """
    p = softmax(scores, axis=1)
    t = np.asarray(targets)
    valid = np.ones(t.shape, dtype=bool) if ignore_label is None else t != ignore_label
    count = max(int(valid.sum()), 1)
    tt = np.where(valid, t, 0)
    picked = np.take_along_axis(p, tt[:, None], axis=1)[:, 0]
    loss = -np.sum(np.log(np.maximum(picked, 1e-300)) * valid) / count
    grad = p.copy()
    np.put_along_axis(grad, tt[:, None], np.take_along_axis(grad, tt[:, None], axis=1) - 1.0, axis=1)
    grad *= valid[:, None] / count
    return loss, grad


def evaluate_loss(net, images, targets, batch_size=100):
    total, n = 0.0, len(images)
    for i in range(0, n, batch_size):
        scores, _ = forward(net, images[i:i + batch_size])
        loss, _ = cross_entropy(scores, targets[i:i + batch_size])
        total += loss * len(scores)
    return total / n


def train(net, images, targets, cfg, heldout=None, metric=None, on_epoch=None):
    """Minibatch SGD with momentum; updates ``net`` in place.

    ``heldout`` is an optional ``(images, targets)`` pair scored each epoch by
    ``metric(net, images, targets)``. Returns a list of per-epoch dicts.
    """
    images = np.asarray(images, dtype=DTYPE)
    targets = np.asarray(targets)
    rng = np.random.default_rng(cfg.seed)
    velocity = {(l.name, k): np.zeros_like(v) for l in net.layers for k, v in l.params.items()}
    history = []
    n = len(images)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        running, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            scores, trace = forward(net, images[idx])
            loss, grad = cross_entropy(scores, targets[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            bundle = backward_params(net, trace, grad, input_grad=False)
            for layer in net.layers:
                for k, p in layer.params.items():
                    g = bundle.param_grads[layer.name][k]
                    if cfg.weight_decay and k == "weight":
                        g = g + cfg.weight_decay * p
                    v = velocity[(layer.name, k)]
                    v *= cfg.momentum
                    v -= cfg.lr * g
                    p += v
            running += loss * len(idx)
            seen += len(idx)
        row = {"epoch": epoch, "train_loss": running / seen, "seconds": time.perf_counter() - t0}
        if heldout is not None and metric is not None:
            row["heldout_metric"] = metric(net, *heldout)
        log.info("epoch %d %s", epoch, row)
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return history
