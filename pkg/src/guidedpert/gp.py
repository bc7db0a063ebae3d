"""Guided perturbation: prediction-seeded input (or activation) perturbation.

One refinement iteration:
  1. forward the current input, softmax the scores into ``y``;
  2. build a pseudo label ``l`` from ``y`` and backpropagate the seed
     ``(l . y)(l - y)`` from the pre-softmax scores down to the
     perturbation point;
  3. add ``epsilon * sign(gradient)`` there and forward again.

With a one-hot ``l`` the seed is ``y_k (e_k - y)``, the Jacobian of ``y_k``
with respect to the scores, so positive epsilon moves the input towards the
labeled class.
"""
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .netcore import INPUT, backward_from_seed, forward, forward_from, softmax
from .tensor import DTYPE

VARIANTS = ("gp_onehot", "random_onehot", "uniform_label", "top2_label", "ground_truth_oracle")


@dataclass
class PerturbConfig:
    epsilon: float = 0.0
    variant: str = "gp_onehot"
    iterations: int = 1
    truncate_at: str = INPUT
    rng_seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if int(self.iterations) < 1:
            raise ValueError("iterations must be >= 1")
        self.iterations = int(self.iterations)
        self.epsilon = float(self.epsilon)


@dataclass
class RefinementReport:
    prediction_before: np.ndarray
    prediction_after: np.ndarray
    per_iteration: list
    timings: dict
    perturbation: np.ndarray
    scores_after: np.ndarray = field(default=None, repr=False)


def one_hot(labels, num_classes, axis=0):
    """One-hot probabilities with the class axis inserted at ``axis``."""
    labels = np.asarray(labels)
    eye = np.eye(num_classes, dtype=DTYPE)[labels]  # class axis last
    return np.moveaxis(eye, -1, axis)


def make_pseudo_label(probs, variant, rng=None, ground_truth=None, axis=0, ignore_label=255):
    """Pseudo label distribution built from predicted ``probs``.

    ``axis`` is the class axis. ``random_onehot`` draws one class per
    position in row-major order from ``rng``. For ``ground_truth_oracle``
    positions marked ``ignore_label`` reuse ``probs`` (which zeroes their seed).
    """
    probs = np.asarray(probs, dtype=DTYPE)
    c = probs.shape[axis]
    if variant == "gp_onehot":
        return one_hot(tensor.argmax_channel(probs, axis=axis), c, axis)
    if variant == "uniform_label":
        return np.full_like(probs, 1.0 / c)
    if variant == "top2_label":
        if c < 2:
            raise ValueError("top2_label needs at least 2 classes")
        moved = np.moveaxis(probs, axis, -1)
        top = np.argsort(-moved, axis=-1, kind="stable")[..., :2]
        out = np.zeros_like(moved)
        np.put_along_axis(out, top, 0.5, axis=-1)
        return np.moveaxis(out, -1, axis)
    if variant == "random_onehot":
        if rng is None:
            raise ValueError("random_onehot needs an rng")
        shape = np.delete(np.array(probs.shape), axis)
        return one_hot(rng.integers(0, c, size=tuple(shape)), c, axis)
    if variant == "ground_truth_oracle":
        if ground_truth is None:
            raise ValueError("ground_truth_oracle needs ground truth labels")
        gt = np.asarray(ground_truth)
        void = gt == ignore_label
        label = one_hot(np.where(void, 0, gt), c, axis)
        if void.any():
            label = np.where(np.expand_dims(void, axis), probs, label)
        return label
    raise ValueError(f"unknown variant {variant!r}")


def softmax_seed_gradient(y, l, axis=0):
    """``(l . y)(l - y)`` per position: the score-space seed for the backward pass."""
    y = np.asarray(y, dtype=DTYPE)
    l = np.asarray(l, dtype=DTYPE)
    if y.shape != l.shape:
        raise ValueError(f"shape mismatch: y {y.shape} vs l {l.shape}")
    return np.sum(l * y, axis=axis, keepdims=True) * (l - y)


def perturb(x, grad, epsilon):
    """``x + epsilon * sign(grad)``; ``x`` is not modified."""
    return tensor.axpy(epsilon, tensor.sign(grad), x)


def refine(net, x, cfg, ground_truth=None):
    """Run ``cfg.iterations`` guided-perturbation steps on ``x`` (one sample or a batch)."""
    if (cfg.variant == "ground_truth_oracle") != (ground_truth is not None):
        raise ValueError("ground_truth is required exactly when variant == 'ground_truth_oracle'")
    x = np.asarray(x, dtype=DTYPE)
    batched = x.ndim == len(net.input_shape) + 1
    xb = x if batched else x[None]
    gt = None
    if ground_truth is not None:
        gt = np.asarray(ground_truth)
        gt = gt if batched else gt[None]
    rng = np.random.default_rng(cfg.rng_seed)
    resume = net.next_layer(cfg.truncate_at) if cfg.truncate_at != INPUT else None

    timings = {"forward": 0.0, "backward": 0.0, "reforward": 0.0}
    t0 = time.perf_counter()
    scores, trace = forward(net, xb)
    timings["forward"] = time.perf_counter() - t0
    origin = xb if cfg.truncate_at == INPUT else trace.outputs[cfg.truncate_at]
    act = origin
    before = np.argmax(scores, axis=1)
    per_iteration = []
    for _ in range(cfg.iterations):
        t0 = time.perf_counter()
        y = softmax(scores, axis=1)
        label = make_pseudo_label(y, cfg.variant, rng, gt, axis=1)
        seed = softmax_seed_gradient(y, label, axis=1)
        if resume is None and cfg.truncate_at != INPUT:
            grad = seed  # perturbing the scores themselves
        else:
            grad = backward_from_seed(net, trace, seed, cfg.truncate_at).input_grad
        timings["backward"] += time.perf_counter() - t0
        t0 = time.perf_counter()
        act = perturb(act, grad, cfg.epsilon)
        if cfg.truncate_at == INPUT:
            scores, trace = forward(net, act)
        else:
            scores, trace = forward_from(net, resume, act, return_trace=True)
        timings["reforward"] += time.perf_counter() - t0
        pred = np.argmax(scores, axis=1)
        per_iteration.append(pred if batched else pred[0])
    delta = act - origin
    unb = (lambda a: a) if batched else (lambda a: a[0])
    return RefinementReport(unb(before), per_iteration[-1], per_iteration, timings, unb(delta), unb(scores))


def direction(net, x, cfg, ground_truth=None):
    """One-iteration perturbation direction for a batch, independent of epsilon.

    Returns ``(pred_before, origin, step)`` where ``origin`` is the activation
    at ``cfg.truncate_at`` and ``step = sign(gradient)``; the refined scores for
    any epsilon are ``reforward(net, origin + epsilon * step, cfg.truncate_at)``.
    """
    if (cfg.variant == "ground_truth_oracle") != (ground_truth is not None):
        raise ValueError("ground_truth is required exactly when variant == 'ground_truth_oracle'")
    scores, trace = forward(net, np.asarray(x, dtype=DTYPE))
    y = softmax(scores, axis=1)
    label = make_pseudo_label(y, cfg.variant, np.random.default_rng(cfg.rng_seed), ground_truth, axis=1)
    grad = backward_from_seed(net, trace, softmax_seed_gradient(y, label, axis=1), cfg.truncate_at).input_grad
    origin = x if cfg.truncate_at == INPUT else trace.outputs[cfg.truncate_at]
    return np.argmax(scores, axis=1), origin, tensor.sign(grad)


def reforward(net, activation, truncate_at=INPUT):
    if truncate_at == INPUT:
        return forward(net, activation)[0]
    return forward_from(net, net.next_layer(truncate_at), activation)
