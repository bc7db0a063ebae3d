"""Nearest-neighbour guided perturbation for classifiers.

Context for a single test image comes from its nearest training samples in
feature space: each neighbour's class becomes a one-hot pseudo label, the
resulting sign-gradients are averaged with the neighbour weights and added to
the test image.
"""
from dataclasses import dataclass

import numpy as np

from .gp import one_hot, softmax_seed_gradient
from .netcore import backward_from_seed, forward, forward_from, softmax
from .tensor import DTYPE


@dataclass
class FeatureIndex:
    features: np.ndarray  # [n, dim]
    labels: np.ndarray  # [n]
    ids: list
    feature_layer: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ValueError("features, labels and ids must have matching lengths")
        self._sq = np.einsum("ij,ij->i", self.features, self.features)

    def __len__(self):
        return len(self.labels)


@dataclass
class NeighborSet:
    indices: np.ndarray
    labels: np.ndarray
    distances: np.ndarray  # squared euclidean, ascending
    weights: np.ndarray


def default_feature_layer(net):
    """Name of the layer feeding the final classifier layer."""
    if len(net.layers) < 2:
        raise ValueError("network too shallow for a feature layer")
    return net.layers[-2].name


def extract_features(net, images, feature_layer, batch_size=500):
    net.index(feature_layer)  # raises on unknown layer
    images = np.asarray(images, dtype=DTYPE)
    out = []
    for i in range(0, len(images), batch_size):
        _, trace = forward(net, images[i:i + batch_size])
        act = trace.outputs[feature_layer]
        out.append(act.reshape(len(act), -1))
    return np.concatenate(out)


def build_index(net, images, labels, feature_layer=None, ids=None, batch_size=500):
    if len(images) == 0:
        raise ValueError("empty training set")
    feature_layer = feature_layer or default_feature_layer(net)
    feats = extract_features(net, images, feature_layer, batch_size)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(images))]
    return FeatureIndex(feats, labels, ids, feature_layer)


def query_batch(index, features, k, chunk=256):
    """k nearest entries for each row of ``features``: (indices, sq. distances), ascending.

    Exact exhaustive search. Ties in distance resolve to the lower index.
    """
    if k < 1 or k > len(index):
        raise ValueError(f"k={k} outside [1, {len(index)}]")
    features = np.atleast_2d(np.asarray(features, dtype=DTYPE))
    all_idx, all_d = [], []
    for s in range(0, len(features), chunk):
        q = features[s:s + chunk]
        d = index._sq[None, :] - 2.0 * q @ index.features.T + np.einsum("ij,ij->i", q, q)[:, None]
        np.maximum(d, 0.0, out=d)
        part = np.argpartition(d, k - 1, axis=1)[:, :k] if k < len(index) else np.tile(np.arange(len(index)), (len(q), 1))
        # recompute exact distances for the candidates and order them stably
        diff = index.features[part] - q[:, None, :]
        dd = np.einsum("bkd,bkd->bk", diff, diff)
        order = np.lexsort((part, dd), axis=1)
        all_idx.append(np.take_along_axis(part, order, axis=1))
        all_d.append(np.take_along_axis(dd, order, axis=1))
    return np.concatenate(all_idx), np.concatenate(all_d)


def query(index, feature, k, weights=None):
    idx, dist = query_batch(index, np.asarray(feature).reshape(1, -1), k)
    w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=DTYPE)
    if w.shape != (k,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be k non-negative values summing to 1")
    return NeighborSet(idx[0], index.labels[idx[0]], dist[0], w)


def neighbor_sign_sum(net, x, neighbor_labels, weights, train_images=None, neighbor_indices=None):
    """Sum over neighbours of ``w_i * sign(grad)`` for a batch of test images.

    ``neighbor_labels`` is [B, k]. By default the gradient for neighbour i is
    taken at the test image with pseudo label ``nn_i``. If ``train_images``
    and ``neighbor_indices`` are given, it is taken at the neighbour image
    itself (the formula's literal reading).
    """
    x = np.asarray(x, dtype=DTYPE)
    labels = np.asarray(neighbor_labels)
    b, k = labels.shape
    c = net.num_classes
    total = np.zeros_like(x)
    if train_images is None:
        scores, trace = forward(net, x)
        y = softmax(scores, axis=1)
        for i in range(k):
            seed = softmax_seed_gradient(y, one_hot(labels[:, i], c, axis=1), axis=1)
            g = backward_from_seed(net, trace, seed).input_grad
            total += weights[i] * np.sign(g)
        return total
    for i in range(k):
        xi = np.asarray(train_images)[np.asarray(neighbor_indices)[:, i]]
        scores, trace = forward(net, xi)
        y = softmax(scores, axis=1)
        seed = softmax_seed_gradient(y, one_hot(labels[:, i], c, axis=1), axis=1)
        total += weights[i] * np.sign(backward_from_seed(net, trace, seed).input_grad)
    return total


@dataclass
class KnnReport:
    label_before: int
    label_after: int
    neighbors: NeighborSet
    perturbation: np.ndarray


def classify_with_gp(net, x, index, k=3, epsilon=0.0, weights=None, train_images=None):
    """Classify one image after a neighbour-guided perturbation; returns (label, report)."""
    x = np.asarray(x, dtype=DTYPE)
    scores, trace = forward(net, x)
    feat = trace.outputs[index.feature_layer].reshape(-1)
    nbrs = query(index, feat, k, weights)
    if train_images is not None:
        signs = neighbor_sign_sum(net, x[None], nbrs.labels[None], nbrs.weights,
                                  train_images, nbrs.indices[None])[0]
    else:
        signs = neighbor_sign_sum(net, x[None], nbrs.labels[None], nbrs.weights)[0]
    delta = epsilon * signs
    after = forward(net, x + delta)[0]
    before_label, after_label = int(np.argmax(scores)), int(np.argmax(after))
    return after_label, KnnReport(before_label, after_label, nbrs, delta)


def knn_gp_batch(net, images, index, k=3, weights=None, batch_size=500, train_images=None):
    """Baseline predictions, neighbours and weighted sign sums for many images.

    Returns ``(pred_before [N], neighbor_idx [N, k], signs [N, ...])``; the
    perturbed image for any epsilon is ``images + epsilon * signs``.
    """
    images = np.asarray(images, dtype=DTYPE)
    w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=DTYPE)
    preds, nbr_idx, signs = [], [], []
    for s in range(0, len(images), batch_size):
        xb = images[s:s + batch_size]
        scores, trace = forward(net, xb)
        preds.append(np.argmax(scores, axis=1))
        feats = trace.outputs[index.feature_layer].reshape(len(xb), -1)
        idx, _ = query_batch(index, feats, k)
        nbr_idx.append(idx)
        if train_images is None:
            signs.append(neighbor_sign_sum(net, xb, index.labels[idx], w))
        else:
            signs.append(neighbor_sign_sum(net, xb, index.labels[idx], w, train_images, idx))
    return np.concatenate(preds), np.concatenate(nbr_idx), np.concatenate(signs)


def predict_perturbed(net, images, signs, epsilon, batch_size=500):
    out = []
    for s in range(0, len(images), batch_size):
        scores = forward(net, images[s:s + batch_size] + epsilon * signs[s:s + batch_size])[0]
        out.append(np.argmax(scores, axis=1))
    return np.concatenate(out)
