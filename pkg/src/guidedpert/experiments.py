"""Dataset resolution and the evaluation loops shared by the CLI and the acceptance suite."""
import hashlib
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import datasets
from .gp import PerturbConfig, direction, refine, reforward
from .knn import build_index, knn_gp_batch, predict_perturbed
from .metrics import ConfusionMatrix, accuracy, flip_analysis
from .netcore import INPUT, forward

# frozen toy benchmark
SYNTHETIC_SPLITS = {"train": (1, 1000), "val": (2, 200), "test": (2, 200)}
SYNTHETIC_DEFAULTS = dict(size=64, num_classes=4)

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DatasetError(Exception):
    pass


@dataclass
class Data:
    images: np.ndarray  # mean-subtracted
    labels: np.ndarray
    dense: bool
    num_classes: int
    mean: np.ndarray
    source: str
    fingerprint: str = ""

    def __post_init__(self):
        if not self.fingerprint:
            self.fingerprint = datasets.fingerprint(self.images, self.labels)

    def __len__(self):
        return len(self.labels)

    @property
    def ids(self):
        return [f"{self.source}-{i}" for i in range(len(self))]


def _find(directory, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = os.path.join(directory, name)
        if os.path.exists(p):
            return p
    raise DatasetError(f"{stem} not found in {directory}")


def _parse_synthetic(spec):
    """``synthetic`` or ``synthetic:key=value,...`` -> generator keyword overrides."""
    opts = {}
    _, _, rest = spec.partition(":")
    for item in filter(None, rest.split(",")):
        key, _, value = item.partition("=")
        if key not in ("seed", "count", "size", "num_classes", "noise"):
            raise DatasetError(f"unknown synthetic option {key!r}")
        opts[key] = float(value) if key == "noise" else int(value)
    return opts


def load_data(spec, split, mean=None, count=None):
    """Resolve a ``--dataset`` value for one split.

    ``spec`` is ``synthetic[:k=v,...]`` (the seeded toy benchmark), a directory
    of MNIST IDX files, or an ``.npz`` file holding raw ``images``/``labels``
    (plus optionally ``test_images``/``test_labels``). Images are centred
    with ``mean`` when given, else with their own per-channel mean.
    """
    if spec.startswith("synthetic"):
        opts = _parse_synthetic(spec)
        seed, n = SYNTHETIC_SPLITS[split]
        if "seed" in opts:  # train uses seed, held-out splits seed + 1
            seed = opts.pop("seed") + (split != "train")
        n = opts.pop("count", count or n)
        kw = dict(SYNTHETIC_DEFAULTS, **opts)
        images, labels = datasets.gen_synthetic_raw(seed, n, **kw)
        dense, num_classes = True, kw["num_classes"]
        source = f"syn{seed}"
    elif os.path.isdir(spec):
        img, lab = MNIST_FILES["test" if split in ("val", "test") else "train"]
        raw = datasets.read_idx(_find(spec, img), datasets.IDX_IMAGES_MAGIC)
        labels = datasets.read_idx(_find(spec, lab), datasets.IDX_LABELS_MAGIC).astype(np.int64)
        if len(raw) != len(labels):
            raise DatasetError(f"{len(raw)} images but {len(labels)} labels")
        images = raw.astype(np.float64)[:, None] / 255.0
        dense, num_classes, source = False, 10, f"mnist-{split}"
    elif spec.endswith(".npz") and os.path.isfile(spec):
        with np.load(spec) as z:
            prefix = "test_" if split in ("val", "test") and "test_images" in z else ""
            images = z[prefix + "images"].astype(np.float64)
            labels = z[prefix + "labels"].astype(np.int64)
        dense = labels.ndim == 3
        valid = labels[labels != datasets.IGNORE_LABEL]
        num_classes = int(valid.max()) + 1
        source = os.path.basename(spec)[:-4] + f"-{split}"
    else:
        raise DatasetError(f"dataset not found: {spec}")
    if count is not None:
        images, labels = images[:count], labels[:count]
    if mean is None:
        mean = images.mean(axis=(0, 2, 3))
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    images -= mean.reshape(1, -1, 1, 1)
    return Data(images, labels, dense, num_classes, mean, source)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def check_compatible(net, data):
    if tuple(data.images.shape[1:]) != tuple(net.input_shape):
        raise ValueError(f"model expects input {net.input_shape}, dataset has {data.images.shape[1:]}")
    if net.dense != data.dense:
        raise ValueError("model and dataset disagree on dense vs image-level labels")


@dataclass
class Scores:
    """Score of a set of predictions: mIoU + pixel accuracy, or accuracy."""
    primary: float
    accuracy: float
    confusion: ConfusionMatrix = None


def score(data, preds):
    if data.dense:
        cm = ConfusionMatrix(data.num_classes).accumulate(data.labels, preds, datasets.IGNORE_LABEL)
        return Scores(cm.mean_iou(), cm.pixel_accuracy(), cm)
    acc = accuracy(preds, data.labels)
    return Scores(acc, acc)


@dataclass
class EvalResult:
    baseline: Scores
    refined: Scores
    per_iteration: list
    corrected: int
    corrupted: int
    timings: dict = field(default_factory=dict)  # seconds per image


def predict_all(net, images, batch_size):
    out = []
    for s in range(0, len(images), batch_size):
        out.append(np.argmax(forward(net, images[s:s + batch_size])[0], axis=1))
    return np.concatenate(out)


def evaluate(net, data, cfg, batch_size=50):
    """Baseline and guided-perturbation scores over a whole dataset."""
    n = len(data)
    t0 = time.perf_counter()
    base = predict_all(net, data.images, batch_size)
    t_base = time.perf_counter() - t0
    iters = [[] for _ in range(cfg.iterations)]
    phases = {"forward": 0.0, "backward": 0.0, "reforward": 0.0}
    for s in range(0, n, batch_size):
        sl = slice(s, s + batch_size)
        gt = data.labels[sl] if cfg.variant == "ground_truth_oracle" else None
        rep = refine(net, data.images[sl], PerturbConfig(cfg.epsilon, cfg.variant, cfg.iterations, cfg.truncate_at,
                                                         cfg.rng_seed + s), gt)
        for i, p in enumerate(rep.per_iteration):
            iters[i].append(p)
        for k in phases:
            phases[k] += rep.timings[k]
    preds = [np.concatenate(p) for p in iters]
    cor, corr = flip_analysis(base, preds[-1], data.labels)
    if data.dense:
        keep = data.labels != datasets.IGNORE_LABEL
        cor, corr = cor & keep, corr & keep
    timings = {"baseline": t_base / n, **{k: v / n for k, v in phases.items()}}
    timings["gp_total"] = (phases["forward"] + phases["backward"] + phases["reforward"]) / n
    return EvalResult(score(data, base), score(data, preds[-1]), [score(data, p).primary for p in preds],
                      int(cor.sum()), int(corr.sum()), timings)


def sweep(net, data, eps_grid, variant="gp_onehot", truncate_at=INPUT, seed=0, batch_size=50):
    """Score for each epsilon of a single-iteration perturbation.

    The sign-gradient does not depend on epsilon, so it is computed once per
    batch and reused across the grid. Returns (baseline Scores, [Scores]).
    """
    cfg = PerturbConfig(0.0, variant, 1, truncate_at, seed)
    preds = {e: [] for e in eps_grid}
    base = []
    for s in range(0, len(data), batch_size):
        sl = slice(s, s + batch_size)
        gt = data.labels[sl] if variant == "ground_truth_oracle" else None
        before, origin, step = direction(net, data.images[sl], PerturbConfig(0.0, variant, 1, truncate_at, seed + s), gt)
        base.append(before)
        for e in eps_grid:
            preds[e].append(np.argmax(reforward(net, origin + e * step, cfg.truncate_at), axis=1))
    return score(data, np.concatenate(base)), [score(data, np.concatenate(preds[e])) for e in eps_grid]


def time_refinement(net, images, truncate_at, epsilon, repeats=3, batch_size=50):
    """Best-of-``repeats`` wall time per image of one refinement pass (forward, backward, re-forward)."""
    best = np.inf
    cfg = PerturbConfig(epsilon, "gp_onehot", 1, truncate_at)
    for _ in range(repeats):
        t0 = time.perf_counter()
        for s in range(0, len(images), batch_size):
            refine(net, images[s:s + batch_size], cfg)
        best = min(best, time.perf_counter() - t0)
    return best / len(images)


def eps_grid(spec):
    """``lo:hi:step`` or a comma list -> sorted unique epsilons, rounded to 1e-9."""
    if ":" in spec:
        lo, hi, step = (float(v) for v in spec.split(":"))
        if step <= 0 or hi < lo:
            raise ValueError(f"bad grid {spec!r}")
        n = int(round((hi - lo) / step))
        vals = [lo + i * step for i in range(n + 1)]
    else:
        vals = [float(v) for v in spec.split(",") if v.strip()]
    vals = sorted({round(v, 9) + 0.0 for v in vals})
    if not vals:
        raise ValueError("empty epsilon grid")
    return vals


@dataclass
class KnnSweep:
    baseline: float
    rows: list  # (eps, accuracy, corrected, corrupted)
    corrected_ids: dict  # eps -> list of sample indices


def knn_sweep(net, index, data, k, grid, weights=None, train_images=None):
    before, _, signs = knn_gp_batch(net, data.images, index, k, weights, train_images=train_images)
    base = accuracy(before, data.labels)
    rows, ids = [], {}
    for e in grid:
        after = predict_perturbed(net, data.images, signs, e)
        cor, corr = flip_analysis(before, after, data.labels)
        rows.append((e, accuracy(after, data.labels), int(cor.sum()), int(corr.sum())))
        ids[e] = np.flatnonzero(cor).tolist()
    return KnnSweep(base, rows, ids)


def make_index(net, data, feature_layer=None):
    return build_index(net, data.images, data.labels, feature_layer, ids=data.ids)
