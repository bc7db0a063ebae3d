"""MNIST (IDX) ingestion and a seeded synthetic shape-segmentation dataset."""
import gzip
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IGNORE_LABEL = 255


class IDXFormatError(ValueError):
    pass


@dataclass
class ClsSample:
    image: np.ndarray
    label: int
    id: str


@dataclass
class SegSample:
    image: np.ndarray
    labels: np.ndarray
    id: str


def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path, expect_magic):
    """Read a raw (or gzipped) IDX file of unsigned bytes into a uint8 array."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 8:
        raise IDXFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expect_magic:
        raise IDXFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IDXFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) - header != count:
        raise IDXFormatError(f"{path}: payload has {len(data) - header} bytes, header declares {count}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array as an IDX file (magic 0x0803 for 3-d, 0x0801 for 1-d, ...)."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | a.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(f">I{a.ndim}I", magic, *a.shape))
        fh.write(a.tobytes())


def load_mnist_arrays(images_path, labels_path, mean=None):
    """Return ``(images [N,1,28,28] float64, labels [N] int64, mean)``.

    Pixels are scaled to [0, 1] and the mean pixel value is subtracted
    (computed from these images unless ``mean`` is given).
    """
    raw = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if raw.shape[0] != labels.shape[0]:
        raise IDXFormatError(f"{raw.shape[0]} images but {labels.shape[0]} labels")
    images = raw.astype(DTYPE)[:, None] / 255.0
    if mean is None:
        mean = np.array([images.mean()])
    images -= np.asarray(mean).reshape(1, -1, 1, 1)
    return images, labels.astype(np.int64), np.asarray(mean, dtype=DTYPE)


def load_mnist(images_path, labels_path, mean=None, prefix="mnist"):
    images, labels, _ = load_mnist_arrays(images_path, labels_path, mean)
    return [ClsSample(img, int(lab), f"{prefix}-{i}") for i, (img, lab) in enumerate(zip(images, labels))]


def fingerprint(*arrays):
    """Short sha256 over array bytes; identifies a dataset in run manifests."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


SHAPES = ("rectangle", "disc", "triangle")
MIN_SHAPE = 8


def _smooth_field(rng, size, cells=6):
    """Low-frequency noise in [-1, 1]: a coarse random grid, bilinearly upsampled."""
    from .netcore import bilinear_matrix
    grid = rng.uniform(-1.0, 1.0, size=(cells, cells))
    m = bilinear_matrix(cells, size)
    return m @ grid @ m.T


def class_textures(num_classes, texture_seed=12345):
    """Per-class (color, stripe angle, stripe period) appearance parameters.

    Class 0 is background. Appearance depends only on the class index, so a
    dataset and its held-out split share textures.
    """
    rng = np.random.default_rng(texture_seed)
    out = []
    for c in range(num_classes):
        color = rng.uniform(0.25, 0.75, size=3)
        angle = np.pi * c / num_classes
        period = 4.0 + 2.0 * (c % 3)
        out.append((color, angle, period))
    return out


def _shape_mask(rng, kind, size, max_frac=0.5):
    yy, xx = np.mgrid[0:size, 0:size].astype(DTYPE)
    lo, hi = MIN_SHAPE, max(MIN_SHAPE + 1, int(size * max_frac))
    cy, cx = rng.uniform(size * 0.15, size * 0.85, size=2)
    if kind == "disc":
        r = rng.uniform(lo / 2, hi / 2)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    theta = rng.uniform(0, np.pi)
    ct, st = np.cos(theta), np.sin(theta)
    u = (xx - cx) * ct + (yy - cy) * st
    v = -(xx - cx) * st + (yy - cy) * ct
    if kind == "rectangle":
        hw, hh = rng.uniform(lo / 2, hi / 2, size=2)
        return (np.abs(u) <= hw) & (np.abs(v) <= hh)
    # isosceles triangle: apex at v=-h/2, base at v=+h/2
    h = rng.uniform(lo, hi)
    half_base = rng.uniform(lo / 2, hi / 2)
    t = (v + h / 2) / h
    return (t >= 0) & (t <= 1) & (np.abs(u) <= half_base * t)


def _texture(rng, cls, textures, size, clutter, clutter_cells, xx, yy):
    color, angle, period = textures[cls]
    phase = rng.uniform(0, 2 * np.pi)
    stripes = np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period + phase)
    out = np.empty((3, size, size), dtype=DTYPE)
    for ch in range(3):
        out[ch] = color[ch] + 0.15 * stripes + clutter * _smooth_field(rng, size, clutter_cells)
    return out


def render_synthetic(rng, size, num_classes, noise, textures, clutter=0.3, clutter_cells=8, confusers=24.0,
                     confuser_radius=(2.0, 6.0), max_shape_frac=0.75):
    """One raw image [3, size, size] and its label map.

    ``clutter`` scales a low-frequency colour field added inside each region;
    ``noise`` is the std of i.i.d. Gaussian pixel noise. ``confusers`` is the
    mean number of small discs painted with the texture of a class other
    than the one labeled underneath; labels are left untouched, so only
    surrounding context identifies those pixels.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(DTYPE)
    labels = np.zeros((size, size), dtype=np.int64)
    for _ in range(int(rng.integers(1, 4))):
        kind = SHAPES[int(rng.integers(len(SHAPES)))]
        cls = int(rng.integers(1, num_classes))
        mask = _shape_mask(rng, kind, size, max_shape_frac)
        if mask.sum() >= MIN_SHAPE:
            labels[mask] = cls
    image = np.zeros((3, size, size), dtype=DTYPE)
    for cls in range(num_classes):
        sel = labels == cls
        if sel.any():
            image[:, sel] = _texture(rng, cls, textures, size, clutter, clutter_cells, xx, yy)[:, sel]
    for _ in range(int(rng.poisson(confusers)) if confusers > 0 else 0):
        cy, cx = rng.uniform(0, size, size=2)
        r = rng.uniform(*confuser_radius)
        under = labels[int(cy), int(cx)]
        other = int((under + rng.integers(1, num_classes)) % num_classes)
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        image[:, disc] = _texture(rng, other, textures, size, clutter, clutter_cells, xx, yy)[:, disc]
    image += rng.normal(0.0, noise, size=image.shape)
    return image, labels


def gen_synthetic_raw(seed, count, size=64, num_classes=4, noise=0.2, clutter=0.3, clutter_cells=8, confusers=24.0,
                      confuser_radius=(2.0, 6.0), max_shape_frac=0.75):
    """Raw images [count, 3, size, size] and labels [count, size, size].

    The defaults are the frozen toy benchmark: dense small confusers make a
    purely local texture reading unreliable, so surrounding context matters.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2 (background plus one object class)")
    if size < 2 * MIN_SHAPE:
        raise ValueError(f"size {size} too small; need at least {2 * MIN_SHAPE}")
    rng = np.random.default_rng(seed)
    textures = class_textures(num_classes)
    images = np.empty((count, 3, size, size), dtype=DTYPE)
    labels = np.empty((count, size, size), dtype=np.int64)
    for i in range(count):
        images[i], labels[i] = render_synthetic(rng, size, num_classes, noise, textures, clutter, clutter_cells, confusers,
                                              confuser_radius, max_shape_frac)
    return images, labels


def gen_synthetic_seg(seed, count, size=64, num_classes=4, noise=0.2, mean=None, **render):
    """Seeded synthetic segmentation samples with per-channel mean removed.

    ``mean`` defaults to the per-channel mean of the generated images; pass
    the training-set mean when generating a held-out split. Extra keywords
    go to ``gen_synthetic_raw``.
    """
    images, labels = gen_synthetic_raw(seed, count, size, num_classes, noise, **render)
    if mean is None:
        mean = images.mean(axis=(0, 2, 3))
    images -= np.asarray(mean).reshape(1, -1, 1, 1)
    return [SegSample(img, lab, f"syn{seed}-{i}") for i, (img, lab) in enumerate(zip(images, labels))]
