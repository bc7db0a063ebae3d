"""Dense float64 arrays and the handful of elementwise ops the engine needs.

Tensors are plain ``numpy.ndarray`` objects with dtype float64, row-major.
Images and activations are laid out ``[C, H, W]`` (or ``[N, C, H, W]`` for
batches); convolution filters are ``[N_out, C_in, kH, kW]``.
"""
import numpy as np

DTYPE = np.float64


def as_tensor(data, shape=None):
    """Return a contiguous float64 copy of ``data``, optionally reshaped."""
    t = np.array(data, dtype=DTYPE, order="C", copy=True)
    if shape is not None:
        t = t.reshape(shape)
    return t


def sign(t):
    """Elementwise signum with sign(0) = 0."""
    return np.sign(np.asarray(t, dtype=DTYPE))


def axpy(a, x, y):
    """Return ``a * x + y``. Shapes must match exactly (no broadcasting)."""
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE)
    if x.shape != y.shape:
        raise ValueError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    return a * x + y


def argmax_channel(t, axis=0):
    """Index of the maximal channel at each position.

    ``axis`` selects the channel axis (0 for ``[C, H, W]``, 1 for batches).
    Ties resolve to the lowest channel index.
    """
    t = np.asarray(t)
    if t.size == 0:
        raise ValueError("argmax_channel on empty tensor")
    # np.argmax returns the first occurrence of the maximum
    return np.argmax(t, axis=axis)
