"""Grid operators used to turn skeletons into conditioning heatmaps.

Every operator returns its output together with a vector-Jacobian product
closure so the soft skeletal loss can be differentiated without autograd.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

Vjp = Callable[[np.ndarray], np.ndarray]


def gaussian_kernel1d(sigma: float = 1.0, size: int = 3) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(x: np.ndarray, sigma: float = 1.0, size: int = 3) -> tuple[np.ndarray, Vjp]:
    """Separable truncated Gaussian with zero padding (self-adjoint)."""
    k = gaussian_kernel1d(sigma, size)

    def apply(a):
        for axis in range(a.ndim):
            a = ndimage.correlate1d(a, k, axis=axis, mode="constant", cval=0.0)
        return a

    return apply(np.asarray(x, dtype=np.float64)), apply


def normalize_max(x: np.ndarray) -> tuple[np.ndarray, Vjp]:
    """Divide by the global maximum; all-nonpositive input maps to zeros."""
    x = np.asarray(x, dtype=np.float64)
    flat = int(np.argmax(x))
    m = x.flat[flat]
    if m <= 0:
        return np.zeros_like(x), lambda g: np.zeros_like(g)
    y = x / m

    def vjp(g):
        out = g / m
        out.flat[flat] -= float((g * x).sum()) / (m * m)
        return out

    return y, vjp


def _pool_with_index(x: np.ndarray, window: int, stride: int, reduce: str, pad: int = 0):
    shape = x.shape
    idx = np.arange(x.size).reshape(shape)
    if pad:
        x = np.pad(x, pad, mode="edge")
        idx = np.pad(idx, pad, mode="edge")
    w = (window,) * len(shape)
    vals = sliding_window_view(x, w)
    ids = sliding_window_view(idx, w)
    sl = tuple(slice(None, None, stride) for _ in shape)
    vals, ids = vals[sl], ids[sl]
    out_shape = vals.shape[:len(shape)]
    vals = vals.reshape(*out_shape, -1)
    ids = ids.reshape(*out_shape, -1)
    arg = (np.argmin if reduce == "min" else np.argmax)(vals, axis=-1)[..., None]
    out = np.take_along_axis(vals, arg, axis=-1)[..., 0]
    src = np.take_along_axis(ids, arg, axis=-1)[..., 0]
    return out, src


def _scatter(src: np.ndarray, g: np.ndarray, shape) -> np.ndarray:
    return np.bincount(src.ravel(), weights=np.asarray(g, dtype=np.float64).ravel(),
                       minlength=int(np.prod(shape))).reshape(shape)


def min_filter3(x: np.ndarray) -> tuple[np.ndarray, Vjp]:
    """3^n minimum filter; out-of-grid neighbours are ignored."""
    out, src = _pool_with_index(np.asarray(x, dtype=np.float64), 3, 1, "min", pad=1)
    return out, lambda g: _scatter(src, g, x.shape)


def max_filter3(x: np.ndarray) -> tuple[np.ndarray, Vjp]:
    out, src = _pool_with_index(np.asarray(x, dtype=np.float64), 3, 1, "max", pad=1)
    return out, lambda g: _scatter(src, g, x.shape)


def max_pool(x: np.ndarray, kernel: int = 4, stride: int = 4) -> tuple[np.ndarray, Vjp]:
    """Strided max pooling; trailing voxels that do not fill a window are dropped."""
    x = np.asarray(x, dtype=np.float64)
    if min(x.shape) < kernel:
        raise ValueError(f"grid {x.shape} is smaller than the pooling kernel {kernel}")
    out, src = _pool_with_index(x, kernel, stride, "max")
    return out, lambda g: _scatter(src, g, x.shape)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights (half-pixel centres, edge clamped)."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    m[np.arange(n_out), i0] += 1 - w
    m[np.arange(n_out), i1] += w
    return m


def resize_linear(x: np.ndarray, out_shape: Sequence[int]) -> tuple[np.ndarray, Vjp]:
    """Separable (tri)linear resize; identity when shapes already match."""
    x = np.asarray(x, dtype=np.float64)
    mats = [_interp_matrix(n, m) for n, m in zip(x.shape, out_shape)]

    def apply(a, transpose=False):
        for axis, mat in enumerate(mats):
            a = np.moveaxis(np.tensordot(mat.T if transpose else mat, np.moveaxis(a, axis, 0), axes=1), 0, axis)
        return a

    return apply(x), lambda g: apply(np.asarray(g, dtype=np.float64), transpose=True)
