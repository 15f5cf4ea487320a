"""Exact Euclidean distance transform by separable lower envelopes of parabolas.

Distances are measured in voxel units from each foreground voxel to the
nearest background voxel; the grid border is not treated as background.
"""

from __future__ import annotations

import numba
import numpy as np

_INF = 1e20


@numba.njit(cache=True)
def _envelope_1d(f, out, v, z):
    n = f.shape[0]
    k = 0
    v[0] = 0
    z[0] = -_INF
    z[1] = _INF
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = _INF
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d = q - v[k]
        out[q] = d * d + f[v[k]]


@numba.njit(cache=True)
def _transform_lines(a):
    # a: (lines, n) squared distances, transformed in place along axis 1
    n = a.shape[1]
    out = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    for i in range(a.shape[0]):
        _envelope_1d(a[i], out, v, z)
        a[i, :] = out


def squared_edt(mask: np.ndarray) -> np.ndarray:
    """Squared distance to the nearest background voxel (exact, any dimension).

    If the mask has no background at all, every voxel gets ``inf``.
    """
    mask = np.asarray(mask, dtype=bool)
    f = np.where(mask, _INF, 0.0)
    for axis in range(mask.ndim):
        moved = np.moveaxis(f, axis, -1)
        lines = np.ascontiguousarray(moved.reshape(-1, moved.shape[-1]))
        _transform_lines(lines)
        f = np.moveaxis(lines.reshape(moved.shape), -1, axis)
    f = np.ascontiguousarray(f)
    f[f >= _INF / 2] = np.inf
    return f


def edt(mask: np.ndarray) -> np.ndarray:
    return np.sqrt(squared_edt(mask))
