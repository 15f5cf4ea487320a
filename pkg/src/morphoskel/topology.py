"""Containment checks: wall must enclose lumen and calcium in every cross-section.

For a class A (lumen or calcium) and B = wall, the complement C holds every
other label. Critical pixels are A pixels within city-block distance ``radius``
of a C pixel and vice versa. Pixels outside the grid count as background
unless ``pad_background=False``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import CALCIUM, LUMEN, WALL, SegmentationMap, SoftLabelMap

DEFAULT_RADIUS = 3

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.float64)


def class_ids(class_a) -> tuple[int, ...]:
    """Normalise a class selector ('lumen', 'calcium', 'both' or an id)."""
    if isinstance(class_a, str):
        table = {"lumen": (LUMEN,), "calcium": (CALCIUM,), "both": (LUMEN, CALCIUM)}
        try:
            return table[class_a]
        except KeyError:
            raise ValueError(f"unknown class {class_a!r}") from None
    if class_a not in (LUMEN, CALCIUM):
        raise ValueError("containment is checked for lumen or calcium only")
    return (int(class_a),)


@dataclass(frozen=True)
class CriticalPixelMask:
    mask: np.ndarray
    violating_classes: np.ndarray

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def any(self) -> bool:
        return bool(self.mask.any())


def expand_neighborhood(mask: np.ndarray, radius: int = DEFAULT_RADIUS) -> np.ndarray:
    """Apply the 4-connectivity kernel ``radius`` times; > 0 within city-block distance."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    n = np.asarray(mask, dtype=np.float64)
    for _ in range(radius):
        n = ndimage.convolve(n, _CROSS, mode="constant", cval=0.0)
    return n


def detect_critical_pixels(slice_labels: np.ndarray, class_a=LUMEN, radius: int = DEFAULT_RADIUS,
                           pad_background: bool = True) -> CriticalPixelMask:
    labels = np.asarray(slice_labels)
    if labels.ndim != 2:
        raise ValueError("expected a 2D slice")
    total = np.zeros(labels.shape, dtype=bool)
    for a in class_ids(class_a):
        p_a = labels == a
        if not p_a.any():
            continue
        p_c = (labels != a) & (labels != WALL)
        if pad_background:
            p_a_pad = np.pad(p_a, radius)
            p_c_pad = np.pad(p_c, radius, constant_values=True)
            crop = (slice(radius, -radius), slice(radius, -radius))
            n_a = expand_neighborhood(p_a_pad, radius)[crop]
            n_c = expand_neighborhood(p_c_pad, radius)[crop]
        else:
            n_a = expand_neighborhood(p_a, radius)
            n_c = expand_neighborhood(p_c, radius)
        total |= (p_a & (n_c > 0)) | (p_c & (n_a > 0))
    return CriticalPixelMask(total, np.where(total, labels, 0).astype(np.uint8))


def critical_voxels(labels: np.ndarray, class_a=LUMEN, radius: int = DEFAULT_RADIUS,
                    pad_background: bool = True) -> np.ndarray:
    """V_3D: per-slice critical maps stacked along depth."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape, dtype=bool)
    for d in range(labels.shape[2]):
        out[:, :, d] = detect_critical_pixels(labels[:, :, d], class_a, radius, pad_background).mask
    return out


def topological_loss(pred: SoftLabelMap, class_a=LUMEN, radius: int = DEFAULT_RADIUS,
                     pad_background: bool = True, eps: float = 1e-12) -> float:
    """Mean cross-entropy against the wall class over critical voxels (0 if none)."""
    probs = pred.probs
    hard = np.argmax(probs, axis=0)
    v3d = critical_voxels(hard, class_a, radius, pad_background)
    if not v3d.any():
        return 0.0
    p_wall = np.clip(probs[WALL][v3d], eps, None)
    return float(-np.log(p_wall).mean())


def slice_violations(seg: SegmentationMap, class_a=LUMEN, radius: int = DEFAULT_RADIUS,
                     pad_background: bool = True) -> np.ndarray:
    """Boolean flag per depth slice: does the slice contain a critical pixel?"""
    labels = seg.labels
    return np.array([
        detect_critical_pixels(labels[:, :, d], class_a, radius, pad_background).any()
        for d in range(labels.shape[2])
    ])


def violation_rate(seg: SegmentationMap, class_a=LUMEN, radius: int = DEFAULT_RADIUS,
                   pad_background: bool = True) -> float:
    flags = slice_violations(seg, class_a, radius, pad_background)
    return float(flags.sum()) / len(flags)
