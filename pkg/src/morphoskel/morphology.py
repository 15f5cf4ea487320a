"""Cross-sectional morphology: per-frame features, 3D summaries and conditioning maps.

All measurements are in voxel units. Frames are the 2D slices along depth
(last axis). Empty tissue yields 0 for the dependent features, never NaN.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import savgol_filter
from skimage.measure import perimeter

from .edt import edt
from .volume import CALCIUM, LUMEN, WALL, MorphFeatureMatrix, SegmentationMap

FRAME_FEATURES = (
    "lumen_area",
    "vessel_area",
    "plaque_area",
    "plaque_centroid_dist",
    "plaque_circularity",
    "calcium_area",
    "calcium_thickness",
    "calcium_arclength",
)
VOLUME_FEATURES = (
    "lumen_volume",
    "stenosis_ratio",
    "vessel_volume",
    "vessel_burden",
    "min_plaque_circularity",
    "mean_plaque_circularity",
    "calcium_volume",
    "calcium_length",
    "max_calcium_thickness",
    "mean_calcium_thickness",
    "max_calcium_arclength",
    "mean_calcium_arclength",
)
DEFAULT_FEATURES = ("lumen_area", "calcium_area")


# classes summed by each area feature; these are the differentiable ones
AREA_CLASSES = {
    "lumen_area": (LUMEN,),
    "vessel_area": (WALL, CALCIUM),
    "plaque_area": (WALL, LUMEN, CALCIUM),
    "calcium_area": (CALCIUM,),
}


@dataclass(frozen=True)
class FrameFeatures:
    lumen_area: float = 0.0
    vessel_area: float = 0.0
    plaque_area: float = 0.0
    plaque_centroid_dist: float = 0.0
    plaque_circularity: float = 0.0
    calcium_area: float = 0.0
    calcium_thickness: float = 0.0
    calcium_arclength: float = 0.0

    def as_vector(self, names: Sequence[str] = FRAME_FEATURES) -> np.ndarray:
        return np.array([getattr(self, n) for n in names], dtype=np.float64)


@dataclass(frozen=True)
class VolumeFeatures:
    lumen_volume: float
    stenosis_ratio: float
    vessel_volume: float
    vessel_burden: float
    min_plaque_circularity: float
    mean_plaque_circularity: float
    calcium_volume: float
    calcium_length: float
    max_calcium_thickness: float
    mean_calcium_thickness: float
    max_calcium_arclength: float
    mean_calcium_arclength: float

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.float64)

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _image_center(shape) -> tuple[float, float]:
    return (shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0


def _centroid(mask: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(mask)
    return float(ys.mean()), float(xs.mean())


def circularity(mask: np.ndarray) -> float:
    """4*pi*A / P^2, so a digital disc scores close to 1."""
    area = float(mask.sum())
    if area == 0:
        return 0.0
    # pad so shapes touching the border still get a closed outline
    p = perimeter(np.pad(mask, 1), neighborhood=4)
    return 4.0 * math.pi * area / (p * p) if p > 0 else 0.0


def thickness(mask: np.ndarray, supersample: int = 4) -> float:
    """Twice the largest inscribed distance, measured on a supersampled grid.

    Each pixel is split into ``supersample``^2 subpixels before the exact EDT
    so the inscribed-ball centre is not pinned to pixel centres; a band w
    pixels wide measures w.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    ys, xs = np.nonzero(mask)
    crop = np.pad(mask[ys.min():ys.max() + 1, xs.min():xs.max() + 1], 1)
    k = int(supersample)
    fine = np.repeat(np.repeat(crop, k, axis=0), k, axis=1)
    return float(2.0 * edt(fine).max() / k)


def calcium_arclength(slice_labels: np.ndarray, center: tuple[float, float] | None = None) -> float:
    """Largest contiguous angular extent (degrees) of calcium about ``center``.

    Calcium pixels are sorted by the polar angle of their centres. Neighbours
    stay in one run while the gap between them is within what their footprints
    bridge, so sparse sampling far from the centre does not split an arc.
    Each run end is pushed halfway towards the nearest non-calcium pixel at the
    same radii (the raster only pins the true edge to that interval), unless
    several calcium centres sit exactly on the end ray.
    """
    labels = np.asarray(slice_labels)
    cal = labels == CALCIUM
    if not cal.any():
        return 0.0
    if center is None:
        lumen = labels == LUMEN
        center = _centroid(lumen) if lumen.any() else _image_center(labels.shape)
    yy, xx = np.indices(labels.shape)
    rho_all = np.hypot(yy - center[0], xx - center[1])
    theta_all = np.degrees(np.arctan2(yy - center[0], xx - center[1])) % 360.0
    theta, rho = theta_all[cal], rho_all[cal]
    reach = np.degrees(np.arctan2(math.sqrt(0.5), np.maximum(rho, 1e-9)))
    order = np.argsort(theta)
    theta, rho, reach = theta[order], rho[order], reach[order]
    gaps = np.diff(np.append(theta, theta[0] + 360.0))
    bridged = gaps <= np.maximum(1.0, reach + np.roll(reach, -1))
    if bridged.all():
        return 360.0
    # start right after a break so runs never wrap
    first = int(np.flatnonzero(~bridged)[0]) + 1
    theta, rho, reach = (np.roll(a, -first) for a in (theta, rho, reach))
    theta = np.where(np.arange(len(theta)) >= len(theta) - first, theta + 360.0, theta)
    breaks = np.flatnonzero(~np.roll(bridged, -first))
    best, lo = 0.0, 0
    for hi in breaks:
        run = theta[lo:hi + 1]
        r0, r1 = rho[lo:hi + 1].min(), rho[lo:hi + 1].max()
        others = theta_all[~cal & (rho_all >= r0) & (rho_all <= r1)]
        ext = []
        for end, sign, rc in ((run[-1], 1.0, reach[hi]), (run[0], -1.0, reach[lo])):
            if np.count_nonzero(np.abs(run - end) < 1e-9) >= 2:
                ext.append(0.0)
                continue
            gap = (sign * (others - end)) % 360.0
            gap = gap[gap > 0]
            ext.append(min(gap.min() / 2, rc) if gap.size else rc)
        best = max(best, float(run[-1] - run[0] + sum(ext)))
        lo = hi + 1
    return min(best, 360.0)


def frame_feature(slice_labels: np.ndarray, name: str) -> float:
    s = np.asarray(slice_labels)
    if name in AREA_CLASSES:
        return float(np.isin(s, AREA_CLASSES[name]).sum())
    if name == "plaque_centroid_dist":
        plaque = s != 0
        if not plaque.any():
            return 0.0
        cy, cx = _centroid(plaque)
        iy, ix = _image_center(s.shape)
        return float(math.hypot(cy - iy, cx - ix))
    if name == "plaque_circularity":
        return circularity(s != 0)
    if name == "calcium_thickness":
        return thickness(s == CALCIUM)
    if name == "calcium_arclength":
        return calcium_arclength(s)
    raise KeyError(f"unknown frame feature {name!r}")


def frame_features(slice_labels: np.ndarray) -> FrameFeatures:
    return FrameFeatures(**{n: frame_feature(slice_labels, n) for n in FRAME_FEATURES})


def _check_names(names: Iterable[str]) -> tuple[str, ...]:
    names = tuple(names)
    bad = [n for n in names if n not in FRAME_FEATURES]
    if bad:
        raise KeyError(f"unknown feature(s) {bad}; choose from {FRAME_FEATURES}")
    if not names:
        raise ValueError("at least one feature is required")
    return names


def feature_curves(labels: np.ndarray, names: Sequence[str] = DEFAULT_FEATURES) -> np.ndarray:
    """m x D raw feature matrix for a label grid."""
    names = _check_names(names)
    labels = np.asarray(labels)
    out = np.zeros((len(names), labels.shape[2]))
    for i, name in enumerate(names):
        if name in AREA_CLASSES:
            out[i] = np.isin(labels, AREA_CLASSES[name]).sum(axis=(0, 1))
        else:
            out[i] = [frame_feature(labels[:, :, d], name) for d in range(labels.shape[2])]
    return out


def extract_feature_matrix(seg: SegmentationMap, names: Sequence[str] = DEFAULT_FEATURES) -> MorphFeatureMatrix:
    names = _check_names(names)
    return MorphFeatureMatrix(feature_curves(seg.labels, names), names)


def volume_features(seg: SegmentationMap) -> VolumeFeatures:
    f = feature_curves(seg.labels, FRAME_FEATURES)
    row = dict(zip(FRAME_FEATURES, f))
    lumen, vessel = row["lumen_area"], row["vessel_area"]
    mean_lumen = lumen.mean()
    site = int(np.argmin(lumen))  # first minimum on ties
    stenosis = float(lumen.min() / mean_lumen) if mean_lumen > 0 else 0.0
    burden = float(vessel[site] / lumen[site]) if lumen[site] > 0 else 0.0

    circ = row["plaque_circularity"][row["plaque_area"] > 0]
    calcified = row["calcium_area"] > 0
    thick = row["calcium_thickness"][calcified]
    arc = row["calcium_arclength"][calcified]

    def _max(a):
        return float(a.max()) if a.size else 0.0

    def _mean(a):
        return float(a.mean()) if a.size else 0.0

    return VolumeFeatures(
        lumen_volume=float(lumen.sum()),
        stenosis_ratio=stenosis,
        vessel_volume=float(vessel.sum()),
        vessel_burden=burden,
        min_plaque_circularity=float(circ.min()) if circ.size else 0.0,
        mean_plaque_circularity=_mean(circ),
        calcium_volume=float(row["calcium_area"].sum()),
        calcium_length=float(calcified.sum()),
        max_calcium_thickness=_max(thick),
        mean_calcium_thickness=_mean(thick),
        max_calcium_arclength=_max(arc),
        mean_calcium_arclength=_mean(arc),
    )


def smooth_features(mtx: MorphFeatureMatrix, window: int = 21, polyorder: int = 2) -> MorphFeatureMatrix:
    """Savitzky-Golay smoothing of every row along depth.

    Edge windows use a polynomial fit to the first/last ``window`` samples, so
    polynomials of degree <= ``polyorder`` pass through unchanged.
    """
    if window % 2 != 1 or window <= polyorder or window > mtx.depth:
        raise ValueError(f"need odd window with polyorder < window <= D ({mtx.depth}), got {window}")
    out = savgol_filter(mtx.features, window, polyorder, axis=1, mode="interp")
    return MorphFeatureMatrix(out, mtx.names, mtx.bounds)


def percentile_bounds(matrices: Iterable[MorphFeatureMatrix], lo: float = 2.0, hi: float = 98.0) -> dict[str, tuple[float, float]]:
    """Per-feature (p2, p98) over every frame of every matrix, linear interpolation."""
    matrices = list(matrices)
    if not matrices:
        raise ValueError("no matrices to take percentiles over")
    names = matrices[0].names
    pooled = np.concatenate([m.features for m in matrices], axis=1)
    return {n: (float(np.percentile(pooled[i], lo)), float(np.percentile(pooled[i], hi)))
            for i, n in enumerate(names)}


def normalize_features(mtx: MorphFeatureMatrix, bounds: dict[str, Sequence[float]]) -> MorphFeatureMatrix:
    lo, span = _bounds_arrays(mtx.names, bounds)
    used = {n: (float(bounds[n][0]), float(bounds[n][1])) for n in mtx.names}
    return MorphFeatureMatrix((mtx.features - lo[:, None]) / span[:, None], mtx.names, used)


def _bounds_arrays(names, bounds) -> tuple[np.ndarray, np.ndarray]:
    missing = [n for n in names if n not in bounds]
    if missing:
        raise KeyError(f"no bounds for {missing}")
    lo = np.array([float(bounds[n][0]) for n in names])
    hi = np.array([float(bounds[n][1]) for n in names])
    if np.any(hi <= lo):
        raise ValueError("degenerate bounds: need p2 < p98 for every feature")
    return lo, hi - lo


def pool_depth(curves: np.ndarray, d: int) -> np.ndarray:
    curves = np.atleast_2d(curves)
    D = curves.shape[1]
    if D % d:
        raise ValueError(f"depth {D} is not divisible by latent depth {d}")
    return curves.reshape(curves.shape[0], d, D // d).mean(axis=2)


def build_morph_condition_map(mtx: MorphFeatureMatrix | np.ndarray, latent_shape: Sequence[int]) -> np.ndarray:
    """Average-pool each row to latent depth and broadcast over the cross-section."""
    h, w, d = latent_shape
    curves = mtx.features if isinstance(mtx, MorphFeatureMatrix) else np.asarray(mtx, dtype=np.float64)
    pooled = pool_depth(curves, d)
    return np.broadcast_to(pooled[:, None, None, :], (pooled.shape[0], h, w, d)).copy()


def soft_area_regressor(probs: np.ndarray, classes) -> np.ndarray:
    """Per-frame sum of class scores; d/d(score) is 1 for every summed voxel."""
    probs = np.asarray(probs)
    classes = (classes,) if np.isscalar(classes) else tuple(classes)
    return probs[list(classes)].sum(axis=(0, 1, 2))


class MorphRegressor:
    """Hard regressor: label grid or class scores -> morphological condition map.

    Not differentiable; this is what adaptive null guidance calls each step.
    """

    def __init__(self, names: Sequence[str], latent_shape: Sequence[int],
                 bounds: dict[str, Sequence[float]] | None = None, smooth_window: int | None = None,
                 polyorder: int = 2):
        self.names = _check_names(names)
        self.latent_shape = tuple(latent_shape)
        self.bounds = bounds
        self.smooth_window = smooth_window
        self.polyorder = polyorder

    def features(self, x) -> MorphFeatureMatrix:
        if isinstance(x, SegmentationMap):
            labels = x.labels
        else:
            x = np.asarray(x)
            labels = np.argmax(x, axis=0) if x.ndim == 4 else x
        return MorphFeatureMatrix(feature_curves(labels, self.names), self.names)

    def condition_map(self, mtx: MorphFeatureMatrix) -> np.ndarray:
        if self.smooth_window:
            mtx = smooth_features(mtx, self.smooth_window, self.polyorder)
        if self.bounds is not None:
            mtx = normalize_features(mtx, self.bounds)
        return build_morph_condition_map(mtx, self.latent_shape)

    def __call__(self, x) -> np.ndarray:
        return self.condition_map(self.features(x))


class SoftMorphRegressor:
    """Differentiable area regressor producing normalized, depth-pooled curves (m x d)."""

    def __init__(self, names: Sequence[str], latent_depth: int,
                 bounds: dict[str, Sequence[float]] | None = None):
        names = _check_names(names)
        hard = [n for n in names if n not in AREA_CLASSES]
        if hard:
            raise ValueError(f"features {hard} have no differentiable form; use adaptive null guidance")
        self.names = names
        self.latent_depth = int(latent_depth)
        if bounds is None:
            self.lo, self.span = np.zeros(len(names)), np.ones(len(names))
        else:
            self.lo, self.span = _bounds_arrays(names, bounds)

    def __call__(self, probs: np.ndarray) -> np.ndarray:
        curves = np.stack([soft_area_regressor(probs, AREA_CLASSES[n]) for n in self.names])
        return pool_depth((curves - self.lo[:, None]) / self.span[:, None], self.latent_depth)

    def vjp(self, shape: Sequence[int], g: np.ndarray) -> np.ndarray:
        """Pull back a cotangent on the (m x d) output to the score grid."""
        C, H, W, D = shape
        pool = D // self.latent_depth
        out = np.zeros((C, D))
        per_frame = np.repeat(np.asarray(g) / self.span[:, None] / pool, pool, axis=1)
        for i, n in enumerate(self.names):
            for c in AREA_CLASSES[n]:
                out[c] += per_frame[i]
        return np.broadcast_to(out[:, None, None, :], (C, H, W, D)).copy()
