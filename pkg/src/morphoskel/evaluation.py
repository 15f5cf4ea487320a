"""Distribution and fidelity metrics on morphological feature sets."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .diffusion import NumericalError
from .morphology import FRAME_FEATURES, VOLUME_FEATURES, extract_feature_matrix, feature_curves, volume_features
from .skeleton import SkeletonGraph, count_branches, hard_skeletonize
from .topology import violation_rate
from .volume import LUMEN, MorphFeatureMatrix, SegmentationMap

RIDGE = 1e-6
REPORT_SCHEMA_VERSION = "1.0"


@dataclass(frozen=True)
class FeatureSet:
    rows: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if rows.shape[1] != len(self.names):
            raise ValueError(f"{len(self.names)} names for {rows.shape[1]} columns")
        if np.isnan(rows).any():
            raise ValueError("feature set contains NaN")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "names", tuple(self.names))

    def __len__(self) -> int:
        return len(self.rows)


def features_3d(maps: Sequence[SegmentationMap]) -> FeatureSet:
    """One row of 12 volume summaries per map."""
    return FeatureSet(np.array([volume_features(m).as_vector() for m in maps]), VOLUME_FEATURES)


def features_2d(maps: Sequence[SegmentationMap]) -> FeatureSet:
    """One row of 8 frame features per frame, pooled over all maps."""
    rows = [feature_curves(m.labels, FRAME_FEATURES).T for m in maps]
    return FeatureSet(np.concatenate(rows), FRAME_FEATURES)


def conditional_fidelity_morph(targets: Sequence[MorphFeatureMatrix], generated: Sequence[SegmentationMap],
                               bounds: dict | None = None) -> float:
    """MAE between target curves and curves measured on the generated maps.

    With ``bounds`` both sides are min-max normalized first.
    """
    if len(targets) != len(generated):
        raise ValueError(f"{len(targets)} targets for {len(generated)} samples")
    errs = []
    for t, g in zip(targets, generated):
        m = extract_feature_matrix(g, t.names).features
        tf = t.features
        if m.shape != tf.shape:
            raise ValueError(f"feature shapes differ: {tf.shape} vs {m.shape}")
        if bounds is not None:
            lo = np.array([bounds[n][0] for n in t.names])[:, None]
            span = np.array([bounds[n][1] - bounds[n][0] for n in t.names])[:, None]
            m, tf = (m - lo) / span, (tf - lo) / span
        errs.append(np.abs(tf - m).ravel())
    return float(np.concatenate(errs).mean())


def conditional_fidelity_skel(target, generated: Sequence) -> float:
    """MAE of side-branch counts; inputs are graphs, branch counts or label maps."""
    def branches(x):
        if isinstance(x, (int, np.integer)):
            return int(x)
        if isinstance(x, SkeletonGraph):
            return count_branches(x)
        if isinstance(x, SegmentationMap):
            return count_branches(hard_skeletonize(x.labels == LUMEN))
        raise TypeError(f"cannot count branches of {type(x).__name__}")

    if len(generated) == 0:
        raise ValueError("no generated samples")
    t = branches(target)
    return float(np.mean([abs(t - branches(g)) for g in generated]))


def _moments(x: np.ndarray):
    if len(x) < 2:
        raise ValueError("need at least two rows for a covariance")
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False)) + RIDGE * np.eye(x.shape[1])
    if not np.all(np.isfinite(cov)):
        raise NumericalError("non-finite covariance")
    return mu, cov


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((cov + cov.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """|mu_a - mu_b|^2 + tr(A + B - 2 (A B)^{1/2}).

    tr (A B)^{1/2} equals the sum of singular values of A^{1/2} B^{1/2}; going
    through the SVD keeps the error linear in the covariance scale, so
    identical sets give 0 to rounding even for features in the thousands.
    """
    s = np.linalg.svd(_psd_sqrt(cov_a) @ _psd_sqrt(cov_b), compute_uv=False)
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    fd = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * s.sum())
    if not np.isfinite(fd):
        raise NumericalError("non-finite Frechet distance")
    return max(fd, 0.0)


def frechet_distance(a: FeatureSet, b: FeatureSet) -> float:
    """Squared Frechet distance between Gaussian fits of two feature sets."""
    if a.names != b.names:
        raise ValueError("feature sets have different columns")
    return frechet_from_moments(*_moments(a.rows), *_moments(b.rows))


def _knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    d = cdist(x, x)
    return np.sort(d, axis=1)[:, k]  # column 0 is the point itself


def _coverage(ref: np.ndarray, query: np.ndarray, k: int) -> float:
    radii = _knn_radii(ref, k)
    d = cdist(query, ref)
    return float(np.mean(np.any(d <= radii[None, :], axis=1)))


def precision_recall(real: FeatureSet, gen: FeatureSet, k: int = 3) -> tuple[float, float]:
    """k-NN manifold precision and recall after standardizing on the real set."""
    if real.names != gen.names:
        raise ValueError("feature sets have different columns")
    if len(real) <= k or len(gen) <= k:
        raise ValueError(f"need more than k={k} rows on both sides")
    mu = real.rows.mean(axis=0)
    sd = real.rows.std(axis=0)
    keep = sd > 0
    if not keep.all():
        dropped = [n for n, kp in zip(real.names, keep) if not kp]
        warnings.warn(f"dropping zero-variance features {dropped}", RuntimeWarning, stacklevel=2)
    r = (real.rows[:, keep] - mu[keep]) / sd[keep]
    g = (gen.rows[:, keep] - mu[keep]) / sd[keep]
    return _coverage(r, g, k), _coverage(g, r, k)


def topo_summary(maps: Sequence[SegmentationMap]) -> dict[str, float]:
    """Mean per-volume violation rate for lumen and calcium containment."""
    return {
        "topo_violation_lumen": float(np.mean([violation_rate(m, "lumen") for m in maps])),
        "topo_violation_calcium": float(np.mean([violation_rate(m, "calcium") for m in maps])),
    }
