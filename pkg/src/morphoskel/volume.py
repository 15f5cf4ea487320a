"""Voxel data model and the MSV1 file format.

Segmentation maps are stored as label grids (one uint8 class id per voxel);
the channel-first one-hot form is derived on demand.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

BACKGROUND, WALL, LUMEN, CALCIUM = 0, 1, 2, 3
CLASS_NAMES = ("background", "wall", "lumen", "calcium")
NUM_CLASSES = len(CLASS_NAMES)
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}

MSV_MAGIC = "MSV1"
MSV_SCHEMA_VERSION = "1.0"


class VolumeFormatError(ValueError):
    """Raised for malformed, truncated or out-of-range MSV1 payloads."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SegmentationMap:
    """Dense H x W x D label grid with classes background/wall/lumen/calcium."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ValueError(f"labels must be a non-empty 3D grid, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
            raise ValueError("class ids must lie in [0, 4)")
        if len(self.spacing) != 3:
            raise ValueError("spacing needs three entries")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint8)))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def mask(self, *classes: int) -> np.ndarray:
        return np.isin(self.labels, classes)

    def __eq__(self, other):
        if not isinstance(other, SegmentationMap):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.labels, other.labels)

    __hash__ = None


@dataclass(frozen=True)
class SoftLabelMap:
    """Per-class scores on a C x H x W x D grid.

    Scores are not forced into [0, 1] at construction because decoded
    latents may overshoot; use :meth:`normalized` to obtain a distribution.
    """

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 4 or probs.shape[0] != NUM_CLASSES:
            raise ValueError(f"expected a {NUM_CLASSES} x H x W x D grid, got {probs.shape}")
        if not np.all(np.isfinite(probs)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "probs", _frozen(probs))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.probs.shape[1:]

    def normalized(self) -> "SoftLabelMap":
        p = np.clip(self.probs, 0.0, None)
        total = p.sum(axis=0, keepdims=True)
        uniform = np.full_like(p, 1.0 / NUM_CLASSES)
        p = np.where(total > 0, p / np.where(total > 0, total, 1.0), uniform)
        return SoftLabelMap(p)


@dataclass(frozen=True)
class LatentGrid:
    values: np.ndarray
    factor: int = 1

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 4:
            raise ValueError("latent grids are c x h x w x d")
        if int(self.factor) != self.factor or self.factor < 1:
            raise ValueError("downscale factor must be a positive integer")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "factor", int(self.factor))

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.values.shape[1:]

    def check_source(self, source_shape: Sequence[int]) -> None:
        expected = tuple(s // self.factor for s in source_shape)
        if any(s % self.factor for s in source_shape) or expected != self.spatial_shape:
            raise ValueError(f"latent dims {self.spatial_shape} do not match source {tuple(source_shape)} / {self.factor}")


@dataclass(frozen=True)
class MorphFeatureMatrix:
    """m x D per-frame feature curves; ``bounds`` holds (p2, p98) once normalized."""

    features: np.ndarray
    names: tuple[str, ...]
    bounds: dict[str, tuple[float, float]] | None = field(default=None)

    def __post_init__(self):
        feats = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        names = tuple(self.names)
        if feats.ndim != 2 or feats.shape[0] != len(names):
            raise ValueError(f"{len(names)} names for a {feats.shape} matrix")
        if np.isnan(feats).any():
            raise ValueError("feature matrix contains NaN")
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "names", names)

    @property
    def depth(self) -> int:
        return self.features.shape[1]

    def row(self, name: str) -> np.ndarray:
        return self.features[self.names.index(name)]


@dataclass(frozen=True)
class ConditioningMaps:
    """Morphological (m x h x w x d) and skeletal (1 x h x w x d) condition maps.

    Either part may be ``None``; an absent or all-zero skeletal map is the
    null skeletal condition.
    """

    morph: np.ndarray | None = None
    skel: np.ndarray | None = None

    def __post_init__(self):
        morph, skel = self.morph, self.skel
        if morph is not None:
            morph = np.asarray(morph, dtype=np.float64)
            if morph.ndim != 4:
                raise ValueError("morph map must be m x h x w x d")
            object.__setattr__(self, "morph", _frozen(morph))
        if skel is not None:
            skel = np.asarray(skel, dtype=np.float64)
            if skel.ndim != 4 or skel.shape[0] != 1:
                raise ValueError("skel map must be 1 x h x w x d")
            if skel.size and (skel.min() < 0 or skel.max() > 1):
                raise ValueError("skel values must lie in [0, 1]")
            object.__setattr__(self, "skel", _frozen(skel))
        if morph is not None and skel is not None and morph.shape[1:] != skel.shape[1:]:
            raise ValueError("morph and skel maps disagree on spatial dims")

    @property
    def spatial_shape(self) -> tuple[int, int, int] | None:
        for m in (self.morph, self.skel):
            if m is not None:
                return m.shape[1:]
        return None

    @property
    def has_skel(self) -> bool:
        return self.skel is not None and bool(np.any(self.skel))

    def check_latent(self, latent_shape: Sequence[int]) -> None:
        s = self.spatial_shape
        if s is not None and tuple(s) != tuple(latent_shape):
            raise ValueError(f"conditioning dims {s} != latent dims {tuple(latent_shape)}")


def one_hot(seg: SegmentationMap) -> SoftLabelMap:
    return SoftLabelMap(np.eye(NUM_CLASSES)[seg.labels].transpose(3, 0, 1, 2))


def argmax_labels(soft: SoftLabelMap | np.ndarray, spacing=(1.0, 1.0, 1.0)) -> SegmentationMap:
    """Hard labels from class scores; ties go to the lowest class id."""
    probs = soft.probs if isinstance(soft, SoftLabelMap) else np.asarray(soft)
    # np.argmax returns the first maximum, i.e. the lowest class id
    return SegmentationMap(np.argmax(probs, axis=0).astype(np.uint8), spacing)


# --- MSV1 ------------------------------------------------------------------

def _write_msv(path, shape, payload: bytes, spacing, dtype: str | None) -> None:
    header = {
        "magic": MSV_MAGIC,
        "shape": [int(s) for s in shape],
        "spacing": [float(s) for s in spacing],
        "labels": {str(i): n for i, n in enumerate(CLASS_NAMES)},
    }
    if dtype is not None:
        header["dtype"] = dtype
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload)


def _read_msv(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise VolumeFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: malformed header: {exc}") from exc
    if not isinstance(header, dict) or header.get("magic") != MSV_MAGIC:
        raise VolumeFormatError(f"{path}: not an MSV1 file")
    shape = header.get("shape")
    if not isinstance(shape, list) or not shape or not all(isinstance(s, int) and s >= 1 for s in shape):
        raise VolumeFormatError(f"{path}: bad shape {shape!r}")
    spacing = header.get("spacing", [1.0, 1.0, 1.0])
    if not isinstance(spacing, list) or len(spacing) != 3:
        raise VolumeFormatError(f"{path}: bad spacing {spacing!r}")
    return header, raw[nl + 1:]


def write_volume(seg: SegmentationMap, path) -> None:
    _write_msv(path, seg.shape, np.ascontiguousarray(seg.labels, dtype=np.uint8).tobytes(), seg.spacing, None)


def read_volume(path) -> SegmentationMap:
    header, payload = _read_msv(path)
    if header.get("dtype", "u8") != "u8":
        raise VolumeFormatError(f"{path}: expected a label volume, got dtype {header['dtype']!r}")
    shape = tuple(header["shape"])
    if len(shape) != 3:
        raise VolumeFormatError(f"{path}: label volumes are 3D")
    n = int(np.prod(shape))
    if len(payload) < n:
        raise VolumeFormatError(f"{path}: truncated payload ({len(payload)} of {n} bytes)")
    if len(payload) > n:
        raise VolumeFormatError(f"{path}: trailing bytes after payload")
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(shape)
    if labels.max(initial=0) >= NUM_CLASSES:
        raise VolumeFormatError(f"{path}: label value {labels.max()} out of range")
    return SegmentationMap(labels, tuple(header["spacing"]))


def write_array(values: np.ndarray, path, spacing=(1.0, 1.0, 1.0)) -> None:
    """Float grids (latents, conditioning maps) as MSV1 with dtype f32."""
    values = np.asarray(values)
    _write_msv(path, values.shape, np.ascontiguousarray(values, dtype="<f4").tobytes(), spacing, "f32")


def read_array(path) -> np.ndarray:
    header, payload = _read_msv(path)
    if header.get("dtype") != "f32":
        raise VolumeFormatError(f"{path}: expected dtype f32")
    shape = tuple(header["shape"])
    n = int(np.prod(shape)) * 4
    if len(payload) != n:
        raise VolumeFormatError(f"{path}: payload has {len(payload)} bytes, expected {n}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)


def write_features(mtx: MorphFeatureMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", *mtx.names])
        for d in range(mtx.depth):
            w.writerow([d, *(repr(float(v)) for v in mtx.features[:, d])])


def read_features(path) -> MorphFeatureMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["frame"]:
        raise VolumeFormatError(f"{path}: feature CSV must start with a 'frame' column")
    names = rows[0][1:]
    data = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64).reshape(-1, len(names))
    return MorphFeatureMatrix(data.T, tuple(names))
