"""Synthetic coronary phantoms with known morphology and centerlines.

A phantom is a straight main vessel along depth with a per-frame lumen
radius and wall thickness, optional calcium arcs carved inside the wall and
optional side branches that drift away in-plane. Wall always surrounds lumen
and calcium by more than the containment radius, so generated maps are free
of topological violations by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .edt import edt
from .morphology import extract_feature_matrix
from .skeleton import SkeletonGraph
from .volume import BACKGROUND, CALCIUM, LUMEN, WALL, MorphFeatureMatrix, SegmentationMap

MARGIN = 4.0  # wall kept around calcium, in px (> containment radius 3)


@dataclass(frozen=True)
class CalciumSpec:
    frames: tuple[int, int]
    angles: tuple[float, float]  # degrees, counter-clockwise from +x (column axis)
    band: tuple[float, float] | None = None  # radial offsets from the lumen edge

    def __post_init__(self):
        a0, a1 = self.angles
        if not (0 <= a0 <= 360 and 0 <= a1 <= 360):
            raise ValueError("calcium angles must lie in [0, 360]")


@dataclass(frozen=True)
class BranchSpec:
    start: int
    stop: int
    direction: tuple[float, float]  # in-plane drift per frame (rows, cols)
    radius: float = 3.0

    def __post_init__(self):
        if self.stop <= self.start:
            raise ValueError("branch needs stop > start")
        if max(abs(self.direction[0]), abs(self.direction[1])) > 1:
            raise ValueError("branch drift must be at most 1 px per frame per axis")
        if self.radius <= 0:
            raise ValueError("branch radius must be positive")


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (64, 64, 64)
    radius: float | tuple[float, ...] = 10.0
    wall: float | tuple[float, ...] = 5.0
    calcium: tuple[CalciumSpec, ...] = ()
    branches: tuple[BranchSpec, ...] = ()
    center: tuple[float, float] | None = None
    seed: int = 0  # provenance only; generation is deterministic

    def profile(self, values) -> np.ndarray:
        D = self.shape[2]
        a = np.broadcast_to(np.asarray(values, dtype=np.float64), (D,)) if np.ndim(values) == 0 \
            else np.asarray(values, dtype=np.float64)
        if a.shape != (D,):
            raise ValueError(f"profile needs {D} entries, got {a.shape}")
        return a

    @property
    def centre(self) -> tuple[float, float]:
        H, W, _ = self.shape
        return self.center if self.center is not None else ((H - 1) / 2.0, (W - 1) / 2.0)

    def branch_centres(self, b: BranchSpec) -> np.ndarray:
        cy, cx = self.centre
        t = np.arange(b.start, b.stop) - b.start
        return np.stack([cy + t * b.direction[0], cx + t * b.direction[1]], axis=1)

    def validate(self) -> None:
        H, W, D = self.shape
        r, t = self.profile(self.radius), self.profile(self.wall)
        if np.any(r <= 0) or np.any(t < 0):
            raise ValueError("radius must be > 0 and wall >= 0")
        cy, cx = self.centre
        room = min(cy, cx, H - 1 - cy, W - 1 - cx)
        if np.any(r + t >= room + 0.5) or np.any(r + t >= min(H, W) / 2):
            raise ValueError("lumen plus wall does not fit in the cross-section")
        for c in self.calcium:
            if not 0 <= c.frames[0] < c.frames[1] <= D:
                raise ValueError(f"calcium frames {c.frames} outside [0, {D}]")
        for b in self.branches:
            if not 0 <= b.start < b.stop <= D:
                raise ValueError(f"branch frames ({b.start}, {b.stop}) outside [0, {D}]")
            ext = b.radius + t[b.start:b.stop]
            c = self.branch_centres(b)
            if np.any(c[:, 0] - ext < 0) or np.any(c[:, 0] + ext > H - 1) or \
                    np.any(c[:, 1] - ext < 0) or np.any(c[:, 1] + ext > W - 1):
                raise ValueError("branch leaves the grid")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown phantom keys {sorted(unknown)}")
        for key in ("shape", "center"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        for key in ("radius", "wall"):
            if isinstance(d.get(key), list):
                d[key] = tuple(d[key])
        d["calcium"] = tuple(CalciumSpec(tuple(c["frames"]), tuple(c["angles"]),
                                         tuple(c["band"]) if c.get("band") is not None else None)
                             for c in d.get("calcium", ()))
        d["branches"] = tuple(BranchSpec(b["start"], b["stop"], tuple(b["direction"]), b.get("radius", 3.0))
                              for b in d.get("branches", ()))
        return cls(**d)


def _in_arc(theta: np.ndarray, a0: float, a1: float) -> np.ndarray:
    """Angles in the counter-clockwise arc from a0 to a1 (degrees)."""
    span = (a1 - a0) % 360.0
    if span == 0 and a1 != a0:
        span = 360.0
    return ((theta - a0) % 360.0) <= span


def generate(spec: PhantomSpec) -> SegmentationMap:
    spec.validate()
    H, W, D = spec.shape
    r, t = spec.profile(spec.radius), spec.profile(spec.wall)
    yy, xx = np.mgrid[:H, :W].astype(np.float64)
    cy, cx = spec.centre
    rho = np.hypot(yy - cy, xx - cx)
    theta = np.degrees(np.arctan2(yy - cy, xx - cx)) % 360.0
    labels = np.zeros(spec.shape, dtype=np.uint8)
    branch_c = [(b, spec.branch_centres(b)) for b in spec.branches]
    for d in range(D):
        lumen = rho <= r[d]
        outer = rho <= r[d] + t[d]
        for b, cs in branch_c:
            if b.start <= d < b.stop:
                rb = np.hypot(yy - cs[d - b.start, 0], xx - cs[d - b.start, 1])
                lumen |= rb <= b.radius
                outer |= rb <= b.radius + t[d]
        sl = np.where(outer, WALL, BACKGROUND).astype(np.uint8)
        sl[lumen] = LUMEN
        cal = np.zeros((H, W), dtype=bool)
        for c in spec.calcium:
            if not c.frames[0] <= d < c.frames[1]:
                continue
            lo, hi = c.band if c.band is not None else (MARGIN + 0.5, t[d] - MARGIN - 0.5)
            cal |= (rho > r[d] + lo) & (rho <= r[d] + hi) & _in_arc(theta, *c.angles)
        if cal.any():
            # keep a clean wall margin around calcium whatever the band says
            free = (sl == LUMEN) | (sl == BACKGROUND)
            cal &= (sl == WALL) & (edt(~free) >= MARGIN) if free.any() else (sl == WALL)
            sl[cal] = CALCIUM
        labels[:, :, d] = sl
    return SegmentationMap(labels)


def centerline_graph(spec: PhantomSpec) -> SkeletonGraph:
    """Ground-truth centerline: main axis voxels plus each branch path."""
    cy, cx = spec.centre
    D = spec.shape[2]
    main = [(int(round(cy)), int(round(cx)), d) for d in range(D)]
    nodes = {p: i for i, p in enumerate(main)}
    edges = [(i, i + 1) for i in range(D - 1)]
    for b in spec.branches:
        cs = np.rint(spec.branch_centres(b)).astype(int)
        prev = nodes[main[b.start]]
        for k in range(1, len(cs)):
            p = (int(cs[k, 0]), int(cs[k, 1]), b.start + k)
            if p not in nodes:
                nodes[p] = len(nodes)
            edges.append((prev, nodes[p]))
            prev = nodes[p]
    return SkeletonGraph(np.array(list(nodes), dtype=np.int64), np.array(edges, dtype=np.int64))


def stenosis_profile(depth: int, r0: float, ratio: float, centre: float | None = None,
                     width: float | None = None) -> np.ndarray:
    """Radius profile whose area curve has min/mean equal to ``ratio``.

    Area a(d) = a0 (1 - A g(d)) with a Gaussian bump g; A is solved so that
    min(a) / mean(a) = ratio exactly in the continuous model.
    """
    if not 0 < ratio <= 1:
        raise ValueError("stenosis ratio must lie in (0, 1]")
    centre = (depth - 1) / 2.0 if centre is None else centre
    width = depth / 10.0 if width is None else width
    g = np.exp(-0.5 * ((np.arange(depth) - centre) / width) ** 2)
    g = g / g.max()
    amp = (1.0 - ratio) / (1.0 - ratio * g.mean())
    return r0 * np.sqrt(1.0 - amp * g)


@dataclass(frozen=True)
class CorpusRanges:
    radius: tuple[float, float] = (8.0, 10.0)
    wall: tuple[float, float] = (11.0, 13.0)
    stenosis: tuple[float, float] | None = (0.3, 0.9)
    calcium_prob: float = 0.7
    arc: tuple[float, float] = (60.0, 200.0)
    branches: tuple[int, int] = (0, 0)
    # vessels with side branches are drawn thinner so branch tips stay in the grid
    branch_radius: float = 5.0
    branch_wall: float = 5.0


@dataclass
class PhantomItem:
    seg: SegmentationMap
    spec: PhantomSpec
    features: MorphFeatureMatrix
    skeleton: SkeletonGraph
    n_branches: int
    stenosis_ratio: float | None = None
    arcs: list[float] = field(default_factory=list)


def _random_spec(rng: np.random.Generator, shape, ranges: CorpusRanges) -> tuple[PhantomSpec, float | None, list]:
    H, W, D = shape
    nb = int(rng.integers(ranges.branches[0], ranges.branches[1] + 1))
    seed = int(rng.integers(2 ** 31))
    if nb:
        r0, t0 = ranges.branch_radius, ranges.branch_wall
    else:
        r0, t0 = rng.uniform(*ranges.radius), rng.uniform(*ranges.wall)
    ratio = None
    radius: float | tuple = r0
    if ranges.stenosis is not None and not nb:
        ratio = float(rng.uniform(*ranges.stenosis))
        radius = tuple(stenosis_profile(D, r0, ratio, centre=rng.uniform(0.35, 0.65) * (D - 1)))
    calcium, arcs = [], []
    if not nb and rng.random() < ranges.calcium_prob:
        span = float(rng.uniform(*ranges.arc))
        a0 = float(rng.uniform(0, 360))
        f0 = int(rng.integers(0, D // 2))
        f1 = int(min(D, f0 + rng.integers(D // 8, D // 2)))
        calcium.append(CalciumSpec((f0, f1), (a0, (a0 + span) % 360.0)))
        arcs.append(span)
    branches = []
    if nb:
        base = rng.uniform(0, 2 * math.pi)
        length = D // 2
        reach = min(H, W) / 2 - ranges.branch_wall - 3.5 - 1
        speed = reach / (length - 1)
        for k in range(nb):
            ang = base + k * 2 * math.pi / nb
            dy, dx = speed * math.sin(ang), speed * math.cos(ang)
            start = int(rng.integers(D // 8, D // 4))
            branches.append(BranchSpec(start, start + length, (dy, dx), 3.0))
    spec = PhantomSpec(tuple(shape), radius, t0, tuple(calcium), tuple(branches), seed=seed)
    return spec, ratio, arcs


def generate_corpus(n: int, seed: int = 0, shape: Sequence[int] = (64, 64, 64),
                    ranges: CorpusRanges | None = None, feature_names=("lumen_area", "calcium_area")) -> list[PhantomItem]:
    """``n`` reproducible phantoms, each with its measured feature curves and true centerline."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ranges = ranges or CorpusRanges()
    children = np.random.SeedSequence(seed).spawn(n)
    items = []
    for child in children:
        spec, ratio, arcs = _random_spec(np.random.default_rng(child), tuple(shape), ranges)
        seg = generate(spec)
        items.append(PhantomItem(seg, spec, extract_feature_matrix(seg, feature_names),
                                 centerline_graph(spec), len(spec.branches), ratio, arcs))
    return items
