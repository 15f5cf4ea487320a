"""Lumen centerlines: TEASAR-style hard skeletons, soft skeletons and heatmaps.

The hard skeleton follows the penalized distance field recipe: a boundary
distance field (DBF) turns into a cost that is cheap along the medial axis,
shortest paths are traced from a root to the farthest unvisited voxel, and
a ball around each accepted path is invalidated until the object is covered.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, dijkstra, minimum_spanning_tree

from . import heatmap as hm
from .edt import edt


@dataclass(frozen=True)
class TeasarParams:
    const: float = 10.0
    scale: float = 1.5
    pdrf_scale: float = 1e5
    pdrf_exponent: float = 5.0
    tick_threshold: int = 10
    fix_borders: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "TeasarParams":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown skeleton parameters {sorted(unknown)}")
        return cls(**d)


class SkeletonLoopError(ValueError):
    """A skeleton component contains a cycle, so branches cannot be counted."""


@dataclass
class SkeletonGraph:
    nodes: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.int64).reshape(-1, 3)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(edges):
            edges = np.unique(np.sort(edges, axis=1), axis=0)
            edges = edges[edges[:, 0] != edges[:, 1]]
        self.edges = edges
        if len(np.unique(self.nodes, axis=0)) != len(self.nodes):
            raise ValueError("duplicate skeleton nodes")

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def degree(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=len(self.nodes))

    @property
    def endpoints(self) -> np.ndarray:
        return np.flatnonzero(self.degree == 1)

    @property
    def junctions(self) -> np.ndarray:
        return np.flatnonzero(self.degree >= 3)

    def components(self) -> tuple[int, np.ndarray]:
        n = len(self.nodes)
        if n == 0:
            return 0, np.zeros(0, dtype=np.int64)
        return connected_components(self._adjacency(), directed=False)

    def _adjacency(self):
        n = len(self.nodes)
        e = self.edges
        return coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()

    def to_grid(self, shape: Sequence[int]) -> np.ndarray:
        grid = np.zeros(tuple(shape), dtype=bool)
        if len(self.nodes):
            grid[tuple(self.nodes.T)] = True
        return grid

    def to_json(self) -> str:
        return json.dumps({"nodes": self.nodes.tolist(), "edges": self.edges.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "SkeletonGraph":
        d = json.loads(text)
        return cls(np.array(d.get("nodes", []), dtype=np.int64), np.array(d.get("edges", []), dtype=np.int64))


_OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)
                     if (i, j, k) > (0, 0, 0)])


def _voxel_edges(coords: np.ndarray, shape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """26-neighbour pairs among ``coords`` with their Euclidean step lengths."""
    lookup = np.full(shape, -1, dtype=np.int64)
    lookup[tuple(coords.T)] = np.arange(len(coords))
    src, dst, length = [], [], []
    for off in _OFFSETS:
        nb = coords + off
        ok = np.all((nb >= 0) & (nb < np.array(shape)), axis=1)
        j = np.full(len(coords), -1)
        j[ok] = lookup[tuple(nb[ok].T)]
        hit = j >= 0
        src.append(np.flatnonzero(hit))
        dst.append(j[hit])
        length.append(np.full(hit.sum(), np.linalg.norm(off)))
    return np.concatenate(src), np.concatenate(dst), np.concatenate(length)


def graph_from_voxels(grid: np.ndarray) -> SkeletonGraph:
    """Skeleton voxels -> tree by a minimum spanning tree over 26-adjacency."""
    grid = np.asarray(grid, dtype=bool)
    coords = np.argwhere(grid)
    if len(coords) == 0:
        return SkeletonGraph()
    i, j, w = _voxel_edges(coords, grid.shape)
    n = len(coords)
    mst = minimum_spanning_tree(coo_matrix((w, (i, j)), shape=(n, n))).tocoo()
    return SkeletonGraph(coords, np.stack([mst.row, mst.col], axis=1))


def _border_targets(coords: np.ndarray, shape) -> list[int]:
    """One target per connected patch where the object touches the grid faces."""
    targets = []
    for axis in range(3):
        for side in (0, shape[axis] - 1):
            on_face = np.flatnonzero(coords[:, axis] == side)
            if len(on_face) == 0:
                continue
            plane_axes = [a for a in range(3) if a != axis]
            face = np.zeros([shape[a] for a in plane_axes], dtype=bool)
            pts = coords[on_face][:, plane_axes]
            face[tuple(pts.T)] = True
            lab, n = ndimage.label(face, structure=np.ones((3, 3)))
            ids = lab[tuple(pts.T)]
            for k in range(1, n + 1):
                members = on_face[ids == k]
                p = coords[members][:, plane_axes].astype(float)
                c = p.mean(axis=0)
                targets.append(int(members[np.argmin(((p - c) ** 2).sum(axis=1))]))
    # a voxel on an edge/corner can be picked from two faces
    return list(dict.fromkeys(targets))


def _invalidate(coords: np.ndarray, path_pts: np.ndarray, radii: np.ndarray, visited: np.ndarray,
                chunk: int = 64) -> None:
    for s in range(0, len(path_pts), chunk):
        p = path_pts[s:s + chunk].astype(float)
        r2 = radii[s:s + chunk] ** 2
        d2 = ((coords[:, None, :] - p[None, :, :]) ** 2).sum(axis=2)
        visited |= np.any(d2 <= r2[None, :], axis=1)


def _skeletonize_component(coords: np.ndarray, dbf: np.ndarray, shape, params: TeasarParams):
    n = len(coords)
    if n == 1:
        return [0], []
    i, j, length = _voxel_edges(coords, shape)
    geo = coo_matrix((length, (i, j)), shape=(n, n)).tocsr()

    borders = _border_targets(coords, shape) if params.fix_borders else []
    if borders:
        root = borders[0]
    else:
        start = int(np.argmax(dbf))
        dist = dijkstra(geo, directed=False, indices=start)
        root = int(np.argmax(np.where(np.isfinite(dist), dist, -1)))
    daf = dijkstra(geo, directed=False, indices=root)

    max_dbf = dbf.max()
    pdf = params.pdrf_scale * (1.0 - dbf / max_dbf) ** params.pdrf_exponent + 1.0
    cost = coo_matrix((length * 0.5 * (pdf[i] + pdf[j]), (i, j)), shape=(n, n)).tocsr()
    _, pred = dijkstra(cost, directed=False, indices=root, return_predecessors=True)

    on_skel = np.zeros(n, dtype=bool)
    on_skel[root] = True
    visited = np.zeros(n, dtype=bool)
    radii = params.scale * dbf + params.const
    nodes, edges = [root], []
    forced = [b for b in borders[1:]]
    first = True
    while True:
        if forced:
            target = forced.pop(0)
            if on_skel[target]:
                continue
            keep_short = True
        else:
            open_daf = np.where(visited | ~np.isfinite(daf), -1.0, daf)
            target = int(np.argmax(open_daf))
            if open_daf[target] < 0:
                break
            keep_short = first
        path = [target]
        while not on_skel[path[-1]]:
            path.append(int(pred[path[-1]]))
        new = path[:-1]
        if len(new) >= params.tick_threshold or keep_short:
            on_skel[new] = True
            nodes.extend(new)
            edges.extend(zip(path[:-1], path[1:]))
        visited[target] = True
        _invalidate(coords, coords[path], radii[path], visited)
        first = False
    return nodes, edges


def hard_skeletonize(mask: np.ndarray, params: TeasarParams | None = None) -> SkeletonGraph:
    """TEASAR centerline of every 26-connected component of ``mask``."""
    params = params or TeasarParams()
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError("expected a 3D mask")
    if not mask.any():
        return SkeletonGraph()
    # the grid border is not a wall: tubes leaving the volume stay centred
    dbf_full = edt(mask)
    dbf_full[~np.isfinite(dbf_full)] = float(max(mask.shape))
    lab, ncomp = ndimage.label(mask, structure=np.ones((3, 3, 3)))
    all_nodes, all_edges, offset = [], [], 0
    for k in range(1, ncomp + 1):
        coords = np.argwhere(lab == k)
        nodes, edges = _skeletonize_component(coords, dbf_full[tuple(coords.T)], mask.shape, params)
        remap = {v: offset + i for i, v in enumerate(nodes)}
        all_nodes.append(coords[nodes])
        all_edges.extend((remap[a], remap[b]) for a, b in edges)
        offset += len(nodes)
    return SkeletonGraph(np.concatenate(all_nodes), np.array(all_edges, dtype=np.int64).reshape(-1, 2))


def count_branches(graph: SkeletonGraph) -> int:
    """Side branches: endpoints beyond the two ends of each component's main path."""
    ncomp, labels = graph.components()
    if ncomp == 0:
        return 0
    edge_comp = labels[graph.edges[:, 0]] if len(graph.edges) else np.zeros(0, dtype=np.int64)
    n_nodes = np.bincount(labels, minlength=ncomp)
    n_edges = np.bincount(edge_comp, minlength=ncomp)
    if np.any(n_edges >= n_nodes):
        raise SkeletonLoopError("skeleton contains a loop")
    ends = np.bincount(labels[graph.endpoints], minlength=ncomp)
    return int(np.maximum(ends - 2, 0).sum())


# --- soft skeleton -----------------------------------------------------------

def _soft_open(x):
    e, e_vjp = hm.min_filter3(x)
    o, d_vjp = hm.max_filter3(e)
    return o, lambda g: e_vjp(d_vjp(g))


def _soft_skel_core(x: np.ndarray, iterations: int):
    tape = []
    o, o_vjp = _soft_open(x)
    pre = x - o
    skel = np.maximum(pre, 0.0)
    tape.append(("init", pre > 0, o_vjp))
    img = x
    for _ in range(iterations):
        img, e_vjp = hm.min_filter3(img)
        o, o_vjp = _soft_open(img)
        pre = img - o
        delta = np.maximum(pre, 0.0)
        inner = delta - skel * delta
        tape.append(("step", e_vjp, o_vjp, pre > 0, inner > 0, skel.copy(), delta))
        skel = skel + np.maximum(inner, 0.0)

    def vjp(g):
        g_skel = np.asarray(g, dtype=np.float64)
        g_img = np.zeros_like(g_skel)
        for rec in reversed(tape[1:]):
            _, e_vjp, o_vjp, pos, inner_pos, skel_prev, delta = rec
            g_inner = np.where(inner_pos, g_skel, 0.0)
            g_delta = g_inner * (1.0 - skel_prev)
            g_skel = g_skel - g_inner * delta
            g_pre = np.where(pos, g_delta, 0.0)
            g_img = g_img + g_pre - o_vjp(g_pre)
            g_img = e_vjp(g_img)
        _, pos, o_vjp = tape[0]
        g_pre = np.where(pos, g_skel, 0.0)
        return g_img + g_pre - o_vjp(g_pre)

    return skel, vjp


def soft_skeletonize(x: np.ndarray, iterations: int = 10, downsample: bool = True,
                     return_vjp: bool = False):
    """Differentiable skeleton of a soft lumen mask (values in [0, 1]).

    With ``downsample`` the mask is 2x2 average-pooled in-plane first and the
    result is repeated back to full resolution.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError("expected a 3D soft mask")
    if not downsample:
        skel, vjp = _soft_skel_core(x, iterations)
        return (skel, vjp) if return_vjp else skel
    H, W, D = x.shape
    if H % 2 or W % 2:
        raise ValueError("in-plane dims must be even to downsample by 2")
    small = x.reshape(H // 2, 2, W // 2, 2, D).mean(axis=(1, 3))
    skel, core_vjp = _soft_skel_core(small, iterations)
    out = np.repeat(np.repeat(skel, 2, axis=0), 2, axis=1)

    def vjp(g):
        gs = np.asarray(g, dtype=np.float64).reshape(H // 2, 2, W // 2, 2, D).sum(axis=(1, 3))
        gx = core_vjp(gs) / 4.0
        return np.repeat(np.repeat(gx, 2, axis=0), 2, axis=1)

    return (out, vjp) if return_vjp else out


# --- heatmap -------------------------------------------------------------------

@dataclass(frozen=True)
class HeatmapParams:
    sigma: float = 1.0
    kernel_size: int = 3
    pool_kernel: int = 4
    pool_stride: int = 4


def heatmap_from_grid(grid: np.ndarray, latent_shape: Sequence[int], params: HeatmapParams | None = None,
                      return_vjp: bool = False):
    """blur -> /max -> max-pool -> trilinear resize -> /max, as a 1 x h x w x d map.

    The last renormalisation restores a peak of exactly 1 after interpolation.
    """
    p = params or HeatmapParams()
    x = np.asarray(grid, dtype=np.float64)
    b, b_vjp = hm.gaussian_blur(x, p.sigma, p.kernel_size)
    n1, n1_vjp = hm.normalize_max(b)
    pooled, p_vjp = hm.max_pool(n1, p.pool_kernel, p.pool_stride)
    r, r_vjp = hm.resize_linear(pooled, latent_shape)
    out, n2_vjp = hm.normalize_max(r)
    out = np.clip(out, 0.0, 1.0)[None]

    def vjp(g):
        g = np.asarray(g, dtype=np.float64).reshape(out.shape[1:])
        return b_vjp(n1_vjp(p_vjp(r_vjp(n2_vjp(g)))))

    return (out, vjp) if return_vjp else out


def process_skeleton(skel, source_shape: Sequence[int], latent_shape: Sequence[int],
                     params: HeatmapParams | None = None) -> np.ndarray:
    """Skeletal condition map from a SkeletonGraph or a voxel grid; empty -> zeros."""
    grid = skel.to_grid(source_shape) if isinstance(skel, SkeletonGraph) else np.asarray(skel)
    if tuple(grid.shape) != tuple(source_shape):
        raise ValueError(f"skeleton grid {grid.shape} != source shape {tuple(source_shape)}")
    return heatmap_from_grid(grid.astype(np.float64), latent_shape, params)


class SkelRegressor:
    """Hard skeletal regressor: label grid -> heatmap (non-differentiable)."""

    def __init__(self, source_shape: Sequence[int], latent_shape: Sequence[int],
                 params: TeasarParams | None = None, heat: HeatmapParams | None = None):
        self.source_shape = tuple(source_shape)
        self.latent_shape = tuple(latent_shape)
        self.params = params
        self.heat = heat

    def __call__(self, lumen_mask: np.ndarray) -> np.ndarray:
        g = hard_skeletonize(lumen_mask, self.params)
        return process_skeleton(g, self.source_shape, self.latent_shape, self.heat)


class SoftSkelRegressor:
    """Differentiable skeletal regressor on the lumen score channel."""

    def __init__(self, latent_shape: Sequence[int], iterations: int = 10, downsample: bool = True,
                 heat: HeatmapParams | None = None):
        self.latent_shape = tuple(latent_shape)
        self.iterations = iterations
        self.downsample = downsample
        self.heat = heat

    def forward(self, lumen: np.ndarray) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
        s, s_vjp = soft_skeletonize(lumen, self.iterations, self.downsample, return_vjp=True)
        h, h_vjp = heatmap_from_grid(s, self.latent_shape, self.heat, return_vjp=True)
        return h, lambda g: s_vjp(h_vjp(g))

    def __call__(self, lumen: np.ndarray) -> np.ndarray:
        return self.forward(lumen)[0]
