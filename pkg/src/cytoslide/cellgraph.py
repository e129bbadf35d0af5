"""Graph-based cell detection.

The ROI image is over-segmented with QuickShift, each superpixel is reduced
to its mean colour, and adjacent superpixels are joined by edges weighted
with the difference of their colour-vector norms. Cutting the high-weight
edges isolates dark regions (nuclei); cell bodies are grown outward from each
nucleus across low-weight edges.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .raster import RasterError, to_rgb, write_png

NUCLEI_THRESHOLD = 59.0


@dataclass(frozen=True)
class SuperpixelMap:
    labels: np.ndarray       # (H, W) int32, dense ids 0..K-1
    area: np.ndarray         # (K,)
    centroid: np.ndarray     # (K, 2) as (x, y)
    mean_color: np.ndarray   # (K, 3) on the 0-255 scale

    @property
    def n(self) -> int:
        return len(self.area)


@dataclass(frozen=True)
class RegionGraph:
    sp: SuperpixelMap
    edges: np.ndarray        # (E, 2) with u < v, lexicographically sorted
    weights: np.ndarray      # (E,)

    @property
    def n_nodes(self) -> int:
        return self.sp.n

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.sp.mean_color, axis=1)

    def neighbours(self, max_weight: float = np.inf) -> list[list[tuple[int, float]]]:
        adj: list[list[tuple[int, float]]] = [[] for _ in range(self.n_nodes)]
        for (u, v), w in zip(self.edges.tolist(), self.weights.tolist()):
            if w <= max_weight:
                adj[u].append((v, w))
                adj[v].append((u, w))
        for lst in adj:
            lst.sort()
        return adj

    def edge_table(self) -> str:
        rows = ["u,v,weight"] + [f"{u},{v},{w:.4f}" for (u, v), w in
                                 zip(self.edges.tolist(), self.weights.tolist())]
        return "\n".join(rows) + "\n"


@dataclass(frozen=True)
class NucleiMask:
    mask: np.ndarray
    components: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class CellSubgraph:
    nucleus: int
    members: tuple[int, ...]
    mask: np.ndarray


def _shifted(a: np.ndarray, dy: int, dx: int):
    """Views ``(base, moved)`` over the overlap of ``a`` and ``a`` shifted by (dy, dx)."""
    h, w = a.shape[:2]
    ys, ye = max(0, -dy), min(h, h - dy)
    xs, xe = max(0, -dx), min(w, w - dx)
    return (slice(ys, ye), slice(xs, xe)), (slice(ys + dy, ye + dy), slice(xs + dx, xe + dx))


def _window(max_dist: float, shape: tuple[int, int]):
    """Window offsets in raster order, minus those that miss the image entirely."""
    r = int(np.floor(max_dist))
    h, w = shape[:2]
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
            if (dy, dx) != (0, 0) and abs(dy) < h and abs(dx) < w]


def quickshift_density(rgb: np.ndarray, kernel_size: float, max_dist: float, ratio: float) -> np.ndarray:
    """Gaussian Parzen density over joint (ratio*x, ratio*y, r, g, b) features."""
    f = rgb.astype(np.float64)
    inv = 1.0 / (2.0 * kernel_size ** 2)
    dens = np.ones(f.shape[:2])
    for dy, dx in _window(max_dist, f.shape):
        base, moved = _shifted(f, dy, dx)
        d2 = ((f[base] - f[moved]) ** 2).sum(-1) + ratio ** 2 * (dx * dx + dy * dy)
        dens[base] += np.exp(-d2 * inv)
    return dens


def quickshift_parents(rgb: np.ndarray, density: np.ndarray, max_dist: float, ratio: float) -> np.ndarray:
    """Link each pixel to its nearest strictly-higher neighbour in joint space.

    Equal densities rank the smaller linear index higher. Links longer than
    ``max_dist`` (joint distance) are not made; unlinked pixels are roots.
    """
    f = rgb.astype(np.float64)
    h, w = density.shape
    idx = np.arange(h * w).reshape(h, w)
    parent = idx.copy()
    best = np.full((h, w), np.inf)
    limit = max_dist ** 2
    # Offsets in raster order, so with strict "<" the smaller index wins ties.
    for dy, dx in _window(max_dist, f.shape):
        base, moved = _shifted(f, dy, dx)
        d2 = ((f[base] - f[moved]) ** 2).sum(-1) + ratio ** 2 * (dx * dx + dy * dy)
        dp, dq = density[base], density[moved]
        higher = (dq > dp) | ((dq == dp) & (idx[moved] < idx[base]))
        take = higher & (d2 <= limit) & (d2 < best[base])
        best[base] = np.where(take, d2, best[base])
        parent[base] = np.where(take, idx[moved], parent[base])
    return parent.ravel()


def _roots(parent: np.ndarray) -> np.ndarray:
    p = parent.copy()
    while True:
        q = p[p]
        if np.array_equal(q, p):
            return p
        p = q


def _split_4connected(labels: np.ndarray) -> np.ndarray:
    """Relabel so every id is one 4-connected region; ids ordered by first pixel."""
    h, w = labels.shape
    idx = np.arange(h * w).reshape(h, w)
    right = labels[:, :-1] == labels[:, 1:]
    down = labels[:-1, :] == labels[1:, :]
    src = np.concatenate([idx[:, :-1][right], idx[:-1, :][down]])
    dst = np.concatenate([idx[:, 1:][right], idx[1:, :][down]])
    graph = coo_matrix((np.ones(src.size, dtype=np.int8), (src, dst)), shape=(h * w, h * w))
    _, comp = connected_components(graph, directed=False)
    _, first = np.unique(comp, return_index=True)
    rank = np.empty(first.size, dtype=np.int32)
    rank[np.argsort(np.argsort(first))] = np.arange(first.size)
    return rank[comp].reshape(h, w)


def superpixel_stats(labels: np.ndarray, img) -> SuperpixelMap:
    rgb = to_rgb(img).astype(np.float64)
    lab = labels.ravel()
    k = int(lab.max()) + 1
    area = np.bincount(lab, minlength=k)
    ys, xs = np.divmod(np.arange(lab.size), labels.shape[1])
    cx = np.bincount(lab, weights=xs, minlength=k) / area
    cy = np.bincount(lab, weights=ys, minlength=k) / area
    mean = np.stack([np.bincount(lab, weights=rgb[:, :, c].ravel(), minlength=k) / area
                     for c in range(3)], axis=1)
    return SuperpixelMap(labels.astype(np.int32), area, np.stack([cx, cy], axis=1), mean)


def quickshift(img, kernel_size: float = 3.0, max_dist: float = 8.0, ratio: float = 0.5) -> SuperpixelMap:
    if kernel_size <= 0:
        raise ValueError("kernel_size must be > 0")
    if max_dist < kernel_size:
        raise ValueError("max_dist must be >= kernel_size")
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    rgb = to_rgb(img)
    dens = quickshift_density(rgb, kernel_size, max_dist, ratio)
    parent = quickshift_parents(rgb, dens, max_dist, ratio)
    labels = _split_4connected(_roots(parent).reshape(dens.shape))
    return superpixel_stats(labels, rgb)


def mean_color_image(sp: SuperpixelMap, img=None) -> np.ndarray:
    if img is not None and np.asarray(img).shape[:2] != sp.labels.shape:
        raise RasterError("image and superpixel map differ in size")
    colors = np.rint(sp.mean_color).clip(0, 255).astype(np.uint8)
    return colors[sp.labels]


def build_region_graph(sp: SuperpixelMap) -> RegionGraph:
    lab = sp.labels
    a = np.concatenate([lab[:, :-1].ravel(), lab[:-1, :].ravel()])
    b = np.concatenate([lab[:, 1:].ravel(), lab[1:, :].ravel()])
    diff = a != b
    pairs = np.stack([np.minimum(a[diff], b[diff]), np.maximum(a[diff], b[diff])], axis=1)
    edges = np.unique(pairs, axis=0) if len(pairs) else np.zeros((0, 2), dtype=np.int64)
    norms = np.linalg.norm(sp.mean_color, axis=1)
    weights = np.abs(norms[edges[:, 0]] - norms[edges[:, 1]]) if len(edges) else np.zeros(0)
    return RegionGraph(sp, edges.astype(np.int64), weights)


def otsu_cutoff(values) -> float | None:
    """Two-class Otsu split of real values.

    Returns the smallest value of the upper class (so the lower class is
    ``values < cutoff``), or ``None`` when all values are equal.
    """
    v = np.sort(np.asarray(values, dtype=np.float64))
    uniq, counts = np.unique(v, return_counts=True)
    if uniq.size < 2:
        return None
    w0 = np.cumsum(counts)[:-1].astype(np.float64)
    s0 = np.cumsum(uniq * counts)[:-1]
    total, s = counts.sum(), (uniq * counts).sum()
    w1 = total - w0
    var = w0 * w1 * (s0 / w0 - (s - s0) / w1) ** 2
    return float(uniq[int(np.argmax(var)) + 1])


def _components(g: RegionGraph, threshold: float) -> np.ndarray:
    keep = g.weights <= threshold
    e = g.edges[keep]
    n = g.n_nodes
    graph = coo_matrix((np.ones(len(e), dtype=np.int8), (e[:, 0], e[:, 1])), shape=(n, n))
    return connected_components(graph, directed=False)[1]


def count_components(g: RegionGraph, threshold: float) -> int:
    return int(_components(g, threshold).max()) + 1 if g.n_nodes else 0


def nuclei_cut(g: RegionGraph, threshold: float = NUCLEI_THRESHOLD,
               dark_cutoff: float | str = "otsu") -> NucleiMask:
    """Drop edges heavier than ``threshold`` and keep the dark components.

    A component's darkness is the area-weighted mean of its node colour norms;
    it is a nucleus when that falls below ``dark_cutoff`` (``"otsu"`` splits
    the per-component darkness values).
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    comp = _components(g, threshold)
    k = int(comp.max()) + 1 if comp.size else 0
    area = g.sp.area.astype(np.float64)
    darkness = np.bincount(comp, weights=g.norms * area, minlength=k) / np.bincount(
        comp, weights=area, minlength=k)
    cutoff = otsu_cutoff(darkness) if dark_cutoff == "otsu" else float(dark_cutoff)
    if cutoff is None:
        nuclear = np.zeros(k, dtype=bool)
    else:
        nuclear = darkness < cutoff
    groups = [tuple(np.flatnonzero(comp == c).tolist()) for c in np.flatnonzero(nuclear)]
    groups.sort()
    node_on = np.zeros(g.n_nodes, dtype=bool)
    for grp in groups:
        node_on[list(grp)] = True
    return NucleiMask(node_on[g.sp.labels], tuple(groups))


def cell_subgraphs(g: RegionGraph, nuclei: NucleiMask, grow_threshold: float = NUCLEI_THRESHOLD,
                   background_norm: float | None = None) -> list[CellSubgraph]:
    """Grow a cell body from each nucleus by breadth-first search.

    A neighbour joins when the connecting edge weighs at most
    ``grow_threshold`` and its colour norm is below ``background_norm``
    (default: Otsu over all node norms). Nodes may join several cells.
    """
    if grow_threshold < 0:
        raise ValueError("grow_threshold must be >= 0")
    norms = g.norms
    if background_norm is None:
        background_norm = otsu_cutoff(norms)
        if background_norm is None:
            background_norm = np.inf
    adj = g.neighbours(grow_threshold)
    out = []
    for cid, seed in enumerate(nuclei.components):
        members = set(seed)
        queue = deque(sorted(seed))
        while queue:
            u = queue.popleft()
            for v, _ in adj[u]:
                if v not in members and norms[v] < background_norm:
                    members.add(v)
                    queue.append(v)
        ids = tuple(sorted(members))
        out.append(CellSubgraph(cid, ids, np.isin(g.sp.labels, ids)))
    return out


def write_label_map(path, sp: SuperpixelMap) -> None:
    if sp.n > 65536:
        raise ValueError(f"{sp.n} superpixels do not fit a 16-bit label map")
    write_png(Path(path), sp.labels.astype(np.uint16))
