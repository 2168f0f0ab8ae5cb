"""Spatial topology graphs over patch grids and cell maps.

Edges are directed: node v points at its k nearest neighbors, so the edge
list is exactly the neighbor relation the mean aggregator consumes. Edges
are emitted grouped by source node with each node's neighbors in
nearest-first order, which keeps downstream accumulation order independent
of node labelling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CELL_TYPES, WsiBag

DEFAULT_K = 9


@dataclass
class SpatialGraph:
    node_features: np.ndarray   # (N, F) float64
    coords: np.ndarray          # (N, 2) float64, level-0 pixels
    edges: np.ndarray           # (E, 2) int64 [src, dst], no self edges
    scale_tag: str              # small | large | tme
    k: int = DEFAULT_K

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    def out_counts(self) -> np.ndarray:
        """1 + out-degree per node: the divisor for self-inclusive means."""
        deg = np.bincount(self.edges[:, 0], minlength=self.n_nodes) if len(self.edges) else \
            np.zeros(self.n_nodes, dtype=np.int64)
        return deg + 1


def _pairwise_sq_dist(coords: np.ndarray, block: np.ndarray) -> np.ndarray:
    d = block[:, None, :] - coords[None, :, :]
    return (d * d).sum(axis=-1)


def build_knn_graph(coords: np.ndarray, k: int = DEFAULT_K) -> np.ndarray:
    """Directed k-nearest-neighbor edges over 2-d points.

    Ranking uses squared Euclidean distance; ties break toward the lower
    node index. Each node gets min(k, N-1) out-edges; N=1 yields an empty
    edge set.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if n < 1:
        raise ValueError("graph needs at least one node")
    take = min(k, n - 1)
    if take == 0:
        return np.empty((0, 2), dtype=np.int64)
    edges = np.empty((n * take, 2), dtype=np.int64)
    idx = np.arange(n)
    pos = 0
    for start in range(0, n, 512):
        block = slice(start, min(start + 512, n))
        sq = _pairwise_sq_dist(coords, coords[block])
        for row, v in enumerate(range(block.start, block.stop)):
            d = sq[row].copy()
            d[v] = np.inf
            order = np.lexsort((idx, d))[:take]
            edges[pos:pos + take, 0] = v
            edges[pos:pos + take, 1] = order
            pos += take
    return edges


def build_patch_graph(coords: np.ndarray, features: np.ndarray, scale_tag: str,
                      k: int = DEFAULT_K) -> SpatialGraph:
    coords = np.asarray(coords, dtype=np.float64)
    return SpatialGraph(
        node_features=np.asarray(features, dtype=np.float64),
        coords=coords,
        edges=build_knn_graph(coords, k),
        scale_tag=scale_tag,
        k=k,
    )


def cell_features(cells) -> np.ndarray:
    """Per-cell feature rows: one-hot type (7), prob, log nucleus area."""
    feats = np.zeros((len(cells), len(CELL_TYPES) + 2))
    for i, c in enumerate(cells):
        feats[i, CELL_TYPES.index(c.cell_type)] = 1.0
        feats[i, len(CELL_TYPES)] = c.prob
        feats[i, len(CELL_TYPES) + 1] = np.log(c.nucleus_area)
    return feats


def build_tme_graph(cells, k: int = DEFAULT_K) -> SpatialGraph:
    """Cell-map graph with KNN edges computed independently per cell type.

    Cells of different types are never connected; an only-of-its-kind cell
    is simply isolated.
    """
    coords = np.array([[c.x, c.y] for c in cells], dtype=np.float64).reshape(len(cells), 2)
    chunks = []
    for cell_type in CELL_TYPES:
        members = np.array([i for i, c in enumerate(cells) if c.cell_type == cell_type],
                           dtype=np.int64)
        if len(members) < 2:
            continue
        local = build_knn_graph(coords[members], k)
        chunks.append(members[local])
    edges = np.concatenate(chunks, axis=0) if chunks else np.empty((0, 2), dtype=np.int64)
    return SpatialGraph(
        node_features=cell_features(cells),
        coords=coords,
        edges=edges,
        scale_tag="tme",
        k=k,
    )


@dataclass
class BagGraphs:
    """The three graphs a model forward pass consumes, plus bag identity."""

    small: SpatialGraph
    large: SpatialGraph
    tme: SpatialGraph
    label_index: int
    wsi_id: str
    section_kind: str


def bag_to_graphs(bag: WsiBag, k: int = DEFAULT_K) -> BagGraphs:
    if not bag.cells:
        raise ValueError(f"{bag.wsi_id}: TME graph needs at least one cell")
    return BagGraphs(
        small=build_patch_graph(bag.coords_small, bag.features_small, "small", k),
        large=build_patch_graph(bag.coords_large, bag.features_large, "large", k),
        tme=build_tme_graph(bag.cells, k),
        label_index=bag.label_index,
        wsi_id=bag.wsi_id,
        section_kind=bag.section_kind,
    )
