"""Patch-level attribution maps and deterministic heatmap rendering.

Pooling breaks the one-to-one token/patch correspondence, so attention is
routed backwards through pooling provenance: each pooled token's weight
goes to the single input token whose norm won its bin. Per expert the
routed mass is renormalized to sum to one within each branch, the two
experts are averaged, and scores are min-max normalized to [0, 1] per
scale (constant scores map to the neutral 0.5).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .data import WsiBag
from .graphs import bag_to_graphs
from .model import EXPERTS, ModelConfig, predict


@dataclass
class AttributionMap:
    scale_tag: str               # "small" (20x detail) or "large" (10x context)
    tile: int
    coords: np.ndarray           # (N, 2) level-0 pixels
    scores: np.ndarray           # (N,) in [0, 1]
    raw: np.ndarray              # per-patch routed attention before normalization

    def sidecar_json(self) -> str:
        entries = [{"x": int(x), "y": int(y), "tile": self.tile, "score": float(s)}
                   for (x, y), s in zip(self.coords, self.scores)]
        return json.dumps({"scale": self.scale_tag, "patches": entries}, sort_keys=True)


@dataclass
class AttributionResult:
    maps: dict                   # scale tag -> AttributionMap
    cell_scores: np.ndarray      # per-cell routed attention (TME branch), [0, 1]
    cell_raw: np.ndarray
    prob_stas: float


def _route(attn: np.ndarray, provenance: dict, spans: dict, sizes: dict) -> dict:
    """Distribute pooled-token attention onto input tokens, per branch.

    The slice of attention belonging to each branch is renormalized to sum
    to one before routing so every branch carries a full unit of mass.
    """
    routed = {}
    for branch, (lo, hi) in spans.items():
        weights = attn[lo:hi]
        weights = weights / weights.sum()
        scores = np.zeros(sizes[branch])
        np.add.at(scores, provenance[branch], weights)
        routed[branch] = scores
    return routed


def _minmax(raw: np.ndarray) -> np.ndarray:
    lo, hi = raw.min(), raw.max()
    if hi - lo == 0.0:
        return np.full_like(raw, 0.5)
    return (raw - lo) / (hi - lo)


def attribute(bag: WsiBag, params: dict, cfg: ModelConfig) -> AttributionResult:
    """Expert-averaged patch contributions for one bag under trained weights."""
    graphs = bag_to_graphs(bag, cfg.knn_k)
    result = predict(params, cfg, graphs)
    targets = {"large": cfg.pool_large, "small": cfg.pool_small, "tme": cfg.pool_tme}
    spans, offset = {}, 0
    for branch in ("large", "small", "tme"):
        spans[branch] = (offset, offset + targets[branch])
        offset += targets[branch]
    sizes = {"large": len(bag.coords_large), "small": len(bag.coords_small),
             "tme": len(bag.cells)}

    per_expert = [_route(result.attn[e], result.provenance[e], spans, sizes)
                  for e in EXPERTS]
    mean = {b: (per_expert[0][b] + per_expert[1][b]) / 2.0 for b in sizes}

    maps = {
        "small": AttributionMap("small", bag.tile_small, np.asarray(bag.coords_small),
                                _minmax(mean["small"]), mean["small"]),
        "large": AttributionMap("large", bag.tile_large, np.asarray(bag.coords_large),
                                _minmax(mean["large"]), mean["large"]),
    }
    return AttributionResult(maps=maps, cell_scores=_minmax(mean["tme"]),
                             cell_raw=mean["tme"], prob_stas=float(result.probs[1]))


def heat_color(score: float) -> tuple[int, int, int]:
    """Piecewise-linear blue -> cyan -> yellow -> red colormap."""
    anchors = [(0.0, (0, 0, 255)), (1 / 3, (0, 255, 255)),
               (2 / 3, (255, 255, 0)), (1.0, (255, 0, 0))]
    s = min(max(score, 0.0), 1.0)
    for (t0, c0), (t1, c1) in zip(anchors, anchors[1:]):
        if s <= t1:
            f = (s - t0) / (t1 - t0)
            return tuple(int(round(c0[i] + f * (c1[i] - c0[i]))) for i in range(3))
    return anchors[-1][1]


def render_heatmap(amap: AttributionMap, out_path, base: Image.Image | None = None,
                   downsample: int = 32, alpha: float = 0.5) -> Image.Image:
    """Alpha-blend score tiles over a base raster and write a PNG.

    Rendering is pure integer/float64 arithmetic on pixel arrays, so two
    renders of the same map are byte-identical.
    """
    extent_x = int((amap.coords[:, 0].max() + amap.tile) // downsample) + 1
    extent_y = int((amap.coords[:, 1].max() + amap.tile) // downsample) + 1
    if base is None:
        canvas = np.full((extent_y, extent_x, 3), 255, dtype=np.float64)
    else:
        canvas = np.asarray(base.convert("RGB"), dtype=np.float64)
        if canvas.shape[0] < extent_y or canvas.shape[1] < extent_x:
            raise ValueError("patch coordinates fall outside the base raster")
    tile_ds = max(1, amap.tile // downsample)
    for (x, y), score in zip(amap.coords, amap.scores):
        c = np.asarray(heat_color(float(score)), dtype=np.float64)
        r0, c0 = int(y // downsample), int(x // downsample)
        region = canvas[r0:r0 + tile_ds, c0:c0 + tile_ds]
        canvas[r0:r0 + tile_ds, c0:c0 + tile_ds] = (1.0 - alpha) * region + alpha * c
    img = Image.fromarray(np.clip(np.rint(canvas), 0, 255).astype(np.uint8))
    img.save(out_path, format="PNG")
    return img


def top_patches(amap: AttributionMap, n: int = 4) -> dict:
    """Indices of the top/middle/low n patches by score (ties by index)."""
    total = len(amap.scores)
    if total < 3 * n:
        raise ValueError(f"need at least {3 * n} patches, got {total}")
    idx = np.arange(total)
    # ties resolve toward the lower patch index in every tier
    low = sorted(idx[np.lexsort((idx, amap.scores))][:n].tolist())
    high = sorted(idx[np.lexsort((idx, -amap.scores))][:n].tolist())
    median = float(np.median(amap.scores))
    middle = sorted(idx[np.lexsort((idx, np.abs(amap.scores - median)))][:n].tolist())
    return {"high": high, "middle": middle, "low": low}


def cell_density_raster(bag: WsiBag, downsample: int = 32) -> Image.Image:
    """Grayscale stand-in thumbnail from cell density (no raw slide needed)."""
    extent = max(int(bag.coords_small[:, 0].max() + bag.tile_small),
                 int(bag.coords_small[:, 1].max() + bag.tile_small),
                 int(max((c.x for c in bag.cells), default=0)) + 1,
                 int(max((c.y for c in bag.cells), default=0)) + 1)
    side = extent // downsample + 1
    grid = np.zeros((side, side))
    for c in bag.cells:
        grid[int(c.y // downsample), int(c.x // downsample)] += 1.0
    if grid.max() > 0:
        grid = grid / grid.max()
    # light background, darker where cells are dense
    img = (255.0 - 200.0 * grid).astype(np.uint8)
    return Image.fromarray(img, mode="L").convert("RGB")
