"""Multi-scale graph convolution: 2 stages x 3 parallel branches.

Each stage of each branch is mean aggregation over the node itself and its
out-neighbors, a learned affine, LeakyReLU, LayerNorm, then dropout. The
neighbor sum accumulates in edge-list order (nearest neighbor first) with
the node's own feature seeding the sum, so results are bitwise stable under
node relabelling.
"""

from __future__ import annotations

import numpy as np

from .graphs import SpatialGraph
from .tensorops import (SeededRng, dropout_mask, layer_norm, layer_norm_backward,
                        leaky_relu, leaky_relu_backward, linear, linear_backward)

BRANCHES = ("small", "large", "tme")
STAGES = ("s1", "s2")


def neighbor_mean(graph: SpatialGraph, h: np.ndarray):
    """Self-inclusive neighborhood mean: (h_v + sum of h_u over N(v)) / (1+|N(v)|).

    Returns ``(agg, counts)``; counts feed the backward pass.
    """
    if h.shape[0] != graph.n_nodes:
        raise ValueError(f"feature rows {h.shape[0]} != nodes {graph.n_nodes}")
    acc = h.copy()
    if len(graph.edges):
        np.add.at(acc, graph.edges[:, 0], h[graph.edges[:, 1]])
    counts = graph.out_counts().astype(np.float64)
    return acc / counts[:, None], counts


def neighbor_mean_backward(d_agg: np.ndarray, graph: SpatialGraph,
                           counts: np.ndarray) -> np.ndarray:
    scaled = d_agg / counts[:, None]
    dh = scaled.copy()
    if len(graph.edges):
        np.add.at(dh, graph.edges[:, 1], scaled[graph.edges[:, 0]])
    return dh


def sage_aggregate(graph: SpatialGraph, h: np.ndarray, w: np.ndarray, b: np.ndarray,
                   slope: float = 0.01) -> np.ndarray:
    """One graph-convolution update: LeakyReLU(W . mean({h_v} u N(v)) + b)."""
    agg, _ = neighbor_mean(graph, h)
    return leaky_relu(linear(agg, w, b), slope)


def _stage_forward(graph, h, params, prefix, slope, eps, p_drop, rng, training):
    agg, counts = neighbor_mean(graph, h)
    z = linear(agg, params[f"{prefix}.w"], params[f"{prefix}.b"])
    r = leaky_relu(z, slope)
    normed, ln_cache = layer_norm(r, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"], eps)
    mask = dropout_mask(normed.shape, p_drop, rng, training)
    out = normed * mask
    return out, (agg, counts, z, ln_cache, mask, prefix)


def _stage_backward(d_out, graph, params, cache, grads, slope):
    agg, counts, z, ln_cache, mask, prefix = cache
    d_normed = d_out * mask
    d_r, d_g, d_b = layer_norm_backward(d_normed, ln_cache)
    grads[f"{prefix}.ln_g"] += d_g
    grads[f"{prefix}.ln_b"] += d_b
    d_z = leaky_relu_backward(d_r, z, slope)
    d_agg, d_w, d_bias = linear_backward(d_z, agg, params[f"{prefix}.w"])
    grads[f"{prefix}.w"] += d_w
    grads[f"{prefix}.b"] += d_bias
    return neighbor_mean_backward(d_agg, graph, counts)


def msgc_forward(graphs: dict, params: dict, cfg, rng: SeededRng, training: bool):
    """Run both stages of all three branches.

    Dropout masks are drawn in the fixed order small/large/tme, stage 1
    before stage 2, so a branch's output never depends on another branch's
    feature values. Returns ``(outputs, cache)`` with one (N_b, hidden)
    array per branch.
    """
    outputs, caches = {}, {}
    for branch in BRANCHES:
        graph = graphs[branch]
        h = graph.node_features
        stage_caches = []
        for stage in STAGES:
            prefix = f"msgc.{branch}.{stage}"
            h, cache = _stage_forward(graph, h, params, prefix, cfg.lrelu_slope,
                                      cfg.ln_eps, cfg.dropout, rng, training)
            stage_caches.append(cache)
        outputs[branch] = h
        caches[branch] = stage_caches
    return outputs, caches


def msgc_backward(d_outputs: dict, graphs: dict, params: dict, caches: dict,
                  grads: dict, cfg) -> None:
    """Accumulate parameter gradients for all branches; input grads are dropped
    (node features are data, not parameters)."""
    for branch in BRANCHES:
        d_h = d_outputs[branch]
        for cache in reversed(caches[branch]):
            d_h = _stage_backward(d_h, graphs[branch], params, cache, grads, cfg.lrelu_slope)
