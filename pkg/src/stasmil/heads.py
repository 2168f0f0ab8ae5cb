"""Classification head and the three training losses.

Head composition: the two expert embeddings are concatenated, shifted by a
learned pre-norm bias, LayerNormed, projected to the hidden width, dropped
out, and projected to 2 logits with the output bias applied last. The
L2-normalized post-LayerNorm vector doubles as the contrastive embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorops import (SeededRng, dropout_mask, l2_normalize_rows,
                        l2_normalize_rows_backward, layer_norm, layer_norm_backward)


@dataclass
class LossWeights:
    """Weights of the combined objective plus contrastive settings."""

    supcon: float = 0.2
    consistency: float = 0.2
    ce: float = 0.6
    tau: float = 0.07
    queue_capacity: int = 64

    def validate(self) -> "LossWeights":
        for name in ("supcon", "consistency", "ce"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"loss weight {name}={v} outside (0, 1)")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.queue_capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        return self


def head_forward(params: dict, x1: np.ndarray, x2: np.ndarray, p_drop: float,
                 rng: SeededRng | None, training: bool):
    """Returns ``(logits, z, cache)``; ``z`` is the unit-norm contrastive vector."""
    x = np.concatenate([x1, x2])[None, :]
    shifted = x + params["head.b1"]
    normed, ln_cache = layer_norm(shifted, params["head.ln_g"], params["head.ln_b"])
    z_row, z_cache = l2_normalize_rows(normed)
    hidden = normed @ params["head.w1"].T
    mask = dropout_mask(hidden.shape, p_drop, rng, training)
    dropped = hidden * mask
    logits = (dropped @ params["head.w2"].T)[0] + params["head.b2"]
    cache = (normed, ln_cache, z_cache, hidden, mask, dropped, x1.shape[0])
    return logits, z_row[0], cache


def head_backward(d_logits: np.ndarray, d_z: np.ndarray, params: dict, cache, grads: dict):
    """Backward from logits and the contrastive vector to (d_x1, d_x2)."""
    normed, ln_cache, z_cache, hidden, mask, dropped, split = cache
    grads["head.w2"] += np.outer(d_logits, dropped[0])
    grads["head.b2"] += d_logits
    d_dropped = d_logits[None, :] @ params["head.w2"]
    d_hidden = d_dropped * mask
    grads["head.w1"] += d_hidden.T @ normed
    d_normed = d_hidden @ params["head.w1"]
    d_normed += l2_normalize_rows_backward(d_z[None, :], z_cache)
    d_shifted, d_g, d_b = layer_norm_backward(d_normed, ln_cache)
    grads["head.ln_g"] += d_g
    grads["head.ln_b"] += d_b
    grads["head.b1"] += d_shifted[0]
    return d_shifted[0, :split], d_shifted[0, split:]


def classify(x1: np.ndarray, x2: np.ndarray, params: dict, rng: SeededRng | None = None,
             training: bool = False, p_drop: float = 0.0) -> np.ndarray:
    """Two-class logits for a pair of expert embeddings."""
    logits, _, _ = head_forward(params, x1, x2, p_drop, rng, training)
    return logits


def supcon_loss(embeddings: np.ndarray, labels, tau: float) -> float:
    """Supervised contrastive loss over a batch of unit-norm embeddings.

    Every sample anchors once; its positives are the other same-label
    samples and the denominator runs over all other samples. Anchors
    without positives contribute nothing; the result is the mean over
    anchors that have at least one positive (0.0 if none do).
    """
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = z.shape[0]
    if n < 2:
        raise ValueError("need at least 2 embeddings")
    sims = z @ z.T / tau
    total, anchors = 0.0, 0
    for i in range(n):
        others = np.arange(n) != i
        positives = others & (labels == labels[i])
        if not positives.any():
            continue
        row = sims[i, others]
        log_denom = np.log(np.exp(row - row.max()).sum()) + row.max()
        total += np.mean(log_denom - sims[i, positives])
        anchors += 1
    return total / anchors if anchors else 0.0


def supcon_anchor_grad(z: np.ndarray, label: int, queue_z: np.ndarray, queue_labels,
                       tau: float):
    """Single-anchor contrastive loss against a constant queue.

    The queue entries receive no gradient (they are history); only the
    anchor's cotangent is returned. Empty positives give (0.0, zeros).
    """
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    if queue_z is None or len(queue_z) == 0:
        return 0.0, np.zeros_like(z)
    queue_labels = np.asarray(queue_labels)
    pos = queue_labels == label
    if not pos.any():
        return 0.0, np.zeros_like(z)
    sims = queue_z @ z / tau
    shift = sims.max()
    p = np.exp(sims - shift)
    p /= p.sum()
    log_denom = np.log(np.exp(sims - shift).sum()) + shift
    loss = float(np.mean(log_denom - sims[pos]))
    d_z = (p @ queue_z - queue_z[pos].mean(axis=0)) / tau
    return loss, d_z


def consistency_mse(x1: np.ndarray, x2: np.ndarray) -> float:
    if x1.shape != x2.shape:
        raise ValueError(f"shape mismatch {x1.shape} vs {x2.shape}")
    diff = x1 - x2
    return float((diff * diff).mean())


def consistency_mse_grad(x1: np.ndarray, x2: np.ndarray):
    g = 2.0 * (x1 - x2) / x1.size
    return g, -g


def cross_entropy(logits: np.ndarray, label: int) -> float:
    shift = logits.max()
    log_z = shift + np.log(np.exp(logits - shift).sum())
    return float(log_z - logits[label])


def cross_entropy_grad(logits: np.ndarray, label: int) -> np.ndarray:
    shift = logits.max()
    p = np.exp(logits - shift)
    p /= p.sum()
    p[label] -= 1.0
    return p


def total_loss(components: tuple[float, float, float], weights: LossWeights) -> float:
    """Weighted sum of (supcon, consistency, cross-entropy)."""
    weights.validate()
    sup, mse, ce = components
    return weights.supcon * sup + weights.consistency * mse + weights.ce * ce
