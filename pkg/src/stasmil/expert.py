"""Diffusion attention expert: pooling, linear-time attention, aggregation.

One expert maps the three branch outputs to a fixed token sequence
(adaptive max pooling to 512 + 2048 + 2048 tokens, concatenated in the
order large / small / tme), runs stacked diffusion-attention layers with
residual updates, and reduces the sequence to a bag embedding through an
attention-weighted mean.

The attention kernel is self-normalizing: with the normalization bias set
to the token count L, each output row is the convex combination
``sum_j w_j v_j`` with ``w_j = (q.k_j + 1) / sum_j' (q.k_j' + 1)``, computed
in streaming form (one pass over keys, no L x L matrix).

Upsampling pooling produces long runs of identical tokens, so the expert
internally runs on the distinct tokens with multiplicities (the kernel's
``counts`` argument); this computes the same function as the expanded
sequence and keeps the cost proportional to the bag size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorops import (NORM_FLOOR, adaptive_max_pool_backward,
                        adaptive_max_pool_compressed, l2_normalize_rows,
                        l2_normalize_rows_backward, matmul)

POOL_ORDER = ("large", "small", "tme")


@dataclass
class PooledTokens:
    """Concatenated pooled sequence in run-length-compressed form."""

    unique: np.ndarray        # (U, C) distinct pooled tokens
    counts: np.ndarray        # (U,) multiplicity of each distinct token
    slot_map: np.ndarray      # (T,) slot -> distinct-token index
    provenance: dict          # branch -> (T_branch,) input index per slot
    spans: dict               # branch -> (lo, hi) slot range
    caches: dict              # branch -> max-pool backward cache (unique rows)
    unique_spans: dict        # branch -> (lo, hi) range in unique space

    @property
    def total_slots(self) -> int:
        return len(self.slot_map)

    def expand(self) -> np.ndarray:
        """The full (T, C) token sequence (tests and plain-path comparisons)."""
        return self.unique[self.slot_map]


def pool_and_concat(branch_outputs: dict, targets: dict) -> PooledTokens:
    """Pool each branch to its fixed token count and concatenate.

    Provenance records, per pooled slot, the input token whose L2 norm won
    the bin; attribution routes attention through it.
    """
    uniques, counts, slots, provenance, caches = [], [], [], {}, {}
    spans, unique_spans = {}, {}
    slot_offset = uniq_offset = 0
    for branch in POOL_ORDER:
        feats = branch_outputs[branch]
        if feats.shape[0] < 1:
            raise ValueError(f"empty branch {branch}")
        uniq, cnt, slot_map, prov, cache = adaptive_max_pool_compressed(
            feats, targets[branch])
        uniques.append(uniq)
        counts.append(cnt)
        slots.append(slot_map + uniq_offset)
        provenance[branch] = prov
        caches[branch] = cache
        spans[branch] = (slot_offset, slot_offset + targets[branch])
        unique_spans[branch] = (uniq_offset, uniq_offset + len(uniq))
        slot_offset += targets[branch]
        uniq_offset += len(uniq)
    return PooledTokens(
        unique=np.concatenate(uniques, axis=0),
        counts=np.concatenate(counts),
        slot_map=np.concatenate(slots),
        provenance=provenance, spans=spans, caches=caches, unique_spans=unique_spans)


def pool_backward(d_unique: np.ndarray, pooled: PooledTokens) -> dict:
    """Route distinct-token cotangents back to each branch's input tokens."""
    out = {}
    for branch in POOL_ORDER:
        lo, hi = pooled.unique_spans[branch]
        out[branch] = adaptive_max_pool_backward(d_unique[lo:hi], pooled.caches[branch])
    return out


def diffusion_attention(tokens: np.ndarray, wq: np.ndarray, wk: np.ndarray,
                        wv: np.ndarray, heads: int, bias: float | None = None,
                        counts: np.ndarray | None = None):
    """Streaming attention update over the token sequence.

    Per head, queries and keys are projected, L2-normalized per token, and
    combined through the running moments ``sum_l k_l (x) v_l`` and
    ``sum_l k_l``; the normalization bias defaults to the (multiplicity
    weighted) token count. ``counts`` marks each row's multiplicity when the
    sequence is run-length compressed. Head outputs are averaged and
    broadcast back across the head layout so the result keeps the model
    width. Returns ``(out, cache)``.
    """
    n, width = tokens.shape
    m = width // heads
    if heads * m != width:
        raise ValueError(f"width {width} not divisible by {heads} heads")
    total = float(n) if counts is None else float(counts.sum())
    bias = total if bias is None else float(bias)

    q = matmul(tokens, wq.T).reshape(n, heads, m)
    k = matmul(tokens, wk.T).reshape(n, heads, m)
    v = matmul(tokens, wv.T).reshape(n, heads, m)
    qn, q_cache = l2_normalize_rows(q)
    kn, k_cache = l2_normalize_rows(k)
    kw = kn if counts is None else kn * counts[:, None, None]
    vw = v if counts is None else v * counts[:, None, None]

    # streaming moments as head-batched matmuls: kv = K^T V per head
    k_sum = kw.sum(axis=0)                                          # (H, M)
    kv = kw.transpose(1, 2, 0) @ v.transpose(1, 0, 2)               # (H, M, D)
    v_sum = vw.sum(axis=0)                                          # (H, D)
    num = (qn.transpose(1, 0, 2) @ kv).transpose(1, 0, 2) + v_sum   # (N, H, D)
    den_raw = (qn * k_sum[None]).sum(axis=-1) + bias                # (N, H)
    clamped = den_raw < NORM_FLOOR
    den = np.where(clamped, NORM_FLOOR, den_raw)
    head_out = num / den[:, :, None]
    mean_heads = head_out.mean(axis=1)                              # (N, D)
    out = np.repeat(mean_heads[:, None, :], heads, axis=1).reshape(n, width)
    cache = (tokens, v, qn, kn, q_cache, k_cache, k_sum, kv, num, den,
             clamped, heads, counts, wq, wk, wv)
    return out, cache


def diffusion_attention_backward(d_out: np.ndarray, cache, grads: dict, prefix: str):
    (tokens, v, qn, kn, q_cache, k_cache, k_sum, kv, num, den,
     clamped, heads, counts, wq, wk, wv) = cache
    n, width = tokens.shape

    d_mean = d_out.reshape(n, heads, -1).sum(axis=1)
    d_head = np.repeat(d_mean[:, None, :] / heads, heads, axis=1)
    d_num = d_head / den[:, :, None]
    d_den = -(d_head * num).sum(axis=-1) / (den * den)
    d_den = np.where(clamped, 0.0, d_den)

    d_qn = ((d_num.transpose(1, 0, 2) @ kv.transpose(0, 2, 1)).transpose(1, 0, 2)
            + d_den[:, :, None] * k_sum[None])
    d_kv = qn.transpose(1, 2, 0) @ d_num.transpose(1, 0, 2)
    d_vsum = d_num.sum(axis=0)
    d_ksum = (qn * d_den[:, :, None]).sum(axis=0)
    d_kn = (v.transpose(1, 0, 2) @ d_kv.transpose(0, 2, 1)).transpose(1, 0, 2) + d_ksum[None]
    d_v = (kn.transpose(1, 0, 2) @ d_kv).transpose(1, 0, 2) + d_vsum[None]
    if counts is not None:
        d_kn = d_kn * counts[:, None, None]
        d_v = d_v * counts[:, None, None]

    d_q = l2_normalize_rows_backward(d_qn, q_cache)
    d_k = l2_normalize_rows_backward(d_kn, k_cache)

    d_tokens = matmul(d_q.reshape(n, width), wq)
    d_tokens += matmul(d_k.reshape(n, width), wk)
    d_tokens += matmul(d_v.reshape(n, width), wv)
    grads[f"{prefix}.wq"] += matmul(d_q.reshape(n, width).T, tokens)
    grads[f"{prefix}.wk"] += matmul(d_k.reshape(n, width).T, tokens)
    grads[f"{prefix}.wv"] += matmul(d_v.reshape(n, width).T, tokens)
    return d_tokens


def dam_layer(tokens: np.ndarray, wq, wk, wv, heads: int,
              counts: np.ndarray | None = None):
    """Residual diffusion step: tokens + attention(tokens) (explicit Euler)."""
    attn, cache = diffusion_attention(tokens, wq, wk, wv, heads, counts=counts)
    return tokens + attn, cache


def energy(z: np.ndarray, z_prev: np.ndarray, alpha: float = 1.0, beta: float = 1.0,
           counts: np.ndarray | None = None) -> float:
    """Layer-transition energy diagnostic (never part of the training loss).

    ``alpha`` weights per-token displacement, ``beta`` the all-pairs
    consistency term; the pair sum is expanded so no O(N^2) loop is needed.
    ``counts`` weights rows of a run-length-compressed sequence.
    """
    if z.shape != z_prev.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {z_prev.shape}")
    if alpha < 0 or beta < 0:
        raise ValueError("energy weights must be non-negative")
    c = np.ones(z.shape[0]) if counts is None else counts
    n = float(c.sum())
    diff = z - z_prev
    local = float((c * (diff * diff).sum(axis=1)).sum())
    sq_z = float((c * (z * z).sum(axis=1)).sum())
    sq_p = float((c * (z_prev * z_prev).sum(axis=1)).sum())
    cross = n * sq_z + n * sq_p - 2.0 * float(np.dot(c @ z, c @ z_prev))
    return alpha * local + beta * cross


def expert_forward(branch_outputs: dict, params: dict, prefix: str, cfg,
                   rng=None, training: bool = False, pooled: PooledTokens | None = None):
    """Full expert pipeline for one expert (``prefix`` = 'expert1'/'expert2').

    ``rng``/``training`` are accepted for interface symmetry with the rest
    of the network; the expert itself is deterministic. Pooling has no
    parameters, so a precomputed ``pooled`` sequence may be shared between
    the two experts. Returns ``(embedding, attn, provenance, energies, cache)``
    with ``attn`` holding one softmax weight per pooled slot.
    """
    if pooled is None:
        targets = {"large": cfg.pool_large, "small": cfg.pool_small, "tme": cfg.pool_tme}
        pooled = pool_and_concat(branch_outputs, targets)
    tokens = pooled.unique
    counts = pooled.counts

    layer_caches = []
    energies = []
    for layer in range(1, cfg.dam_layers + 1):
        p = f"{prefix}.dam{layer}"
        new_tokens, cache = dam_layer(tokens, params[f"{p}.wq"], params[f"{p}.wk"],
                                      params[f"{p}.wv"], cfg.heads, counts=counts)
        energies.append(energy(new_tokens, tokens, counts=counts))
        layer_caches.append(cache)
        tokens = new_tokens

    # attention-weighted mean over slots: multiplicity folds into the softmax
    normed, norm_cache = l2_normalize_rows(tokens)
    logits = normed @ params[f"{prefix}.score.w"]
    shifted = np.exp(logits - logits.max())
    mass = counts * shifted
    mass /= mass.sum()                      # group mass: counts[u] * per-slot weight
    pooled_vec = mass @ tokens
    embedding = params[f"{prefix}.agg.w"] @ pooled_vec + params[f"{prefix}.agg.b"]
    attn = (mass / counts)[pooled.slot_map]
    cache = (tokens, normed, norm_cache, mass, pooled_vec, layer_caches, pooled, prefix)
    return embedding, attn, pooled.provenance, energies, cache


def expert_backward(d_embedding: np.ndarray, params: dict, cache, grads: dict, cfg) -> dict:
    """Backward through one expert; returns per-branch input cotangents."""
    tokens, normed, norm_cache, mass, pooled_vec, layer_caches, pooled, prefix = cache

    grads[f"{prefix}.agg.w"] += np.outer(d_embedding, pooled_vec)
    grads[f"{prefix}.agg.b"] += d_embedding
    d_pooled = params[f"{prefix}.agg.w"].T @ d_embedding
    d_mass = tokens @ d_pooled
    d_tokens = np.outer(mass, d_pooled)
    d_logits = mass * (d_mass - np.dot(mass, d_mass))
    grads[f"{prefix}.score.w"] += normed.T @ d_logits
    d_normed = np.outer(d_logits, params[f"{prefix}.score.w"])
    d_tokens += l2_normalize_rows_backward(d_normed, norm_cache)

    for layer in range(cfg.dam_layers, 0, -1):
        attn_cache = layer_caches[layer - 1]
        d_tokens = d_tokens + diffusion_attention_backward(
            d_tokens, attn_cache, grads, f"{prefix}.dam{layer}")

    return pool_backward(d_tokens, pooled)
