"""Model assembly: configuration, parameter init, end-to-end forward/backward.

The architecture is fixed: three MSGC branches feed two independent,
identically-shaped diffusion-attention experts whose embeddings meet in the
classification head. Gradients are hand-composed from the per-module
backward passes; there is no autodiff tape.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import expert as expert_mod
from . import msgc as msgc_mod
from .graphs import BagGraphs
from .heads import (LossWeights, consistency_mse, consistency_mse_grad, cross_entropy,
                    cross_entropy_grad, head_backward, head_forward, supcon_anchor_grad,
                    total_loss)
from .tensorops import SeededRng

EXPERTS = ("expert1", "expert2")


@dataclass
class ModelConfig:
    feature_dim: int = 768
    cell_feature_dim: int = 9
    hidden: int = 256
    pool_large: int = 512
    pool_small: int = 2048
    pool_tme: int = 2048
    heads: int = 8
    dam_layers: int = 2
    expert_dim: int = 128
    head_hidden: int = 64
    n_classes: int = 2
    lrelu_slope: float = 0.01
    ln_eps: float = 1e-5
    dropout: float = 0.2
    knn_k: int = 9

    def validate(self) -> "ModelConfig":
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def small(cls) -> "ModelConfig":
        """Tiny configuration for gradient checks and fast tests."""
        return cls(feature_dim=12, hidden=16, pool_large=4, pool_small=8, pool_tme=8,
                   heads=2, dam_layers=2, expert_dim=8, head_hidden=8)


def config_hash(model_cfg: ModelConfig, extra: dict | None = None) -> str:
    payload = model_cfg.to_json() + json.dumps(extra or {}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _glorot(rng: SeededRng, fan_out: int, fan_in: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, (fan_out, fan_in))


def init_params(cfg: ModelConfig, seed: int) -> dict:
    """Deterministic Glorot-uniform init; the seed is the init metadata."""
    cfg.validate()
    rng = SeededRng(seed)
    params: dict[str, np.ndarray] = {}

    in_dims = {"small": cfg.feature_dim, "large": cfg.feature_dim, "tme": cfg.cell_feature_dim}
    for branch in msgc_mod.BRANCHES:
        for stage in msgc_mod.STAGES:
            d_in = in_dims[branch] if stage == "s1" else cfg.hidden
            p = f"msgc.{branch}.{stage}"
            params[f"{p}.w"] = _glorot(rng, cfg.hidden, d_in)
            params[f"{p}.b"] = np.zeros(cfg.hidden)
            params[f"{p}.ln_g"] = np.ones(cfg.hidden)
            params[f"{p}.ln_b"] = np.zeros(cfg.hidden)

    for e in EXPERTS:
        for layer in range(1, cfg.dam_layers + 1):
            p = f"{e}.dam{layer}"
            params[f"{p}.wq"] = _glorot(rng, cfg.hidden, cfg.hidden)
            params[f"{p}.wk"] = _glorot(rng, cfg.hidden, cfg.hidden)
            params[f"{p}.wv"] = _glorot(rng, cfg.hidden, cfg.hidden)
        params[f"{e}.score.w"] = _glorot(rng, 1, cfg.hidden)[0]
        params[f"{e}.agg.w"] = _glorot(rng, cfg.expert_dim, cfg.hidden)
        params[f"{e}.agg.b"] = np.zeros(cfg.expert_dim)

    params["head.b1"] = np.zeros(2 * cfg.expert_dim)
    params["head.ln_g"] = np.ones(2 * cfg.expert_dim)
    params["head.ln_b"] = np.zeros(2 * cfg.expert_dim)
    params["head.w1"] = _glorot(rng, cfg.head_hidden, 2 * cfg.expert_dim)
    params["head.w2"] = _glorot(rng, cfg.n_classes, cfg.head_hidden)
    params["head.b2"] = np.zeros(cfg.n_classes)
    return params


def zero_grads(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


@dataclass
class ForwardResult:
    logits: np.ndarray
    probs: np.ndarray
    z: np.ndarray                      # unit-norm contrastive embedding
    embeddings: dict                   # expert name -> (expert_dim,)
    attn: dict                         # expert name -> (T,) token attentions
    provenance: dict                   # expert name -> branch -> indices
    energies: dict                     # expert name -> per-layer diagnostics
    cache: tuple | None = None


def forward(params: dict, cfg: ModelConfig, graphs: BagGraphs,
            rng: SeededRng | None = None, training: bool = False) -> ForwardResult:
    graph_map = {"small": graphs.small, "large": graphs.large, "tme": graphs.tme}
    branch_out, msgc_cache = msgc_mod.msgc_forward(graph_map, params, cfg, rng, training)
    targets = {"large": cfg.pool_large, "small": cfg.pool_small, "tme": cfg.pool_tme}
    pooled = expert_mod.pool_and_concat(branch_out, targets)

    embeddings, attns, provenances, energies, expert_caches = {}, {}, {}, {}, {}
    for e in EXPERTS:
        emb, attn, prov, ens, cache = expert_mod.expert_forward(
            branch_out, params, e, cfg, rng, training, pooled=pooled)
        embeddings[e] = emb
        attns[e] = attn
        provenances[e] = prov
        energies[e] = ens
        expert_caches[e] = cache

    logits, z, head_cache = head_forward(params, embeddings["expert1"], embeddings["expert2"],
                                         cfg.dropout, rng, training)
    shifted = logits - logits.max()
    probs = np.exp(shifted)
    probs /= probs.sum()
    return ForwardResult(
        logits=logits, probs=probs, z=z, embeddings=embeddings, attn=attns,
        provenance=provenances, energies=energies,
        cache=(graph_map, msgc_cache, expert_caches, head_cache),
    )


@dataclass
class LossParts:
    total: float
    supcon: float
    consistency: float
    ce: float

    def as_dict(self) -> dict:
        return {"loss": self.total, "supcon": self.supcon,
                "consistency": self.consistency, "ce": self.ce}


def loss_and_grads(params: dict, cfg: ModelConfig, graphs: BagGraphs,
                   weights: LossWeights, queue_z, queue_labels,
                   rng: SeededRng | None = None, training: bool = False):
    """One bag's weighted loss, its parts, gradients, and the forward result."""
    result = forward(params, cfg, graphs, rng, training)
    graph_map, msgc_cache, expert_caches, head_cache = result.cache
    label = graphs.label_index

    sup, d_z = supcon_anchor_grad(result.z, label, queue_z, queue_labels, weights.tau)
    x1, x2 = result.embeddings["expert1"], result.embeddings["expert2"]
    mse = consistency_mse(x1, x2)
    ce = cross_entropy(result.logits, label)
    parts = LossParts(total=total_loss((sup, mse, ce), weights),
                      supcon=sup, consistency=mse, ce=ce)

    grads = zero_grads(params)
    d_logits = weights.ce * cross_entropy_grad(result.logits, label)
    d_x1, d_x2 = head_backward(d_logits, weights.supcon * d_z, params, head_cache, grads)
    g1, g2 = consistency_mse_grad(x1, x2)
    d_x1 = d_x1 + weights.consistency * g1
    d_x2 = d_x2 + weights.consistency * g2

    d_branches = None
    for e, d_emb in (("expert1", d_x1), ("expert2", d_x2)):
        d_b = expert_mod.expert_backward(d_emb, params, expert_caches[e], grads, cfg)
        if d_branches is None:
            d_branches = d_b
        else:
            for k in d_branches:
                d_branches[k] = d_branches[k] + d_b[k]

    msgc_mod.msgc_backward(d_branches, graph_map, params, msgc_cache, grads, cfg)
    return parts, grads, result


def predict(params: dict, cfg: ModelConfig, graphs: BagGraphs) -> ForwardResult:
    """Inference pass: dropout off, no RNG consumption."""
    return forward(params, cfg, graphs, rng=None, training=False)
