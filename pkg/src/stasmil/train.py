"""Optimization loop, checkpointing, and five-fold cross-validation.

Training is strictly sequential and seeded: per-epoch bag order, dropout
masks, and the contrastive queue all derive from one RNG stream whose state
is checkpointed, so save/resume reproduces an uninterrupted run bit for
bit.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import WsiBag
from .graphs import BagGraphs, bag_to_graphs
from .heads import LossWeights, consistency_mse, cross_entropy, supcon_anchor_grad
from .metrics import EvalReport, threshold_report
from .model import ModelConfig, config_hash, forward, init_params, loss_and_grads, zero_grads
from .tensorops import SeededRng, global_norm

CKPT_MAGIC = b"STMLCKPT"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 100
    batch: int = 1                      # fixed; bags vary in size
    dropout: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    clip_norm: float = 5.0
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    # optional early exit once training accuracy reaches this level; the
    # epoch cap still applies
    stop_at_train_acc: float | None = None

    def validate(self) -> "TrainConfig":
        if self.batch != 1:
            raise ValueError("batch size is fixed at 1 (bags have varying sizes)")
        for name in ("lr", "epochs", "beta1", "beta2", "eps", "plateau_factor",
                     "plateau_patience", "clip_norm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        self.loss.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d and isinstance(d["loss"], dict):
            d["loss"] = LossWeights(**d["loss"])
        return cls(**d).validate()


def adamw_step(params: dict, grads: dict, m: dict, v: dict, t: int, cfg: TrainConfig,
               lr: float) -> None:
    """Decoupled-weight-decay adaptive-moment update, in place.

    Weight decay is scaled by the learning rate, so lr=0 freezes everything.
    """
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        p -= lr * cfg.weight_decay * p
        m[name] = cfg.beta1 * m[name] + (1.0 - cfg.beta1) * g
        v[name] = cfg.beta2 * v[name] + (1.0 - cfg.beta2) * (g * g)
        p -= lr * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + cfg.eps)


class ContrastiveQueue:
    """FIFO of the most recent (unit embedding, label) pairs; entries are
    constants for loss purposes (no gradient flows into history)."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self.dim = dim
        self.z: list[np.ndarray] = []
        self.labels: list[int] = []

    def push(self, z: np.ndarray, label: int) -> None:
        self.z.append(np.array(z, dtype=np.float64))
        self.labels.append(int(label))
        if len(self.z) > self.capacity:
            self.z.pop(0)
            self.labels.pop(0)

    def arrays(self):
        if not self.z:
            return None, None
        return np.stack(self.z), np.asarray(self.labels)

    def state(self):
        z, labels = self.arrays()
        return (np.empty((0, self.dim)) if z is None else z,
                [] if labels is None else [int(x) for x in labels])

    def restore(self, z: np.ndarray, labels) -> None:
        self.z = [row.copy() for row in np.asarray(z, dtype=np.float64)]
        self.labels = [int(x) for x in labels]


@dataclass
class Checkpoint:
    params: dict
    opt_m: dict
    opt_v: dict
    step: int
    epoch: int
    lr: float
    plateau_best: float | None
    plateau_bad: int
    best_val_loss: float | None
    rng_state: dict
    queue_z: np.ndarray
    queue_labels: list
    log: list
    model_config: dict
    train_config: dict
    config_hash: str


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    encoded = name.encode()
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(struct.pack("<I", zlib.crc32(payload)))
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def _read_tensor(fh):
    name_len = struct.unpack("<H", fh.read(2))[0]
    name = fh.read(name_len).decode()
    ndim = struct.unpack("<B", fh.read(1))[0]
    shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
    crc = struct.unpack("<I", fh.read(4))[0]
    size = struct.unpack("<Q", fh.read(8))[0]
    payload = fh.read(size)
    if zlib.crc32(payload) != crc:
        raise ValueError(f"checkpoint tensor {name}: checksum mismatch")
    return name, np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "step": ckpt.step, "epoch": ckpt.epoch, "lr": ckpt.lr,
        "plateau_best": ckpt.plateau_best, "plateau_bad": ckpt.plateau_bad,
        "best_val_loss": ckpt.best_val_loss, "rng_state": ckpt.rng_state,
        "queue_labels": ckpt.queue_labels, "log": ckpt.log,
        "model_config": ckpt.model_config, "train_config": ckpt.train_config,
        "config_hash": ckpt.config_hash,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        tensors = [("queue.z", ckpt.queue_z)]
        tensors += [(f"params.{k}", v) for k, v in sorted(ckpt.params.items())]
        tensors += [(f"opt.m.{k}", v) for k, v in sorted(ckpt.opt_m.items())]
        tensors += [(f"opt.v.{k}", v) for k, v in sorted(ckpt.opt_v.items())]
        fh.write(struct.pack("<Q", len(tensors)))
        for name, arr in tensors:
            _write_tensor(fh, name, arr)


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta_len = struct.unpack("<Q", fh.read(8))[0]
        meta = json.loads(fh.read(meta_len).decode())
        count = struct.unpack("<Q", fh.read(8))[0]
        params, opt_m, opt_v = {}, {}, {}
        queue_z = np.empty((0, 0))
        for _ in range(count):
            name, arr = _read_tensor(fh)
            if name == "queue.z":
                queue_z = arr
            elif name.startswith("params."):
                params[name[len("params."):]] = arr
            elif name.startswith("opt.m."):
                opt_m[name[len("opt.m."):]] = arr
            elif name.startswith("opt.v."):
                opt_v[name[len("opt.v."):]] = arr
    return Checkpoint(
        params=params, opt_m=opt_m, opt_v=opt_v, step=meta["step"], epoch=meta["epoch"],
        lr=meta["lr"], plateau_best=meta["plateau_best"], plateau_bad=meta["plateau_bad"],
        best_val_loss=meta["best_val_loss"], rng_state=meta["rng_state"],
        queue_z=queue_z, queue_labels=meta["queue_labels"], log=meta["log"],
        model_config=meta["model_config"], train_config=meta["train_config"],
        config_hash=meta["config_hash"])


def _as_graphs(bags, k: int) -> list[BagGraphs]:
    out = []
    for b in bags:
        out.append(bag_to_graphs(b, k) if isinstance(b, WsiBag) else b)
    return out


def _eval_pass(params, cfg, graph_list, weights, queue_z, queue_labels):
    """Inference metrics over a bag list: mean loss parts, accuracy, scores."""
    probs, labels = [], []
    sup_t = mse_t = ce_t = 0.0
    for g in graph_list:
        res = forward(params, cfg, g, rng=None, training=False)
        probs.append(float(res.probs[1]))
        labels.append(g.label_index)
        sup, _ = supcon_anchor_grad(res.z, g.label_index, queue_z, queue_labels, weights.tau)
        sup_t += sup
        mse_t += consistency_mse(res.embeddings["expert1"], res.embeddings["expert2"])
        ce_t += cross_entropy(res.logits, g.label_index)
    n = len(graph_list)
    parts = {"supcon": sup_t / n, "consistency": mse_t / n, "ce": ce_t / n}
    parts["loss"] = (weights.supcon * parts["supcon"]
                     + weights.consistency * parts["consistency"]
                     + weights.ce * parts["ce"])
    preds = [p >= 0.5 for p in probs]
    acc = float(np.mean([p == bool(l) for p, l in zip(preds, labels)]))
    return parts, acc, np.asarray(probs), np.asarray(labels)


def _snapshot(params, opt_m, opt_v, step, epoch, lr, plateau_best, plateau_bad,
              best_val_loss, rng, queue, log, model_cfg, train_cfg) -> Checkpoint:
    qz, qlabels = queue.state()
    return Checkpoint(
        params={k: v.copy() for k, v in params.items()},
        opt_m={k: v.copy() for k, v in opt_m.items()},
        opt_v={k: v.copy() for k, v in opt_v.items()},
        step=step, epoch=epoch, lr=lr, plateau_best=plateau_best,
        plateau_bad=plateau_bad, best_val_loss=best_val_loss,
        rng_state=rng.state, queue_z=qz.copy(), queue_labels=list(qlabels),
        log=json.loads(json.dumps(log)),
        model_config=asdict(model_cfg), train_config=train_cfg.to_dict(),
        config_hash=config_hash(model_cfg, train_cfg.to_dict()))


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    log: list


def train_fold(train_bags, val_bags, model_cfg: ModelConfig, train_cfg: TrainConfig,
               resume: Checkpoint | None = None) -> TrainResult:
    """Train on one fold split; returns the lowest-validation-loss checkpoint.

    Pass a ``resume`` checkpoint to continue a run: the parameter, optimizer,
    queue, scheduler, and RNG state are restored exactly.
    """
    train_cfg.validate()
    cfg = replace(model_cfg, dropout=train_cfg.dropout).validate()
    if not train_bags or not val_bags:
        raise ValueError("train and validation splits must be non-empty")
    train_graphs = _as_graphs(train_bags, cfg.knn_k)
    val_graphs = _as_graphs(val_bags, cfg.knn_k)
    weights = train_cfg.loss

    rng = SeededRng(train_cfg.seed)
    queue = ContrastiveQueue(weights.queue_capacity, 2 * cfg.expert_dim)
    if resume is None:
        params = init_params(cfg, train_cfg.seed)
        opt_m, opt_v = zero_grads(params), zero_grads(params)
        step, start_epoch, lr = 0, 0, train_cfg.lr
        plateau_best, plateau_bad, best_val_loss = None, 0, None
        log: list[dict] = []
        best = None
    else:
        params = {k: v.copy() for k, v in resume.params.items()}
        opt_m = {k: v.copy() for k, v in resume.opt_m.items()}
        opt_v = {k: v.copy() for k, v in resume.opt_v.items()}
        step, start_epoch, lr = resume.step, resume.epoch, resume.lr
        plateau_best, plateau_bad = resume.plateau_best, resume.plateau_bad
        best_val_loss = resume.best_val_loss
        rng.set_state(resume.rng_state)
        queue.restore(resume.queue_z, resume.queue_labels)
        log = json.loads(json.dumps(resume.log))
        best = resume

    epoch = start_epoch
    for epoch in range(start_epoch + 1, train_cfg.epochs + 1):
        order = rng.permutation(len(train_graphs))
        sums = {"loss": 0.0, "supcon": 0.0, "consistency": 0.0, "ce": 0.0}
        clipped = 0
        energy_sum = 0.0
        for idx in order:
            g = train_graphs[idx]
            qz, qlabels = queue.arrays()
            parts, grads, res = loss_and_grads(params, cfg, g, weights, qz, qlabels,
                                               rng=rng, training=True)
            if not np.isfinite(parts.total):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} on bag {g.wsi_id}: {parts}")
            # sorted iteration keeps the norm independent of dict insertion
            # order, so resumed runs reduce in the same order as fresh ones
            gnorm = global_norm([grads[k] for k in sorted(grads)])
            if gnorm > train_cfg.clip_norm:
                scale = train_cfg.clip_norm / gnorm
                for k in grads:
                    grads[k] *= scale
                clipped += 1
            step += 1
            adamw_step(params, grads, opt_m, opt_v, step, train_cfg, lr)
            queue.push(res.z, g.label_index)
            for k in sums:
                sums[k] += getattr(parts, "total" if k == "loss" else k)
            energy_sum += float(np.mean([np.mean(e) for e in res.energies.values()]))

        qz, qlabels = queue.arrays()
        train_parts, train_acc, _, _ = _eval_pass(params, cfg, train_graphs, weights,
                                                  qz, qlabels)
        val_parts, val_acc, _, _ = _eval_pass(params, cfg, val_graphs, weights, qz, qlabels)
        n_steps = len(train_graphs)
        entry = {"epoch": epoch, "lr": lr,
                 "step_loss": sums["loss"] / n_steps,
                 "step_supcon": sums["supcon"] / n_steps,
                 "step_consistency": sums["consistency"] / n_steps,
                 "step_ce": sums["ce"] / n_steps,
                 "train_loss": train_parts["loss"], "train_acc": train_acc,
                 "val_loss": val_parts["loss"], "val_supcon": val_parts["supcon"],
                 "val_consistency": val_parts["consistency"], "val_ce": val_parts["ce"],
                 "val_acc": val_acc, "clipped_steps": clipped,
                 "mean_energy": energy_sum / n_steps}
        log.append(entry)

        if best_val_loss is None or val_parts["loss"] < best_val_loss:
            best_val_loss = val_parts["loss"]
            best = _snapshot(params, opt_m, opt_v, step, epoch, lr, plateau_best,
                             plateau_bad, best_val_loss, rng, queue, log,
                             model_cfg, train_cfg)
        if plateau_best is None or val_parts["loss"] < plateau_best:
            plateau_best = val_parts["loss"]
            plateau_bad = 0
        else:
            plateau_bad += 1
            if plateau_bad >= train_cfg.plateau_patience:
                lr *= train_cfg.plateau_factor
                plateau_bad = 0
        if train_cfg.stop_at_train_acc is not None and train_acc >= train_cfg.stop_at_train_acc:
            break

    final = _snapshot(params, opt_m, opt_v, step, epoch, lr, plateau_best, plateau_bad,
                      best_val_loss, rng, queue, log, model_cfg, train_cfg)
    if best is None:
        best = final
    return TrainResult(best=best, final=final, log=log)


def predict_bags(ckpt: Checkpoint, bags) -> tuple[np.ndarray, np.ndarray, list]:
    """Probabilities of STAS for each bag under a trained checkpoint."""
    cfg = ModelConfig(**ckpt.model_config)
    graphs = _as_graphs(bags, cfg.knn_k)
    probs, labels, ids = [], [], []
    for g in graphs:
        res = forward(ckpt.params, cfg, g, rng=None, training=False)
        probs.append(float(res.probs[1]))
        labels.append(g.label_index)
        ids.append(g.wsi_id)
    return np.asarray(probs), np.asarray(labels), ids


@dataclass
class CvResult:
    checkpoints: list
    fold_reports: dict            # section kind -> list of EvalReport or None
    aggregates: dict              # section kind -> {metric: (mean, sem)}
    logs: list
    plan: object


METRIC_FIELDS = ("accuracy", "precision", "recall", "f1", "specificity", "auc", "prc", "brier")


def aggregate_fold_metrics(reports: list) -> dict:
    """mean +/- SEM per metric over folds, skipping undefined entries."""
    out = {}
    for name in METRIC_FIELDS:
        vals = np.array([getattr(r, name) for r in reports if r is not None], dtype=float)
        vals = vals[np.isfinite(vals)]
        if len(vals) == 0:
            out[name] = (float("nan"), float("nan"))
        elif len(vals) == 1:
            out[name] = (float(vals[0]), 0.0)
        else:
            out[name] = (float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals))))
    return out


def _section_report(probs, labels, kinds, kind: str) -> EvalReport | None:
    mask = np.array([k == kind for k in kinds]) if kind != "overall" else \
        np.ones(len(labels), dtype=bool)
    if mask.sum() == 0:
        return None
    return threshold_report(probs[mask], labels[mask])


def run_cv(cohort, model_cfg: ModelConfig, train_cfg: TrainConfig, plan=None) -> CvResult:
    """Patient-grouped five-fold cross-validation over a cohort of bags.

    Frozen- and paraffin-section metrics are reported separately per fold
    (plus the overall pooled report) and aggregated as mean +/- SEM.
    """
    from .data import make_folds

    if plan is None:
        plan = make_folds(cohort, train_cfg.seed)
    by_id = {b.wsi_id: b for b in cohort}
    checkpoints, logs = [], []
    reports = {"overall": [], "frozen": [], "paraffin": []}
    for fold in range(plan.n_folds):
        val_ids = set(plan.wsis_in_fold(fold))
        train_bags = [b for b in cohort if b.wsi_id not in val_ids]
        val_bags = [by_id[w] for w in sorted(val_ids)]
        train_patients = {b.patient_id for b in train_bags}
        leaked = {b.patient_id for b in val_bags} & train_patients
        if leaked:
            raise ValueError(f"patient leakage across fold {fold}: {sorted(leaked)}")
        result = train_fold(train_bags, val_bags, model_cfg, train_cfg)
        checkpoints.append(result.best)
        logs.append(result.log)
        probs, labels, _ = predict_bags(result.best, val_bags)
        kinds = [b.section_kind for b in val_bags]
        for key in reports:
            reports[key].append(_section_report(probs, labels, kinds, key))
    aggregates = {key: aggregate_fold_metrics(rs) for key, rs in reports.items()}
    return CvResult(checkpoints=checkpoints, fold_reports=reports,
                    aggregates=aggregates, logs=logs, plan=plan)
