"""Command-line entry points.

Exit codes: 2 for validation failures (bad bags, empty splits, bad
arguments), 3 for missing artifacts (files that should exist). Report
commands write delimited output plus rendered PNG figures into --out.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import reports
from .attribution import attribute, cell_density_raster, render_heatmap, top_patches
from .data import (BagFormatError, FoldPlan, generate_synthetic_cohort, load_bag,
                   load_cohort, make_folds, write_bag)
from .heads import LossWeights
from .metrics import threshold_report
from .model import ModelConfig
from .tensorops import SeededRng
from .tme import (INDICATOR_NAMES, compute_tme_metrics, km_logrank, kruskal_wallis,
                  dunn_posthoc, metrics_table, stratify_by_median, t_test_two_sided)
from .train import (Checkpoint, TrainConfig, load_checkpoint, predict_bags, run_cv,
                    save_checkpoint, train_fold)


class ValidationFailure(Exception):
    exit_code = 2


class MissingArtifact(Exception):
    exit_code = 3


def _load_configs(path: str | None) -> tuple[ModelConfig, TrainConfig]:
    model_cfg, train_cfg = ModelConfig(), TrainConfig()
    if path:
        p = Path(path)
        if not p.exists():
            raise MissingArtifact(f"config file not found: {p}")
        raw = json.loads(p.read_text())
        if "model" in raw:
            model_cfg = ModelConfig(**{**model_cfg.__dict__, **raw["model"]})
        if "train" in raw:
            t = raw["train"]
            loss = t.pop("loss", None)
            train_cfg = replace(train_cfg, **t)
            if loss:
                train_cfg = replace(train_cfg, loss=LossWeights(**loss))
    return model_cfg.validate(), train_cfg.validate()


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{what} not found: {p}")
    return p


def _load_ckpt(path: str) -> Checkpoint:
    return load_checkpoint(_require(path, "checkpoint"))


def _split_bags(cohort, plan: FoldPlan, fold: int, split: str):
    in_fold = set(plan.wsis_in_fold(fold))
    if split == "val":
        bags = [b for b in cohort if b.wsi_id in in_fold]
    else:
        bags = [b for b in cohort if b.wsi_id not in in_fold]
    if not bags:
        raise ValidationFailure(f"empty {split} split for fold {fold}")
    return bags


def cmd_synth(args) -> int:
    rng = SeededRng(args.seed)
    cohort = generate_synthetic_cohort(args.patients, rng)
    out = Path(args.out)
    for bag in cohort:
        write_bag(bag, out)
    print(f"wrote {len(cohort)} synthetic bags to {out}")
    return 0


def cmd_ingest(args) -> int:
    root = _require(args.data, "data directory")
    cohort = load_cohort(root)
    index = []
    for bag in cohort:
        thumb = root / bag.wsi_id / "thumbnail.png"
        if not thumb.exists():
            cell_density_raster(bag).save(thumb, format="PNG")
        index.append({"wsi_id": bag.wsi_id, "patient_id": bag.patient_id,
                      "label": bag.label, "section_kind": bag.section_kind,
                      "n_small": len(bag.coords_small), "n_large": len(bag.coords_large),
                      "n_cells": len(bag.cells)})
    (root / "index.json").write_text(json.dumps({"bags": index}, indent=1, sort_keys=True))
    print(f"ingested {len(index)} bags; index written to {root / 'index.json'}")
    return 0


def cmd_fold(args) -> int:
    cohort = load_cohort(_require(args.data, "data directory"))
    plan = make_folds(cohort, args.seed)
    text = plan.to_json()
    if args.out:
        Path(args.out).write_text(text)
        print(f"fold plan written to {args.out}")
    else:
        print(text)
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = _load_configs(args.config)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    cohort = load_cohort(_require(args.data, "data directory"))
    plan = FoldPlan.from_json(_require(args.plan, "fold plan").read_text()) \
        if args.plan else make_folds(cohort, train_cfg.seed)
    train_bags = _split_bags(cohort, plan, args.fold, "train")
    val_bags = _split_bags(cohort, plan, args.fold, "val")
    result = train_fold(train_bags, val_bags, model_cfg, train_cfg)
    save_checkpoint(result.best, args.out)
    last = result.log[-1]
    print(f"fold {args.fold}: best val_loss {result.best.best_val_loss:.4f} "
          f"at epoch {result.best.epoch}; final val_acc {last['val_acc']:.3f}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_cv(args) -> int:
    model_cfg, train_cfg = _load_configs(args.config)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    cohort = load_cohort(_require(args.data, "data directory"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_cv(cohort, model_cfg, train_cfg)
    (out / "fold_plan.json").write_text(result.plan.to_json())
    lines = []
    for kind in ("overall", "frozen", "paraffin"):
        for metric, (mean, sem) in result.aggregates[kind].items():
            lines.append(f"{kind}.{metric} = {mean:.6f} +/- {sem:.6f}")
    (out / "cv_metrics.txt").write_text("\n".join(lines) + "\n")
    for i, ckpt in enumerate(result.checkpoints):
        save_checkpoint(ckpt, out / f"fold{i}.ckpt")
        reports.training_curve_figure(result.logs[i], out / f"fold{i}_training.png",
                                      title=f"Fold {i}")
    print((out / "cv_metrics.txt").read_text().strip())
    print(f"5 checkpoints and figures written to {out}")
    return 0


def cmd_predict(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    bag = load_bag(_require(args.bag, "bag directory"))
    probs, _, _ = predict_bags(ckpt, [bag])
    label = "STAS" if probs[0] >= 0.5 else "non-STAS"
    print(json.dumps({"wsi_id": bag.wsi_id, "prob_stas": float(probs[0]),
                      "predicted": label, "label": bag.label}))
    return 0


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    cohort = load_cohort(_require(args.data, "data directory"))
    plan = FoldPlan.from_json(_require(args.plan, "fold plan").read_text())
    bags = _split_bags(cohort, plan, args.fold, args.split)
    labels_present = {b.label for b in bags}
    if len(labels_present) < 2:
        raise ValidationFailure(
            f"{args.split} split of fold {args.fold} has a single class: {labels_present}")
    probs, labels, _ = predict_bags(ckpt, bags)
    report = threshold_report(probs, labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.txt").write_text(report.to_text())
    reports.roc_figure(probs, labels, out / "roc.png")
    reports.prc_figure(probs, labels, out / "prc.png")
    reports.calibration_figure(report, out / "calibration.png")
    print(report.to_text().strip())
    print(f"report and figures written to {out}")
    return 0


def cmd_heatmap(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    bag = load_bag(_require(args.bag, "bag directory"))
    cfg = ModelConfig(**ckpt.model_config)
    result = attribute(bag, ckpt.params, cfg)
    scale_tag = {"10x": "large", "20x": "small"}[args.scale]
    amap = result.maps[scale_tag]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    png = out / f"{bag.wsi_id}_{args.scale}.png"
    render_heatmap(amap, png, base=None)
    (out / f"{bag.wsi_id}_{args.scale}.json").write_text(amap.sidecar_json())
    tops = top_patches(amap) if len(amap.scores) >= 12 else None
    if tops:
        (out / f"{bag.wsi_id}_{args.scale}_top_patches.json").write_text(
            json.dumps(tops, sort_keys=True))
    print(json.dumps({"wsi_id": bag.wsi_id, "scale": args.scale,
                      "prob_stas": result.prob_stas, "png": str(png)}))
    return 0


def cmd_tme(args) -> int:
    cohort = load_cohort(_require(args.cohort, "cohort directory"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, by_label, by_subtype = [], {"STAS": {}, "non-STAS": {}}, {}
    for bag in cohort:
        extent = max(float(bag.coords_small[:, 0].max() + bag.tile_small),
                     float(bag.coords_small[:, 1].max() + bag.tile_small))
        m = compute_tme_metrics(bag.cells, extent * extent, bag.mpp)
        rows.append((bag.wsi_id, m))
        for name in INDICATOR_NAMES:
            if name not in m.undefined:
                by_label[bag.label].setdefault(name, []).append(m.values[name])
                by_subtype.setdefault(bag.subtype, {}).setdefault(name, []).append(
                    m.values[name])
    (out / "tme_metrics.csv").write_text(metrics_table(rows))

    lines = []
    for name in INDICATOR_NAMES:
        a = by_label["STAS"].get(name, [])
        b = by_label["non-STAS"].get(name, [])
        if len(a) >= 2 and len(b) >= 2:
            r = t_test_two_sided(a, b)
            flag = " degenerate" if r.degenerate else ""
            lines.append(f"ttest.{name} t = {r.t:.4f} p = {r.p:.4g}{flag}")
            reports.group_box_figure({"STAS": a, "non-STAS": b},
                                     out / f"box_{name}.png", name, r.p)
    subtype_groups = [by_subtype.get(k, {}) for k in ("n/a", "non-micropapillary",
                                                      "micropapillary")]
    for name in INDICATOR_NAMES:
        groups = [g.get(name, []) for g in subtype_groups]
        if all(len(g) >= 1 for g in groups):
            kw = kruskal_wallis(groups)
            lines.append(f"kruskal.{name} H = {kw.h:.4f} p = {kw.p:.4g}")
            for d in dunn_posthoc(groups):
                lines.append(f"dunn.{name}.{d.i}v{d.j} z = {d.z:.4f} "
                             f"p_adj = {d.p_adjusted:.4g}")

    # survival stratification by median indicator value, where survival exists
    surv = [(b, m) for (wsi, m), b in zip(rows, cohort) if b.survival is not None]
    for name in ("str", "itr", "mvd"):
        usable = [(b, m.values[name]) for b, m in surv if name not in m.undefined]
        if len(usable) >= 4:
            split = stratify_by_median([v for _, v in usable], [b for b, _ in usable])
            if split.degenerate or not split.low:
                continue
            subjects = split.high + split.low
            group = [1] * len(split.high) + [0] * len(split.low)
            times = [b.survival.time_days for b in subjects]
            events = [b.survival.event for b in subjects]
            try:
                lr = km_logrank(times, events, group)
            except ValueError:
                continue
            lines.append(f"logrank.{name} chi2 = {lr.chi2:.4f} p = {lr.p:.4g}")
            reports.km_figure(lr.curves, [f"{name} low", f"{name} high"],
                              out / f"km_{name}.png", lr.p,
                              title=f"Survival by {name} (median split)")
    (out / "group_tests.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines[:12]))
    print(f"metrics table, group tests and figures written to {out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    data = args.data or os.environ.get("STASMIL_DATA")
    if not data:
        raise ValidationFailure("no data directory: pass --data or set STASMIL_DATA")
    ui_dir = Path(args.ui) if args.ui else None
    app = create_app(_require(data, "data directory"),
                     _require(args.ckpt, "checkpoint") if args.ckpt else None,
                     ui_dir=ui_dir)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stasmil",
                                     description="STAS MIL engine: train, evaluate, "
                                                 "explain, and serve slide-level models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--patients", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate and index a bag directory")
    p.add_argument("data")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fold", help="emit a patient-grouped stratified fold plan")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fold)

    p = sub.add_parser("train", help="train one fold")
    p.add_argument("--data", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--plan")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="five-fold cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("predict", help="predict one bag")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bag", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a fold split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--split", choices=("val", "train"), default="val")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="render an attribution heatmap for one bag")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bag", required=True)
    p.add_argument("--scale", choices=("10x", "20x"), default="20x")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("tme", help="microenvironment metrics table and group tests")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tme)

    p = sub.add_parser("serve", help="start the local HTTP service")
    p.add_argument("--data", help="bag directory (default: $STASMIL_DATA)")
    p.add_argument("--ckpt")
    p.add_argument("--ui", help="directory with the built measurement UI")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationFailure, BagFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
