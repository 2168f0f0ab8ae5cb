"""On-disk bag format, validation, fold splitting, and synthetic cohorts.

A bag is one directory per slide::

    <wsi_id>/
      manifest.json    ids, label, mpp, patch coordinate tables, cell
                       records, blob checksums
      features_s.bin   row-major float32 little-endian, N_small x 768
      features_l.bin   row-major float32 little-endian, N_large x 768

The manifest is the single source of truth for counts and CRC-32 checksums
of the feature blobs, so a truncated or swapped blob is always caught at
load time.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorops import SeededRng

FEATURE_DIM = 768
CELL_TYPES = ("tumor", "stroma", "immune", "erythrocyte", "macrophage", "dead", "other")
SECTION_KINDS = ("frozen", "paraffin")
LABELS = ("non-STAS", "STAS")
SUBTYPES = ("micropapillary", "non-micropapillary", "n/a")

MANIFEST_NAME = "manifest.json"
SMALL_BLOB = "features_s.bin"
LARGE_BLOB = "features_l.bin"


class BagFormatError(ValueError):
    """A bag directory violates the on-disk contract."""


@dataclass
class CellRecord:
    x: float
    y: float
    cell_type: str
    prob: float
    nucleus_area: float

    def validate(self, wsi_id: str = "?") -> None:
        if self.cell_type not in CELL_TYPES:
            raise BagFormatError(f"{wsi_id}: unknown cell type {self.cell_type!r}")
        if not 0.0 <= self.prob <= 1.0:
            raise BagFormatError(f"{wsi_id}: cell prob {self.prob} outside [0, 1]")
        if self.nucleus_area <= 0.0:
            raise BagFormatError(f"{wsi_id}: nucleus_area must be positive")


@dataclass
class Endpoint:
    """Optional time-to-event annotation (days since surgery)."""

    time_days: float
    event: bool


@dataclass
class WsiBag:
    wsi_id: str
    patient_id: str
    section_kind: str
    label: str
    subtype: str
    mpp: float
    coords_small: np.ndarray       # (N_s, 2) level-0 pixels, tile 256
    features_small: np.ndarray     # (N_s, 768) float32
    coords_large: np.ndarray       # (N_l, 2) level-0 pixels, tile 512
    features_large: np.ndarray     # (N_l, 768) float32
    cells: list = field(default_factory=list)
    survival: Endpoint | None = None
    recurrence: Endpoint | None = None
    tile_small: int = 256
    tile_large: int = 512

    @property
    def label_index(self) -> int:
        return LABELS.index(self.label)

    def validate(self) -> None:
        if self.section_kind not in SECTION_KINDS:
            raise BagFormatError(f"{self.wsi_id}: section_kind {self.section_kind!r}")
        if self.label not in LABELS:
            raise BagFormatError(f"{self.wsi_id}: label {self.label!r}")
        if self.subtype not in SUBTYPES:
            raise BagFormatError(f"{self.wsi_id}: subtype {self.subtype!r}")
        if self.mpp <= 0.0:
            raise BagFormatError(f"{self.wsi_id}: mpp must be positive")
        for name, coords, feats in (("small", self.coords_small, self.features_small),
                                    ("large", self.coords_large, self.features_large)):
            if len(coords) < 1:
                raise BagFormatError(f"{self.wsi_id}: no {name} patches")
            if len(coords) != len(feats):
                raise BagFormatError(f"{self.wsi_id}: {name} coords/features count mismatch")
            if feats.shape[1] != FEATURE_DIM:
                raise BagFormatError(
                    f"{self.wsi_id}: {name} feature dim {feats.shape[1]} != {FEATURE_DIM}")
            if np.any(coords < 0):
                raise BagFormatError(f"{self.wsi_id}: negative {name} patch coordinates")
            if not np.all(np.isfinite(feats)):
                raise BagFormatError(f"{self.wsi_id}: non-finite {name} features")
        for c in self.cells:
            c.validate(self.wsi_id)


def _endpoint_to_json(e: Endpoint | None):
    return None if e is None else {"time_days": e.time_days, "event": bool(e.event)}


def _endpoint_from_json(d) -> Endpoint | None:
    return None if d is None else Endpoint(time_days=float(d["time_days"]), event=bool(d["event"]))


def write_bag(bag: WsiBag, root: Path) -> Path:
    """Write a validated bag directory under ``root``; returns its path."""
    bag.validate()
    out = Path(root) / bag.wsi_id
    out.mkdir(parents=True, exist_ok=True)
    blobs = {}
    for blob_name, feats in ((SMALL_BLOB, bag.features_small), (LARGE_BLOB, bag.features_large)):
        payload = np.ascontiguousarray(feats, dtype="<f4").tobytes()
        (out / blob_name).write_bytes(payload)
        blobs[blob_name] = {"crc32": zlib.crc32(payload), "rows": len(feats)}
    manifest = {
        "format": "wsi-bag/1",
        "wsi_id": bag.wsi_id,
        "patient_id": bag.patient_id,
        "section_kind": bag.section_kind,
        "label": bag.label,
        "subtype": bag.subtype,
        "mpp": bag.mpp,
        "patches_small": {"tile": bag.tile_small,
                          "coords": np.asarray(bag.coords_small, dtype=int).tolist()},
        "patches_large": {"tile": bag.tile_large,
                          "coords": np.asarray(bag.coords_large, dtype=int).tolist()},
        "features_small": {"file": SMALL_BLOB, "dim": FEATURE_DIM, **blobs[SMALL_BLOB]},
        "features_large": {"file": LARGE_BLOB, "dim": FEATURE_DIM, **blobs[LARGE_BLOB]},
        "cells": [{"x": c.x, "y": c.y, "type": c.cell_type,
                   "prob": c.prob, "area": c.nucleus_area} for c in bag.cells],
        "survival": _endpoint_to_json(bag.survival),
        "recurrence": _endpoint_to_json(bag.recurrence),
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return out


def _read_blob(bag_dir: Path, meta: dict, wsi_id: str) -> np.ndarray:
    path = bag_dir / meta["file"]
    if not path.exists():
        raise BagFormatError(f"{wsi_id}: missing blob {path.name}")
    payload = path.read_bytes()
    expected = meta["rows"] * FEATURE_DIM * 4
    if len(payload) != expected:
        raise BagFormatError(
            f"{wsi_id}: {path.name} has {len(payload)} bytes, expected {expected} "
            f"({meta['rows']} x {FEATURE_DIM} x 4)")
    if zlib.crc32(payload) != meta["crc32"]:
        raise BagFormatError(f"{wsi_id}: checksum mismatch on {path.name}")
    return np.frombuffer(payload, dtype="<f4").reshape(meta["rows"], FEATURE_DIM).copy()


def load_bag(path: Path) -> WsiBag:
    """Load and fully validate one bag directory (or its manifest path)."""
    path = Path(path)
    bag_dir = path.parent if path.name == MANIFEST_NAME else path
    manifest_path = bag_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise BagFormatError(f"no {MANIFEST_NAME} in {bag_dir}")
    manifest = json.loads(manifest_path.read_text())
    wsi_id = manifest["wsi_id"]
    bag = WsiBag(
        wsi_id=wsi_id,
        patient_id=manifest["patient_id"],
        section_kind=manifest["section_kind"],
        label=manifest["label"],
        subtype=manifest.get("subtype", "n/a"),
        mpp=float(manifest["mpp"]),
        coords_small=np.asarray(manifest["patches_small"]["coords"], dtype=np.int64).reshape(-1, 2),
        features_small=_read_blob(bag_dir, manifest["features_small"], wsi_id),
        coords_large=np.asarray(manifest["patches_large"]["coords"], dtype=np.int64).reshape(-1, 2),
        features_large=_read_blob(bag_dir, manifest["features_large"], wsi_id),
        cells=[CellRecord(x=float(c["x"]), y=float(c["y"]), cell_type=c["type"],
                          prob=float(c["prob"]), nucleus_area=float(c["area"]))
               for c in manifest["cells"]],
        survival=_endpoint_from_json(manifest.get("survival")),
        recurrence=_endpoint_from_json(manifest.get("recurrence")),
        tile_small=int(manifest["patches_small"]["tile"]),
        tile_large=int(manifest["patches_large"]["tile"]),
    )
    bag.validate()
    return bag


def load_cohort(root: Path) -> list[WsiBag]:
    """Load every bag directory directly under ``root``, sorted by wsi_id."""
    root = Path(root)
    bags = [load_bag(p.parent) for p in sorted(root.glob(f"*/{MANIFEST_NAME}"))]
    if not bags:
        raise BagFormatError(f"no bag directories under {root}")
    return bags


# ---------------------------------------------------------------------------
# fold splitting


@dataclass
class FoldPlan:
    assignments: dict          # wsi_id -> fold index
    seed: int
    n_folds: int = 5

    def fold_of(self, wsi_id: str) -> int:
        return self.assignments[wsi_id]

    def wsis_in_fold(self, fold: int) -> list[str]:
        return sorted(w for w, f in self.assignments.items() if f == fold)

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "n_folds": self.n_folds,
                           "assignments": self.assignments}, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        return cls(assignments={k: int(v) for k, v in d["assignments"].items()},
                   seed=int(d["seed"]), n_folds=int(d["n_folds"]))


def make_folds(cohort: list[WsiBag], seed: int, n_folds: int = 5) -> FoldPlan:
    """Patient-grouped stratified split.

    Patients are shuffled with the seed, then assigned greedily to the fold
    whose post-assignment state best preserves the cohort-wide
    frozen:paraffin ratio and label balance while keeping fold sizes even.
    All slides of one patient always land in the same fold.
    """
    patients: dict[str, list[WsiBag]] = {}
    for bag in cohort:
        patients.setdefault(bag.patient_id, []).append(bag)
    if len(patients) < n_folds:
        raise ValueError(f"need at least {n_folds} patients, got {len(patients)}")

    ids = sorted(patients)
    order = SeededRng(seed).permutation(len(ids))
    total = len(cohort)
    fs_frac = sum(b.section_kind == "frozen" for b in cohort) / total
    pos_frac = sum(b.label == "STAS" for b in cohort) / total
    ideal = total / n_folds

    slides = np.zeros(n_folds)
    frozen = np.zeros(n_folds)
    positive = np.zeros(n_folds)
    assignments: dict[str, int] = {}
    for idx in order:
        group = patients[ids[idx]]
        g_n = len(group)
        g_fs = sum(b.section_kind == "frozen" for b in group)
        g_pos = sum(b.label == "STAS" for b in group)
        best, best_cost = 0, None
        for f in range(n_folds):
            n_after = slides[f] + g_n
            # count-scale deviations from the proportional targets; size
            # pressure keeps folds even and guarantees no fold stays empty
            cost = (2.0 * n_after / ideal
                    + abs(frozen[f] + g_fs - n_after * fs_frac)
                    + 0.5 * abs(positive[f] + g_pos - n_after * pos_frac))
            if best_cost is None or cost < best_cost - 1e-12:
                best, best_cost = f, cost
        slides[best] += g_n
        frozen[best] += g_fs
        positive[best] += g_pos
        for bag in group:
            assignments[bag.wsi_id] = best
    return FoldPlan(assignments=assignments, seed=seed, n_folds=n_folds)


# ---------------------------------------------------------------------------
# synthetic cohorts

# slide layout constants: the main tumor occupies a dense blob around
# MAIN_CENTER; planted STAS-like material lives past PLANT_EDGE in both axes
SLIDE_EXTENT = 8192
MAIN_CENTER = (2304.0, 2304.0)
PLANT_EDGE = 5000


def is_planted_patch(coords: np.ndarray) -> np.ndarray:
    """Boolean mask of synthetic patches in the planted far-corner cluster."""
    coords = np.asarray(coords)
    return (coords[:, 0] >= PLANT_EDGE) & (coords[:, 1] >= PLANT_EDGE)


def _patch_grid(rng: SeededRng, tile: int, n_main: int, n_plant: int):
    """Main-cluster grid cells near the tumor plus a far-corner plant grid."""
    span = 12 if tile == 256 else 6
    base = int(MAIN_CENTER[0] // tile) - span // 2
    cells = [(base + i, base + j) for i in range(span) for j in range(span)]
    pick = rng.choice(len(cells), n_main, replace=False)
    coords = [(cells[i][0] * tile, cells[i][1] * tile) for i in sorted(pick)]
    plant_base = PLANT_EDGE // tile + 1
    for k in range(n_plant):
        coords.append(((plant_base + k % 4) * tile, (plant_base + k // 4) * tile))
    return np.asarray(coords, dtype=np.int64)


def generate_synthetic_cohort(n_patients: int, rng: SeededRng,
                              frozen_every: int = 6,
                              with_survival: bool = True) -> list[WsiBag]:
    """Desk-scale cohort with a planted, separable STAS signal.

    STAS bags carry a far-corner cluster of feature vectors shifted along a
    fixed positive direction, away from the dense background cluster, so a
    linear probe on the mean bag feature separates the classes and a trained
    model can overfit. Patch counts are constant across bags: at desk-scale
    cohort sizes a varying bag size is a nuisance signal strong enough to
    swamp the plant. Labels alternate (balanced within one); every
    ``frozen_every``-th slide is a frozen section. One slide per patient.
    """
    if n_patients < 2:
        raise ValueError("need at least 2 patients")
    mu_bg = rng.normal((FEATURE_DIM,), scale=0.1)
    direction = np.abs(rng.normal((FEATURE_DIM,)))
    direction /= np.linalg.norm(direction)

    bags = []
    for i in range(n_patients):
        label = LABELS[1] if i % 2 == 0 else LABELS[0]
        stas = label == "STAS"
        section = "frozen" if (i % frozen_every) == frozen_every - 1 else "paraffin"
        subtype = "n/a"
        if stas:
            subtype = "micropapillary" if i % 4 == 0 else "non-micropapillary"

        n_small, n_large = 48, 16
        n_plant_s = 12 if stas else 0
        n_plant_l = 4 if stas else 0

        coords_s = _patch_grid(rng, 256, n_small - n_plant_s, n_plant_s)
        coords_l = _patch_grid(rng, 512, n_large - n_plant_l, n_plant_l)

        feats_s = mu_bg + rng.normal((n_small, FEATURE_DIM), scale=0.3)
        feats_l = mu_bg + rng.normal((n_large, FEATURE_DIM), scale=0.3)
        if stas:
            feats_s[is_planted_patch(coords_s)] += 2.5 * direction
            feats_l[is_planted_patch(coords_l)] += 2.5 * direction

        cells = _synthetic_cells(rng, stas)
        survival = recurrence = None
        if with_survival:
            hazard = 2.2 if stas else 1.0
            t = float(-1500.0 / hazard * np.log(rng.random()))
            survival = Endpoint(time_days=round(max(t, 30.0), 1), event=bool(rng.random() < 0.7))
            t2 = float(-1000.0 / hazard * np.log(rng.random()))
            recurrence = Endpoint(time_days=round(max(t2, 30.0), 1), event=bool(rng.random() < 0.6))

        bags.append(WsiBag(
            wsi_id=f"synthetic-{i:04d}",
            patient_id=f"patient-{i:04d}",
            section_kind=section,
            label=label,
            subtype=subtype,
            mpp=0.25,
            coords_small=coords_s,
            features_small=feats_s.astype(np.float32),
            coords_large=coords_l,
            features_large=feats_l.astype(np.float32),
            cells=cells,
            survival=survival,
            recurrence=recurrence,
        ))
    return bags


def _synthetic_cells(rng: SeededRng, stas: bool) -> list[CellRecord]:
    cells = []

    def add(n, cell_type, cx, cy, spread):
        xy = np.column_stack([rng.normal((n,), scale=spread) + cx,
                              rng.normal((n,), scale=spread) + cy])
        xy = np.clip(xy, 0.0, SLIDE_EXTENT - 1.0)
        probs = rng.uniform(0.5, 1.0, (n,))
        areas = np.exp(rng.normal((n,), scale=0.4) + 4.0)
        for k in range(n):
            cells.append(CellRecord(x=round(float(xy[k, 0]), 1), y=round(float(xy[k, 1]), 1),
                                    cell_type=cell_type, prob=round(float(probs[k]), 4),
                                    nucleus_area=round(float(areas[k]), 2)))

    cx, cy = MAIN_CENTER
    add(36 + int(rng.integers(0, 13)), "tumor", cx, cy, 420.0)
    add(20 + int(rng.integers(0, 9)), "stroma", cx + 500, cy, 900.0)
    add(14 + int(rng.integers(0, 7)), "immune", cx, cy + 600, 1000.0)
    add(8 + int(rng.integers(0, 5)), "erythrocyte", cx - 400, cy - 400, 150.0)
    add(4 + int(rng.integers(0, 3)), "macrophage", cx, cy, 1200.0)
    add(3, "dead", cx, cy, 500.0)
    add(2, "other", cx, cy, 1500.0)
    if stas:
        # detached tumor cluster far from the main mass: STAS candidates
        add(8, "tumor", PLANT_EDGE + 700.0, PLANT_EDGE + 700.0, 160.0)
    return cells
