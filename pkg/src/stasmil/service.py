"""Local HTTP service exposing bags, predictions, heatmaps, cell maps,
tumor-region proposals, and persisted distance measurements.

The server is the single authority for pixel-to-micron conversion: clients
send pixel endpoints only and every stored measurement's micron value is
recomputed server-side from the slide's mpp. Measurements persist as an
append-only NDJSON log per slide, compacted into a snapshot at startup.
"""

from __future__ import annotations

import hashlib
import io
import json
import threading
import time
import uuid
from pathlib import Path

from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import HTMLResponse, PlainTextResponse, Response
from PIL import Image
from pydantic import BaseModel

from .attribution import attribute, cell_density_raster, render_heatmap
from .data import WsiBag, load_cohort
from .model import ModelConfig
from .tme import point_to_line_distance, propose_tumor_region
from .train import load_checkpoint

THUMB_DOWNSAMPLE = 32
SCALE_TAGS = {"10x": "large", "20x": "small"}

LOG_NAME = "measurements.ndjson"
SNAPSHOT_NAME = "measurements.snapshot.json"


class MeasurementIn(BaseModel):
    p: tuple[float, float]
    a: tuple[float, float]
    b: tuple[float, float]
    panel: str = "wsi"
    note: str = ""


class MeasurementStore:
    """Per-slide measurement persistence: append-only log plus snapshot."""

    def __init__(self, bag_dir: Path):
        self.bag_dir = Path(bag_dir)
        self.lock = threading.Lock()
        self.records: dict[str, dict] = {}
        self.order: list[str] = []
        self._load()
        self.compact()

    def _load(self) -> None:
        snap = self.bag_dir / SNAPSHOT_NAME
        if snap.exists():
            for rec in json.loads(snap.read_text())["measurements"]:
                self.records[rec["id"]] = rec
                self.order.append(rec["id"])
        log = self.bag_dir / LOG_NAME
        if log.exists():
            for line in log.read_text().splitlines():
                if not line.strip():
                    continue
                op = json.loads(line)
                if op["op"] == "add":
                    rec = op["measurement"]
                    self.records[rec["id"]] = rec
                    self.order.append(rec["id"])
                elif op["op"] == "delete":
                    self.records.pop(op["id"], None)

    def _append(self, op: dict) -> None:
        with open(self.bag_dir / LOG_NAME, "a") as fh:
            fh.write(json.dumps(op, sort_keys=True) + "\n")

    def compact(self) -> None:
        with self.lock:
            snap = {"measurements": [self.records[i] for i in self.order
                                     if i in self.records]}
            (self.bag_dir / SNAPSHOT_NAME).write_text(json.dumps(snap, sort_keys=True))
            (self.bag_dir / LOG_NAME).write_text("")

    def add(self, rec: dict) -> None:
        with self.lock:
            self.records[rec["id"]] = rec
            self.order.append(rec["id"])
            self._append({"op": "add", "measurement": rec})

    def delete(self, mid: str) -> bool:
        with self.lock:
            if mid not in self.records:
                return False
            del self.records[mid]
            self._append({"op": "delete", "id": mid})
            return True

    def list(self) -> list[dict]:
        with self.lock:
            return [self.records[i] for i in self.order if i in self.records]


class SlideService:
    """Loads a data directory once and serves cached derived artifacts."""

    def __init__(self, data_dir: Path, ckpt_path: Path | None = None):
        self.data_dir = Path(data_dir)
        self.bags: dict[str, WsiBag] = {b.wsi_id: b for b in load_cohort(self.data_dir)}
        self.ckpt = None
        self.cfg = None
        self.ckpt_tag = "none"
        if ckpt_path is not None:
            self.ckpt = load_checkpoint(ckpt_path)
            self.cfg = ModelConfig(**self.ckpt.model_config)
            digest = hashlib.sha256()
            for name in sorted(self.ckpt.params):
                digest.update(name.encode())
                digest.update(self.ckpt.params[name].tobytes())
            self.ckpt_tag = digest.hexdigest()[:12]
        self.stores = {w: MeasurementStore(self.data_dir / w) for w in self.bags}
        self._attr_cache: dict[str, object] = {}
        self._attr_lock = threading.Lock()

    def bag(self, wsi_id: str) -> WsiBag:
        if wsi_id not in self.bags:
            raise HTTPException(status_code=404, detail=f"unknown wsi {wsi_id}")
        return self.bags[wsi_id]

    def attribution(self, wsi_id: str):
        if self.ckpt is None:
            raise HTTPException(status_code=404, detail="no checkpoint loaded")
        with self._attr_lock:
            if wsi_id not in self._attr_cache:
                self._attr_cache[wsi_id] = attribute(self.bag(wsi_id), self.ckpt.params,
                                                     self.cfg)
            return self._attr_cache[wsi_id]

    def thumbnail(self, wsi_id: str) -> Image.Image:
        path = self.data_dir / wsi_id / "thumbnail.png"
        if not path.exists():
            img = cell_density_raster(self.bag(wsi_id), THUMB_DOWNSAMPLE)
            img.save(path, format="PNG")
        return Image.open(path).convert("RGB")

    def measurement_record(self, wsi_id: str, body: MeasurementIn) -> dict:
        bag = self.bag(wsi_id)
        if tuple(body.a) == tuple(body.b):
            raise HTTPException(status_code=422, detail="degenerate line: a == b")
        px, um = point_to_line_distance(body.p, body.a, body.b, bag.mpp)
        return {
            "id": uuid.uuid4().hex,
            "wsi_id": wsi_id,
            "p": [float(v) for v in body.p],
            "a": [float(v) for v in body.a],
            "b": [float(v) for v in body.b],
            "px": px,
            "um": um,
            "panel": body.panel,
            "note": body.note,
            "timestamp": time.time(),
        }

    def audited(self, wsi_id: str, rec: dict) -> dict:
        # stored microns must always equal the recomputation from endpoints
        px, um = point_to_line_distance(rec["p"], rec["a"], rec["b"], self.bag(wsi_id).mpp)
        out = dict(rec)
        out["px"] = px
        out["um"] = um
        return out


INDEX_HTML_FALLBACK = """<!doctype html>
<html><body><h3>Measurement UI not built.</h3>
<p>Build the frontend (see frontend/README.md) or use the JSON API.</p>
</body></html>"""


def create_app(data_dir: Path, ckpt_path: Path | None = None,
               ui_dir: Path | None = None) -> FastAPI:
    svc = SlideService(data_dir, ckpt_path)
    app = FastAPI(title="stasmil service")
    app.state.service = svc

    @app.get("/wsis")
    def list_wsis():
        out = []
        for wsi_id in sorted(svc.bags):
            bag = svc.bags[wsi_id]
            entry = {"wsi_id": wsi_id, "label": bag.label, "mpp": bag.mpp,
                     "section_kind": bag.section_kind}
            if svc.ckpt is not None:
                res = svc.attribution(wsi_id)
                entry["prob_stas"] = res.prob_stas
                entry["predicted"] = "STAS" if res.prob_stas >= 0.5 else "non-STAS"
            out.append(entry)
        return {"wsis": out}

    @app.get("/wsi/{wsi_id}")
    def wsi_meta(wsi_id: str):
        bag = svc.bag(wsi_id)
        thumb = svc.thumbnail(wsi_id)
        return {
            "wsi_id": wsi_id, "label": bag.label, "subtype": bag.subtype,
            "section_kind": bag.section_kind, "mpp": bag.mpp,
            "n_patches_small": len(bag.coords_small),
            "n_patches_large": len(bag.coords_large),
            "n_cells": len(bag.cells),
            "thumbnail": {"downsample": THUMB_DOWNSAMPLE,
                          "width": thumb.width, "height": thumb.height},
        }

    @app.get("/wsi/{wsi_id}/thumbnail")
    def thumbnail(wsi_id: str, level: int = Query(default=0, ge=0, le=6)):
        img = svc.thumbnail(wsi_id)
        if level:
            img = img.resize((max(1, img.width >> level), max(1, img.height >> level)))
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/wsi/{wsi_id}/cells")
    def cells(wsi_id: str):
        bag = svc.bag(wsi_id)
        return {"cells": [{"x": c.x, "y": c.y, "type": c.cell_type,
                           "prob": c.prob, "area": c.nucleus_area} for c in bag.cells]}

    @app.get("/wsi/{wsi_id}/heatmap")
    def heatmap(wsi_id: str, scale: str = Query(default="20x")):
        if scale not in SCALE_TAGS:
            raise HTTPException(status_code=422, detail=f"scale must be one of {list(SCALE_TAGS)}")
        res = svc.attribution(wsi_id)
        amap = res.maps[SCALE_TAGS[scale]]
        # cache keyed by the parameter digest so swapping models never
        # serves stale renders
        path = svc.data_dir / wsi_id / f"heatmap_{scale}_{svc.ckpt_tag}.png"
        if not path.exists():
            render_heatmap(amap, path, base=svc.thumbnail(wsi_id),
                           downsample=THUMB_DOWNSAMPLE)
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.get("/wsi/{wsi_id}/heatmap-scores")
    def heatmap_scores(wsi_id: str, scale: str = Query(default="20x")):
        if scale not in SCALE_TAGS:
            raise HTTPException(status_code=422, detail=f"scale must be one of {list(SCALE_TAGS)}")
        res = svc.attribution(wsi_id)
        return json.loads(res.maps[SCALE_TAGS[scale]].sidecar_json())

    @app.get("/wsi/{wsi_id}/tumor-region")
    def tumor_region(wsi_id: str):
        bag = svc.bag(wsi_id)
        region = propose_tumor_region(bag.cells)
        candidates = [{"index": i, "x": bag.cells[i].x, "y": bag.cells[i].y}
                      for i in region.candidate_indices]
        return {"grid_px": region.grid_px, "threshold": region.threshold,
                "boundary": [[[float(x), float(y)] for x, y in loop]
                             for loop in region.boundary],
                "candidates": candidates,
                "candidate_count": len(candidates)}

    @app.post("/wsi/{wsi_id}/measurements")
    def add_measurement(wsi_id: str, body: MeasurementIn):
        rec = svc.measurement_record(wsi_id, body)
        svc.stores[wsi_id].add(rec)
        return rec

    @app.get("/wsi/{wsi_id}/measurements")
    def list_measurements(wsi_id: str):
        svc.bag(wsi_id)
        return {"measurements": [svc.audited(wsi_id, r) for r in svc.stores[wsi_id].list()]}

    @app.delete("/wsi/{wsi_id}/measurements/{mid}")
    def delete_measurement(wsi_id: str, mid: str):
        svc.bag(wsi_id)
        if not svc.stores[wsi_id].delete(mid):
            raise HTTPException(status_code=404, detail=f"unknown measurement {mid}")
        return {"deleted": mid}

    ui_root = Path(ui_dir) if ui_dir else None

    @app.get("/", response_class=HTMLResponse)
    def index():
        if ui_root is not None and (ui_root / "index.html").exists():
            return (ui_root / "index.html").read_text()
        return INDEX_HTML_FALLBACK

    @app.get("/app.js")
    def app_js():
        if ui_root is not None and (ui_root / "app.js").exists():
            return PlainTextResponse((ui_root / "app.js").read_text(),
                                     media_type="application/javascript")
        raise HTTPException(status_code=404, detail="frontend bundle not built")

    return app
