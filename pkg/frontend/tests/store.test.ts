import { beforeEach, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api";
import { renderCandidateHighlights, renderCells, renderHeatmapTiles,
         renderMeasurement, renderRegion } from "../src/render";
import { AppStore } from "../src/store";
import { Cell, Measurement } from "../src/types";
import { FakeCtx, fakeFetch } from "./fakes";

const CELLS: Cell[] = [
  { x: 100, y: 100, type: "tumor", prob: 0.9, area: 30 },
  { x: 120, y: 110, type: "tumor", prob: 0.8, area: 28 },
  { x: 5000, y: 5000, type: "tumor", prob: 0.95, area: 31 },
  { x: 200, y: 150, type: "stroma", prob: 0.7, area: 22 },
  { x: 240, y: 170, type: "immune", prob: 0.6, area: 18 },
];

function storeWithServer(measurements: Measurement[] = []) {
  const stored = [...measurements];
  const routes = {
    "GET /wsis": () => ({ body: { wsis: [{ wsi_id: "w0", label: "STAS", mpp: 0.25, section_kind: "paraffin" }] } }),
    "GET /wsi/w0/cells": () => ({ body: { cells: CELLS } }),
    "GET /wsi/w0/tumor-region": () => ({
      body: {
        grid_px: 100, threshold: 1.0,
        boundary: [[[100, 100], [200, 100], [200, 200], [100, 200], [100, 100]]],
        candidates: [{ index: 2, x: 5000, y: 5000 }],
        candidate_count: 1,
      },
    }),
    "GET /wsi/w0/heatmap-scores": () => ({
      body: { scale: "small", patches: [{ x: 0, y: 0, tile: 256, score: 0.9 },
                                        { x: 256, y: 0, tile: 256, score: 0.1 }] },
    }),
    "GET /wsi/w0/measurements": () => ({ body: { measurements: stored } }),
    "POST /wsi/w0/measurements": (init?: RequestInit) => {
      const req = JSON.parse(String(init?.body));
      const rec: Measurement = {
        id: `m${stored.length}`, wsi_id: "w0", p: req.p, a: req.a, b: req.b,
        px: 7.25, um: 42.0, panel: req.panel ?? "wsi", note: req.note ?? "",
        timestamp: 1.0,
      };
      stored.push(rec);
      return { body: rec };
    },
    "DELETE /wsi/w0/measurements/": () => {
      stored.pop();
      return { body: { deleted: "x" } };
    },
    "GET /wsi/w0": () => ({
      body: {
        wsi_id: "w0", label: "STAS", subtype: "n/a", section_kind: "paraffin",
        mpp: 0.25, n_patches_small: 4, n_patches_large: 2, n_cells: CELLS.length,
        thumbnail: { downsample: 32, width: 200, height: 200 },
      },
    }),
  };
  return new AppStore(new ApiClient("", fakeFetch(routes)));
}

describe("AppStore", () => {
  let store: AppStore;

  beforeEach(async () => {
    store = storeWithServer();
    await store.open("w0");
  });

  it("loads slide data", () => {
    expect(store.cells).toHaveLength(5);
    expect(store.region?.candidate_count).toBe(1);
    expect(store.heatmap?.patches).toHaveLength(2);
  });

  it("measure clicks stage p, a, b in order", () => {
    store.measureClick({ x: 0, y: 0 });
    store.measureClick({ x: 10, y: 0 });
    expect(store.draftComplete()).toBe(false);
    store.measureClick({ x: 10, y: 10 });
    expect(store.draftComplete()).toBe(true);
    expect(store.draft.p).toEqual({ x: 0, y: 0 });
  });

  it("rejects a zero-length line inline", () => {
    store.measureClick({ x: 5, y: 5 });
    store.measureClick({ x: 7, y: 7 });
    store.measureClick({ x: 7, y: 7 });
    expect(store.draftError).toMatch(/distinct/);
    expect(store.draftComplete()).toBe(false);
    store.measureClick({ x: 9, y: 9 });
    expect(store.draftComplete()).toBe(true);
  });

  it("previews pixels client-side", () => {
    store.measureClick({ x: 0, y: 0 });
    store.measureClick({ x: 1, y: 0 });
    store.measureClick({ x: 0, y: 1 });
    expect(store.previewPx()).toBeCloseTo(1 / Math.sqrt(2), 12);
  });

  it("displays server microns verbatim, never client conversion", async () => {
    store.measureClick({ x: 0, y: 0 });
    store.measureClick({ x: 1, y: 0 });
    store.measureClick({ x: 0, y: 1 });
    const rec = await store.commitMeasurement();
    // the fake server returns deliberately unrelated numbers; the UI must
    // show exactly those, proving no local unit math is involved
    expect(rec.um).toBe(42.0);
    expect(store.measurements[0].um).toBe(42.0);
    const ctx = new FakeCtx();
    renderMeasurement(ctx, store.measurements[0], store.transform, 800, 600, false);
    const label = ctx.calls.find((c) => c.op === "fillText");
    expect(String(label?.args[0])).toContain("42.00 um");
  });

  it("cell toggles filter the scatter without touching data", () => {
    expect(store.visibleCells()).toHaveLength(5);
    store.toggleCellType("tumor");
    expect(store.visibleCells()).toHaveLength(2);
    expect(store.cells).toHaveLength(5);
    store.toggleCellType("tumor");
    expect(store.visibleCells()).toHaveLength(5);
  });
});

describe("render layers", () => {
  it("highlight count equals the server candidate count", async () => {
    const store = storeWithServer();
    await store.open("w0");
    const ctx = new FakeCtx();
    const drawn = renderCandidateHighlights(ctx, store, store.transform);
    expect(drawn).toBe(store.region!.candidate_count);
    expect(ctx.count("arc")).toBe(store.region!.candidate_count);
  });

  it("candidate highlights and region polyline toggle independently", async () => {
    const store = storeWithServer();
    await store.open("w0");
    store.view.highlightCandidates = false;
    expect(renderCandidateHighlights(new FakeCtx(), store, store.transform)).toBe(0);
    store.view.showRegion = false;
    const ctx = new FakeCtx();
    renderRegion(ctx, store, store.transform);
    expect(ctx.count("stroke")).toBe(0);
    // tumor scatter off must not hide the region polyline
    store.view.showRegion = true;
    store.toggleCellType("tumor");
    const ctx2 = new FakeCtx();
    renderRegion(ctx2, store, store.transform);
    renderCells(ctx2, store, store.transform);
    expect(ctx2.count("stroke")).toBeGreaterThan(0);
    expect(ctx2.count("fill")).toBe(2); // stroma + immune only
  });

  it("heatmap honors the on/off toggle and opacity", async () => {
    const store = storeWithServer();
    await store.open("w0");
    const ctx = new FakeCtx();
    store.view.heatmapOpacity = 0.31;
    renderHeatmapTiles(ctx, store, store.transform);
    expect(ctx.count("fillRect")).toBe(2);
    store.view.heatmapOn = false;
    const ctx2 = new FakeCtx();
    renderHeatmapTiles(ctx2, store, store.transform);
    expect(ctx2.count("fillRect")).toBe(0);
  });

  it("all layers off leaves only the base raster", async () => {
    const store = storeWithServer();
    await store.open("w0");
    store.view.heatmapOn = false;
    store.view.showRegion = false;
    store.view.highlightCandidates = false;
    for (const t of Object.keys(store.view.cellToggles)) {
      store.view.cellToggles[t as keyof typeof store.view.cellToggles] = false;
    }
    const ctx = new FakeCtx();
    renderHeatmapTiles(ctx, store, store.transform);
    renderCells(ctx, store, store.transform);
    renderRegion(ctx, store, store.transform);
    renderCandidateHighlights(ctx, store, store.transform);
    expect(ctx.calls).toHaveLength(0);
  });
});
