import { clipInfiniteLine } from "./geometry";
import { AppStore } from "./store";
import { SharedTransform } from "./transform";
import { CellType, Measurement, Point } from "./types";

/** The 2D-context subset the renderers use; tests substitute a recorder. */
export interface Ctx2D {
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  globalAlpha: number;
  font: string;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  rect(x: number, y: number, w: number, h: number): void;
  fill(): void;
  stroke(): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  clearRect(x: number, y: number, w: number, h: number): void;
  fillText(text: string, x: number, y: number): void;
  setLineDash(segments: number[]): void;
}

export const CELL_COLORS: Record<CellType, string> = {
  tumor: "#d62728",
  stroma: "#2ca02c",
  immune: "#1f77b4",
  erythrocyte: "#ff7f0e",
  macrophage: "#9467bd",
  dead: "#7f7f7f",
  other: "#bcbd22",
};

/** Same piecewise-linear blue-cyan-yellow-red ramp the server renders with. */
export function heatColor(score: number): string {
  const anchors: Array<[number, [number, number, number]]> = [
    [0, [0, 0, 255]], [1 / 3, [0, 255, 255]], [2 / 3, [255, 255, 0]], [1, [255, 0, 0]],
  ];
  const s = Math.min(1, Math.max(0, score));
  for (let i = 1; i < anchors.length; i++) {
    const [t1, c1] = anchors[i];
    if (s <= t1) {
      const [t0, c0] = anchors[i - 1];
      const f = (s - t0) / (t1 - t0);
      const mix = c0.map((v, k) => Math.round(v + f * (c1[k] - v)));
      return `rgb(${mix[0]},${mix[1]},${mix[2]})`;
    }
  }
  return "rgb(255,0,0)";
}

export function renderHeatmapTiles(ctx: Ctx2D, store: AppStore, t: SharedTransform): void {
  if (!store.view.heatmapOn || !store.heatmap) return;
  ctx.globalAlpha = store.view.heatmapOpacity;
  for (const patch of store.heatmap.patches) {
    const s = t.worldToScreen({ x: patch.x, y: patch.y });
    const size = patch.tile * t.scale;
    ctx.fillStyle = heatColor(patch.score);
    ctx.fillRect(s.x, s.y, size, size);
  }
  ctx.globalAlpha = 1;
}

export function renderCells(ctx: Ctx2D, store: AppStore, t: SharedTransform): void {
  const radius = Math.max(1.5, 90 * t.scale);
  for (const cell of store.visibleCells()) {
    const s = t.worldToScreen(cell);
    ctx.fillStyle = CELL_COLORS[cell.type];
    ctx.beginPath();
    ctx.arc(s.x, s.y, radius, 0, 2 * Math.PI);
    ctx.fill();
  }
}

export function renderRegion(ctx: Ctx2D, store: AppStore, t: SharedTransform): void {
  if (!store.view.showRegion || !store.region) return;
  ctx.strokeStyle = "#111111";
  ctx.lineWidth = 1.5;
  ctx.setLineDash([6, 4]);
  for (const loop of store.region.boundary) {
    ctx.beginPath();
    loop.forEach(([x, y], i) => {
      const s = t.worldToScreen({ x, y });
      if (i === 0) ctx.moveTo(s.x, s.y);
      else ctx.lineTo(s.x, s.y);
    });
    ctx.stroke();
  }
  ctx.setLineDash([]);
}

/** One ring per server-flagged STAS candidate; the count equals the
 * tumor-region payload's candidate count by construction. */
export function renderCandidateHighlights(
  ctx: Ctx2D, store: AppStore, t: SharedTransform,
): number {
  if (!store.view.highlightCandidates) return 0;
  const candidates = store.candidateCells();
  ctx.strokeStyle = "#e6007e";
  ctx.lineWidth = 2;
  for (const cell of candidates) {
    const s = t.worldToScreen(cell);
    ctx.beginPath();
    ctx.arc(s.x, s.y, Math.max(4, 160 * t.scale), 0, 2 * Math.PI);
    ctx.stroke();
  }
  return candidates.length;
}

function drawPoint(ctx: Ctx2D, s: Point, color: string): void {
  ctx.fillStyle = color;
  ctx.beginPath();
  ctx.arc(s.x, s.y, 4, 0, 2 * Math.PI);
  ctx.fill();
}

/** Measurements draw the infinite extension of the a-b line (the tool
 * measures point-to-line, not point-to-segment). */
export function renderMeasurement(
  ctx: Ctx2D, m: Measurement, t: SharedTransform,
  viewW: number, viewH: number, selected: boolean,
): void {
  const a = t.worldToScreen({ x: m.a[0], y: m.a[1] });
  const b = t.worldToScreen({ x: m.b[0], y: m.b[1] });
  const p = t.worldToScreen({ x: m.p[0], y: m.p[1] });
  const clipped = clipInfiniteLine(a, b, viewW, viewH);
  ctx.strokeStyle = selected ? "#e6007e" : "#0055cc";
  ctx.lineWidth = selected ? 2.5 : 1.5;
  if (clipped) {
    ctx.setLineDash([2, 3]);
    ctx.beginPath();
    ctx.moveTo(clipped[0].x, clipped[0].y);
    ctx.lineTo(clipped[1].x, clipped[1].y);
    ctx.stroke();
    ctx.setLineDash([]);
  }
  ctx.beginPath();
  ctx.moveTo(a.x, a.y);
  ctx.lineTo(b.x, b.y);
  ctx.stroke();
  drawPoint(ctx, p, selected ? "#e6007e" : "#0055cc");
  // microns shown verbatim from the server record; no client conversion
  ctx.fillStyle = "#111111";
  ctx.font = "12px sans-serif";
  ctx.fillText(`${m.um.toFixed(2)} um (${m.px.toFixed(1)} px)`, p.x + 8, p.y - 8);
}

export function renderDraft(
  ctx: Ctx2D, store: AppStore, t: SharedTransform,
  viewW: number, viewH: number, hoverWorld?: Point,
): void {
  const { p, a } = store.draft;
  const b = store.draft.b ?? hoverWorld;
  if (p) drawPoint(ctx, t.worldToScreen(p), "#e6a700");
  if (a) drawPoint(ctx, t.worldToScreen(a), "#e6a700");
  if (a && b) {
    const sa = t.worldToScreen(a);
    const sb = t.worldToScreen(b);
    const clipped = clipInfiniteLine(sa, sb, viewW, viewH);
    ctx.strokeStyle = "#e6a700";
    ctx.lineWidth = 1.5;
    if (clipped) {
      ctx.setLineDash([2, 3]);
      ctx.beginPath();
      ctx.moveTo(clipped[0].x, clipped[0].y);
      ctx.lineTo(clipped[1].x, clipped[1].y);
      ctx.stroke();
      ctx.setLineDash([]);
    }
    ctx.beginPath();
    ctx.moveTo(sa.x, sa.y);
    ctx.lineTo(sb.x, sb.y);
    ctx.stroke();
  }
  const preview = store.previewPx(hoverWorld);
  if (p && preview !== null) {
    const sp = t.worldToScreen(p);
    ctx.fillStyle = "#7a5a00";
    ctx.font = "12px sans-serif";
    ctx.fillText(`preview ${preview.toFixed(1)} px`, sp.x + 8, sp.y + 16);
  }
}
