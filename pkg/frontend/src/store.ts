import { ApiClient } from "./api";
import { dist, pointToLineDistance } from "./geometry";
import { SharedTransform } from "./transform";
import {
  Cell, CellType, CELL_TYPES, HeatmapScores, Measurement, Point, Tool,
  TumorRegion, WsiMeta, WsiSummary,
} from "./types";

export interface MeasureDraft {
  p?: Point;
  a?: Point;
  b?: Point;
}

/** Pure view state: toggles are never allowed to mutate loaded data. */
export interface ViewState {
  tool: Tool;
  cellToggles: Record<CellType, boolean>;
  heatmapOn: boolean;
  heatmapOpacity: number;
  showRegion: boolean;
  highlightCandidates: boolean;
  selectedMeasurement: string | null;
}

export function defaultViewState(): ViewState {
  const toggles = {} as Record<CellType, boolean>;
  for (const t of CELL_TYPES) toggles[t] = true;
  return {
    tool: "pan",
    cellToggles: toggles,
    heatmapOn: true,
    heatmapOpacity: 0.5,
    showRegion: true,
    highlightCandidates: true,
    selectedMeasurement: null,
  };
}

export class AppStore {
  view = defaultViewState();
  transform = new SharedTransform();
  wsis: WsiSummary[] = [];
  current: string | null = null;
  meta: WsiMeta | null = null;
  cells: Cell[] = [];
  region: TumorRegion | null = null;
  measurements: Measurement[] = [];
  heatmap: HeatmapScores | null = null;
  draft: MeasureDraft = {};
  draftError: string | null = null;
  private listeners: Array<() => void> = [];

  constructor(public readonly api: ApiClient) {
    this.transform.onChange(() => this.emit());
  }

  onChange(fn: () => void): void {
    this.listeners.push(fn);
  }

  private emit(): void {
    for (const fn of this.listeners) fn();
  }

  async loadList(): Promise<void> {
    this.wsis = (await this.api.listWsis()).wsis;
    this.emit();
  }

  async open(wsiId: string, viewW = 800, viewH = 600): Promise<void> {
    this.current = wsiId;
    this.meta = await this.api.meta(wsiId);
    this.cells = (await this.api.cells(wsiId)).cells;
    this.region = await this.api.tumorRegion(wsiId);
    this.measurements = (await this.api.measurements(wsiId)).measurements;
    try {
      this.heatmap = await this.api.heatmapScores(wsiId, "20x");
    } catch {
      this.heatmap = null; // no checkpoint loaded on the server
    }
    this.draft = {};
    this.draftError = null;
    const t = this.meta.thumbnail;
    this.transform.fit(t.width * t.downsample, t.height * t.downsample, viewW, viewH);
    this.emit();
  }

  /** Tumor cells the server flagged as sitting outside the main region. */
  candidateCells(): Cell[] {
    if (!this.region) return [];
    return this.region.candidates
      .filter((c) => c.index >= 0 && c.index < this.cells.length)
      .map((c) => this.cells[c.index]);
  }

  visibleCells(): Cell[] {
    return this.cells.filter((c) => this.view.cellToggles[c.type]);
  }

  /** Measure-tool click sequence: p, then a, then b. */
  measureClick(world: Point): void {
    if (!this.draft.p) {
      this.draft = { p: world };
    } else if (!this.draft.a) {
      this.draft.a = world;
    } else {
      this.draft.b = world;
    }
    this.validateDraft();
    this.emit();
  }

  /** While the user aims the second line endpoint. */
  measureHover(world: Point): void {
    if (this.draft.p && this.draft.a && !this.draft.b) {
      this.draftError = null;
      this.emit();
    }
  }

  private validateDraft(): void {
    this.draftError = null;
    if (this.draft.a && this.draft.b && dist(this.draft.a, this.draft.b) === 0) {
      this.draftError = "line endpoints coincide; pick two distinct points";
      this.draft.b = undefined;
    }
  }

  clearDraft(): void {
    this.draft = {};
    this.draftError = null;
    this.emit();
  }

  /** Client-side pixel preview; microns only ever come from the server. */
  previewPx(hoverB?: Point): number | null {
    const { p, a } = this.draft;
    const b = this.draft.b ?? hoverB;
    if (!p || !a || !b) return null;
    return pointToLineDistance(p, a, b);
  }

  draftComplete(): boolean {
    return Boolean(this.draft.p && this.draft.a && this.draft.b);
  }

  async commitMeasurement(panel: string = "wsi", note = ""): Promise<Measurement> {
    if (!this.current) throw new Error("no slide open");
    const { p, a, b } = this.draft;
    if (!p || !a || !b) throw new Error("measurement incomplete");
    if (dist(a, b) === 0) throw new Error("degenerate line");
    const rec = await this.api.addMeasurement(this.current, {
      p: [p.x, p.y], a: [a.x, a.y], b: [b.x, b.y], panel, note,
    });
    this.measurements = (await this.api.measurements(this.current)).measurements;
    this.view.selectedMeasurement = rec.id;
    this.draft = {};
    this.emit();
    return rec;
  }

  async deleteMeasurement(id: string): Promise<void> {
    if (!this.current) return;
    await this.api.deleteMeasurement(this.current, id);
    this.measurements = (await this.api.measurements(this.current)).measurements;
    if (this.view.selectedMeasurement === id) this.view.selectedMeasurement = null;
    this.emit();
  }

  setTool(tool: Tool): void {
    this.view.tool = tool;
    this.emit();
  }

  toggleCellType(t: CellType): void {
    this.view.cellToggles[t] = !this.view.cellToggles[t];
    this.emit();
  }
}
