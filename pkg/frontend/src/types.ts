// Mirrors the HTTP service schema exactly; the UI defines no unit math of
// its own beyond the pixel preview.

export type CellType =
  | "tumor"
  | "stroma"
  | "immune"
  | "erythrocyte"
  | "macrophage"
  | "dead"
  | "other";

export const CELL_TYPES: CellType[] = [
  "tumor", "stroma", "immune", "erythrocyte", "macrophage", "dead", "other",
];

export interface Point {
  x: number;
  y: number;
}

export interface WsiSummary {
  wsi_id: string;
  label: string;
  mpp: number;
  section_kind: string;
  prob_stas?: number;
  predicted?: string;
}

export interface ThumbnailInfo {
  downsample: number;
  width: number;
  height: number;
}

export interface WsiMeta {
  wsi_id: string;
  label: string;
  subtype: string;
  section_kind: string;
  mpp: number;
  n_patches_small: number;
  n_patches_large: number;
  n_cells: number;
  thumbnail: ThumbnailInfo;
}

export interface Cell {
  x: number;
  y: number;
  type: CellType;
  prob: number;
  area: number;
}

export interface TumorRegionCandidate {
  index: number;
  x: number;
  y: number;
}

export interface TumorRegion {
  grid_px: number;
  threshold: number;
  boundary: [number, number][][];
  candidates: TumorRegionCandidate[];
  candidate_count: number;
}

export interface Measurement {
  id: string;
  wsi_id: string;
  p: [number, number];
  a: [number, number];
  b: [number, number];
  px: number;
  um: number;
  panel: string;
  note: string;
  timestamp: number;
}

export interface HeatmapPatch {
  x: number;
  y: number;
  tile: number;
  score: number;
}

export interface HeatmapScores {
  scale: string;
  patches: HeatmapPatch[];
}

export type Tool = "pan" | "point" | "line" | "measure";
