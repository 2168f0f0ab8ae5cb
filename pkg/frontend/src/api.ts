import {
  Cell, HeatmapScores, Measurement, TumorRegion, WsiMeta, WsiSummary,
} from "./types";

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

/** Thin typed client over the measurement service. */
export class ApiClient {
  constructor(
    private readonly base: string = "",
    private readonly fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  private async get<T>(path: string): Promise<T> {
    const res = await this.fetchImpl(this.base + path);
    if (!res.ok) throw new ApiError(res.status, `${path}: ${res.status}`);
    return res.json() as Promise<T>;
  }

  listWsis(): Promise<{ wsis: WsiSummary[] }> {
    return this.get("/wsis");
  }

  meta(wsiId: string): Promise<WsiMeta> {
    return this.get(`/wsi/${wsiId}`);
  }

  cells(wsiId: string): Promise<{ cells: Cell[] }> {
    return this.get(`/wsi/${wsiId}/cells`);
  }

  tumorRegion(wsiId: string): Promise<TumorRegion> {
    return this.get(`/wsi/${wsiId}/tumor-region`);
  }

  heatmapScores(wsiId: string, scale: "10x" | "20x"): Promise<HeatmapScores> {
    return this.get(`/wsi/${wsiId}/heatmap-scores?scale=${scale}`);
  }

  thumbnailUrl(wsiId: string, level = 0): string {
    return `${this.base}/wsi/${wsiId}/thumbnail?level=${level}`;
  }

  measurements(wsiId: string): Promise<{ measurements: Measurement[] }> {
    return this.get(`/wsi/${wsiId}/measurements`);
  }

  async addMeasurement(
    wsiId: string,
    body: { p: [number, number]; a: [number, number]; b: [number, number];
            panel?: string; note?: string },
  ): Promise<Measurement> {
    const res = await this.fetchImpl(`${this.base}/wsi/${wsiId}/measurements`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!res.ok) throw new ApiError(res.status, `add measurement: ${res.status}`);
    return res.json() as Promise<Measurement>;
  }

  async deleteMeasurement(wsiId: string, id: string): Promise<void> {
    const res = await this.fetchImpl(`${this.base}/wsi/${wsiId}/measurements/${id}`, {
      method: "DELETE",
    });
    if (!res.ok) throw new ApiError(res.status, `delete measurement: ${res.status}`);
  }
}
