import { ApiClient } from "./api";
import { renderCandidateHighlights, renderCells, renderDraft, renderHeatmapTiles,
         renderMeasurement, renderRegion } from "./render";
import { AppStore } from "./store";
import { PanelGestures } from "./transform";
import { CELL_TYPES, Point, Tool } from "./types";

const TOOLS: Tool[] = ["pan", "point", "line", "measure"];

interface Panel {
  canvas: HTMLCanvasElement;
  ctx: CanvasRenderingContext2D;
  gestures: PanelGestures;
  kind: "wsi" | "tme";
}

class App {
  store = new AppStore(new ApiClient(""));
  panels: Panel[] = [];
  thumbnail: HTMLImageElement | null = null;
  hoverWorld: Point | undefined;

  constructor(private root: HTMLElement) {
    this.buildDom();
    this.store.onChange(() => this.draw());
    void this.store.loadList().then(() => {
      this.fillSlideList();
      const first = this.store.wsis[0];
      if (first) void this.openSlide(first.wsi_id);
    });
  }

  private el<T extends HTMLElement>(id: string): T {
    return this.root.querySelector(`#${id}`) as T;
  }

  private buildDom(): void {
    this.root.innerHTML = `
      <div class="toolbar">
        <select id="slide-select"></select>
        <span class="group" id="tools"></span>
        <label>heatmap <input type="checkbox" id="heatmap-on" checked>
          <input type="range" id="heatmap-opacity" min="0" max="100" value="50"></label>
        <label><input type="checkbox" id="show-region" checked> tumor region</label>
        <label><input type="checkbox" id="show-candidates" checked> STAS candidates</label>
        <span class="group" id="cell-toggles"></span>
        <button id="commit" disabled>commit measurement</button>
        <span id="status"></span>
      </div>
      <div class="panels">
        <div class="panel"><h4>WSI</h4><canvas id="canvas-wsi" width="760" height="560"></canvas></div>
        <div class="panel"><h4>TME cell map</h4><canvas id="canvas-tme" width="760" height="560"></canvas></div>
      </div>
      <div id="measurements"></div>`;

    const tools = this.el<HTMLSpanElement>("tools");
    for (const tool of TOOLS) {
      const btn = document.createElement("button");
      btn.textContent = tool;
      btn.id = `tool-${tool}`;
      btn.onclick = () => this.store.setTool(tool);
      tools.appendChild(btn);
    }
    const toggles = this.el<HTMLSpanElement>("cell-toggles");
    for (const type of CELL_TYPES) {
      const label = document.createElement("label");
      const box = document.createElement("input");
      box.type = "checkbox";
      box.checked = true;
      box.onchange = () => this.store.toggleCellType(type);
      label.appendChild(box);
      label.appendChild(document.createTextNode(type));
      toggles.appendChild(label);
    }
    this.el<HTMLInputElement>("heatmap-on").onchange = (e) => {
      this.store.view.heatmapOn = (e.target as HTMLInputElement).checked;
      this.draw();
    };
    this.el<HTMLInputElement>("heatmap-opacity").oninput = (e) => {
      this.store.view.heatmapOpacity = Number((e.target as HTMLInputElement).value) / 100;
      this.draw();
    };
    this.el<HTMLInputElement>("show-region").onchange = (e) => {
      this.store.view.showRegion = (e.target as HTMLInputElement).checked;
      this.draw();
    };
    this.el<HTMLInputElement>("show-candidates").onchange = (e) => {
      this.store.view.highlightCandidates = (e.target as HTMLInputElement).checked;
      this.draw();
    };
    this.el<HTMLButtonElement>("commit").onclick = () => void this.commit();
    this.el<HTMLSelectElement>("slide-select").onchange = (e) =>
      void this.openSlide((e.target as HTMLSelectElement).value);

    for (const kind of ["wsi", "tme"] as const) {
      const canvas = this.el<HTMLCanvasElement>(`canvas-${kind}`);
      const panel: Panel = {
        canvas,
        ctx: canvas.getContext("2d") as CanvasRenderingContext2D,
        gestures: new PanelGestures(this.store.transform),
        kind,
      };
      this.bindGestures(panel);
      this.panels.push(panel);
    }
  }

  private bindGestures(panel: Panel): void {
    const pos = (e: MouseEvent): Point => {
      const r = panel.canvas.getBoundingClientRect();
      return { x: e.clientX - r.left, y: e.clientY - r.top };
    };
    panel.canvas.addEventListener("wheel", (e) => {
      e.preventDefault();
      const s = pos(e);
      panel.gestures.wheel(s.x, s.y, e.deltaY);
    });
    panel.canvas.addEventListener("mousedown", (e) => {
      const s = pos(e);
      if (this.store.view.tool === "pan") {
        panel.gestures.dragStart(s.x, s.y);
      }
    });
    panel.canvas.addEventListener("mousemove", (e) => {
      const s = pos(e);
      if (panel.gestures.dragMove(s.x, s.y)) return;
      this.hoverWorld = this.store.transform.screenToWorld(s);
      if (this.store.view.tool === "measure") this.draw();
    });
    panel.canvas.addEventListener("mouseup", () => panel.gestures.dragEnd());
    panel.canvas.addEventListener("mouseleave", () => panel.gestures.dragEnd());
    panel.canvas.addEventListener("click", (e) => {
      const world = this.store.transform.screenToWorld(pos(e));
      const tool = this.store.view.tool;
      if (tool === "measure" || tool === "point" || tool === "line") {
        this.store.measureClick(world);
        this.updateCommitButton();
      }
    });
  }

  private fillSlideList(): void {
    const select = this.el<HTMLSelectElement>("slide-select");
    select.innerHTML = "";
    for (const w of this.store.wsis) {
      const opt = document.createElement("option");
      const pred = w.predicted ? ` -> ${w.predicted} (${(w.prob_stas ?? 0).toFixed(2)})` : "";
      opt.value = w.wsi_id;
      opt.textContent = `${w.wsi_id} [${w.label}]${pred}`;
      select.appendChild(opt);
    }
  }

  private async openSlide(wsiId: string): Promise<void> {
    const canvas = this.panels[0].canvas;
    await this.store.open(wsiId, canvas.width, canvas.height);
    this.thumbnail = new Image();
    this.thumbnail.onload = () => this.draw();
    this.thumbnail.src = this.store.api.thumbnailUrl(wsiId);
    this.renderMeasurementList();
  }

  private async commit(): Promise<void> {
    try {
      const rec = await this.store.commitMeasurement("wsi");
      this.setStatus(`saved: ${rec.um.toFixed(2)} um / ${rec.px.toFixed(1)} px`);
      this.renderMeasurementList();
    } catch (err) {
      this.setStatus(String(err));
    }
    this.updateCommitButton();
  }

  private updateCommitButton(): void {
    this.el<HTMLButtonElement>("commit").disabled = !this.store.draftComplete();
    if (this.store.draftError) this.setStatus(this.store.draftError);
  }

  private setStatus(text: string): void {
    this.el<HTMLSpanElement>("status").textContent = text;
  }

  private renderMeasurementList(): void {
    const host = this.el<HTMLDivElement>("measurements");
    host.innerHTML = "<h4>Measurements</h4>";
    for (const m of this.store.measurements) {
      const row = document.createElement("div");
      row.className = "measurement-row";
      // displayed microns come from the server record, never client math
      row.textContent = `${m.um.toFixed(2)} um  (${m.px.toFixed(1)} px)  ${m.note}`;
      const del = document.createElement("button");
      del.textContent = "delete";
      del.onclick = () => void this.store.deleteMeasurement(m.id)
        .then(() => this.renderMeasurementList());
      row.appendChild(del);
      row.onclick = () => {
        this.store.view.selectedMeasurement = m.id;
        this.draw();
      };
      host.appendChild(row);
    }
  }

  private draw(): void {
    const t = this.store.transform;
    for (const panel of this.panels) {
      const { ctx, canvas } = panel;
      ctx.clearRect(0, 0, canvas.width, canvas.height);
      ctx.fillStyle = "#fafafa";
      ctx.fillRect(0, 0, canvas.width, canvas.height);
      if (panel.kind === "wsi") {
        if (this.thumbnail && this.store.meta) {
          const ds = this.store.meta.thumbnail.downsample;
          const origin = t.worldToScreen({ x: 0, y: 0 });
          ctx.drawImage(this.thumbnail, origin.x, origin.y,
                        this.thumbnail.width * ds * t.scale,
                        this.thumbnail.height * ds * t.scale);
        }
        renderHeatmapTiles(ctx, this.store, t);
      } else {
        renderCells(ctx, this.store, t);
        renderRegion(ctx, this.store, t);
        renderCandidateHighlights(ctx, this.store, t);
      }
      for (const m of this.store.measurements) {
        renderMeasurement(ctx, m, t, canvas.width, canvas.height,
                          m.id === this.store.view.selectedMeasurement);
      }
      renderDraft(ctx, this.store, t, canvas.width, canvas.height, this.hoverWorld);
    }
  }
}

declare global {
  interface Window { stasmilApp: App }
}

window.addEventListener("DOMContentLoaded", () => {
  window.stasmilApp = new App(document.getElementById("app") as HTMLElement);
});
