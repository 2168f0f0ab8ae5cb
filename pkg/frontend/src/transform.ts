import { Point } from "./types";

export interface ZoomBounds {
  min: number;
  max: number;
}

/** One world-to-screen transform shared by both panels.
 *
 * World coordinates are level-0 slide pixels; both the slide panel and the
 * cell panel render through the same instance, so any gesture applied in
 * either panel moves both views identically by construction.
 */
export class SharedTransform {
  scale: number;
  ox: number;
  oy: number;
  readonly bounds: ZoomBounds;
  private listeners: Array<() => void> = [];

  constructor(scale = 0.1, bounds: ZoomBounds = { min: 0.005, max: 8 }) {
    this.scale = scale;
    this.ox = 0;
    this.oy = 0;
    this.bounds = bounds;
  }

  onChange(fn: () => void): void {
    this.listeners.push(fn);
  }

  private emit(): void {
    for (const fn of this.listeners) fn();
  }

  worldToScreen(p: Point): Point {
    return { x: p.x * this.scale + this.ox, y: p.y * this.scale + this.oy };
  }

  screenToWorld(p: Point): Point {
    return { x: (p.x - this.ox) / this.scale, y: (p.y - this.oy) / this.scale };
  }

  pan(dxScreen: number, dyScreen: number): void {
    this.ox += dxScreen;
    this.oy += dyScreen;
    this.emit();
  }

  /** Zoom by `factor` keeping the screen point (sx, sy) fixed. */
  zoomAt(sx: number, sy: number, factor: number): void {
    const next = Math.min(this.bounds.max, Math.max(this.bounds.min, this.scale * factor));
    const applied = next / this.scale;
    this.ox = sx - (sx - this.ox) * applied;
    this.oy = sy - (sy - this.oy) * applied;
    this.scale = next;
    this.emit();
  }

  /** Fit a world-space box into a viewport with a small margin. */
  fit(worldW: number, worldH: number, viewW: number, viewH: number): void {
    const s = 0.95 * Math.min(viewW / worldW, viewH / worldH);
    this.scale = Math.min(this.bounds.max, Math.max(this.bounds.min, s));
    this.ox = (viewW - worldW * this.scale) / 2;
    this.oy = (viewH - worldH * this.scale) / 2;
    this.emit();
  }

  snapshot(): { scale: number; ox: number; oy: number } {
    return { scale: this.scale, ox: this.ox, oy: this.oy };
  }
}

/** Per-panel gesture adapter; every panel writes through the shared
 * transform, which is what keeps the two views synchronized. */
export class PanelGestures {
  private dragging = false;
  private lastX = 0;
  private lastY = 0;

  constructor(public readonly transform: SharedTransform) {}

  wheel(sx: number, sy: number, deltaY: number): void {
    this.transform.zoomAt(sx, sy, deltaY < 0 ? 1.2 : 1 / 1.2);
  }

  dragStart(sx: number, sy: number): void {
    this.dragging = true;
    this.lastX = sx;
    this.lastY = sy;
  }

  dragMove(sx: number, sy: number): boolean {
    if (!this.dragging) return false;
    this.transform.pan(sx - this.lastX, sy - this.lastY);
    this.lastX = sx;
    this.lastY = sy;
    return true;
  }

  dragEnd(): void {
    this.dragging = false;
  }
}
