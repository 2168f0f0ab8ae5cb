import { Point } from "./types";

/** Perpendicular distance from p to the infinite line through a and b, in the
 * same units as the inputs. Returns null for a degenerate (zero-length) line;
 * callers reject that case inline. */
export function pointToLineDistance(p: Point, a: Point, b: Point): number | null {
  const dx = b.x - a.x;
  const dy = b.y - a.y;
  const len = Math.hypot(dx, dy);
  if (len === 0) return null;
  return Math.abs(dx * (p.y - a.y) - dy * (p.x - a.x)) / len;
}

/** Intersections of the infinite line through a-b with a 0,0..w,h viewport,
 * for drawing the line's extension beyond its defining segment. Returns null
 * when the line misses the viewport or is degenerate. */
export function clipInfiniteLine(
  a: Point, b: Point, w: number, h: number,
): [Point, Point] | null {
  const dx = b.x - a.x;
  const dy = b.y - a.y;
  if (dx === 0 && dy === 0) return null;
  // Liang-Barsky on the parametric form a + t*(b-a), t unbounded
  let t0 = -Infinity;
  let t1 = Infinity;
  const edges: Array<[number, number]> = [
    [-dx, a.x],          // x >= 0
    [dx, w - a.x],       // x <= w
    [-dy, a.y],          // y >= 0
    [dy, h - a.y],       // y <= h
  ];
  for (const [denom, num] of edges) {
    if (denom === 0) {
      if (num < 0) return null;
      continue;
    }
    const t = num / denom;
    if (denom < 0) {
      if (t > t0) t0 = t;
    } else if (t < t1) {
      t1 = t;
    }
  }
  if (t0 > t1) return null;
  return [
    { x: a.x + t0 * dx, y: a.y + t0 * dy },
    { x: a.x + t1 * dx, y: a.y + t1 * dy },
  ];
}

export function dist(a: Point, b: Point): number {
  return Math.hypot(a.x - b.x, a.y - b.y);
}
