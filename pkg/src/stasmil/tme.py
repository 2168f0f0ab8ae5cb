"""Tumor-microenvironment indicators, group statistics, survival analysis,
tumor-region proposal, and STAS distance geometry.

Microvessel density has no direct readout in the 7-class cell vocabulary
(there is no vessel class), so it is operationalized as the areal density
of erythrocyte clusters: connected components under a 30 um linkage radius
with at least ``MVD_MIN_CELLS`` members. Ratio indicators with a zero
denominator are flagged undefined and excluded from group tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import CELL_TYPES

MVD_LINK_UM = 30.0
MVD_MIN_CELLS = 5

INDICATOR_NAMES = tuple(
    [f"frac_{t}" for t in CELL_TYPES]
    + ["str", "itr", "mvd", "svr",
       "density_tumor", "density_immune", "density_stroma",
       "dead_fraction", "macrophage_tumor_ratio"])


@dataclass
class TmeMetrics:
    counts: dict
    values: dict                      # indicator name -> float (nan if undefined)
    undefined: frozenset
    area_mm2: float

    def indicator_vector(self) -> np.ndarray:
        return np.array([self.values[n] for n in INDICATOR_NAMES])

    def csv_row(self) -> str:
        return ",".join("" if n in self.undefined else f"{self.values[n]:.6g}"
                        for n in INDICATOR_NAMES)


def _cluster_erythrocytes(cells, mpp: float) -> int:
    """Count erythrocyte clusters (>= MVD_MIN_CELLS within the linkage radius)."""
    xy = np.array([[c.x, c.y] for c in cells if c.cell_type == "erythrocyte"])
    if len(xy) == 0:
        return 0
    radius_px = MVD_LINK_UM / mpp
    parent = list(range(len(xy)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    d = xy[:, None, :] - xy[None, :, :]
    link = (d * d).sum(-1) <= radius_px * radius_px
    for i in range(len(xy)):
        for j in range(i + 1, len(xy)):
            if link[i, j]:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[rj] = ri
    sizes: dict[int, int] = {}
    for i in range(len(xy)):
        r = find(i)
        sizes[r] = sizes.get(r, 0) + 1
    return sum(1 for s in sizes.values() if s >= MVD_MIN_CELLS)


def compute_tme_metrics(cells, tissue_area_px2: float, mpp: float,
                        weight: str = "count") -> TmeMetrics:
    """The 16-indicator vector for one slide.

    ``weight='area'`` switches the STR/ITR/SVR numerators and denominators
    from cell counts to summed nucleus areas.
    """
    if tissue_area_px2 <= 0:
        raise ValueError("tissue area must be positive")
    if weight not in ("count", "area"):
        raise ValueError(f"unknown weight mode {weight!r}")
    counts = {t: 0 for t in CELL_TYPES}
    mass = {t: 0.0 for t in CELL_TYPES}
    for c in cells:
        counts[c.cell_type] += 1
        mass[c.cell_type] += c.nucleus_area
    total = sum(counts.values())
    area_mm2 = tissue_area_px2 * mpp * mpp / 1e6
    clusters = _cluster_erythrocytes(cells, mpp)
    w = counts if weight == "count" else mass

    values: dict[str, float] = {}
    undefined: set[str] = set()

    def ratio(name, num, den):
        if den == 0:
            values[name] = float("nan")
            undefined.add(name)
        else:
            values[name] = num / den

    for t in CELL_TYPES:
        ratio(f"frac_{t}", counts[t], total)
    ratio("str", w["stroma"], w["tumor"])
    ratio("itr", w["immune"], w["tumor"])
    values["mvd"] = clusters / area_mm2
    ratio("svr", w["stroma"], clusters)
    values["density_tumor"] = counts["tumor"] / area_mm2
    values["density_immune"] = counts["immune"] / area_mm2
    values["density_stroma"] = counts["stroma"] / area_mm2
    ratio("dead_fraction", counts["dead"], total)
    ratio("macrophage_tumor_ratio", counts["macrophage"], counts["tumor"])
    return TmeMetrics(counts=counts, values=values, undefined=frozenset(undefined),
                      area_mm2=area_mm2)


def metrics_table(rows: list[tuple[str, TmeMetrics]]) -> str:
    """Comma-separated export, one WSI per row, with a documented header."""
    header = "wsi_id," + ",".join(INDICATOR_NAMES)
    return "\n".join([header] + [f"{wsi_id},{m.csv_row()}" for wsi_id, m in rows]) + "\n"


# ---------------------------------------------------------------------------
# group statistics


@dataclass
class TTestResult:
    t: float
    p: float
    degenerate: bool = False


def t_test_two_sided(group_a, group_b) -> TTestResult:
    """Welch's unequal-variance t-test with Welch-Satterthwaite df."""
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each group needs at least 2 values")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0.0 and vb == 0.0:
        if a.mean() == b.mean():
            return TTestResult(0.0, 1.0)
        return TTestResult(float("inf"), 0.0, degenerate=True)
    se2 = va / len(a) + vb / len(b)
    t = float((a.mean() - b.mean()) / np.sqrt(se2))
    df = se2 ** 2 / (va ** 2 / (len(a) ** 2 * (len(a) - 1))
                     + vb ** 2 / (len(b) ** 2 * (len(b) - 1)))
    return TTestResult(t, float(2.0 * stats.t.sf(abs(t), df)))


def _pooled_midranks(groups):
    pooled = np.concatenate([np.asarray(g, dtype=np.float64) for g in groups])
    order = np.argsort(pooled)
    z = pooled[order]
    ranks = np.zeros(len(pooled))
    ties = []
    i = 0
    while i < len(z):
        j = i
        while j < len(z) and z[j] == z[i]:
            j += 1
        ranks[i:j] = 0.5 * (i + j - 1) + 1
        if j - i > 1:
            ties.append(j - i)
        i = j
    out = np.empty(len(pooled))
    out[order] = ranks
    return out, ties


@dataclass
class KruskalResult:
    h: float
    p: float
    degenerate: bool = False


def kruskal_wallis(groups) -> KruskalResult:
    """Tie-corrected Kruskal-Wallis H with a chi-square (k-1 df) p-value."""
    if len(groups) < 3:
        raise ValueError("need at least 3 groups")
    sizes = [len(g) for g in groups]
    if min(sizes) == 0:
        raise ValueError("groups must be non-empty")
    ranks, ties = _pooled_midranks(groups)
    n = sum(sizes)
    h0 = 0.0
    start = 0
    for size in sizes:
        h0 += ranks[start:start + size].sum() ** 2 / size
        start += size
    h0 = 12.0 / (n * (n + 1)) * h0 - 3.0 * (n + 1)
    correction = 1.0 - sum(t ** 3 - t for t in ties) / (n ** 3 - n)
    if correction == 0.0:
        return KruskalResult(0.0, 1.0, degenerate=True)
    h = h0 / correction
    return KruskalResult(float(h), float(stats.chi2.sf(h, len(groups) - 1)))


@dataclass
class DunnComparison:
    i: int
    j: int
    z: float
    p_raw: float
    p_adjusted: float


def dunn_posthoc(groups) -> list[DunnComparison]:
    """Dunn's pairwise z-tests on pooled ranks, Bonferroni-adjusted."""
    if len(groups) < 3:
        raise ValueError("need at least 3 groups")
    sizes = [len(g) for g in groups]
    ranks, ties = _pooled_midranks(groups)
    n = sum(sizes)
    mean_ranks = []
    start = 0
    for size in sizes:
        mean_ranks.append(ranks[start:start + size].mean())
        start += size
    sigma2 = n * (n + 1) / 12.0 - sum(t ** 3 - t for t in ties) / (12.0 * (n - 1))
    m = len(groups) * (len(groups) - 1) // 2
    out = []
    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            se = np.sqrt(sigma2 * (1.0 / sizes[i] + 1.0 / sizes[j]))
            z = (mean_ranks[i] - mean_ranks[j]) / se if se > 0 else 0.0
            p = float(2.0 * stats.norm.sf(abs(z)))
            out.append(DunnComparison(i, j, float(z), p, min(1.0, p * m)))
    return out


# ---------------------------------------------------------------------------
# survival


@dataclass
class KmCurve:
    times: np.ndarray          # distinct event times in ascending order
    survival: np.ndarray       # S(t) after each event time; S(0) = 1

    def at(self, t: float) -> float:
        idx = np.searchsorted(self.times, t, side="right") - 1
        return 1.0 if idx < 0 else float(self.survival[idx])


@dataclass
class LogRankResult:
    curves: list
    chi2: float
    p: float
    zero_event_group: bool = False


def km_curve(times, events) -> KmCurve:
    """Product-limit estimator; censoring only thins the risk set."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    event_times = np.unique(times[events])
    surv = []
    s = 1.0
    for t in event_times:
        at_risk = int((times >= t).sum())
        d = int((events & (times == t)).sum())
        s *= 1.0 - d / at_risk
        surv.append(s)
    return KmCurve(times=event_times, survival=np.asarray(surv))


def km_logrank(times, events, group_labels) -> LogRankResult:
    """Kaplan-Meier curves for two groups plus the log-rank test (1 df)."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    group_labels = np.asarray(group_labels)
    if np.any(times <= 0):
        raise ValueError("times must be positive")
    groups = np.unique(group_labels)
    if len(groups) != 2:
        raise ValueError(f"log-rank needs exactly 2 groups, got {len(groups)}")
    masks = [group_labels == g for g in groups]
    curves = [km_curve(times[m], events[m]) for m in masks]
    zero_event = any(not np.any(events & m) for m in masks)

    observed1 = expected1 = variance = 0.0
    for t in np.unique(times[events]):
        n1 = int((times[masks[0]] >= t).sum())
        n2 = int((times[masks[1]] >= t).sum())
        n = n1 + n2
        d = int((events & (times == t)).sum())
        d1 = int((events & (times == t) & masks[0]).sum())
        observed1 += d1
        expected1 += d * n1 / n
        if n > 1:
            variance += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1)
    if variance == 0.0:
        return LogRankResult(curves, 0.0, 1.0, zero_event_group=zero_event)
    chi2 = (observed1 - expected1) ** 2 / variance
    return LogRankResult(curves, float(chi2), float(stats.chi2.sf(chi2, 1)),
                         zero_event_group=zero_event)


@dataclass
class MedianSplit:
    high: list
    low: list
    median: float
    degenerate: bool = False           # true when the high group is empty


def stratify_by_median(values, subjects) -> MedianSplit:
    """Above-median subjects go high; at or below go low."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        raise ValueError("need at least 2 subjects")
    med = float(np.median(values))
    high = [s for s, v in zip(subjects, values) if v > med]
    low = [s for s, v in zip(subjects, values) if v <= med]
    return MedianSplit(high=high, low=low, median=med, degenerate=len(high) == 0)


# ---------------------------------------------------------------------------
# tumor-region proposal and measurement geometry


@dataclass
class TumorRegion:
    grid_px: int
    occupied: set                    # (row, col) bins of the main component
    boundary: list                   # list of closed polylines [(x, y), ...]
    candidate_indices: list          # tumor cells outside the main component
    threshold: float


def _trace_boundary(bins: set, grid: int) -> list:
    """Closed polylines along bin borders, interior kept on a fixed side."""
    edges: dict[tuple, list] = {}

    def add(p, q):
        edges.setdefault(p, []).append(q)

    for r, c in bins:
        x0, y0 = c * grid, r * grid
        x1, y1 = x0 + grid, y0 + grid
        if (r - 1, c) not in bins:
            add((x0, y0), (x1, y0))
        if (r, c + 1) not in bins:
            add((x1, y0), (x1, y1))
        if (r + 1, c) not in bins:
            add((x1, y1), (x0, y1))
        if (r, c - 1) not in bins:
            add((x0, y1), (x0, y0))
    for v in edges.values():
        v.sort()
    loops = []
    while edges:
        start = min(edges)
        cur = start
        loop = [cur]
        while True:
            nxt = edges[cur].pop(0)
            if not edges[cur]:
                del edges[cur]
            loop.append(nxt)
            cur = nxt
            if cur == start:
                break
        loops.append(loop)
    return loops


def propose_tumor_region(cells, grid_px: int = 100, min_density: float | None = None) -> TumorRegion:
    """Largest connected block of tumor-dense grid bins.

    The default density threshold is the 75th percentile of non-empty bin
    counts. Tumor cells falling outside the winning component are returned
    as STAS candidates for manual review.
    """
    tumor_idx = [i for i, c in enumerate(cells) if c.cell_type == "tumor"]
    if not tumor_idx:
        return TumorRegion(grid_px=grid_px, occupied=set(), boundary=[],
                           candidate_indices=[], threshold=0.0)
    bins: dict[tuple, int] = {}
    cell_bin = {}
    for i in tumor_idx:
        key = (int(cells[i].y // grid_px), int(cells[i].x // grid_px))
        bins[key] = bins.get(key, 0) + 1
        cell_bin[i] = key
    threshold = float(np.percentile(list(bins.values()), 75)) if min_density is None \
        else float(min_density)
    occupied = {k for k, v in bins.items() if v >= threshold}

    components = []
    seen = set()
    for seed in sorted(occupied):
        if seed in seen:
            continue
        comp, stack = set(), [seed]
        while stack:
            node = stack.pop()
            if node in comp:
                continue
            comp.add(node)
            r, c = node
            for nb in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if nb in occupied and nb not in comp:
                    stack.append(nb)
        seen |= comp
        components.append(comp)
    main = max(components, key=lambda comp: (len(comp), [-x for x in min(comp)])) \
        if components else set()
    candidates = [i for i in tumor_idx if cell_bin[i] not in main]
    return TumorRegion(grid_px=grid_px, occupied=main,
                       boundary=_trace_boundary(main, grid_px),
                       candidate_indices=candidates, threshold=threshold)


def point_to_line_distance(p, a, b, mpp: float | None = None):
    """Perpendicular distance from p to the infinite line through a and b.

    Returns pixels; with ``mpp`` a ``(px, um)`` pair.
    """
    ax, ay = float(a[0]), float(a[1])
    bx, by = float(b[0]), float(b[1])
    px_, py_ = float(p[0]), float(p[1])
    dx, dy = bx - ax, by - ay
    length = float(np.hypot(dx, dy))
    if length == 0.0:
        raise ValueError("degenerate line: a == b")
    dist = abs(dx * (py_ - ay) - dy * (px_ - ax)) / length
    if mpp is None:
        return dist
    return dist, dist * mpp
