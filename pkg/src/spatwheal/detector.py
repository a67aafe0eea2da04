"""Turn a probability map into wheals paired with the 12 prick locations.

Pipeline: threshold -> connected components -> rigid grid-search fit of the
prick layout onto region centroids -> greedy one-to-one matching.

Coordinates: pixel (row r, col c) covers [c, c+1] x [r, r+1]; centroids and
contours are (x, y) = (col, row) based.  Device-space millimetres have their
origin at the image centre with x right and y down.  A rigid transform
rotates layout points by ``theta_deg`` about that origin and then translates
by (tx, ty) mm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .synth import apply_transform, default_prick_layout_mm, mm_to_px, px_to_mm

MIN_CANDIDATE_AREA_PX = 4


class GridError(ValueError):
    pass


# ---------------------------------------------------------------------------
# threshold and label


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Foreground where ``prob >= threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return np.asarray(prob) >= threshold


@dataclass
class WhealRegion:
    pixels: np.ndarray          # (N, 2) int rows of (row, col), raster order

    @property
    def area_px(self) -> int:
        return len(self.pixels)

    def area_mm2(self, mm_per_pixel: float) -> float:
        return self.area_px * mm_per_pixel ** 2

    @property
    def centroid(self) -> tuple[float, float]:
        """(x, y) of the mean pixel centre."""
        r, c = self.pixels.mean(axis=0)
        return float(c + 0.5), float(r + 0.5)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(row_min, col_min, row_max, col_max), inclusive."""
        lo, hi = self.pixels.min(axis=0), self.pixels.max(axis=0)
        return int(lo[0]), int(lo[1]), int(hi[0]), int(hi[1])

    def mask(self, dims: tuple[int, int]) -> np.ndarray:
        m = np.zeros(dims, dtype=bool)
        m[self.pixels[:, 0], self.pixels[:, 1]] = True
        return m

    def contour(self, connectivity: int = 8) -> np.ndarray:
        return outer_contour(self.pixels, connectivity)

    def longest_diameter_px(self) -> float:
        pts = self.contour()
        d = pts[:, None, :] - pts[None, :, :]
        return float(np.sqrt((d ** 2).sum(-1)).max())


def _find(parent: list[int], i: int) -> int:
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        parent[i], i = root, parent[i]
    return root


def label(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Two-pass union-find labelling; labels 1..n in raster order of first pixel."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int64)
    parent = [0]
    offsets = [(-1, 0), (0, -1)] if connectivity == 4 else [(-1, -1), (-1, 0), (-1, 1), (0, -1)]
    lab = labels.tolist()
    fg = mask.tolist()
    for r in range(h):
        row, up = lab[r], lab[r - 1] if r else None
        frow = fg[r]
        for c in range(w):
            if not frow[c]:
                continue
            neigh = []
            for dr, dc in offsets:
                cc = c + dc
                if cc < 0 or cc >= w:
                    continue
                if dr == 0:
                    v = row[cc]
                elif up is not None:
                    v = up[cc]
                else:
                    continue
                if v:
                    neigh.append(v)
            if not neigh:
                parent.append(len(parent))
                row[c] = len(parent) - 1
                continue
            m = min(neigh)
            row[c] = m
            rm = _find(parent, m)
            for v in neigh:
                rv = _find(parent, v)
                if rv != rm:
                    lo, hi = min(rv, rm), max(rv, rm)
                    parent[hi] = lo
                    rm = lo
    # second pass: resolve to roots, renumber by first appearance
    remap = {}
    final = [0] * len(parent)
    for i in range(1, len(parent)):
        root = _find(parent, i)
        if root not in remap:
            remap[root] = len(remap) + 1
        final[i] = remap[root]
    labels = np.asarray(final, dtype=np.int64)[np.asarray(lab, dtype=np.int64)]
    return labels, len(remap)


def connected_components(mask: np.ndarray, connectivity: int = 8) -> list[WhealRegion]:
    """Regions of ``mask`` in decreasing area order (ties: raster order of first pixel)."""
    labels, n = label(mask, connectivity)
    if n == 0:
        return []
    coords = np.argwhere(labels > 0)
    ids = labels[coords[:, 0], coords[:, 1]]
    order = np.argsort(ids, kind="stable")
    coords, ids = coords[order], ids[order]
    splits = np.flatnonzero(np.diff(ids)) + 1
    regions = [WhealRegion(p) for p in np.split(coords, splits)]
    return sorted(regions, key=lambda reg: -reg.area_px)


def outer_contour(pixels: np.ndarray, connectivity: int = 8) -> np.ndarray:
    """Outer pixel-boundary polygon of a connected pixel set.

    Vertices are pixel corners (x, y).  The loop has positive shoelace area
    in raw (x, y) coordinates: counter-clockwise with the y axis pointing up,
    i.e. clockwise as displayed on screen.  At corners where two pixels touch
    only diagonally the walk keeps them together under 8-connectivity.
    """
    pix = {(int(r), int(c)) for r, c in pixels}
    out: dict[tuple[int, int], list[tuple[int, int]]] = {}

    def add(a, b):
        out.setdefault(a, []).append(b)

    for r, c in pix:
        if (r - 1, c) not in pix:
            add((c, r), (c + 1, r))
        if (r, c + 1) not in pix:
            add((c + 1, r), (c + 1, r + 1))
        if (r + 1, c) not in pix:
            add((c + 1, r + 1), (c, r + 1))
        if (r, c - 1) not in pix:
            add((c, r + 1), (c, r))
    sign = -1 if connectivity == 8 else 1
    loops = []
    while out:
        start = min(out)
        loop = [start]
        prev, cur = start, out[start].pop()
        if not out[start]:
            del out[start]
        while cur != start:
            loop.append(cur)
            nexts = out[cur]
            if len(nexts) == 1:
                nxt = nexts.pop()
            else:
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                pick = [n for n in nexts if np.sign(dx * (n[1] - cur[1]) - dy * (n[0] - cur[0])) == sign]
                nxt = pick[0] if pick else nexts[0]
                nexts.remove(nxt)
            if not nexts:
                del out[cur]
            prev, cur = cur, nxt
        loops.append(np.asarray(loop, dtype=np.float64))
    best = max(loops, key=_signed_area)
    return _drop_collinear(best)


def _signed_area(p: np.ndarray) -> float:
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _drop_collinear(p: np.ndarray) -> np.ndarray:
    prev, nxt = np.roll(p, 1, axis=0), np.roll(p, -1, axis=0)
    cross = (p[:, 0] - prev[:, 0]) * (nxt[:, 1] - p[:, 1]) - (p[:, 1] - prev[:, 1]) * (nxt[:, 0] - p[:, 0])
    return p[cross != 0]


# ---------------------------------------------------------------------------
# registration and matching


@dataclass(frozen=True)
class RigidTransform2D:
    tx: float = 0.0        # mm
    ty: float = 0.0        # mm
    theta: float = 0.0     # degrees

    def apply(self, points_mm: np.ndarray) -> np.ndarray:
        return apply_transform(points_mm, self.tx, self.ty, self.theta)

    def to_dict(self) -> dict[str, float]:
        return {"tx_mm": self.tx, "ty_mm": self.ty, "theta_deg": self.theta}


@dataclass(frozen=True)
class GridSpec:
    tx: tuple[float, float, float] = (-10.0, 10.0, 0.5)       # (lo, hi, step) mm
    ty: tuple[float, float, float] = (-10.0, 10.0, 0.5)
    theta: tuple[float, float, float] = (-5.0, 5.0, 0.5)      # degrees

    def __post_init__(self):
        for name in ("tx", "ty", "theta"):
            lo, hi, step = getattr(self, name)
            if step <= 0 or hi < lo:
                raise GridError(f"degenerate grid axis {name}: {(lo, hi, step)}")

    @staticmethod
    def axis(spec: tuple[float, float, float]) -> np.ndarray:
        lo, hi, step = spec
        n = int(np.floor((hi - lo) / step + 1e-9)) + 1
        return np.round(lo + step * np.arange(n), 9)

    @property
    def steps(self) -> tuple[float, float, float]:
        return self.tx[2], self.ty[2], self.theta[2]


@dataclass
class PrickLayout:
    points_mm: np.ndarray = field(default_factory=default_prick_layout_mm)

    def __post_init__(self):
        p = np.asarray(self.points_mm, dtype=np.float64)
        if p.shape != (12, 2):
            raise ValueError(f"prick layout needs 12 (x, y) points, got {p.shape}")
        if len({tuple(q) for q in p.tolist()}) != 12:
            raise ValueError("prick locations must be pairwise distinct")
        self.points_mm = p


def _centroids_mm(regions: Sequence[WhealRegion], dims, mm_per_pixel) -> np.ndarray:
    if not regions:
        return np.zeros((0, 2))
    return px_to_mm(np.array([r.centroid for r in regions]), dims, mm_per_pixel)


def transform_objective(centroids_mm: np.ndarray, layout: PrickLayout, t: RigidTransform2D, d_gate: float) -> float:
    """Sum over pricks of min(distance to nearest centroid, d_gate), in mm."""
    pts = t.apply(layout.points_mm)
    if len(centroids_mm) == 0:
        return 12 * d_gate
    d = np.linalg.norm(pts[:, None, :] - centroids_mm[None, :, :], axis=-1).min(axis=1)
    return float(np.minimum(d, d_gate).sum())


def fit_rigid_transform(regions: Sequence[WhealRegion], layout: PrickLayout, grid: GridSpec,
                        dims: tuple[int, int], mm_per_pixel: float, d_gate: float = 5.0,
                        min_area_px: int = MIN_CANDIDATE_AREA_PX) -> tuple[RigidTransform2D, float]:
    """Exhaustive grid search for the layout placement best explaining the centroids.

    Regions smaller than ``min_area_px`` are ignored.  Among grid points with
    the minimal objective the one with the smallest (|tx|, |ty|, |theta|) wins.
    """
    cands = [r for r in regions if r.area_px >= min_area_px]
    if not cands:
        return RigidTransform2D(), 12 * d_gate
    cen = _centroids_mm(cands, dims, mm_per_pixel)
    txs, tys, ths = GridSpec.axis(grid.tx), GridSpec.axis(grid.ty), GridSpec.axis(grid.theta)
    obj = np.empty((len(ths), len(txs), len(tys)))
    for i, th in enumerate(ths):
        base = apply_transform(layout.points_mm, 0.0, 0.0, th)           # (12, 2)
        # distance from each prick (shifted by tx, ty) to each centroid
        dx = base[:, 0][None, :, None] + txs[:, None, None] - cen[:, 0][None, None, :]   # (ntx, 12, K)
        dy = base[:, 1][None, :, None] + tys[:, None, None] - cen[:, 1][None, None, :]   # (nty, 12, K)
        d = np.sqrt(dx[:, None] ** 2 + dy[None, :] ** 2).min(axis=-1)                   # (ntx, nty, 12)
        obj[i] = np.minimum(d, d_gate).sum(axis=-1)
    best = obj.min()
    hits = np.argwhere(obj <= best + 1e-9)
    key = [(abs(txs[b]), abs(tys[c]), abs(ths[a]), txs[b], tys[c], ths[a]) for a, b, c in hits]
    a, b, c = hits[min(range(len(hits)), key=key.__getitem__)]
    return RigidTransform2D(float(txs[b]), float(tys[c]), float(ths[a])), float(obj[a, b, c])


@dataclass
class MatchResult:
    matches: list[int | None]               # prick index -> index into ``regions`` or None
    regions: list[WhealRegion]              # candidate regions considered for matching
    transform: RigidTransform2D
    objective: float
    distances: list[float | None]           # matched centroid distance (mm) per prick
    acceptance_order: list[int] = field(default_factory=list)   # pricks in greedy order

    def matched_region(self, prick: int) -> WhealRegion | None:
        j = self.matches[prick]
        return None if j is None else self.regions[j]

    @property
    def unmatched_regions(self) -> list[WhealRegion]:
        used = {j for j in self.matches if j is not None}
        return [r for j, r in enumerate(self.regions) if j not in used]


def greedy_match(regions: Sequence[WhealRegion], layout: PrickLayout, transform: RigidTransform2D,
                 dims: tuple[int, int], mm_per_pixel: float, d_gate: float = 5.0,
                 objective: float = float("nan")) -> MatchResult:
    """Repeatedly pair the globally closest free (prick, region) within ``d_gate`` mm."""
    regions = list(regions)
    matches: list[int | None] = [None] * 12
    dists: list[float | None] = [None] * 12
    accepted = []
    if regions:
        pts = transform.apply(layout.points_mm)
        cen = _centroids_mm(regions, dims, mm_per_pixel)
        d = np.linalg.norm(pts[:, None, :] - cen[None, :, :], axis=-1)
        pairs = sorted((d[i, j], i, j) for i in range(12) for j in range(len(regions)) if d[i, j] <= d_gate)
        used = set()
        for dist, i, j in pairs:
            if matches[i] is None and j not in used:
                matches[i] = j
                dists[i] = float(dist)
                used.add(j)
                accepted.append(i)
    return MatchResult(matches, regions, transform, objective, dists, accepted)


@dataclass(frozen=True)
class DetectConfig:
    threshold: float = 0.5
    connectivity: int = 8
    grid: GridSpec = GridSpec()
    d_gate_mm: float = 5.0
    min_area_px: int = MIN_CANDIDATE_AREA_PX


@dataclass
class Detection:
    mask: np.ndarray
    all_regions: list[WhealRegion]
    match: MatchResult
    dims: tuple[int, int]
    mm_per_pixel: float

    def wheal_mask(self, prick: int) -> np.ndarray | None:
        reg = self.match.matched_region(prick)
        return None if reg is None else reg.mask(self.dims)


def detect(prob: np.ndarray, mm_per_pixel: float, layout: PrickLayout | None = None,
           config: DetectConfig = DetectConfig()) -> Detection:
    """Threshold, label, register and match a probability map at its own resolution."""
    layout = layout or PrickLayout()
    dims = prob.shape
    mask = binarize(prob, config.threshold)
    regions = connected_components(mask, config.connectivity)
    cands = [r for r in regions if r.area_px >= config.min_area_px]
    t, obj = fit_rigid_transform(cands, layout, config.grid, dims, mm_per_pixel, config.d_gate_mm, 0)
    match = greedy_match(cands, layout, t, dims, mm_per_pixel, config.d_gate_mm, obj)
    return Detection(mask, regions, match, dims, mm_per_pixel)


def _region_json(reg: WhealRegion, s: float) -> dict[str, Any]:
    cx, cy = reg.centroid
    return {
        "centroid_px": [cx, cy],
        "area_px": reg.area_px,
        "area_mm2": reg.area_mm2(s),
        "longest_diameter_mm": reg.longest_diameter_px() * s,
        "bbox": list(reg.bbox),
        "contour": reg.contour().tolist(),
    }


def detection_to_dict(det: Detection, layout: PrickLayout | None = None) -> dict[str, Any]:
    layout = layout or PrickLayout()
    m = det.match
    pts_px = mm_to_px(m.transform.apply(layout.points_mm), det.dims, det.mm_per_pixel)
    pricks = []
    for i in range(12):
        entry: dict[str, Any] = {"prick": i, "location_px": pts_px[i].tolist(), "matched": m.matches[i] is not None}
        reg = m.matched_region(i)
        if reg is not None:
            entry.update(_region_json(reg, det.mm_per_pixel))
            entry["distance_mm"] = m.distances[i]
        pricks.append(entry)
    return {
        "transform": m.transform.to_dict(),
        "objective_mm": m.objective,
        "mm_per_pixel": det.mm_per_pixel,
        "dims": list(det.dims),
        "pricks": pricks,
        "unmatched_regions": [_region_json(r, det.mm_per_pixel) for r in m.unmatched_regions],
        "n_regions_total": len(det.all_regions),
        "contour_orientation": "positive shoelace area in (x right, y down) pixel coordinates",
    }


def detection_json(det: Detection, layout: PrickLayout | None = None) -> str:
    return json.dumps(detection_to_dict(det, layout), indent=1, sort_keys=True) + "\n"
