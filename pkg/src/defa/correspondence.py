"""Exact nearest-neighbour matching in the image plane and edge-band filtering.

Nearest-target search uses a uniform grid over the target bounding box with ring
expansion. A query stops expanding once its best squared distance is strictly
below the squared distance to the nearest unscanned cell, so results (indices,
distances and smallest-index tie-breaks) are identical to a full scan.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from defa.errors import NoCandidatesError
from defa.mesh import front_facing_vertices
from defa.model import MeshTopology

logger = logging.getLogger(__name__)

# Queries this many rings outside the grid are scanned exhaustively instead.
_FAR_RINGS = 2


class BandUndefinedWarning(UserWarning):
    """Fewer than two contour landmarks: the band is undefined and nothing is filtered."""


@dataclass(frozen=True, eq=False)
class MatchSet:
    """One match per query: ``target_index[i]`` is nearest to query ``i``."""

    target_index: np.ndarray
    sq_distance: np.ndarray

    def __len__(self) -> int:
        return len(self.target_index)

    @property
    def pairs(self) -> list[tuple[int, int, float]]:
        return [
            (i, int(t), float(d))
            for i, (t, d) in enumerate(zip(self.target_index, self.sq_distance))
        ]


@dataclass(frozen=True, eq=False)
class KeypointPair:
    """Matched keypoints: column ``k`` of ``points_i`` and ``points_j`` is one physical point."""

    points_i: np.ndarray
    points_j: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.points_i, dtype=np.float64).reshape(2, -1)
        pj = np.asarray(self.points_j, dtype=np.float64).reshape(2, -1)
        if pi.shape != pj.shape:
            raise ValueError(f"keypoint sets differ in size: {pi.shape} vs {pj.shape}")
        object.__setattr__(self, "points_i", pi)
        object.__setattr__(self, "points_j", pj)

    def __len__(self) -> int:
        return self.points_i.shape[1]


def _as_points(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.size == 0:
        return P.reshape(2, 0)
    if P.ndim != 2 or P.shape[0] != 2:
        raise ValueError(f"expected a (2, N) point array, got {P.shape}")
    return P


def _sq_dist(qx, qy, tx, ty):
    dx = qx - tx
    dy = qy - ty
    return dx * dx + dy * dy


class GridIndex:
    """Uniform-grid bucket index over a fixed 2D target set."""

    def __init__(self, targets: np.ndarray, cell_size: float | None = None):
        targets = _as_points(targets)
        m = targets.shape[1]
        if m == 0:
            raise NoCandidatesError("target set is empty")
        self.targets = targets
        self.x0, self.y0 = targets.min(axis=1)
        w, h = targets.max(axis=1) - (self.x0, self.y0)
        if cell_size is None:
            # About one target per cell, at most ~3m cells, and never so small
            # relative to the coordinates that cell indices lose meaning.
            floor = 1e-12 * max(1.0, float(np.abs(targets).max()))
            cell_size = max(float(np.sqrt(w * h / m)), max(w, h) / m, floor)
        if not (math.isfinite(cell_size) and cell_size > 0):
            raise ValueError(f"cell_size must be finite and positive, got {cell_size}")
        self.cell = float(cell_size)
        self.nx = int(np.floor(w / self.cell)) + 1
        self.ny = int(np.floor(h / self.cell)) + 1

        cx, cy = self._cell_of(targets[0], targets[1])
        cell_id = cy * self.nx + cx
        self.order = np.argsort(cell_id, kind="stable")
        counts = np.bincount(cell_id, minlength=self.nx * self.ny)
        self.cell_start = np.concatenate([[0], np.cumsum(counts)])

    def _cell_of(self, x, y):
        cx = np.floor((x - self.x0) / self.cell).astype(np.int64)
        cy = np.floor((y - self.y0) / self.cell).astype(np.int64)
        return np.clip(cx, 0, self.nx - 1), np.clip(cy, 0, self.ny - 1)

    def query(self, queries: np.ndarray) -> MatchSet:
        Qp = _as_points(queries)
        n = Qp.shape[1]
        best_t = np.full(n, -1, dtype=np.int64)
        best_d = np.full(n, np.inf)
        if n == 0:
            return MatchSet(best_t, best_d)
        qx, qy = Qp
        tx, ty = self.targets

        # Unclipped cell coordinates; queries may lie outside the grid.
        # Clamped before the cast; anything that far out takes the brute-force path.
        lim = float(2**40)
        with np.errstate(over="ignore"):
            qcx = np.clip(np.floor((qx - self.x0) / self.cell), -lim, lim).astype(np.int64)
            qcy = np.clip(np.floor((qy - self.y0) / self.cell), -lim, lim).astype(np.int64)
        outside = np.maximum.reduce(
            [np.zeros(n, np.int64), -qcx, qcx - (self.nx - 1), -qcy, qcy - (self.ny - 1)]
        )

        far = np.flatnonzero(outside > _FAR_RINGS)
        for chunk in np.array_split(far, max(1, len(far) // 256)):
            if len(chunk):
                d = _sq_dist(qx[chunk, None], qy[chunk, None], tx[None, :], ty[None, :])
                k = np.argmin(d, axis=1)
                best_t[chunk] = k
                best_d[chunk] = d[np.arange(len(chunk)), k]

        active = np.flatnonzero(outside <= _FAR_RINGS)
        # Guard against rounding in the cell-boundary arithmetic.
        slack = 1e-9 * (self.cell + np.abs(self.x0) + np.abs(self.y0) + self.cell * max(self.nx, self.ny))
        r = 0
        while len(active):
            self._scan_ring(active, r, qcx, qcy, qx, qy, best_t, best_d)
            a_cx, a_cy = qcx[active], qcy[active]
            covered = (
                (a_cx - r <= 0) & (a_cx + r >= self.nx - 1) & (a_cy - r <= 0) & (a_cy + r >= self.ny - 1)
            )
            gap = np.minimum.reduce(
                [
                    qx[active] - (self.x0 + (a_cx - r) * self.cell),
                    self.x0 + (a_cx + r + 1) * self.cell - qx[active],
                    qy[active] - (self.y0 + (a_cy - r) * self.cell),
                    self.y0 + (a_cy + r + 1) * self.cell - qy[active],
                ]
            ) - slack
            settled = (gap > 0) & (best_d[active] < gap * gap)
            active = active[~(covered | settled)]
            r += 1
        return MatchSet(best_t, best_d)

    def _scan_ring(self, active, r, qcx, qcy, qx, qy, best_t, best_d):
        a_cx, a_cy = qcx[active], qcy[active]
        dys = np.arange(-r, r + 1)
        rows = a_cy[:, None] + dys[None, :]
        full = np.abs(dys) == r
        # Each ring row is either one full x-range or its two end cells.
        lo = np.broadcast_to(a_cx[:, None] - r, rows.shape)
        hi = np.where(full[None, :], a_cx[:, None] + r, a_cx[:, None] - r)
        lo2 = np.where(full[None, :], 1, a_cx[:, None] + r)
        hi2 = np.where(full[None, :], 0, a_cx[:, None] + r)
        q_ids = np.broadcast_to(active[:, None], rows.shape)
        seg_q = np.concatenate([q_ids.ravel(), q_ids.ravel()])
        seg_y = np.concatenate([rows.ravel(), rows.ravel()])
        seg_lo = np.concatenate([lo.ravel(), lo2.ravel()])
        seg_hi = np.concatenate([hi.ravel(), hi2.ravel()])

        seg_lo = np.maximum(seg_lo, 0)
        seg_hi = np.minimum(seg_hi, self.nx - 1)
        keep = (seg_y >= 0) & (seg_y < self.ny) & (seg_lo <= seg_hi)
        seg_q, seg_y, seg_lo, seg_hi = seg_q[keep], seg_y[keep], seg_lo[keep], seg_hi[keep]
        start = self.cell_start[seg_y * self.nx + seg_lo]
        stop = self.cell_start[seg_y * self.nx + seg_hi + 1]
        counts = stop - start
        total = int(counts.sum())
        if total == 0:
            return
        pq = np.repeat(seg_q, counts)
        offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        pt = self.order[np.repeat(start, counts) + offs]
        pd = _sq_dist(qx[pq], qy[pq], self.targets[0, pt], self.targets[1, pt])

        srt = np.lexsort((pt, pd, pq))
        pq, pt, pd = pq[srt], pt[srt], pd[srt]
        first = np.concatenate([[True], pq[1:] != pq[:-1]])
        pq, pt, pd = pq[first], pt[first], pd[first]
        better = (pd < best_d[pq]) | ((pd == best_d[pq]) & (pt < best_t[pq]))
        best_t[pq[better]] = pt[better]
        best_d[pq[better]] = pd[better]


def closest_point_match(queries, targets) -> MatchSet:
    """Nearest target (squared Euclidean) for every query; ties go to the smaller index."""
    return GridIndex(targets).query(queries)


def sift_vertex_lookup(
    keypoints,
    A: np.ndarray,
    visible_only: bool = False,
    topology: MeshTopology | None = None,
) -> np.ndarray:
    """Vertex whose projection lies nearest each keypoint.

    With ``visible_only`` the search is restricted to front-facing vertices, which
    needs ``topology``.
    """
    if A.shape[1] == 0:
        raise NoCandidatesError("shape has no vertices")
    projected = A[:2]
    if not visible_only:
        return closest_point_match(keypoints, projected).target_index
    if topology is None:
        raise ValueError("visible_only lookup needs the mesh topology")
    visible = np.flatnonzero(front_facing_vertices(A, topology))
    if len(visible) == 0:
        raise NoCandidatesError("no front-facing vertices")
    return visible[closest_point_match(keypoints, projected[:, visible]).target_index]


def point_polyline_sq_distance(points: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    """Squared distance from each point ``(2, N)`` to an open polyline ``(2, K)``, K >= 2."""
    a = polyline[:, :-1].T[:, :, None]  # (S, 2, 1)
    ab = (polyline[:, 1:] - polyline[:, :-1]).T[:, :, None]
    ap = points[None, :, :] - a  # (S, 2, N)
    denom = (ab * ab).sum(axis=1)  # (S, 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(denom > 0, (ap * ab).sum(axis=1) / denom, 0.0)
    t = np.clip(t, 0.0, 1.0)
    diff = ap - t[:, None, :] * ab
    d2 = diff[:, 0, :] * diff[:, 0, :] + diff[:, 1, :] * diff[:, 1, :]
    return d2.min(axis=0)


def band_filter_edges(edge_points, contour_landmarks, tau: float) -> np.ndarray:
    """Keep edge points within ``tau`` pixels of the polyline through the contour landmarks.

    Input order is preserved. With fewer than two landmarks the band is undefined:
    the input comes back unchanged and a :class:`BandUndefinedWarning` is issued.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    pts = _as_points(edge_points)
    lms = _as_points(contour_landmarks)
    if lms.shape[1] < 2:
        warnings.warn("band undefined with fewer than 2 contour landmarks", BandUndefinedWarning)
        return pts
    if pts.shape[1] == 0:
        return pts
    return pts[:, point_polyline_sq_distance(pts, lms) <= tau * tau]


def default_band_tau(bbox) -> float:
    """10 px at a 256-px face box, scaled with sqrt(w * h)."""
    _, _, w, h = bbox
    return 10.0 * float(np.sqrt(w * h)) / 256.0
