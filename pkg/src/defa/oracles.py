"""Brute-force reference implementations used to check the accelerated code paths.

Each function scans every candidate with no indexing structure. Distances use the
same floating-point expression as the fast paths so results compare bit-exactly.
"""

from __future__ import annotations

import numpy as np

from defa.errors import NoCandidatesError


def brute_closest_point(queries: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full O(n*m) scan; ``argmin`` returns the first (smallest) index on ties."""
    if targets.shape[1] == 0:
        raise NoCandidatesError("target set is empty")
    n = queries.shape[1]
    idx = np.zeros(n, dtype=np.int64)
    d2 = np.zeros(n)
    for start in range(0, n, 512):
        q = queries[:, start : start + 512]
        dx = q[0][:, None] - targets[0][None, :]
        dy = q[1][:, None] - targets[1][None, :]
        d = dx * dx + dy * dy
        k = np.argmin(d, axis=1)
        idx[start : start + 512] = k
        d2[start : start + 512] = d[np.arange(len(k)), k]
    return idx, d2


def brute_vertex_lookup(keypoints: np.ndarray, A: np.ndarray, visible: np.ndarray | None = None) -> np.ndarray:
    """Nearest projected vertex per keypoint by scanning every vertex.

    ``visible`` is an optional boolean mask; masked-out vertices are never chosen.
    """
    out = np.zeros(keypoints.shape[1], dtype=np.int64)
    for i in range(keypoints.shape[1]):
        best, best_d = -1, np.inf
        for k in range(A.shape[1]):
            if visible is not None and not visible[k]:
                continue
            dx = keypoints[0, i] - A[0, k]
            dy = keypoints[1, i] - A[1, k]
            d = dx * dx + dy * dy
            if d < best_d:
                best, best_d = k, d
        out[i] = best
    return out


def brute_band_filter(points: np.ndarray, polyline: np.ndarray, tau: float) -> np.ndarray:
    """Per-segment loop over the polyline; returns the kept points."""
    best = np.full(points.shape[1], np.inf)
    for s in range(polyline.shape[1] - 1):
        a = polyline[:, s]
        b = polyline[:, s + 1]
        ab = b - a
        denom = ab[0] * ab[0] + ab[1] * ab[1]
        for i in range(points.shape[1]):
            apx = points[0, i] - a[0]
            apy = points[1, i] - a[1]
            t = (apx * ab[0] + apy * ab[1]) / denom if denom > 0 else 0.0
            t = min(1.0, max(0.0, t))
            ex = apx - t * ab[0]
            ey = apy - t * ab[1]
            d = ex * ex + ey * ey
            if d < best[i]:
                best[i] = d
    return points[:, best <= tau * tau]


def brute_silhouette(A: np.ndarray, triangles: np.ndarray, flat_eps: float = 1e-12) -> np.ndarray:
    """Occluding-contour vertices from a direct edge-by-edge scan.

    Builds its own edge map from the triangle list, computes each face's normal z
    as a scalar 2D cross product, and marks an edge when its two faces have
    strictly opposite signs.
    """
    nz_sign = []
    for a, b, c in triangles:
        e1x, e1y = A[0, b] - A[0, a], A[1, b] - A[1, a]
        e2x, e2y = A[0, c] - A[0, a], A[1, c] - A[1, a]
        nz = e1x * e2y - e1y * e2x
        nz_sign.append(0 if abs(nz) < flat_eps else (1 if nz > 0 else -1))

    edge_faces: dict[tuple[int, int], list[int]] = {}
    for f, (a, b, c) in enumerate(triangles):
        for u, v in ((a, b), (b, c), (c, a)):
            edge_faces.setdefault((min(u, v), max(u, v)), []).append(f)

    verts = set()
    for (u, v), faces in edge_faces.items():
        if len(faces) == 2 and nz_sign[faces[0]] * nz_sign[faces[1]] < 0:
            verts.add(int(u))
            verts.add(int(v))
    return np.array(sorted(verts), dtype=np.int64)
