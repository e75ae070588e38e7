"""Face normals and occluding-contour (silhouette) extraction on a transformed shape.

The camera looks down the -z axis, so a face with positive normal z faces it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from defa.model import MeshTopology

logger = logging.getLogger(__name__)

# |normal z| below this counts as sign 0 and never creates a boundary.
FLAT_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class SilhouetteSet:
    vertex_indices: np.ndarray
    boundary_edges: np.ndarray
    n_open_edges: int = 0

    def __len__(self) -> int:
        return len(self.vertex_indices)


def face_normals(A: np.ndarray, topology: MeshTopology) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized per-face normals ``(F, 3)`` and the indices of zero-area faces.

    Zero-area faces get a zero normal so they drop out of every sign test.
    """
    tri = topology.triangles
    v0 = A[:, tri[:, 0]].T
    e1 = A[:, tri[:, 1]].T - v0
    e2 = A[:, tri[:, 2]].T - v0
    normals = np.cross(e1, e2)
    size = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    flat = np.linalg.norm(normals, axis=1) <= 1e-14 * size
    flagged = np.flatnonzero(flat)
    if len(flagged):
        normals[flagged] = 0.0
    return normals, flagged


def normal_z_signs(A: np.ndarray, topology: MeshTopology) -> np.ndarray:
    nz = face_normals(A, topology)[0][:, 2]
    return np.where(np.abs(nz) < FLAT_EPS, 0, np.sign(nz)).astype(np.int8)


def silhouette_vertices(
    A: np.ndarray, topology: MeshTopology, candidates: np.ndarray | None = None
) -> SilhouetteSet:
    """Vertices on edges whose two faces point strictly opposite ways in z.

    Args:
        A: transformed shape ``(3, Q)``.
        topology: mesh triangles and edge adjacency.
        candidates: optional vertex indices (e.g. a ``contour_mask`` markup); the
            result is intersected with them.
    """
    signs = normal_z_signs(A, topology)
    faces = topology.edge_faces
    open_edges = faces[:, 1] < 0
    n_open = int(open_edges.sum())
    if n_open:
        logger.debug("silhouette: skipped %d open edges", n_open)
    closed = ~open_edges
    boundary = np.zeros(len(faces), dtype=bool)
    boundary[closed] = (
        signs[faces[closed, 0]].astype(np.int16) * signs[faces[closed, 1]] < 0
    )
    edges = topology.edges[boundary]
    verts = np.unique(edges)
    if candidates is not None:
        verts = np.intersect1d(verts, np.asarray(candidates, dtype=np.int64))
    return SilhouetteSet(verts.astype(np.int64), edges, n_open)


def vertex_normals(A: np.ndarray, topology: MeshTopology) -> np.ndarray:
    """Sum of incident face normals per vertex, ``(3, Q)`` (area weighted, unnormalized)."""
    normals, _ = face_normals(A, topology)
    out = np.zeros((A.shape[1], 3))
    for k in range(3):
        np.add.at(out, topology.triangles[:, k], normals)
    return out.T


def front_facing_vertices(A: np.ndarray, topology: MeshTopology) -> np.ndarray:
    """Boolean ``(Q,)`` mask of vertices whose averaged normal points at the camera.

    Stand-in for real occlusion testing; exact for convex shapes only.
    """
    return vertex_normals(A, topology)[2] > 0
