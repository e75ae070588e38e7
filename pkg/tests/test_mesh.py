from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from defa.camera import Pose, compose_m, transform
from defa.mesh import (
    face_normals,
    front_facing_vertices,
    normal_z_signs,
    silhouette_vertices,
    vertex_normals,
)
from defa.model import MeshTopology, icosphere, synth_model
from defa.oracles import brute_silhouette


def _posed(S, pose):
    return transform(compose_m(pose), S)


@pytest.fixture(scope="module")
def sphere162():
    v, t = icosphere(2)
    return v, MeshTopology(t)


def _tetrahedron():
    """Regular tetrahedron with outward winding; face k is opposite vertex k."""
    V = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float).T
    tris = []
    for k in range(4):
        a, b, c = [i for i in range(4) if i != k]
        n = np.cross(V[:, b] - V[:, a], V[:, c] - V[:, a])
        if n @ (V[:, a] + V[:, b] + V[:, c]) < 0:
            b, c = c, b
        tris.append((a, b, c))
    return V, MeshTopology(np.array(tris))


class TestFaceNormals:
    def test_right_hand_rule(self):
        A = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]], dtype=float)
        n, flat = face_normals(A, MeshTopology(np.array([[0, 1, 2]])))
        assert np.array_equal(n[0], [0, 0, 1]) and len(flat) == 0
        n, _ = face_normals(A, MeshTopology(np.array([[0, 2, 1]])))
        assert np.array_equal(n[0], [0, 0, -1])

    def test_sphere_front_faces_point_at_camera(self, sphere162):
        v, topo = sphere162
        n, _ = face_normals(v, topo)
        centroid_z = v[2, topo.triangles].mean(axis=1)
        assert np.all(n[centroid_z > 1e-12, 2] > 0)
        # Outward winding everywhere.
        centroids = v[:, topo.triangles].mean(axis=2)
        assert np.all(np.einsum("fk,kf->f", n, centroids) > 0)

    def test_zero_area_face_flagged(self):
        A = np.array([[0, 1, 2, 0], [0, 0, 0, 1], [0, 0, 0, 0]], dtype=float)
        topo = MeshTopology(np.array([[0, 1, 2], [1, 0, 3]]))
        n, flat = face_normals(A, topo)
        assert list(flat) == [0]
        assert np.array_equal(n[0], [0, 0, 0])
        assert normal_z_signs(A, topo)[0] == 0


class TestSilhouette:
    def test_single_triangle_is_empty(self):
        A = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]], dtype=float)
        sil = silhouette_vertices(A, MeshTopology(np.array([[0, 1, 2]])))
        assert len(sil) == 0 and sil.n_open_edges == 3

    def test_tetrahedron_two_front_two_back(self):
        V, topo = _tetrahedron()
        signs = normal_z_signs(V, topo)
        front = {k for k in range(4) if signs[k] > 0}
        assert len(front) == 2
        # Hand oracle: an edge is a boundary iff its two faces (those opposite the
        # two vertices not on the edge) differ in facing.
        expected = set()
        for a in range(4):
            for b in range(a + 1, 4):
                c, d = [k for k in range(4) if k not in (a, b)]
                if (c in front) != (d in front):
                    expected.add((a, b))
        assert len(expected) == 4
        sil = silhouette_vertices(V, topo)
        assert {tuple(e) for e in sil.boundary_edges.tolist()} == expected
        assert sil.vertex_indices.tolist() == [0, 1, 2, 3]

    def test_sphere_matches_brute_force_and_ring(self, sphere162):
        v, topo = sphere162
        sil = silhouette_vertices(v, topo)
        assert np.array_equal(sil.vertex_indices, brute_silhouette(v, topo.triangles))
        r = np.linalg.norm(v[:2, sil.vertex_indices], axis=0)
        assert len(r) > 0 and np.all(np.abs(r - 1.0) <= 0.02)

    @given(st.floats(-1.4, 1.4), st.floats(-1.4, 1.4), st.floats(-3, 3))
    def test_posed_sphere_matches_brute_force(self, sphere162, pitch, yaw, roll):
        v, topo = sphere162
        A = _posed(v, Pose(50.0, pitch, yaw, roll, 10, 20))
        sil = silhouette_vertices(A, topo)
        assert np.array_equal(sil.vertex_indices, brute_silhouette(A, topo.triangles))
        r = np.linalg.norm(A[:2, sil.vertex_indices] - [[10], [20]], axis=0) / 50.0
        assert np.all(np.abs(r - 1.0) <= 0.02)

    def test_rotation_continuity(self):
        v, t = icosphere(4)
        topo = MeshTopology(t)
        counts = [
            len(silhouette_vertices(_posed(v, Pose(pitch=0.13, yaw=math.radians(d))), topo))
            for d in range(-60, 61)
        ]
        for a, b in zip(counts, counts[1:]):
            assert abs(b - a) < 0.2 * a

    @given(st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
    def test_invariant_to_positive_scaling(self, small_model, c, seed):
        rng = np.random.default_rng(seed)
        A = _posed(small_model.mean_shape, Pose(1.0, *rng.uniform(-1, 1, 3)))
        a = silhouette_vertices(A, small_model.topology)
        b = silhouette_vertices(c * A, small_model.topology)
        assert np.array_equal(a.vertex_indices, b.vertex_indices)
        assert np.array_equal(a.boundary_edges, b.boundary_edges)

    def test_sorted_and_deterministic(self, face_model):
        A = _posed(face_model.mean_shape, Pose(80, 0.2, 0.7, 0.1, 128, 128))
        a = silhouette_vertices(A, face_model.topology).vertex_indices
        b = silhouette_vertices(A.copy(), face_model.topology).vertex_indices
        assert np.array_equal(a, b)
        assert np.all(np.diff(a) > 0)

    def test_candidates_restrict(self, face_model):
        A = _posed(face_model.mean_shape, Pose(80, 0.0, 0.5, 0.0, 0, 0))
        full = silhouette_vertices(A, face_model.topology).vertex_indices
        cand = full[::2]
        assert np.array_equal(silhouette_vertices(A, face_model.topology, cand).vertex_indices, cand)

    def test_flat_on_faces_excluded(self):
        # Two faces: one flat in z (normal in the image plane), one front facing.
        A = np.array([[0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=float)
        topo = MeshTopology(np.array([[0, 1, 2], [1, 0, 3]]))
        signs = normal_z_signs(A, topo)
        assert 0 in signs
        assert len(silhouette_vertices(A, topo)) == 0


class TestVisibility:
    def test_frontal_face_all_landmarks_visible(self, face_model):
        A = _posed(face_model.mean_shape, Pose(100, 0, 0, 0, 128, 128))
        vis = front_facing_vertices(A, face_model.topology)
        assert vis[face_model.markup("pts68").indices].all()

    def test_back_of_sphere_hidden(self, sphere162):
        v, topo = sphere162
        vis = front_facing_vertices(v, topo)
        assert np.all(vis[v[2] > 0.3]) and not np.any(vis[v[2] < -0.3])

    def test_vertex_normals_shape(self, small_model):
        n = vertex_normals(small_model.mean_shape, small_model.topology)
        assert n.shape == (3, small_model.n_vertices)
        # Closed convex-ish surface: normals point away from the center.
        assert np.all(np.einsum("kq,kq->q", n, small_model.mean_shape) > 0)


def test_generated_face_silhouette_matches_brute_force():
    model = synth_model(0, 642, 6, 3)
    rng = np.random.default_rng(5)
    for _ in range(5):
        p = rng.normal(0, 2, model.n_params)
        S = model.mean_shape + np.tensordot(p, model.bases, 1)
        A = _posed(S, Pose(90, *rng.uniform(-0.8, 0.8, 3), 128, 128))
        assert np.array_equal(
            silhouette_vertices(A, model.topology).vertex_indices, brute_silhouette(A, model.topology.triangles)
        )
