"""Dense morphable shape model: storage, validation, file I/O and a synthetic generator.

Shapes are ``(3, Q)`` float64 arrays (rows x, y, z). Bases are stored stacked as
``(N, 3, Q)`` so that a coefficient vector contracts against the leading axis.
"""

from __future__ import annotations

import base64
import gzip
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from defa._atomic import atomic_write_bytes
from defa.errors import DimensionError, ParameterError, ValidationError

logger = logging.getLogger(__name__)

# Face-like proportions applied to the unit icosphere (x narrower than y, shallow z).
FACE_PROPORTIONS = np.array([0.78, 1.0, 0.86])

# 0-based outer eye corners in the 68-point convention (37 and 46 when counted from 1).
EYE_CORNERS_68 = (36, 45)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MeshTopology:
    """Triangle list plus the derived edge-to-face adjacency.

    ``edges`` is ``(E, 2)`` with ``edges[:, 0] < edges[:, 1]``; ``edge_faces`` is
    ``(E, 2)`` holding the one or two bordering faces, ``-1`` marking an open edge.
    """

    triangles: np.ndarray
    edges: np.ndarray = field(init=False, repr=False)
    edge_faces: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        tri = np.asarray(self.triangles, dtype=np.int64)
        if tri.size == 0:
            tri = tri.reshape(0, 3)
        if tri.ndim != 2 or tri.shape[1] != 3:
            raise DimensionError(f"expected (F, 3) triangles, got {tri.shape}", "triangles")
        degenerate = (tri[:, 0] == tri[:, 1]) | (tri[:, 1] == tri[:, 2]) | (tri[:, 0] == tri[:, 2])
        if degenerate.any():
            raise ValidationError(
                f"degenerate triangle at row {int(np.flatnonzero(degenerate)[0])}", "triangles"
            )
        edges, edge_faces = _edge_adjacency(tri)
        object.__setattr__(self, "triangles", _readonly(tri))
        object.__setattr__(self, "edges", _readonly(edges))
        object.__setattr__(self, "edge_faces", _readonly(edge_faces))

    @property
    def n_faces(self) -> int:
        return len(self.triangles)

    @property
    def edge_adjacency(self) -> dict[tuple[int, int], tuple[int, int]]:
        """Edge -> (face, face) map; the second face is -1 on an open edge."""
        return {
            (int(a), int(b)): (int(f0), int(f1))
            for (a, b), (f0, f1) in zip(self.edges, self.edge_faces)
        }

    def is_closed(self) -> bool:
        return bool(len(self.edges)) and bool((self.edge_faces[:, 1] >= 0).all())


def _edge_adjacency(tri: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n_faces = len(tri)
    if n_faces == 0:
        return np.zeros((0, 2), np.int64), np.zeros((0, 2), np.int64)
    directed = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    face_of = np.tile(np.arange(n_faces), 3)

    # The same directed edge twice means two faces disagree on winding.
    _, dcount = np.unique(directed, axis=0, return_counts=True)
    if (dcount > 1).any():
        raise ValidationError("inconsistent winding: a directed edge is shared", "triangles")

    undirected = np.sort(directed, axis=1)
    edges, inverse, counts = np.unique(undirected, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    if (counts > 2).any():
        bad = edges[np.flatnonzero(counts > 2)[0]]
        raise ValidationError(f"edge {tuple(int(v) for v in bad)} borders more than 2 faces", "triangles")

    order = np.argsort(inverse, kind="stable")
    edge_faces = np.full((len(edges), 2), -1, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    sorted_faces = face_of[order]
    edge_faces[:, 0] = sorted_faces[starts]
    two = counts == 2
    edge_faces[two, 1] = sorted_faces[starts[two] + 1]
    return edges.astype(np.int64), edge_faces


@dataclass(frozen=True, eq=False)
class LandmarkMarkup:
    name: str
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "indices", _readonly(idx))

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class ShapeParams:
    """Identity and expression coefficients."""

    p_id: np.ndarray
    p_exp: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p_id", np.asarray(self.p_id, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "p_exp", np.asarray(self.p_exp, dtype=np.float64).reshape(-1))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.p_id, self.p_exp])

    @classmethod
    def from_vector(cls, vec: Sequence[float], n_id: int) -> ShapeParams:
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:n_id], vec[n_id:])

    @classmethod
    def zeros(cls, model: MorphableModel) -> ShapeParams:
        return cls(np.zeros(model.n_id), np.zeros(model.n_exp))


@dataclass(frozen=True, eq=False)
class MorphableModel:
    """Mean shape, identity/expression bases, topology and named landmark markups.

    All invariants are checked on construction and the arrays are frozen, so a
    model can be shared freely between threads.
    """

    mean_shape: np.ndarray
    id_bases: np.ndarray
    exp_bases: np.ndarray
    topology: MeshTopology
    markups: Mapping[str, LandmarkMarkup] = field(default_factory=dict)

    def __post_init__(self):
        mean = np.asarray(self.mean_shape, dtype=np.float64)
        if mean.ndim != 2 or mean.shape[0] != 3:
            raise DimensionError(f"mean shape must be (3, Q), got {mean.shape}", "mean")
        q = mean.shape[1]
        if q < 3:
            raise ValidationError(f"Q must be >= 3, got {q}", "Q")
        if not np.isfinite(mean).all():
            raise ValidationError("non-finite entry", "mean")
        id_b = _as_bases(self.id_bases, q, "id_bases")
        exp_b = _as_bases(self.exp_bases, q, "exp_bases")

        tri = self.topology.triangles
        if tri.size and (tri.min() < 0 or tri.max() >= q):
            raise ValidationError(f"vertex index out of range [0, {q})", "triangles")

        markups = {}
        for name, mk in dict(self.markups).items():
            if not isinstance(mk, LandmarkMarkup):
                mk = LandmarkMarkup(name, mk)
            idx = mk.indices
            path = f"markups.{name}"
            if len(np.unique(idx)) != len(idx):
                raise ValidationError("duplicate vertex index", path)
            if idx.size and (idx.min() < 0 or idx.max() >= q):
                raise ValidationError(f"vertex index out of range [0, {q})", path)
            markups[name] = mk

        object.__setattr__(self, "mean_shape", _readonly(mean))
        # One contiguous block; the identity/expression fields are views into it.
        stacked = _readonly(np.concatenate([id_b, exp_b], axis=0))
        object.__setattr__(self, "_stacked", stacked)
        object.__setattr__(self, "id_bases", stacked[: len(id_b)])
        object.__setattr__(self, "exp_bases", stacked[len(id_b) :])
        object.__setattr__(self, "markups", markups)

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[1]

    Q = n_vertices

    @property
    def n_id(self) -> int:
        return len(self.id_bases)

    @property
    def n_exp(self) -> int:
        return len(self.exp_bases)

    @property
    def n_params(self) -> int:
        return self.n_id + self.n_exp

    @property
    def bases(self) -> np.ndarray:
        """All bases stacked ``(N_id + N_exp, 3, Q)``, identity first."""
        return self._stacked

    def markup(self, name: str) -> LandmarkMarkup:
        try:
            return self.markups[name]
        except KeyError:
            raise ValidationError(
                f"unknown markup {name!r}; available: {sorted(self.markups)}", "markups"
            ) from None


def _as_bases(bases: Any, q: int, path: str) -> np.ndarray:
    if isinstance(bases, np.ndarray) and bases.ndim == 3:
        arr = bases.astype(np.float64, copy=False)
        if arr.shape[1:] != (3, q):
            raise DimensionError(f"bases must be (N, 3, {q}), got {arr.shape}", path)
    else:
        items = list(bases)
        arr = np.zeros((len(items), 3, q))
        for i, b in enumerate(items):
            b = np.asarray(b, dtype=np.float64)
            if b.shape != (3, q):
                raise DimensionError(f"expected (3, {q}), got {b.shape}", f"{path}[{i}]")
            arr[i] = b
    bad = ~np.isfinite(arr).reshape(len(arr), -1).all(axis=1)
    if bad.any():
        raise ValidationError("non-finite entry", f"{path}[{int(np.flatnonzero(bad)[0])}]")
    return arr


def _coerce_params(model: MorphableModel, p: ShapeParams | Sequence[float]) -> np.ndarray:
    if isinstance(p, ShapeParams):
        if len(p.p_id) != model.n_id or len(p.p_exp) != model.n_exp:
            raise DimensionError(
                f"got ({len(p.p_id)}, {len(p.p_exp)}) coefficients for a model with "
                f"({model.n_id}, {model.n_exp}) bases",
                "p",
            )
        return p.vector
    vec = np.asarray(p, dtype=np.float64).reshape(-1)
    if len(vec) != model.n_params:
        raise DimensionError(f"expected {model.n_params} coefficients, got {len(vec)}", "p")
    return vec


def assemble_shape(model: MorphableModel, p: ShapeParams | Sequence[float]) -> np.ndarray:
    """Mean shape plus the coefficient-weighted identity and expression bases.

    ``p`` is either a :class:`ShapeParams` or a flat vector with identity
    coefficients first. Returns a fresh ``(3, Q)`` array.
    """
    vec = _coerce_params(model, p)
    shape = model.mean_shape.copy()
    if len(vec):
        shape += np.tensordot(vec, model.bases, axes=1)
    return shape


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def _encode_block(a: np.ndarray, binary: bool) -> Any:
    flat = np.ascontiguousarray(a, dtype="<f8").reshape(-1)
    if binary:
        return base64.b64encode(flat.tobytes()).decode("ascii")
    return flat.tolist()


def _decode_block(value: Any, length: int, path: str) -> np.ndarray:
    if isinstance(value, str):
        try:
            raw = base64.b64decode(value, validate=True)
        except ValueError as exc:
            raise ValidationError(f"bad base64 block: {exc}", path) from None
        if len(raw) % 8:
            raise DimensionError("base64 block is not a whole number of float64 values", path)
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    else:
        try:
            arr = np.asarray(value, dtype=np.float64).reshape(-1)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"not a float array: {exc}", path) from None
    if len(arr) != length:
        raise DimensionError(f"expected {length} values (3Q), got {len(arr)}", path)
    return arr


def model_to_dict(model: MorphableModel, binary: bool = False) -> dict[str, Any]:
    return {
        "Q": model.n_vertices,
        "n_id": model.n_id,
        "n_exp": model.n_exp,
        "mean": _encode_block(model.mean_shape, binary),
        "id_bases": [_encode_block(b, binary) for b in model.id_bases],
        "exp_bases": [_encode_block(b, binary) for b in model.exp_bases],
        "triangles": model.topology.triangles.tolist(),
        "markups": {name: mk.indices.tolist() for name, mk in model.markups.items()},
    }


def model_from_dict(doc: Mapping[str, Any]) -> MorphableModel:
    for key in ("Q", "n_id", "n_exp", "mean", "id_bases", "exp_bases", "triangles"):
        if key not in doc:
            raise ValidationError("missing field", key)
    q, n_id, n_exp = doc["Q"], doc["n_id"], doc["n_exp"]
    for key, val in (("Q", q), ("n_id", n_id), ("n_exp", n_exp)):
        if not isinstance(val, int) or isinstance(val, bool) or val < 0:
            raise ValidationError(f"expected a nonnegative integer, got {val!r}", key)
    if q < 3:
        raise ValidationError(f"Q must be >= 3, got {q}", "Q")

    mean = _decode_block(doc["mean"], 3 * q, "mean").reshape(3, q)
    blocks = {}
    for key, count in (("id_bases", n_id), ("exp_bases", n_exp)):
        items = doc[key]
        if not isinstance(items, list) or len(items) != count:
            got = len(items) if isinstance(items, list) else type(items).__name__
            raise DimensionError(f"header declares {count} bases, file has {got}", key)
        arr = np.zeros((count, 3, q))
        for i, item in enumerate(items):
            arr[i] = _decode_block(item, 3 * q, f"{key}[{i}]").reshape(3, q)
        blocks[key] = arr

    try:
        topology = MeshTopology(np.asarray(doc["triangles"], dtype=np.int64))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed triangle list: {exc}", "triangles") from None
    raw_markups = doc.get("markups", {})
    if not isinstance(raw_markups, Mapping):
        raise ValidationError("expected an object of name -> indices", "markups")
    markups = {}
    for name, idx in raw_markups.items():
        arr = np.asarray(idx)
        if arr.size and not np.issubdtype(arr.dtype, np.integer):
            raise ValidationError("indices must be integers", f"markups.{name}")
        markups[name] = LandmarkMarkup(name, arr.astype(np.int64))
    return MorphableModel(mean, blocks["id_bases"], blocks["exp_bases"], topology, markups)


def _open_text(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, encoding="utf-8")


def save_model(model: MorphableModel, path: str | Path, binary: bool = False) -> None:
    """Write ``model`` as JSON; ``binary`` stores float blocks as base64 little-endian float64.

    A ``.gz`` suffix gzips the output.
    """
    path = Path(path)
    data = json.dumps(model_to_dict(model, binary)).encode("utf-8")
    if path.suffix == ".gz":
        data = gzip.compress(data, mtime=0)
    atomic_write_bytes(path, data)


def load_model(path: str | Path) -> MorphableModel:
    path = Path(path)
    try:
        with _open_text(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"JSON parse error: {exc}", str(path)) from None
    if not isinstance(doc, dict):
        raise ValidationError("top level must be an object", str(path))
    model = model_from_dict(doc)
    logger.debug("loaded %s: Q=%d n_id=%d n_exp=%d", path, model.n_vertices, model.n_id, model.n_exp)
    return model


# ---------------------------------------------------------------------------
# Synthetic model
# ---------------------------------------------------------------------------


def icosphere_vertex_count(level: int) -> int:
    return 10 * 4**level + 2


def icosphere(level: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere subdivided ``level`` times, outward (counter-clockwise) winding.

    Returns vertices ``(3, Q)`` and triangles ``(F, 3)``.
    """
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts).T.copy(), np.array(faces, dtype=np.int64)


def _poly_features(unit: np.ndarray, max_degree: int = 4) -> np.ndarray:
    """Monomials of degree 2..max_degree evaluated at unit-sphere points, ``(K, Q)``."""
    x, y, z = unit
    feats = []
    for deg in range(2, max_degree + 1):
        for i in range(deg + 1):
            for j in range(deg - i + 1):
                feats.append(x**i * y**j * z ** (deg - i - j))
    return np.array(feats)


def _farthest_point_order(points: np.ndarray, start: int, count: int) -> list[int]:
    chosen = [start]
    dist = np.linalg.norm(points - points[:, [start]], axis=0)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[:, [nxt]], axis=0))
    return chosen


def _front_candidates(unit: np.ndarray, count: int) -> np.ndarray:
    for thresh in (0.3, 0.2, 0.1, 0.0):
        cand = np.flatnonzero(unit[2] > thresh)
        if len(cand) >= count:
            return cand
    return np.arange(unit.shape[1])


def _synth_markups(unit: np.ndarray) -> dict[str, LandmarkMarkup]:
    q = unit.shape[1]
    markups: dict[str, LandmarkMarkup] = {}
    if q < 68:
        logger.info("Q=%d too small for 68/21-point markups; none emitted", q)
        return markups

    cand = _front_candidates(unit, 68)
    # Jaw: the 17 lower-half candidates nearest the rim of the face region, left to right.
    lower = cand[unit[1, cand] < 0]
    if len(lower) < 17:
        lower = cand
    rim = lower[np.argsort(unit[2, lower], kind="stable")][:17]
    jaw = sorted(rim.tolist(), key=lambda v: (unit[0, v], v))

    taken = set(jaw)
    inner_pool = np.array([v for v in cand if v not in taken])
    if len(jaw) + len(inner_pool) < 68:
        inner_pool = np.array([v for v in range(q) if v not in taken])
    start = int(np.argmax(unit[2, inner_pool]))
    picked = inner_pool[_farthest_point_order(unit[:, inner_pool], start, 68 - len(jaw))]
    # Rows top to bottom, then left to right.
    picked = sorted(picked.tolist(), key=lambda v: (-round(unit[1, v], 6), unit[0, v], v))
    pts68 = [int(v) for v in jaw] + picked

    # Put the widest upper-half pair at the outer eye-corner slots.
    inner = pts68[17:]
    upper = [v for v in inner if unit[1, v] > 0] or inner
    left = min(upper, key=lambda v: (unit[0, v], v))
    right = max(upper, key=lambda v: (unit[0, v], -v))
    for slot, v in zip(EYE_CORNERS_68, (left, right)):
        k = pts68.index(v)
        pts68[k], pts68[slot] = pts68[slot], pts68[k]
    markups["pts68"] = LandmarkMarkup("pts68", pts68)

    arr68 = np.array(pts68)
    sub = _farthest_point_order(unit[:, arr68], int(np.argmax(unit[2, arr68])), 21)
    markups["pts21"] = LandmarkMarkup("pts21", arr68[sorted(sub)])
    return markups


def synth_model(seed: int, Q: int, n_id: int, n_exp: int) -> MorphableModel:
    """Deterministic face-like test model built on an icosphere.

    The mean is a unit icosphere with ``Q = 10 * 4**k + 2`` vertices, stretched to
    :data:`FACE_PROPORTIONS`; the face looks down +z. Bases are random smooth
    (polynomial) displacement fields, made orthogonal to every affine motion of the
    mean and then orthonormalized as flattened ``3Q`` vectors.
    """
    levels = {icosphere_vertex_count(k): k for k in range(8)}
    if Q not in levels:
        raise ParameterError(
            f"Q={Q} is not an icosphere vertex count; choose one of {sorted(levels)}"
        )
    n_total = n_id + n_exp
    if n_id < 0 or n_exp < 0:
        raise ParameterError("basis counts must be nonnegative")
    if n_total > 3 * Q - 12:
        raise ParameterError(f"at most {3 * Q - 12} bases fit a Q={Q} model, asked for {n_total}")

    unit, triangles = icosphere(levels[Q])
    mean = unit * FACE_PROPORTIONS[:, None]
    rng = np.random.default_rng(seed)

    bases = np.zeros((n_total, 3 * Q))
    if n_total:
        degree = 4
        feats = _poly_features(unit, degree)
        while 3 * len(feats) - 12 < n_total:
            degree += 2
            feats = _poly_features(unit, degree)
        coeffs = rng.standard_normal((n_total, 3, len(feats)))
        raw = np.einsum("nck,kq->ncq", coeffs, feats).reshape(n_total, 3 * Q)

        # Affine motions of the mean: 9 linear + 3 translation directions.
        affine = []
        for r in range(3):
            for src in (*mean, np.ones(Q)):
                v = np.zeros((3, Q))
                v[r] = src
                affine.append(v.reshape(-1))
        aff_q, _ = np.linalg.qr(np.array(affine).T)
        raw = raw - (raw @ aff_q) @ aff_q.T

        qmat, rmat = np.linalg.qr(raw.T)
        if np.min(np.abs(np.diag(rmat))) < 1e-8 * np.max(np.abs(np.diag(rmat))):
            raise ParameterError("random displacement fields are rank deficient; try another seed")
        # Fix QR sign ambiguity so the output does not depend on LAPACK conventions.
        bases = (qmat * np.sign(np.diag(rmat))).T
    bases = bases.reshape(n_total, 3, Q)

    return MorphableModel(
        mean_shape=mean,
        id_bases=bases[:n_id],
        exp_bases=bases[n_id:],
        topology=MeshTopology(triangles),
        markups=_synth_markups(unit),
    )
