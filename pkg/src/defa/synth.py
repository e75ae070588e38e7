"""Synthetic scenes with known ground truth for end-to-end recovery tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from defa.camera import Pose, compose_m, transform
from defa.correspondence import KeypointPair
from defa.energy import Observations
from defa.errors import DegenerateCameraError, ParameterError
from defa.mesh import front_facing_vertices, silhouette_vertices
from defa.model import MorphableModel, assemble_shape

BBOX_PAD = 0.05


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    truth_m: np.ndarray
    truth_p: np.ndarray
    pose: Pose
    observations: Observations
    truth_landmarks: np.ndarray
    contour_vertex_ids: np.ndarray
    noise_sigma: float
    seed: int
    sift_pairs: KeypointPair | None = None
    sift_vertex_ids: np.ndarray | None = None


def tight_bbox(points: np.ndarray, pad: float = BBOX_PAD) -> tuple[float, float, float, float]:
    """Bounding box of ``(2, N)`` points grown by ``pad`` of its size on every side."""
    lo = points.min(axis=1)
    hi = points.max(axis=1)
    w, h = hi - lo
    return (float(lo[0] - pad * w), float(lo[1] - pad * h), float(w * (1 + 2 * pad)), float(h * (1 + 2 * pad)))


def random_shape_params(model: MorphableModel, rng: np.random.Generator, spread: float = 0.08) -> np.ndarray:
    """Coefficients giving per-vertex displacements of roughly ``spread`` model units.

    Synthetic bases are unit-norm over 3Q entries, hence the sqrt(Q) factor.
    """
    return rng.normal(0.0, spread * np.sqrt(model.n_vertices), model.n_params)


def _posed(model, pose, p):
    if pose.scale <= 0:
        raise DegenerateCameraError("pose scale must be positive")
    m = compose_m(pose)
    return m, transform(m, assemble_shape(model, p))


def generate_scene(
    model: MorphableModel,
    pose: Pose,
    p,
    noise_sigma: float = 0.0,
    seed: int = 0,
    markup: str = "pts68",
    contour_step: int = 3,
    rng: np.random.Generator | None = None,
) -> SyntheticScene:
    """Project a known face and emit its landmark and contour observations.

    Landmarks whose vertex faces away from the camera are masked invalid. Contour
    points are every ``contour_step``-th silhouette vertex of the true shape.
    Noise is i.i.d. Gaussian with ``noise_sigma`` pixels per coordinate.
    """
    p = np.asarray(p, dtype=np.float64)
    if not np.isfinite(p).all():
        raise ParameterError("shape coefficients must be finite")
    rng = rng if rng is not None else np.random.default_rng(seed)
    m, A = _posed(model, pose, p)
    idx = model.markup(markup).indices

    truth_lm = A[:2, idx]
    landmarks = truth_lm + rng.normal(0.0, noise_sigma, truth_lm.shape)
    mask = front_facing_vertices(A, model.topology)[idx]

    sil = silhouette_vertices(A, model.topology).vertex_indices
    contour_ids = sil[::contour_step]
    contour = A[:2, contour_ids] + rng.normal(0.0, noise_sigma, (2, len(contour_ids)))

    obs = Observations(
        markup_name=markup,
        landmarks=landmarks,
        mask=mask,
        contour_points=contour,
        bbox=tight_bbox(A[:2]),
    )
    return SyntheticScene(m, p.copy(), pose, obs, truth_lm, contour_ids, float(noise_sigma), int(seed))


def generate_pair(
    model: MorphableModel,
    pose_i: Pose,
    pose_j: Pose,
    shared_p,
    n_sift: int,
    noise_sigma: float = 0.0,
    seed: int = 0,
    markup: str = "pts68",
) -> tuple[SyntheticScene, SyntheticScene, KeypointPair]:
    """Two views of one face plus ``n_sift`` keypoint matches on vertices visible in both."""
    if n_sift > model.n_vertices:
        raise ParameterError(f"n_sift={n_sift} exceeds Q={model.n_vertices}")
    rng = np.random.default_rng(seed)
    shared_p = np.asarray(shared_p, dtype=np.float64)
    scene_i = generate_scene(model, pose_i, shared_p, noise_sigma, seed, markup, rng=rng)
    scene_j = generate_scene(model, pose_j, shared_p, noise_sigma, seed, markup, rng=rng)

    _, A_i = _posed(model, pose_i, shared_p)
    _, A_j = _posed(model, pose_j, shared_p)
    common = np.flatnonzero(
        front_facing_vertices(A_i, model.topology) & front_facing_vertices(A_j, model.topology)
    )
    if len(common) < n_sift:
        raise ParameterError(f"only {len(common)} vertices are visible in both views; asked for {n_sift}")
    ids = np.sort(rng.choice(common, size=n_sift, replace=False))
    pts_i = A_i[:2, ids] + rng.normal(0.0, noise_sigma, (2, n_sift))
    pts_j = A_j[:2, ids] + rng.normal(0.0, noise_sigma, (2, n_sift))
    pair = KeypointPair(pts_i, pts_j)

    def attach(scene):
        return SyntheticScene(
            scene.truth_m, scene.truth_p, scene.pose, scene.observations, scene.truth_landmarks,
            scene.contour_vertex_ids, scene.noise_sigma, scene.seed, pair, ids,
        )

    return attach(scene_i), attach(scene_j), pair


def profile_mask(model: MorphableModel, markup: str, yaw: float, midline: float = 0.05) -> np.ndarray:
    """Landmarks on the camera-facing half of the face for a turned head.

    Keeps points whose mean-shape x lies on the side that ``yaw`` turns toward
    the camera (positive yaw brings ``x < 0`` forward), plus those within
    ``midline`` of the symmetry plane. Mimics the one-sided annotations of
    profile images.
    """
    x = model.mean_shape[0, model.markup(markup).indices]
    return (np.sign(x) == -np.sign(yaw)) | (np.abs(x) < midline)
