"""Least-squares residual blocks for the four fitting constraints.

Every block's squared norm equals its constraint energy:

* PC  -- ``||[m; p] - [m0; p0]||^2`` (parameter prior)
* LFC -- ``(1/L) ||Pr A(:, i_lm) - U_lm||_F^2`` over the valid landmarks
* CFC -- ``(1/Lc) sum_j ||Pr A(:, k_j) - U_c(:, j)||^2`` with frozen vertex ids ``k_j``
* SPC -- ``(1/L_ij) (||Pr A_i(:, i_s^j) - U_s^i||^2 + ||Pr A_j(:, i_s^i) - U_s^j||^2)``

Point residuals are interleaved ``[x_0, y_0, x_1, y_1, ...]``. Jacobians are taken
with the vertex indices held fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from defa.camera import as_m
from defa.errors import DimensionError, EmptyBlockError
from defa.model import LandmarkMarkup, MorphableModel

TAGS = ("PC", "LFC", "CFC", "SPC")


@dataclass(frozen=True)
class Weights:
    """Per-constraint weights. Defaults are the joint LFC/SPC/CFC setting (5, 1, 1).

    ``lambda_pr`` defaults to 0: the parameter prior is opt-in when fitting.
    """

    lambda_pr: float = 0.0
    lambda_lm: float = 5.0
    lambda_c: float = 1.0
    lambda_s: float = 1.0

    def __post_init__(self):
        for name in ("lambda_pr", "lambda_lm", "lambda_c", "lambda_s"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {val}")

    def for_tag(self, tag: str) -> float:
        return {
            "PC": self.lambda_pr,
            "LFC": self.lambda_lm,
            "CFC": self.lambda_c,
            "SPC": self.lambda_s,
        }[tag]


@dataclass(frozen=True)
class Observations:
    """Per-image 2D evidence.

    Attributes:
        markup_name: model markup the landmarks follow.
        landmarks: ``(2, L)`` pixel positions in markup order.
        mask: ``(L,)`` bool, False for absent/occluded landmarks.
        contour_points: ``(2, Lc)`` band-filtered edge pixels, or None.
        bbox: face box ``(x, y, w, h)`` in pixels.
    """

    markup_name: str
    landmarks: np.ndarray
    mask: np.ndarray | None = None
    contour_points: np.ndarray | None = None
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 256.0, 256.0)

    def __post_init__(self):
        lm = np.asarray(self.landmarks, dtype=np.float64).reshape(2, -1)
        object.__setattr__(self, "landmarks", lm)
        mask = np.ones(lm.shape[1], bool) if self.mask is None else np.asarray(self.mask, bool).reshape(-1)
        if len(mask) != lm.shape[1]:
            raise DimensionError(f"mask has {len(mask)} entries for {lm.shape[1]} landmarks", "mask")
        object.__setattr__(self, "mask", mask)
        if self.contour_points is not None:
            object.__setattr__(
                self, "contour_points", np.asarray(self.contour_points, dtype=np.float64).reshape(2, -1)
            )
        bbox = tuple(float(v) for v in self.bbox)
        if len(bbox) != 4 or not (bbox[2] > 0 and bbox[3] > 0):
            raise ValueError(f"bbox must be (x, y, w, h) with w, h > 0, got {self.bbox}")
        object.__setattr__(self, "bbox", bbox)

    @property
    def has_contour(self) -> bool:
        return self.contour_points is not None and self.contour_points.shape[1] > 0


@dataclass(eq=False)
class ResidualBlock:
    """Residual vector with Jacobians w.r.t. camera and shape parameters.

    For SPC the Jacobians span both images: ``jacobian_m`` is ``(R, 16)`` and
    ``jacobian_p`` is ``(R, 2N)``, image i first.
    """

    values: np.ndarray
    jacobian_m: np.ndarray
    jacobian_p: np.ndarray
    term_tag: str
    weight: float = 1.0

    @property
    def energy(self) -> float:
        return float(self.values @ self.values)

    def __len__(self) -> int:
        return len(self.values)


def _empty_block(tag: str, n_m: int, n_p: int) -> ResidualBlock:
    return ResidualBlock(np.zeros(0), np.zeros((0, n_m)), np.zeros((0, n_p)), tag)


def _check_params(model: MorphableModel, m, p) -> tuple[np.ndarray, np.ndarray]:
    m = as_m(m)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if len(p) != model.n_params:
        raise DimensionError(f"expected {model.n_params} shape coefficients, got {len(p)}", "p")
    return m, p


def point_residuals(
    model: MorphableModel, m, p, vertex_idx: np.ndarray, targets: np.ndarray, scale: float = 1.0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``scale * (Pr A(:, idx) - targets)`` and its Jacobians, interleaved x/y.

    Returns ``(values (2K,), J_m (2K, 8), J_p (2K, N))``.
    """
    idx = np.asarray(vertex_idx, dtype=np.int64)
    k = len(idx)
    B = model.bases[:, :, idx]  # (N, 3, K)
    S = model.mean_shape[:, idx] + np.tensordot(p, B, axes=1) if len(p) else model.mean_shape[:, idx].copy()
    M = m.reshape(2, 4)
    proj = M[:, :3] @ S + M[:, 3:]
    values = scale * (proj - targets).T.reshape(-1)

    Sh = np.vstack([S, np.ones(k)]).T  # (K, 4)
    J_m = np.zeros((2 * k, 8))
    J_m[0::2, 0:4] = scale * Sh
    J_m[1::2, 4:8] = scale * Sh
    J_p = np.zeros((2 * k, len(p)))
    if len(p):
        J_p[0::2] = scale * np.einsum("c,nck->kn", M[0, :3], B)
        J_p[1::2] = scale * np.einsum("c,nck->kn", M[1, :3], B)
    return values, J_m, J_p


def residual_pc(m, p, prior_m, prior_p) -> ResidualBlock:
    m = as_m(m)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    prior_m = as_m(prior_m)
    prior_p = np.asarray(prior_p, dtype=np.float64).reshape(-1)
    if prior_p.shape != p.shape:
        raise DimensionError(f"prior has {len(prior_p)} shape entries, params have {len(p)}", "prior_p")
    n = len(p)
    J_m = np.zeros((8 + n, 8))
    J_m[:8] = np.eye(8)
    J_p = np.zeros((8 + n, n))
    J_p[8:] = np.eye(n)
    return ResidualBlock(np.concatenate([m - prior_m, p - prior_p]), J_m, J_p, "PC")


def residual_lfc(
    m,
    p,
    model: MorphableModel,
    markup: str | LandmarkMarkup,
    U_lm: np.ndarray,
    mask: np.ndarray | None = None,
) -> ResidualBlock:
    m, p = _check_params(model, m, p)
    mk = model.markup(markup) if isinstance(markup, str) else markup
    U_lm = np.asarray(U_lm, dtype=np.float64).reshape(2, -1)
    if U_lm.shape[1] != len(mk):
        raise DimensionError(f"{U_lm.shape[1]} landmarks for a {len(mk)}-point markup", "landmarks")
    valid = np.ones(len(mk), bool) if mask is None else np.asarray(mask, bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptyBlockError("no valid landmarks")
    values, J_m, J_p = point_residuals(
        model, m, p, mk.indices[valid], U_lm[:, valid], 1.0 / math.sqrt(n_valid)
    )
    return ResidualBlock(values, J_m, J_p, "LFC")


def residual_cfc(m, p, model: MorphableModel, U_c: np.ndarray, frozen: np.ndarray) -> ResidualBlock:
    """Contour residual against frozen vertex ids ``frozen[j]`` for each contour point ``j``."""
    m, p = _check_params(model, m, p)
    frozen = np.asarray(frozen, dtype=np.int64).reshape(-1)
    U_c = np.asarray(U_c, dtype=np.float64).reshape(2, -1)
    if len(frozen) != U_c.shape[1]:
        raise DimensionError(f"{len(frozen)} correspondences for {U_c.shape[1]} contour points", "frozen")
    if len(frozen) == 0:
        return _empty_block("CFC", 8, model.n_params)
    values, J_m, J_p = point_residuals(model, m, p, frozen, U_c, 1.0 / math.sqrt(len(frozen)))
    return ResidualBlock(values, J_m, J_p, "CFC")


def residual_spc(
    m_i, p_i, m_j, p_j, model: MorphableModel, pair, i_s_i: np.ndarray, i_s_j: np.ndarray
) -> ResidualBlock:
    """Cross-mapped keypoint residual over the stacked ``[m_i, m_j]`` / ``[p_i, p_j]`` parameters.

    ``i_s_i`` are the vertices found under image i's keypoints; they are evaluated
    in image j against ``pair.points_j`` (and symmetrically for ``i_s_j``).
    """
    m_i, p_i = _check_params(model, m_i, p_i)
    m_j, p_j = _check_params(model, m_j, p_j)
    n = model.n_params
    L = len(pair)
    if L == 0:
        return _empty_block("SPC", 16, 2 * n)
    i_s_i = np.asarray(i_s_i, dtype=np.int64).reshape(-1)
    i_s_j = np.asarray(i_s_j, dtype=np.int64).reshape(-1)
    if len(i_s_i) != L or len(i_s_j) != L:
        raise DimensionError(f"expected {L} vertex ids per image", "i_s")
    scale = 1.0 / math.sqrt(L)
    v1, Jm1, Jp1 = point_residuals(model, m_i, p_i, i_s_j, pair.points_i, scale)
    v2, Jm2, Jp2 = point_residuals(model, m_j, p_j, i_s_i, pair.points_j, scale)
    R = 2 * L
    J_m = np.zeros((2 * R, 16))
    J_m[:R, :8] = Jm1
    J_m[R:, 8:] = Jm2
    J_p = np.zeros((2 * R, 2 * n))
    J_p[:R, :n] = Jp1
    J_p[R:, n:] = Jp2
    return ResidualBlock(np.concatenate([v1, v2]), J_m, J_p, "SPC")


def total_energy(blocks, weights: Weights | None = None) -> float:
    """Weighted sum of block energies.

    With ``weights`` the factor comes from the block's tag, otherwise from
    ``block.weight``.
    """
    total = 0.0
    for b in blocks:
        w = weights.for_tag(b.term_tag) if weights is not None else b.weight
        total += w * float(b.values @ b.values)
    return total
