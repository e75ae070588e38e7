"""Levenberg-Marquardt fitting of camera and shape parameters.

Each outer iteration recomputes the correspondences (silhouette matches for the
contour term, keypoint-to-vertex lookups for the pairing term) at the current
estimate; the inner LM loop then minimizes the weighted residual stack with those
correspondences frozen, which keeps every inner problem smooth.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from defa.camera import Pose, compose_m, decompose_pose, project_points, transform
from defa.correspondence import KeypointPair, closest_point_match, sift_vertex_lookup
from defa.energy import (
    TAGS,
    Observations,
    ResidualBlock,
    Weights,
    residual_cfc,
    residual_lfc,
    residual_pc,
    residual_spc,
)
from defa.errors import DegenerateCameraError, InitializationError
from defa.mesh import silhouette_vertices
from defa.model import MorphableModel, ShapeParams, assemble_shape

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolveOptions:
    max_outer: int = 10
    max_inner: int = 50
    lm_damping_init: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    energy_tol: float = 1e-8
    step_tol: float = 1e-10
    weights: Weights = field(default_factory=Weights)
    visible_only_sift: bool = True
    max_damping: float = 1e12

    def __post_init__(self):
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration caps must be positive")
        for name in ("energy_tol", "step_tol"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Index pairings frozen for one inner solve.

    ``contour_vertices[j]`` is the silhouette vertex matched to contour point ``j``;
    ``sift_indices`` holds ``(i_s_i, i_s_j)`` for a coupled pair.
    """

    contour_vertices: tuple[np.ndarray | None, ...] = ()
    sift_indices: tuple[np.ndarray, np.ndarray] | None = None

    def same_as(self, other: CorrespondenceSet | None) -> bool:
        if other is None or len(self.contour_vertices) != len(other.contour_vertices):
            return False
        for a, b in zip(self.contour_vertices, other.contour_vertices):
            if (a is None) != (b is None) or (a is not None and not np.array_equal(a, b)):
                return False
        if (self.sift_indices is None) != (other.sift_indices is None):
            return False
        if self.sift_indices is not None:
            return all(np.array_equal(a, b) for a, b in zip(self.sift_indices, other.sift_indices))
        return True


@dataclass(frozen=True, eq=False)
class FitResult:
    """Recovered parameters with diagnostics.

    ``per_term_energies`` holds the unweighted constraint energies at ``(m, p)``
    with correspondences recomputed there; ``trace`` rows are
    ``(outer, inner, total_energy, damping)`` for the start of each inner solve
    and every accepted step.
    """

    m: np.ndarray
    p: ShapeParams
    pose: Pose
    per_term_energies: dict[str, float]
    total_energy: float
    outer_iterations: int
    trace: list[tuple[int, int, float, float]]
    converged: bool
    landmarks: np.ndarray | None = None

    def to_json(self) -> dict:
        out = {
            "m": self.m.tolist(),
            "p": self.p.vector.tolist(),
            "n_id": len(self.p.p_id),
            "pose": self.pose.to_json(),
            "energies": {tag: self.per_term_energies.get(tag, 0.0) for tag in TAGS},
            "total_energy": self.total_energy,
            "outer_iterations": self.outer_iterations,
            "trace": [list(row) for row in self.trace],
            "converged": self.converged,
        }
        if self.landmarks is not None:
            out["landmarks"] = self.landmarks.T.tolist()
        return out


# ---------------------------------------------------------------------------
# Per-image term assembly
# ---------------------------------------------------------------------------


def default_init(model: MorphableModel, bbox) -> tuple[np.ndarray, np.ndarray]:
    """Frontal camera fitting the mean shape's x-extent to the box width, centered; ``p = 0``."""
    bx, by, bw, bh = bbox
    xs, ys = model.mean_shape[0], model.mean_shape[1]
    width = xs.max() - xs.min()
    if width <= 0:
        raise InitializationError("mean shape has zero width")
    scale = bw / width
    tx = bx + bw / 2 - scale * (xs.max() + xs.min()) / 2
    ty = by + bh / 2 - scale * (ys.max() + ys.min()) / 2
    return compose_m(Pose(scale=scale, tx=tx, ty=ty)), np.zeros(model.n_params)


class _ImageTerms:
    """PC/LFC/CFC terms of one image."""

    def __init__(self, model, obs: Observations, weights: Weights, prior_m, prior_p):
        self.model = model
        self.obs = obs
        self.weights = weights
        self.markup = model.markup(obs.markup_name)
        if len(self.markup) != obs.landmarks.shape[1]:
            raise InitializationError(
                f"{obs.landmarks.shape[1]} landmarks for the {len(self.markup)}-point markup "
                f"{obs.markup_name!r}"
            )
        self.prior_m = prior_m
        self.prior_p = prior_p
        self.use_contour = weights.lambda_c > 0 and obs.has_contour
        mask = model.markups.get("contour_mask")
        self.contour_candidates = None if mask is None else mask.indices

    def correspond(self, m, p) -> np.ndarray | None:
        if not self.use_contour:
            return None
        A = transform(m, assemble_shape(self.model, p))
        sil = silhouette_vertices(A, self.model.topology, self.contour_candidates).vertex_indices
        if len(sil) == 0:
            return np.zeros(0, dtype=np.int64)
        match = closest_point_match(self.obs.contour_points, A[:2, sil])
        return sil[match.target_index]

    def blocks(self, m, p, contour_vertices) -> list[ResidualBlock]:
        out = []
        w = self.weights
        if w.lambda_pr > 0:
            out.append(residual_pc(m, p, self.prior_m, self.prior_p))
        if w.lambda_lm > 0 and self.obs.mask.any():
            out.append(residual_lfc(m, p, self.model, self.markup, self.obs.landmarks, self.obs.mask))
        if self.use_contour:
            frozen = contour_vertices
            U_c = self.obs.contour_points
            if len(frozen) == 0:
                U_c = U_c[:, :0]
            out.append(residual_cfc(m, p, self.model, U_c, frozen))
        return out

    def term_energies(self, m, p) -> dict[str, float]:
        """Unweighted energies with correspondences refreshed at ``(m, p)``."""
        energies = {tag: 0.0 for tag in TAGS}
        for blk in self.blocks(m, p, self.correspond(m, p)):
            energies[blk.term_tag] = blk.energy
        return energies


def _stack(parts: list[tuple[ResidualBlock, np.ndarray]], weights: Weights, dim: int):
    """Weighted residual vector and Jacobian; each part maps block columns to ``x`` columns."""
    rows = sum(len(b) for b, _ in parts)
    r = np.zeros(rows)
    J = np.zeros((rows, dim))
    at = 0
    for blk, cols in parts:
        k = len(blk)
        if k == 0:
            continue
        sw = math.sqrt(weights.for_tag(blk.term_tag))
        r[at : at + k] = sw * blk.values
        J[at : at + k, cols] = sw * np.hstack([blk.jacobian_m, blk.jacobian_p])
        at += k
    return r, J


def _camera_ok(m: np.ndarray) -> bool:
    r1, r2 = m[0:3], m[4:7]
    n1, n2 = np.linalg.norm(r1), np.linalg.norm(r2)
    if not (np.isfinite(m).all() and n1 > 1e-12 and n2 > 1e-12):
        return False
    return np.linalg.norm(np.cross(r1, r2)) > 1e-9 * n1 * n2


def _levenberg_marquardt(
    fun: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    x: np.ndarray,
    cameras: list[slice],
    opts: SolveOptions,
    outer: int,
    trace: list,
) -> tuple[np.ndarray, float, bool]:
    r, J = fun(x)
    E = float(r @ r)
    mu = opts.lm_damping_init
    trace.append((outer, 0, E, mu))
    if E == 0.0:
        return x, E, True
    converged = False
    last_reject_degenerate = False
    for it in range(1, opts.max_inner + 1):
        while True:
            g = J.T @ r
            H = J.T @ J
            d = np.diag(H).copy()
            dmax = d.max() if len(d) else 0.0
            d = np.maximum(d, 1e-12 * dmax if dmax > 0 else 1.0)
            try:
                cho = scipy.linalg.cho_factor(H + mu * np.diag(d), check_finite=False)
                step = -scipy.linalg.cho_solve(cho, g, check_finite=False)
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                step = None
            x_new = None if step is None else x + step
            if x_new is not None and all(_camera_ok(x_new[c]) for c in cameras):
                r_new, J_new = fun(x_new)
                E_new = float(r_new @ r_new)
                if math.isfinite(E_new) and E_new < E:
                    break
                last_reject_degenerate = False
            else:
                last_reject_degenerate = step is not None
            mu *= opts.damping_up
            if mu > opts.max_damping:
                if last_reject_degenerate:
                    raise DegenerateCameraError("damping exceeded its cap while steps kept degenerating the camera")
                # No descent direction left at any damping: a stationary point.
                return x, E, True

        decrease = (E - E_new) / E
        x, r, J, E = x_new, r_new, J_new, E_new
        mu = max(mu * opts.damping_down, 1e-15)
        trace.append((outer, it, E, mu))
        small_step = np.linalg.norm(step) <= opts.step_tol * (np.linalg.norm(x) + opts.step_tol)
        if E == 0.0 or decrease <= opts.energy_tol or small_step:
            converged = True
            break
    return x, E, converged


def _outer_loop(
    x0: np.ndarray,
    correspond: Callable[[np.ndarray], CorrespondenceSet],
    build: Callable[[np.ndarray, CorrespondenceSet], tuple[np.ndarray, np.ndarray]],
    refreshable: bool,
    cameras: list[slice],
    opts: SolveOptions,
):
    trace: list = []
    x = x0.copy()
    if not np.isfinite(x).all():
        raise InitializationError("initial parameters are not finite")
    r0, _ = build(x, correspond(x))
    if not np.isfinite(r0).all():
        raise InitializationError("energy is not finite at the initial parameters")

    best_x, best_E = None, math.inf
    prev_corr = None
    converged = False
    outer = 0
    for outer in range(1, opts.max_outer + 1):
        corr = correspond(x)
        fresh_r, _ = build(x, corr)
        fresh_E = float(fresh_r @ fresh_r)
        if fresh_E < best_E:
            best_x, best_E = x.copy(), fresh_E
        if converged and corr.same_as(prev_corr):
            outer -= 1
            break
        x_start = x
        x, _, inner_converged = _levenberg_marquardt(
            lambda v: build(v, corr), x, cameras, opts, outer, trace
        )
        prev_corr = corr
        converged = inner_converged
        step = np.linalg.norm(x - x_start)
        if not refreshable and inner_converged:
            break
        if inner_converged and step <= opts.step_tol * (1.0 + np.linalg.norm(x)):
            break
    else:
        converged = converged and refreshable and correspond(x).same_as(prev_corr)

    corr = correspond(x)
    final_r, _ = build(x, corr)
    final_E = float(final_r @ final_r)
    if final_E <= best_E or best_x is None:
        best_x, best_E = x, final_E
    return best_x, best_E, max(outer, 1), trace, converged


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------


def fit_single(
    model: MorphableModel,
    obs: Observations,
    init: tuple[np.ndarray, np.ndarray] | None = None,
    opts: SolveOptions | None = None,
    prior: tuple[np.ndarray, np.ndarray] | None = None,
) -> FitResult:
    """Fit ``(m, p)`` to one image's landmarks (and contour points, when given).

    Args:
        init: starting ``(m, p)``; defaults to :func:`default_init` from the bbox.
        prior: target of the parameter term; defaults to ``(init_m, 0)``. Only
            used when ``opts.weights.lambda_pr > 0``.
    """
    opts = opts or SolveOptions()
    m0, p0 = default_init(model, obs.bbox) if init is None else init
    m0 = np.asarray(m0, dtype=np.float64).copy()
    p0 = np.asarray(p0, dtype=np.float64).copy()
    if prior is None:
        prior = (m0.copy(), np.zeros(model.n_params))
    terms = _ImageTerms(model, obs, opts.weights, *prior)
    n = model.n_params
    cols = np.arange(8 + n)

    def correspond(x):
        return CorrespondenceSet((terms.correspond(x[:8], x[8:]),))

    def build(x, corr):
        blocks = terms.blocks(x[:8], x[8:], corr.contour_vertices[0])
        return _stack([(b, cols) for b in blocks], opts.weights, 8 + n)

    x, E, outer, trace, converged = _outer_loop(
        np.concatenate([m0, p0]), correspond, build, terms.use_contour, [slice(0, 8)], opts
    )
    return _result(model, terms, x[:8], x[8:], E, outer, trace, converged)


def _result(model, terms: _ImageTerms, m, p, E, outer, trace, converged, extra_energies=None):
    energies = terms.term_energies(m, p)
    if extra_energies:
        energies.update(extra_energies)
    landmarks = project_points(m, assemble_shape(model, p)[:, terms.markup.indices])
    return FitResult(
        m=np.array(m),
        p=ShapeParams.from_vector(p, model.n_id),
        pose=decompose_pose(m),
        per_term_energies=energies,
        total_energy=E,
        outer_iterations=outer,
        trace=trace,
        converged=converged,
        landmarks=landmarks,
    )


def fit_pair(
    model: MorphableModel,
    obs_i: Observations,
    obs_j: Observations,
    pair: KeypointPair,
    inits: tuple | None = None,
    opts: SolveOptions | None = None,
    priors: tuple | None = None,
) -> tuple[FitResult, FitResult]:
    """Jointly fit two images of one face coupled by matched keypoints.

    With no matches (or a zero pairing weight) this is exactly two independent
    :func:`fit_single` calls.
    """
    opts = opts or SolveOptions()
    inits = inits or (None, None)
    priors = priors or (None, None)
    if len(pair) == 0 or opts.weights.lambda_s == 0:
        return (
            fit_single(model, obs_i, inits[0], opts, priors[0]),
            fit_single(model, obs_j, inits[1], opts, priors[1]),
        )

    n = model.n_params
    starts = []
    for obs, init in ((obs_i, inits[0]), (obs_j, inits[1])):
        m0, p0 = default_init(model, obs.bbox) if init is None else init
        starts.append((np.asarray(m0, float).copy(), np.asarray(p0, float).copy()))
    terms = []
    for (m0, _), obs, prior in zip(starts, (obs_i, obs_j), priors):
        if prior is None:
            prior = (m0.copy(), np.zeros(n))
        terms.append(_ImageTerms(model, obs, opts.weights, *prior))

    d = 8 + n
    cols_i = np.arange(d)
    cols_j = np.arange(d, 2 * d)
    # SPC block columns: [m_i, m_j, p_i, p_j].
    cols_spc = np.concatenate([np.arange(8), np.arange(d, d + 8), np.arange(8, d), np.arange(d + 8, 2 * d)])

    def lookups(x):
        shapes = [
            transform(x[k * d : k * d + 8], assemble_shape(model, x[k * d + 8 : (k + 1) * d])) for k in (0, 1)
        ]
        topo = model.topology if opts.visible_only_sift else None
        return (
            sift_vertex_lookup(pair.points_i, shapes[0], opts.visible_only_sift, topo),
            sift_vertex_lookup(pair.points_j, shapes[1], opts.visible_only_sift, topo),
        )

    def correspond(x):
        cv = tuple(t.correspond(x[k * d : k * d + 8], x[k * d + 8 : (k + 1) * d]) for k, t in enumerate(terms))
        return CorrespondenceSet(cv, lookups(x))

    def spc_block(x, corr):
        return residual_spc(x[:8], x[8:d], x[d : d + 8], x[d + 8 :], model, pair, *corr.sift_indices)

    def build(x, corr):
        parts = [(b, cols_i) for b in terms[0].blocks(x[:8], x[8:d], corr.contour_vertices[0])]
        parts += [(b, cols_j) for b in terms[1].blocks(x[d : d + 8], x[d + 8 :], corr.contour_vertices[1])]
        parts.append((spc_block(x, corr), cols_spc))
        return _stack(parts, opts.weights, 2 * d)

    x0 = np.concatenate([starts[0][0], starts[0][1], starts[1][0], starts[1][1]])
    x, E, outer, trace, converged = _outer_loop(
        x0, correspond, build, True, [slice(0, 8), slice(d, d + 8)], opts
    )
    spc = {"SPC": spc_block(x, correspond(x)).energy}
    return (
        _result(model, terms[0], x[:8], x[8:d], E, outer, trace, converged, spc),
        _result(model, terms[1], x[d : d + 8], x[d + 8 :], E, outer, trace, converged, spc),
    )
