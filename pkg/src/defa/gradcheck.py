"""Central finite-difference checks of the analytic residual Jacobians.

Vertex correspondences are drawn once per configuration and held fixed for both
the analytic and the numeric evaluation.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from defa.camera import Pose, compose_m, transform
from defa.correspondence import KeypointPair, sift_vertex_lookup
from defa.energy import residual_cfc, residual_lfc, residual_pc, residual_spc
from defa.model import MorphableModel, assemble_shape

GRAD_TOL = 1e-6


def numeric_jacobian(fun: Callable[[np.ndarray], np.ndarray], x: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central differences with step ``rel_step * max(1, |x_k|)`` per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for k in range(len(x)):
        h = rel_step * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        cols.append((fun(xp) - fun(xm)) / (xp[k] - xm[k]))
    return np.array(cols).T


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest ``|a - n| / max(1, |a|)`` over all entries."""
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def random_camera(rng: np.random.Generator) -> np.ndarray:
    pose = Pose(
        scale=float(rng.uniform(60, 140)),
        pitch=float(rng.uniform(-0.5, 0.5)),
        yaw=float(rng.uniform(-1.0, 1.0)),
        roll=float(rng.uniform(-0.4, 0.4)),
        tx=float(rng.uniform(80, 180)),
        ty=float(rng.uniform(80, 180)),
    )
    m = compose_m(pose)
    # Off-manifold perturbation: the solver's iterates are general affine rows.
    m[[0, 1, 2, 4, 5, 6]] += rng.normal(0, 2.0, 6)
    return m


def _split(x: np.ndarray, n: int):
    return x[:8], x[8 : 8 + n]


def check_terms(
    model: MorphableModel,
    rng: np.random.Generator,
    trials: int,
    markup: str = "pts68",
    corrupt: str | None = None,
) -> dict[str, float]:
    """Max relative Jacobian error per term over ``trials`` random configurations.

    ``corrupt`` names a term whose analytic Jacobian is deliberately perturbed
    (negative control).
    """
    n = model.n_params
    worst = {"PC": 0.0, "LFC": 0.0, "CFC": 0.0, "SPC": 0.0}
    L = len(model.markup(markup))

    def record(tag, block, fun, x):
        analytic = np.hstack([block.jacobian_m, block.jacobian_p])
        if tag == corrupt and analytic.size:
            analytic = analytic.copy()
            analytic.flat[0] += 1e-3 * max(1.0, abs(analytic.flat[0]))
        worst[tag] = max(worst[tag], max_relative_error(analytic, numeric_jacobian(fun, x)))

    for _ in range(trials):
        m = random_camera(rng)
        p = rng.normal(0, 1.0, n) * np.sqrt(model.n_vertices) * 0.05
        x = np.concatenate([m, p])

        prior = np.concatenate([random_camera(rng), rng.normal(0, 1, n)])
        blk = residual_pc(m, p, prior[:8], prior[8:])
        record("PC", blk, lambda v: residual_pc(v[:8], v[8:], prior[:8], prior[8:]).values, x)

        U = rng.uniform(0, 256, (2, L))
        mask = rng.random(L) > 0.2
        mask[0] = True
        blk = residual_lfc(m, p, model, markup, U, mask)
        record("LFC", blk, lambda v: residual_lfc(*_split(v, n), model, markup, U, mask).values, x)

        Lc = int(rng.integers(1, 40))
        U_c = rng.uniform(0, 256, (2, Lc))
        frozen = rng.integers(0, model.n_vertices, Lc)
        blk = residual_cfc(m, p, model, U_c, frozen)
        record("CFC", blk, lambda v: residual_cfc(*_split(v, n), model, U_c, frozen).values, x)

        m_j = random_camera(rng)
        p_j = rng.normal(0, 1.0, n) * np.sqrt(model.n_vertices) * 0.05
        L_ij = int(rng.integers(1, 30))
        pair = KeypointPair(rng.uniform(60, 200, (2, L_ij)), rng.uniform(60, 200, (2, L_ij)))
        i_s_i = sift_vertex_lookup(pair.points_i, transform(m, assemble_shape(model, p)))
        i_s_j = sift_vertex_lookup(pair.points_j, transform(m_j, assemble_shape(model, p_j)))
        xx = np.concatenate([m, m_j, p, p_j])

        def spc(v):
            return residual_spc(v[:8], v[16 : 16 + n], v[8:16], v[16 + n :], model, pair, i_s_i, i_s_j).values

        blk = residual_spc(m, p, m_j, p_j, model, pair, i_s_i, i_s_j)
        record("SPC", blk, spc, xx)
    return worst
