from __future__ import annotations

import math
from itertools import groupby

import numpy as np
import pytest

from defa.camera import Pose, angle_error, compose_m
from defa.correspondence import KeypointPair
from defa.energy import Observations, Weights, residual_lfc
from defa.errors import InitializationError
from defa.metrics import nme_lp
from defa.model import synth_model
from defa.solver import SolveOptions, default_init, fit_pair, fit_single
from defa.synth import generate_pair, generate_scene

TRUE_POSE = Pose(90, 0.08, 0.35, -0.05, 128, 128)


@pytest.fixture(scope="module")
def scene():
    model = synth_model(0, 642, 6, 3)
    p = np.random.default_rng(2).normal(0, 1.5, model.n_params)
    return model, generate_scene(model, TRUE_POSE, p, 0.0, seed=2)


def _rmse(a, b):
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def _perturbed(sc, d_yaw=math.radians(10), shift=8.0):
    pose = sc.pose
    m = compose_m(Pose(pose.scale, pose.pitch, pose.yaw + d_yaw, pose.roll, pose.tx + shift, pose.ty))
    return m, np.zeros_like(sc.truth_p)


class TestSingle:
    def test_init_at_truth_stays(self, scene):
        model, sc = scene
        res = fit_single(model, sc.observations, (sc.truth_m, sc.truth_p))
        assert res.converged and res.outer_iterations <= 2
        assert _rmse(res.landmarks, sc.truth_landmarks) < 1e-8
        assert res.total_energy < 1e-12

    def test_recovers_from_perturbed_start(self, scene):
        model, sc = scene
        res = fit_single(model, sc.observations, _perturbed(sc))
        assert nme_lp(res.landmarks, sc.truth_landmarks, bbox=sc.observations.bbox) < 1e-6
        assert angle_error(res.pose.yaw, sc.pose.yaw) < 1e-4

    def test_trace_non_increasing_within_outer(self, scene):
        model, sc = scene
        res = fit_single(model, sc.observations, _perturbed(sc))
        assert res.trace
        for _, rows in groupby(res.trace, key=lambda r: r[0]):
            energies = [r[2] for r in rows]
            assert all(b <= a for a, b in zip(energies, energies[1:]))

    def test_deterministic(self, scene):
        model, sc = scene
        a = fit_single(model, sc.observations, _perturbed(sc))
        b = fit_single(model, sc.observations, _perturbed(sc))
        assert np.array_equal(a.m, b.m) and np.array_equal(a.p.vector, b.p.vector)
        assert a.trace == b.trace

    def test_zero_contour_weight_equals_no_contour(self, scene):
        model, sc = scene
        obs = sc.observations
        no_contour = Observations(obs.markup_name, obs.landmarks, obs.mask, None, obs.bbox)
        opts = SolveOptions(weights=Weights(lambda_c=0.0))
        a = fit_single(model, obs, _perturbed(sc), opts)
        b = fit_single(model, no_contour, _perturbed(sc), opts)
        assert np.array_equal(a.m, b.m) and np.array_equal(a.p.vector, b.p.vector)

    def test_term_energies_recomputable(self, scene):
        model, sc = scene
        obs = sc.observations
        res = fit_single(model, obs, _perturbed(sc))
        lfc = residual_lfc(res.m, res.p.vector, model, "pts68", obs.landmarks, obs.mask)
        assert abs(res.per_term_energies["LFC"] - lfc.energy) <= 1e-9

    def test_non_finite_init(self, scene):
        model, sc = scene
        m = sc.truth_m.copy()
        m[0] = np.nan
        with pytest.raises(InitializationError):
            fit_single(model, sc.observations, (m, sc.truth_p))

    def test_default_init_from_bbox(self, scene):
        model, sc = scene
        m, p = default_init(model, (10, 20, 200, 220))
        assert np.all(p == 0)
        assert m[1] == 0 and m[2] == 0 and m[4] == 0 and m[6] == 0
        xs = m[0] * model.mean_shape[0] + m[3]
        assert xs.min() == pytest.approx(10) and xs.max() == pytest.approx(210)
        res = fit_single(model, sc.observations)
        assert np.isfinite(res.total_energy)

    def test_json(self, scene):
        model, sc = scene
        js = fit_single(model, sc.observations, (sc.truth_m, sc.truth_p)).to_json()
        assert set(js["energies"]) == {"PC", "LFC", "CFC", "SPC"}
        assert len(js["m"]) == 8 and len(js["p"]) == model.n_params
        assert len(js["landmarks"]) == 68
        assert js["pose"]["yaw_deg"] == pytest.approx(math.degrees(TRUE_POSE.yaw))


class TestPair:
    def test_no_matches_equals_single_fits(self, scene):
        model, sc = scene
        empty = KeypointPair(np.zeros((2, 0)), np.zeros((2, 0)))
        init = _perturbed(sc)
        a, b = fit_pair(model, sc.observations, sc.observations, empty, (init, init))
        s = fit_single(model, sc.observations, init)
        for r in (a, b):
            assert np.array_equal(r.m, s.m) and np.array_equal(r.p.vector, s.p.vector)

    def test_identical_views_from_truth(self, scene):
        model, sc = scene
        sc_i, sc_j, pair = generate_pair(model, TRUE_POSE, TRUE_POSE, sc.truth_p, 25, 0.0, seed=4)
        truth = (sc_i.truth_m, sc_i.truth_p)
        a, b = fit_pair(model, sc_i.observations, sc_j.observations, pair, (truth, truth))
        s = fit_single(model, sc_i.observations, truth)
        for r in (a, b):
            assert np.max(np.abs(r.m - s.m)) < 1e-10
            assert np.max(np.abs(r.p.vector - s.p.vector)) < 1e-10
        assert a.per_term_energies["SPC"] < 1e-12

    def test_two_views_recovered(self, scene):
        model, sc = scene
        pose_j = Pose(85, -0.05, -0.3, 0.04, 120, 130)
        sc_i, sc_j, pair = generate_pair(model, TRUE_POSE, pose_j, sc.truth_p, 30, 0.0, seed=5)
        a, b = fit_pair(
            model, sc_i.observations, sc_j.observations, pair, (_perturbed(sc_i), _perturbed(sc_j, -0.1, -5))
        )
        assert _rmse(a.landmarks, sc_i.truth_landmarks) < 1e-6
        assert _rmse(b.landmarks, sc_j.truth_landmarks) < 1e-6


class TestOptions:
    def test_rejects_bad_caps(self):
        with pytest.raises(ValueError):
            SolveOptions(max_outer=0)
        with pytest.raises(ValueError):
            SolveOptions(energy_tol=0.0)

    def test_defaults(self):
        opts = SolveOptions()
        assert opts.max_outer == 10 and opts.max_inner == 50
        assert opts.visible_only_sift
