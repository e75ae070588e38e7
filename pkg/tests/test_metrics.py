from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from defa.errors import ValidationError
from defa.metrics import ced_curve, interocular_distance, nme_lp, nme_nf
from defa.model import EYE_CORNERS_68


def _two_pass(pred, gt, mask, norm):
    """Distances first, then their mean, then the division."""
    dists = [math.hypot(pred[0, k] - gt[0, k], pred[1, k] - gt[1, k]) for k in range(gt.shape[1]) if mask[k]]
    return (sum(dists) / len(dists)) / norm


def _rotate(P, a, t):
    R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return R @ P + np.asarray(t, float).reshape(2, 1)


class TestNmeLp:
    def test_identical_is_zero(self, rng):
        P = rng.uniform(0, 256, (2, 68))
        assert nme_lp(P, P, bbox=(0, 0, 100, 100)) == 0.0

    def test_pythagorean(self):
        assert nme_lp(np.array([[3.0], [4.0]]), np.zeros((2, 1)), bbox=(0, 0, 100, 100)) == pytest.approx(0.05)

    def test_two_pass_oracle(self, rng):
        pred, gt = rng.uniform(0, 256, (2, 2, 68))
        mask = rng.random(68) > 0.2
        got = nme_lp(pred, gt, mask, (5, 7, 180, 210))
        assert abs(got - _two_pass(pred, gt, mask, math.sqrt(180 * 210))) <= 1e-12

    def test_double_area(self, rng):
        pred, gt = rng.uniform(0, 256, (2, 2, 68))
        a = nme_lp(pred, gt, bbox=(0, 0, 100, 120))
        b = nme_lp(pred, gt, bbox=(0, 0, 200, 120))
        assert b == pytest.approx(a / math.sqrt(2), rel=1e-14)

    def test_errors(self):
        with pytest.raises(ValidationError):
            nme_lp(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros(3, bool), (0, 0, 1, 1))
        with pytest.raises(ValidationError):
            nme_lp(np.zeros((2, 3)), np.zeros((2, 3)), bbox=(0, 0, 0, 1))
        with pytest.raises(ValidationError):
            nme_lp(np.zeros((2, 3)), np.zeros((2, 4)), bbox=(0, 0, 1, 1))


class TestNmeNf:
    def test_uniform_offset(self, rng):
        gt = rng.uniform(0, 256, (2, 68))
        assert nme_nf(gt + np.array([[1.0], [0.0]]), gt, interocular=50) == pytest.approx(0.02)

    def test_identical_is_zero(self, rng):
        gt = rng.uniform(0, 256, (2, 68))
        assert nme_nf(gt, gt) == 0.0

    def test_default_interocular_uses_outer_corners(self, rng):
        gt = rng.uniform(0, 256, (2, 68))
        a, b = EYE_CORNERS_68
        assert (a, b) == (36, 45)
        assert interocular_distance(gt) == pytest.approx(np.linalg.norm(gt[:, 36] - gt[:, 45]))
        pred = gt + rng.normal(0, 2, gt.shape)
        assert nme_nf(pred, gt) == pytest.approx(
            _two_pass(pred, gt, np.ones(68, bool), math.dist(gt[:, 36], gt[:, 45])), abs=1e-12
        )

    def test_errors(self):
        with pytest.raises(ValidationError):
            nme_nf(np.zeros((2, 3)), np.zeros((2, 3)), interocular=0.0)
        with pytest.raises(ValidationError):
            interocular_distance(np.zeros((2, 21)))


class TestRigidInvariance:
    @given(st.floats(-math.pi, math.pi), st.floats(-500, 500), st.floats(-500, 500), st.integers(0, 2**32 - 1))
    def test_both_metrics(self, a, tx, ty, seed):
        rng = np.random.default_rng(seed)
        gt = rng.uniform(0, 256, (2, 68))
        pred = gt + rng.normal(0, 3, gt.shape)
        bbox = (0.0, 0.0, 200.0, 180.0)
        # A rigidly moved box keeps its w and h.
        moved = (bbox[0] + tx, bbox[1] + ty, bbox[2], bbox[3])
        P2, G2 = _rotate(pred, a, (tx, ty)), _rotate(gt, a, (tx, ty))
        assert abs(nme_lp(P2, G2, bbox=moved) - nme_lp(pred, gt, bbox=bbox)) < 1e-9
        assert abs(nme_nf(P2, G2) - nme_nf(pred, gt)) < 1e-9


class TestCed:
    def test_inclusive_boundary(self):
        assert ced_curve([0.05], [0.05]) == [(0.05, 1.0)]

    def test_half(self):
        assert ced_curve([1, 2, 3, 4], [2.5]) == [(2.5, 0.5)]

    def test_uniform_monte_carlo(self, rng):
        th = np.round(np.arange(1, 11) * 0.1, 10)
        curve = ced_curve(rng.uniform(0, 1, 1000), th)
        assert all(abs(f - t) <= 0.05 for t, f in curve)

    def test_against_counting_oracle(self, rng):
        errs = rng.exponential(0.05, 500)
        th = np.linspace(0, 0.3, 31)
        got = ced_curve(errs, th)
        for t, f in got:
            assert f == sum(1 for e in errs if e <= t) / len(errs)

    @given(st.lists(st.floats(0, 10), min_size=1, max_size=50), st.lists(st.floats(0, 10), min_size=1, max_size=20))
    def test_monotone(self, errs, th):
        fr = [f for _, f in ced_curve(errs, sorted(th))]
        assert all(b >= a for a, b in zip(fr, fr[1:]))
        assert all(0 <= f <= 1 for f in fr)

    def test_errors(self):
        with pytest.raises(ValidationError):
            ced_curve([], [0.1])
        with pytest.raises(ValidationError):
            ced_curve([0.1], [0.2, 0.1])
