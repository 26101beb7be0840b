import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepsup.metrics import (
    EvalRecord,
    apk,
    average_precision,
    mean_recall,
    object_yaw,
    pck2d,
    pck3d,
    records_from_arrays,
    wrap_axis,
    yaw_error,
)

from oracles import apk_loop, mean_recall_loop, pck2d_loop, pck3d_loop, yaw_error_loop

CUBE_PAIRS = [(i | 2, i) for i in range(8) if not i & 2]


def rec2d(pred, gt, vis=None, w=100, h=50, score=None):
    gt = np.atleast_2d(gt)
    return EvalRecord(np.atleast_2d(pred), gt, np.ones(len(gt), bool) if vis is None else vis, w, h, score=score)


def rec3d(pred, gt):
    pred, gt = np.atleast_2d(pred), np.atleast_2d(gt)
    return EvalRecord(np.zeros((len(gt), 2)), np.zeros((len(gt), 2)), np.ones(len(gt), bool), 1, 1, pred, gt)


def random_records(rng, n_rec=None, n_kp=None, ties=True):
    n_rec = n_rec or int(rng.integers(1, 12))
    n_kp = n_kp or int(rng.integers(1, 6))
    out = []
    for _ in range(n_rec):
        w, h = (float(v) for v in rng.integers(10, 200, 2))
        gt = rng.uniform(0, 1, (n_kp, 2)) * [w, h]
        pred = gt + rng.normal(scale=0.1 * max(w, h), size=gt.shape)
        vis = rng.random(n_kp) < 0.7
        score = rng.integers(0, 4, n_kp) / 4 if ties else rng.random(n_kp)
        g3 = rng.uniform(-0.5, 0.5, (n_kp, 3))
        out.append(EvalRecord(pred, gt, vis, w, h, g3 + rng.normal(scale=0.2, size=g3.shape), g3, score))
    if not any(r.gt_visible.any() for r in out):
        out[0].gt_visible[0] = True
    return out


def cube(yaw_deg=0.0):
    c = np.array([[(i & 1) - 0.5, ((i >> 1) & 1) - 0.5, ((i >> 2) & 1) - 0.5] for i in range(8)])
    t = math.radians(yaw_deg)
    R = np.array([[math.cos(t), -math.sin(t), 0], [math.sin(t), math.cos(t), 0], [0, 0, 1]])
    return c @ R.T


class TestPCK2D:
    def test_identical(self):
        assert pck2d([rec2d([[3, 4]], [[3, 4]])], 0.1) == 1.0

    def test_radius_uses_longer_side(self):
        assert pck2d([rec2d([[9, 0]], [[0, 0]])], 0.1) == 1.0
        assert pck2d([rec2d([[11, 0]], [[0, 0]])], 0.1) == 0.0

    def test_closed_ball(self):
        assert pck2d([rec2d([[6, 8]], [[0, 0]])], 0.1) == 1.0

    def test_occluded_groundtruth_ignored(self):
        r = rec2d([[0, 0], [90, 0]], [[0, 0], [0, 0]], vis=np.array([True, False]))
        assert pck2d([r], 0.1) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            pck2d([rec2d([[0, 0]], [[0, 0]], vis=np.array([False]))], 0.1)
        for bad in (0.0, 1.0):
            with pytest.raises(ValueError):
                pck2d([rec2d([[0, 0]], [[0, 0]])], bad)
        with pytest.raises(ValueError):
            EvalRecord(np.zeros((2, 2)), np.zeros((3, 2)), np.ones(3, bool), 1, 1)

    def test_translation_invariance(self):
        rng = np.random.default_rng(0)
        recs = random_records(rng, 8, 4)
        moved = [EvalRecord(r.pred_kp2d + 7.5, r.gt_kp2d + 7.5, r.gt_visible, r.width, r.height) for r in recs]
        assert pck2d(recs, 0.1) == pck2d(moved, 0.1)


class TestPCK3D:
    def test_exact(self):
        assert pck3d([rec3d(np.eye(3), np.eye(3))], 0.1) == 1.0

    def test_strict_threshold(self):
        r = [rec3d([[0.3, 0, 0]], [[0, 0, 0]])]
        assert pck3d(r, 0.31) == 1.0
        assert pck3d(r, 0.29) == 0.0

    def test_mean_recall(self):
        assert mean_recall([rec3d(np.eye(3), np.eye(3))]) == 1.0
        assert abs(mean_recall([rec3d([[0.3, 0, 0]], [[0, 0, 0]])]) - 0.70) <= 0.01

    def test_mean_recall_monotone(self):
        rng = np.random.default_rng(1)
        gt = rng.uniform(-0.5, 0.5, (6, 3))
        pred = gt + rng.normal(scale=0.3, size=gt.shape)
        prev = mean_recall([rec3d(pred, gt)])
        for t in np.linspace(0.1, 1.0, 10):
            cur = mean_recall([rec3d(pred + t * (gt - pred), gt)])
            assert cur >= prev
            prev = cur


class TestAPK:
    def test_perfect(self):
        recs = [rec2d([[0, 0]], [[0, 0]], score=[s]) for s in (0.9, 0.5, 0.1)]
        assert apk(recs, 0.1) == 1.0

    def test_all_wrong(self):
        recs = [rec2d([[50, 0]], [[0, 0]], score=[s]) for s in (0.9, 0.5)]
        assert apk(recs, 0.1) == 0.0

    def test_hand_built_three_records(self):
        # all three groundtruths are visible, so n_pos = 3; ranked correct, wrong, correct
        # gives PR points (1/3, 1), (1/3, 1/2), (2/3, 2/3)
        recs = [rec2d([[0, 0]], [[0, 0]], score=[0.9]), rec2d([[50, 0]], [[0, 0]], score=[0.6]),
                rec2d([[0, 0]], [[0, 0]], score=[0.3])]
        assert apk(recs, 0.1) == pytest.approx(1 / 3 * 1.0 + 1 / 3 * 2 / 3)

    def test_equal_scores_give_positive_fraction(self):
        rng = np.random.default_rng(2)
        vis = rng.random((20, 1)) < 0.6
        recs = [rec2d([[0, 0]], [[0, 0]], vis=v, score=[0.5]) for v in vis]
        assert apk(recs, 0.1) == pytest.approx(vis.mean())

    def test_ties_are_order_independent(self):
        rng = np.random.default_rng(3)
        recs = random_records(rng, 15, 3)
        perm = rng.permutation(len(recs))
        assert apk(recs, 0.1) == apk([recs[i] for i in perm], 0.1)

    def test_types_without_positives_skipped(self):
        r = rec2d([[0, 0], [0, 0]], [[0, 0], [0, 0]], vis=np.array([True, False]), score=[1, 1])
        assert apk([r], 0.1) == 1.0
        r0 = rec2d([[0, 0]], [[0, 0]], vis=np.array([False]), score=[1])
        assert math.isnan(apk([r0], 0.1))

    def test_requires_scores(self):
        with pytest.raises(ValueError):
            apk([rec2d([[0, 0]], [[0, 0]])], 0.1)
        with pytest.raises(ValueError):
            average_precision([0.1], [True], 0)


class TestYaw:
    def test_identity(self):
        assert yaw_error([rec3d(cube(), cube())], CUBE_PAIRS) == 0.0

    def test_five_degree_rotation(self):
        assert yaw_error([rec3d(cube(5.0), cube())], CUBE_PAIRS) == pytest.approx(5.0, abs=0.01)

    def test_axis_wrap(self):
        assert yaw_error([rec3d(cube(178.0), cube())], CUBE_PAIRS) == pytest.approx(2.0, abs=1e-9)
        np.testing.assert_array_equal(wrap_axis(np.array([-90.0, 90.0, 95.0, -95.0])), [90.0, 90.0, -85.0, 85.0])

    def test_pairs_required(self):
        with pytest.raises(ValueError):
            object_yaw(cube(), [])

    def test_symmetric_noise_is_unbiased(self):
        rng = np.random.default_rng(4)
        gt = cube(20.0)
        truth = object_yaw(gt, CUBE_PAIRS)
        errs = []
        for _ in range(10 ** 4):
            noisy = gt.copy()
            for a, b in CUBE_PAIRS:
                e = rng.normal(scale=0.05, size=2)
                noisy[a, :2] += e
                noisy[b, :2] -= e
            errs.append(float(wrap_axis(object_yaw(noisy, CUBE_PAIRS) - truth)))
        assert abs(np.mean(errs)) < 0.2


class TestOracleAgreement:
    def test_random_record_sets(self):
        rng = np.random.default_rng(5)
        pairs = [(0, 1)]
        for trial in range(100):
            recs = random_records(rng, ties=trial % 2 == 0)
            alpha = float(rng.uniform(0.02, 0.5))
            assert abs(pck2d(recs, alpha) - pck2d_loop(recs, alpha)) <= 1e-9
            assert abs(pck3d(recs, alpha) - pck3d_loop(recs, alpha)) <= 1e-9
            assert abs(mean_recall(recs) - mean_recall_loop(recs)) <= 1e-9
            got, want = apk(recs, alpha), apk_loop(recs, alpha)
            assert (math.isnan(got) and math.isnan(want)) or abs(got - want) <= 1e-9
            if recs[0].gt_kp3d.shape[0] >= 2:
                assert abs(yaw_error(recs, pairs) - yaw_error_loop(recs, pairs)) <= 1e-9


def test_records_from_arrays_scales_to_pixels():
    recs = records_from_arrays(np.array([[0.5, 0.25]]), np.array([[0.5, 0.5]]), np.array([[True]]), 32)
    np.testing.assert_allclose(recs[0].pred_kp2d, [[16.0, 8.0]])
    assert recs[0].L == 32


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.booleans()), min_size=1, max_size=30))
def test_ap_matches_threshold_sweep(items):
    from oracles import ap_threshold_sweep
    scores = [s / 3 for s, _ in items]
    correct = [c for _, c in items]
    n_pos = max(sum(correct), 1)
    assert abs(average_precision(np.array(scores), np.array(correct), n_pos)
               - ap_threshold_sweep(scores, correct, n_pos)) <= 1e-12
