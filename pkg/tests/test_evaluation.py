import json
import math

import numpy as np
import pytest

from scenediff.errors import BinError, EmptyOverlap, NoHistory, NoMap, ParseError, ShapeError
from scenediff.evaluation import (
    BinSpec,
    ade,
    collision_rate,
    constant_velocity_baseline,
    evaluate_predictions,
    footprint_radius,
    min_ade,
    nll_histogram,
    offroad_rate,
    read_rollouts,
    top_modality_ade,
    write_report,
    write_rollouts,
)
from scenediff.scene import MapPolyline as Polyline


def test_ade_hand_cases():
    gt = np.array([[0.0, 1.0], [1.0, 1.0]])
    assert ade(gt, gt) == 0.0
    assert ade(gt + [1.0, 0.0], gt) == pytest.approx(1.0, abs=1e-12)
    assert ade(np.array([[0.0, 0.0], [1.0, 0.0]]), gt) == pytest.approx(1.0, abs=1e-12)


def test_ade_mask_and_errors():
    p = np.array([[0.0, 0.0], [10.0, 0.0]])
    g = np.zeros((2, 2))
    assert ade(p, g, [True, False]) == 0.0
    with pytest.raises(EmptyOverlap):
        ade(p, g, [False, False])
    with pytest.raises(ShapeError):
        ade(p, g[:1])


def test_min_ade_cases():
    gt = np.zeros((3, 2))
    modes = np.stack([np.full((3, 2), [2.0, 0.0]), np.full((3, 2), [0.5, 0.0]), np.full((3, 2), [1.0, 0.0])])
    assert min_ade(modes, gt) == pytest.approx(0.5)
    assert min_ade(modes[:1], gt) == pytest.approx(ade(modes[0], gt))
    assert min_ade(np.concatenate([modes, modes[1:2]]), gt) == pytest.approx(0.5)
    # top modality picks the most probable; lowest index on ties
    assert top_modality_ade(modes, [0.2, 0.2, 0.6], gt) == pytest.approx(1.0)
    assert top_modality_ade(modes, [0.4, 0.4, 0.2], gt) == pytest.approx(2.0)


def test_nll_delta_distribution():
    samples = np.zeros((32, 1, 2))
    assert nll_histogram(samples, np.zeros((1, 2))) == pytest.approx(0.0, abs=1e-5)


def test_nll_uniform_over_100_bins():
    # one sample at each centre of a 10x10 grid of 1 m bins
    g = np.stack(np.meshgrid(np.arange(10.0), np.arange(10.0)), -1).reshape(-1, 1, 2)
    val = nll_histogram(g, np.array([[4.0, 5.0]]))
    assert val == pytest.approx(math.log(100), abs=1e-4)


def test_nll_outside_support_hits_floor():
    samples = np.zeros((32, 1, 2))
    val = nll_histogram(samples, np.array([[5.0, 0.0]]))
    assert val == pytest.approx(-math.log(1e-6), abs=1e-6)
    assert val == pytest.approx(13.8155, abs=1e-4)


def test_nll_permutation_invariant_and_bin_errors():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(32, 4, 2)) * 2
    obs = rng.normal(size=(4, 2))
    assert nll_histogram(s, obs) == nll_histogram(s[rng.permutation(32)], obs)
    with pytest.raises(BinError):
        nll_histogram(s, obs, bins=BinSpec(size=0.0))
    with pytest.raises(BinError):
        nll_histogram(s[:0], obs)
    with pytest.raises(BinError):
        nll_histogram(s * 1e4, obs, bins=BinSpec(size=0.01))


def test_collision_boundaries():
    r = footprint_radius(3.0, 4.0)
    assert r == 2.5
    far = np.array([[[0.0, 0.0]] * 3, [[100.0, 0.0]] * 3])
    assert collision_rate(far, [r, r]) == 0.0
    same = np.zeros((2, 3, 2))
    assert collision_rate(same, [r, r]) == 1.0
    touching = np.array([[[0.0, 0.0]], [[5.0, 0.0]]])
    assert collision_rate(touching, [r, r]) == 0.0
    assert collision_rate(touching - [[[0.0, 0.0]], [[1e-9, 0.0]]], [r, r]) == 1.0


def test_collision_symmetric_under_relabeling():
    rng = np.random.default_rng(1)
    pos = rng.uniform(0, 6, size=(5, 4, 2))
    radii = rng.uniform(0.5, 2, size=5)
    perm = rng.permutation(5)
    assert collision_rate(pos, radii) == collision_rate(pos[perm], radii[perm])


def test_offroad_boundaries():
    road = [Polyline("lane_center", [(0.0, 0.0), (10.0, 0.0)])]
    assert offroad_rate(np.array([[5.0, 0.0]]), road) == 0.0
    assert offroad_rate(np.array([[5.0, 100.0]]), road) == 1.0
    assert offroad_rate(np.array([[5.0, 3.0]]), road) == 0.0
    with pytest.raises(NoMap):
        offroad_rate(np.array([[0.0, 0.0]]), [Polyline("crosswalk", [(0.0, 0.0), (1.0, 0.0)])])


def test_constant_velocity_baseline():
    still = np.array([[1.0, 2.0, 0.3, 0.0]] * 5)
    out = constant_velocity_baseline(still, 4, 0.1)
    np.testing.assert_allclose(out[:, :2], [[1.0, 2.0]] * 4)
    moving = np.array([[0.0, 0.0, 0.0, 2.0]] * 3)
    out = constant_velocity_baseline(moving, 3, 0.1)
    np.testing.assert_allclose(out[:, 0], [0.2, 0.4, 0.6], atol=1e-12)
    with pytest.raises(NoHistory):
        constant_velocity_baseline(moving, 3, 0.1, valid=[False] * 3)


def _perfect_predictions(scenarios):
    preds = []
    for s in scenarios:
        gts = np.stack([a.states[s.T_h :] for a in s.predicted_agents])
        traj = np.stack([gts, gts + [1.0, 0.0, 0.0, 0.0]], axis=1)
        preds.append((traj, np.tile([0.3, 0.7], (len(gts), 1))))
    return preds


def test_report_invariants_and_translation(small_corpus, tmp_path):
    scen = small_corpus[:4]
    preds = _perfect_predictions(scen)
    rep = evaluate_predictions(scen, preds)
    for row in rep.rows + [rep.aggregate]:
        assert row["min_ade"] <= row["ade"] + 1e-12
        assert 0.0 <= row["collision_rate"] <= 1.0
        if row["offroad_rate"] is not None:
            assert 0.0 <= row["offroad_rate"] <= 1.0
    assert rep.aggregate["min_ade"] == pytest.approx(0.0, abs=1e-12)
    assert rep.aggregate["ade"] == pytest.approx(1.0, abs=1e-12)

    shift = np.array([123.0, -45.0])
    moved = [s.shifted(*shift) for s in scen]
    moved_preds = [(t + np.r_[shift, 0.0, 0.0], p) for t, p in preds]
    rep2 = evaluate_predictions(moved, moved_preds)
    for k in ("ade", "min_ade", "collision_rate", "offroad_rate", "baseline_ade"):
        a, b = rep.aggregate[k], rep2.aggregate[k]
        assert (a is None and b is None) or a == pytest.approx(b, abs=1e-9)

    write_report(rep, tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["aggregate"]["scenario_id"] == "ALL"
    lines = (tmp_path / "report.csv").read_text().strip().splitlines()
    assert len(lines) == len(scen) + 2


def test_rollout_roundtrip(small_corpus, tmp_path):
    scen = small_corpus[:2]
    preds = _perfect_predictions(scen)
    path = tmp_path / "r.ndjson"
    write_rollouts(path, scen, preds)
    back = read_rollouts(path)
    assert len(back) > 0
    path.write_text(path.read_text() + "{broken\n")
    with pytest.raises(ParseError) as err:
        read_rollouts(path)
    assert err.value.lineno is not None
