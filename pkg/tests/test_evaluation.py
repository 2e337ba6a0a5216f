import csv
import json
import warnings

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from panret import evaluation as ev
from panret import motion_io as mio
from panret.errors import EmptyDataset, NotEnoughClips, PairMismatch

from helpers import build_trainer, walking_clipsets


def test_mpjpe_uniform_offset_example():
    rng = np.random.default_rng(0)
    gt = rng.normal(size=(8, 5, 3))
    assert ev.mpjpe([gt + 0.1], [gt], heights=[2.0]) == pytest.approx(15.0)
    assert ev.mpjpe([gt], [gt], heights=[2.0]) == 0.0


def test_mpjpe_matches_explicit_triple_sum():
    rng = np.random.default_rng(1)
    a = [rng.normal(size=(6, 4, 3)) for _ in range(3)]
    b = [rng.normal(size=(6, 4, 3)) for _ in range(3)]
    h = [1.5, 2.0, 0.7]
    total = 0.0
    for x, y, hh in zip(a, b, h):
        s = 0.0
        for t in range(6):
            for j in range(4):
                s += sum((x[t, j, c] - y[t, j, c]) ** 2 for c in range(3))
        total += s / (6 * 4) / hh
    assert ev.mpjpe(a, b, heights=h) == pytest.approx(1e3 * total / 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_mpjpe_symmetry_and_height_scaling(seed, s):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 4, 3, 3))
    e = ev.mpjpe([a], [b], heights=[1.3])
    assert ev.mpjpe([b], [a], heights=[1.3]) == pytest.approx(e)
    assert ev.mpjpe([a], [b], heights=[1.3 * s]) == pytest.approx(e / s)


def test_mpjpe_on_clips_and_mismatch():
    cs = walking_clipsets(1, 32)["A"]
    clips = cs.clips()
    assert ev.mpjpe(clips, clips) == 0.0
    with pytest.raises(PairMismatch):
        ev.mpjpe(clips, [])
    with pytest.raises(PairMismatch):
        ev.mpjpe([np.zeros((4, 2, 3))], [np.zeros((5, 2, 3))], heights=[1.0])


def _foot_track(static, T=30, J=2):
    """Feet move 1 unit per frame except that displacement is 0 on ``static`` frames."""
    step = np.ones(T)
    step[0] = 0
    step[list(static)] = 0
    x = np.cumsum(step)
    p = np.zeros((T, J, 3))
    p[..., 0] = x[:, None]
    return p


def test_contact_fixture_six_of_eleven():
    gt = _foot_track(range(10, 21))
    tar = _foot_track(range(10, 16))
    r = ev.contact_recall(gt, tar, [1e-3], gt_feet=[0, 1], tar_feet=[0, 1])
    assert r[0] == 6 / 11


def test_contact_recall_trivial_cases():
    gt = _foot_track(range(10, 21))
    r = ev.contact_recall(gt, gt, gt_feet=[0, 1], tar_feet=[0, 1])
    assert np.all(r == 1.0)
    moving = _foot_track([])
    moving[..., 0] *= 5
    assert np.all(ev.contact_recall(gt, moving, gt_feet=[0, 1], tar_feet=[0, 1]) == 0)
    # no ground-truth contacts: undefined points, no crash
    assert np.all(np.isnan(ev.contact_recall(moving, gt, [1e-3], gt_feet=[0, 1], tar_feet=[0, 1])))
    with pytest.raises(PairMismatch):
        ev.contact_recall(gt, gt, gt_feet=[0], tar_feet=[0, 1])


@settings(max_examples=40, deadline=None)
@given(st.sets(st.integers(1, 29), max_size=20), st.sets(st.integers(1, 29), max_size=20),
       st.integers(1, 29))
def test_contact_recall_monotone_in_target_contacts(gt_static, tar_static, extra):
    if not gt_static:
        return
    gt = _foot_track(gt_static)
    base = ev.contact_recall(gt, _foot_track(tar_static), [1e-3], [0, 1], [0, 1])[0]
    more = ev.contact_recall(gt, _foot_track(tar_static | {extra}), [1e-3], [0, 1], [0, 1])[0]
    assert more >= base


def test_recall_curve_on_clips():
    clips = walking_clipsets(1, 64)["A"].clips()
    curve = ev.recall_curve([(c, c) for c in clips])
    assert curve.shape == ev.EPSILONS.shape
    defined = ~np.isnan(curve)
    assert defined.any() and np.all(curve[defined] == 1.0)


def test_frechet_unit_mean_shift():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(300, 4))
    b = a + np.array([1.0, 0, 0, 0])
    assert ev.frechet_distance(a, b) == pytest.approx(1.0, abs=1e-8)
    assert ev.frechet_distance(a, a) < 1e-8


def test_frechet_matches_scipy_sqrtm():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(200, 5)) @ rng.normal(size=(5, 5))
    b = rng.normal(size=(200, 5)) @ rng.normal(size=(5, 5)) + 0.3
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    ref = (np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(ca + cb)
           - 2 * np.trace(scipy.linalg.sqrtm(ca @ cb).real))
    assert ev.frechet_distance(a, b) == pytest.approx(ref, rel=1e-8)


def test_frechet_singular_covariance_warns():
    a = np.zeros((3, 4))
    with pytest.warns(RuntimeWarning):
        assert ev.frechet_distance(a, a) >= 0


def test_fid_model_training_and_self_distance():
    cs = walking_clipsets(2, 64)["A"]
    rng = np.random.default_rng(0)
    base = mio.apply_norm(cs.motions, mio.compute_norm_stats(cs.motions))
    x = np.concatenate([base + rng.normal(scale=0.05, size=base.shape) for _ in range(40)])
    train, hold = x[:60], x[60:]
    model, hist = ev.train_fid_model(train, epochs=8, batch_size=16, width=32, holdout=hold)
    assert hist[-1][2] < hist[0][2]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        assert ev.fid(hold, hold, model) < 1e-4
    assert ev.fid_features(model, hold).shape == (len(hold), 32)
    with pytest.raises(EmptyDataset):
        ev.train_fid_model(np.zeros((0, 64, 5, 4)))


def test_velocity_stratified_sampling():
    speeds = np.array([0.1] * 90 + [1.0] * 10)
    idx = ev.sample_by_velocity(speeds, 20, rng=np.random.default_rng(0))
    fast = np.sum(speeds[idx] == 1.0)
    assert len(idx) == 20 and fast == 10 and len(set(idx.tolist())) == 20
    idx = ev.sample_by_velocity(speeds, 400, replace=True, rng=np.random.default_rng(1))
    assert abs(np.mean(speeds[idx] == 1.0) - 0.5) <= 0.05
    with pytest.raises(NotEnoughClips):
        ev.sample_by_velocity(speeds, 101)
    with pytest.raises(EmptyDataset):
        ev.sample_by_velocity(np.array([]), 1)
    one = ev.sample_by_velocity(np.full(10, 0.3), 5, rng=np.random.default_rng(2))
    assert len(set(one.tolist())) == 5


def test_clip_speeds_from_motions():
    m = np.zeros((2, 3, 2, 4))
    m[0, :, -1, 2] = 0.5
    m[1, :, -1, 0] = 3.0
    m[1, :, -1, 1] = 4.0
    np.testing.assert_allclose(ev.clip_speeds(m), [0.5, 5.0])


def test_attention_export(tmp_path):
    sets = walking_clipsets(1, 32)
    t = build_trainer(sets)
    clip = sets["A"].clip(0)
    heat = ev.export_attention(t.model, "A", clip, tmp_path)
    s = t.model.structures["A"]
    N, J = s.partition.N, s.num_joints
    assert heat.token_rows.shape == (32, N, J + 1)
    np.testing.assert_allclose(heat.token_rows.sum(-1) + heat.token_self, 1.0, atol=1e-6)
    for k in range(N):
        outside = np.setdiff1d(np.arange(J + 1), s.partition.parts[k])
        assert np.all(heat.token_rows[:, k, outside] == 0)
    assert heat.per_joint.shape == (32, J)
    with open(tmp_path / "attention.csv") as f:
        rows = list(csv.reader(f))
    assert len(rows) == 1 + 32 * N
    for r in rows[1:]:
        assert sum(float(v) for v in r[2:]) == pytest.approx(1.0, abs=1e-6)
    assert (tmp_path / "attention.png").stat().st_size > 0


def test_per_joint_overlays_root_velocity():
    rows = np.zeros((1, 2, 4))
    rows[0, 0] = [0.1, 0.2, 0.0, 0.7]
    rows[0, 1] = [0.0, 0.5, 0.3, 0.2]
    heat = ev.AttentionHeatmap(rows, np.zeros((1, 2)), ["a", "b"], ["r", "x", "y"])
    np.testing.assert_allclose(heat.per_joint, [[0.7, 0.5, 0.3]])


def test_metric_report_files(tmp_path):
    rep = ev.MetricReport(pairs=[{"source": "A", "target": "B", "clips": 2, "mpjpe": 3.0},
                                 {"source": "B", "target": "A", "clips": 1, "mpjpe": 6.0}],
                          recall=np.linspace(0, 1, 20), fid=1.5)
    assert rep.overall_mpjpe() == pytest.approx(4.0)
    written = rep.write(tmp_path)
    assert set(written) == {"metrics.csv", "recall.csv", "recall.png"}
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["fid"] == 1.5 and summary["mpjpe"] == pytest.approx(4.0)
    assert len((tmp_path / "recall.csv").read_text().strip().splitlines()) == 21
