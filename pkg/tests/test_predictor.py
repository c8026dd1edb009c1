import json
import math

import numpy as np
import pytest

from qoetune.predictor import (ExitNet, ExitNetClassifier, FeatureSpec, HybridExitPredictor, OSTables,
                               SegmentRecord, StateBatch, build_features, cross_entropy, gradient_check, predict,
                               reweight_prior, train_exit_net)
from qoetune.predictor.train import TrainingError, undersample

SPEC = FeatureSpec(bitrate_scale=1000.0, throughput_scale=1000.0, stall_scale=1.0, gap_scale=1.0, gap_cap=1e9)


def _history(n, stall_at=(), exit_at=(), seg=2.0):
    return [SegmentRecord(100.0 * (i + 1), 10.0 * (i + 1), 0.5 * (k + 1) if i in stall_at else 0.0,
                          exited=i in exit_at, session_start=i == 0, segment_length_s=seg)
            for k, i in enumerate(range(n))]


def test_features_new_user_padding():
    f = build_features(_history(1), SPEC)
    assert f.shape == (5, 8)
    assert np.count_nonzero(f) == 2
    assert f[0, -1] == 0.1 and f[1, -1] == 0.01


def test_features_twenty_segments_three_stalls():
    h = [SegmentRecord(100.0 * (i + 1), 10.0 * (i + 1), {3: 1.0, 9: 2.0, 15: 0.5}.get(i, 0.0),
                       segment_length_s=2.0) for i in range(20)]
    f = build_features(h, SPEC)
    np.testing.assert_allclose(f[0], [100.0 * k / 1000 for k in range(13, 21)])
    np.testing.assert_allclose(f[1], [10.0 * k / 1000 for k in range(13, 21)])
    np.testing.assert_allclose(f[2], [0, 0, 0, 0, 0, 1.0, 2.0, 0.5])
    # clock before segment k: 2k plus earlier stalls; first gap is the cap
    np.testing.assert_allclose(f[3, -3:], [1e9, 18.0 - 6.0 + 1.0, 30.0 + 3.0 - 19.0])


def test_features_sliding_window():
    h = [SegmentRecord(500.0, 500.0, float(i + 1), segment_length_s=1.0) for i in range(9)]
    f = build_features(h, SPEC)
    np.testing.assert_allclose(f[2], np.arange(2, 10, dtype=float))


def test_features_exit_interval():
    h = [SegmentRecord(500.0, 500.0, 1.0, exited=True, session_start=True, segment_length_s=2.0),
         SegmentRecord(500.0, 500.0, 0.0, session_start=True, segment_length_s=2.0),
         SegmentRecord(500.0, 500.0, 2.0, segment_length_s=2.0)]
    f = build_features(h, SPEC)
    # exit was stall-triggered at clock 0; second stall is at clock 3 + 2 = 5
    assert f[4, -1] == pytest.approx(5.0)


def test_state_batch_matches_direct_construction(rng):
    spec = FeatureSpec()
    n = 6
    state = StateBatch(n, spec)
    hist = [[] for _ in range(n)]
    for k in range(60):
        rows = np.nonzero(rng.random(n) < 0.7)[0]
        start = rng.random(rows.size) < 0.1
        if start.any():
            state.new_session(rows[start])
        br, tp = rng.uniform(300, 3000, rows.size), rng.uniform(100, 5000, rows.size)
        stall = np.where(rng.random(rows.size) < 0.3, rng.uniform(0.1, 3, rows.size), 0.0)
        state.push_segment(rows, rng.integers(0, 4, rows.size), br, tp, stall, 2.0)
        ex = rng.random(rows.size) < 0.05
        if ex.any():
            state.mark_exit(rows[ex])
        for j, r in enumerate(rows):
            hist[r].append(SegmentRecord(br[j], tp[j], stall[j], bool(ex[j]), bool(start[j]), 2.0))
    feats = state.features()
    for r in range(n):
        np.testing.assert_allclose(feats[r], build_features(hist[r], spec), atol=1e-12)


def test_softmax_sums_to_one(rng):
    for seed in range(5):
        net = ExitNet(channels=8, hidden=8, seed=seed)
        p = net.predict_proba(rng.normal(size=(20, 5, 8)) * 3)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_cross_entropy_hand_value():
    assert cross_entropy([0, 1], [0.5, 0.5]) == pytest.approx(math.log(2))
    assert cross_entropy([0, 1], [0.5, 0.5]) == pytest.approx(0.693, abs=5e-4)


def test_gradient_check_and_negative_control(rng):
    net = ExitNet(channels=8, hidden=8, seed=1)
    X = rng.normal(size=(4, 5, 8))
    y = np.array([0, 1, 1, 0])
    assert gradient_check(net, X, y) < 1e-4
    assert gradient_check(net, np.zeros((1, 5, 8)), [1]) < 1e-4
    _, g = net.loss_and_grads(X, y)
    bad = {k: v * 1.5 + 0.01 for k, v in g.items()}
    assert gradient_check(net, X, y, grads=bad) > 1e-2


def _separable(rng, n=400):
    X = rng.normal(0, 0.3, size=(n, 5, 8))
    y = (rng.random(n) < 0.5).astype(int)
    X[:, 2, -1] += np.where(y == 1, 1.5, -1.5)
    return X, y


def test_separable_accuracy(rng):
    X, y = _separable(rng)
    clf, metrics = train_exit_net(X, y, lr=0.05, epochs=30, seed=0)
    assert metrics["accuracy"] >= 0.99
    assert clf.score(X, y) >= 0.99


def test_undersampling_balances(rng):
    y = np.r_[np.zeros(800, int), np.ones(200, int)]
    idx = undersample(y, rng)
    assert np.bincount(y[idx]).tolist() == [200, 200]
    clf = ExitNetClassifier(epochs=1, channels=4, hidden=4).fit(rng.normal(size=(1000, 5, 8)), y)
    assert clf.train_class_counts_.tolist() == [200, 200]
    assert clf.prior_odds_ == pytest.approx(0.25)


def test_training_errors(rng, monkeypatch):
    with pytest.raises(TrainingError):
        ExitNetClassifier(epochs=1).fit(rng.normal(size=(10, 5, 8)), np.zeros(10, int))
    with pytest.raises(ValueError):
        ExitNetClassifier(epochs=1).fit(rng.normal(size=(10, 4, 8)), np.r_[np.zeros(5, int), np.ones(5, int)])
    X, y = _separable(rng, 64)
    with pytest.raises(ValueError, match="non-finite"):
        ExitNetClassifier(epochs=1).fit(np.where(X > 2, np.nan, X), y)
    monkeypatch.setattr(ExitNet, "loss_and_grads", lambda self, X, y: (float("nan"), {}))
    with pytest.raises(TrainingError, match="non-finite"):
        ExitNetClassifier(epochs=1).fit(X, y)


def test_training_deterministic(rng):
    X, y = _separable(rng, 200)
    a = ExitNetClassifier(epochs=2, channels=4, hidden=4, seed=3).fit(X, y)
    b = ExitNetClassifier(epochs=2, channels=4, hidden=4, seed=3).fit(X, y)
    np.testing.assert_array_equal(a.predict_proba(X), b.predict_proba(X))


def test_predict_case_split():
    os_ = OSTables.from_values([0.004, 0.01, 0.01], switch_value=0.02)
    assert predict(None, os_, None, 0, 0, 0.0) == pytest.approx(0.004)
    assert predict(None, os_, None, 1, 1, 1.5, nn_prob=0.30) == pytest.approx(0.31)
    assert predict(None, os_, None, 1, 1, 1.5, nn_prob=0.999) == 1.0
    assert predict(None, os_, None, 1, 0, 0.0) == pytest.approx(0.02)


def test_reweight_prior():
    assert reweight_prior(0.5, 0.25) == pytest.approx(0.2)
    assert reweight_prior(0.3, 1.0) == 0.3
    p = np.linspace(0, 1, 11)
    np.testing.assert_allclose(reweight_prior(reweight_prior(p, 0.1), 10.0), p, atol=1e-12)


def test_os_tables_recover_quality_deltas(rng):
    # deltas on the 1e-3 scale; 2M rows per level keep the smallest within 20%
    base, deltas = 0.005, np.array([0.003, 0.0015, 0.0005, 0.0]) * 2
    n = 8_000_000
    level = rng.integers(0, 4, n)
    exited = rng.random(n) < base + deltas[level]
    tables = OSTables(4).fit(level, level, np.zeros(n), exited)
    est = tables.quality_table_ - tables.quality_table_[-1]
    np.testing.assert_allclose(est[:3], deltas[:3], rtol=0.2)
    assert np.all(np.diff(tables.quality_table_) < 0)
    # no switches in the corpus: every switch cell is the fallback
    np.testing.assert_array_equal(tables.switch_table_, tables.fallback_)


def test_os_tables_sparse_cell_fallback():
    t = OSTables(2, min_count=5).fit([0, 0, 1], [0, 0, 1], [0, 0, 0], [1, 0, 0])
    assert t.quality_table_.tolist() == [t.fallback_] * 2
    with pytest.raises(ValueError):
        OSTables(2).fit([0], [0], [1.0], [0])


def test_hybrid_batch_matches_scalar(rng, tmp_path):
    net = ExitNet(channels=4, hidden=4, seed=2)
    os_ = OSTables.from_values([0.004, 0.003, 0.002], switch_value=0.02)
    pred = HybridExitPredictor(net, os_, FeatureSpec(), prior_odds=0.3)
    state = StateBatch(5)
    for _ in range(4):
        state.push_segment(np.arange(5), rng.integers(0, 3, 5), 1000.0, 2000.0,
                           np.where(rng.random(5) < 0.5, 1.0, 0.0), 2.0)
    got = pred.predict_state(state)
    feats = state.features()
    want = [predict(net, os_, feats[i], state.level[i], state.prev_level[i], state.cur_stall[i], prior_odds=0.3)
            for i in range(5)]
    np.testing.assert_allclose(got, want, atol=1e-12)
    pred.save(tmp_path / "p.json")
    back = HybridExitPredictor.load(tmp_path / "p.json")
    np.testing.assert_array_equal(back.predict_state(state), got)
    assert json.loads((tmp_path / "p.json").read_text())["net"]["version"] == 1


def test_net_artifact_version_check(tmp_path):
    d = ExitNet(channels=2, hidden=2).to_dict()
    d["version"] = 99
    with pytest.raises(ValueError, match="unsupported"):
        ExitNet.from_dict(d)
