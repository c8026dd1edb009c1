"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the pytest terminal summary under
"acceptance criteria". The study-scale criteria (1 to 4) run full
experiments and dominate the runtime of the whole test session.
"""

import math
import time

import numpy as np
import pytest

from qoetune.abr import HYB, RobustMPC
from qoetune.bayesopt import GPSurrogate, OBOState, expected_improvement, minimize, run_invocation
from qoetune.core import (BandwidthModel, HYBParams, MPCParams, QualityLevel, VideoManifest, default_manifest,
                          synthetic_traces)
from qoetune.harness import ExperimentConfig, correlation_report, default_sweep, heatmap_report, run_experiment
from qoetune.harness.logs import log_from_result, replay_features, train_predictor
from qoetune.harness.reports import best_fixed
from qoetune.harness.state import PersistedUserState, StallEvent, persist_state, restore_state
from qoetune.montecarlo import MCConfig, UserState, evaluate_parameters, prune_preplay
from qoetune.player import PlayerEnv, step, step_arrays
from qoetune.predictor import ConstantPredictor, ExitNet, FeatureSpec, gradient_check
from qoetune.users import grid, sample_hazard_users, synthesize_logs

from oracles import gp_posterior, truncated_geometric

SEEDS = [0, 1, 2, 3, 4]
TRACES = {"n": 20, "seed": 1}

# rule-grid study: the MPC lookahead and tuner budget are sized for one CPU core
STUDY = {"abr": "mpc", "abr_options": {"horizon": 3}, "users": {"kind": "rule_grid"},
         "traces": {"synthetic": TRACES}, "sessions_per_day": 5, "days": 1, "seeds": SEEDS,
         "mc": {"samples": 30}, "obo": {"trials": 6, "eta": 2}}
LINGXI_FIXED_CANDIDATES = [{"stall_weight": w, "switch_weight": 1.0} for w in (1.0, 4.0, 8.0, 12.0, 16.0, 20.0)]
STUDY_BUDGET_S = 15 * 60


# ---------------------------------------------------------------------------
# shared artifacts
# ---------------------------------------------------------------------------
@pytest.fixture(scope="module")
def rule_study(tmp_path_factory):
    """Rule-grid logs, a predictor trained on them, and the three study modes."""
    root = tmp_path_factory.mktemp("rule_study")
    t0 = time.perf_counter()
    m = default_manifest()
    traces = synthetic_traces(**TRACES)
    log = log_from_result(synthesize_logs(grid(), traces, m, RobustMPC(horizon=3), seed=100, sessions_per_day=10))
    pred, _ = train_predictor(log, m, FeatureSpec.for_setup(m, traces), epochs=20, seed=100)
    pred.save(root / "predictor.json")
    runs = {"fixed": {"mode": "fixed", "fixed_params": default_sweep(MPCParams, 3)},
            "lingxi_fixed": {"mode": "lingxi_fixed", "candidates": LINGXI_FIXED_CANDIDATES},
            "lingxi_bayes": {"mode": "lingxi_bayes"}}
    out = {}
    for name, extra in runs.items():
        cfg = ExperimentConfig.from_dict({**STUDY, **extra, "predictor": str(root / "predictor.json")})
        out[name] = run_experiment(cfg, root / name)
    out["runtime_s"] = time.perf_counter() - t0
    return out


def _hazard_logs(seed: int):
    """Long per-user histories: 200 hazard users on 5 traces, 40 sessions each."""
    m = default_manifest()
    traces = synthetic_traces(**TRACES)[:5]
    users = sample_hazard_users(200, seed, n_levels=m.n_levels)
    log = log_from_result(synthesize_logs(users, traces, m, HYB(), seed=seed, sessions_per_day=40))
    spec = FeatureSpec.for_setup(m, traces)
    return m, spec, log, replay_features(log, m.segment_length_s, spec)


@pytest.fixture(scope="module")
def ablations(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablations")
    out = []
    for seed in SEEDS:
        m, spec, log, rp = _hazard_logs(seed)
        row = {}
        for rows, balanced in (("stall", True), ("stall", False), ("all", True)):
            pred, metrics = train_predictor(log, m, spec, rows=rows, epochs=20, seed=seed, balanced=balanced,
                                            replay=rp)
            row[(rows, balanced)] = metrics
            if seed == 0 and rows == "stall" and balanced:
                pred.save(root / "predictor.json")
        out.append(row)
    return {"metrics": out, "predictor": root / "predictor.json"}


# ---------------------------------------------------------------------------
# 1, 2: rule-grid simulation study
# ---------------------------------------------------------------------------
def test_criterion_1_study_direction(rule_study, report_criterion):
    fixed_key, fixed = best_fixed(rule_study["fixed"]["summary"])
    lf = rule_study["lingxi_fixed"]["summary"]["lingxi_fixed"]["completion"]["mean"]
    lb = rule_study["lingxi_bayes"]["summary"]["lingxi_bayes"]["completion"]["mean"]
    rel = lb / fixed - 1.0
    runtime = rule_study["runtime_s"]
    ok = lb > lf > fixed and rel >= 0.10 and runtime <= STUDY_BUDGET_S
    detail = (f"completion lingxi_bayes={lb:.4f} lingxi_fixed={lf:.4f} best_fixed={fixed:.4f} ({fixed_key}); "
              f"bayes vs best fixed {rel:+.1%} (need >= +10%); runtime {runtime:.0f}s (budget {STUDY_BUDGET_S}s)")
    assert report_criterion(1, ok, detail), detail


def test_criterion_2_heatmap_trend(rule_study, report_criterion):
    rep = heatmap_report(rule_study["lingxi_bayes"]["paths"]["results"])
    rho, p = rep["spearman_rho"], rep["spearman_p"]
    ok = rho is not None and rho < 0 and p < 0.05
    detail = f"Spearman(threshold sum, mean stall_weight) rho={rho} p={p} (need rho < 0, p < 0.05)"
    assert report_criterion(2, ok, detail), detail


# ---------------------------------------------------------------------------
# 3: predictor ablations
# ---------------------------------------------------------------------------
def test_criterion_3_predictor_ablations(ablations, report_criterion):
    per_seed = ablations["metrics"]
    keys = ("accuracy", "precision", "recall", "f1")
    stall = {k: float(np.mean([s[("stall", True)][k] for s in per_seed])) for k in keys}
    all_prec = float(np.mean([s[("all", True)]["precision"] for s in per_seed]))
    rec_bal = [s[("stall", True)]["recall"] for s in per_seed]
    rec_unb = [s[("stall", False)]["recall"] for s in per_seed]
    ok_stall = all(v >= 0.90 for v in stall.values())
    ok_ratio = all_prec <= 0.5 * stall["precision"]
    ok_recall = all(b >= u for b, u in zip(rec_bal, rec_unb))
    detail = (f"stall-only {', '.join(f'{k}={v:.3f}' for k, v in stall.items())} (each >= 0.90: {ok_stall}); "
              f"all-rows precision {all_prec:.3f} <= 0.5 x {stall['precision']:.3f}: {ok_ratio}; "
              f"recall balanced {np.round(rec_bal, 3).tolist()} >= unbalanced {np.round(rec_unb, 3).tolist()}: "
              f"{ok_recall}")
    assert report_criterion(3, ok_stall and ok_ratio and ok_recall, detail), detail


# ---------------------------------------------------------------------------
# 4: stall sensitivity vs. selected beta
# ---------------------------------------------------------------------------
def test_criterion_4_beta_correlation(ablations, tmp_path, report_criterion):
    cfg = ExperimentConfig.from_dict({
        "abr": "hyb", "mode": "lingxi_bayes", "users": {"kind": "hazard", "n": 100, "seed": 5},
        "traces": {"synthetic": {"n": 20, "seed": 21}}, "pairing": "round_robin", "sessions_per_day": 20,
        "days": 3, "seeds": [0], "predictor": str(ablations["predictor"]), "mc": {"samples": 100}})
    out = run_experiment(cfg, tmp_path / "hazard")
    rep = correlation_report(out["paths"]["days"])
    r = rep["pooled_r"]
    ok = r is not None and r < 0 and abs(r) >= 0.1
    per_day = {d: (v["n"], None if v["r"] is None else round(v["r"], 3)) for d, v in rep["per_day"].items()}
    detail = f"pooled r={r} over {rep['n']} user-days, per day (n, r) {per_day} (need r < 0, |r| >= 0.1)"
    assert report_criterion(4, ok, detail), detail


# ---------------------------------------------------------------------------
# 5: Monte Carlo estimator
# ---------------------------------------------------------------------------
M50 = VideoManifest.from_bitrates([300, 750, 1200, 1850, 2850], 2.0, 50)


def _mc(p, samples, seed):
    cfg = MCConfig(samples=samples, seed=seed)
    return evaluate_parameters(HYBParams(0.5), BandwidthModel(2000.0, 500.0), UserState.fresh(), PlayerEnv(),
                               ConstantPredictor(p), HYB(), M50, cfg)


def test_criterion_5_monte_carlo(report_criterion):
    _, w, r, var = truncated_geometric(0.1, 50)
    se = math.sqrt(var / 10_000) / w
    est = _mc(0.1, 10_000, 7)
    ok_mean = abs(est - r) < 3 * se
    scaled = [np.var([_mc(0.1, m, 1000 * m + s) for s in range(60)], ddof=1) * m for m in (100, 400, 1600)]
    ok_var = max(scaled) / min(scaled) <= 2.0
    detail = (f"estimate {est:.5f} vs analytic {r:.5f}, |diff|={abs(est - r):.5f} < 3 SE={3 * se:.5f}: {ok_mean}; "
              f"M x variance at M=100/400/1600 {[f'{v:.2e}' for v in scaled]} within 2x: {ok_var}")
    assert report_criterion(5, ok_mean and ok_var, detail), detail


# ---------------------------------------------------------------------------
# 6: buffer dynamics
# ---------------------------------------------------------------------------
def test_criterion_6_buffer_dynamics(report_criterion):
    rng = np.random.default_rng(2024)
    n = 10_000
    bmax = rng.uniform(1, 30, n)
    buf = rng.uniform(0, 1, n) * bmax
    seg = rng.uniform(0.1, 1, n) * bmax
    size = rng.uniform(0.1, 20, n)
    c = rng.uniform(50, 20000, n)
    _, stall, wait, nb = step_arrays(buf, size, c, seg, bmax, 0.0)
    ok_bounds = bool(np.all((nb >= 0) & (nb <= bmax)))
    ok_excl = not np.any((stall > 0) & (wait > 0))
    _, stall_hi, _, nb_hi = step_arrays(buf, size, c * rng.uniform(1, 3, n), seg, bmax, 0.0)
    ok_mono = bool(np.all(stall_hi <= stall) and np.all(nb_hi >= nb))
    hand = []
    for b, dl, want in ((4.0, 2.0, (0.0, 0.0, 3.0)), (1.0, 3.0, (2.0, 0.0, 1.0)), (10.0, 0.5, (0.0, 0.5, 10.0))):
        m = VideoManifest((QualityLevel(1000, 1, dl),), 1.0)
        env, o = step(PlayerEnv(buffer=b), m, 0, 1000.0)
        hand.append((o.stall_time, o.wait_time, env.buffer) == want)
    ok = ok_bounds and ok_excl and ok_mono and all(hand)
    detail = (f"10000 cases: buffer in [0, Bmax] {ok_bounds}, stall/wait exclusive {ok_excl}, "
              f"monotone in bandwidth {ok_mono}; hand examples {hand}")
    assert report_criterion(6, ok, detail), detail


# ---------------------------------------------------------------------------
# 7: GP and expected improvement
# ---------------------------------------------------------------------------
def _bumpy(seed):
    r = np.random.default_rng(seed)
    c, a, w = r.uniform(0.1, 0.9), r.uniform(0.2, 1.0), r.uniform(0.05, 0.3)
    k, ph, amp = r.uniform(1, 4), r.uniform(0, 2 * np.pi), r.uniform(0.0, 0.1)
    return lambda x: 0.5 - a * np.exp(-0.5 * ((x - c) / w) ** 2) + amp * np.sin(2 * np.pi * k * x + ph)


def test_criterion_7_gp_and_obo(report_criterion):
    rng = np.random.default_rng(7)
    err = 0.0
    for n in (1, 2, 3):
        for _ in range(20):
            X, y, Xq = rng.random((n, 2)), rng.normal(size=n), rng.random((7, 2))
            ell, s2, noise, mean = rng.uniform(0.1, 1), rng.uniform(0.1, 2), rng.uniform(1e-4, 1e-2), rng.normal()
            gp = GPSurrogate(length_scale=ell, signal_variance=s2, noise_variance=noise, prior_mean=mean,
                             jitter=0.0).fit(X, y)
            mu, sd = gp.predict(Xq, return_std=True)
            mu_o, var_o = gp_posterior(X, y, Xq, ell, s2, noise, mean)
            err = max(err, np.max(np.abs(mu - mu_o)), np.max(np.abs(sd**2 - var_o)))
    ok_gp = err <= 1e-8
    ei_max = 0.0
    for _ in range(20):
        X, y = rng.random((4, 1)), rng.normal(size=4)
        gp = GPSurrogate(length_scale=0.3, signal_variance=1.0, noise_variance=0.0, jitter=1e-12).fit(X, y)
        i = int(np.argmin(y))
        mu, sd = gp.predict(X[i:i + 1], return_std=True)
        ei_max = max(ei_max, float(expected_improvement(mu, sd, y[i])[0]))
    ok_ei = ei_max <= 1e-6
    grid_x = np.linspace(0, 1, 2001)
    hits = 0
    for s in range(50):
        f = _bumpy(s)
        g = f(grid_x)
        _, v = minimize(lambda x: float(f(x[0])), ((0.0, 1.0),), [0.5], budget=15, seed=s)
        hits += v - g.min() <= 0.05 * (g.max() - g.min())
    ok_obo = hits >= 45
    detail = (f"GP max abs error {err:.1e} (<= 1e-8): {ok_gp}; EI at incumbents max {ei_max:.1e}: {ok_ei}; "
              f"1-D OBO within 5% of grid optimum in {hits}/50 runs (need >= 45)")
    assert report_criterion(7, ok_gp and ok_ei and ok_obo, detail), detail


# ---------------------------------------------------------------------------
# 8: gradient check
# ---------------------------------------------------------------------------
def test_criterion_8_gradient_check(report_criterion):
    rng = np.random.default_rng(8)
    worst = 0.0
    for seed in range(10):
        net = ExitNet(channels=8, hidden=8, seed=seed)
        X = rng.normal(size=(6, 5, 8))
        y = rng.integers(0, 2, 6)
        worst = max(worst, gradient_check(net, X, y, seed=seed))
    detail = f"max relative error over 10 initialisations {worst:.2e} (need < 1e-4)"
    assert report_criterion(8, worst < 1e-4, detail), detail


# ---------------------------------------------------------------------------
# 9: pruning safety
# ---------------------------------------------------------------------------
class _StallHazard:
    """Exit probability ``a`` on stall segments and ``b`` otherwise."""

    def __init__(self, a, b):
        self.a, self.b = a, b

    def predict_state(self, state):
        return np.where(state.cur_stall > 0, self.a, self.b)


def _obo_scenario(seed, prune):
    r = np.random.default_rng(seed)
    model = BandwidthModel(float(r.uniform(800, 2500)), float(r.uniform(200, 900)))
    pred = _StallHazard(float(r.uniform(0.1, 0.6)), float(r.uniform(0.0, 0.02)))
    manifest = VideoManifest.from_bitrates([300, 750, 1200, 1850, 2850], 2.0, 30)
    cfg = MCConfig(samples=100, seed=seed, prune_enabled=prune)
    state = OBOState(np.array([0.5]), HYBParams.box, budget=10, risk_axis=HYBParams.risk_axis)

    def evaluate(x, best):
        rate = evaluate_parameters(HYBParams.from_vector(x), model, UserState.fresh(), PlayerEnv(), pred, HYB(),
                                   manifest, cfg, best=best)
        return rate, prune and math.isfinite(best) and rate > best

    return run_invocation(state, evaluate, np.random.default_rng(seed + 1))


def test_criterion_9_pruning_safety(report_criterion):
    same = sum(np.array_equal(_obo_scenario(s, False), _obo_scenario(s, True)) for s in range(20))
    m = VideoManifest.from_bitrates([1000, 2000, 4000], 2.0)
    table = [(10000, 500, True), (4500, 500, False), (4000, 0, False), (5500.0001, 500, True), (5500, 500, False),
             (5600, 0, True)]
    table_ok = all(prune_preplay(BandwidthModel(mu, sd), m) is want for mu, sd, want in table)
    detail = f"identical argmin with/without pruning in {same}/20 scenarios; pre-play table {table_ok}"
    assert report_criterion(9, same == 20 and table_ok, detail), detail


# ---------------------------------------------------------------------------
# 10: determinism and persistence
# ---------------------------------------------------------------------------
def _pipeline(root, seed=3):
    m = default_manifest()
    traces = synthetic_traces(3, 11)
    users = sample_hazard_users(12, seed, n_levels=m.n_levels)
    log = log_from_result(synthesize_logs(users, traces, m, HYB(), seed=seed, sessions_per_day=6))
    pred, _ = train_predictor(log, m, FeatureSpec.for_setup(m, traces), epochs=3, seed=seed)
    pred.save(root / "predictor.json")
    cfg = ExperimentConfig.from_dict({
        "abr": "hyb", "mode": "lingxi_bayes", "users": {"kind": "hazard", "n": 6, "seed": seed},
        "traces": {"synthetic": {"n": 3, "seed": 11}}, "sessions_per_day": 4, "days": 2, "seeds": [seed],
        "predictor": str(root / "predictor.json"), "mc": {"samples": 10}, "obo": {"trials": 4}})
    run_experiment(cfg, root / "out")
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_determinism_and_persistence(tmp_path, report_criterion):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    ok_bytes = a == b and len(a) > 4
    rng = np.random.default_rng(10)
    ok_state = 0
    for i in range(100):
        ev = [StallEvent(int(rng.integers(0, 5)), int(rng.integers(0, 50)), int(rng.integers(0, 15)),
                         float(rng.exponential(2.0))) for _ in range(int(rng.integers(0, 12)))]
        x = [None, HYBParams(float(rng.uniform(0.1, 1.0))),
             MPCParams(float(rng.uniform(1, 20)), float(rng.uniform(0, 4)))][i % 3]
        st = PersistedUserState(f"u{i}", ev, x, {k: int(rng.integers(0, 100)) for k in ("sessions", "stalls")})
        persist_state(st, tmp_path / "state.json")
        ok_state += restore_state(tmp_path / "state.json") == st
    detail = f"pipeline reruns byte-identical over {len(a)} files: {ok_bytes}; state round-trips {ok_state}/100"
    assert report_criterion(10, ok_bytes and ok_state == 100, detail), detail

