"""Acceptance criteria, each at its stated tolerance and time limit.

Run directly (``python tests/test_acceptance.py``) or through pytest; either
way one PASS/FAIL line is printed per criterion.
"""

import math
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

import oracles
from acceptance_report import report
from helpers import model_state, random_covariate_model, random_dataset, random_state
from screenbo.acquisition import (
    estimate_threshold,
    greedy_expected_improvement,
    greedy_mining,
    greedy_threshold,
)
from screenbo.bench import ExperimentConfig, run_experiment, run_trials, aggregate
from screenbo.engine import (
    CHEAP,
    Policy,
    mining_regret,
    random_controller_decide,
    random_controller_p1,
    run_sequential,
)
from screenbo.gp_core import KernelSpec, fit_posterior, negative_log_likelihood
from screenbo.parallel import simulate_parallel
from screenbo.score_models import Marginals, SampleSet, expensive_marginals, posterior_expensive_samples
from screenbo.state import TT, TU, ScreenState
from screenbo.synth import SynthConfig, generate_problem, true_model


# -- 1 ------------------------------------------------------------------------


def test_c1_gp_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(50):
        n, d = int(rng.integers(1, 9)), int(rng.integers(1, 4))
        spec = KernelSpec(float(rng.uniform(0.3, 2)), tuple(rng.uniform(0.3, 2, d)), float(rng.uniform(0.01, 0.5)))
        X, y = rng.uniform(-1, 1, (n, d)), rng.normal(size=n)
        Xq = rng.uniform(-1, 1, (int(rng.integers(1, 5)), d))
        mean, cov = fit_posterior(X, y, spec).mean_cov(Xq)
        m_ref, c_ref = oracles.conditional(X, y, Xq, spec.signal_variance, spec.lengthscales, spec.noise_variance)
        nll_ref = oracles.nll(X, y, spec.signal_variance, spec.lengthscales, spec.noise_variance)
        worst = max(worst, np.abs(mean - m_ref).max(), np.abs(cov - c_ref).max(),
                    abs(negative_log_likelihood(X, y, spec) - nll_ref))
    dt = time.perf_counter() - t0
    ok = worst < 1e-8 and dt < 10
    report(1, ok, f"GP oracle max abs error {worst:.2e} (< 1e-8) in {dt:.1f}s (< 10 s)")
    assert ok


# -- 2 ------------------------------------------------------------------------


def _cheap_pred(model, s, i):
    obs = s.ids(TU, TT)
    f = model.f_spec
    m, c = oracles.conditional(s.features[obs], s.cheap[obs], s.features[[i]], f.signal_variance, f.lengthscales,
                               f.noise_variance)
    return m[0], c[0, 0] + f.noise_variance


def _g_pred(model, s, Z):
    tt = s.i_tt
    g = model.g_spec
    Zt = np.column_stack([s.features[tt], s.cheap[tt]])
    m, v = oracles.conditional_diag(Zt, s.expensive[tt], Z, g.signal_variance, g.lengthscales, g.noise_variance)
    return m, v + g.noise_variance


def test_c2_covariate_posterior_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    m = 100_000
    failures = 0
    checks = 0
    for _ in range(10):
        model = random_covariate_model(rng)
        s = random_state(rng, n=8, n_tu=2, n_tt=3)
        ids = np.r_[s.i_tu, s.i_uu]
        draws = posterior_expensive_samples(model, s, ids, m, rng).draws
        for k, i in enumerate(ids):
            col = draws[:, k]
            se_pkg = col.std(ddof=1) / math.sqrt(m)
            if s.status[i] == TU:
                mu, var = _g_pred(model, s, np.array([[s.features[i, 0], s.cheap[i]]]))
                ok_mean = abs(col.mean() - mu[0]) < 4 * se_pkg
                # sample variance SE for a Gaussian column: var * sqrt(2 / (m - 1))
                ok_var = abs(col.var(ddof=1) - var[0]) < 4 * var[0] * math.sqrt(2 / (m - 1))
                failures += (not ok_mean) + (not ok_var)
                checks += 2
            else:
                mc, vc = _cheap_pred(model, s, i)
                yc = mc + math.sqrt(vc) * rng.standard_normal(1000)
                g_means, _ = _g_pred(model, s, np.column_stack([np.full(1000, s.features[i, 0]), yc]))
                ref, se_ref = g_means.mean(), g_means.std(ddof=1) / math.sqrt(1000)
                failures += abs(col.mean() - ref) >= 4 * math.hypot(se_pkg, se_ref)
                checks += 1
    dt = time.perf_counter() - t0
    ok = failures == 0 and dt < 300
    report(2, ok, f"covariate posterior: {checks - failures}/{checks} moment checks within 4 MC SE in {dt:.1f}s (< 300 s)")
    assert ok


# -- 3 ------------------------------------------------------------------------


def _law(rng, k):
    return rng.normal(0, 0.5, k), rng.normal(size=(k, k)) * 0.4 + np.eye(k)


def _draw(law, m, seed):
    mu, L = law
    g = np.random.default_rng(seed)
    out = np.empty((m, mu.size))
    for lo in range(0, m, 250_000):
        hi = min(lo + 250_000, m)
        out[lo:hi] = mu + g.standard_normal((hi - lo, mu.size)) @ L.T
    return out


def test_c3_acquisition_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    bad = []
    m = 50_000
    for trial in range(6):
        k = int(rng.integers(2, 7))
        N = int(rng.integers(1, k + 1))
        law = _law(rng, k)
        ref_draws = _draw(law, 1_000_000, [trial, 0])
        est_draws = _draw(law, m, [trial, 1])
        ref = oracles.rank_top_n(ref_draws, N).mean(0)
        got = greedy_mining(SampleSet(np.arange(k), est_draws), N).values
        se = np.sqrt(ref * (1 - ref) * (1 / m + 1e-6)) + 1e-12
        if np.any(np.abs(got - ref) >= 4 * se):
            bad.append(f"mining k={k} N={N}")
        stat = oracles.nth_largest_sorted(ref_draws, N)
        tau_ref = np.median(stat)
        dens = np.mean(np.abs(stat - tau_ref) < 0.02) / 0.04
        tau_se = math.hypot(1 / (2 * dens * math.sqrt(m)), 1 / (2 * dens * 1000))
        if abs(estimate_threshold(SampleSet(np.arange(k), est_draws), N).tau - tau_ref) >= 4 * tau_se:
            bad.append(f"threshold k={k} N={N}")
    mu, sd = np.array([0.3, -0.5, 1.2]), np.array([0.7, 1.3, 0.2])
    draws = mu + sd * rng.standard_normal((400_000, 3))
    mc = greedy_expected_improvement(SampleSet(np.arange(3), draws), 0.4).values
    exact = greedy_expected_improvement(Marginals.gaussian(np.arange(3), mu, sd**2), 0.4).values
    se = np.maximum(draws - 0.4, 0).std(0) / math.sqrt(draws.shape[0])
    if np.any(np.abs(mc - exact) >= 4 * se):
        bad.append("EI")
    dt = time.perf_counter() - t0
    ok = not bad and dt < 300
    report(3, ok, f"acquisition oracles: mismatches {bad or 'none'} in {dt:.1f}s (< 300 s)")
    assert ok


# -- 4 ------------------------------------------------------------------------


def test_c4_threshold_approximation_quality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    agree = 0
    for _ in range(100):
        model = random_covariate_model(rng)
        s = model_state(rng, model, n=10, n_tu=3, n_tt=3)
        free = np.r_[s.i_tu, s.i_uu]
        all_ids = np.arange(10)
        tau = estimate_threshold(posterior_expensive_samples(model, s, all_ids, 4096, rng), 2).tau
        thr = greedy_threshold(expensive_marginals(model, s, free), tau).argmax()
        draws = posterior_expensive_samples(model, s, all_ids, 100_000, rng).draws
        p_top = oracles.rank_top_n(draws, 2).mean(0)
        best = free[np.argmax(p_top[free])]
        agree += int(thr == best)
    dt = time.perf_counter() - t0
    ok = agree >= 90 and dt < 600
    report(4, ok, f"threshold argmax equals mining-oracle argmax on {agree}/100 instances (>= 90) in {dt:.1f}s (< 600 s)")
    assert ok


# -- 5 ------------------------------------------------------------------------

THETAS = {"0": 0.0, "pi/4": math.pi / 4, "pi/2": math.pi / 2}
C5_METHODS = ("SGEI", "SGT", "STR")


@pytest.fixture(scope="module")
def experiment_one():
    t0 = time.perf_counter()
    out = {}
    for method in C5_METHODS:
        for label, theta in THETAS.items():
            cfg = ExperimentConfig(method=method, n=200, trials=100, budget=50.0, c_cheap=0.2, c_expensive=1.0,
                                   workers=1, theta=theta, N=10, m_threshold=1024, seed=0)
            out[method, label] = aggregate(run_trials(cfg))
    return out, time.perf_counter() - t0


def _separated(res, theta, metric, winner):
    mean = lambda m: res[m, theta]["mean"][metric]
    se = lambda m: res[m, theta]["se"][metric]
    gaps = []
    for other in C5_METHODS:
        if other == winner:
            continue
        pooled = math.hypot(se(winner), se(other))
        gaps.append((other, mean(other) - mean(winner), pooled))
    return all(gap > pooled for _, gap, pooled in gaps), gaps


def _fmt(res, metric):
    return "; ".join(
        f"{m}@{t}={res[m, t]['mean'][metric]:.3f}±{res[m, t]['se'][metric]:.3f}" for t in THETAS for m in C5_METHODS
    )


def test_c5_scaled_experiment_one_orderings(experiment_one):
    res, dt = experiment_one
    ok = dt < 7200
    notes = []
    for theta in ("0", "pi/4"):
        ok_opt, _ = _separated(res, theta, "optimization_regret", "SGEI")
        ok_mine, _ = _separated(res, theta, "mining_regret", "SGT")
        ok &= ok_opt and ok_mine
        notes.append(f"theta={theta}: SGEI best opt {ok_opt}, SGT best mining {ok_mine}")
    report("5a", ok, f"method ordering ({'; '.join(notes)}) in {dt:.0f}s (< 7200 s) | "
           f"opt: {_fmt(res, 'optimization_regret')} | mining: {_fmt(res, 'mining_regret')}")
    assert ok


def test_c5_regret_grows_with_theta(experiment_one):
    res, _ = experiment_one
    worse = []
    for m in C5_METHODS:
        for metric in ("optimization_regret", "mining_regret"):
            if not res[m, "pi/2"]["mean"][metric] > res[m, "0"]["mean"][metric]:
                worse.append(f"{m} {metric}")
    ok = not worse
    report("5b", ok, "regret at theta=pi/2 exceeds theta=0 for all methods; violations: " + (", ".join(worse) or "none"))
    assert ok


# -- 6 ------------------------------------------------------------------------


def test_c6_random_controller_tuning():
    t0 = time.perf_counter()
    p1 = random_controller_p1(0.2, 1.0)
    rng = np.random.default_rng(606)
    s = ScreenState.initial(np.zeros(3), 100.0, 0.2, 1.0)
    s.status[0], s.cheap[0] = TU, 0.0
    n = 10_000
    hits = sum(random_controller_decide(p1, s, rng) == CHEAP for _ in range(n))
    z = abs(hits / n - p1) / math.sqrt(p1 * (1 - p1) / n)
    dt = time.perf_counter() - t0
    ok = p1 == 0.875 and z < 4 and dt < 60
    report(6, ok, f"p1={p1!r} (== 0.875), unforced cheap frequency {hits / n:.4f}, |z|={z:.2f} (< 4) in {dt:.1f}s")
    assert ok


# -- 7 ------------------------------------------------------------------------


def test_c7_parallel_consistency():
    t0 = time.perf_counter()
    mismatches, bad_dur, over_budget = 0, 0, 0
    for p in range(20):
        data = generate_problem(SynthConfig(n=60, theta=math.pi / 4, seed=1000 + p))
        acq, ctl = (("threshold", "greedy"), ("ei", "greedy"), ("thompson", "random"))[p % 3]
        pol = Policy(acq, ctl, true_model(SynthConfig()), N=5, refit_every=None, m_threshold=512, m_outer=128)
        seq = run_sequential(data, pol, 10.0, 0.2, 1.0, seed=p)
        par = simulate_parallel(data, pol, 10.0, 0.2, 1.0, workers=1, seed=p)
        mismatches += seq.actions() != par.actions()
        audit = []
        multi = simulate_parallel(data, pol, 10.0, 0.2, 1.0, workers=4, seed=p, audit=audit)
        for r in par.records + multi.records:
            c = 0.2 if r.test == "cheap" else 1.0
            bad_dur += not (c / 2 <= r.finish_time - r.dispatch_time <= 1.5 * c)
        over_budget += sum(spent > 10.0 + 1e-9 for _, spent, _ in audit)
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and bad_dur == 0 and over_budget == 0 and dt < 600
    report(7, ok, f"w=1 sequence mismatches {mismatches}/20, out-of-range durations {bad_dur}, "
           f"reservations over budget {over_budget} in {dt:.1f}s (< 600 s)")
    assert ok


# -- 8 ------------------------------------------------------------------------

_C8 = {"traces": 0, "violations": []}


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(seed=st.integers(0, 2**31 - 1), budget=st.floats(1.0, 10.0), c_c=st.sampled_from([0.1, 0.2, 0.5, 1.0]),
       kind=st.sampled_from(["STR", "SGEI", "SGT", "par"]), N=st.integers(1, 5))
def _invariant_case(seed, budget, c_c, kind, N):
    data = random_dataset(np.random.default_rng(seed), n=20)
    model = true_model(SynthConfig())
    acq, ctl = {"STR": ("thompson", "random"), "SGEI": ("ei", "greedy"), "SGT": ("threshold", "greedy"),
                "par": ("thompson", "random")}[kind]
    pol = Policy(acq, ctl, model, N=N, refit_every=None, m_threshold=256, m_outer=64)
    if kind == "par":
        trace = simulate_parallel(data, pol, budget, c_c, 1.0, workers=3, seed=seed)
    else:
        trace = run_sequential(data, pol, budget, c_c, 1.0, seed=seed)
    s = trace.final_state
    v = _C8["violations"]
    n_tu, n_tt = s.i_tu.size, s.i_tt.size
    if abs(s.budget_remaining - (budget - c_c * (n_tu + n_tt) - 1.0 * n_tt)) > 1e-9:
        v.append("budget identity")
    if np.any(~np.isnan(s.expensive) & np.isnan(s.cheap)):
        v.append("I_ut nonempty")
    if trace.total_reward_mining != N - mining_regret(trace, data, N):
        v.append("reward/regret duality")
    cheap_seen = set()
    for r in trace.records:
        if r.test == "cheap":
            cheap_seen.add(r.candidate_id)
        elif r.candidate_id not in cheap_seen:
            v.append("expensive before cheap")
    # acquisition ranges on this trace's final posterior
    post = model.condition(s)
    free = np.flatnonzero(s.status != TT)
    if free.size:
        marg = post.expensive_marginals(free)
        thr = greedy_threshold(marg, float(np.random.default_rng(seed).normal())).values
        ei = greedy_expected_improvement(marg, 0.0).values
        draws = post.sample_expensive(np.arange(s.n), 64, np.random.default_rng(seed))
        mine = greedy_mining(draws, N, s).values
        if thr.min() < 0 or thr.max() > 1 or ei.min() < 0 or mine.min() < 0 or mine.max() > 1:
            v.append("acquisition range")
    _C8["traces"] += 1


def test_c8_invariant_suite():
    t0 = time.perf_counter()
    _invariant_case()
    dt = time.perf_counter() - t0
    v = _C8["violations"]
    ok = not v and dt < 600
    report(8, ok, f"{_C8['traces']} randomized traces, violations: {sorted(set(v)) or 'none'} in {dt:.1f}s (< 600 s)")
    assert ok


# -- 9 ------------------------------------------------------------------------


def test_c9_determinism(tmp_path):
    t0 = time.perf_counter()
    same = []
    for method, workers in (("SGT", 1), ("STR", 4), ("GT-Poor", 1)):
        cfg = ExperimentConfig(method=method, n=80, trials=3, seeds=[7, 42, 1234], budget=10.0, workers=workers,
                               N=5, m_threshold=512, m_outer=128)
        a, b = tmp_path / f"{method}_a.csv", tmp_path / f"{method}_b.csv"
        run_experiment(cfg, a)
        run_experiment(cfg, b)
        same.append(a.read_bytes() == b.read_bytes())
    dt = time.perf_counter() - t0
    ok = all(same) and dt < 300
    report(9, ok, f"byte-identical result CSVs for {sum(same)}/{len(same)} configurations in {dt:.1f}s (< 300 s)")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
