"""Acceptance criteria, pinned at their stated tolerances.

Every criterion records one ``PASS``/``FAIL`` line.  Under pytest the lines
are repeated in the terminal summary; run the file directly
(``python tests/test_acceptance.py``) to print them without pytest.
"""

from __future__ import annotations

import dataclasses
import functools
import time

import numpy as np
import pytest

from hsps import analysis as A
from hsps import oracle
from hsps.campaign import Campaign, RunSummary, analyze_point, coincidence_set, fit_block, simulate_point
from hsps.instrument import PEAK_OUT, DetectorModel, reference_config, run_experiment

pytestmark = pytest.mark.slow

TARGET_ONF = 0.115
SWEEP_NS = (60.0, 30.0, 15.0, 5.0)
MASTER_SEED = 2010
GAMMA_TRUE = 0.14
R_TRUE = 3.5e-3

RESULTS: list[str] = []


def record(cid: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} [{cid}] {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


# --------------------------------------------------------------------------- per-run invariants

_invariant_failures: list[str] = []
_runs_checked = {"decomposition": 0, "dead_time": 0}


def check_run(role: str, records) -> None:
    """Decomposition identity and dead-time invariant on one raw run."""
    cfg = records.config
    probs = A.probabilities_for(records)
    direct = records.fired.sum(axis=1) / records.n_triggers
    if not np.allclose(probs.p_true + probs.p_bkg + probs.p_dark, direct, rtol=0, atol=1e-12):
        _invariant_failures.append(f"decomposition seed={cfg.seed} {role}")
    _runs_checked["decomposition"] += 1
    t_dead_ps = round(cfg.t_dead_us * 1e6)
    sched = records.schedule()
    try:
        sched.check(t_dead_ps)
        if len(sched) > 1:
            assert np.diff(sched.accepted_triggers).min() >= records.rearm_interval_ps
    except AssertionError:
        _invariant_failures.append(f"dead time seed={cfg.seed} {role}")
    _runs_checked["dead_time"] += 1


def run_point(campaign: Campaign, point: int = 0) -> dict[str, RunSummary]:
    return simulate_point(campaign, point, on_run=check_run)


# --------------------------------------------------------------------------- shared computations


@functools.lru_cache(maxsize=None)
def calibrated_config():
    rate = A.calibrate_background(TARGET_ONF, 60.0, reference_config())
    return reference_config(background_rate_hz=rate, seed=MASTER_SEED)


@functools.lru_cache(maxsize=None)
def sweep():
    """Pooled sweep: 10 seeds of 1e7 triggers per role (1e6 for both-blocked and peak-out)."""
    camp = Campaign(
        calibrated_config().replace(n_triggers=10**7),
        SWEEP_NS,
        seeds_per_point=10,
        role_triggers={"block12": 10**6, "peakout": 10**6},
    )
    summaries = [run_point(camp, k) for k in range(len(SWEEP_NS))]
    points = [analyze_point(s) for s in summaries]
    return summaries, points, fit_block(points)


def _point(dt: float) -> dict:
    _, points, _ = sweep()
    return next(p for p in points if p["delta_t_switch_ns"] == dt)


# --------------------------------------------------------------------------- criteria


def test_c1_onf_at_5ns_single_run():
    cfg = calibrated_config().with_delta_t(5.0).replace(n_triggers=10**6)
    t0 = time.perf_counter()
    rec = run_experiment(cfg)
    check_run("unblocked", rec)
    probs = A.probabilities_for(rec)
    onf, err = A.compute_onf(probs), A.onf_error(probs)
    elapsed = time.perf_counter() - t0
    ok = 0.0105 <= onf <= 0.0185 and elapsed < 60
    record("C1", ok, f"ONF(5 ns, 1e6 triggers) = {onf:.4f} +/- {err:.4f} in [0.0105, 0.0185]; runtime {elapsed:.1f} s < 60 s")


def test_c2_linear_fits():
    _, _, fit = sweep()
    r_onf, r_alpha = fit["onf"].get("R", float("nan")), fit["alpha"].get("R", float("nan"))
    record("C2", r_onf >= 0.98 and r_alpha >= 0.98, f"fit R: ONF {r_onf:.4f}, alpha {r_alpha:.4f} (need >= 0.98)")


def test_c3_alpha_at_60ns():
    p = _point(60.0)
    a = p["alpha"]
    record("C3a", 0.20 <= a <= 0.31, f"alpha(60 ns) = {a:.4f} +/- {p['alpha_err']:.4f} in [0.20, 0.31]")


def test_c3_alpha_at_5ns():
    p = _point(5.0)
    a = p["alpha"]
    record("C3b", 0.008 <= a <= 0.020, f"alpha(5 ns) = {a:.4f} +/- {p['alpha_err']:.4f} in [0.008, 0.020]")


def test_c3_alpha_intercept():
    _, _, fit = sweep()
    lo, hi = fit["alpha"]["intercept_ci95"]
    record("C3c", lo <= 0.0 <= hi, f"alpha fit intercept 95% CI [{lo:.4f}, {hi:.4f}] contains 0")


def test_c4_extinction_ratio():
    summaries, _, _ = sweep()
    peak_in = summaries[0]["unblocked"]
    cfg = peak_in.config.replace(mode=PEAK_OUT, n_triggers=10**7, seed=MASTER_SEED + 1)
    t0 = time.perf_counter()
    rec = run_experiment(cfg)
    check_run("peakout", rec)
    p_out = A.probabilities_for(rec)
    elapsed = time.perf_counter() - t0
    r, err = A.compute_r(peak_in.probabilities(), p_out), A.r_error(peak_in.probabilities(), p_out)
    ok = abs(r - R_TRUE) <= 3 * err and elapsed <= 600
    record("C4", ok, f"r = {r:.3e} +/- {err:.1e} vs {R_TRUE:.1e} (|z| = {abs(r - R_TRUE) / err:.2f} <= 3); 1e7 peak-out triggers in {elapsed:.1f} s")


def test_c5_gamma():
    _, points, _ = sweep()
    g = np.array([p["gamma"] for p in points])
    e = np.array([p["gamma_err"] for p in points])
    rel = np.abs(g / GAMMA_TRUE - 1)
    z = max(abs(g[i] - g[j]) / np.hypot(e[i], e[j]) for i in range(len(g)) for j in range(i + 1, len(g)))
    ok = bool(np.all(rel <= 0.02)) and z < 3
    vals = ", ".join(f"{x:.4f}" for x in g)
    record("C5", ok, f"gamma per point [{vals}] within 2% of {GAMMA_TRUE} (max {rel.max():.2%}); max pairwise spread {z:.2f} sigma < 3")


def test_c6a_poissonian_light():
    base = reference_config(pair_rate_hz=0.0, herald_dark_rate_hz=3e4, background_rate_hz=2e6, seed=MASTER_SEED + 2)
    camp = Campaign(base, (60.0,), seeds_per_point=30, roles=("unblocked", "block1", "block2", "block12"))
    p = analyze_point(run_point(camp))
    z = (p["alpha"] - 1) / p["alpha_err"]
    record("C6a", abs(z) <= 3, f"Poisson-only light over 30 seeds: alpha = {p['alpha']:.4f} +/- {p['alpha_err']:.4f} (|z| = {abs(z):.2f} <= 3)")


def test_c6b_no_background_no_darks():
    # twins of neighbouring pairs are the source's own background; at 1 pair/s
    # about 1e-4 of them reach a gate per run, so every photon left is heralded
    base = reference_config(
        pair_rate_hz=1.0,
        herald_efficiency=1.0,
        herald_dark_rate_hz=0.0,
        background_rate_hz=0.0,
        detectors=(DetectorModel(dark_probability_per_gate=0.0),) * 2,
        n_triggers=10**5,
        seed=MASTER_SEED + 3,
    )
    camp = Campaign(base, (60.0,), roles=("unblocked", "block1", "block2", "block12"))
    p = analyze_point(run_point(camp))
    ok = p["onf"] == 0.0 and p["alpha"] == 0.0
    record("C6b", ok, f"no background, no darks: ONF = {p['onf']!r}, alpha = {float(p['alpha'])!r} (exactly 0)")


def _grid():
    base = calibrated_config().replace(n_triggers=10**6)
    out = []
    for i, bkg in enumerate((1e5, 2.8e5, 1e6)):
        for j, gamma in enumerate((0.07, 0.14, 0.28)):
            cfg = base.replace(background_rate_hz=bkg, signal_coupling=gamma, seed=MASTER_SEED + 100 + 3 * i + j)
            out.append(cfg)
    return out


def test_c6d_oracle_agreement():
    worst, bad = 0.0, []
    for cfg in _grid():
        camp = Campaign(cfg, (60.0,), roles=("unblocked", "block1", "block2", "block12"))
        summaries = run_point(camp)
        probs = summaries["unblocked"].probabilities()
        coin = coincidence_set(summaries)
        pred = oracle.predict(cfg)
        pairs = []
        for name, sig in (("p_true", probs.sigma_true), ("p_bkg", probs.sigma_bkg), ("p_dark", probs.sigma_dark)):
            for d in range(2):
                pairs.append((f"{name}[{d + 1}]", getattr(probs, name)[d], getattr(pred, name)[d], sig[d]))
        # coincidences number a handful per run, so their Poisson sigma comes
        # from the predicted counts (Pearson) rather than the observed ones
        names = ("p12_tot_tot", "p12_dark_tot", "p12_tot_dark", "p12_dark_dark")
        expected = tuple(getattr(pred, name) * n for name, n in zip(names, coin.n_triggers))
        for name, c, n, mu in zip(names, coin.counts, coin.n_triggers, expected):
            pairs.append((name, c / n, getattr(pred, name), np.sqrt(max(mu, 1e-300)) / n))
        coin_pred = dataclasses.replace(coin, counts=expected)
        pairs.append(("onf", A.compute_onf(probs), pred.onf, A.onf_error(probs)))
        pairs.append(("alpha", A.compute_alpha(coin, probs), pred.alpha, A.alpha_error(coin_pred, probs)))
        for name, mc, exp, sig in pairs:
            z = abs(mc - exp) / sig
            worst = max(worst, z)
            if z > 3:
                bad.append(f"{name}@bkg={cfg.background_rate_hz:g},gamma={cfg.signal_coupling:g} z={z:.2f}")
    n = 9 * 12
    record("C6d", not bad, f"oracle vs MC on a 3x3 background x gamma grid, {n} comparisons at 1e6 triggers: worst |z| = {worst:.2f}" + (f"; over 3 sigma: {bad}" if bad else ""))


def test_c6f_darks_only():
    base = reference_config(
        pair_rate_hz=0.0,
        herald_dark_rate_hz=3e4,
        background_rate_hz=0.0,
        detectors=(DetectorModel(dark_probability_per_gate=0.05),) * 2,
        n_triggers=20_000,
    )
    vals = []
    for s in range(100):
        camp = Campaign(base.replace(seed=MASTER_SEED + 1000 + s), (60.0,), roles=("unblocked", "block1", "block2", "block12"))
        vals.append(coincidence_set(run_point(camp)).p12_signal)
    vals = np.array(vals)
    mean, sem = vals.mean(), vals.std(ddof=1) / np.sqrt(vals.size)
    record("C6f", abs(mean) <= 3 * sem, f"darks only, 100 seeds: mean P12_signal = {mean:.2e} +/- {sem:.1e} (|z| = {abs(mean) / sem:.2f} <= 3)")


# the per-run invariants are collected from every run above, so they go last


def test_c6c_decomposition_identity():
    n = _runs_checked["decomposition"]
    bad = [f for f in _invariant_failures if f.startswith("decomposition")]
    record("C6c", n > 0 and not bad, f"p_true + p_bkg + p_dark equals the click fraction on all {n} runs" + (f"; failures {bad[:5]}" if bad else ""))


def test_c6e_dead_time_invariant():
    n = _runs_checked["dead_time"]
    bad = [f for f in _invariant_failures if f.startswith("dead time")]
    record("C6e", n > 0 and not bad, f"trigger spacing >= dt + t_dead on all {n} schedules" + (f"; failures {bad[:5]}" if bad else ""))


if __name__ == "__main__":
    tests = [v for k, v in list(globals().items()) if k.startswith("test_") and callable(v)]
    for t in tests:
        try:
            t()
        except AssertionError:
            pass
    print("\n" + "\n".join(RESULTS))
    print(f"{sum(line.startswith('PASS') for line in RESULTS)}/{len(RESULTS)} criteria passed")
