"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The simulation criteria share fitted replicates through a module cache, so
criterion 3 (constraints) checks every fit made by criteria 4-7.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from famm.basis import difference_penalty
from famm.constraints import constraint_violation
from famm.fpca import fpca
from famm.simulation import SimConfig, fit_replicate
from famm.solver import DesignSystem, GlobalPenalty, fit_penalized, minimize_reml, reml_criterion

from conftest import record_criterion

ROOT = Path(__file__).resolve().parents[1]
FITS = {}


def replicate(scenario, rep, fpc=False, **kw):
    key = (scenario, rep, fpc, tuple(sorted(kw.items())))
    if key not in FITS:
        cfg = SimConfig(scenario, **kw)
        FITS[key] = fit_replicate(cfg, rep, fpc_random_intercept=fpc, keep_model=True)
    res = FITS[key]
    assert res.error is None, res.error
    return res


# --- 1 ----------------------------------------------------------------------

def _random_system(rng):
    N = int(rng.integers(2, 51))
    K = int(rng.integers(1, min(12, N - 1) + 1))
    V = int(rng.integers(1, min(3, K) + 1))
    X = rng.normal(size=(N, K))
    y = rng.normal(size=N)
    edges = [0, *sorted(rng.choice(np.arange(1, K), V - 1, replace=False)), K] if V > 1 else [0, K]
    pens, slices = [], {}
    for j, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        k = b - a
        A = rng.normal(size=(int(rng.integers(1, k + 1)), k))
        sl = slice(a, b)
        slices[f"b{j}"] = sl
        pens.append(GlobalPenalty(A.T @ A, sl, f"p{j}", f"b{j}"))
    return DesignSystem(y, X, pens, slices)


def _augmented_ridge(system, lam):
    rows, rhs = [system.design], [system.y]
    for l, P in zip(lam, system.padded_penalties()):
        w, U = np.linalg.eigh(P)
        rows.append(np.sqrt(l) * (np.sqrt(np.clip(w, 0, None)) * U).T)
        rhs.append(np.zeros(system.K))
    return np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)[0]


def test_criterion_01_penalized_solve_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        system = _random_system(rng)
        lam = np.exp(rng.uniform(-3, 3, system.V))
        ref = _augmented_ridge(system, lam)
        got = fit_penalized(system, lam).theta
        worst = max(worst, np.abs(got - ref).max() / max(np.abs(ref).max(), 1e-300))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-9 and secs < 5
    record_criterion(1, "penalized solve vs augmented ridge", ok,
                     f"max rel err {worst:.2e} (tol 1e-9), {secs:.2f}s (limit 5s)")
    assert ok


# --- 2 ----------------------------------------------------------------------

def test_criterion_02_reml_grid_search():
    t0 = time.perf_counter()
    grid = np.round(np.arange(-8.0, 8.0 + 1e-9, 0.01), 10)
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        N, K = int(rng.integers(8, 31)), int(rng.integers(3, 7))
        X = rng.normal(size=(N, K))
        y = X @ np.linspace(1, 2, K) + rng.normal(0, 0.5, N)
        system = DesignSystem(y, X, [GlobalPenalty(difference_penalty(K, 1), slice(0, K), "p", "b")],
                              {"b": slice(0, K)})
        vals = np.array([reml_criterion(system, [g]) for g in grid])
        best = grid[np.argmin(vals)]
        res = minimize_reml(system, bounds=[-8.0, 8.0])
        worst = max(worst, abs(res.log_lambda[0] - best))
    secs = time.perf_counter() - t0
    ok = worst <= 0.01 + 1e-9 and secs < 30
    record_criterion(2, "REML optimum vs log-grid search", ok,
                     f"max |diff| {worst:.4f} (limit one 0.01 step), {secs:.1f}s (limit 30s)")
    assert ok


# --- 4 ----------------------------------------------------------------------

def test_criterion_04_scenario_accuracy():
    t0 = time.perf_counter()
    errs = [replicate(2, r, M=10, ni=3, T=30, snr_eps=5.0, snr_b=1.0).metrics["y"][0] for r in range(10)]
    secs = time.perf_counter() - t0
    good = sum(e < 0.1 for e in errs)
    ok = good >= 9 and secs < 15 * 60
    record_criterion(4, "scenario 2 accuracy", ok,
                     f"{good}/10 replicates with rIMSE(y) < 0.1 (max {max(errs):.4f}), {secs:.0f}s")
    assert ok


# --- 5 ----------------------------------------------------------------------

def test_criterion_05_coverage():
    t0 = time.perf_counter()
    cov = [replicate(1, r, M=10, ni=20, T=30, snr_eps=5.0, snr_b=1.0).metrics["y"][1] for r in range(20)]
    secs = time.perf_counter() - t0
    med = float(np.median(cov))
    ok = 0.92 <= med <= 0.97 and secs < 20 * 60
    record_criterion(5, "scenario 1 coverage of y(t)", ok,
                     f"median coverage {med:.3f} (band [0.92, 0.97]), range "
                     f"[{min(cov):.3f}, {max(cov):.3f}], {secs:.0f}s")
    assert ok


# --- 6 ----------------------------------------------------------------------

def test_criterion_06_directional_effects():
    base = dict(M=10, ni=3, T=30, snr_eps=5.0, snr_b=1.0)

    def metric(comp, rep, **over):
        return replicate(2, rep, **{**base, **over}).metrics[comp][0]

    snr = sum(metric("beta1", r) < metric("beta1", r, snr_eps=1.0) for r in range(10))
    ratios = [metric("y", r, T=60) / metric("y", r) for r in range(10)]
    med = float(np.median(ratios))
    ni = sum(metric("y", r, ni=20) < metric("y", r) for r in range(10))
    ok = snr >= 9 and 0.4 <= med <= 0.85 and ni >= 9
    record_criterion(6, "directional effects", ok,
                     f"SNR 1->5 lowers rIMSE(beta1) in {snr}/10; T 30->60 median rIMSE(y) ratio "
                     f"{med:.3f} (band [0.4, 0.85]); n_i 3->20 lowers rIMSE(y) in {ni}/10")
    assert ok


# --- 7 ----------------------------------------------------------------------

def test_criterion_07_fpc_random_intercept():
    t0 = time.perf_counter()
    cfg = dict(M=100, ni=3, T=30, snr_eps=1.0, snr_b=1.0)
    ratios, t_fpc, t_spline = [], 0.0, 0.0
    for r in range(5):
        spline = replicate(2, r, **cfg)
        fpc_fit = replicate(2, r, fpc=True, **cfg)
        assert fpc_fit.model.fpca is not None
        ratios.append(fpc_fit.metrics["b0"][0] / spline.metrics["b0"][0])
        t_fpc += fpc_fit.model.seconds
        t_spline += spline.model.seconds
    secs = time.perf_counter() - t0
    ok = max(ratios) <= 1.6 and t_fpc < t_spline and secs < 40 * 60
    record_criterion(7, "FPC random intercept vs spline", ok,
                     f"rIMSE(b0) ratios {', '.join(f'{x:.2f}' for x in ratios)} (limit 1.6); "
                     f"fit time FPC {t_fpc:.1f}s vs spline {t_spline:.1f}s; {secs:.0f}s")
    assert ok


# --- 3 (runs after the simulation criteria have filled the cache) -----------

def test_criterion_03_constraints():
    if not FITS:
        for r in range(2):
            replicate(2, r, M=10, ni=3, T=30)
    worst, count = 0.0, 0
    for res in FITS.values():
        model = res.model
        grid = model.dataset.common_grid()
        for term in model.terms:
            if term.constraint is None:
                continue
            count += 1
            worst = max(worst, constraint_violation(term, model.theta_hat[term.coef_slice], grid))
    ok = worst <= 1e-8 and count > 0
    record_criterion(3, "per-t sum-to-zero after absorption", ok,
                     f"max |mean_i f(X_i, t)| {worst:.2e} over {count} constrained terms "
                     f"in {len(FITS)} fits (tol 1e-8)")
    assert ok


# --- 8 ----------------------------------------------------------------------

def test_criterion_08_fpca_rank_one():
    t0 = time.perf_counter()
    T, n = 60, 300
    t = np.linspace(0, 1, T)
    eta = np.sqrt(2) * np.sin(2 * np.pi * t)
    rng = np.random.default_rng(8)
    curves = rng.normal(size=(n, 1)) * eta + rng.normal(0, 0.1, (n, T))
    res = fpca(curves, t, n_components=1)
    w = np.gradient(t)
    inner = abs(float(np.sum(w * res.eigenfunctions[:, 0] * eta)))
    kappa = float(res.eigenvalues[0])
    secs = time.perf_counter() - t0
    ok = inner > 0.99 and 0.9 <= kappa <= 1.1 and secs < 10
    record_criterion(8, "FPCA of a rank-1 kernel", ok,
                     f"|<eta_hat, eta>| {inner:.4f} (> 0.99), kappa {kappa:.3f} ([0.9, 1.1]), {secs:.2f}s")
    assert ok


# --- 9 ----------------------------------------------------------------------

def test_criterion_09_algebra_suite():
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", "tests/test_basis.py"],
        cwd=ROOT, capture_output=True, text=True,
    )
    secs = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and secs < 5
    record_criterion(9, "algebra unit suite", ok, f"{tail}, {secs:.2f}s (limit 5s)")
    assert ok


# --- 10 ---------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    args = [sys.executable, "-m", "famm.cli", "simulate", "--scenario", "2", "--M", "6",
            "--ni", "2", "--T", "15", "--reps", "4", "--seed", "11"]
    outs = []
    for name, workers in (("a", 1), ("b", 1), ("c", 4)):
        p = tmp_path / f"{name}.csv"
        proc = subprocess.run(args + ["--workers", str(workers), "--out", str(p)],
                              capture_output=True, text=True, env=_env_without_threads())
        assert proc.returncode == 0, proc.stderr
        outs.append(p.read_bytes())
    ok = outs[0] == outs[1] == outs[2] and len(outs[0]) > 0
    record_criterion(10, "simulate determinism", ok,
                     f"two runs identical: {outs[0] == outs[1]}; 1 vs 4 workers identical: {outs[0] == outs[2]}")
    assert ok


def _env_without_threads():
    import os

    env = dict(os.environ)
    env.pop("FAMM_THREADS", None)
    return env
