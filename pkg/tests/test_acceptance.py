"""Acceptance criteria 1-10, one verdict line each (see the terminal summary).

Slow: the full file takes tens of minutes on one core.  Run it alone with
``pytest tests/test_acceptance.py -v``.
"""

import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from alkiax import ApproxConfig, approximate, evaluate, evaluate_batch, load, precheck_kappa_bar, save
from alkiax.approximator import extrapolate_gamma
from alkiax.errors import BuildBudgetExceeded, InfeasibleRegionError
from alkiax.kernels import Kernel, center_power_closed_form, cube_vertices, power_function
from alkiax.oracles import CstrMpcOracle, SincosOracle, SyntheticRkhsOracle
from alkiax.validation import (
    audit_extrapolation,
    check_assumption2,
    closed_loop_sim,
    complexity_sweep,
    fit_complexity_slope,
    interpolant_norms,
    validate_error_grid,
)

pytestmark = pytest.mark.slow

MATERN32 = Kernel("matern", 0.8, 1.5)
_GL_X, _GL_W = np.polynomial.legendre.leggauss(200)


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# criterion 1 ---------------------------------------------------------------

def _se_sum_1d(oracle, x):
    """Value and derivative of a 1D squared-exponential expansion."""
    z, ell, c = oracle.centers[:, 0], oracle.kernel.length_scale, oracle.coefficients[:, 0]
    d = x[:, None] - z[None, :]
    e = np.exp(-((d / ell) ** 2))
    return e @ c, (-2.0 * d / ell**2 * e) @ c


def exponential_kernel_norm(oracle, base_length):
    """Exact norm of ``f - mean`` on ``[a, a + edge]`` for the Matérn-1/2 kernel with ``l = base * edge``.

    On an interval the norm is ``l/2 int g'^2 + 1/(2l) int g^2 + (g(a)^2 + g(b)^2)/2``;
    the integrals use 200-point Gauss-Legendre quadrature.
    """
    def bound(origin, edge, mean):
        a = float(origin[0])
        ell = base_length * edge
        x = a + (_GL_X + 1.0) * edge / 2.0
        w = _GL_W * edge / 2.0
        f, df = _se_sum_1d(oracle, x)
        g = f - mean[0]
        ends = _se_sum_1d(oracle, np.array([a, a + edge]))[0] - mean[0]
        sq = ell / 2.0 * (w @ df**2) + (w @ g**2) / (2.0 * ell) + 0.5 * (ends @ ends)
        return np.sqrt(sq) * (1.0 + 1e-9)

    return bound


def reference_norm_2d(oracle, kernel, margin=1.5, p=4):
    """``margin`` times the interpolant norm of ``f - mean`` on a 17x17 grid of the sub-domain."""
    def bound(origin, edge, mean):
        return margin * interpolant_norms(oracle, origin, edge, kernel, [p], mean=mean)[p]

    return bound


def synthetic_suite():
    rng = np.random.default_rng(2024)
    one_d = [SyntheticRkhsOracle(Kernel("se", ell), rng.random((k, 1)), rng.normal(size=k))
             for ell, k in ((0.3, 6), (0.2, 8), (0.5, 4))]
    two_d = []
    for ell, scale in ((0.6, 0.2), (0.8, 0.15)):
        two_d.append(SyntheticRkhsOracle(Kernel("se", ell), rng.random((5, 2)), scale * rng.normal(size=5)))
    return one_d, two_d


def test_criterion_1_certified_bound(verdict):
    one_d, two_d = synthetic_suite()
    exp_kernel = Kernel("matern", 0.8, 0.5)
    cases = [(o, exp_kernel, exponential_kernel_norm(o, 0.8), "1D exact") for o in one_d]
    cases += [(o, MATERN32, reference_norm_2d(o, MATERN32), "2D reference") for o in two_d]
    t0 = time.perf_counter()
    worst, violations, details = 0.0, 0, []
    for oracle, kernel, bound, kind in cases:
        for eps in (1e-2, 1e-3):
            cfg = ApproxConfig(eps, kernel=kernel, gamma_mode="oracle", gamma_oracle=bound)
            model, report = approximate(oracle, None, cfg)
            result = validate_error_grid(model, oracle, 201)
            violations += result["violations"]
            worst = max(worst, float(result["max_err"][0]) / eps)
            details.append(f"{kind} norm={oracle.norm:.3f} eps={eps:g}: {report.total_samples} samples, "
                           f"max_err/eps={float(result['max_err'][0]) / eps:.3f}")
    elapsed = time.perf_counter() - t0
    passed = violations == 0 and elapsed < 300
    verdict(1, passed, f"{violations} violations over 10 builds, worst max_err/eps {worst:.3f}, {elapsed:.0f} s")
    print("\n".join(details))
    assert violations == 0
    assert elapsed < 300


# criterion 2 ---------------------------------------------------------------

def test_criterion_2_extrapolation_reproduction(verdict):
    def run():
        norms = interpolant_norms(SincosOracle(), [0.0, 0.0], 1 / 3, MATERN32, [2, 3])
        gamma_bar = audit_extrapolation(SincosOracle(), [([0.0, 0.0], 1 / 3)], MATERN32, 1e-6)[0]["gamma_bar"][0]
        return float(norms[2][0]), float(norms[3][0]), float(gamma_bar)

    (n5, n9, gb), elapsed = _timed(run)
    errors = [abs(n5 / 2.50389 - 1), abs(n9 / 2.61453 - 1), abs(gb / 2.75974 - 1)]
    passed = max(errors) < 0.01 and elapsed < 10
    verdict(2, passed, f"norms {n5:.5f}, {n9:.5f}, Gamma_bar {gb:.5f}; max rel err {max(errors):.1e}; {elapsed:.2f} s")
    assert passed


# criterion 3 ---------------------------------------------------------------

def test_criterion_3_center_power_identity(verdict):
    def run():
        worst = 0.0
        for kernel in (Kernel("se", 1.0), Kernel("matern", 1.0, 1.5), Kernel("matern", 1.0, 2.5)):
            for n in (1, 2, 3):
                for ratio in (2.0, 1.0, 0.5, 0.25, 0.125, 0.0625):
                    direct = power_function(kernel, cube_vertices(n, ratio), np.full(n, ratio / 2))
                    worst = max(worst, abs(float(np.ravel(direct)[0]) - center_power_closed_form(kernel, n, ratio)))
        return worst

    worst, elapsed = _timed(run)
    passed = worst <= 1e-10 and elapsed < 10
    verdict(3, passed, f"54 cases, max |closed form - direct| {worst:.1e}, {elapsed:.2f} s")
    assert passed


# criterion 4 ---------------------------------------------------------------

def test_criterion_4_two_point_identity(verdict):
    rng = np.random.default_rng(4)
    lo = rng.uniform(0, 20, 1000)
    hi = rng.uniform(0, 20, 1000)
    eps = 10 ** rng.uniform(-8, 0, 1000)
    p = rng.integers(1, 7, 1000)

    def run():
        worst = 0.0
        for a, b, e, q in zip(lo, hi, eps, p):
            fit = extrapolate_gamma(a, b, e, int(q))
            worst = max(worst, abs(fit.gamma(q) / fit.gamma_hat_lo - 1), abs(fit.gamma(q + 1) / fit.gamma_hat_hi - 1))
        return worst

    worst, elapsed = _timed(run)
    passed = worst <= 1e-12 and elapsed < 1
    verdict(4, passed, f"1000 tuples, max rel deviation {worst:.1e}, {elapsed:.3f} s")
    assert passed


# criterion 5 ---------------------------------------------------------------

def test_criterion_5_condition_precheck(verdict):
    bounds, elapsed = _timed(lambda: precheck_kappa_bar(MATERN32, 2, 2, 5))
    rel = abs(bounds.kappa_bar / 1.14e8 - 1)
    passed = rel < 0.05 and elapsed < 5
    verdict(5, passed, f"kappa_bar {bounds.kappa_bar:.4g} (cube {bounds.cube:.3g}, grid {bounds.grid_configured:.3g}), "
                       f"rel err {rel:.3f}, {elapsed:.2f} s")
    assert passed


# criteria 6 and 10 -----------------------------------------------------------

_C6 = {}


def _sincos_build(workers):
    cfg = ApproxConfig(1e-3, kernel=MATERN32, workers=workers, time_limit=180.0)
    return approximate(SincosOracle(), None, cfg)


def test_criterion_6_sincos_pipeline(verdict):
    t0 = time.perf_counter()
    try:
        model, report = _sincos_build(4)
    except BuildBudgetExceeded as exc:
        _C6["failure"] = str(exc)
        verdict(6, False, f"not attainable here: {exc} (1 core, 5 GB)")
        pytest.fail(f"criterion 6: {exc}")
    build_time = time.perf_counter() - t0
    result = validate_error_grid(model, SincosOracle(), 301)
    _C6["model"] = model
    detail = f"build {build_time:.0f} s, {report.total_samples} samples, {result['violations']} violations"
    if result["violations"]:
        pts = np.asarray(result["violation_points"])
        flagged = [r for r in audit_extrapolation(SincosOracle(), model) if not r["ok"]]
        detail += f", audit flags {len(flagged)} sub-domains for {len(pts)} violation points"
    passed = build_time < 180
    verdict(6, passed, detail)
    assert passed


def test_criterion_10_determinism(verdict):
    if "model" not in _C6:
        reason = _C6.get("failure", "criterion-6 build not run")
        verdict(10, False, f"depends on the criterion-6 build, which did not finish ({reason})")
        pytest.fail("criterion 10 needs the criterion-6 build")
    with tempfile.TemporaryDirectory() as tmp:
        save(_C6["model"], Path(tmp) / "w4.alkx")
        single, _ = _sincos_build(1)
        save(single, Path(tmp) / "w1.alkx")
        same = (Path(tmp) / "w4.alkx").read_bytes() == (Path(tmp) / "w1.alkx").read_bytes()
    verdict(10, same, "workers 1 vs 4 model files " + ("identical" if same else "differ"))
    assert same


# criterion 7 ---------------------------------------------------------------

def test_criterion_7_complexity_trend(verdict):
    rng = np.random.default_rng(7)
    oracle = SyntheticRkhsOracle(Kernel("se", 0.2), rng.random((8, 1)), rng.normal(size=8))
    cfg = ApproxConfig(1e-1, kernel=Kernel("se", 0.8))
    rows, elapsed = _timed(lambda: complexity_sweep(oracle, cfg, [1e-1, 1e-2, 1e-3, 1e-4]))
    samples = [r["samples"] for r in rows]
    slope = fit_complexity_slope(rows)
    monotone = all(b >= a for a, b in zip(samples, samples[1:]))
    passed = monotone and slope <= 1.5 and elapsed < 120
    verdict(7, passed, f"samples {samples}, slope {slope:.3f}, {elapsed:.1f} s")
    assert passed


# criterion 8 ---------------------------------------------------------------

def test_criterion_8_power_function_peak(verdict):
    rows, elapsed = _timed(lambda: check_assumption2(MATERN32, 2, [1.0, 0.5, 0.25, 0.125] + [2.0 ** -p / 0.8 for p in range(2, 6)], 101))
    passed = all(r["max_at_center"] for r in rows) and elapsed < 10
    verdict(8, passed, f"{len(rows)} spacings at 101^2 probes, peak at centre in all: {passed}, {elapsed:.2f} s")
    assert passed


# criterion 9 ---------------------------------------------------------------

def _exact_loop_stays_feasible(oracle, z, steps):
    x = z
    for _ in range(steps):
        r = oracle.query(x)
        if not r.feasible:
            return False
        x = oracle.deviation_step(x, r.values[0])
    return True


def _closed_loop_starts(model, oracle, count, rng, steps=200):
    """Random feasible states from which the exact MPC itself keeps feasibility.

    The toy MPC has no terminal set, so some feasible states drift out of
    the feasible set even under the exact controller; those say nothing
    about the approximation and are skipped (and counted).
    """
    starts, skipped = [], 0
    while len(starts) < count:
        z = rng.uniform(-0.2, 0.2, 2)
        if not (evaluate_batch(model, z[None]).ok[0] and oracle.query(z).feasible):
            continue
        if _exact_loop_stays_feasible(oracle, z, steps):
            starts.append(z)
        else:
            skipped += 1
    return starts, skipped


def test_criterion_9_cstr_pipeline(verdict, tmp_path):
    oracle = CstrMpcOracle()
    cfg = ApproxConfig(5e-2, kernel=MATERN32, cache=True, workers=4)
    (model, report), build_time = _timed(lambda: approximate(oracle, None, cfg))
    save(model, tmp_path / "cstr.alkx")
    model = load(tmp_path / "cstr.alkx")
    check = validate_error_grid(model, oracle, 150)

    rng = np.random.default_rng(9)
    queries = oracle.domain.from_unit(rng.random((5000, 2)))
    queries = queries[evaluate_batch(model, queries).ok]
    for z in queries[:200]:
        evaluate(model, z)
    latency = np.empty(len(queries))
    for i, z in enumerate(queries):
        t0 = time.perf_counter_ns()
        evaluate(model, z)
        latency[i] = (time.perf_counter_ns() - t0) * 1e-3
    median_us = float(np.median(latency))

    loops_ok = 0
    starts, skipped = _closed_loop_starts(model, oracle, 5, rng)
    for z0 in starts:
        try:
            run = closed_loop_sim(model, oracle.deviation_step, z0, 200,
                                  [oracle.cfg.input_lower], [oracle.cfg.input_upper])
            loops_ok += run.constraints_ok
        except InfeasibleRegionError:
            pass

    passed = build_time < 1800 and check["violations"] == 0 and median_us < 1000 and loops_ok == 5
    verdict(9, passed, f"build {build_time:.0f} s, {report.total_samples} samples, {len(model.tree.leaves())} leaves; "
                       f"150^2 grid: {check['checked']} checked, {check['skipped_infeasible']} infeasible skipped, "
                       f"{check['violations']} violations, max_err {float(check['max_err'][0]):.2e}; "
                       f"median latency {median_us:.1f} us; closed loop {loops_ok}/5 within constraints "
                       f"({skipped} candidate starts skipped: exact MPC loses feasibility)")
    assert passed
