"""A posteriori checks of a build and of its working assumptions.

All tables are returned as lists of dicts (one per row) so they can be
written with :func:`write_table`.
"""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from .evaluator import Model, evaluate, evaluate_batch
from .kernels import Kernel, cholesky, covariance_matrix, covariance_vector, cube_vertices
from .partition import Status, grid_indices

__all__ = [
    "validate_error_grid",
    "check_assumption2",
    "audit_extrapolation",
    "interpolant_norms",
    "complexity_sweep",
    "fit_complexity_slope",
    "ClosedLoopResult",
    "closed_loop_sim",
    "write_table",
]


def _axis_grid(lower, upper, k):
    axes = [np.linspace(a, b, k) for a, b in zip(lower, upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def validate_error_grid(model: Model, oracle, points_per_axis: int | None = None, points=None, chunk: int = 20000) -> dict:
    """Compare model and oracle on an equidistant grid of the domain box.

    Points the oracle declares infeasible are skipped.  Oracle-feasible
    points that fall into an infeasible leaf cannot be evaluated and are
    counted as ``uncovered`` rather than as violations.

    Parameters
    ----------
    points_per_axis : int
        Grid resolution per axis; ignored when ``points`` is given.
    points : array_like, optional
        Explicit evaluation points (original units).

    Returns
    -------
    dict
        ``max_err`` (per output), ``argmax`` (point per output),
        ``violations`` (count of points with some error above epsilon),
        ``violation_points``, ``checked``, ``skipped_infeasible``,
        ``uncovered``.
    """
    lo, hi = model.transform.lower, model.transform.upper
    pts = np.asarray(points, dtype=float).reshape(-1, model.dim) if points is not None else _axis_grid(lo, hi, points_per_axis)
    max_err = np.zeros(model.output_dim)
    argmax = np.full((model.output_dim, model.dim), np.nan)
    violation_points = []
    checked = skipped = uncovered = 0
    for start in range(0, len(pts), chunk):
        block = pts[start:start + chunk]
        truth = oracle.query_many(block)
        feasible = truth.feasible
        skipped += int((~feasible).sum())
        res = evaluate_batch(model, block[feasible])
        ok = res.ok
        uncovered += int((~ok).sum())
        good = block[feasible][ok]
        err = np.abs(truth.values[feasible][ok] - res.values[ok])
        checked += len(good)
        if len(good):
            idx = np.argmax(err, axis=0)
            for j in range(model.output_dim):
                if err[idx[j], j] > max_err[j]:
                    max_err[j] = err[idx[j], j]
                    argmax[j] = good[idx[j]]
            bad = np.any(err > model.epsilon, axis=1)
            violation_points.extend(good[bad].tolist())
    return {
        "max_err": max_err,
        "argmax": argmax,
        "violations": len(violation_points),
        "violation_points": violation_points,
        "checked": checked,
        "skipped_infeasible": skipped,
        "uncovered": uncovered,
    }


def check_assumption2(kernel: Kernel, n: int, dx_over_l, probe_resolution: int) -> list:
    """Does the power function of a ``2^n``-vertex cube peak at its centre?

    The cube edge is given relative to the kernel length scale, so only
    the kernel family matters.  The power function is evaluated on a
    ``probe_resolution^n`` grid over the closed cube.

    Returns
    -------
    list of dict
        Per spacing: ``dx_over_l``, ``max_at_center`` (centre value within
        ``1e-10`` of the probe maximum), ``max_location`` (relative to the
        cube, in units of its edge), ``max_value``, ``center_value``.
    """
    if n > 3:
        raise ValueError("brute-force probing is limited to n <= 3")
    unit = Kernel(kernel.family, 1.0, kernel.nu)
    rows = []
    probe = _axis_grid((0.0,) * n, (1.0,) * n, probe_resolution)
    for ratio in np.atleast_1d(dx_over_l):
        ratio = float(ratio)
        verts = cube_vertices(n, ratio)
        factor = cholesky(covariance_matrix(unit, verts))
        k = covariance_vector(unit, verts, probe * ratio)
        quad = np.einsum("ij,ji->i", k, linalg.cho_solve(factor, k.T, check_finite=False))
        power = np.sqrt(np.maximum(1.0 - quad, 0.0))
        kc = covariance_vector(unit, verts, np.full(n, ratio / 2.0))
        center = math.sqrt(max(1.0 - kc @ linalg.cho_solve(factor, kc, check_finite=False), 0.0))
        i = int(np.argmax(power))
        rows.append({
            "dx_over_l": ratio,
            "max_at_center": bool(power[i] <= center + 1e-10),
            "max_location": probe[i].tolist(),
            "max_value": float(power[i]),
            "center_value": center,
        })
    return rows


def interpolant_norms(oracle, origin, edge: float, kernel: Kernel, ps, mean=None) -> dict:
    """Interpolant norms of a mean-shifted oracle on one cube, per grid exponent.

    Parameters
    ----------
    origin, edge
        Cube in unit coordinates of the oracle's domain.
    kernel : Kernel
        Base kernel; the cube uses length scale ``kernel.length_scale * edge``.
    ps : iterable of int
        Grid exponents; the grid at ``p`` has ``(1 + 2^p)^n`` points.
    mean : array_like, optional
        Shift applied to every grid.  By default each grid is centred on
        its own sample mean.

    Returns
    -------
    dict
        ``{p: ndarray of one norm per output}``.
    """
    origin = np.asarray(origin, dtype=float).reshape(-1)
    n = origin.size
    out = {}
    for p in ps:
        unit_pts = np.ldexp(grid_indices(n, p).astype(float), -p)
        values = oracle.query_many(oracle.domain.from_unit(origin + edge * unit_pts)).values
        shift = values.mean(axis=0) if mean is None else np.asarray(mean, dtype=float)
        # the normalized Gram matrix only depends on p once lengths scale with the edge
        factor = cholesky(covariance_matrix(kernel, unit_pts))
        shifted = values - shift
        w = linalg.cho_solve(factor, shifted, check_finite=False)
        out[p] = np.sqrt(np.maximum(np.einsum("ij,ij->j", shifted, w), 0.0))
    return out


def _region_audit(oracle, origin, edge, kernel, p_lo, p_hi, epsilon, center_each_grid):
    from .approximator import extrapolate_gamma

    coarse_mean = None
    if not center_each_grid:
        n = len(origin)
        unit_pts = np.ldexp(grid_indices(n, p_lo).astype(float), -p_lo)
        coarse_mean = oracle.query_many(oracle.domain.from_unit(np.asarray(origin) + edge * unit_pts)).values.mean(axis=0)
    norms = interpolant_norms(oracle, origin, edge, kernel, [p_lo, p_lo + 1, p_hi], coarse_mean)
    if center_each_grid:
        norms[p_lo] = interpolant_norms(oracle, origin, edge, kernel, [p_lo])[p_lo]
    gamma_bar = np.array([extrapolate_gamma(a, b, epsilon, p_lo).gamma_bar
                          for a, b in zip(norms[p_lo], norms[p_lo + 1])])
    return gamma_bar, norms[p_hi]


def audit_extrapolation(oracle, partitions, kernel: Kernel | None = None, epsilon: float | None = None,
                        p_lo: int = 2, p_hi: int = 5, center_each_grid: bool = True) -> list:
    """Flag sub-domains whose norm bound is provably too small.

    The interpolant norm at the finest grid ``p_hi`` is a lower bound on
    the norm of the shifted restriction, so a bound below it certifies a
    failure of the extrapolation heuristic.  A bound above it is
    necessary but not sufficient for correctness.

    Parameters
    ----------
    partitions : Model or iterable of (origin, edge)
        Either a model, whose approximated leaves are audited with the
        model's kernel, epsilon and exponents, or explicit cubes in unit
        coordinates of the oracle's domain.

    Returns
    -------
    list of dict
        ``origin``, ``edge``, ``gamma_bar``, ``norm_lower_bound``,
        ``global_norm`` (known norm of a synthetic oracle, else None) and
        ``ok``.
    """
    if isinstance(partitions, Model):
        model = partitions
        kernel, epsilon, p_lo, p_hi = model.kernel, model.epsilon, model.p_lo, model.p_hi
        regions = [(leaf.origin, leaf.edge) for leaf in model.tree.leaves() if leaf.status == Status.APPROXIMATED]
    else:
        if kernel is None or epsilon is None:
            raise ValueError("kernel and epsilon are required for explicit regions")
        regions = [(np.asarray(o, dtype=float), float(e)) for o, e in partitions]
    global_norm = getattr(oracle, "norms", None)
    rows = []
    for origin, edge in regions:
        gamma_bar, lower = _region_audit(oracle, origin, edge, kernel, p_lo, p_hi, epsilon, center_each_grid)
        rows.append({
            "origin": np.asarray(origin).tolist(),
            "edge": edge,
            "gamma_bar": gamma_bar,
            "norm_lower_bound": lower,
            "global_norm": None if global_norm is None else np.asarray(global_norm),
            "ok": bool(np.all(gamma_bar >= lower)),
        })
    return rows


def complexity_sweep(oracle, cfg, epsilons, domain=None) -> list:
    """Build once per epsilon (which must decrease) and tabulate the cost.

    ``cfg`` is an :class:`~alkiax.approximator.ApproxConfig` whose epsilon
    is replaced per row.  Row keys: ``epsilon``, ``samples``,
    ``subdomains``, ``leaves``, ``max_depth``, ``min_edge`` and
    ``min_length_scale`` (unit-cube units).
    """
    from .approximator import approximate

    epsilons = [float(e) for e in epsilons]
    if any(b >= a for a, b in zip(epsilons, epsilons[1:])):
        raise ValueError("epsilons must be strictly decreasing")
    rows = []
    for eps in epsilons:
        model, report = approximate(oracle, domain, replace(cfg, epsilon=eps))
        leaves = model.tree.leaves()
        rows.append({
            "epsilon": eps,
            "samples": report.total_samples,
            "subdomains": report.subdomain_count,
            "leaves": len(leaves),
            "max_depth": report.max_depth_reached,
            "min_edge": min(leaf.edge for leaf in leaves),
            "min_length_scale": min(leaf.edge for leaf in leaves) * cfg.kernel.length_scale,
        })
    return rows


def fit_complexity_slope(rows) -> float:
    """Least-squares slope of ``log(samples)`` against ``log(1/epsilon)``."""
    x = np.log([1.0 / r["epsilon"] for r in rows])
    y = np.log([r["samples"] for r in rows])
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class ClosedLoopResult:
    """Simulated trajectory.

    ``states`` has ``steps + 1`` rows, ``inputs`` ``steps`` rows (after
    clamping).  ``converged_radius`` is the largest distance to the target
    over the last 10 % of the steps.
    """

    states: np.ndarray
    inputs: np.ndarray
    constraints_ok: bool
    converged_radius: float


def closed_loop_sim(model: Model, dynamics_step, x0, steps: int, input_lower=None, input_upper=None,
                    target=None) -> ClosedLoopResult:
    """Roll ``x+ = dynamics_step(x, h(x))`` with the model as controller.

    Model outputs are clamped to ``[input_lower, input_upper]`` before
    use, since interpolation may overshoot the input box between nodes
    by up to epsilon.  States must stay in the model's domain box.

    Raises
    ------
    InfeasibleRegionError
        The trajectory entered an infeasible leaf.
    """
    x = np.asarray(x0, dtype=float).copy()
    target = np.zeros(model.dim) if target is None else np.asarray(target, dtype=float)
    lo, hi = np.array(model.transform.lower), np.array(model.transform.upper)
    u_lo = -np.inf if input_lower is None else np.asarray(input_lower, dtype=float)
    u_hi = np.inf if input_upper is None else np.asarray(input_upper, dtype=float)
    states = [x.copy()]
    inputs = []
    ok = True
    for _ in range(steps):
        if not (np.all(x >= lo) and np.all(x <= hi)):
            ok = False
            break
        u = np.clip(evaluate(model, x), u_lo, u_hi)
        ok = ok and bool(np.all(u >= u_lo) and np.all(u <= u_hi))
        x = np.asarray(dynamics_step(x, u), dtype=float)
        states.append(x.copy())
        inputs.append(u)
    states = np.array(states)
    ok = ok and bool(np.all(states >= lo) and np.all(states <= hi))
    tail = states[-max(1, len(states) // 10):]
    radius = float(np.max(np.linalg.norm(tail - target, axis=1)))
    return ClosedLoopResult(states, np.array(inputs).reshape(len(inputs), -1), ok, radius)


def write_table(rows, stream=None, columns=None):
    """Write rows (dicts) as CSV to ``stream`` (standard output by default)."""
    stream = stream or sys.stdout
    if not rows:
        return
    columns = columns or list(rows[0].keys())
    writer = csv.writer(stream)
    writer.writerow(columns)
    for row in rows:
        cells = []
        for c in columns:
            v = row[c]
            if isinstance(v, np.ndarray):
                v = " ".join(f"{x:.10g}" for x in v.ravel())
            elif isinstance(v, (list, tuple)):
                v = " ".join(f"{x:.10g}" if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = f"{v:.10g}"
            cells.append(v)
        writer.writerow(cells)
