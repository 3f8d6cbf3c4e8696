"""Offline construction of the piecewise kernel interpolant.

The unit cube is refined adaptively.  For each pending sub-domain the
oracle is sampled on the ``(1 + 2^(p_lo+1))^n`` grid, a bound on the
RKHS norm of the mean-shifted restriction is obtained (extrapolated from
two grid levels, or supplied by a user callback), and the smallest grid
exponent whose centre power times that bound stays below ``epsilon`` is
computed.  If it is at most ``p_hi`` the sub-domain is interpolated cube
by cube; otherwise it is split into ``2^n`` children.

Every sub-domain uses the kernel length scale ``length_scale * edge``, so
all Gram matrices depend only on the grid exponent and are factorized
once per build.
"""

from __future__ import annotations

import hashlib
import math
import sys
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from .errors import BuildBudgetExceeded, ConfigurationRejected, DomainError, IllConditionedError, MaxDepthExceeded, OracleError
from .kernels import (
    Kernel,
    center_power_closed_form,
    cholesky,
    condition_number_inf,
    covariance_matrix,
    cube_vertices,
    kappa_inv,
)
from .partition import DomainTransform, PartitionTree, Status, SubDomain, grid_indices, local_cubes_of

__all__ = [
    "ApproxConfig",
    "ConditionBounds",
    "RkhsExtrapolation",
    "BuildReport",
    "precheck_kappa_bar",
    "empirical_mean",
    "extrapolate_gamma",
    "required_p",
    "build_local_functions",
    "approximate",
]

GAMMA_MODES = ("extrapolate", "oracle")


@dataclass
class ApproxConfig:
    """Build settings.

    Parameters
    ----------
    epsilon : float
        Uniform error bound per output, in output units.
    kernel : Kernel
        Kernel family and *base* length scale.  A sub-domain of edge
        ``e`` (unit-cube units) uses length scale ``kernel.length_scale * e``.
    p_lo, p_hi : int
        Smallest and largest grid exponent per sub-domain.
    gamma_mode : {"extrapolate", "oracle"}
        How the RKHS-norm bound of each sub-domain is obtained.  In
        ``"oracle"`` mode ``gamma_oracle(origin, edge, mean)`` is called
        with unit-cube geometry and the sub-domain mean, and must return
        one bound per output (or a scalar).
    center_each_grid : bool
        Centre the samples of each of the two extrapolation grids on their
        own mean before computing interpolant norms.  When False both
        grids are shifted by the mean of the coarse grid.
    assumption2_override : bool
        Skip the brute-force check that the power function of a local
        cube peaks at its centre.
    keep_samples : bool
        Keep the shifted grid samples on each leaf for diagnostics.
    time_limit : float, optional
        Wall-clock budget in seconds; the build aborts with
        :class:`~alkiax.errors.BuildBudgetExceeded` once it is spent.
    """

    epsilon: float
    kernel: Kernel = field(default_factory=lambda: Kernel("matern", 0.8, 1.5))
    p_lo: int = 2
    p_hi: int = 5
    gamma_mode: str = "extrapolate"
    gamma_oracle: Callable | None = None
    max_depth: int = 20
    workers: int = 1
    cache: bool = False
    center_each_grid: bool = True
    assumption2_override: bool = False
    keep_samples: bool = False
    verbose: bool = False
    envelope_limit: int = 5000
    time_limit: float | None = None

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")
        if not (1 <= self.p_lo < self.p_hi):
            raise DomainError(f"need 1 <= p_lo < p_hi, got p_lo={self.p_lo}, p_hi={self.p_hi}")
        if self.max_depth < 1:
            raise DomainError("max_depth must be at least 1")
        if self.workers < 1:
            raise DomainError("workers must be at least 1")
        if self.gamma_mode not in GAMMA_MODES:
            raise DomainError(f"gamma_mode must be one of {GAMMA_MODES}")
        if self.gamma_mode == "oracle" and self.gamma_oracle is None:
            raise DomainError("gamma_mode='oracle' needs a gamma_oracle callback")


@dataclass(frozen=True)
class ConditionBounds:
    """Condition numbers of the matrices a build will factorize.

    ``cube`` is the worst induced-infinity condition number of the
    ``2^n`` local-cube matrix over ``p_lo..p_hi`` (``per_p`` lists each);
    ``grid`` that of the ``(1 + 2^(p_lo+1))^n`` unit-cube grid matrix
    with length scale 1, and ``grid_configured`` the same grid with the
    configured length scale.  ``envelope`` is the spectral condition
    number of the full ``(1 + 2^p_hi)^n`` grid with length scale 1, a
    bound covering every sub-matrix; it is None when that grid exceeds
    the size limit.
    """

    cube: float
    grid: float
    grid_configured: float
    envelope: float | None
    per_p: dict

    @property
    def kappa_bar(self) -> float:
        values = [self.cube, self.grid, self.grid_configured]
        if self.envelope is not None:
            values.append(self.envelope)
        return max(values)


def _unit_grid(n, p):
    return np.ldexp(grid_indices(n, p).astype(float), -p)


def _factor_or_reject(matrix, what, p_hi):
    try:
        cholesky(matrix)
    except IllConditionedError as exc:
        raise ConfigurationRejected(f"{what} cannot be factorized; reduce p_hi (currently {p_hi}) "
                                    "or the kernel length scale") from exc


def precheck_kappa_bar(kernel: Kernel, n: int, p_lo: int, p_hi: int, envelope_limit: int = 5000) -> ConditionBounds:
    """Condition numbers bounding every matrix factorized during a build.

    Raises
    ------
    ConfigurationRejected
        If one of the matrices is numerically not positive definite.
    """
    if not (1 <= p_lo < p_hi):
        raise DomainError("need 1 <= p_lo < p_hi")
    per_p = {}
    for p in range(p_lo, p_hi + 1):
        m = covariance_matrix(kernel, cube_vertices(n, math.ldexp(1.0, -p)))
        _factor_or_reject(m, f"local-cube matrix at p={p}", p_hi)
        per_p[p] = condition_number_inf(m)
    unit = Kernel(kernel.family, 1.0, kernel.nu)
    grid_pts = _unit_grid(n, p_lo + 1)
    grid_conf = covariance_matrix(kernel, grid_pts)
    _factor_or_reject(grid_conf, f"grid matrix at p={p_lo + 1}", p_hi)
    # the length-scale-1 matrices are reference figures only; the build never factorizes them
    try:
        grid_unit = condition_number_inf(covariance_matrix(unit, grid_pts))
    except (IllConditionedError, np.linalg.LinAlgError):
        grid_unit = math.inf
    envelope = None
    if (1 + 2**p_hi) ** n <= envelope_limit:
        envelope = float(np.linalg.cond(covariance_matrix(unit, _unit_grid(n, p_hi)), 2))
    return ConditionBounds(max(per_p.values()), grid_unit, condition_number_inf(grid_conf), envelope, per_p)


def empirical_mean(samples) -> np.ndarray:
    """Per-output mean of samples given as rows (shape ``(N,)`` or ``(N, n_out)``)."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    return samples.mean(axis=0)


@dataclass(frozen=True)
class RkhsExtrapolation:
    """Exponential fit through the offset norms of two grid levels.

    ``gamma(p) = gamma_bar * exp(-tau / (1 + 2^p))`` passes through
    ``gamma_hat_lo`` at ``p_lo`` and ``gamma_hat_hi`` at ``p_lo + 1``;
    ``gamma_bar`` is its limit as ``p`` grows.
    """

    gamma_hat_lo: float
    gamma_hat_hi: float
    lam: float
    tau: float
    gamma_bar: float
    p_lo: int

    def gamma(self, p) -> float:
        return self.gamma_bar * math.exp(-self.tau / (1.0 + 2.0**p))


def extrapolate_gamma(norm_lo: float, norm_hi: float, epsilon: float, p_lo: int) -> RkhsExtrapolation:
    """Extrapolate interpolant norms at ``p_lo`` and ``p_lo + 1`` to a norm bound.

    Both norms are offset by ``epsilon / 2^(lam + 1)`` with
    ``lam = 2 + 2^-p_lo`` so the fit is defined even for zero norms.
    """
    if norm_lo < 0 or norm_hi < 0:
        raise DomainError("norms must be nonnegative")
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    lam = 2.0 + 2.0 ** (-p_lo)
    offset = epsilon / 2.0 ** (lam + 1.0)
    lo = norm_lo + offset
    hi = norm_hi + offset
    ratio = hi / lo
    tau = math.log(ratio) * lam * (1.0 + 2.0**p_lo)
    gamma_bar = lo * ratio**lam
    return RkhsExtrapolation(lo, hi, lam, tau, gamma_bar, p_lo)


def required_p(kernel: Kernel, edge: float, n: int, epsilon: float, gamma_bar: float, p_lo: int) -> int:
    """Grid exponent that certifies ``epsilon`` on a sub-domain of width ``edge``.

    ``kernel`` must already carry the sub-domain length scale.  Returns
    ``max(p_lo, p*)`` where ``p*`` is the smallest exponent whose cube
    half-diagonal ``sqrt(n) edge / 2^(p+1)`` stays within
    ``kappa_inv(0.5 (epsilon / gamma_bar)^2)``; ``p* = 0`` if
    ``epsilon >= gamma_bar``.
    """
    if not (epsilon > 0 and gamma_bar > 0):
        raise DomainError("epsilon and gamma_bar must be positive")
    if epsilon >= gamma_bar:
        return p_lo
    radius = kappa_inv(kernel, 0.5 * (epsilon / gamma_bar) ** 2)
    if radius <= 0.0:
        raise DomainError(f"epsilon/gamma_bar = {epsilon / gamma_bar:.3e} is below floating-point resolution")
    p_star = max(0, math.ceil(math.log2(edge * math.sqrt(n) / (2.0 * radius))))
    return max(p_lo, p_star)


class _Factors:
    """Cholesky factors of the normalized grid and cube matrices, by exponent."""

    def __init__(self, kernel: Kernel, n: int):
        self.kernel = kernel
        self.n = n
        self._grid = {}
        self._cube = {}
        self._lock = threading.Lock()

    def grid(self, p):
        with self._lock:
            if p not in self._grid:
                self._grid[p] = cholesky(covariance_matrix(self.kernel, _unit_grid(self.n, p)))
            return self._grid[p]

    def cube(self, p):
        with self._lock:
            if p not in self._cube:
                self._cube[p] = cholesky(covariance_matrix(self.kernel, cube_vertices(self.n, math.ldexp(1.0, -p))))
            return self._cube[p]


_shared_factors = {}
_shared_lock = threading.Lock()


def _factors_for(kernel, n):
    with _shared_lock:
        key = (kernel, n)
        if key not in _shared_factors:
            _shared_factors[key] = _Factors(kernel, n)
        return _shared_factors[key]


def _rkhs_norms(factor, values):
    w = linalg.cho_solve(factor, values, check_finite=False)
    return np.sqrt(np.maximum(np.einsum("ij,ij->j", values, w), 0.0))


def build_local_functions(sub: SubDomain, p: int, samples, kernel: Kernel) -> np.ndarray:
    """Interpolation weights of every local cube of ``sub`` at exponent ``p``.

    Parameters
    ----------
    samples : ndarray, shape ((1 + 2^p)^n,) or ((1 + 2^p)^n, n_out)
        Mean-shifted values on :func:`grid_points` ``(sub, p)``.
    kernel : Kernel
        Base kernel (length scale relative to the sub-domain edge).

    Returns
    -------
    ndarray, shape (2^(p n), n_out, 2^n)
        Weights per cube (lexicographic), output and vertex.  One
        factorization serves all cubes since their Gram matrices coincide.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    n = sub.dim
    if samples.shape[0] != (1 + 2**p) ** n:
        raise DomainError(f"expected {(1 + 2**p) ** n} samples, got {samples.shape[0]}")
    factor = _factors_for(kernel, n).cube(p)
    _, vertex_ids = local_cubes_of(sub, p)
    n_cubes, n_vertices = vertex_ids.shape
    n_out = samples.shape[1]
    rhs = samples[vertex_ids]  # (cubes, vertices, outputs)
    rhs = rhs.transpose(1, 0, 2).reshape(n_vertices, n_cubes * n_out)
    w = linalg.cho_solve(factor, rhs, check_finite=False)
    return np.ascontiguousarray(w.reshape(n_vertices, n_cubes, n_out).transpose(1, 2, 0))


@dataclass
class BuildReport:
    """Summary of a build.  ``wall_time`` is excluded from :meth:`digest`."""

    total_samples: int = 0
    oracle_calls: int = 0
    subdomain_count: int = 0
    approximated_count: int = 0
    infeasible_count: int = 0
    max_depth_reached: int = 0
    depth_histogram: dict = field(default_factory=dict)
    p_histogram: dict = field(default_factory=dict)
    kappa: ConditionBounds | None = None
    wall_time: float = 0.0

    @property
    def leaf_count(self) -> int:
        return self.approximated_count + self.infeasible_count

    def digest(self) -> str:
        text = (f"{self.total_samples}|{self.subdomain_count}|{self.approximated_count}|{self.infeasible_count}|"
                f"{self.max_depth_reached}|{sorted(self.depth_histogram.items())}|{sorted(self.p_histogram.items())}")
        return hashlib.sha256(text.encode()).hexdigest()

    def summary(self) -> str:
        lines = [
            f"samples            {self.total_samples}",
            f"oracle calls       {self.oracle_calls}",
            f"sub-domains        {self.subdomain_count}",
            f"approximated leaves {self.approximated_count}",
            f"infeasible leaves  {self.infeasible_count}",
            f"max depth          {self.max_depth_reached}",
            f"leaves per depth   {dict(sorted(self.depth_histogram.items()))}",
            f"leaves per p       {dict(sorted(self.p_histogram.items()))}",
        ]
        if self.kappa is not None:
            lines.append(f"kappa_bar          {self.kappa.kappa_bar:.4g}")
        lines.append(f"wall time          {self.wall_time:.2f} s")
        return "\n".join(lines)


@dataclass
class _Outcome:
    action: str
    samples: int
    mean: np.ndarray | None = None
    gamma_bar: np.ndarray | None = None
    p: int = -1
    weights: np.ndarray | None = None
    shifted: np.ndarray | None = None


class _SampleSource:
    """Oracle access in unit coordinates with optional dyadic memo cache."""

    def __init__(self, oracle, transform: DomainTransform, finest_level: int, use_cache: bool):
        self.oracle = oracle
        self.transform = transform
        self.finest = finest_level
        self.use_cache = use_cache
        self.cache = {}
        self.calls = 0
        self._lock = threading.Lock()
        self._oracle_lock = None if getattr(oracle, "thread_safe", True) else threading.Lock()

    def _ask(self, unit_points):
        pts = self.transform.from_unit(unit_points)
        try:
            if self._oracle_lock is None:
                batch = self.oracle.query_many(pts)
            else:
                with self._oracle_lock:
                    batch = self.oracle.query_many(pts)
        except OracleError:
            raise
        except Exception as exc:
            raise OracleError(f"oracle raised {type(exc).__name__}: {exc}", point=pts[0]) from exc
        with self._lock:
            self.calls += len(pts)
        return batch.values, batch.feasible

    def query(self, lattice, level):
        """Values and verdicts at integer ``lattice`` points of dyadic ``level``."""
        unit = np.ldexp(lattice.astype(float), -level)
        if not self.use_cache:
            return self._ask(unit)
        keys = [tuple(row) for row in (lattice << (self.finest - level)).tolist()]
        with self._lock:
            missing = [i for i, k in enumerate(keys) if k not in self.cache]
        if missing:
            values, feasible = self._ask(unit[missing])
            with self._lock:
                for j, i in enumerate(missing):
                    self.cache[keys[i]] = (values[j], feasible[j])
        with self._lock:
            rows = [self.cache[k] for k in keys]
        return np.array([r[0] for r in rows]), np.array([r[1] for r in rows], dtype=bool)


def _even_rows(n, p):
    """Rows of the grid at exponent ``p + 1`` that form the grid at ``p``."""
    return np.flatnonzero(np.all(grid_indices(n, p + 1) % 2 == 0, axis=1))


def _embed_rows(n, p_coarse, p_fine):
    """Rows of the fine grid that coincide with the coarse grid, in coarse order."""
    shift = p_fine - p_coarse
    coarse = grid_indices(n, p_coarse) << shift
    side = (1 << p_fine) + 1
    strides = side ** np.arange(n - 1, -1, -1)
    return coarse @ strides


def _process(sub: SubDomain, cfg: ApproxConfig, source: _SampleSource, factors: _Factors) -> _Outcome:
    n = sub.dim
    p_lo = cfg.p_lo
    origin = np.array(sub.origin_index, dtype=np.int64)
    level = sub.depth + p_lo + 1
    lattice = grid_indices(n, p_lo + 1) + (origin << (p_lo + 1))
    values, feasible = source.query(lattice, level)
    n_queried = len(lattice)
    if not feasible.any():
        return _Outcome("infeasible", n_queried)
    if np.isnan(values).any():
        bad = int(np.flatnonzero(np.isnan(values).any(axis=1))[0])
        point = source.transform.from_unit(np.ldexp(lattice[bad].astype(float), -level))
        raise OracleError("infeasible answer without relaxed values inside a mixed sub-domain", point=point)

    coarse_rows = _even_rows(n, p_lo)
    coarse = values[coarse_rows]
    mean = coarse.mean(axis=0)
    norm_lo = _rkhs_norms(factors.grid(p_lo), coarse - mean)
    fine_center = values.mean(axis=0) if cfg.center_each_grid else mean
    norm_hi = _rkhs_norms(factors.grid(p_lo + 1), values - fine_center)

    if cfg.gamma_mode == "extrapolate":
        gamma_bar = np.array([extrapolate_gamma(a, b, cfg.epsilon, p_lo).gamma_bar for a, b in zip(norm_lo, norm_hi)])
    else:
        supplied = cfg.gamma_oracle(sub.origin, sub.edge, mean.copy())
        gamma_bar = np.broadcast_to(np.asarray(supplied, dtype=float), mean.shape).copy()
        # a zero bound means the shifted function vanishes; any positive bound then certifies
        gamma_bar = np.maximum(gamma_bar, np.finfo(float).tiny)

    scaled = cfg.kernel.scaled(sub.edge)
    p = max(required_p(scaled, sub.edge, n, cfg.epsilon, g, p_lo) for g in gamma_bar)
    if p > cfg.p_hi:
        return _Outcome("split", n_queried, mean=mean, gamma_bar=gamma_bar, p=p)

    if p <= p_lo + 1:
        full = values[_embed_rows(n, p, p_lo + 1)]
    else:
        fine = grid_indices(n, p) + (origin << p)
        full, _ = source.query(fine, sub.depth + p)
        n_queried += len(fine)
        if np.isnan(full).any():
            bad = int(np.flatnonzero(np.isnan(full).any(axis=1))[0])
            point = source.transform.from_unit(np.ldexp(fine[bad].astype(float), -(sub.depth + p)))
            raise OracleError("infeasible answer without relaxed values inside a mixed sub-domain", point=point)
    shifted = full - mean
    weights = build_local_functions(sub, p, shifted, cfg.kernel)
    certificate = center_power_closed_form(cfg.kernel, n, math.ldexp(1.0, -p)) * gamma_bar.max()
    if certificate > cfg.epsilon * (1.0 + 1e-9):
        raise AssertionError(f"centre-power certificate {certificate:.6e} exceeds epsilon {cfg.epsilon:.6e}")
    return _Outcome("approximated", n_queried, mean=mean, gamma_bar=gamma_bar, p=p, weights=weights,
                    shifted=shifted if cfg.keep_samples else None)


def _check_assumption2(cfg: ApproxConfig, n: int):
    if cfg.assumption2_override:
        return
    from .validation import check_assumption2

    if n > 3:
        raise ConfigurationRejected(
            f"the centre-maximum property of the power function can only be checked for n <= 3 (n={n}); "
            "set assumption2_override to proceed")
    ratios = [math.ldexp(1.0, -p) / cfg.kernel.length_scale for p in range(cfg.p_lo, cfg.p_hi + 1)]
    resolution = {1: 2001, 2: 61, 3: 21}[n]
    for row in check_assumption2(cfg.kernel, n, ratios, resolution):
        if not row["max_at_center"]:
            raise ConfigurationRejected(
                f"power function of {cfg.kernel} does not peak at the cube centre for n={n}, "
                f"dx/l={row['dx_over_l']:.4g} (max {row['max_value']:.6g} at {row['max_location']}); "
                "set assumption2_override to proceed")


def approximate(oracle, domain: DomainTransform | None, cfg: ApproxConfig):
    """Build a :class:`~alkiax.evaluator.Model` of ``oracle`` on ``domain``.

    Parameters
    ----------
    oracle : Oracle
        Ground truth queried in original units.
    domain : DomainTransform or None
        Box to approximate on; defaults to the oracle's own domain.
    cfg : ApproxConfig

    Returns
    -------
    model : Model
    report : BuildReport

    Raises
    ------
    MaxDepthExceeded
        Some sub-domain still needed refinement at ``cfg.max_depth``.
    OracleError
        The oracle failed; the query point is attached.
    """
    from .evaluator import Model

    start = time.perf_counter()
    domain = domain or oracle.domain
    n = domain.dim
    _check_assumption2(cfg, n)
    bounds = precheck_kappa_bar(cfg.kernel, n, cfg.p_lo, cfg.p_hi, cfg.envelope_limit)
    factors = _factors_for(cfg.kernel, n)
    source = _SampleSource(oracle, domain, cfg.max_depth + cfg.p_hi + 1, cfg.cache)
    tree = PartitionTree(n)
    report = BuildReport(kappa=bounds)
    depth_hist, p_hist = Counter(), Counter()

    deadline = None if cfg.time_limit is None else start + cfg.time_limit
    progress = {"samples": 0, "subdomains": 0}

    def work(sub):
        if deadline is not None and time.perf_counter() > deadline:
            raise BuildBudgetExceeded(cfg.time_limit, progress["subdomains"], progress["samples"])
        return _process(sub, cfg, source, factors)

    executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        wave = [tree.root]
        while wave:
            outcomes = list(executor.map(work, wave)) if executor else [work(s) for s in wave]
            next_wave, offending = [], []
            for sub, out in zip(wave, outcomes):
                report.subdomain_count += 1
                report.total_samples += out.samples
                progress["samples"], progress["subdomains"] = report.total_samples, report.subdomain_count
                sub.mean = out.mean
                sub.gamma_bar = out.gamma_bar
                if out.action == "infeasible":
                    sub.status = Status.INFEASIBLE
                    report.infeasible_count += 1
                    depth_hist[sub.depth] += 1
                elif out.action == "approximated":
                    sub.status = Status.APPROXIMATED
                    sub.p = out.p
                    sub.weights = out.weights
                    sub.samples = out.shifted
                    report.approximated_count += 1
                    depth_hist[sub.depth] += 1
                    p_hist[out.p] += 1
                elif sub.depth + 1 > cfg.max_depth:
                    offending.append((sub.depth, sub.origin_index))
                else:
                    next_wave.extend(tree.split(sub.id))
                if cfg.verbose:
                    gammas = "n/a" if out.gamma_bar is None else ",".join(f"{g:.4g}" for g in out.gamma_bar)
                    origin = ",".join(f"{v:.6g}" for v in sub.origin)
                    print(f"sub-domain {sub.id} depth={sub.depth} origin={origin} gamma_bar={gammas} p={out.p} "
                          f"action={out.action}",
                          file=sys.stderr)
            if offending:
                raise MaxDepthExceeded(cfg.max_depth, offending)
            wave = next_wave
    finally:
        if executor:
            executor.shutdown()

    report.oracle_calls = source.calls
    report.max_depth_reached = tree.depth()
    report.depth_histogram = dict(sorted(depth_hist.items()))
    report.p_histogram = dict(sorted(p_hist.items()))
    report.wall_time = time.perf_counter() - start
    model = Model(tree=tree, kernel=cfg.kernel, epsilon=cfg.epsilon, p_lo=cfg.p_lo, p_hi=cfg.p_hi,
                  transform=domain, output_dim=oracle.output_dim, report_digest=report.digest())
    return model, report
