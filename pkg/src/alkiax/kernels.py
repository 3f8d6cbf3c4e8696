"""Radial kernels, covariance assembly and kernel interpolation.

Every kernel here depends only on the Euclidean distance between its
arguments, ``k(x, x') = profile(||x - x'|| / length_scale)``, with a
profile that starts at one and decreases strictly towards zero.  The
complement ``kappa = 1 - profile`` and its inverse size the sampling
grids used by the approximator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from ._hot import radial_profile_array
from .errors import DomainError, DuplicatePointError, IllConditionedError

__all__ = [
    "Kernel",
    "InterpolantWeights",
    "eval_radial",
    "kappa",
    "kappa_inv",
    "covariance_matrix",
    "covariance_vector",
    "power_function",
    "interpolant_weights",
    "center_power_closed_form",
    "condition_number_inf",
    "cube_vertices",
    "cholesky",
]

_MATERN_CODES = {0.5: 1, 1.5: 2, 2.5: 3}
_RADICAND_FLOOR = -1e-12


@dataclass(frozen=True)
class Kernel:
    """A radial kernel family with a length scale.

    Parameters
    ----------
    family : {"se", "matern"}
        Squared exponential or Matérn.
    length_scale : float
        Positive length scale; distances are divided by it.
    nu : float, optional
        Matérn smoothness, one of 0.5, 1.5, 2.5.  Ignored for ``"se"``.
    """

    family: str = "matern"
    length_scale: float = 1.0
    nu: float = 1.5

    def __post_init__(self):
        if self.family not in ("se", "matern"):
            raise DomainError(f"unknown kernel family {self.family!r}; use 'se' or 'matern'")
        if self.family == "matern" and float(self.nu) not in _MATERN_CODES:
            raise DomainError(f"Matérn nu must be one of 0.5, 1.5, 2.5, got {self.nu}")
        if not (math.isfinite(self.length_scale) and self.length_scale > 0):
            raise DomainError(f"length_scale must be positive and finite, got {self.length_scale}")
        if self.family == "se":
            object.__setattr__(self, "nu", math.inf)

    @property
    def code(self) -> int:
        """Integer family code understood by the compiled evaluators."""
        return 0 if self.family == "se" else _MATERN_CODES[float(self.nu)]

    def scaled(self, factor: float) -> "Kernel":
        """Same family with the length scale multiplied by ``factor``."""
        return Kernel(self.family, self.length_scale * factor, self.nu)

    def __str__(self):
        if self.family == "se":
            return f"SE(l={self.length_scale:g})"
        return f"Matern{self.nu:g}(l={self.length_scale:g})"


@dataclass(frozen=True)
class InterpolantWeights:
    """Solution of ``K w = values``.

    ``weights`` has the shape of ``values``; ``rkhs_norm`` is a float for a
    single right-hand side and an array with one norm per column otherwise.
    """

    weights: np.ndarray
    rkhs_norm: float | np.ndarray


def _check_distance(d):
    d = np.asarray(d, dtype=float)
    if np.any(d < 0) or np.any(np.isnan(d)):
        raise DomainError("distance must be nonnegative")
    return d


def eval_radial(kernel: Kernel, d):
    """Kernel profile at distance ``d`` (scalar or array), in ``(0, 1]``."""
    d = _check_distance(d)
    out = radial_profile_array(kernel.code, d / kernel.length_scale)
    return float(out) if out.ndim == 0 else out


# Taylor coefficients of 1 - profile(s) for the Matérn families, in the
# scaled variable s = sqrt(2 nu) r.  Used below s = 0.5 to avoid the
# cancellation in 1 - (1 + s + ...) exp(-s).
def _matern_series(nu, terms=30):
    coeffs = np.zeros(terms)
    for k in range(terms):
        a = (-1) ** k / math.factorial(k)
        if nu >= 1.5 and k >= 1:
            a += (-1) ** (k - 1) / math.factorial(k - 1)
        if nu >= 2.5 and k >= 2:
            a += (-1) ** (k - 2) / math.factorial(k - 2) / 3.0
        coeffs[k] = -a
    coeffs[0] = 0.0
    return coeffs


_SERIES = {nu: _matern_series(nu) for nu in (1.5, 2.5)}


def _kappa_unit(code, r):
    """``1 - profile(r)`` for unit length scale, accurate near ``r = 0``."""
    r = np.asarray(r, dtype=float)
    if code == 0:
        return -np.expm1(-r * r)
    if code == 1:
        return -np.expm1(-r)
    nu, factor = (1.5, math.sqrt(3.0)) if code == 2 else (2.5, math.sqrt(5.0))
    s = factor * r
    direct = 1.0 - radial_profile_array(code, r)
    small = s < 0.5
    if np.any(small):
        series = np.polynomial.polynomial.polyval(np.where(small, s, 0.0), _SERIES[nu])
        direct = np.where(small, series, direct)
    return direct


def kappa(kernel: Kernel, d):
    """Complement ``1 - k(d)`` in ``[0, 1)``; zero exactly at ``d = 0``."""
    d = _check_distance(d)
    out = _kappa_unit(kernel.code, d / kernel.length_scale)
    return float(out) if out.ndim == 0 else out


def kappa_inv(kernel: Kernel, y: float) -> float:
    """Distance ``d >= 0`` with ``kappa(kernel, d) == y``.

    Closed form for the squared exponential, bisection otherwise.  The
    bisection runs until the bracket is below machine resolution of the
    upper end, which keeps the residual well below ``1e-12``.
    """
    y = float(y)
    if not (0.0 <= y < 1.0):
        raise DomainError(f"kappa_inv needs 0 <= y < 1, got {y}")
    if y == 0.0:
        return 0.0
    ell = kernel.length_scale
    if kernel.code == 0:
        return ell * math.sqrt(-math.log1p(-y))
    code = kernel.code
    lo, hi = 0.0, 1.0
    while float(_kappa_unit(code, hi)) < y:
        lo, hi = hi, 2.0 * hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if float(_kappa_unit(code, mid)) < y:
            lo = mid
        else:
            hi = mid
    return ell * hi


def _as_points(points):
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    return pts


def _pairwise_distances(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def covariance_matrix(kernel: Kernel, points) -> np.ndarray:
    """Gram matrix of ``points`` (shape ``(N, n)`` or ``(N,)`` for 1D).

    Raises
    ------
    DuplicatePointError
        If two points coincide.
    """
    pts = _as_points(points)
    dist = _pairwise_distances(pts, pts)
    off = dist[~np.eye(len(pts), dtype=bool)]
    if off.size and off.min() == 0.0:
        raise DuplicatePointError("covariance matrix needs pairwise distinct points")
    return radial_profile_array(kernel.code, dist / kernel.length_scale)


def covariance_vector(kernel: Kernel, points, x) -> np.ndarray:
    """Kernel values between ``x`` and each sample point.

    ``x`` may also be a batch of shape ``(m, n)``; the result then has
    shape ``(m, N)``.
    """
    pts = _as_points(points)
    xs = np.asarray(x, dtype=float)
    single = xs.ndim <= 1 and (xs.ndim == 0 or xs.size == pts.shape[1])
    xs = xs.reshape(-1, pts.shape[1])
    k = radial_profile_array(kernel.code, _pairwise_distances(xs, pts) / kernel.length_scale)
    return k[0] if single else k


def cholesky(matrix):
    """Lower Cholesky factor in ``scipy.linalg.cho_factor`` form, without jitter."""
    try:
        return linalg.cho_factor(matrix, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise IllConditionedError(f"Cholesky factorization failed for a {len(matrix)}x{len(matrix)} matrix") from exc


def _solve(factor, rhs):
    return linalg.cho_solve(factor, rhs, check_finite=False)


def power_function(kernel: Kernel, points, x):
    """Power function of the sample set at ``x`` (one point or a batch).

    Zero at the samples, below one everywhere.  Radicands in
    ``[-1e-12, 0)`` are treated as zero.
    """
    pts = _as_points(points)
    factor = cholesky(covariance_matrix(kernel, pts))
    xs = np.asarray(x, dtype=float)
    single = xs.ndim <= 1 and (xs.ndim == 0 or xs.size == pts.shape[1])
    k = covariance_vector(kernel, pts, xs.reshape(-1, pts.shape[1]))
    quad = np.einsum("ij,ji->i", k, _solve(factor, k.T))
    radicand = 1.0 - quad
    if np.any(radicand < _RADICAND_FLOOR):
        raise IllConditionedError(f"power function radicand {radicand.min():.3e} is negative")
    value = np.sqrt(np.maximum(radicand, 0.0))
    return float(value[0]) if single else value


def interpolant_weights(kernel: Kernel, points, values) -> InterpolantWeights:
    """Interpolation weights and the RKHS norm of the interpolant.

    ``values`` is a vector of length N, or an ``(N, n_out)`` array when
    several outputs share the sample points.
    """
    pts = _as_points(points)
    vals = np.asarray(values, dtype=float)
    if vals.shape[0] != pts.shape[0]:
        raise DomainError(f"{vals.shape[0]} values for {pts.shape[0]} points")
    factor = cholesky(covariance_matrix(kernel, pts))
    w = _solve(factor, vals)
    quad = np.einsum("i...,i...->...", vals, w)
    norm = np.sqrt(np.maximum(quad, 0.0))
    return InterpolantWeights(w, float(norm) if np.ndim(norm) == 0 else norm)


def cube_vertices(n: int, spacing: float = 1.0) -> np.ndarray:
    """The ``2^n`` vertices of ``[0, spacing]^n`` in lexicographic order.

    Vertex ``v`` has coordinate ``j`` equal to ``spacing`` when bit
    ``n-1-j`` of ``v`` is set, so the first coordinate varies slowest.
    """
    v = np.arange(1 << n)[:, None]
    bits = (v >> (n - 1 - np.arange(n))[None, :]) & 1
    return bits * float(spacing)


def center_power_closed_form(kernel: Kernel, n: int, dx_over_l: float) -> float:
    """Power function at the centre of a ``2^n``-vertex cube.

    The cube has edge ``dx_over_l`` in units of the kernel length scale.
    The kernel vector at the centre is an eigenvector of the cube's Gram
    matrix with eigenvalue equal to its row sum, which gives the result
    without a linear solve.
    """
    if not dx_over_l > 0:
        raise DomainError("dx_over_l must be positive")
    code = kernel.code
    verts = cube_vertices(n, dx_over_l)
    row_sum = float(np.sum(radial_profile_array(code, np.linalg.norm(verts - verts[0], axis=1))))
    k_center = float(radial_profile_array(code, math.sqrt(n) * dx_over_l / 2.0))
    radicand = 1.0 - k_center**2 * 2**n / row_sum
    # for tiny spacings the subtraction cancels; 1 - k^2 2^n / beta = (beta - 2^n k^2) / beta
    if radicand < 1e-6:
        kap_c = float(_kappa_unit(code, math.sqrt(n) * dx_over_l / 2.0))
        kap_v = _kappa_unit(code, np.linalg.norm(verts - verts[0], axis=1))
        deficit = float(np.sum(kap_v))
        # beta = 2^n - deficit,  k_c^2 = 1 - 2 kap_c + kap_c^2
        radicand = (2**n * (2.0 * kap_c - kap_c * kap_c) - deficit) / row_sum
    return math.sqrt(max(radicand, 0.0))


def condition_number_inf(matrix) -> float:
    """``||M||_inf * ||M^-1||_inf`` (induced infinity norms)."""
    m = np.asarray(matrix, dtype=float)
    try:
        inv = np.linalg.inv(m)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedError("matrix is singular") from exc
    return float(np.linalg.norm(m, np.inf) * np.linalg.norm(inv, np.inf))
