"""Ground-truth oracles.

An oracle maps a point of its domain box (original units) to an output
vector, a nonnegative slack and a feasibility verdict.  Analytic and
synthetic oracles are always feasible.  The CSTR oracle solves a
soft-constrained MPC problem and reports the first optimal input; its
verdict is "infeasible" when the minimal constraint violation exceeds
``slack_threshold``, but the relaxed solution is still returned so that
sub-domains straddling the feasibility boundary can be approximated.
"""

from __future__ import annotations

import math
import shlex
import subprocess
import threading
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import _mpc
from .errors import DomainError, DuplicatePointError, OracleError, SolverError
from .kernels import Kernel, covariance_matrix, covariance_vector
from .partition import DomainTransform

__all__ = [
    "QueryResult",
    "OracleBatch",
    "Oracle",
    "ConstantOracle",
    "SincosOracle",
    "sincos",
    "SyntheticRkhsOracle",
    "CstrConfig",
    "cstr_dynamics_step",
    "CstrMpcOracle",
    "ExternalProcessOracle",
]


@dataclass(frozen=True)
class QueryResult:
    """Answer to one query.

    ``values`` may be None only for an infeasible answer from an external
    process that did not report relaxed values.
    """

    values: np.ndarray | None
    slack: float = 0.0
    feasible: bool = True


@dataclass
class OracleBatch:
    """Answers for many points: ``values`` is ``(m, n_out)`` (NaN rows where
    no value was reported), ``slack`` and ``feasible`` have length ``m``."""

    values: np.ndarray
    slack: np.ndarray
    feasible: np.ndarray


class Oracle:
    """Base class.  Subclasses implement :meth:`query_many` or :meth:`query`."""

    output_dim: int = 1
    thread_safe: bool = True
    slack_threshold: float = 1e-8

    def __init__(self, lower, upper):
        self.domain = DomainTransform(lower, upper)

    @property
    def input_dim(self) -> int:
        return self.domain.dim

    def query(self, x) -> QueryResult:
        batch = self.query_many(np.asarray(x, dtype=float).reshape(1, -1))
        values = batch.values[0]
        return QueryResult(None if np.isnan(values).all() else values, float(batch.slack[0]), bool(batch.feasible[0]))

    def query_many(self, points) -> OracleBatch:
        points = np.asarray(points, dtype=float).reshape(-1, self.input_dim)
        values = np.full((len(points), self.output_dim), np.nan)
        slack = np.zeros(len(points))
        feasible = np.ones(len(points), dtype=bool)
        for i, x in enumerate(points):
            r = self.query(x)
            if r.values is not None:
                values[i] = r.values
            slack[i] = r.slack
            feasible[i] = r.feasible
        return OracleBatch(values, slack, feasible)

    def close(self):
        """Release external resources (no-op for in-process oracles)."""


class ConstantOracle(Oracle):
    """``f(x) = value`` everywhere."""

    def __init__(self, value, lower=(0.0,), upper=(1.0,)):
        super().__init__(lower, upper)
        self.value = np.atleast_1d(np.asarray(value, dtype=float))
        self.output_dim = self.value.size

    def query_many(self, points) -> OracleBatch:
        points = np.asarray(points, dtype=float).reshape(-1, self.input_dim)
        m = len(points)
        return OracleBatch(np.tile(self.value, (m, 1)), np.zeros(m), np.ones(m, dtype=bool))


def sincos(x) -> np.ndarray:
    """``sin(2 pi x1) + cos(2 pi x2)`` as a length-1 vector (rows for a batch)."""
    x = np.asarray(x, dtype=float)
    out = np.sin(2 * np.pi * x[..., 0]) + np.cos(2 * np.pi * x[..., 1])
    return out[..., None]


class SincosOracle(Oracle):
    """The smooth test function :func:`sincos` on ``[0, 1]^2``."""

    def __init__(self, lower=(0.0, 0.0), upper=(1.0, 1.0)):
        super().__init__(lower, upper)

    def query_many(self, points) -> OracleBatch:
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        m = len(points)
        return OracleBatch(sincos(points), np.zeros(m), np.ones(m, dtype=bool))


class SyntheticRkhsOracle(Oracle):
    """A finite kernel expansion ``f(x) = sum_i c_i k(x, x_i)``.

    Its RKHS norm ``sqrt(c^T K c)`` is known exactly and exposed as
    :attr:`norm` (one entry per output when ``coefficients`` is 2D).

    Parameters
    ----------
    kernel : Kernel
        Kernel in the oracle's own (original) coordinates.
    centers : array_like, shape (N, n) or (N,)
    coefficients : array_like, shape (N,) or (N, n_out)
    """

    def __init__(self, kernel: Kernel, centers, coefficients, lower=None, upper=None):
        centers = np.asarray(centers, dtype=float)
        if centers.ndim == 1:
            centers = centers[:, None]
        n = centers.shape[1]
        super().__init__(lower if lower is not None else (0.0,) * n, upper if upper is not None else (1.0,) * n)
        coeffs = np.asarray(coefficients, dtype=float)
        if coeffs.shape[0] != len(centers):
            raise DomainError(f"{coeffs.shape[0]} coefficients for {len(centers)} centers")
        try:
            gram = covariance_matrix(kernel, centers)
        except DuplicatePointError as exc:
            raise DuplicatePointError("synthetic oracle centers must be pairwise distinct") from exc
        self.kernel = kernel
        self.centers = centers
        self.coefficients = coeffs.reshape(len(centers), -1)
        self.output_dim = self.coefficients.shape[1]
        quad = np.einsum("io,ij,jo->o", self.coefficients, gram, self.coefficients)
        self.norms = np.sqrt(np.maximum(quad, 0.0))

    @property
    def norm(self) -> float:
        """Largest RKHS norm over the outputs."""
        return float(self.norms.max())

    def query_many(self, points) -> OracleBatch:
        points = np.asarray(points, dtype=float).reshape(-1, self.input_dim)
        m = len(points)
        k = covariance_vector(self.kernel, self.centers, points).reshape(m, -1)
        return OracleBatch(k @ self.coefficients, np.zeros(m), np.ones(m, dtype=bool))


# ---------------------------------------------------------------- CSTR


@dataclass(frozen=True)
class CstrConfig:
    """Constants and MPC settings for the two-state CSTR oracle.

    Model constants default to the standard exothermic CSTR benchmark
    (residence time ``theta``, reaction ``rate`` and ``activation``
    energy, feed and coolant temperatures, cooling coefficient).  The
    state box is given relative to the steady state, so the oracle's
    domain is ``[box_lower, box_upper]`` in deviation coordinates.

    ``rate_state`` selects which state enters the first component's
    Arrhenius term: 2 for the standard model, 1 for the variant with
    ``exp(-M / x1)``.
    """

    step: float = 0.5
    theta: float = 20.0
    rate: float = 300.0
    activation: float = 5.0
    feed: float = 0.3947
    coolant: float = 0.3816
    cooling: float = 0.117
    rate_state: int = 2
    steady_temperature: float = 0.6519
    horizon: int = 10
    input_lower: float = 0.0
    input_upper: float = 2.0
    box_lower: tuple = (-0.2, -0.2)
    box_upper: tuple = (0.2, 0.2)
    state_weights: tuple = (1.0, 1.0)
    input_weight: float = 0.1
    terminal_weights: tuple = (10.0, 10.0)
    terminal_radius: float | None = None
    penalty: float = 1e6
    penalty_linear: float = 0.0
    slack_threshold: float = 1e-8
    starts: int = 8
    seed: int = 0
    max_iter: int = 500
    gtol: float = 1e-7
    accept_tol: float = 1e-4

    def __post_init__(self):
        scalars = [self.step, self.theta, self.rate, self.activation, self.feed, self.coolant,
                   self.cooling, self.steady_temperature, self.input_weight, self.penalty,
                   self.penalty_linear, self.slack_threshold, self.gtol, self.accept_tol]
        if not all(math.isfinite(v) for v in scalars):
            raise DomainError("CSTR constants must be finite")
        if self.rate_state not in (1, 2):
            raise DomainError("rate_state must be 1 or 2")
        if self.horizon < 1 or self.starts < 1 or self.max_iter < 1:
            raise DomainError("horizon, starts and max_iter must be positive")
        if not self.input_upper > self.input_lower:
            raise DomainError("input_upper must exceed input_lower")
        if self.step < 0 or self.theta <= 0 or self.penalty < 0 or self.penalty_linear < 0:
            raise DomainError("step, penalties must be nonnegative and theta positive")

    def model_vector(self) -> np.ndarray:
        return np.array([self.step, self.theta, self.rate, self.activation, self.feed,
                         self.coolant, self.cooling, float(self.rate_state)])

    def steady_state(self):
        """Equilibrium ``(x_s, u_s)`` with temperature ``steady_temperature``."""
        x2 = self.steady_temperature
        e2 = math.exp(-self.activation / x2)
        if self.rate_state == 2:
            x1 = (1.0 / self.theta) / (1.0 / self.theta + self.rate * e2)
        else:
            def balance(c):
                return (1.0 - c) / self.theta - self.rate * c * math.exp(-self.activation / c)
            x1 = optimize.brentq(balance, 1e-6, 1.0, xtol=1e-15)
        heat = (self.feed - x2) / self.theta + self.rate * x1 * e2
        u = heat / (self.cooling * (x2 - self.coolant))
        return np.array([x1, x2]), u

    def cost_vector(self) -> np.ndarray:
        xs, us = self.steady_state()
        radius = -1.0 if self.terminal_radius is None else float(self.terminal_radius)
        return np.array([xs[0], xs[1], us, self.state_weights[0], self.state_weights[1], self.input_weight,
                         self.terminal_weights[0], self.terminal_weights[1], self.penalty_linear,
                         xs[0] + self.box_lower[0], xs[1] + self.box_lower[1],
                         xs[0] + self.box_upper[0], xs[1] + self.box_upper[1], radius, self.penalty])


def cstr_dynamics_step(x, u: float, cfg: CstrConfig) -> np.ndarray:
    """One explicit Euler step of the CSTR from physical state ``x``.

    Raises
    ------
    DomainError
        If an Arrhenius exponent ``-M / x_i`` would overflow.
    """
    x = np.asarray(x, dtype=float)
    for xi in x:
        if xi != 0.0 and -cfg.activation / xi > 700.0:
            raise DomainError(f"Arrhenius exponent overflows at state {x.tolist()}")
    y1, y2, *_ = _mpc.step_jacobian(float(x[0]), float(x[1]), float(u), cfg.model_vector())
    return np.array([y1, y2])


@dataclass(frozen=True)
class MpcSolution:
    """Full solution of one MPC problem (diagnostics)."""

    inputs: np.ndarray
    cost: float
    slack: float
    projected_gradient: float
    converged: bool


class CstrMpcOracle(Oracle):
    """First optimal input of a soft-constrained CSTR MPC.

    The query point is a deviation ``z`` from the steady state; the MPC
    starts from ``x_s + z``.  Each query runs ``cfg.starts`` solver starts
    (steady-state input, both input bounds, then uniform random sequences
    from a generator seeded with ``cfg.seed``) and keeps the cheapest.
    """

    output_dim = 1

    def __init__(self, cfg: CstrConfig | None = None):
        self.cfg = cfg or CstrConfig()
        super().__init__(self.cfg.box_lower, self.cfg.box_upper)
        self.slack_threshold = self.cfg.slack_threshold
        self.steady_state, self.steady_input = self.cfg.steady_state()
        self._model = self.cfg.model_vector()
        self._cost = self.cfg.cost_vector()
        n = self.cfg.horizon
        lo, hi = self.cfg.input_lower, self.cfg.input_upper
        fixed = [np.full(n, min(max(self.steady_input, lo), hi)), np.full(n, lo), np.full(n, hi)]
        rng = np.random.default_rng(self.cfg.seed)
        extra = rng.uniform(lo, hi, size=(max(self.cfg.starts - len(fixed), 0), n))
        self.starts = np.vstack(fixed + [extra])[: self.cfg.starts].copy()

    def _physical(self, points):
        return np.asarray(points, dtype=float).reshape(-1, 2) + self.steady_state

    def solve(self, z, penalty: float | None = None) -> MpcSolution:
        """Solve the MPC at deviation ``z`` and return the whole input sequence."""
        cost = self._cost.copy()
        if penalty is not None:
            cost[14] = penalty
        c = self.cfg
        u, value, slack, pg, ok = _mpc.solve_multistart(
            self._physical(z)[0], self.starts, c.input_lower, c.input_upper, self._model, cost,
            c.max_iter, c.gtol, c.accept_tol)
        return MpcSolution(np.array(u), float(value), float(slack), float(pg), bool(ok))

    def deviation_step(self, z, u) -> np.ndarray:
        """Plant step in deviation coordinates: ``g(x_s + z, u) - x_s``."""
        u = float(np.asarray(u, dtype=float).reshape(-1)[0])
        return cstr_dynamics_step(self.steady_state + np.asarray(z, dtype=float), u, self.cfg) - self.steady_state

    def objective(self, z, inputs):
        """Cost, adjoint gradient and slack of an input sequence at ``z``."""
        grad = np.empty(self.cfg.horizon)
        value, slack = _mpc.objective(self._physical(z)[0], np.asarray(inputs, dtype=float), self._model, self._cost, grad)
        return value, grad, slack

    def query_many(self, points) -> OracleBatch:
        phys = self._physical(points)
        m = len(phys)
        first = np.empty(m)
        slack = np.empty(m)
        ok = np.empty(m, dtype=bool)
        c = self.cfg
        _mpc.solve_points(phys, self.starts, c.input_lower, c.input_upper, self._model, self._cost,
                          c.max_iter, c.gtol, c.accept_tol, first, slack, ok)
        if not ok.all():
            bad = int(np.flatnonzero(~ok)[0])
            raise SolverError("MPC solver did not converge from any start", point=phys[bad] - self.steady_state)
        return OracleBatch(first[:, None], slack, slack <= self.slack_threshold)


# ------------------------------------------------------- external process


class ExternalProcessOracle(Oracle):
    """Oracle implemented by a child process speaking a line protocol.

    For each query the parent writes ``Q x1 ... xn`` and the child answers
    ``F v1 ... v_nout slack`` (feasible) or ``I`` (infeasible).  Children
    may append relaxed values to an infeasible answer, ``I v1 ... v_nout
    slack``, which lets mixed sub-domains be approximated.  Queries are
    serialized through a lock, so the oracle reports itself as not thread
    safe.
    """

    thread_safe = False

    def __init__(self, command, lower, upper, output_dim: int = 1, cwd=None):
        super().__init__(lower, upper)
        self.output_dim = int(output_dim)
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self._lock = threading.Lock()
        try:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                          text=True, bufsize=1, cwd=cwd)
        except OSError as exc:
            raise OracleError(f"cannot start oracle process {self.command}: {exc}") from exc

    def _ask(self, x) -> QueryResult:
        line = "Q " + " ".join(repr(float(v)) for v in x) + "\n"
        try:
            self._proc.stdin.write(line)
            self._proc.stdin.flush()
            reply = self._proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise OracleError(f"oracle process failed: {exc}", point=x) from exc
        if not reply:
            raise OracleError("oracle process closed its output", point=x)
        parts = reply.split()
        tag, numbers = parts[0], parts[1:]
        try:
            numbers = [float(v) for v in numbers]
        except ValueError as exc:
            raise OracleError(f"malformed oracle reply {reply.strip()!r}", point=x) from exc
        if tag == "F" and len(numbers) == self.output_dim + 1:
            return QueryResult(np.array(numbers[:-1]), numbers[-1], True)
        if tag == "I" and not numbers:
            return QueryResult(None, math.inf, False)
        if tag == "I" and len(numbers) == self.output_dim + 1:
            return QueryResult(np.array(numbers[:-1]), numbers[-1], False)
        raise OracleError(f"malformed oracle reply {reply.strip()!r}", point=x)

    def query(self, x) -> QueryResult:
        x = np.asarray(x, dtype=float).reshape(-1)
        with self._lock:
            return self._ask(x)

    def close(self):
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        proc = getattr(self, "_proc", None)
        if proc is not None and proc.poll() is None:
            proc.kill()
