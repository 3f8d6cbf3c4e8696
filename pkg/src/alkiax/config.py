"""Flat ``key = value`` configuration files.

Example::

    # sin/cos on the unit square
    oracle.kind = sincos
    domain.lower = 0, 0
    domain.upper = 1, 1
    kernel.family = matern
    kernel.nu = 1.5
    kernel.length_scale = 0.8
    alkiax.epsilon = 1e-2
    alkiax.workers = 4

Lists are separated by commas or whitespace; matrices (synthetic oracle
centers and coefficients) separate rows with ``;``.  Lines starting with
``#`` are comments.  See :data:`SCHEMA` for every key.
"""

from __future__ import annotations

import dataclasses
import importlib
from dataclasses import dataclass

import numpy as np

from .approximator import ApproxConfig
from .errors import AlkiaxError, ConfigError
from .kernels import Kernel
from .oracles import (
    ConstantOracle,
    CstrConfig,
    CstrMpcOracle,
    ExternalProcessOracle,
    Oracle,
    SincosOracle,
    SyntheticRkhsOracle,
)
from .partition import DomainTransform

_CSTR_FIELDS = {f.name: f for f in dataclasses.fields(CstrConfig)}

SCHEMA = {
    "oracle.kind": "sincos | constant | synthetic | cstr | external",
    "oracle.value": "constant: value(s), one per output",
    "oracle.centers": "synthetic: expansion centers, rows separated by ';'",
    "oracle.coefficients": "synthetic: coefficients, one row per center",
    "oracle.kernel.family": "synthetic: se | matern (default: kernel.family)",
    "oracle.kernel.nu": "synthetic: Matérn smoothness (default: kernel.nu)",
    "oracle.kernel.length_scale": "synthetic: length scale in domain units (default 1)",
    "oracle.command": "external: command line of the child process",
    "oracle.output_dim": "external: number of outputs (default 1)",
    "oracle.cwd": "external: working directory of the child",
    **{f"oracle.{name}": "cstr: CstrConfig field" for name in _CSTR_FIELDS},
    "domain.lower": "lower box corner (cstr: deviation from the steady state)",
    "domain.upper": "upper box corner",
    "kernel.family": "se | matern (default matern)",
    "kernel.nu": "0.5 | 1.5 | 2.5 (default 1.5)",
    "kernel.length_scale": "base length scale relative to a sub-domain edge (default 0.8)",
    "alkiax.epsilon": "error bound (required)",
    "alkiax.p_lo": "smallest grid exponent (default 2)",
    "alkiax.p_hi": "largest grid exponent (default 5)",
    "alkiax.gamma_mode": "extrapolate | oracle (default extrapolate)",
    "alkiax.gamma_bound": "oracle mode: a number, or module:function(origin, edge, mean)",
    "alkiax.max_depth": "refinement cap (default 20)",
    "alkiax.workers": "worker threads (default 1)",
    "alkiax.cache": "memoize oracle answers on the dyadic lattice (default false)",
    "alkiax.center_each_grid": "centre each extrapolation grid on its own mean (default true)",
    "alkiax.assumption2_override": "skip the power-function centre check (default false)",
    "alkiax.time_limit": "wall-clock budget in seconds (default none)",
}


def parse_text(text: str, source: str = "<config>") -> dict:
    """Split config text into a ``{key: raw string}`` dict, rejecting unknown keys."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        if key not in SCHEMA:
            close = [k for k in SCHEMA if k.split(".")[-1] == key.split(".")[-1]]
            hint = f"; did you mean {close[0]!r}?" if close else "; `alkiax --help` lists the valid keys"
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}{hint}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _floats(raw, key):
    try:
        return [float(v) for v in raw.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{key}: expected numbers, got {raw!r}") from None


def _matrix(raw, key):
    rows = [_floats(r, key) for r in raw.split(";") if r.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ConfigError(f"{key}: rows must be nonempty and of equal length")
    return np.array(rows)


def _scalar(raw, key, kind):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


@dataclass
class Settings:
    """A parsed configuration: the oracle factory inputs and the build settings."""

    values: dict
    approx: ApproxConfig | None
    domain: DomainTransform | None

    def make_oracle(self) -> Oracle:
        """Instantiate the configured oracle (the caller closes it)."""
        return make_oracle(self.values, self.domain)


def _kernel(values, prefix, default=None):
    base = default or Kernel("matern", 0.8, 1.5)
    family = values.get(f"{prefix}family", base.family)
    nu = _scalar(values[f"{prefix}nu"], f"{prefix}nu", float) if f"{prefix}nu" in values else base.nu
    length = (_scalar(values[f"{prefix}length_scale"], f"{prefix}length_scale", float)
              if f"{prefix}length_scale" in values else base.length_scale)
    try:
        return Kernel(family, length, 1.5 if family == "matern" and not np.isfinite(nu) else nu)
    except AlkiaxError as exc:
        raise ConfigError(f"{prefix}*: {exc}") from exc


def make_oracle(values: dict, domain: DomainTransform | None) -> Oracle:
    kind = values.get("oracle.kind")
    if kind is None:
        raise ConfigError("oracle.kind is required")
    lo = domain.lower if domain else None
    hi = domain.upper if domain else None
    if kind == "sincos":
        return SincosOracle(lo or (0.0, 0.0), hi or (1.0, 1.0))
    if kind == "constant":
        value = _floats(values.get("oracle.value", "0"), "oracle.value")
        n = domain.dim if domain else 1
        return ConstantOracle(value if len(value) > 1 else value[0], lo or (0.0,) * n, hi or (1.0,) * n)
    if kind == "synthetic":
        if "oracle.centers" not in values or "oracle.coefficients" not in values:
            raise ConfigError("synthetic oracle needs oracle.centers and oracle.coefficients")
        centers = _matrix(values["oracle.centers"], "oracle.centers")
        coeffs = _matrix(values["oracle.coefficients"], "oracle.coefficients")
        if coeffs.shape[0] == 1 and centers.shape[0] > 1:
            coeffs = coeffs.reshape(-1, 1)
        base = _kernel(values, "kernel.")
        kernel = _kernel(values, "oracle.kernel.", Kernel(base.family, 1.0, base.nu))
        return SyntheticRkhsOracle(kernel, centers, coeffs, lo, hi)
    if kind == "cstr":
        kwargs = {}
        for name, f in _CSTR_FIELDS.items():
            key = f"oracle.{name}"
            if key not in values:
                continue
            if f.type in ("tuple", tuple):
                kwargs[name] = tuple(_floats(values[key], key))
            elif name == "terminal_radius":
                kwargs[name] = None if values[key].lower() == "none" else _scalar(values[key], key, float)
            else:
                kwargs[name] = _scalar(values[key], key, int if f.type in ("int", int) else float)
        if domain is not None:
            kwargs["box_lower"], kwargs["box_upper"] = domain.lower, domain.upper
        try:
            return CstrMpcOracle(CstrConfig(**kwargs))
        except AlkiaxError as exc:
            raise ConfigError(f"cstr oracle: {exc}") from exc
    if kind == "external":
        if "oracle.command" not in values or domain is None:
            raise ConfigError("external oracle needs oracle.command, domain.lower and domain.upper")
        n_out = _scalar(values.get("oracle.output_dim", "1"), "oracle.output_dim", int)
        return ExternalProcessOracle(values["oracle.command"], lo, hi, n_out, values.get("oracle.cwd"))
    raise ConfigError(f"oracle.kind: unknown kind {kind!r}; use {SCHEMA['oracle.kind']}")


def _gamma_bound(raw):
    try:
        bound = float(raw)
    except ValueError:
        module, _, name = raw.partition(":")
        try:
            return getattr(importlib.import_module(module), name)
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"alkiax.gamma_bound: cannot import {raw!r} ({exc})") from exc
    if not bound > 0:
        raise ConfigError("alkiax.gamma_bound must be positive")
    return lambda origin, edge, mean: bound


def settings_from_values(values: dict, require_epsilon: bool = True) -> Settings:
    domain = None
    if "domain.lower" in values or "domain.upper" in values:
        if not ("domain.lower" in values and "domain.upper" in values):
            raise ConfigError("domain.lower and domain.upper must be given together")
        try:
            domain = DomainTransform(tuple(_floats(values["domain.lower"], "domain.lower")),
                                     tuple(_floats(values["domain.upper"], "domain.upper")))
        except AlkiaxError as exc:
            raise ConfigError(f"domain: {exc}") from exc
    approx = None
    if "alkiax.epsilon" in values:
        kw = {"epsilon": _scalar(values["alkiax.epsilon"], "alkiax.epsilon", float), "kernel": _kernel(values, "kernel.")}
        for key, kind in (("p_lo", int), ("p_hi", int), ("max_depth", int), ("workers", int), ("cache", bool),
                          ("center_each_grid", bool), ("assumption2_override", bool), ("time_limit", float)):
            if f"alkiax.{key}" in values:
                kw[key] = _scalar(values[f"alkiax.{key}"], f"alkiax.{key}", kind)
        mode = values.get("alkiax.gamma_mode", "extrapolate")
        if mode not in ("extrapolate", "oracle"):
            raise ConfigError(f"alkiax.gamma_mode: expected extrapolate or oracle, got {mode!r}")
        kw["gamma_mode"] = mode
        if mode == "oracle":
            if "alkiax.gamma_bound" not in values:
                raise ConfigError("alkiax.gamma_mode = oracle needs alkiax.gamma_bound")
            kw["gamma_oracle"] = _gamma_bound(values["alkiax.gamma_bound"])
        try:
            approx = ApproxConfig(**kw)
        except AlkiaxError as exc:
            raise ConfigError(f"alkiax.*: {exc}") from exc
    elif require_epsilon:
        raise ConfigError("alkiax.epsilon is required")
    return Settings(values, approx, domain)


def load_config(path, require_epsilon: bool = True) -> Settings:
    """Read and validate a config file."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return settings_from_values(parse_text(text, str(path)), require_epsilon)
