"""Exception hierarchy shared by every module of the package."""


class AlkiaxError(Exception):
    """Base class for all package errors."""


class DomainError(AlkiaxError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DuplicatePointError(AlkiaxError, ValueError):
    """Two sample points coincide, so the covariance matrix is singular."""


class IllConditionedError(AlkiaxError):
    """A covariance matrix could not be factorized."""


class ConfigurationRejected(AlkiaxError):
    """The requested kernel and grid exponents fail an a priori check."""


class OutOfDomainError(AlkiaxError, ValueError):
    """A query point lies outside the model's domain box."""


class BuildBudgetExceeded(AlkiaxError):
    """The build ran past its wall-clock budget."""

    def __init__(self, seconds, subdomains, samples):
        self.seconds = seconds
        self.subdomains = subdomains
        self.samples = samples
        super().__init__(f"build exceeded its {seconds:g} s budget after {subdomains} sub-domains "
                         f"and {samples} samples")


class InfeasibleRegionError(AlkiaxError):
    """The query point falls into a sub-domain classified as infeasible."""

    def __init__(self, point, message=None):
        self.point = point
        super().__init__(message or f"point {list(point)} lies in an infeasible region")


class MaxDepthExceeded(AlkiaxError):
    """Refinement would exceed the configured depth cap.

    Attributes
    ----------
    offending : list
        ``(depth, origin_index)`` of every sub-domain that needed a split.
    """

    def __init__(self, max_depth, offending):
        self.max_depth = max_depth
        self.offending = list(offending)
        shown = ", ".join(f"depth={d} origin={o}" for d, o in self.offending[:5])
        more = "" if len(self.offending) <= 5 else f" (+{len(self.offending) - 5} more)"
        super().__init__(f"max_depth={max_depth} exceeded by: {shown}{more}")


class OracleError(AlkiaxError):
    """The ground-truth oracle failed; the query point is attached."""

    def __init__(self, message, point=None):
        self.point = None if point is None else list(point)
        if point is not None:
            message = f"{message} (query point {self.point})"
        super().__init__(message)


class SolverError(OracleError):
    """The MPC solver did not converge at a query point."""


class ConfigError(AlkiaxError, ValueError):
    """Malformed or inconsistent configuration file."""


class ModelFormatError(AlkiaxError):
    """Base class for model-file loading failures."""


class VersionMismatchError(ModelFormatError):
    """The file was written with an unsupported format version."""


class CorruptBodyError(ModelFormatError):
    """Checksum mismatch or truncated body."""


class InvariantViolationError(ModelFormatError):
    """The decoded tree breaks a structural invariant."""
