"""Online evaluation of a built model.

A :class:`Model` keeps the partition tree for inspection and, for speed,
a flattened copy: child table, dyadic origins, per-leaf exponent and mean,
and all cube weights in one contiguous array (leaf by leaf, cubes in
lexicographic order, then output, then vertex).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _hot
from .errors import InfeasibleRegionError, OutOfDomainError
from .kernels import Kernel
from .partition import DomainTransform, PartitionTree, Status

__all__ = ["Model", "BatchResult", "evaluate", "evaluate_batch", "stats", "FORMAT_VERSION"]

FORMAT_VERSION = 1


@dataclass
class _Flat:
    node_child: np.ndarray
    node_depth: np.ndarray
    node_origin: np.ndarray
    node_leaf: np.ndarray
    leaf_node: np.ndarray
    leaf_p: np.ndarray
    leaf_mean: np.ndarray
    leaf_offset: np.ndarray
    weights: np.ndarray


@dataclass
class Model:
    """The deployable piecewise interpolant.

    Attributes
    ----------
    tree : PartitionTree
        Every leaf is approximated or infeasible.
    kernel : Kernel
        Base kernel; a leaf of edge ``e`` uses length scale ``kernel.length_scale * e``.
    epsilon : float
    p_lo, p_hi : int
    transform : DomainTransform
    output_dim : int
    report_digest : str
        Hash of the deterministic part of the build report.
    """

    tree: PartitionTree
    kernel: Kernel
    epsilon: float
    p_lo: int
    p_hi: int
    transform: DomainTransform
    output_dim: int
    report_digest: str = ""
    version: int = FORMAT_VERSION
    _flat: _Flat | None = field(default=None, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.tree.dim

    @property
    def flat(self) -> _Flat:
        if self._flat is None:
            self._flat = _flatten(self.tree, self.output_dim)
        return self._flat


def _flatten(tree: PartitionTree, n_out: int) -> _Flat:
    n = tree.dim
    count = len(tree.nodes)
    child = np.full((count, 1 << n), -1, dtype=np.int64)
    depth = np.empty(count, dtype=np.int64)
    origin = np.empty((count, n), dtype=np.int64)
    node_leaf = np.full(count, -1, dtype=np.int64)
    leaves = []
    for node in tree.nodes:
        depth[node.id] = node.depth
        origin[node.id] = node.origin_index
        if node.children:
            child[node.id] = node.children
        elif node.status == Status.APPROXIMATED:
            node_leaf[node.id] = len(leaves)
            leaves.append(node)
    sizes = [leaf.weights.size for leaf in leaves]
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64) if leaves else np.zeros(0, np.int64)
    weights = np.concatenate([leaf.weights.ravel() for leaf in leaves]) if leaves else np.zeros(0)
    return _Flat(
        node_child=child,
        node_depth=depth,
        node_origin=origin,
        node_leaf=node_leaf,
        leaf_node=np.array([leaf.id for leaf in leaves], dtype=np.int64),
        leaf_p=np.array([leaf.p for leaf in leaves], dtype=np.int64),
        leaf_mean=np.array([leaf.mean for leaf in leaves], dtype=float).reshape(len(leaves), n_out),
        leaf_offset=offsets,
        weights=np.ascontiguousarray(weights, dtype=float),
    )


@dataclass(frozen=True)
class BatchResult:
    """Batch evaluation output.

    ``values`` has shape ``(m, n_out)`` with NaN rows where evaluation
    failed; ``status`` is 0 (ok), 1 (infeasible region) or 2 (outside the
    domain); ``visits`` counts tree nodes inspected per point.
    """

    values: np.ndarray
    status: np.ndarray
    visits: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        return self.status == _hot.STATUS_OK


def _run(model: Model, units: np.ndarray, use_numba: bool | None = None) -> BatchResult:
    flat = model.flat
    m = len(units)
    out = np.empty((m, model.output_dim))
    status = np.empty(m, dtype=np.int64)
    visits = np.empty(m, dtype=np.int64)
    if use_numba is None:
        kernel_fn = _hot.evaluate_points
    else:
        kernel_fn = _hot.evaluate_points_compiled if use_numba else _hot.evaluate_points_numpy
    if m:
        kernel_fn(np.ascontiguousarray(units, dtype=float), flat.node_child, flat.node_depth, flat.node_origin,
                  flat.node_leaf, flat.leaf_p, flat.leaf_mean, flat.leaf_offset, flat.weights,
                  model.kernel.code, model.kernel.length_scale, out, status, visits)
    return BatchResult(out, status, visits)


def _to_unit(model: Model, xs) -> np.ndarray:
    units = model.transform.to_unit(xs)
    # points within rounding of the box faces are snapped onto them
    lo = np.array(model.transform.lower)
    hi = np.array(model.transform.upper)
    units = np.where((xs >= lo) & (units < 0.0), 0.0, units)
    return np.where((xs <= hi) & (units > 1.0), 1.0, units)


def evaluate(model: Model, x) -> np.ndarray:
    """Model output at one point given in original units.

    Raises
    ------
    OutOfDomainError
        ``x`` lies outside the domain box.
    InfeasibleRegionError
        ``x`` lies in an infeasible leaf.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != model.dim:
        raise OutOfDomainError(f"expected a {model.dim}-vector, got {x.shape[1]} components")
    res = _run(model, _to_unit(model, x))
    code = int(res.status[0])
    if code == _hot.STATUS_OUTSIDE:
        raise OutOfDomainError(f"point {x[0].tolist()} is outside the domain box")
    if code == _hot.STATUS_INFEASIBLE:
        raise InfeasibleRegionError(x[0])
    return res.values[0]


def evaluate_batch(model: Model, xs, use_numba: bool | None = None) -> BatchResult:
    """Evaluate many points (rows of ``xs``, original units), preserving order.

    Failures are reported per element in :attr:`BatchResult.status`
    instead of raising.  ``use_numba`` forces one implementation; by
    default the compiled loop is used unless numba is disabled.
    """
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0:
        xs = xs.reshape(0, model.dim)
    xs = xs.reshape(-1, model.dim)
    return _run(model, _to_unit(model, xs), use_numba)


def stats(model: Model) -> dict:
    """Counts and sizes of the model.

    ``mean_eval_ops`` is the volume-weighted average number of
    elementary steps per evaluation: node visits plus ``2^n`` kernel
    evaluations of ``n`` squared differences and ``n_out`` accumulations.
    """
    tree = model.tree
    n = tree.dim
    flat = model.flat
    leaves = tree.leaves()
    approximated = [s for s in leaves if s.status == Status.APPROXIMATED]
    cube_count = sum((1 << (s.p * n)) for s in approximated)
    per_kernel = n + model.output_dim
    volume_ops = sum(math.ldexp(1.0, -n * s.depth) * (s.depth + 1 + (1 << n) * per_kernel) for s in approximated)
    volume = sum(math.ldexp(1.0, -n * s.depth) for s in approximated)
    nbytes = sum(getattr(flat, name).nbytes for name in flat.__dataclass_fields__)
    return {
        "leaf_count": len(leaves),
        "approximated_leaves": len(approximated),
        "infeasible_leaves": len(leaves) - len(approximated),
        "cube_count": cube_count,
        "max_depth": tree.depth(),
        "bytes": int(nbytes),
        "mean_eval_ops": volume_ops / volume if volume else 0.0,
    }
