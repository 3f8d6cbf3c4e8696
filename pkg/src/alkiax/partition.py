"""Domain normalization, dyadic sub-domains and point location.

All geometry lives in the unit cube.  A sub-domain at ``depth`` d with
integer ``origin_index`` o covers ``[o 2^-d, (o + 1) 2^-d]`` per axis, so
every coordinate is a dyadic rational and containment tests are exact.
Cubes are half-open, ``[lo, hi)``, except at the global upper face
``x = 1`` which belongs to the last cube.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InfeasibleRegionError, OutOfDomainError

__all__ = [
    "Status",
    "DomainTransform",
    "SubDomain",
    "LocalCube",
    "PartitionTree",
    "grid_indices",
    "grid_points",
    "local_cubes_of",
    "split",
    "locate",
    "export_partition",
]


class Status(enum.IntEnum):
    PENDING = 0
    APPROXIMATED = 1
    INFEASIBLE = 2
    SPLIT = 3


@dataclass(frozen=True)
class DomainTransform:
    """Affine map between an axis-aligned box and ``[0, 1]^n``."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi) or not lo:
            raise DomainError("lower and upper must be nonempty and of equal length")
        if not all(math.isfinite(a) and math.isfinite(b) and b > a for a, b in zip(lo, hi)):
            raise DomainError(f"need finite upper > lower componentwise, got {lo} and {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unit(cls, n: int) -> "DomainTransform":
        return cls((0.0,) * n, (1.0,) * n)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def width(self) -> np.ndarray:
        return np.subtract(self.upper, self.lower)

    def to_unit(self, x) -> np.ndarray:
        """Original units to the unit cube.  Box corners map to exactly 0 and 1."""
        x = np.asarray(x, dtype=float)
        lo, hi = np.array(self.lower), np.array(self.upper)
        u = (x - lo) / (hi - lo)
        # pin exact corners so upper-face points never round to 1 - ulp
        u = np.where(x == hi, 1.0, u)
        return np.where(x == lo, 0.0, u)

    def from_unit(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        lo, hi = np.array(self.lower), np.array(self.upper)
        x = lo + u * (hi - lo)
        x = np.where(u == 1.0, hi, x)
        return np.where(u == 0.0, lo, x)


@dataclass(eq=False)
class SubDomain:
    """One dyadic cube of the adaptive partition.

    Besides geometry and status, an approximated leaf carries the mean
    shift ``mean`` (one entry per output), its grid exponent ``p`` and the
    local-cube weights as an array of shape ``(2^(p n), n_out, 2^n)``.
    """

    id: int
    depth: int
    origin_index: tuple
    status: Status = Status.PENDING
    parent: int = -1
    children: list = field(default_factory=list)
    p: int = -1
    mean: np.ndarray | None = None
    weights: np.ndarray | None = None
    gamma_bar: np.ndarray | None = None
    samples: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return len(self.origin_index)

    @property
    def edge(self) -> float:
        return math.ldexp(1.0, -self.depth)

    @property
    def origin(self) -> np.ndarray:
        return np.ldexp(np.array(self.origin_index, dtype=float), -self.depth)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def contains(self, u) -> bool:
        """Closed containment test in unit coordinates."""
        lo = self.origin
        return bool(np.all(u >= lo) and np.all(u <= lo + self.edge))

    def local_cube(self, index: int) -> "LocalCube":
        """The ``index``-th local cube (lexicographic) of an approximated leaf."""
        if self.status != Status.APPROXIMATED:
            raise DomainError(f"sub-domain {self.id} has no local cubes (status {self.status.name})")
        cells = 1 << self.p
        lattice = np.array(np.unravel_index(index, (cells,) * self.dim))
        spacing = math.ldexp(1.0, -(self.depth + self.p))
        origin = (np.array(self.origin_index) * cells + lattice) * spacing
        values = None
        if self.samples is not None:
            _, vertex_ids = local_cubes_of(self, self.p)
            values = self.samples[vertex_ids[index]].T
        return LocalCube(origin=origin, edge=spacing, weights=self.weights[index], vertex_values=values)


@dataclass(frozen=True)
class LocalCube:
    """A ``2^n``-vertex cell with interpolation weights per output.

    ``weights`` and ``vertex_values`` have shape ``(n_out, 2^n)``; values
    are mean-shifted and only present when the build kept its samples.
    """

    origin: np.ndarray
    edge: float
    weights: np.ndarray
    vertex_values: np.ndarray | None = None


def grid_indices(n: int, p: int) -> np.ndarray:
    """Integer lattice ``{0..2^p}^n`` in lexicographic order (first axis slowest)."""
    if p < 0:
        raise DomainError("grid exponent must be nonnegative")
    side = np.arange((1 << p) + 1)
    mesh = np.meshgrid(*([side] * n), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def grid_points(sub: SubDomain, p: int) -> np.ndarray:
    """The ``(1 + 2^p)^n`` equidistant points of ``sub``, faces included."""
    lattice = grid_indices(sub.dim, p) + (np.array(sub.origin_index) << p)
    return np.ldexp(lattice.astype(float), -(sub.depth + p))


def local_cubes_of(sub: SubDomain, p: int):
    """Local cubes of ``sub`` at grid exponent ``p``.

    Returns
    -------
    origins : ndarray, shape (2^(p n), n)
        Lower corners in unit coordinates, lexicographic cube order.
    vertex_ids : ndarray, shape (2^(p n), 2^n)
        Row indices into :func:`grid_points` of each cube's vertices, in
        the vertex order of :func:`alkiax.kernels.cube_vertices`.
    """
    n = sub.dim
    cells = 1 << p
    side = cells + 1
    lower = grid_indices(n, p)
    lower = lower[np.all(lower < cells, axis=1)]
    offsets = (np.arange(1 << n)[:, None] >> (n - 1 - np.arange(n))[None, :]) & 1
    corners = lower[:, None, :] + offsets[None, :, :]
    strides = side ** np.arange(n - 1, -1, -1)
    vertex_ids = corners @ strides
    origins = np.ldexp((lower + (np.array(sub.origin_index) << p)).astype(float), -(sub.depth + p))
    return origins, vertex_ids


def split(sub: SubDomain, next_id: int) -> list:
    """Halve ``sub`` along every axis.

    Children get ids ``next_id, next_id + 1, ...`` in lexicographic order
    of their position and inherit nothing but geometry.  ``sub`` is
    marked :attr:`Status.SPLIT`.
    """
    if sub.status != Status.PENDING:
        raise DomainError(f"only pending sub-domains can be split (id {sub.id} is {sub.status.name})")
    n = sub.dim
    children = []
    for v in range(1 << n):
        bits = [(v >> (n - 1 - j)) & 1 for j in range(n)]
        origin = tuple(2 * o + b for o, b in zip(sub.origin_index, bits))
        children.append(SubDomain(next_id + v, sub.depth + 1, origin, parent=sub.id))
    sub.children = [c.id for c in children]
    sub.status = Status.SPLIT
    return children


class PartitionTree:
    """The ``2^n``-ary tree of sub-domains rooted at the unit cube."""

    def __init__(self, n: int):
        if n < 1:
            raise DomainError("dimension must be at least 1")
        self.dim = n
        self.nodes = [SubDomain(0, 0, (0,) * n)]

    @property
    def root(self) -> SubDomain:
        return self.nodes[0]

    def split(self, node_id: int) -> list:
        children = split(self.nodes[node_id], len(self.nodes))
        self.nodes.extend(children)
        return children

    def leaves(self) -> list:
        return [s for s in self.nodes if s.is_leaf]

    def depth(self) -> int:
        return max(s.depth for s in self.nodes)

    def preorder(self):
        stack = [0]
        while stack:
            node = self.nodes[stack.pop()]
            yield node
            stack.extend(reversed(node.children))

    def locate(self, u):
        return locate(self, u)


def locate(tree: PartitionTree, u):
    """Find the leaf and local cube containing ``u`` (unit coordinates).

    Returns
    -------
    leaf : SubDomain
    cube_index : int
        Lexicographic index of the local cube within the leaf.
    visits : int
        Number of tree nodes inspected, root included.

    Raises
    ------
    OutOfDomainError
        ``u`` is not in ``[0, 1]^n``.
    InfeasibleRegionError
        The leaf is infeasible.
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.size != tree.dim or not np.all((u >= 0.0) & (u <= 1.0)):
        raise OutOfDomainError(f"point {u.tolist()} is outside the unit cube")
    n = tree.dim
    node = tree.root
    visits = 1
    while node.children:
        scale = math.ldexp(1.0, node.depth + 1)
        child = 0
        for j in range(n):
            bit = 1 if u[j] == 1.0 else int(math.floor(u[j] * scale)) & 1
            child = (child << 1) | bit
        node = tree.nodes[node.children[child]]
        visits += 1
    if node.status == Status.INFEASIBLE:
        raise InfeasibleRegionError(u)
    if node.status != Status.APPROXIMATED:
        raise DomainError(f"leaf {node.id} is {node.status.name}; tree not fully built")
    cells = 1 << node.p
    scale = math.ldexp(1.0, node.depth + node.p)
    cube = 0
    for j in range(n):
        g = int(math.floor(u[j] * scale)) - node.origin_index[j] * cells
        cube = cube * cells + min(max(g, 0), cells - 1)
    return node, cube, visits


def export_partition(tree: PartitionTree) -> list:
    """One text line per leaf: ``depth origin... edge status p``.

    Origins and edges are in unit-cube coordinates; ``p`` is ``-1`` for
    infeasible leaves.
    """
    lines = []
    for node in tree.preorder():
        if node.children:
            continue
        origin = " ".join(repr(float(v)) for v in node.origin)
        lines.append(f"{node.depth} {origin} {node.edge!r} {node.status.name.lower()} {node.p}")
    return lines
