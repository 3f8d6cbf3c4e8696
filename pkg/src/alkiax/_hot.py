"""Inner loops of online evaluation, in compiled and vectorized form.

Kernel families are passed to compiled code as small integer codes:

==== =====================
code family
==== =====================
0    squared exponential
1    Matérn ν=1/2
2    Matérn ν=3/2
3    Matérn ν=5/2
==== =====================

Status codes written by the batch evaluators: 0 ok, 1 infeasible leaf,
2 point outside ``[0, 1]^n``.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, jit

SQRT3 = math.sqrt(3.0)
SQRT5 = math.sqrt(5.0)

STATUS_OK = 0
STATUS_INFEASIBLE = 1
STATUS_OUTSIDE = 2


@jit
def radial_profile(code, r):
    """Unit-length kernel profile at normalized distance ``r >= 0``."""
    if code == 0:
        return math.exp(-r * r)
    if code == 1:
        return math.exp(-r)
    if code == 2:
        s = SQRT3 * r
        return (1.0 + s) * math.exp(-s)
    s = SQRT5 * r
    return (1.0 + s + s * s / 3.0) * math.exp(-s)


def radial_profile_array(code, r):
    """Vectorized :func:`radial_profile`."""
    r = np.asarray(r, dtype=float)
    if code == 0:
        return np.exp(-r * r)
    if code == 1:
        return np.exp(-r)
    if code == 2:
        s = SQRT3 * r
        return (1.0 + s) * np.exp(-s)
    s = SQRT5 * r
    return (1.0 + s + s * s / 3.0) * np.exp(-s)


@jit
def _evaluate_points_loop(units, node_child, node_depth, node_origin, node_leaf,
                          leaf_p, leaf_mean, leaf_offset, weights, code, base_length,
                          out, status, visits):
    m, n = units.shape
    n_out = out.shape[1]
    n_vertices = 1 << n
    for i in range(m):
        inside = True
        for j in range(n):
            if not (units[i, j] >= 0.0 and units[i, j] <= 1.0):
                inside = False
        if not inside:
            status[i] = STATUS_OUTSIDE
            visits[i] = 0
            for k in range(n_out):
                out[i, k] = np.nan
            continue

        node = 0
        count = 1
        while node_child[node, 0] >= 0:
            level = node_depth[node] + 1
            scale = 2.0 ** level
            child = 0
            for j in range(n):
                if units[i, j] == 1.0:
                    bit = 1
                else:
                    bit = int(math.floor(units[i, j] * scale)) & 1
                child = (child << 1) | bit
            node = node_child[node, child]
            count += 1
        visits[i] = count

        leaf = node_leaf[node]
        if leaf < 0:
            status[i] = STATUS_INFEASIBLE
            for k in range(n_out):
                out[i, k] = np.nan
            continue
        status[i] = STATUS_OK

        p = leaf_p[leaf]
        depth = node_depth[node]
        cells = 1 << p
        scale = 2.0 ** (depth + p)
        inv_length = 2.0 ** depth / base_length

        cube = 0
        for j in range(n):
            g = int(math.floor(units[i, j] * scale)) - node_origin[node, j] * cells
            if g >= cells:
                g = cells - 1
            elif g < 0:
                g = 0
            cube = cube * cells + g
        base = leaf_offset[leaf] + cube * n_out * n_vertices

        for k in range(n_out):
            out[i, k] = leaf_mean[leaf, k]
        for v in range(n_vertices):
            d2 = 0.0
            for j in range(n):
                g = int(math.floor(units[i, j] * scale)) - node_origin[node, j] * cells
                if g >= cells:
                    g = cells - 1
                elif g < 0:
                    g = 0
                corner = node_origin[node, j] * cells + g + ((v >> (n - 1 - j)) & 1)
                diff = units[i, j] - corner / scale
                d2 += diff * diff
            kv = radial_profile(code, math.sqrt(d2) * inv_length)
            for k in range(n_out):
                out[i, k] += weights[base + k * n_vertices + v] * kv


def _evaluate_points_numpy(units, node_child, node_depth, node_origin, node_leaf,
                           leaf_p, leaf_mean, leaf_offset, weights, code, base_length,
                           out, status, visits):
    m, n = units.shape
    n_out = out.shape[1]
    n_vertices = 1 << n
    inside = np.all((units >= 0.0) & (units <= 1.0), axis=1)
    out[~inside] = np.nan
    status[~inside] = STATUS_OUTSIDE
    visits[~inside] = 0

    idx = np.flatnonzero(inside)
    pts = units[idx]
    node = np.zeros(idx.size, dtype=np.int64)
    count = np.ones(idx.size, dtype=np.int64)
    weights_of_bits = 1 << np.arange(n - 1, -1, -1)
    active = node_child[node, 0] >= 0
    while active.any():
        a = np.flatnonzero(active)
        scale = np.ldexp(1.0, node_depth[node[a]] + 1)[:, None]
        bits = np.floor(pts[a] * scale).astype(np.int64) & 1
        bits[pts[a] == 1.0] = 1
        child = bits @ weights_of_bits
        node[a] = node_child[node[a], child]
        count[a] += 1
        active = node_child[node, 0] >= 0
    visits[idx] = count

    leaf = node_leaf[node]
    infeasible = leaf < 0
    out[idx[infeasible]] = np.nan
    status[idx[infeasible]] = STATUS_INFEASIBLE
    ok = ~infeasible
    idx, pts, node, leaf = idx[ok], pts[ok], node[ok], leaf[ok]
    status[idx] = STATUS_OK
    if idx.size == 0:
        return

    p = leaf_p[leaf]
    depth = node_depth[node]
    cells = (1 << p)[:, None]
    scale = np.ldexp(1.0, depth + p)[:, None]
    inv_length = np.ldexp(1.0, depth) / base_length
    g = np.floor(pts * scale).astype(np.int64) - node_origin[node] * cells
    g = np.clip(g, 0, cells - 1)
    cube = np.zeros(idx.size, dtype=np.int64)
    for j in range(n):
        cube = cube * cells[:, 0] + g[:, j]
    base = leaf_offset[leaf] + cube * n_out * n_vertices

    acc = leaf_mean[leaf].copy()
    lattice = node_origin[node] * cells + g
    for v in range(n_vertices):
        offset = (v >> (n - 1 - np.arange(n))) & 1
        corner = (lattice + offset) / scale
        r = np.sqrt(np.sum((pts - corner) ** 2, axis=1)) * inv_length
        kv = radial_profile_array(code, r)
        for k in range(n_out):
            acc[:, k] += weights[base + k * n_vertices + v] * kv
    out[idx] = acc


FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


@jit
def _fnv1a64_loop(data, seed):
    h = np.uint64(seed)
    prime = np.uint64(FNV_PRIME)
    for i in range(data.size):
        h = (h ^ np.uint64(data[i])) * prime
    return h


def _fnv1a64_python(data, h):
    for b in data.tobytes():
        h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def fnv1a64(data, seed: int = FNV_OFFSET) -> int:
    """64-bit FNV-1a hash of a byte string.

    Pass the previous result as ``seed`` to hash a stream in pieces.
    """
    arr = np.frombuffer(data, dtype=np.uint8)
    if USE_NUMBA:
        return int(_fnv1a64_loop(arr, np.uint64(seed)))
    return _fnv1a64_python(arr, seed)


evaluate_points_compiled = _evaluate_points_loop
evaluate_points_numpy = _evaluate_points_numpy
evaluate_points = _evaluate_points_loop if USE_NUMBA else _evaluate_points_numpy
