"""Binary model files.

Layout (all fields little-endian)::

    magic        4s   b"ALKX"
    version      u16
    n, n_out     u16, u16
    kernel code  u8, 1 pad byte
    length scale f64      base length scale
    epsilon      f64
    p_lo, p_hi   u8, u8, 6 pad bytes
    digest       32 bytes  build-report hash (zeros if unknown)
    node count   u64
    body length  u64
    checksum     u64       FNV-1a over the body
    lower        f64[n]
    upper        f64[n]
    body         node records in pre-order

The body is located from the end of the file, so a header whose ``n``
disagrees with the body is reported as an invariant violation rather
than as corruption.

A node record is ``status u8, depth u8, origin u32[n]``; approximated
leaves append ``p u8, mean f64[n_out], gamma_bar f64[n_out]`` and the
weights ``f64[2^(p n) * n_out * 2^n]`` (cube, output, vertex order).
Split nodes are followed by their ``2^n`` children.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from ._hot import FNV_OFFSET, fnv1a64
from .errors import CorruptBodyError, InvariantViolationError, ModelFormatError, VersionMismatchError
from .evaluator import FORMAT_VERSION, Model
from .kernels import Kernel
from .partition import DomainTransform, PartitionTree, Status

MAGIC = b"ALKX"
_HEAD = struct.Struct("<4sHHHBxddBB6x")
_TAIL = struct.Struct("<32sQQQ")
_CODE_TO_KERNEL = {0: ("se", float("inf")), 1: ("matern", 0.5), 2: ("matern", 1.5), 3: ("matern", 2.5)}

__all__ = ["save", "load", "MAGIC"]


def _records(model: Model):
    n, n_out = model.dim, model.output_dim
    origin_fmt = f"<BB{n}I"
    for node in model.tree.preorder():
        if node.status not in (Status.SPLIT, Status.APPROXIMATED, Status.INFEASIBLE):
            raise InvariantViolationError(f"node {node.id} is {node.status.name}; only finished trees can be saved")
        yield struct.pack(origin_fmt, int(node.status), node.depth, *node.origin_index)
        if node.status == Status.APPROXIMATED:
            gamma = node.gamma_bar if node.gamma_bar is not None else np.full(n_out, np.nan)
            yield struct.pack("<B", node.p)
            yield np.asarray(node.mean, dtype="<f8").tobytes()
            yield np.asarray(gamma, dtype="<f8").tobytes()
            yield np.ascontiguousarray(node.weights, dtype="<f8").tobytes()


def save(model: Model, path) -> None:
    """Write ``model`` to ``path`` (streamed; the body is never held in memory at once)."""
    n = model.dim
    digest = bytes.fromhex(model.report_digest) if model.report_digest else bytes(32)
    head = _HEAD.pack(MAGIC, FORMAT_VERSION, n, model.output_dim, model.kernel.code,
                      model.kernel.length_scale, model.epsilon, model.p_lo, model.p_hi)
    bounds = np.asarray(model.transform.lower, dtype="<f8").tobytes()
    bounds += np.asarray(model.transform.upper, dtype="<f8").tobytes()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(head)
        fh.write(_TAIL.pack(digest, 0, 0, 0))
        fh.write(bounds)
        checksum, length = FNV_OFFSET, 0
        for chunk in _records(model):
            fh.write(chunk)
            checksum = fnv1a64(chunk, checksum)
            length += len(chunk)
        fh.seek(len(head))
        fh.write(_TAIL.pack(digest, len(model.tree.nodes), length, checksum))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf, start):
        self.buf = buf
        self.pos = start

    def take(self, fmt):
        s = struct.Struct(fmt)
        if self.pos + s.size > len(self.buf):
            raise InvariantViolationError("node record runs past the end of the body")
        out = s.unpack_from(self.buf, self.pos)
        self.pos += s.size
        return out

    def floats(self, count):
        end = self.pos + 8 * count
        if end > len(self.buf):
            raise InvariantViolationError("node record runs past the end of the body")
        arr = np.frombuffer(self.buf, dtype="<f8", count=count, offset=self.pos).astype(np.float64)
        self.pos = end
        return arr


def load(path) -> Model:
    """Read a model written by :func:`save`.

    Raises
    ------
    ModelFormatError
        Not a model file (bad magic or truncated header).
    VersionMismatchError
        Written by an incompatible format version.
    CorruptBodyError
        Body length or checksum disagree with the header.
    InvariantViolationError
        The body decodes to something that is not a valid partition.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEAD.size or buf[:4] != MAGIC:
        raise ModelFormatError(f"{path}: not an ALKX model file")
    magic, version, n, n_out, code, length, epsilon, p_lo, p_hi = _HEAD.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    pos = _HEAD.size
    if len(buf) < pos + _TAIL.size:
        raise ModelFormatError(f"{path}: truncated header")
    digest, node_count, body_len, checksum = _TAIL.unpack_from(buf, pos)
    pos += _TAIL.size
    if len(buf) < pos + body_len:
        raise CorruptBodyError(f"{path}: file has {len(buf) - pos} bytes after the header, body alone needs {body_len}")
    body = memoryview(buf)[len(buf) - body_len:]
    if fnv1a64(body) != checksum:
        raise CorruptBodyError(f"{path}: checksum mismatch")
    if n < 1 or n_out < 1 or code not in _CODE_TO_KERNEL:
        raise InvariantViolationError(f"{path}: invalid header (n={n}, n_out={n_out}, kernel code {code})")
    if len(buf) - body_len - pos != 16 * n:
        raise InvariantViolationError(
            f"{path}: header dimension n={n} disagrees with the stored domain bounds "
            f"({(len(buf) - body_len - pos) / 16:g} coordinates)")
    lower = np.frombuffer(buf, "<f8", n, pos)
    upper = np.frombuffer(buf, "<f8", n, pos + 8 * n)

    try:
        family, nu = _CODE_TO_KERNEL[code]
        kernel = Kernel(family, length, nu)
        transform = DomainTransform(tuple(lower), tuple(upper))
    except Exception as exc:
        raise InvariantViolationError(f"{path}: invalid header values ({exc})") from exc
    tree = _read_tree(_Reader(body, 0), n, n_out, p_lo, p_hi, node_count, len(body))
    return Model(tree=tree, kernel=kernel, epsilon=epsilon, p_lo=p_lo, p_hi=p_hi, transform=transform,
                 output_dim=n_out, report_digest="" if digest == bytes(32) else digest.hex())


def _read_tree(reader, n, n_out, p_lo, p_hi, node_count, body_len):
    tree = PartitionTree(n)
    pending = [tree.root]
    origin_fmt = f"<BB{n}I"
    while pending:
        node = pending.pop()
        status, depth, *origin = reader.take(origin_fmt)
        if depth != node.depth or tuple(origin) != node.origin_index:
            raise InvariantViolationError(
                f"expected node at depth {node.depth} origin {node.origin_index}, found depth {depth} origin {tuple(origin)}")
        if status == Status.SPLIT:
            pending.extend(reversed(tree.split(node.id)))
        elif status == Status.INFEASIBLE:
            node.status = Status.INFEASIBLE
        elif status == Status.APPROXIMATED:
            (p,) = reader.take("<B")
            if not p_lo <= p <= p_hi:
                raise InvariantViolationError(f"leaf exponent {p} outside [{p_lo}, {p_hi}]")
            node.status = Status.APPROXIMATED
            node.p = p
            node.mean = reader.floats(n_out)
            node.gamma_bar = reader.floats(n_out)
            cubes, vertices = 1 << (p * n), 1 << n
            node.weights = reader.floats(cubes * n_out * vertices).reshape(cubes, n_out, vertices)
            if not (np.all(np.isfinite(node.mean)) and np.all(np.isfinite(node.weights))):
                raise InvariantViolationError(f"non-finite values in leaf at depth {depth} origin {tuple(origin)}")
        else:
            raise InvariantViolationError(f"unknown node status {status}")
    if reader.pos != body_len:
        raise InvariantViolationError(f"{body_len - reader.pos} trailing bytes after the last node")
    if len(tree.nodes) != node_count:
        raise InvariantViolationError(f"header announces {node_count} nodes, body holds {len(tree.nodes)}")
    return tree
