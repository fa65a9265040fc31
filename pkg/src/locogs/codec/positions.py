"""Lossless position coding: half-float reinterpretation and an occupancy octree.

A half-precision coordinate is turned into the signed integer carried by its
magnitude bits (``p' = sign(p) * bits(|p|)``), which is order preserving.
Adding ``HALF_OFFSET`` maps every finite value into ``[0, 2**16)`` so the
points live in a depth-16 octree.

Octree stream layout::

    u8  depth
    u64 point count
    occupancy octets, breadth first, children of each node in Morton order
    leaf multiplicities minus one, one byte each; 255 escapes to a following u32
"""

from __future__ import annotations

import struct

import numpy as np

from .morton import morton_decode, morton_key

HALF_MAX_MAGNITUDE = 0x7BFF          # bits of the largest finite half
HALF_OFFSET = HALF_MAX_MAGNITUDE
POSITION_DEPTH = 16
_OCT_HEADER = struct.Struct("<BQ")


class OctreeError(ValueError):
    pass


def reinterpret_pos(p) -> np.ndarray:
    """Half floats to sign-magnitude integers in ``[-31743, 31743]``; -0.0 maps to 0."""
    h = np.asarray(p, dtype=np.float16)
    bits = h.view(np.uint16).astype(np.int32)
    mag = bits & 0x7FFF
    if np.any(mag > HALF_MAX_MAGNITUDE):
        raise ValueError("positions must be finite half-precision values")
    return np.where(bits >> 15, -mag, mag).astype(np.int32)


def reinterpret_pos_inv(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.int64)
    mag = np.abs(q)
    if np.any(mag > HALF_MAX_MAGNITUDE):
        raise ValueError("integer outside the finite half range")
    bits = (mag | np.where(q < 0, 0x8000, 0)).astype(np.uint16)
    return bits.view(np.float16)


def positions_to_grid(p) -> np.ndarray:
    return (reinterpret_pos(p) + HALF_OFFSET).astype(np.int64)


def grid_to_positions(g) -> np.ndarray:
    return reinterpret_pos_inv(np.asarray(g, dtype=np.int64) - HALF_OFFSET)


def _write_counts(counts: np.ndarray) -> bytes:
    extra = counts - 1
    out = np.minimum(extra, 255).astype(np.uint8)
    big = np.flatnonzero(extra >= 255)
    if not len(big):
        return out.tobytes()
    parts, prev = [], 0
    for i in big:
        parts.append(out[prev : i + 1].tobytes())
        parts.append(struct.pack("<I", int(extra[i])))
        prev = i + 1
    parts.append(out[prev:].tobytes())
    return b"".join(parts)


def _read_counts(buf: bytes, n_leaves: int) -> np.ndarray:
    raw = np.frombuffer(buf, np.uint8)
    if 255 not in raw[:n_leaves] and len(raw) == n_leaves:
        return raw.astype(np.int64) + 1
    counts = np.empty(n_leaves, np.int64)
    pos = 0
    for i in range(n_leaves):
        if pos >= len(buf):
            raise OctreeError("octree leaf counts are truncated")
        c = buf[pos]
        pos += 1
        if c == 255:
            if pos + 4 > len(buf):
                raise OctreeError("octree leaf counts are truncated")
            c = struct.unpack_from("<I", buf, pos)[0]
            pos += 4
        counts[i] = c + 1
    if pos != len(buf):
        raise OctreeError("trailing bytes after octree leaf counts")
    return counts


def octree_encode(points, depth: int = POSITION_DEPTH) -> bytes:
    """Breadth-first occupancy coding of integer points in ``[0, 2**depth)^3``; duplicates kept."""
    if not 1 <= depth <= 21:
        raise OctreeError("depth must be in 1..21")
    pts = np.asarray(points).reshape(-1, 3)
    n = len(pts)
    if n and (pts.min() < 0 or pts.max() >= (1 << depth)):
        raise OctreeError(f"point outside the [0, 2**{depth}) cube")
    head = _OCT_HEADER.pack(depth, n)
    if n == 0:
        return head
    codes, counts = np.unique(morton_key(pts.astype(np.int64), depth), return_counts=True)
    octets = []
    level = codes
    for shift in range(depth):
        # occupancy of parents at this level, built bottom-up then emitted top-down
        parents = level >> np.uint64(3)
        child = (level & np.uint64(7)).astype(np.uint8)
        starts = np.flatnonzero(np.r_[True, parents[1:] != parents[:-1]])
        octets.append(np.bitwise_or.reduceat(np.left_shift(np.uint8(1), child), starts))
        level = parents[starts]
    occupancy = np.concatenate(octets[::-1]).astype(np.uint8)
    return head + occupancy.tobytes() + _write_counts(counts)


def octree_decode(blob: bytes) -> np.ndarray:
    """Points in Morton order (duplicates repeated), shape (N, 3), int64."""
    if len(blob) < _OCT_HEADER.size:
        raise OctreeError("octree stream shorter than its header")
    depth, n = _OCT_HEADER.unpack_from(blob)
    if not 1 <= depth <= 21:
        raise OctreeError(f"bad octree depth {depth}")
    if n == 0:
        if len(blob) != _OCT_HEADER.size:
            raise OctreeError("trailing bytes in empty octree")
        return np.zeros((0, 3), np.int64)
    buf = np.frombuffer(blob, np.uint8, offset=_OCT_HEADER.size)
    nodes = np.zeros(1, np.uint64)
    pos = 0
    for _ in range(depth):
        if pos + len(nodes) > len(buf):
            raise OctreeError("octree occupancy is truncated")
        occ = buf[pos : pos + len(nodes)]
        pos += len(nodes)
        if np.any(occ == 0):
            raise OctreeError("empty occupancy octet")
        bits = np.unpackbits(occ[:, None], axis=1, bitorder="little").astype(bool)
        parent, child = np.nonzero(bits)
        nodes = (nodes[parent] << np.uint64(3)) | child.astype(np.uint64)
    counts = _read_counts(bytes(buf[pos:]), len(nodes))
    if counts.sum() != n:
        raise OctreeError(f"octree holds {counts.sum()} points, header says {n}")
    return morton_decode(np.repeat(nodes, counts))
