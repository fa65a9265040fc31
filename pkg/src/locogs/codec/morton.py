"""Z-order (Morton) keys and spatial sorting."""

from __future__ import annotations

import numpy as np

from ..coherence import contract_to_unit

MORTON_BITS = 21


def _spread3(v: np.ndarray) -> np.ndarray:
    """Insert two zero bits between each of the low 21 bits of ``v``."""
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact3(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def morton_key(q, bits: int = MORTON_BITS) -> np.ndarray:
    """Interleave the bits of integer triples, x in the lowest position.

    ``q`` has shape (..., 3); every coordinate must lie in ``[0, 2**bits)`` with
    ``bits <= 21``.
    """
    if not 1 <= bits <= MORTON_BITS:
        raise ValueError(f"bits must be in 1..{MORTON_BITS}")
    q = np.asarray(q)
    if q.shape[-1] != 3:
        raise ValueError("expected integer triples")
    qi = q.astype(np.int64)
    if q.size and (np.any(qi < 0) or np.any(qi >= (1 << bits)) or not np.array_equal(qi, q)):
        raise ValueError(f"coordinates must be integers in [0, 2**{bits})")
    x, y, z = (_spread3(qi[..., j]) for j in range(3))
    return x | (y << np.uint64(1)) | (z << np.uint64(2))


def morton_decode(keys) -> np.ndarray:
    k = np.asarray(keys, dtype=np.uint64)
    return np.stack([_compact3(k >> np.uint64(j)) for j in range(3)], axis=-1).astype(np.int64)


def orderable_ints(p: np.ndarray) -> np.ndarray:
    """Sign-magnitude integers with the float's bit pattern; order matches the reals (and -0 == +0)."""
    p = np.asarray(p)
    if p.dtype == np.float16:
        bits, mag_mask, sign_shift = p.view(np.uint16).astype(np.int64), 0x7FFF, 15
    elif p.dtype == np.float32:
        bits, mag_mask, sign_shift = p.view(np.uint32).astype(np.int64), 0x7FFFFFFF, 31
    else:
        raise TypeError(f"unsupported dtype {p.dtype}")
    mag = bits & mag_mask
    return np.where((bits >> sign_shift) & 1, -mag, mag)


def spatial_keys(positions: np.ndarray, bits: int = MORTON_BITS) -> np.ndarray:
    """Morton keys of positions after contraction into the unit cube and ``2**bits`` quantization."""
    u = contract_to_unit(np.asarray(positions, dtype=np.float64))
    cells = np.clip(np.floor(u * (1 << bits)), 0, (1 << bits) - 1).astype(np.int64)
    return morton_key(cells, bits)


def morton_order(positions: np.ndarray, bits: int = MORTON_BITS) -> np.ndarray:
    """Stable permutation sorting by spatial key, ties broken by the exact coordinates."""
    positions = np.asarray(positions)
    if not np.all(np.isfinite(positions)):
        raise ValueError("positions must be finite")
    if len(positions) == 0:
        return np.zeros(0, np.int64)
    ints = orderable_ints(positions)
    keys = spatial_keys(positions, bits)
    return np.lexsort((ints[:, 2], ints[:, 1], ints[:, 0], keys)).astype(np.int64)


def morton_sort(scene, bits: int = MORTON_BITS):
    """Return ``(sorted scene, permutation)`` with ``sorted[i] = scene[perm[i]]``."""
    perm = morton_order(scene.positions, bits)
    return scene.subset(perm), perm
