"""Adaptive order-0 arithmetic coding of small-alphabet symbol streams.

The coder is a 32-bit binary arithmetic coder with underflow (E3) handling.
Symbol frequencies start at 1, grow by ``FREQ_INCREMENT`` per occurrence and
are halved once their total exceeds ``FREQ_LIMIT``, which makes the model
track local statistics.

Stream layout (little-endian)::

    u8  mode           0 = arithmetic, 1 = stored (bit-packed)
    u16 alphabet size  1..256
    u32 symbol count
    u32 payload length
    ... payload

A stream falls back to stored mode whenever arithmetic coding would not be
smaller, so incompressible input expands only by the 11-byte header.
"""

from __future__ import annotations

import math
import struct

import numba
import numpy as np

FREQ_INCREMENT = 32
FREQ_LIMIT = 1 << 16

MODE_ARITH = 0
MODE_STORED = 1
_HEADER = struct.Struct("<BHII")
HEADER_SIZE = _HEADER.size

_BITS = 32
_FULL = 1 << _BITS
_HALF = _FULL >> 1
_QUARTER = _HALF >> 1
_MASK = _FULL - 1


class EntropyError(ValueError):
    pass


@numba.njit(cache=True)
def _rescale(freq):
    total = 0
    for s in range(freq.shape[0]):
        freq[s] = (freq[s] + 1) >> 1
        total += freq[s]
    return total


@numba.njit(cache=True)
def _encode(symbols, alphabet):
    freq = np.ones(alphabet, np.int64)
    total = alphabet
    out = np.zeros(symbols.shape[0] * 3 + 16, np.uint8)
    nbytes = 0
    acc = 0
    nacc = 0
    low = 0
    high = _MASK
    pending = 0
    for i in range(symbols.shape[0]):
        s = symbols[i]
        cum = 0
        for j in range(s):
            cum += freq[j]
        rng = high - low + 1
        new_low = low + cum * rng // total
        high = low + (cum + freq[s]) * rng // total - 1
        low = new_low
        while ((low ^ high) & _HALF) == 0:
            bit = low >> (_BITS - 1)
            acc = (acc << 1) | bit
            nacc += 1
            if nacc == 8:
                out[nbytes] = acc
                nbytes += 1
                acc = 0
                nacc = 0
            while pending > 0:
                acc = (acc << 1) | (bit ^ 1)
                nacc += 1
                if nacc == 8:
                    out[nbytes] = acc
                    nbytes += 1
                    acc = 0
                    nacc = 0
                pending -= 1
            low = (low << 1) & _MASK
            high = ((high << 1) & _MASK) | 1
        while (low & ~high & _QUARTER) != 0:
            pending += 1
            low = (low << 1) ^ _HALF
            high = ((high ^ _HALF) << 1) | _HALF | 1
        freq[s] += FREQ_INCREMENT
        total += FREQ_INCREMENT
        if total > FREQ_LIMIT:
            total = _rescale(freq)
    # flush: one more bit (plus pending) pins the final interval
    bit = 1
    acc = (acc << 1) | bit
    nacc += 1
    if nacc == 8:
        out[nbytes] = acc
        nbytes += 1
        acc = 0
        nacc = 0
    while pending > 0:
        acc = (acc << 1) | (bit ^ 1)
        nacc += 1
        if nacc == 8:
            out[nbytes] = acc
            nbytes += 1
            acc = 0
            nacc = 0
        pending -= 1
    if nacc > 0:
        out[nbytes] = acc << (8 - nacc)
        nbytes += 1
    return out[:nbytes]


@numba.njit(cache=True)
def _decode(payload, n, alphabet):
    freq = np.ones(alphabet, np.int64)
    total = alphabet
    out = np.zeros(n, np.uint8)
    nbits = payload.shape[0] * 8
    pos = 0
    code = 0
    for _ in range(_BITS):
        bit = 0
        if pos < nbits:
            bit = (payload[pos >> 3] >> (7 - (pos & 7))) & 1
        pos += 1
        code = (code << 1) | bit
    low = 0
    high = _MASK
    for i in range(n):
        rng = high - low + 1
        value = ((code - low + 1) * total - 1) // rng
        s = 0
        cum = 0
        while s < alphabet - 1 and cum + freq[s] <= value:
            cum += freq[s]
            s += 1
        out[i] = s
        new_low = low + cum * rng // total
        high = low + (cum + freq[s]) * rng // total - 1
        low = new_low
        while ((low ^ high) & _HALF) == 0:
            bit = 0
            if pos < nbits:
                bit = (payload[pos >> 3] >> (7 - (pos & 7))) & 1
            pos += 1
            code = ((code << 1) & _MASK) | bit
            low = (low << 1) & _MASK
            high = ((high << 1) & _MASK) | 1
        while (low & ~high & _QUARTER) != 0:
            bit = 0
            if pos < nbits:
                bit = (payload[pos >> 3] >> (7 - (pos & 7))) & 1
            pos += 1
            code = (code & _HALF) | ((code << 1) & (_MASK >> 1)) | bit
            low = (low << 1) ^ _HALF
            high = ((high ^ _HALF) << 1) | _HALF | 1
        freq[s] += FREQ_INCREMENT
        total += FREQ_INCREMENT
        if total > FREQ_LIMIT:
            total = _rescale(freq)
    return out


def _symbol_bits(alphabet: int) -> int:
    return max(1, math.ceil(math.log2(alphabet)))


def _pack(symbols: np.ndarray, bits: int) -> bytes:
    if bits == 8:
        return symbols.tobytes()
    planes = np.unpackbits(symbols[:, None], axis=1, bitorder="little")[:, :bits]
    return np.packbits(planes.reshape(-1), bitorder="little").tobytes()


def _unpack(payload: bytes, n: int, bits: int) -> np.ndarray:
    raw = np.frombuffer(payload, np.uint8)
    if bits == 8:
        return raw[:n].copy()
    flat = np.unpackbits(raw, bitorder="little")[: n * bits].reshape(n, bits)
    weights = (1 << np.arange(bits)).astype(np.uint16)
    return (flat.astype(np.uint16) @ weights).astype(np.uint8)


def entropy_encode(symbols, alphabet: int = 256) -> bytes:
    """Encode symbols in ``[0, alphabet)``; the smaller of arithmetic and stored output is kept."""
    if not 1 <= alphabet <= 256:
        raise EntropyError("alphabet must have 1..256 symbols")
    sym = np.ascontiguousarray(np.asarray(symbols).reshape(-1))
    if sym.size and (sym.min() < 0 or sym.max() >= alphabet):
        raise EntropyError(f"symbol outside alphabet of size {alphabet}")
    sym = sym.astype(np.uint8)
    n = len(sym)
    stored = _pack(sym, _symbol_bits(alphabet)) if n else b""
    arith = _encode(sym, alphabet).tobytes() if n else b""
    if n and len(arith) < len(stored):
        return _HEADER.pack(MODE_ARITH, alphabet, n, len(arith)) + arith
    return _HEADER.pack(MODE_STORED, alphabet, n, len(stored)) + stored


def entropy_decode(blob: bytes) -> np.ndarray:
    """Inverse of :func:`entropy_encode`; raises :class:`EntropyError` on truncation or bad headers."""
    if len(blob) < HEADER_SIZE:
        raise EntropyError("stream shorter than its header")
    mode, alphabet, n, length = _HEADER.unpack_from(blob)
    payload = bytes(blob[HEADER_SIZE:])
    if len(payload) != length:
        raise EntropyError(f"stream payload is {len(payload)} bytes, header says {length}")
    if not 1 <= alphabet <= 256:
        raise EntropyError(f"bad alphabet size {alphabet}")
    if n == 0:
        return np.zeros(0, np.uint8)
    if mode == MODE_STORED:
        bits = _symbol_bits(alphabet)
        if length != (n * bits + 7) // 8:
            raise EntropyError("stored stream length does not match symbol count")
        out = _unpack(payload, n, bits)
    elif mode == MODE_ARITH:
        out = _decode(np.frombuffer(payload, np.uint8), n, alphabet)
    else:
        raise EntropyError(f"unknown stream mode {mode}")
    if out.size and out.max() >= alphabet:
        raise EntropyError("decoded symbol outside alphabet")
    return out
