"""The ``.locogs`` container: scene encoding, decoding and storage statistics.

See ``docs/FORMAT.md`` for the byte layout.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from ..field import HashGridConfig, HashGridField, field_param_vector, load_param_vector, materialize
from ..model import ExplicitSet, SplatScene
from .entropy import EntropyError, entropy_decode, entropy_encode
from .morton import morton_order
from .positions import OctreeError, POSITION_DEPTH, grid_to_positions, octree_decode, octree_encode, positions_to_grid
from .quant import QuantSpec, dequantize, quantize

MAGIC = b"LOCOGS\x00\x00"
VERSION = 1
_PREAMBLE = struct.Struct("<8sIII")  # magic, version, header length, header crc32

CATEGORIES = ("Position", "Color", "Scale", "Mask", "Hash+MLP")
STREAM_CATEGORY = {
    "positions": "Position",
    "base_color": "Color",
    "base_scale": "Scale",
    "bandwidth": "Mask",
    "hash_grid": "Hash+MLP",
    "mlp": "Hash+MLP",
}


class ContainerError(ValueError):
    pass


class StreamCorruptError(ContainerError):
    def __init__(self, stream: str, reason: str):
        super().__init__(f"stream {stream!r} is corrupt: {reason}")
        self.stream = stream


@dataclass
class EncodeOptions:
    scale_bits: int = 6
    color_bits: int = 8
    hash_bits: int = 6


@dataclass
class CompressedScene:
    header: dict
    streams: dict[str, bytes] = dc_field(default_factory=dict)

    def to_bytes(self) -> bytes:
        table = [{"name": k, "category": STREAM_CATEGORY[k], "length": len(v), "crc32": zlib.crc32(v)}
                 for k, v in self.streams.items()]
        header = json.dumps({**self.header, "streams": table}, sort_keys=True, separators=(",", ":")).encode()
        pre = _PREAMBLE.pack(MAGIC, VERSION, len(header), zlib.crc32(header))
        return pre + header + b"".join(self.streams.values())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CompressedScene":
        if len(blob) < _PREAMBLE.size:
            raise ContainerError("file is too short to be a .locogs container")
        magic, version, hlen, hcrc = _PREAMBLE.unpack_from(blob)
        if magic != MAGIC:
            raise ContainerError("not a .locogs container (bad magic)")
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}, expected {VERSION}")
        raw = blob[_PREAMBLE.size : _PREAMBLE.size + hlen]
        if len(raw) != hlen or zlib.crc32(raw) != hcrc:
            raise ContainerError("container header is corrupt")
        header = json.loads(raw)
        table = header.pop("streams")
        pos = _PREAMBLE.size + hlen
        streams, checks = {}, {}
        for entry in table:
            streams[entry["name"]] = blob[pos : pos + entry["length"]]
            checks[entry["name"]] = entry
            pos += entry["length"]
        if pos != len(blob):
            raise ContainerError(f"container is {len(blob)} bytes, stream table accounts for {pos}")
        out = cls(header, streams)
        out._checks = checks
        return out

    def header_size(self) -> int:
        return len(self.to_bytes()) - sum(len(v) for v in self.streams.values())

    def stream(self, name: str) -> bytes:
        """Raw bytes of one stream after verifying its length and CRC32."""
        if name not in self.streams:
            raise ContainerError(f"container has no stream {name!r}")
        data = self.streams[name]
        entry = getattr(self, "_checks", {}).get(name)
        if entry is not None:
            if len(data) != entry["length"]:
                raise StreamCorruptError(name, "truncated")
            if zlib.crc32(data) != entry["crc32"]:
                raise StreamCorruptError(name, "CRC32 mismatch")
        return data


@dataclass
class DecodedScene:
    scene: SplatScene
    explicit: ExplicitSet
    field: HashGridField | None


def _byte_planes(a: np.ndarray) -> np.ndarray:
    """float32 array to bytes grouped by significance (all low bytes first)."""
    return np.ascontiguousarray(a.astype("<f4").view(np.uint8).reshape(-1, 4).T).reshape(-1)


def _from_byte_planes(b: np.ndarray, n: int) -> np.ndarray:
    return np.ascontiguousarray(b.reshape(4, n).T).view("<f4").reshape(-1).astype(np.float32)


def _pack2(b: np.ndarray) -> np.ndarray:
    pad = np.zeros((-len(b)) % 4, np.uint8)
    q = np.concatenate([b.astype(np.uint8), pad]).reshape(-1, 4)
    return (q[:, 0] | (q[:, 1] << 2) | (q[:, 2] << 4) | (q[:, 3] << 6)).astype(np.uint8)


def _unpack2(packed: np.ndarray, n: int) -> np.ndarray:
    q = np.stack([(packed >> s) & 3 for s in (0, 2, 4, 6)], axis=1).reshape(-1)
    return q[:n].astype(np.uint8)


def level_slices(config: HashGridConfig) -> list[slice]:
    """Ranges of the flat hash-table vector that belong to each level."""
    sizes = np.array(config.table_sizes()) * config.feature_dim
    ends = np.cumsum(sizes)
    return [slice(int(e - s), int(e)) for s, e in zip(sizes, ends)]


def encode_scene(scene, field: HashGridField | None, options: EncodeOptions | None = None) -> CompressedScene:
    """Compress explicit attributes plus the field.

    ``scene`` is an :class:`ExplicitSet` or a :class:`SplatScene` (whose explicit
    split is taken).  Positions are rounded to half precision, then stored
    losslessly; ``log(gamma)``, base colors and the hash table are quantized;
    MLP weights are only entropy coded.
    """
    options = options or EncodeOptions()
    explicit = scene if isinstance(scene, ExplicitSet) else ExplicitSet.from_scene(scene)
    n = len(explicit)
    if n and field is None:
        raise ValueError("a non-empty scene needs its field")
    with np.errstate(over="ignore"):
        half = explicit.positions.astype(np.float16)
    if n and not np.all(np.isfinite(half)):
        raise ValueError("positions overflow half precision")
    order = morton_order(half)
    half = half[order]
    header: dict = {"count": n, "position_precision": "float16", "position_depth": POSITION_DEPTH,
                    "options": vars(options).copy()}
    streams: dict[str, bytes] = {}
    streams["positions"] = entropy_encode(np.frombuffer(octree_encode(positions_to_grid(half)), np.uint8), 256)

    gamma = explicit.base_scales[order].astype(np.float64)
    colors = explicit.base_colors[order].astype(np.float64)
    if n:
        codes, spec = quantize(np.log(gamma), options.scale_bits)
        header["base_scale"] = {"domain": "log", **spec.to_dict()}
        streams["base_scale"] = entropy_encode(codes, 1 << options.scale_bits)
        planes, specs = [], []
        for c in range(3):
            codes, spec = quantize(colors[:, c], options.color_bits)
            planes.append(codes)
            specs.append(spec.to_dict())
        header["base_color"] = specs
        streams["base_color"] = entropy_encode(np.concatenate(planes), 1 << options.color_bits)
    else:
        streams["base_scale"] = entropy_encode([], 1 << options.scale_bits)
        streams["base_color"] = entropy_encode([], 1 << options.color_bits)
    streams["bandwidth"] = entropy_encode(_pack2(explicit.bandwidth[order]), 256)

    if field is not None:
        theta, heads = field_param_vector(field)
        header["field"] = {"config": field.config.to_dict(), "n_theta": len(theta), "n_heads": len(heads)}
        codes_all, specs = [], []
        for sl in level_slices(field.config):
            codes, spec = quantize(theta[sl], options.hash_bits)
            codes_all.append(codes)
            specs.append(spec.to_dict())
        header["hash_grid"] = specs
        streams["hash_grid"] = entropy_encode(np.concatenate(codes_all), 1 << options.hash_bits)
        streams["mlp"] = entropy_encode(_byte_planes(heads), 256)
    else:
        header["field"] = None
    return CompressedScene(header, streams)


def _decode_stream(comp: CompressedScene, name: str) -> np.ndarray:
    data = comp.stream(name)
    try:
        return entropy_decode(data)
    except EntropyError as exc:
        raise StreamCorruptError(name, str(exc)) from exc


def decode_field(comp: CompressedScene) -> HashGridField | None:
    meta = comp.header.get("field")
    if meta is None:
        return None
    cfg = HashGridConfig(**meta["config"])
    codes = _decode_stream(comp, "hash_grid")
    if len(codes) != meta["n_theta"]:
        raise StreamCorruptError("hash_grid", f"{len(codes)} values, header says {meta['n_theta']}")
    theta = np.empty(meta["n_theta"], np.float64)
    for sl, spec in zip(level_slices(cfg), comp.header["hash_grid"]):
        theta[sl] = dequantize(codes[sl], QuantSpec.from_dict(spec))
    raw = _decode_stream(comp, "mlp")
    if len(raw) != 4 * meta["n_heads"]:
        raise StreamCorruptError("mlp", f"{len(raw)} bytes, header says {4 * meta['n_heads']}")
    heads = _from_byte_planes(raw, meta["n_heads"])
    field = HashGridField(cfg, dtype=torch.float32)
    return load_param_vector(field, theta.astype(np.float32), heads)


def decode_explicit(comp: CompressedScene) -> ExplicitSet:
    n = comp.header["count"]
    try:
        grid = octree_decode(_decode_stream(comp, "positions").tobytes())
    except OctreeError as exc:
        raise StreamCorruptError("positions", str(exc)) from exc
    if len(grid) != n:
        raise StreamCorruptError("positions", f"{len(grid)} points, header says {n}")
    half = grid_to_positions(grid)
    # side streams were written in spatial-key order; restore it
    half = half[morton_order(half)]
    bw = _unpack2(_decode_stream(comp, "bandwidth"), n)
    if n == 0:
        return ExplicitSet(np.zeros((0, 3), np.float32), np.zeros(0, np.float32), np.zeros((0, 3), np.float32),
                           np.zeros(0, np.uint8))
    codes = _decode_stream(comp, "base_scale")
    if len(codes) != n:
        raise StreamCorruptError("base_scale", f"{len(codes)} values, header says {n}")
    gamma = np.exp(dequantize(codes, QuantSpec.from_dict(comp.header["base_scale"]))).astype(np.float32)
    planes = _decode_stream(comp, "base_color")
    if len(planes) != 3 * n:
        raise StreamCorruptError("base_color", f"{len(planes)} values, header says {3 * n}")
    colors = np.stack([dequantize(planes[c * n : (c + 1) * n], QuantSpec.from_dict(s))
                       for c, s in enumerate(comp.header["base_color"])], axis=1).astype(np.float32)
    return ExplicitSet(half.astype(np.float32), gamma, colors, bw)


def decode_scene(comp) -> DecodedScene:
    """Decode a container (object or bytes) and materialize full Gaussians through the field."""
    if not isinstance(comp, CompressedScene):
        comp = CompressedScene.from_bytes(bytes(comp))
    explicit = decode_explicit(comp)
    field = decode_field(comp)
    if len(explicit) == 0:
        return DecodedScene(SplatScene.empty(), explicit, field)
    scene = materialize(explicit, field, position_precision="float16")
    return DecodedScene(scene, explicit, field)


def save_container(comp: CompressedScene, path) -> int:
    blob = comp.to_bytes()
    Path(path).write_bytes(blob)
    return len(blob)


def load_container(path) -> CompressedScene:
    return CompressedScene.from_bytes(Path(path).read_bytes())


def storage_stats(comp) -> dict:
    """Bytes per storage category; ``Total`` is the sum of the others (container minus header)."""
    if not isinstance(comp, CompressedScene):
        comp = CompressedScene.from_bytes(bytes(comp))
    sizes = {c: 0 for c in CATEGORIES}
    for name, data in comp.streams.items():
        sizes[STREAM_CATEGORY[name]] += len(data)
    sizes["Total"] = sum(sizes[c] for c in CATEGORIES)
    return sizes
