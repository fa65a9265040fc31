"""Scene compression: Morton ordering, lossless positions, quantization and entropy coding."""

from .container import (
    CATEGORIES,
    CompressedScene,
    ContainerError,
    DecodedScene,
    EncodeOptions,
    StreamCorruptError,
    decode_scene,
    encode_scene,
    load_container,
    save_container,
    storage_stats,
)
from .entropy import EntropyError, entropy_decode, entropy_encode
from .morton import morton_key, morton_order, morton_sort
from .positions import octree_decode, octree_encode, reinterpret_pos, reinterpret_pos_inv
from .quant import QuantSpec, clip_multiplier, dequantize, quantize

__all__ = [
    "CATEGORIES", "CompressedScene", "ContainerError", "DecodedScene", "EncodeOptions", "EntropyError",
    "QuantSpec", "StreamCorruptError", "clip_multiplier", "decode_scene", "dequantize", "encode_scene",
    "entropy_decode", "entropy_encode", "load_container", "morton_key", "morton_order", "morton_sort",
    "octree_decode", "octree_encode", "quantize", "reinterpret_pos", "reinterpret_pos_inv", "save_container",
    "storage_stats",
]
