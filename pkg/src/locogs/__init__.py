"""Compact Gaussian-splat scenes: locality analysis, a hash-grid attribute field,
learnable pruning and SH-bandwidth masks, and a lossless-position codec."""

from .model import (
    ExplicitAttrs,
    ExplicitSet,
    Gaussian,
    ImplicitAttrs,
    PlyFormatError,
    SplatScene,
    compose_attrs,
    covariance,
    load_ply,
    save_ply,
    split_attrs,
)

__version__ = "0.1.0"

__all__ = [
    "ExplicitAttrs", "ExplicitSet", "Gaussian", "ImplicitAttrs", "PlyFormatError", "SplatScene",
    "compose_attrs", "covariance", "load_ply", "save_ply", "split_attrs",
]
