"""Gaussian and scene containers, the explicit/implicit attribute split, and PLY I/O.

A :class:`SplatScene` stores attributes the way 3DGS checkpoints do on disk:
opacity as a logit, scale as a log, rotation as a unit quaternion ``(w, x, y, z)``
and SH coefficients as ``(N, 16, 3)`` (coefficient-major, RGB last).  Keeping the
raw float32 parameterization is what makes ``load_ply(save_ply(scene))`` bitwise.
Single :class:`Gaussian` records expose the activated values instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from plyfile import PlyData, PlyElement

MAX_SH_DEGREE = 3
NUM_SH_COEFFS = (MAX_SH_DEGREE + 1) ** 2
SH_C0 = 0.28209479177387814

_UNIT_TOL = 1e-6
_OPACITY_EPS = 1e-7


class PlyFormatError(ValueError):
    """Raised for PLY files that do not follow the splat layout."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Normalize rows of ``q`` whose norm is off unit by more than 1e-6.

    Rows that are already unit are returned untouched so that normalization
    is idempotent on stored data.
    """
    q = np.asarray(q, dtype=np.float32)
    norms = np.linalg.norm(q.astype(np.float64), axis=-1)
    if np.any(norms == 0):
        raise ValueError(f"zero quaternion at index {int(np.argmax(norms == 0))}")
    off = np.abs(norms - 1.0) > _UNIT_TOL
    if not np.any(off):
        return q
    out = q.copy()
    out[off] = (q[off].astype(np.float64) / norms[off, None]).astype(np.float32)
    return out


def quaternion_to_matrix(q) -> np.ndarray:
    """Rotation matrix for a ``(w, x, y, z)`` quaternion (normalized internally)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Gaussian:
    """One Gaussian with activated attributes.

    ``sh`` holds blocks ``k^0 .. k^b``; block ``l`` has shape ``(2l+1, 3)``.
    """

    position: np.ndarray
    opacity: float
    scale: np.ndarray
    rotation: np.ndarray
    sh: tuple

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float32).reshape(3))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float32).reshape(3))
        object.__setattr__(self, "rotation", normalize_quaternions(np.asarray(self.rotation).reshape(1, 4))[0])
        blocks = tuple(np.asarray(b, dtype=np.float32).reshape(2 * l + 1, 3) for l, b in enumerate(self.sh))
        object.__setattr__(self, "sh", blocks)
        if not 1 <= len(blocks) <= MAX_SH_DEGREE + 1:
            raise ValueError(f"expected 1..{MAX_SH_DEGREE + 1} SH blocks, got {len(blocks)}")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError(f"opacity {self.opacity} outside [0, 1]")
        if np.any(self.scale <= 0):
            raise ValueError("scale components must be positive")

    @property
    def bandwidth(self) -> int:
        return len(self.sh) - 1


@dataclass(frozen=True)
class ExplicitAttrs:
    position: np.ndarray
    base_scale: float
    base_color: np.ndarray
    bandwidth: int

    def __post_init__(self):
        if not self.base_scale > 0:
            raise ValueError("base scale must be positive")
        if self.bandwidth not in range(MAX_SH_DEGREE + 1):
            raise ValueError(f"bandwidth {self.bandwidth} not in 0..{MAX_SH_DEGREE}")


@dataclass(frozen=True)
class ImplicitAttrs:
    opacity: float
    norm_scale: np.ndarray
    rotation: np.ndarray
    residual_sh: tuple

    @property
    def bandwidth(self) -> int:
        return len(self.residual_sh)


def split_attrs(g: Gaussian) -> tuple[ExplicitAttrs, ImplicitAttrs]:
    """Split ``g`` into stored and field-predicted parts with ``s = gamma * s_hat``.

    ``gamma`` is the largest scale component, so ``max(s_hat) == 1``.  The
    normalized scale is kept in float64; combined with float32 scales this makes
    :func:`compose_attrs` an exact inverse.
    """
    gamma = float(np.max(g.scale))
    if gamma <= 0:
        raise ValueError("cannot split a zero scale vector")
    s_hat = g.scale.astype(np.float64) / gamma
    explicit = ExplicitAttrs(g.position.copy(), gamma, g.sh[0][0].copy(), g.bandwidth)
    implicit = ImplicitAttrs(float(g.opacity), s_hat, g.rotation.copy(), tuple(b.copy() for b in g.sh[1:]))
    return explicit, implicit


def compose_attrs(e: ExplicitAttrs, i: ImplicitAttrs) -> Gaussian:
    if i.bandwidth != e.bandwidth:
        raise ValueError(f"implicit part carries {i.bandwidth} SH blocks, explicit bandwidth is {e.bandwidth}")
    scale = (np.float64(e.base_scale) * np.asarray(i.norm_scale, dtype=np.float64)).astype(np.float32)
    k0 = np.asarray(e.base_color, dtype=np.float32).reshape(1, 3)
    return Gaussian(e.position, i.opacity, scale, i.rotation, (k0, *i.residual_sh))


def covariance(g: Gaussian) -> np.ndarray:
    r = quaternion_to_matrix(g.rotation)
    s = g.scale.astype(np.float64)
    return (r * s**2) @ r.T


@dataclass
class SplatScene:
    """Ordered set of Gaussians in the raw 3DGS parameterization.

    Order is significant: the codec writes side streams in this order.
    """

    positions: np.ndarray
    raw_opacities: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    sh: np.ndarray
    bandwidth: np.ndarray
    extras: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    position_precision: str = "float32"

    def __post_init__(self):
        n = len(self.positions)
        self.positions = np.asarray(self.positions, dtype=np.float32).reshape(n, 3)
        self.raw_opacities = np.asarray(self.raw_opacities, dtype=np.float32).reshape(n)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float32).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float32).reshape(n, 4)
        self.sh = np.asarray(self.sh, dtype=np.float32).reshape(n, NUM_SH_COEFFS, 3)
        self.bandwidth = np.asarray(self.bandwidth, dtype=np.uint8).reshape(n)
        if np.any(self.bandwidth > MAX_SH_DEGREE):
            raise ValueError("bandwidth must be in 0..3")
        if self.position_precision not in ("float32", "float16"):
            raise ValueError(f"unknown position precision {self.position_precision!r}")
        for name in ("positions", "raw_opacities", "log_scales", "rotations", "sh"):
            arr = getattr(self, name)
            bad = ~np.isfinite(arr.reshape(n, int(np.prod(arr.shape[1:])))).all(axis=1)
            if np.any(bad):
                raise ValueError(f"non-finite {name} at record {int(np.argmax(bad))}")
        if n:
            self.rotations = normalize_quaternions(self.rotations)
        for k, v in self.extras.items():
            if len(v) != n:
                raise ValueError(f"extra field {k!r} has {len(v)} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.raw_opacities).astype(np.float32)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.astype(np.float64)).astype(np.float32)

    @property
    def base_colors(self) -> np.ndarray:
        return self.sh[:, 0, :]

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if not len(self):
            return np.zeros(3, np.float32), np.zeros(3, np.float32)
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def __getitem__(self, i: int) -> Gaussian:
        b = int(self.bandwidth[i])
        blocks = tuple(self.sh[i, l * l : (l + 1) ** 2] for l in range(b + 1))
        return Gaussian(self.positions[i], float(self.opacities[i]), self.scales[i], self.rotations[i], blocks)

    @property
    def gaussians(self) -> list[Gaussian]:
        return [self[i] for i in range(len(self))]

    def subset(self, index) -> "SplatScene":
        index = np.asarray(index)
        return SplatScene(
            self.positions[index],
            self.raw_opacities[index],
            self.log_scales[index],
            self.rotations[index],
            self.sh[index],
            self.bandwidth[index],
            extras={k: v[index] for k, v in self.extras.items()},
            metadata=dict(self.metadata),
            position_precision=self.position_precision,
        )

    def copy(self) -> "SplatScene":
        return self.subset(np.arange(len(self)))

    @classmethod
    def empty(cls) -> "SplatScene":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)),
                   np.zeros((0, NUM_SH_COEFFS, 3)), np.zeros(0))

    @classmethod
    def from_activated(cls, positions, opacities, scales, rotations, sh, bandwidth=None, **kwargs) -> "SplatScene":
        """Build a scene from activated values; opacities are clipped away from 0 and 1."""
        opacities = np.clip(np.asarray(opacities, dtype=np.float64), _OPACITY_EPS, 1 - _OPACITY_EPS)
        sh = np.asarray(sh, dtype=np.float32)
        n = len(opacities)
        if sh.ndim == 2:
            sh = sh.reshape(n, -1, 3)
        full = np.zeros((n, NUM_SH_COEFFS, 3), np.float32)
        full[:, : sh.shape[1]] = sh
        if bandwidth is None:
            bandwidth = np.full(n, int(round(np.sqrt(sh.shape[1]))) - 1, np.uint8)
        return cls(positions, logit(opacities), np.log(np.asarray(scales, dtype=np.float64)),
                   rotations, full, bandwidth, **kwargs)

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian], **kwargs) -> "SplatScene":
        if not gaussians:
            return cls.empty()
        n = len(gaussians)
        sh = np.zeros((n, NUM_SH_COEFFS, 3), np.float32)
        for i, g in enumerate(gaussians):
            sh[i, : num_coeffs(g.bandwidth)] = np.concatenate(g.sh, axis=0)
        return cls.from_activated(
            np.stack([g.position for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
            np.stack([g.scale for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            sh,
            np.array([g.bandwidth for g in gaussians]),
            **kwargs,
        )


@dataclass
class ExplicitSet:
    """Struct-of-arrays form of the explicit attributes ``(p, gamma, k0, b)``."""

    positions: np.ndarray
    base_scales: np.ndarray
    base_colors: np.ndarray
    bandwidth: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def from_scene(cls, scene: SplatScene) -> "ExplicitSet":
        return cls(
            scene.positions.copy(),
            scene.scales.max(axis=1) if len(scene) else np.zeros(0, np.float32),
            scene.base_colors.copy(),
            scene.bandwidth.copy(),
        )

    def subset(self, index) -> "ExplicitSet":
        return ExplicitSet(self.positions[index], self.base_scales[index], self.base_colors[index], self.bandwidth[index])


# ---- PLY ----------------------------------------------------------------------

_REQUIRED = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
_REST_COUNTS = {3 * (num_coeffs(d) - 1): d for d in range(1, MAX_SH_DEGREE + 1)}
_META_PREFIX = "locogs "


def load_ply(path) -> SplatScene:
    """Read a binary or ASCII 3DGS splat PLY.

    Opacity stays a logit and scales stay logs internally; the activated views
    (``scene.opacities``, ``scene.scales``) apply sigmoid and exp.  Missing
    ``f_rest_*`` fields mean bandwidth 0.
    """
    try:
        ply = PlyData.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:  # plyfile raises a family of parse errors
        raise PlyFormatError(f"{path}: {exc}") from exc
    try:
        vertex = ply["vertex"]
    except KeyError:
        raise PlyFormatError(f"{path}: no vertex element") from None
    names = [p.name for p in vertex.properties]
    missing = [n for n in _REQUIRED if n not in names]
    if missing:
        raise PlyFormatError(f"{path}: missing fields {missing}")
    rest = sorted((n for n in names if n.startswith("f_rest_")), key=lambda n: int(n[7:]))
    if rest and len(rest) not in _REST_COUNTS:
        raise PlyFormatError(f"{path}: {len(rest)} f_rest fields does not match any SH degree")
    if rest and rest != [f"f_rest_{j}" for j in range(len(rest))]:
        raise PlyFormatError(f"{path}: f_rest fields are not contiguous")
    data = vertex.data
    n = len(data)

    def cols(keys):
        if not keys:
            return np.zeros((n, 0), np.float32)
        return np.stack([np.asarray(data[k], dtype=np.float32) for k in keys], axis=1)

    positions = cols(["x", "y", "z"])
    raw_opacity = cols(["opacity"])[:, 0]
    log_scales = cols(["scale_0", "scale_1", "scale_2"])
    rotations = cols(["rot_0", "rot_1", "rot_2", "rot_3"])
    sh = np.zeros((n, NUM_SH_COEFFS, 3), np.float32)
    sh[:, 0] = cols(["f_dc_0", "f_dc_1", "f_dc_2"])
    degree = _REST_COUNTS.get(len(rest), 0)
    if degree:
        m = num_coeffs(degree) - 1
        sh[:, 1 : 1 + m] = cols(rest).reshape(n, 3, m).transpose(0, 2, 1)
    for arr, label in ((positions, "position"), (raw_opacity[:, None], "opacity"), (log_scales, "scale"),
                       (rotations, "rotation"), (sh.reshape(n, 3 * NUM_SH_COEFFS), "sh")):
        bad = ~np.isfinite(arr).all(axis=1)
        if np.any(bad):
            raise PlyFormatError(f"{path}: non-finite {label} at record {int(np.argmax(bad))}")
    if "bandwidth" in names:
        bandwidth = np.asarray(data["bandwidth"], dtype=np.uint8)
        if np.any(bandwidth > degree):
            raise PlyFormatError(f"{path}: bandwidth exceeds stored SH degree {degree}")
    else:
        bandwidth = np.full(n, degree, np.uint8)
    coeff_degree = np.floor(np.sqrt(np.arange(NUM_SH_COEFFS))).astype(np.uint8)
    sh[coeff_degree[None, :] > bandwidth[:, None]] = 0.0
    known = set(_REQUIRED) | set(rest) | {"bandwidth"}
    extras = {k: np.array(data[k]) for k in names if k not in known}
    metadata = {}
    for c in ply.comments:
        if c.startswith(_META_PREFIX) and "=" in c:
            key, _, value = c[len(_META_PREFIX):].partition("=")
            metadata[key] = value
    precision = metadata.pop("position_precision", "float32")
    try:
        return SplatScene(positions, raw_opacity, log_scales, rotations, sh, bandwidth,
                          extras=extras, metadata=metadata, position_precision=precision)
    except ValueError as exc:
        raise PlyFormatError(f"{path}: {exc}") from exc


def save_ply(scene: SplatScene, path) -> None:
    """Write ``scene`` as binary little-endian PLY in the 3DGS layout.

    ``f_rest_*`` is emitted only up to the highest bandwidth present, followed
    by a ``bandwidth`` uchar column; unknown extra columns are written back.
    """
    n = len(scene)
    degree = int(scene.bandwidth.max()) if n else 0
    m = num_coeffs(degree) - 1
    columns: list[tuple[str, np.ndarray]] = [
        ("x", scene.positions[:, 0]), ("y", scene.positions[:, 1]), ("z", scene.positions[:, 2]),
    ]
    columns += list(scene.extras.items())
    columns += [(f"f_dc_{c}", scene.sh[:, 0, c]) for c in range(3)]
    if m:
        rest = scene.sh[:, 1 : 1 + m].transpose(0, 2, 1).reshape(n, 3 * m)
        columns += [(f"f_rest_{j}", rest[:, j]) for j in range(3 * m)]
        columns.append(("bandwidth", scene.bandwidth))
    columns.append(("opacity", scene.raw_opacities))
    columns += [(f"scale_{j}", scene.log_scales[:, j]) for j in range(3)]
    columns += [(f"rot_{j}", scene.rotations[:, j]) for j in range(4)]

    dtype = [(name, np.asarray(col).dtype.str.replace(">", "<")) for name, col in columns]
    records = np.empty(n, dtype=dtype)
    for name, col in columns:
        records[name] = col
    comments = [f"{_META_PREFIX}position_precision={scene.position_precision}"]
    comments += [f"{_META_PREFIX}{k}={v}" for k, v in scene.metadata.items()]
    PlyData([PlyElement.describe(records, "vertex")], text=False, byte_order="<",
            comments=comments).write(str(path))


def save_point_cloud(path, positions: np.ndarray, colors: np.ndarray) -> None:
    """Write an ``x y z red green blue`` PLY; ``colors`` are floats in [0, 1]."""
    positions = np.asarray(positions, dtype=np.float32)
    rgb = np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
    records = np.empty(len(positions), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                              ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    for j, k in enumerate("xyz"):
        records[k] = positions[:, j]
    for j, k in enumerate(("red", "green", "blue")):
        records[k] = rgb[:, j]
    PlyData([PlyElement.describe(records, "vertex")], text=False, byte_order="<").write(str(path))


def load_point_cloud(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        v = PlyData.read(str(path))["vertex"].data
    except Exception as exc:
        raise PlyFormatError(f"{path}: {exc}") from exc
    positions = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float32)
    colors = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.float32) / 255.0
    return positions, colors


def scene_from_points(positions: np.ndarray, colors: np.ndarray, opacity: float = 0.1,
                      neighbors: int = 3) -> SplatScene:
    """Initialize a bandwidth-0 scene from a colored point cloud (3DGS-style).

    Isotropic scales come from the mean distance to the nearest ``neighbors``.
    """
    from scipy.spatial import cKDTree

    positions = np.asarray(positions, dtype=np.float32)
    n = len(positions)
    if n == 0:
        return SplatScene.empty()
    k = min(neighbors + 1, n)
    if k > 1:
        dist, _ = cKDTree(positions).query(positions, k=k)
        mean_d = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
    else:
        mean_d = np.full(n, 0.01)
    rot = np.zeros((n, 4)); rot[:, 0] = 1
    dc = (np.asarray(colors, dtype=np.float64) - 0.5) / SH_C0
    return SplatScene.from_activated(positions, np.full(n, opacity), np.repeat(mean_d[:, None], 3, 1),
                                     rot, dc.reshape(n, 1, 3), np.zeros(n, np.uint8))
