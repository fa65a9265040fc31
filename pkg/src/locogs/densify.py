"""Dense point-cloud initialization from a volumetric density field.

Rays are marched with uniform samples, composited front to back, and each ray
is back-projected at its median depth: the sample where the accumulated
transmittance first drops below one half.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .render import Camera


@dataclass
class DensityField:
    """Analytic volume: ``sigma(x) >= 0`` and ``color(x)`` in ``[0, 1]^3`` for points ``x`` of shape (M, 3)."""

    sigma: Callable[[np.ndarray], np.ndarray]
    color: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"

    def __call__(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        s = np.asarray(self.sigma(x), dtype=np.float64)
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ValueError(f"density field {self.name!r} returned negative or non-finite sigma")
        return s, np.asarray(self.color(x), dtype=np.float64)

    @staticmethod
    def _solid(rgb) -> Callable:
        rgb = np.asarray(rgb, dtype=np.float64)
        return lambda x: np.broadcast_to(rgb, x.shape).copy()

    @classmethod
    def vacuum(cls) -> "DensityField":
        return cls(lambda x: np.zeros(len(x)), cls._solid((0, 0, 0)), "vacuum")

    @classmethod
    def constant_slab(cls, sigma: float, lo: float, hi: float, axis: int = 2, rgb=(1.0, 1.0, 1.0)) -> "DensityField":
        """Density ``sigma`` where ``lo <= x[axis] < hi``, zero elsewhere."""
        return cls(lambda x: np.where((x[:, axis] >= lo) & (x[:, axis] < hi), sigma, 0.0), cls._solid(rgb), "slab")

    @classmethod
    def opaque_plane(cls, position: float, axis: int = 2, thickness: float = 0.05, sigma: float = 1e4,
                     rgb=(1.0, 1.0, 1.0)) -> "DensityField":
        """A thin, effectively opaque slab starting at ``x[axis] = position``."""
        f = cls.constant_slab(sigma, position, position + thickness, axis, rgb)
        f.name = "plane"
        return f

    @classmethod
    def sphere_shell(cls, center=(0.0, 0.0, 0.0), r_in: float = 0.8, r_out: float = 1.0,
                     sigma: float = 20.0) -> "DensityField":
        """Shell of constant density, colored by the outward normal."""
        c = np.asarray(center, dtype=np.float64)

        def sig(x):
            r = np.linalg.norm(x - c, axis=1)
            return np.where((r >= r_in) & (r <= r_out), sigma, 0.0)

        def col(x):
            d = x - c
            n = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
            return 0.5 * (n + 1.0)

        return cls(sig, col, "shell")

    @classmethod
    def axis_gradient(cls, axis: int = 2, sigma0: float = 0.0, slope: float = 1.0) -> "DensityField":
        """Density growing linearly along ``axis`` (clamped at zero), smooth color ramp."""
        def sig(x):
            return np.maximum(sigma0 + slope * x[:, axis], 0.0)

        def col(x):
            t = 0.5 + 0.5 * np.tanh(x[:, axis])
            return np.stack([t, 1 - t, 0.5 + 0.0 * t], axis=1)

        return cls(sig, col, "gradient")


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    n_samples: int

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not self.near < self.far:
            raise ValueError("near must be smaller than far")
        if self.n_samples < 1:
            raise ValueError("need at least one sample")

    @property
    def spacing(self) -> float:
        return (self.far - self.near) / self.n_samples

    def sample_depths(self) -> np.ndarray:
        """Midpoints of ``n_samples`` equal intervals covering ``[near, far]``."""
        return self.near + (np.arange(self.n_samples) + 0.5) * self.spacing


@dataclass
class Composite:
    color: np.ndarray
    T: np.ndarray          # length N+1; T[0] = 1, T[i] = prod_{j<i} (1 - alpha_j)
    alpha: np.ndarray
    t: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return self.T[:-1] * self.alpha


def _composite_many(origins, dirs, near, far, n, field: DensityField):
    delta = (far - near) / n
    t = near + (np.arange(n) + 0.5) * delta
    pts = origins[:, None, :] + t[None, :, None] * dirs[:, None, :]
    sigma, rgb = field(pts.reshape(-1, 3))
    sigma = sigma.reshape(len(origins), n)
    rgb = rgb.reshape(len(origins), n, 3)
    alpha = -np.expm1(-sigma * delta)
    T = np.ones((len(origins), n + 1))
    T[:, 1:] = np.cumprod(1.0 - alpha, axis=1)
    color = np.einsum("rn,rnc->rc", T[:, :-1] * alpha, rgb)
    return color, T, alpha, t


def composite(ray: Ray, field: DensityField) -> Composite:
    """Front-to-back compositing ``C = sum_i T_i alpha_i c_i`` with ``alpha_i = 1 - exp(-sigma_i delta)``."""
    color, T, alpha, t = _composite_many(ray.origin[None], ray.direction[None], ray.near, ray.far,
                                         ray.n_samples, field)
    return Composite(color[0], T[0], alpha[0], t)


@dataclass
class MedianDepth:
    index: int
    depth: float


def _crossing(T: np.ndarray) -> np.ndarray:
    """Per row, the sample index ``i`` with ``T[i] >= 0.5 > T[i+1]``, or -1."""
    below = T[:, 1:] < 0.5
    idx = np.argmax(below, axis=1)
    return np.where(below.any(axis=1), idx, -1)


def median_depth(ray: Ray, field: DensityField, comp: Composite | None = None) -> MedianDepth | None:
    """Depth of the sample where transmittance crosses 0.5; ``None`` when it never does."""
    comp = comp or composite(ray, field)
    i = int(_crossing(comp.T[None])[0])
    if i < 0:
        return None
    return MedianDepth(i, float(comp.t[i]))


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    ray_index: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)


def sample_dense_points(field: DensityField, cameras: Sequence[Camera], n_rays: int, seed: int = 0,
                        near: float = 0.05, far: float = 10.0, n_samples: int = 256,
                        chunk: int = 4096) -> PointCloud:
    """Back-project ``n_rays`` random training-view pixels to their median depth.

    Rays are drawn uniformly over all pixels of all cameras.  Only rays that
    reach the 0.5 transmittance crossing contribute a point; output is ordered
    by ray index.
    """
    if not cameras:
        raise ValueError("need at least one camera")
    rng = np.random.default_rng(seed)
    sizes = np.array([c.width * c.height for c in cameras])
    flat = rng.integers(0, sizes.sum(), size=n_rays)
    cam_idx = np.searchsorted(np.cumsum(sizes), flat, side="right")
    local = flat - np.concatenate([[0], np.cumsum(sizes)[:-1]])[cam_idx]
    origins = np.empty((n_rays, 3))
    dirs = np.empty((n_rays, 3))
    for ci, cam in enumerate(cameras):
        sel = cam_idx == ci
        px, py = local[sel] % cam.width, local[sel] // cam.width
        origins[sel], dirs[sel] = cam.pixel_rays(px.astype(np.float64), py.astype(np.float64))

    pos, col, ray_ids = [], [], []
    for s in range(0, n_rays, chunk):
        o, d = origins[s : s + chunk], dirs[s : s + chunk]
        color, T, _, t = _composite_many(o, d, near, far, n_samples, field)
        i = _crossing(T)
        hit = np.flatnonzero(i >= 0)
        z = t[i[hit]]
        pos.append(o[hit] + z[:, None] * d[hit])
        col.append(np.clip(color[hit], 0.0, 1.0))
        ray_ids.append(hit + s)
    positions = np.concatenate(pos) if pos else np.zeros((0, 3))
    if not len(positions):
        raise ValueError("no ray reached a surface; the density field looks empty from these cameras")
    return PointCloud(positions, np.concatenate(col), np.concatenate(ray_ids))
