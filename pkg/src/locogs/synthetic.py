"""Procedural scenes for tests, benchmarks and demos."""

from __future__ import annotations

import numpy as np

from .model import NUM_SH_COEFFS, SplatScene, normalize_quaternions
from .render import Camera


def _surface_points(n: int, rng: np.random.Generator) -> np.ndarray:
    """Points on a unit sphere shell and a ground plane beneath it."""
    n_sphere = n * 2 // 3
    v = rng.normal(size=(n_sphere, 3))
    sphere = 0.6 * v / np.linalg.norm(v, axis=1, keepdims=True)
    ground = np.stack([rng.uniform(-1, 1, n - n_sphere), np.full(n - n_sphere, 0.6),
                       rng.uniform(-1, 1, n - n_sphere)], axis=1)
    ground[:, 1] += 0.01 * rng.normal(size=n - n_sphere)
    return np.concatenate([sphere, ground])


def _smooth(p: np.ndarray, freq: float, phase: float) -> np.ndarray:
    return np.sin(freq * p[:, 0] + phase) * np.cos(freq * p[:, 1] - 0.7 * phase) + 0.5 * np.sin(freq * p[:, 2] + 2 * phase)


def coherent_scene(n: int, seed: int = 0, positions: np.ndarray | None = None) -> SplatScene:
    """Gaussians whose every attribute is a smooth function of position."""
    rng = np.random.default_rng(seed)
    p = _surface_points(n, rng) if positions is None else np.asarray(positions, dtype=np.float64)
    n = len(p)
    spacing = 1.2 / np.sqrt(max(n, 1))
    gamma = spacing * (1.2 + 0.4 * _smooth(p, 2.0, 0.3))
    s_hat = np.stack([np.ones(n), 0.55 + 0.3 * _smooth(p, 1.5, 1.1), 0.35 + 0.2 * _smooth(p, 1.7, 2.3)], axis=1)
    scales = gamma[:, None] * np.clip(s_hat, 0.05, 1.0)
    angle = 0.8 * _smooth(p, 1.3, 0.5)
    axis = np.stack([_smooth(p, 1.1, 0.1), _smooth(p, 0.9, 1.7), np.ones(n)], axis=1)
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    rot = normalize_quaternions(np.concatenate([np.cos(angle / 2)[:, None], np.sin(angle / 2)[:, None] * axis], 1))
    opacity = 0.7 + 0.25 * np.tanh(_smooth(p, 1.2, 0.9))
    sh = np.zeros((n, NUM_SH_COEFFS, 3))
    for c in range(3):
        sh[:, 0, c] = 1.2 * _smooth(p, 2.5, 0.8 * c)
    for k in range(1, NUM_SH_COEFFS):
        for c in range(3):
            sh[:, k, c] = 0.15 / np.sqrt(k) * _smooth(p, 1.5 + 0.1 * k, 0.37 * k + c)
    height = p[:, 1]
    bandwidth = np.clip(np.floor(2.0 + 2.0 * np.sin(2.0 * p[:, 0]) * np.cos(1.5 * height)), 0, 3).astype(np.uint8)
    deg = np.floor(np.sqrt(np.arange(NUM_SH_COEFFS)))
    sh[deg[None, :] > bandwidth[:, None]] = 0.0
    return SplatScene.from_activated(p, opacity, scales, rot, sh, bandwidth)


def iid_scene(n: int, seed: int = 0, positions: np.ndarray | None = None) -> SplatScene:
    """Same layout as :func:`coherent_scene` but every attribute drawn independently of position."""
    rng = np.random.default_rng(seed)
    p = _surface_points(n, rng) if positions is None else np.asarray(positions, dtype=np.float64)
    n = len(p)
    scales = np.exp(rng.normal(-4.0, 0.5, size=(n, 3)))
    rot = normalize_quaternions(rng.normal(size=(n, 4)))
    opacity = rng.uniform(0.05, 0.95, n)
    sh = rng.normal(0, 0.3, size=(n, NUM_SH_COEFFS, 3))
    return SplatScene.from_activated(p, opacity, scales, rot, sh, np.full(n, 3, np.uint8))


def orbit_cameras(count: int, radius: float = 3.0, height: float = -0.8, size: int = 128,
                  fov_deg: float = 50.0, target=(0.0, 0.0, 0.0)) -> list[Camera]:
    """Cameras evenly spaced on a horizontal circle, looking at ``target`` (y is down)."""
    cams = []
    for i in range(count):
        a = 2 * np.pi * i / count + 0.3
        eye = (radius * np.sin(a), height, radius * np.cos(a))
        cams.append(Camera.look_at(eye, target, up=(0.0, -1.0, 0.0), fov_deg=fov_deg, width=size, height=size))
    return cams
