"""CPU reference splatter: EWA projection, depth sorting and front-to-back compositing.

Everything here is written in torch so the same code path serves as the
training forward pass (autograd supplies the backward pass) and as the
quality check for decoded scenes.  Images are ``(H, W, 3)`` tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .model import Gaussian, SplatScene, quaternion_to_matrix

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)

COV2D_DILATION = 0.3
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
EXTENT_SIGMAS = 3.0


@dataclass
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward).

    ``rotation``/``translation`` map world points into camera space.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), fov_deg: float = 50.0,
                width: int = 64, height: int = 64) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            raise ValueError("up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height, rot, -rot @ eye)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        if "eye" in d:
            return cls.look_at(d["eye"], d.get("target", (0, 0, 0)), d.get("up", (0, 1, 0)),
                               d.get("fov_deg", 50.0), d.get("width", 64), d.get("height", 64))
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"], d["rotation"], d["translation"])

    def pixel_rays(self, px: np.ndarray, py: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World-space origins and unit directions through pixel centers."""
        d_cam = np.stack([(px + 0.5 - self.cx) / self.fx, (py + 0.5 - self.cy) / self.fy, np.ones_like(px, dtype=np.float64)], -1)
        d = d_cam @ self.rotation
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return np.broadcast_to(self.center, d.shape).copy(), d


@dataclass
class Splats:
    """Activated Gaussian attributes as tensors, ready to rasterize."""

    means: torch.Tensor
    opacities: torch.Tensor
    scales: torch.Tensor
    rotations: torch.Tensor
    sh: torch.Tensor

    def __len__(self) -> int:
        return self.means.shape[0]

    @classmethod
    def from_scene(cls, scene: SplatScene, dtype=torch.float32) -> "Splats":
        t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)  # noqa: E731
        return cls(t(scene.positions), t(scene.opacities), t(scene.scales), t(scene.rotations), t(scene.sh))

    def index(self, idx) -> "Splats":
        idx = torch.as_tensor(idx)
        return Splats(self.means[idx], self.opacities[idx], self.scales[idx], self.rotations[idx], self.sh[idx])

    def to_scene(self, bandwidth=None) -> SplatScene:
        a = lambda t: t.detach().cpu().numpy()  # noqa: E731
        n = len(self)
        bw = np.full(n, 3, np.uint8) if bandwidth is None else np.asarray(bandwidth, np.uint8)
        return SplatScene.from_activated(a(self.means), a(self.opacities), a(self.scales), a(self.rotations),
                                         a(self.sh), bw)


# ---- spherical harmonics -------------------------------------------------------

def sh_basis(x, y, z) -> list:
    """The 16 real SH basis values used by 3DGS, for numpy arrays or tensors."""
    xx, yy, zz = x * x, y * y, z * z
    return [
        SH_C0 + 0 * x,
        -SH_C1 * y, SH_C1 * z, -SH_C1 * x,
        SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy), SH_C2[3] * x * z, SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z, SH_C3[2] * y * (4 * zz - xx - yy),
        SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy), SH_C3[4] * x * (4 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy), SH_C3[6] * x * (xx - 3 * yy),
    ]


def eval_sh(sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Raw SH expansion ``sum_j basis_j(d) * k_j`` for ``sh`` of shape (N, C, 3), C in {1, 4, 9, 16}."""
    basis = sh_basis(dirs[:, 0], dirs[:, 1], dirs[:, 2])
    out = basis[0][:, None] * sh[:, 0]
    for j in range(1, sh.shape[1]):
        out = out + basis[j][:, None] * sh[:, j]
    return out


def sh_color(k, bandwidth: int, d) -> np.ndarray:
    """View-dependent RGB of one Gaussian: SH expansion up to ``bandwidth``, +0.5, clamped at 0.

    ``k`` is a sequence of blocks (``Gaussian.sh``) or a flat ``(C, 3)`` array.
    """
    if isinstance(k, (tuple, list)):
        k = np.concatenate([np.asarray(b, dtype=np.float64) for b in k], axis=0)
    k = np.asarray(k, dtype=np.float64)[: (bandwidth + 1) ** 2]
    d = np.asarray(d, dtype=np.float64)
    basis = sh_basis(d[0], d[1], d[2])[: len(k)]
    rgb = sum(b * row for b, row in zip(basis, k)) + 0.5
    return np.maximum(rgb, 0.0)


def gaussian_alpha(g: Gaussian, x) -> float:
    """Opacity contribution ``o * exp(-0.5 (x-p)^T Sigma^-1 (x-p))`` of ``g`` at ``x``."""
    r = quaternion_to_matrix(g.rotation)
    cov = (r * g.scale.astype(np.float64) ** 2) @ r.T
    diff = np.asarray(x, dtype=np.float64) - g.position.astype(np.float64)
    return float(g.opacity * np.exp(-0.5 * diff @ np.linalg.solve(cov, diff)))


# ---- rasterization ---------------------------------------------------------------

def _quat_to_rotmat(q: torch.Tensor) -> list:
    w, x, y, z = q.unbind(-1)
    norm = torch.sqrt(w * w + x * x + y * y + z * z)
    w, x, y, z = w / norm, x / norm, y / norm, z / norm
    return [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]


def project(splats: Splats, camera: Camera, near: float = 0.01) -> dict:
    """Per-Gaussian screen-space quantities.

    All products are spelled out elementwise (no batched matmul) so that a
    Gaussian's result does not depend on which other Gaussians share the batch.
    """
    dtype = splats.means.dtype
    wr = torch.as_tensor(camera.rotation, dtype=dtype)
    wt = torch.as_tensor(camera.translation, dtype=dtype)
    m = splats.means
    cam = [m[:, 0] * wr[i, 0] + m[:, 1] * wr[i, 1] + m[:, 2] * wr[i, 2] + wt[i] for i in range(3)]
    tx, ty, tz = cam
    visible = tz > near
    tz_safe = torch.where(visible, tz, torch.ones_like(tz))
    lim_x = 1.3 * (0.5 * camera.width / camera.fx)
    lim_y = 1.3 * (0.5 * camera.height / camera.fy)
    cx_ = torch.clamp(tx / tz_safe, -lim_x, lim_x) * tz_safe
    cy_ = torch.clamp(ty / tz_safe, -lim_y, lim_y) * tz_safe
    inv_z = 1.0 / tz_safe
    j00, j02 = camera.fx * inv_z, -camera.fx * cx_ * inv_z * inv_z
    j11, j12 = camera.fy * inv_z, -camera.fy * cy_ * inv_z * inv_z
    # T = J @ W, a 2x3 matrix per Gaussian
    t0 = [j00 * wr[0, k] + j02 * wr[2, k] for k in range(3)]
    t1 = [j11 * wr[1, k] + j12 * wr[2, k] for k in range(3)]
    rq = _quat_to_rotmat(splats.rotations)
    s = splats.scales
    # M = T @ R_q @ diag(s); Sigma_2d = M M^T
    m0 = [(t0[0] * rq[0][k] + t0[1] * rq[1][k] + t0[2] * rq[2][k]) * s[:, k] for k in range(3)]
    m1 = [(t1[0] * rq[0][k] + t1[1] * rq[1][k] + t1[2] * rq[2][k]) * s[:, k] for k in range(3)]
    a = m0[0] * m0[0] + m0[1] * m0[1] + m0[2] * m0[2] + COV2D_DILATION
    b = m0[0] * m1[0] + m0[1] * m1[1] + m0[2] * m1[2]
    c = m1[0] * m1[0] + m1[1] * m1[1] + m1[2] * m1[2] + COV2D_DILATION
    det = a * c - b * b
    conic = (c / det, -b / det, a / det)
    u = camera.fx * tx * inv_z + camera.cx
    v = camera.fy * ty * inv_z + camera.cy
    with torch.no_grad():
        mid = 0.5 * (a + c)
        lam = mid + torch.sqrt(torch.clamp(mid * mid - det, min=0.1))
        radius = torch.ceil(EXTENT_SIGMAS * torch.sqrt(lam))
    return {"u": u, "v": v, "depth": tz, "conic": conic, "radius": radius, "visible": visible}


def _pixel_pairs(proj: dict, order: torch.Tensor, width: int, height: int):
    """Enumerate (gaussian, pixel) pairs inside each splat's square footprint."""
    with torch.no_grad():
        u, v, r = proj["u"][order], proj["v"][order], proj["radius"][order]
        x0 = torch.clamp(torch.floor(u - r), 0, width).long()
        x1 = torch.clamp(torch.ceil(u + r), 0, width).long()
        y0 = torch.clamp(torch.floor(v - r), 0, height).long()
        y1 = torch.clamp(torch.ceil(v + r), 0, height).long()
        w = (x1 - x0).clamp(min=0)
        h = (y1 - y0).clamp(min=0)
        counts = w * h
        total = int(counts.sum())
        gid = torch.repeat_interleave(order, counts)
        slot = torch.repeat_interleave(torch.arange(len(order)), counts)
        start = torch.cumsum(counts, 0) - counts
        local = torch.arange(total) - start[slot]
        wl = w[slot]
        px = x0[slot] + local % wl.clamp(min=1)
        py = y0[slot] + local // wl.clamp(min=1)
    return gid, px, py


def rasterize(splats: Splats, camera: Camera, background=None, near: float = 0.01) -> dict:
    """Render and return ``image``, final transmittance ``T`` and total compositing ``weight`` per pixel."""
    h, w = camera.height, camera.width
    dtype = splats.means.dtype
    bg = torch.zeros(3, dtype=dtype) if background is None else torch.as_tensor(background, dtype=dtype)
    npix = h * w
    # Splats that can never reach ALPHA_MIN are dropped before any transcendental
    # math, so a masked-out Gaussian leaves the rest of the computation bit-identical.
    live = torch.nonzero(splats.opacities.detach() >= ALPHA_MIN).flatten()
    sp = splats.index(live)
    proj = project(sp, camera, near)
    with torch.no_grad():
        vis = torch.nonzero(proj["visible"]).flatten()
        depth_order = vis[torch.argsort(proj["depth"][vis], stable=True)]
    gid, px, py = _pixel_pairs(proj, depth_order, w, h)
    if len(gid) == 0:
        image = bg.expand(h, w, 3).clone()
        return {"image": image, "T": torch.ones(h, w, dtype=dtype), "weight": torch.zeros(h, w, dtype=dtype)}

    ca, cb, cc = proj["conic"]
    dx = px.to(dtype) + 0.5 - proj["u"][gid]
    dy = py.to(dtype) + 0.5 - proj["v"][gid]
    power = -0.5 * (ca[gid] * dx * dx + cc[gid] * dy * dy) - cb[gid] * dx * dy
    alpha = torch.clamp(sp.opacities[gid] * torch.exp(power), max=ALPHA_MAX)
    with torch.no_grad():
        keep = torch.nonzero(alpha >= ALPHA_MIN).flatten()
    gid, alpha = gid[keep], alpha[keep]
    pix = (py * w + px)[keep]
    # pairs are in depth order; a stable sort by pixel keeps that order within a pixel
    with torch.no_grad():
        by_pixel = torch.argsort(pix, stable=True)
    gid, alpha, pix = gid[by_pixel], alpha[by_pixel], pix[by_pixel]
    with torch.no_grad():
        counts = torch.bincount(pix, minlength=npix)
        start = torch.cumsum(counts, 0) - counts
        rank = torch.arange(len(pix)) - start[pix]
        depth = int(counts.max()) if len(pix) else 1

    padded = torch.zeros(npix, depth + 1, dtype=dtype).index_put((pix, rank + 1), alpha)
    trans = torch.cumprod(1.0 - padded, dim=1)  # trans[:, k] = prod_{j<=k} (1 - alpha_j), column 0 is 1
    t_before = trans[pix, rank]
    weight = t_before * alpha

    dirs = sp.means - torch.as_tensor(camera.center, dtype=dtype)
    dirs = dirs / torch.sqrt(dirs[:, 0] * dirs[:, 0] + dirs[:, 1] * dirs[:, 1] + dirs[:, 2] * dirs[:, 2])[:, None]
    rgb = torch.clamp(eval_sh(sp.sh, dirs) + 0.5, min=0.0)

    color = torch.zeros(npix, 3, dtype=dtype).index_add(0, pix, weight[:, None] * rgb[gid])
    weight_sum = torch.zeros(npix, dtype=dtype).index_add(0, pix, weight)
    t_final = trans[:, -1]
    image = color + t_final[:, None] * bg
    return {"image": image.view(h, w, 3), "T": t_final.view(h, w), "weight": weight_sum.view(h, w)}


def render(scene, camera: Camera, background=None, dtype=torch.float32) -> torch.Tensor:
    """Render a :class:`Splats` or :class:`SplatScene` to an ``(H, W, 3)`` image tensor."""
    splats = Splats.from_scene(scene, dtype) if isinstance(scene, SplatScene) else scene
    return rasterize(splats, camera, background)["image"]


# ---- metrics ----------------------------------------------------------------------

def _as_tensor(img) -> torch.Tensor:
    if isinstance(img, torch.Tensor):
        return img
    return torch.as_tensor(np.asarray(img, dtype=np.float64))


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; identical images give ``inf``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a.double() - b.double()) ** 2).mean())
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Per-pixel SSIM of ``(H, W, C)`` images, zero-padded 'same' convolution as in 3DGS."""
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    c = a.shape[-1]
    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]
    win = _gaussian_window(window, sigma, a.dtype).expand(c, 1, window, window)
    pad = window // 2
    conv = lambda t: F.conv2d(t, win, padding=pad, groups=c)  # noqa: E731
    mu_x, mu_y = conv(x), conv(y)
    sxx = conv(x * x) - mu_x * mu_x
    syy = conv(y * y) - mu_y * mu_y
    sxy = conv(x * y) - mu_x * mu_y
    c1, c2 = 0.01**2, 0.03**2
    s = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))
    return s[0].permute(1, 2, 0)


def ssim(a, b) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5) over pixels and channels."""
    a, b = _as_tensor(a).double(), _as_tensor(b).double()
    return float(ssim_map(a, b).mean())


def to_numpy_image(img: torch.Tensor) -> np.ndarray:
    return img.detach().cpu().numpy().astype(np.float32)


def save_png(img, path) -> None:
    from PIL import Image as PILImage

    arr = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    PILImage.fromarray(np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)).save(str(path))


def load_png(path) -> np.ndarray:
    from PIL import Image as PILImage

    return np.asarray(PILImage.open(str(path)).convert("RGB"), dtype=np.float32) / 255.0


__all__ = [
    "Camera", "Splats", "sh_basis", "eval_sh", "sh_color", "gaussian_alpha", "project", "rasterize",
    "render", "psnr", "ssim", "ssim_map", "save_png", "load_png",
]
