"""Learnable pruning masks and adaptive SH-bandwidth masks.

Each Gaussian carries a pruning logit ``mu`` and one SH logit per degree
``eta[:, l-1]``.  A mask passes when ``sigmoid(logit) >= threshold``.  In the
forward pass masks are exactly 0 or 1; gradients flow to the logits as if the
mask were ``sigmoid(logit)`` (straight-through estimator).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import MAX_SH_DEGREE, sigmoid
from .render import Splats

INIT_PASS_PROB = 0.9


def sh_mask_weights(max_degree: int = MAX_SH_DEGREE) -> np.ndarray:
    """Per-degree weights ``(2l+1) / ((L+1)^2 - 1)`` for l = 1..L; they sum to 1."""
    l = np.arange(1, max_degree + 1)
    return (2 * l + 1) / ((max_degree + 1) ** 2 - 1)


@dataclass
class MaskState:
    mu: np.ndarray
    eta: np.ndarray
    tau: float = 0.01
    tau_sh: float = 0.01

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        eta = np.asarray(self.eta, dtype=np.float64)
        self.eta = eta if eta.ndim == 2 else eta.reshape(len(self.mu), -1)
        if len(self.eta) != len(self.mu):
            raise ValueError(f"eta has {len(self.eta)} rows, mu has {len(self.mu)}")
        for name in ("tau", "tau_sh"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")

    @classmethod
    def init(cls, n: int, max_degree: int = MAX_SH_DEGREE, tau: float = 0.01, tau_sh: float = 0.01,
             pass_prob: float = INIT_PASS_PROB) -> "MaskState":
        """All masks start passing with ``sigmoid(logit) = pass_prob``."""
        v = float(np.log(pass_prob) - np.log1p(-pass_prob))
        return cls(np.full(n, v), np.full((n, max_degree), v), tau, tau_sh)

    def __len__(self) -> int:
        return len(self.mu)

    @property
    def max_degree(self) -> int:
        return self.eta.shape[1]

    def keep_mask(self) -> np.ndarray:
        return _passes(self.mu, self.tau)

    def sh_masks(self) -> np.ndarray:
        """(N, L) cumulative SH masks, ``m^l = prod_{j<=l} 1(sigmoid(eta^j) >= tau_sh)``."""
        return np.cumprod(_passes(self.eta, self.tau_sh), axis=1).astype(bool)

    def subset(self, index) -> "MaskState":
        return MaskState(self.mu[index], self.eta[index], self.tau, self.tau_sh)

    def save(self, path) -> None:
        np.savez(path, mu=self.mu, eta=self.eta, tau=self.tau, tau_sh=self.tau_sh)

    @classmethod
    def load(cls, path) -> "MaskState":
        with np.load(path) as z:
            return cls(z["mu"], z["eta"], float(z["tau"]), float(z["tau_sh"]))


def _passes(logits: np.ndarray, tau: float) -> np.ndarray:
    # same float64 torch sigmoid as the training path, so ties resolve identically
    return (torch.sigmoid(torch.as_tensor(logits, dtype=torch.float64)) >= tau).numpy()


def ste_mask(logits: torch.Tensor, tau: float) -> torch.Tensor:
    """Hard ``1(sigmoid(logits) >= tau)`` forward, ``d sigmoid`` backward.

    The comparison is done in float64 whatever the input dtype.
    """
    soft = torch.sigmoid(logits.to(torch.float64))
    hard = (soft >= tau).to(torch.float64)
    # soft - soft.detach() is exactly zero, so the forward value stays binary
    return (hard + (soft - soft.detach())).to(logits.dtype)


def sh_ste_masks(eta: torch.Tensor, tau_sh: float) -> torch.Tensor:
    return torch.cumprod(ste_mask(eta, tau_sh), dim=1)


def _as_splats(scene) -> Splats:
    return scene if isinstance(scene, Splats) else Splats.from_scene(scene)


def apply_masks(scene, state: MaskState | None = None, mu: torch.Tensor | None = None,
                eta: torch.Tensor | None = None, tau: float = 0.01, tau_sh: float = 0.01) -> Splats:
    """Masked view of a scene: opacity and scale times ``m``, SH degree ``l`` times ``m^l``.

    Pass either a :class:`MaskState` or differentiable ``mu``/``eta`` tensors.
    """
    splats = _as_splats(scene)
    dtype = splats.means.dtype
    if state is not None:
        mu = torch.as_tensor(state.mu, dtype=torch.float64)
        eta = torch.as_tensor(state.eta, dtype=torch.float64)
        tau, tau_sh = state.tau, state.tau_sh
    if len(mu) != len(splats.means):
        raise ValueError(f"mask state has {len(mu)} rows, scene has {len(splats.means)}")
    m = ste_mask(mu, tau).to(dtype)
    return apply_mask_values(splats, m, sh_ste_masks(eta, tau_sh).to(dtype))


def apply_mask_values(splats: Splats, m: torch.Tensor, msh: torch.Tensor) -> Splats:
    """Multiply in already-computed masks: ``m`` (N,) and cumulative SH masks ``msh`` (N, L)."""
    n_coeffs = splats.sh.shape[1]
    # per-coefficient multiplier: degree 0 always kept, degree l uses m^l
    cols = [torch.ones_like(m)[:, None]]
    for l in range(1, int(round(np.sqrt(n_coeffs)))):
        cols.append(msh[:, l - 1 : l].expand(-1, 2 * l + 1))
    coeff_mask = torch.cat(cols, dim=1)
    return Splats(
        splats.means,
        splats.opacities * m,
        splats.scales * m[:, None],
        splats.rotations,
        splats.sh * coeff_mask[:, :, None],
    )


def mask_loss(mu):
    """Mean of ``sigmoid(mu)``."""
    if isinstance(mu, torch.Tensor):
        return torch.sigmoid(mu).mean()
    mu = np.asarray(mu, dtype=np.float64)
    if mu.size == 0:
        raise ValueError("mask loss needs at least one Gaussian")
    return float(sigmoid(mu).mean())


def sh_mask_loss(eta):
    """``(1/N) sum_i sum_l w_l sigmoid(eta_i^l)`` with the degree weights of :func:`sh_mask_weights`."""
    if isinstance(eta, torch.Tensor):
        w = torch.as_tensor(sh_mask_weights(eta.shape[1]), dtype=eta.dtype)
        return (torch.sigmoid(eta) * w).sum(1).mean()
    eta = np.asarray(eta, dtype=np.float64)
    if eta.size == 0:
        raise ValueError("SH mask loss needs at least one Gaussian")
    return float((sigmoid(eta) * sh_mask_weights(eta.shape[1])).sum(1).mean())


def derive_bandwidth(masks) -> np.ndarray:
    """Bandwidth per Gaussian: 0 if ``m^1 = 0``, else the largest ``l`` with ``m^l = 1``.

    Accepts a :class:`MaskState` or an (N, L) array of binary SH masks.
    """
    m = masks.sh_masks() if isinstance(masks, MaskState) else np.asarray(masks).astype(bool)
    if m.ndim == 1:
        m = m[:, None]
    degrees = np.arange(1, m.shape[1] + 1)
    top = np.max(np.where(m, degrees, 0), axis=1) if m.shape[1] else np.zeros(len(m), int)
    return np.where(m[:, 0] if m.shape[1] else False, top, 0).astype(np.uint8)


@dataclass
class PruneResult:
    scene: object
    state: MaskState
    keep: np.ndarray
    remap: np.ndarray


def prune(scene, state: MaskState) -> PruneResult:
    """Drop Gaussians whose pruning mask fails, preserving survivor order.

    ``scene`` is anything with ``subset`` and ``__len__``.  ``remap[i]`` is the new
    index of old Gaussian ``i`` or -1 if it was removed; ``keep`` lists survivors'
    old indices and can be used to slice optimizer state.
    """
    if len(scene) != len(state):
        raise ValueError(f"mask state has {len(state)} rows, scene has {len(scene)}")
    passed = state.keep_mask()
    keep = np.flatnonzero(passed)
    remap = np.full(len(state), -1, np.int64)
    remap[keep] = np.arange(len(keep))
    return PruneResult(scene.subset(keep), state.subset(keep), keep, remap)
