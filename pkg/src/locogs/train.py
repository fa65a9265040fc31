"""Optimization loops: attribute distillation and a toy end-to-end photometric trainer.

Both loops use :func:`adam_step` on plain tensors so the update rule and its
state are explicit and checkpointable.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .field import (HashGridConfig, HashGridField, gaussians_from_field, load_field, materialize, save_field,
                    sh_degree_mask)
from .masks import MaskState, apply_masks, derive_bandwidth, mask_loss, sh_mask_loss
from .model import ExplicitSet, SplatScene, load_ply, save_ply
from .render import Camera, rasterize, ssim_map

log = logging.getLogger(__name__)

LAMBDA_MASK_PRESETS = {"base": 0.004, "small": 0.005}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.2
    lam_mask: float = 0.004
    lam_sh_mask: float = 1e-4
    tau: float = 0.01
    tau_sh: float = 0.01
    iterations: int = 30_000
    warmup_iters: int = 5_000
    warmup_start: float = 0.01
    field_lr_init: float = 3e-3
    field_lr_final: float = 3e-4
    lr_position: float = 1.6e-4
    lr_color: float = 2.5e-3
    lr_scale: float = 5e-3
    lr_mask: float = 1e-2
    prune_every: int = 1_000
    prune_start: int = 0
    densify: bool = False
    densify_every: int = 100
    densify_until: int = 15_000
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    batch_size: int = 8192
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.iterations < 0 or self.warmup_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.prune_every < 1 or self.densify_every < 1:
            raise ValueError("prune_every and densify_every must be positive")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in LAMBDA_MASK_PRESETS:
            raise ValueError(f"unknown preset {name!r}")
        return cls(**{"lam_mask": LAMBDA_MASK_PRESETS[name], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


# ---- optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    m: object
    v: object
    t: int = 0

    @classmethod
    def zeros_like(cls, p) -> "AdamState":
        if isinstance(p, torch.Tensor):
            return cls(torch.zeros_like(p), torch.zeros_like(p))
        return cls(np.zeros_like(p), np.zeros_like(p))

    def subset(self, index) -> "AdamState":
        return AdamState(self.m[index], self.v[index], self.t)


def adam_step(param, grad, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One Adam update; works on numpy arrays and tensors.  Returns ``(new_param, new_state)``."""
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    return param - lr * m_hat / (v_hat**0.5 + eps), AdamState(m, v, t)


def field_lr(step: int, config: TrainConfig) -> float:
    """Linear warmup from ``warmup_start * lr_init`` then exponential decay to ``lr_final``."""
    lr0 = config.field_lr_init
    if step < config.warmup_iters:
        f = step / config.warmup_iters
        return lr0 * (config.warmup_start + (1.0 - config.warmup_start) * f)
    span = max(1, config.iterations - config.warmup_iters)
    f = min(1.0, (step - config.warmup_iters) / span)
    return lr0 * (config.field_lr_final / lr0) ** f


class _Optimizer:
    """Adam over named tensors, each with its own learning rate and epsilon."""

    def __init__(self, params: dict[str, torch.Tensor], lrs: dict[str, float], eps: dict[str, float]):
        self.params = params
        self.lrs = lrs
        self.eps = eps
        self.state = {k: AdamState.zeros_like(p.detach()) for k, p in params.items()}

    def step(self, lr_override: dict[str, float] | None = None):
        lrs = {**self.lrs, **(lr_override or {})}
        with torch.no_grad():
            for k, p in self.params.items():
                if p.grad is None:
                    continue
                new, self.state[k] = adam_step(p.detach(), p.grad, self.state[k], lrs[k], eps=self.eps.get(k, 1e-8))
                p.copy_(new)
                p.grad = None

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ---- losses ---------------------------------------------------------------------

def total_loss(rendered: torch.Tensor, target, mu, eta, config: TrainConfig) -> dict[str, torch.Tensor]:
    """``(1 - lam) L1 + lam (1 - SSIM) + lam_mask L_mask + lam_sh_mask L_sh_mask``.

    ``mu``/``eta`` may be tensors (differentiable) or a :class:`MaskState` via
    ``mu=state`` and ``eta=None``.  Returns every term and ``total``.
    """
    if isinstance(mu, MaskState):
        mu, eta = mu.mu, mu.eta
    target = torch.as_tensor(np.asarray(target) if not isinstance(target, torch.Tensor) else target,
                             dtype=rendered.dtype)
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {tuple(rendered.shape)} vs {tuple(target.shape)}")
    mu = torch.as_tensor(mu)
    eta = torch.as_tensor(eta)
    l1 = (rendered - target).abs().mean()
    l_ssim = 1.0 - ssim_map(rendered, target).mean()
    lm = mask_loss(mu)
    lsh = sh_mask_loss(eta)
    total = (1 - config.lam) * l1 + config.lam * l_ssim + config.lam_mask * lm + config.lam_sh_mask * lsh
    return {"total": total, "l1": l1, "ssim": l_ssim, "mask": lm, "sh_mask": lsh}


# ---- distillation -----------------------------------------------------------------

@dataclass
class DistillResult:
    field: HashGridField
    masks: MaskState
    losses: list[float]
    smoothed: list[float]
    rmse: dict[str, float]


def implicit_targets(scene: SplatScene) -> dict[str, np.ndarray]:
    """Split implicit attributes of every Gaussian as arrays (rotations with w >= 0)."""
    scales = scene.scales.astype(np.float64)
    gamma = scales.max(axis=1, keepdims=True)
    rot = scene.rotations.astype(np.float64)
    rot = np.where(rot[:, :1] < 0, -rot, rot)
    return {
        "opacity": scene.opacities.astype(np.float64),
        "norm_scale": scales / gamma,
        "rotation": rot,
        "residual_sh": scene.sh[:, 1:].astype(np.float64),
    }


def masks_from_bandwidth(bandwidth, max_degree: int = 3, tau: float = 0.01, tau_sh: float = 0.01,
                         pass_prob: float = 0.9) -> MaskState:
    """Mask state whose SH masks reproduce ``bandwidth`` exactly and nothing is pruned."""
    state = MaskState.init(len(bandwidth), max_degree, tau, tau_sh, pass_prob)
    fail = np.log(tau_sh) - np.log1p(-tau_sh) - 2.0
    deg = np.arange(1, max_degree + 1)
    state.eta = np.where(deg[None, :] <= np.asarray(bandwidth)[:, None], state.eta, fail)
    return state


def _distill_terms(out: dict, tgt: dict, sh_mask: torch.Tensor) -> dict[str, torch.Tensor]:
    dot = (out["rotation"] * tgt["rotation"]).sum(-1, keepdim=True)
    # q and -q are the same rotation: compare against the closer sign
    rot_t = torch.where(dot < 0, -tgt["rotation"], tgt["rotation"])
    sh_err = (out["residual_sh"] - tgt["residual_sh"]) * sh_mask[..., None]
    return {
        "opacity": ((out["opacity"] - tgt["opacity"]) ** 2).mean(),
        "norm_scale": ((out["norm_scale"] - tgt["norm_scale"]) ** 2).mean(),
        "rotation": ((out["rotation"] - rot_t) ** 2).mean(),
        "residual_sh": (sh_err**2).mean(),
    }


def distill(scene: SplatScene, field: HashGridField, masks: MaskState | None = None,
            config: TrainConfig | None = None, log_fn: Callable[[dict], None] | None = None,
            log_every: int = 100) -> DistillResult:
    """Fit the field to the scene's implicit attributes with an L2 loss on random mini-batches."""
    config = config or TrainConfig()
    if masks is None:
        masks = masks_from_bandwidth(scene.bandwidth, field.config.sh_degree, config.tau, config.tau_sh)
    dtype = field.dtype
    tgt_np = implicit_targets(scene)
    n_rest = field.config.n_sh_rest
    tgt_np["residual_sh"] = tgt_np["residual_sh"][:, :n_rest]
    tgt = {k: torch.as_tensor(v, dtype=dtype) for k, v in tgt_np.items()}
    pos = torch.as_tensor(scene.positions, dtype=dtype)
    shm = sh_degree_mask(n_rest, scene.bandwidth).to(dtype)
    params = dict(field.named_parameters())
    opt = _Optimizer(params, {k: config.field_lr_init for k in params}, {})
    rng = np.random.default_rng(config.seed)
    n = len(scene)
    losses, smoothed = [], []
    ema = None
    for step in range(config.iterations):
        idx = torch.as_tensor(rng.choice(n, size=min(config.batch_size, n), replace=False) if n > config.batch_size
                              else np.arange(n))
        out = field(pos[idx])
        terms = _distill_terms(out, {k: v[idx] for k, v in tgt.items()}, shm[idx])
        loss = sum(terms.values())
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(f"distill loss became {value} at step {step}; "
                                   + ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in terms.items()))
        loss.backward()
        lr = field_lr(step, config)
        opt.step({k: lr for k in params})
        losses.append(value)
        ema = value if ema is None else 0.98 * ema + 0.02 * value
        smoothed.append(ema)
        if log_fn and (step % log_every == 0 or step == config.iterations - 1):
            log_fn({"step": step, "loss": value, "smoothed": ema, "lr": lr})
    rmse = attribute_rmse(scene, field)
    return DistillResult(field, masks, losses, smoothed, rmse)


def attribute_rmse(scene: SplatScene, field: HashGridField) -> dict[str, float]:
    """Per-attribute RMSE of the field against the scene's implicit attributes."""
    if not len(scene):
        return {k: 0.0 for k in ("opacity", "norm_scale", "rotation", "residual_sh")}
    tgt = implicit_targets(scene)
    out = field.evaluate(scene.positions)
    n_rest = field.config.n_sh_rest
    shm = sh_degree_mask(n_rest, scene.bandwidth).numpy()
    with torch.no_grad():
        terms = _distill_terms({k: torch.as_tensor(v, dtype=torch.float64) for k, v in out.items()},
                               {k: torch.as_tensor(v[:, :n_rest] if k == "residual_sh" else v)
                                for k, v in tgt.items()},
                               torch.as_tensor(shm))
    return {k: float(np.sqrt(float(v))) for k, v in terms.items()}


# ---- end-to-end training ------------------------------------------------------------

@dataclass
class View:
    image: np.ndarray
    camera: Camera


@dataclass
class TrainState:
    """Learnable per-Gaussian tensors of the end-to-end trainer."""

    positions: torch.Tensor
    log_base_scales: torch.Tensor
    base_colors: torch.Tensor
    mu: torch.Tensor
    eta: torch.Tensor

    NAMES = ("positions", "log_base_scales", "base_colors", "mu", "eta")

    @classmethod
    def from_scene(cls, scene: SplatScene, masks: MaskState, dtype) -> "TrainState":
        ex = ExplicitSet.from_scene(scene)
        t = lambda a, d=dtype: torch.as_tensor(np.asarray(a), dtype=d).clone().requires_grad_(True)  # noqa: E731
        return cls(t(ex.positions), t(np.log(ex.base_scales.astype(np.float64))), t(ex.base_colors),
                   t(masks.mu, torch.float64), t(masks.eta, torch.float64))

    def tensors(self) -> dict[str, torch.Tensor]:
        return {k: getattr(self, k) for k in self.NAMES}

    def __len__(self) -> int:
        return self.positions.shape[0]

    def mask_state(self, tau: float, tau_sh: float) -> MaskState:
        return MaskState(self.mu.detach().numpy().copy(), self.eta.detach().numpy().copy(), tau, tau_sh)

    def explicit(self, bandwidth=None) -> ExplicitSet:
        n = len(self)
        bw = np.full(n, 3, np.uint8) if bandwidth is None else np.asarray(bandwidth, np.uint8)
        a = lambda t: t.detach().numpy()  # noqa: E731
        return ExplicitSet(a(self.positions).astype(np.float32), np.exp(a(self.log_base_scales)).astype(np.float32),
                           a(self.base_colors).astype(np.float32), bw)


def build_splats(state: TrainState, field: HashGridField, tau: float, tau_sh: float):
    """Algorithms 2 and 3 in one go: assemble Gaussians from the field, then mask them."""
    splats, _ = gaussians_from_field(state.positions, torch.exp(state.log_base_scales), state.base_colors, field)
    return apply_masks(splats, mu=state.mu, eta=state.eta, tau=tau, tau_sh=tau_sh)


def render_state(state: TrainState, field: HashGridField, camera: Camera, config: TrainConfig) -> dict:
    splats = build_splats(state, field, config.tau, config.tau_sh)
    return rasterize(splats, camera, background=config.background)


@dataclass
class E2EResult:
    scene: SplatScene
    explicit: ExplicitSet
    field: HashGridField
    masks: MaskState
    history: list[dict]
    survivors: list[int] = dc_field(default_factory=list)
    state: TrainState | None = None  # last optimizer iterate, before the final prune


def _densify(state: TrainState, opt: _Optimizer, grad_accum: np.ndarray, counts: np.ndarray,
             config: TrainConfig, extent: float, rng: np.random.Generator) -> TrainState:
    """Minimal clone/split by accumulated screen-agnostic position-gradient norm."""
    avg = grad_accum / np.maximum(counts, 1)
    hot = avg >= config.densify_grad_threshold
    if not hot.any():
        return state
    gamma = np.exp(state.log_base_scales.detach().numpy())
    small = gamma <= config.percent_dense * extent
    clone = np.flatnonzero(hot & small)
    split = np.flatnonzero(hot & ~small)
    with torch.no_grad():
        new = {k: v.detach() for k, v in state.tensors().items()}
        add = {k: [v[clone]] for k, v in new.items()}
        if len(split):
            offs = torch.as_tensor(rng.normal(size=(len(split), 3)) * gamma[split, None], dtype=new["positions"].dtype)
            add["positions"].append(new["positions"][split] + offs)
            shrunk = new["log_base_scales"][split] - math.log(1.6)
            new["log_base_scales"][split] = shrunk
            add["log_base_scales"].append(shrunk)
            for k in ("base_colors", "mu", "eta"):
                add[k].append(new[k][split])
        merged = {k: torch.cat([new[k]] + add[k]).clone().requires_grad_(True) for k in new}
    n_new = merged["positions"].shape[0] - len(state)
    for k, st in opt.state.items():
        if k in merged:
            pad = lambda a: torch.cat([a, torch.zeros((n_new,) + tuple(a.shape[1:]), dtype=a.dtype)])  # noqa: E731
            opt.state[k] = AdamState(pad(st.m), pad(st.v), st.t)
    return TrainState(**merged)


def train_e2e(views: Sequence[View], init_scene: SplatScene, config: TrainConfig | None = None,
              field: HashGridField | None = None, masks: MaskState | None = None,
              field_config: HashGridConfig | None = None, dtype=torch.float32,
              log_fn: Callable[[dict], None] | None = None, log_every: int = 50) -> E2EResult:
    """Toy photometric training loop over the reference renderer.

    Each iteration renders one view (cycled in seeded random order), applies the
    full loss and takes an Adam step on explicit attributes, masks and field.
    Every ``prune_every`` iterations (from ``prune_start``) Gaussians whose mask
    fails are removed together with their optimizer rows.
    """
    config = config or TrainConfig()
    if not views:
        raise ValueError("need at least one training view")
    if len(init_scene) == 0:
        raise ValueError("initial scene is empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if field is None:
        lo, hi = init_scene.bounds
        center = (lo.astype(np.float64) + hi) / 2
        radius = float(max(np.max(hi - lo) / 2, 1e-3))
        cfg = field_config or HashGridConfig(center=tuple(center), radius=radius)
        field = HashGridField(cfg, seed=config.seed, dtype=dtype)
    if masks is None:
        masks = MaskState.init(len(init_scene), field.config.sh_degree, config.tau, config.tau_sh)
    state = TrainState.from_scene(init_scene, masks, dtype)
    lo, hi = init_scene.bounds
    extent = float(np.linalg.norm(hi - lo)) / 2 or 1.0
    targets = [torch.as_tensor(np.asarray(v.image), dtype=dtype) for v in views]

    def make_opt(st: TrainState) -> _Optimizer:
        params = {**{f"field.{k}": p for k, p in field.named_parameters()}, **st.tensors()}
        lrs = {f"field.{k}": config.field_lr_init for k, _ in field.named_parameters()}
        lrs.update(positions=config.lr_position * extent, log_base_scales=config.lr_scale,
                   base_colors=config.lr_color, mu=config.lr_mask, eta=config.lr_mask)
        return _Optimizer(params, lrs, {"positions": 1e-15})

    opt = make_opt(state)
    grad_accum = np.zeros(len(state))
    counts = np.zeros(len(state))
    history, survivors = [], []
    order = []
    for step in range(config.iterations):
        if not order:
            order = list(rng.permutation(len(views)))
        vi = order.pop()
        out = render_state(state, field, views[vi].camera, config)
        terms = total_loss(out["image"], targets[vi], state.mu, state.eta, config)
        value = float(terms["total"].detach())
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {step}; "
                                   + ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in terms.items()))
        terms["total"].backward()
        if config.densify and step < config.densify_until:
            g = state.positions.grad
            if g is not None:
                grad_accum += g.detach().norm(dim=1).numpy()
                counts += 1
        lr = field_lr(step, config)
        opt.step({k: lr for k in opt.params if k.startswith("field.")})
        rec = {"step": step, "view": int(vi), "n": len(state), **{k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()}}
        history.append(rec)
        if log_fn and (step % log_every == 0 or step == config.iterations - 1):
            log_fn(rec)

        it = step + 1
        if config.densify and it < config.densify_until and it % config.densify_every == 0:
            state = _densify(state, opt, grad_accum, counts, config, extent, rng)
            opt = _rebind(opt, state, field, make_opt)
            grad_accum = np.zeros(len(state))
            counts = np.zeros(len(state))
        if it >= config.prune_start and it % config.prune_every == 0:
            keep = np.flatnonzero(state.mask_state(config.tau, config.tau_sh).keep_mask())
            if len(keep) == 0:
                raise TrainingDiverged(f"every Gaussian was pruned at step {step}")
            if len(keep) < len(state):
                state = _subset_state(state, keep)
                for k in TrainState.NAMES:
                    opt.state[k] = opt.state[k].subset(torch.as_tensor(keep))
                opt = _rebind(opt, state, field, make_opt)
                grad_accum, counts = grad_accum[keep], counts[keep]
            survivors.append(len(state))
            if log_fn:
                log_fn({"step": step, "event": "prune", "survivors": len(state)})

    final_masks = state.mask_state(config.tau, config.tau_sh)
    keep = np.flatnonzero(final_masks.keep_mask())
    if len(keep) == 0:
        raise TrainingDiverged("every Gaussian was pruned")
    final_masks = final_masks.subset(keep)
    bandwidth = derive_bandwidth(final_masks)
    explicit = state.explicit(np.zeros(len(state), np.uint8)).subset(keep)
    explicit.bandwidth = bandwidth
    return E2EResult(materialize(explicit, field), explicit, field, final_masks, history, survivors, state)


def _subset_state(state: TrainState, keep: np.ndarray) -> TrainState:
    idx = torch.as_tensor(keep)
    return TrainState(**{k: v.detach()[idx].clone().requires_grad_(True) for k, v in state.tensors().items()})


def _rebind(opt: _Optimizer, state: TrainState, field: HashGridField, make_opt) -> _Optimizer:
    fresh = make_opt(state)
    fresh.state.update(opt.state)
    return fresh


# ---- checkpoints ---------------------------------------------------------------------

@dataclass
class Checkpoint:
    scene: SplatScene
    explicit: ExplicitSet
    field: HashGridField
    masks: MaskState
    config: dict


def save_checkpoint(directory, scene: SplatScene, field: HashGridField, masks: MaskState,
                    config: TrainConfig | None = None, explicit: ExplicitSet | None = None,
                    extra: dict | None = None) -> None:
    """Write ``scene.ply``, ``explicit.npz``, ``field.bin``, ``masks.npz`` and ``config.json``.

    ``scene`` is the materialized scene; ``explicit`` the stored attributes the
    field was trained against (derived from ``scene`` when omitted).
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    explicit = explicit if explicit is not None else ExplicitSet.from_scene(scene)
    save_ply(scene, d / "scene.ply")
    np.savez(d / "explicit.npz", positions=explicit.positions, base_scales=explicit.base_scales,
             base_colors=explicit.base_colors, bandwidth=explicit.bandwidth)
    save_field(field, d / "field.bin")
    masks.save(d / "masks.npz")
    payload = {"train": config.to_dict() if config else None, **(extra or {})}
    (d / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    scene = load_ply(d / "scene.ply")
    if (d / "explicit.npz").exists():
        with np.load(d / "explicit.npz") as z:
            explicit = ExplicitSet(z["positions"], z["base_scales"], z["base_colors"], z["bandwidth"])
    else:
        explicit = ExplicitSet.from_scene(scene)
    return Checkpoint(scene, explicit, load_field(d / "field.bin"), MaskState.load(d / "masks.npz"),
                      json.loads((d / "config.json").read_text()))
