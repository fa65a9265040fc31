"""Multi-resolution hash grid plus per-attribute MLP heads.

The field maps a Gaussian position to its implicit attributes
(opacity, normalized scale, rotation, residual SH).  Positions are shifted
by ``center``, divided by ``radius``, contracted into the radius-2 ball and
mapped to the unit cube before the grid lookup.

Flattening order (used by checkpoints and the codec): the hash table is one
``(sum_l T_l, F)`` array, levels concatenated coarse to fine, row-major.  Head
parameters follow in the order scale, rotation, opacity, sh; within a head
``W0, b0, W1, b1, W2, b2`` with weights stored ``(out, in)`` row-major.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .model import MAX_SH_DEGREE, NUM_SH_COEFFS, ExplicitSet, ImplicitAttrs, SplatScene
from .render import Splats

# Spatial hash primes; part of the container format.
HASH_PRIMES = (1, 2654435761, 805459861)
HEAD_NAMES = ("scale", "rotation", "opacity", "sh")
OPACITY_ACTIVATIONS = ("sigmoid", "exp-clamped")

_CKPT_MAGIC = b"LGSFIELD"
_CKPT_VERSION = 1


@dataclass
class HashGridConfig:
    levels: int = 16
    min_res: int = 16
    max_res: int = 4096
    table_size_log2: int = 19
    feature_dim: int = 2
    hidden: int = 64
    sh_degree: int = MAX_SH_DEGREE
    opacity_activation: str = "sigmoid"
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("need at least one level")
        if self.levels > 1 and not self.min_res < self.max_res:
            raise ValueError("min_res must be below max_res")
        if self.opacity_activation not in OPACITY_ACTIVATIONS:
            raise ValueError(f"opacity_activation must be one of {OPACITY_ACTIVATIONS}")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        self.center = tuple(float(c) for c in self.center)

    @classmethod
    def preset(cls, name: str, **overrides) -> "HashGridConfig":
        """``base`` uses 2^19 entries per level, ``small`` 2^17."""
        sizes = {"base": 19, "small": 17}
        if name not in sizes:
            raise ValueError(f"unknown preset {name!r}")
        return cls(**{"table_size_log2": sizes[name], **overrides})

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp((math.log(self.max_res) - math.log(self.min_res)) / (self.levels - 1))

    def resolutions(self) -> list[int]:
        # relative slack keeps floor(16 * g**15) from landing on 4095
        return [int(math.floor(self.min_res * self.growth**l * (1 + 1e-12))) for l in range(self.levels)]

    def table_sizes(self) -> list[int]:
        cap = 1 << self.table_size_log2
        return [min(cap, (n + 1) ** 3) for n in self.resolutions()]

    @property
    def n_sh_rest(self) -> int:
        return (self.sh_degree + 1) ** 2 - 1

    def head_dims(self) -> dict[str, int]:
        return {"scale": 3, "rotation": 4, "opacity": 1, "sh": 3 * self.n_sh_rest}

    def to_dict(self) -> dict:
        return asdict(self)


def param_count(config: HashGridConfig) -> tuple[int, int]:
    """Closed-form ``(hash table, MLP)`` parameter counts."""
    n_theta = sum(config.table_sizes()) * config.feature_dim
    d_in, h = config.levels * config.feature_dim, config.hidden
    n_heads = sum((d_in * h + h) + (h * h + h) + (h * out + out) for out in config.head_dims().values())
    return n_theta, n_heads


def contract_to_unit_torch(p: torch.Tensor) -> torch.Tensor:
    """Torch twin of :func:`locogs.coherence.contract_to_unit`, safe to differentiate at 0."""
    sq = (p * p).sum(-1, keepdim=True)
    safe = torch.sqrt(torch.clamp(sq, min=1.0))
    contracted = torch.where(sq <= 1.0, p, (2.0 - 1.0 / safe) * p / safe)
    return (contracted + 2.0) / 4.0


def _mlp(d_in: int, hidden: int, d_out: int, gen: torch.Generator, dtype, zero_last=False) -> nn.Sequential:
    layers = [nn.Linear(d_in, hidden, dtype=dtype), nn.ReLU(), nn.Linear(hidden, hidden, dtype=dtype), nn.ReLU(),
              nn.Linear(hidden, d_out, dtype=dtype)]
    with torch.no_grad():
        for k, layer in enumerate(layers[::2]):
            fan_in = layer.in_features
            bound = math.sqrt(6.0 / fan_in) if k < 2 else math.sqrt(1.0 / fan_in)
            layer.weight.copy_((torch.rand(layer.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
            layer.bias.zero_()
        if zero_last:
            layers[-1].weight.zero_()
    return nn.Sequential(*layers)


class HashGridField(nn.Module):
    def __init__(self, config: HashGridConfig | None = None, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.config = config or HashGridConfig()
        self.seed = seed
        cfg = self.config
        gen = torch.Generator().manual_seed(seed)
        sizes = cfg.table_sizes()
        self.register_buffer("offsets", torch.tensor([0] + list(np.cumsum(sizes)), dtype=torch.long), persistent=False)
        table = (torch.rand(sum(sizes), cfg.feature_dim, generator=gen, dtype=torch.float64) * 2 - 1) * 1e-4
        self.table = nn.Parameter(table.to(dtype))
        d_in = cfg.levels * cfg.feature_dim
        dims = cfg.head_dims()
        self.heads = nn.ModuleDict(
            {name: _mlp(d_in, cfg.hidden, dims[name], gen, dtype, zero_last=(name == "sh")) for name in HEAD_NAMES}
        )
        with torch.no_grad():
            self.heads["rotation"][-1].bias.copy_(torch.tensor([1.0, 0.0, 0.0, 0.0]))
            init_opacity = 0.1
            bias = math.log(init_opacity / (1 - init_opacity)) if cfg.opacity_activation == "sigmoid" \
                else math.log(init_opacity)
            self.heads["opacity"][-1].bias.fill_(bias)
        self._res = cfg.resolutions()
        self._dense = [(n + 1) ** 3 <= t for n, t in zip(self._res, sizes)]

    @property
    def dtype(self) -> torch.dtype:
        return self.table.dtype

    def _level_index(self, level: int, corner: torch.Tensor) -> torch.Tensor:
        n = self._res[level]
        size = int(self.offsets[level + 1] - self.offsets[level])
        if self._dense[level]:
            idx = corner[..., 0] + (n + 1) * (corner[..., 1] + (n + 1) * corner[..., 2])
        else:
            idx = (corner[..., 0] * HASH_PRIMES[0]) ^ (corner[..., 1] * HASH_PRIMES[1]) ^ (corner[..., 2] * HASH_PRIMES[2])
            idx = idx % size
        return idx + self.offsets[level]

    def corner_indices(self, x: torch.Tensor, level: int) -> torch.Tensor:
        """Table rows of the 8 cell corners around ``x`` at ``level``, shape (N, 8)."""
        n = self._res[level]
        cell = torch.clamp(torch.floor(x.detach() * n), 0, n - 1).long()
        return self._level_index(level, cell[:, None, :] + _CORNERS)

    def grid_lookup(self, x: torch.Tensor) -> torch.Tensor:
        """Trilinearly interpolated features for unit-cube coordinates ``x`` (N, 3) -> (N, levels*F)."""
        feats = []
        for level, n in enumerate(self._res):
            pos = x * n
            cell = torch.clamp(torch.floor(pos.detach()), 0, n - 1)
            frac = pos - cell
            idx = self._level_index(level, cell.long()[:, None, :] + _CORNERS)
            w = torch.where(_CORNERS.bool(), frac[:, None, :], 1.0 - frac[:, None, :]).prod(-1)
            feats.append((w[..., None] * self.table[idx]).sum(1))
        return torch.cat(feats, dim=-1)

    def forward(self, positions: torch.Tensor) -> dict[str, torch.Tensor]:
        cfg = self.config
        center = torch.as_tensor(cfg.center, dtype=positions.dtype)
        x = contract_to_unit_torch((positions - center) / cfg.radius)
        f = self.grid_lookup(x)
        scale = torch.sigmoid(self.heads["scale"](f))
        rot = self.heads["rotation"](f)
        rot = rot / torch.clamp(torch.linalg.vector_norm(rot, dim=-1, keepdim=True), min=1e-12)
        raw_o = self.heads["opacity"](f)[:, 0]
        if cfg.opacity_activation == "sigmoid":
            opacity = torch.sigmoid(raw_o)
        else:
            opacity = torch.clamp(torch.exp(raw_o), max=1.0)
        sh = self.heads["sh"](f).view(-1, cfg.n_sh_rest, 3)
        return {"opacity": opacity, "norm_scale": scale, "rotation": rot, "residual_sh": sh}

    def evaluate(self, positions, chunk: int = 1 << 16) -> dict[str, np.ndarray]:
        """Forward pass without autograd over numpy positions, in chunks."""
        positions = torch.as_tensor(np.asarray(positions), dtype=self.dtype)
        parts = []
        with torch.no_grad():
            for s in range(0, len(positions), chunk):
                parts.append(self(positions[s : s + chunk]))
        if not parts:
            return {k: np.zeros((0,) + shape, np.float32) for k, shape in
                    (("opacity", ()), ("norm_scale", (3,)), ("rotation", (4,)), ("residual_sh", (self.config.n_sh_rest, 3)))}
        return {k: torch.cat([p[k] for p in parts]).numpy() for k in parts[0]}


_CORNERS = torch.tensor([[i & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)], dtype=torch.long)


def _truncate_sh(sh: np.ndarray, bandwidth: int) -> tuple:
    return tuple(np.asarray(sh[l * l - 1 : (l + 1) ** 2 - 1], dtype=np.float32) for l in range(1, bandwidth + 1))


def eval_implicit(field: HashGridField, p, bandwidth: int) -> ImplicitAttrs:
    """Implicit attributes of one Gaussian at raw position ``p``; residual SH cut to degrees 1..bandwidth."""
    out = field.evaluate(np.asarray(p, dtype=np.float64).reshape(1, 3))
    return ImplicitAttrs(
        float(out["opacity"][0]),
        out["norm_scale"][0].astype(np.float64),
        out["rotation"][0],
        _truncate_sh(out["residual_sh"][0], bandwidth),
    )


def sh_degree_mask(n_rest: int, bandwidth) -> torch.Tensor:
    """(N, n_rest) 0/1 mask keeping residual coefficients of degree <= bandwidth."""
    deg = torch.floor(torch.sqrt(torch.arange(1, n_rest + 1, dtype=torch.float64))).long()
    b = torch.as_tensor(np.array(bandwidth)).long().reshape(-1, 1)
    return (deg[None, :] <= b).to(torch.float64)


def eval_implicit_grad(field: HashGridField, p, bandwidth, upstream: dict) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of ``sum(upstream * F(p))``.

    ``upstream`` maps output names (``opacity``, ``norm_scale``, ``rotation``,
    ``residual_sh``) to arrays shaped like the outputs; missing keys count as
    zero.  Residual SH above ``bandwidth`` is dropped before the product.
    Returns gradients for ``table``, the flattened ``heads`` and ``positions``.
    """
    pos = torch.as_tensor(np.asarray(p, dtype=np.float64).reshape(-1, 3), dtype=field.dtype).requires_grad_(True)
    out = field(pos)
    mask = sh_degree_mask(field.config.n_sh_rest, np.broadcast_to(bandwidth, (len(pos),))).to(field.dtype)
    out["residual_sh"] = out["residual_sh"] * mask[..., None]
    total = pos.sum() * 0
    for k, v in upstream.items():
        g = torch.as_tensor(np.asarray(v), dtype=field.dtype).reshape(out[k].shape)
        total = total + (out[k] * g).sum()
    head_params = [p_ for name in HEAD_NAMES for p_ in field.heads[name].parameters()]
    grads = torch.autograd.grad(total, [field.table, pos] + head_params, allow_unused=True)
    fill = lambda g, ref: torch.zeros_like(ref) if g is None else g  # noqa: E731
    return {
        "table": fill(grads[0], field.table).detach().numpy(),
        "positions": fill(grads[1], pos).detach().numpy(),
        "heads": torch.cat([fill(g, ref).reshape(-1) for g, ref in zip(grads[2:], head_params)]).detach().numpy(),
    }


def _head_params(field: HashGridField) -> list[torch.Tensor]:
    return [p for name in HEAD_NAMES for p in field.heads[name].parameters()]


def field_param_vector(field: HashGridField) -> tuple[np.ndarray, np.ndarray]:
    theta = field.table.detach().numpy().reshape(-1).copy()
    heads = torch.cat([p.detach().reshape(-1) for p in _head_params(field)]).numpy().copy()
    return theta, heads


def load_param_vector(field: HashGridField, theta: np.ndarray, heads: np.ndarray) -> HashGridField:
    n_theta, n_heads = param_count(field.config)
    if len(theta) != n_theta or len(heads) != n_heads:
        raise ValueError(f"expected {n_theta}+{n_heads} parameters, got {len(theta)}+{len(heads)}")
    with torch.no_grad():
        field.table.copy_(torch.tensor(np.asarray(theta)).reshape(field.table.shape))
        k = 0
        for p in _head_params(field):
            p.copy_(torch.tensor(np.asarray(heads[k : k + p.numel()])).reshape(p.shape))
            k += p.numel()
    return field


def save_field(field: HashGridField, path) -> None:
    """Checkpoint: magic, version, JSON header, then theta and head arrays (little-endian)."""
    theta, heads = field_param_vector(field)
    dt = "<f8" if field.dtype == torch.float64 else "<f4"
    header = json.dumps({"config": field.config.to_dict(), "seed": field.seed, "dtype": dt,
                         "n_theta": len(theta), "n_heads": len(heads)}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<II", _CKPT_VERSION, len(header)) + header)
        fh.write(theta.astype(dt).tobytes())
        fh.write(heads.astype(dt).tobytes())


def load_field(path) -> HashGridField:
    blob = Path(path).read_bytes()
    if blob[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a field checkpoint")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16 : 16 + hlen])
    dt = np.dtype(header["dtype"])
    cfg = HashGridConfig(**header["config"])
    field = HashGridField(cfg, seed=header["seed"], dtype=torch.float64 if dt.itemsize == 8 else torch.float32)
    body = np.frombuffer(blob, dtype=dt, offset=16 + hlen)
    n_theta = header["n_theta"]
    if len(body) != n_theta + header["n_heads"]:
        raise ValueError(f"{path}: truncated parameter block")
    return load_param_vector(field, body[:n_theta], body[n_theta:])


def gaussians_from_field(positions: torch.Tensor, base_scales: torch.Tensor, base_colors: torch.Tensor,
                         field: HashGridField) -> tuple[Splats, dict]:
    """Assemble full Gaussians from explicit tensors and the field (all degrees kept)."""
    out = field(positions)
    n = positions.shape[0]
    scales = base_scales[:, None] * out["norm_scale"]
    sh = torch.cat([base_colors[:, None, :], out["residual_sh"]], dim=1)
    if sh.shape[1] < NUM_SH_COEFFS:
        sh = torch.cat([sh, sh.new_zeros(n, NUM_SH_COEFFS - sh.shape[1], 3)], dim=1)
    return Splats(positions, out["opacity"], scales, out["rotation"], sh), out


def materialize(explicit: ExplicitSet, field: HashGridField, **scene_kwargs) -> SplatScene:
    """Conventional Gaussians from explicit attributes and the field, residual SH cut to each bandwidth."""
    n = len(explicit)
    if n == 0:
        return SplatScene.empty()
    out = field.evaluate(explicit.positions)
    scales = explicit.base_scales.astype(np.float64)[:, None] * out["norm_scale"].astype(np.float64)
    sh = np.zeros((n, NUM_SH_COEFFS, 3), np.float32)
    sh[:, 0] = explicit.base_colors
    rest = out["residual_sh"]
    sh[:, 1 : 1 + rest.shape[1]] = rest
    deg = np.floor(np.sqrt(np.arange(NUM_SH_COEFFS))).astype(np.uint8)
    sh[deg[None, :] > explicit.bandwidth[:, None]] = 0.0
    return SplatScene.from_activated(explicit.positions, out["opacity"], scales, out["rotation"], sh,
                                     explicit.bandwidth, **scene_kwargs)
