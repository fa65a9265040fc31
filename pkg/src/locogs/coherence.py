"""Local-coherence statistics of Gaussian attributes.

Pairs of Gaussians closer than a threshold (squared distance, measured after
contracting positions into the unit cube) are sampled and the Euclidean
distance of each attribute family is recorded per threshold bucket.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .model import NUM_SH_COEFFS, SplatScene

ATTRIBUTES = ("opacity", "scale", "rotation", "base_color", "residual_sh")


def contract(p: np.ndarray) -> np.ndarray:
    """Mip-NeRF 360 contraction: identity inside the unit ball, ``(2 - 1/|p|) p/|p|`` outside."""
    p = np.asarray(p, dtype=np.float64)
    norm = np.linalg.norm(p, axis=-1, keepdims=True)
    safe = np.maximum(norm, 1.0)
    return np.where(norm <= 1.0, p, (2.0 - 1.0 / safe) * p / safe)


def contract_to_unit(p: np.ndarray) -> np.ndarray:
    """Contract and map the radius-2 ball affinely from ``[-2, 2]^3`` onto ``[0, 1]^3``."""
    return (contract(p) + 2.0) / 4.0


def default_thresholds(count: int = 4, start: float = 1e-5, ratio: float = 4.0) -> list[float]:
    """Geometric ladder of squared-distance thresholds in unit-cube coordinates."""
    return [start * ratio**i for i in range(count)]


def sample_pairs(scene: SplatScene, d: float, n: int, seed: int) -> np.ndarray:
    """Return up to ``n`` index pairs ``(i, k)``, ``i < k``, with ``|c_i - c_k|^2 < d``.

    ``c`` are contracted unit-cube positions.  Candidate pairs come from a k-d
    tree; when more than ``n`` qualify, a seeded uniform subset is kept.  Rows
    are sorted lexicographically.
    """
    if len(scene) < 2:
        raise ValueError("need at least two Gaussians to form pairs")
    if not d > 0:
        raise ValueError("distance threshold must be positive")
    c = contract_to_unit(scene.positions)
    tree = cKDTree(c)
    pairs = tree.query_pairs(np.sqrt(d), output_type="ndarray")
    if len(pairs):
        sq = np.sum((c[pairs[:, 0]] - c[pairs[:, 1]]) ** 2, axis=1)
        pairs = pairs[sq < d]
    if not len(pairs):
        raise ValueError(f"no Gaussian pairs closer than squared distance {d}")
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs = pairs[order]
    if len(pairs) > n:
        rng = np.random.default_rng(seed)
        pairs = pairs[np.sort(rng.choice(len(pairs), size=n, replace=False))]
    return pairs.astype(np.int64)


def _attribute_matrix(scene: SplatScene) -> dict[str, np.ndarray]:
    return {
        "opacity": scene.opacities[:, None].astype(np.float64),
        "scale": scene.scales.astype(np.float64),
        "rotation": scene.rotations.astype(np.float64),
        "base_color": scene.base_colors.astype(np.float64),
        # coefficients beyond a Gaussian's bandwidth are stored as zeros
        "residual_sh": scene.sh[:, 1:].reshape(len(scene), -1 if len(scene) else 3 * (NUM_SH_COEFFS - 1)).astype(np.float64),
    }


def attribute_distances(scene: SplatScene, pairs: np.ndarray) -> dict[str, np.ndarray]:
    """L2 distance per attribute family for each pair; quaternions are sign-aligned first."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    i, k = pairs[:, 0], pairs[:, 1]
    out = {}
    for name, mat in _attribute_matrix(scene).items():
        a, b = mat[i], mat[k]
        if name == "rotation":
            sign = np.where(np.sum(a * b, axis=1) < 0, -1.0, 1.0)
            b = b * sign[:, None]
        out[name] = np.linalg.norm(a - b, axis=1)
    return out


@dataclass
class BucketStats:
    mean: float
    std: float
    sem: float
    histogram: list[int]


@dataclass
class CoherenceReport:
    thresholds: list[float]
    pair_counts: list[int]
    sample_cap: int
    seed: int
    bin_edges: dict[str, list[float]]
    stats: dict[str, list[BucketStats]] = field(default_factory=dict)

    def means(self, attribute: str) -> np.ndarray:
        return np.array([b.mean for b in self.stats[attribute]])

    def sems(self, attribute: str) -> np.ndarray:
        return np.array([b.sem for b in self.stats[attribute]])

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["attribute", "threshold", "pair_count", "mean", "std", "sem", "bin", "bin_lo", "bin_hi", "count"])
        for name in ATTRIBUTES:
            edges = self.bin_edges[name]
            for t, cnt, st in zip(self.thresholds, self.pair_counts, self.stats[name]):
                for j, h in enumerate(st.histogram):
                    w.writerow([name, repr(t), cnt, repr(st.mean), repr(st.std), repr(st.sem),
                                j, repr(edges[j]), repr(edges[j + 1]), h])
        return buf.getvalue()


def coherence_report(scene: SplatScene, thresholds=None, n: int = 100_000, seed: int = 0,
                     bins: int = 32) -> CoherenceReport:
    """Distance statistics for each threshold bucket.

    Histogram edges are shared by all buckets of one attribute: ``bins`` equal
    bins from 0 to the largest observed distance.
    """
    thresholds = list(default_thresholds() if thresholds is None else thresholds)
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    per_bucket = []
    counts = []
    for t_idx, d in enumerate(thresholds):
        pairs = sample_pairs(scene, d, n, seed + t_idx)
        counts.append(len(pairs))
        per_bucket.append(attribute_distances(scene, pairs))

    edges, stats = {}, {}
    for name in ATTRIBUTES:
        top = max(float(dist[name].max()) for dist in per_bucket)
        e = np.linspace(0.0, top if top > 0 else 1.0, bins + 1)
        edges[name] = e.tolist()
        stats[name] = []
        for dist in per_bucket:
            v = dist[name]
            std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
            hist, _ = np.histogram(v, bins=e)
            stats[name].append(BucketStats(float(v.mean()), std, std / np.sqrt(len(v)), hist.tolist()))
    return CoherenceReport(thresholds, counts, n, seed, edges, stats)
