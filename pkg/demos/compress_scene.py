"""Distill a field for a synthetic scene, compress it and report size and quality.

    python demos/compress_scene.py --gaussians 20000 --iterations 600
"""

import argparse
import tempfile
from pathlib import Path

import torch

from locogs.codec import decode_scene, encode_scene, save_container, storage_stats
from locogs.field import HashGridConfig, HashGridField
from locogs.model import ExplicitSet, save_ply
from locogs.render import psnr, render
from locogs.synthetic import coherent_scene, orbit_cameras
from locogs.train import TrainConfig, distill


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--gaussians", type=int, default=20_000)
    ap.add_argument("--iterations", type=int, default=600)
    ap.add_argument("--size", type=int, default=128)
    args = ap.parse_args()
    torch.set_num_threads(1)

    scene = coherent_scene(args.gaussians, seed=0)
    field = HashGridField(HashGridConfig(levels=6, min_res=32, max_res=512, table_size_log2=12), seed=0)
    res = distill(scene, field, config=TrainConfig(iterations=args.iterations, warmup_iters=50, batch_size=4096))
    print("attribute RMSE:", {k: round(v, 4) for k, v in res.rmse.items()})

    with tempfile.TemporaryDirectory() as tmp:
        ply, box = Path(tmp) / "scene.ply", Path(tmp) / "scene.locogs"
        save_ply(scene, ply)
        comp = encode_scene(ExplicitSet.from_scene(scene), field)
        size = save_container(comp, box)
        print(f"PLY {ply.stat().st_size} bytes, container {size} bytes "
              f"({ply.stat().st_size / size:.1f}x smaller)")
        print("per category:", storage_stats(comp))
        decoded = decode_scene(box.read_bytes()).scene

    for i, cam in enumerate(orbit_cameras(3, size=args.size)):
        p = psnr(render(decoded, cam).detach().numpy(), render(scene, cam).detach().numpy())
        print(f"view {i}: PSNR {p:.2f} dB")


if __name__ == "__main__":
    main()
