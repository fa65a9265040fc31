"""Toy end-to-end training with a strong mask penalty; prints survivors at each prune."""

import numpy as np
import torch

from locogs.field import HashGridConfig
from locogs.render import render
from locogs.synthetic import coherent_scene, orbit_cameras
from locogs.train import TrainConfig, View, train_e2e

if __name__ == "__main__":
    torch.set_num_threads(1)
    gt = coherent_scene(100, seed=1)
    cams = orbit_cameras(4, size=32)
    views = [View(render(gt, c).detach().numpy(), c) for c in cams]
    init = gt.subset(np.arange(len(gt)))
    init.positions = (gt.positions + np.random.default_rng(0).normal(0, 0.01, gt.positions.shape)).astype(np.float32)
    cfg = TrainConfig(iterations=920, warmup_iters=20, lam_mask=0.05, prune_every=50, prune_start=350, lr_mask=0.05)
    res = train_e2e(views, init, cfg, field_config=HashGridConfig(levels=4, min_res=8, max_res=64, table_size_log2=10),
                    log_fn=lambda r: print(r) if "event" in r else None)
    print("survivors:", res.survivors)
    print("bandwidth histogram:", np.bincount(res.explicit.bandwidth, minlength=4).tolist())
