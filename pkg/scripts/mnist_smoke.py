"""MNIST smoke run: train a conv generator for three full-MNIST epochs' worth of updates and score it.

Usage: python scripts/mnist_smoke.py [--kind uac] [--dataset mnist-5k] [--out runs/mnist_smoke]
Falls back to the bundled 5000-image subset when full MNIST cannot be downloaded.
"""
import argparse
import json
import logging
import time
from dataclasses import asdict
from pathlib import Path

from uacgan.imagebench import (DataUnavailable, class_grid, load_dataset, mnist_extractor, real_statistics,
                               score_generator, self_fid)
from uacgan.trainer import TrainConfig, fit, init_state, save_checkpoint

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

p = argparse.ArgumentParser()
p.add_argument("--kind", default="uac")
p.add_argument("--dataset", default="mnist")
p.add_argument("--epochs", type=int, default=3)
p.add_argument("--seed", type=int, default=0)
p.add_argument("--out", default="runs/mnist_smoke")
args = p.parse_args()

try:
    ds = load_dataset(args.dataset)
except DataUnavailable as e:
    logging.warning("%s; using mnist-5k", e)
    ds = load_dataset("mnist-5k")
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

ext = mnist_extractor()
real = real_statistics(ds, ext)
steps = args.epochs * 60000 // 64
cfg = TrainConfig(kind=args.kind, steps=steps, batch_size=64, backbone="mnist-conv", latent_dim=100, seed=args.seed)
untrained = score_generator(init_state(cfg, ds.data_shape, ds.label_spec).bundle, ds, 5000, ext, real_moments=real)
t0 = time.time()
state, _ = fit(cfg, ds, out_dir=out)
minutes = (time.time() - t0) / 60
save_checkpoint(state, out / "final.ckpt")
trained = score_generator(state.bundle, ds, 5000, ext, real_moments=real)
grids = {k: asdict(class_grid(state.bundle, k, 8, 8, out / f"class_{k}.png")) for k in range(10)}
result = {"dataset": ds.name, "steps": steps, "train_minutes": minutes, "self_fid": self_fid(ds, ext),
          "untrained": asdict(untrained), "trained": asdict(trained), "fid_ratio": untrained.fid / trained.fid,
          "grids": {k: {"variance": g["variance"], "collapsed": g["collapsed"]} for k, g in grids.items()}}
(out / "result.json").write_text(json.dumps(result, indent=2, default=str))
print(f"{ds.name}: self-FID {result['self_fid']:.2f}, FID {untrained.fid:.1f} -> {trained.fid:.2f} "
      f"({result['fid_ratio']:.1f}x), IS {trained.inception_score:.2f}, {minutes:.1f} min")
