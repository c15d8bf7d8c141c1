"""Reproduce the MoG MMD table: 5 seeds each of AC-GAN, TAC-GAN and UAC-GAN.

Usage: python scripts/mog_table.py [--runs 5] [--out runs/mog_table]
Writes per-run CSVs, a JSON summary, and density plots for the first seed.
"""
import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from uacgan.plots import plot_bundle
from uacgan.synthbench import MoGSpec, default_mog_config, real_vs_real, run_mog_benchmark

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

p = argparse.ArgumentParser()
p.add_argument("--runs", type=int, default=5)
p.add_argument("--steps", type=int, default=None)
p.add_argument("--kinds", default="ac,tac,uac")
p.add_argument("--out", default="runs/mog_table")
args = p.parse_args()

out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)
spec = MoGSpec()
summary = {"null": real_vs_real(spec)}
t0 = time.time()
for kind in args.kinds.split(","):
    overrides = {"steps": args.steps} if args.steps else {}
    bundles = []
    rep = run_mog_benchmark(kind, args.runs, default_mog_config(kind, **overrides), spec, keep_bundles=bundles)
    rep.write_csv(out / f"mmd_{kind}.csv")
    summary[kind] = {"summary": rep.summary(), "runs": rep.runs, "bandwidth": rep.bandwidth, "errors": rep.errors}
    if bundles:
        plot_bundle(spec, bundles[0], out / f"density_{kind}.png", title=kind.upper() + "-GAN")
summary["seconds"] = time.time() - t0
(out / "summary.json").write_text(json.dumps(summary, indent=2))
for kind in args.kinds.split(","):
    med = {c: f"{v['median']:.3g}" for c, v in summary[kind]["summary"].items()}
    print(kind, med)
print(f"total {summary['seconds']:.0f}s")
