"""Density overlays for the MoG benchmark: real (solid) vs generated (dashed) KDE curves."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .synthbench import CLASS_NAMES, MoGSpec, class_samples, kde, silverman_bandwidth  # noqa: E402
from .trainer import generate  # noqa: E402

DEFAULT_GRID = np.linspace(-10, 25, 701)


def density_curves(real: dict, fake: dict, grid=DEFAULT_GRID, bandwidth: Optional[float] = None) -> dict:
    """KDE curves per class plus the pooled marginal.

    Returns ``{name: (real_curve, fake_curve)}``. Bandwidths follow
    Silverman's rule per sample unless ``bandwidth`` is given.
    """
    curves = {}
    names = list(real)
    pooled_r = np.concatenate([np.asarray(real[k], dtype=np.float64).ravel() for k in names])
    pooled_f = np.concatenate([np.asarray(fake[k], dtype=np.float64).ravel() for k in names])
    for name, r, f in [(k, real[k], fake[k]) for k in names] + [("Marginal", pooled_r, pooled_f)]:
        r = np.asarray(r, dtype=np.float64).ravel()
        f = np.asarray(f, dtype=np.float64).ravel()
        if r.size == 0 or f.size == 0:
            raise ValueError(f"empty sample set for {name}")
        curves[name] = (kde(r, bandwidth or silverman_bandwidth(r), grid),
                        kde(f, bandwidth or silverman_bandwidth(f), grid))
    return curves


def emit_density_plot(real: dict, fake: dict, out_path, bandwidth: Optional[float] = None,
                      grid=DEFAULT_GRID, title: str = "") -> dict:
    """Write a PNG with one panel per class plus the marginal; returns the plotted curves."""
    curves = density_curves(real, fake, grid, bandwidth)
    fig, axes = plt.subplots(1, len(curves), figsize=(4 * len(curves), 3), sharex=True)
    for ax, (name, (rc, fc)) in zip(np.atleast_1d(axes), curves.items()):
        ax.plot(grid, rc, "-", color="C0", label="real")
        ax.plot(grid, fc, "--", color="C3", label="generated")
        ax.set_title(name)
    np.atleast_1d(axes)[0].legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    out_path = Path(out_path)
    try:
        fig.savefig(out_path, dpi=80, metadata={"Software": None})
    finally:
        plt.close(fig)
    return curves


def plot_bundle(spec: MoGSpec, bundle, out_path, n_per_class: int = 10000, seed: int = 0, title: str = "") -> dict:
    gen = torch.Generator().manual_seed(seed)
    real, fake = {}, {}
    for k in range(spec.K):
        real[CLASS_NAMES[k]] = class_samples(spec, k, n_per_class, gen).numpy()
        fake[CLASS_NAMES[k]] = generate(bundle, torch.full((n_per_class,), k, dtype=torch.long), gen).numpy()
    return emit_density_plot(real, fake, out_path, title=title)
