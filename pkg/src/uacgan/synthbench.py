"""1-D three-component mixture-of-Gaussians benchmark: sampling, KDE and MMD scoring."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch

from .models import LabelSpec
from .trainer import SamplerDataset, TrainConfig, TrainingAborted, fit, generate

log = logging.getLogger(__name__)

CLASS_NAMES = ("Class_0", "Class_1", "Class_2")


@dataclass(frozen=True)
class MoGSpec:
    """Components as (mean, scale) pairs; ``scale`` is a std unless ``variance_convention``."""

    components: tuple = ((0.0, 1.0), (3.0, 2.0), (6.0, 3.0))
    variance_convention: bool = False

    def __post_init__(self):
        if any(s <= 0 for _, s in self.components):
            raise ValueError("component scales must be > 0")

    @property
    def K(self) -> int:
        return len(self.components)

    @property
    def means(self) -> np.ndarray:
        return np.array([m for m, _ in self.components], dtype=np.float64)

    @property
    def stds(self) -> np.ndarray:
        s = np.array([s for _, s in self.components], dtype=np.float64)
        return np.sqrt(s) if self.variance_convention else s

    @property
    def label_spec(self) -> LabelSpec:
        return LabelSpec(self.K)

    def pdf(self, x, k: Optional[int] = None) -> np.ndarray:
        from scipy.stats import norm
        x = np.asarray(x, dtype=np.float64)
        if k is not None:
            return norm.pdf(x, self.means[k], self.stds[k])
        return sum(norm.pdf(x, m, s) for m, s in zip(self.means, self.stds)) / self.K

    def sampler(self):
        means = torch.tensor(self.means, dtype=torch.float32)
        stds = torch.tensor(self.stds, dtype=torch.float32)
        K = self.K

        def sample(n, gen):
            y = torch.randint(0, K, (n,), generator=gen)
            x = means[y] + stds[y] * torch.randn(n, generator=gen)
            return x.unsqueeze(1), y
        return sample


def sample_mog(spec: MoGSpec, n: int, seed) -> tuple[torch.Tensor, torch.Tensor]:
    """``n`` labeled points: uniform labels, x | y=k ~ Normal(mean_k, std_k). Returns ``(x[n, 1], y[n])``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    return spec.sampler()(n, gen)


def class_samples(spec: MoGSpec, k: int, n: int, gen: torch.Generator) -> torch.Tensor:
    return float(spec.means[k]) + float(spec.stds[k]) * torch.randn(n, generator=gen, dtype=torch.float64)


# --------------------------------------------------------------------------- MMD and KDE


def _as2d(a) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(a, dtype=np.float64) if not torch.is_tensor(a) else a).to(torch.float64)
    if t.numel() == 0:
        raise ValueError("mmd_squared needs nonempty samples")
    return t.reshape(len(t), -1)


def _kernel_mean(a: torch.Tensor, b: torch.Tensor, sigma: float) -> float:
    if a.shape[1] == 1 and len(a) * len(b) > 4_000_000:
        lo = float(torch.minimum(a.min(), b.min()))
        hi = float(torch.maximum(a.max(), b.max()))
        nodes = max(32, math.ceil(5 * (hi - lo) / sigma) + 16)
        if nodes <= MAX_CHEB_NODES:
            return _kernel_mean_cheb(a[:, 0], b[:, 0], sigma, lo, hi, nodes)
    return _kernel_mean_exact(a, b, sigma)


# Past this many nodes the exact pairwise sum is used instead.
MAX_CHEB_NODES = 1024


def _cheb_basis_sums(x: torch.Tensor, nodes: torch.Tensor, weights: torch.Tensor, chunk: int = 8192) -> torch.Tensor:
    """Sum over x of the barycentric Lagrange basis at the Chebyshev nodes."""
    out = torch.zeros(len(nodes), dtype=torch.float64)
    for i in range(0, len(x), chunk):
        d = x[i:i + chunk, None] - nodes[None, :]
        hit = d == 0
        basis = weights / torch.where(hit, torch.ones_like(d), d)
        basis /= basis.sum(1, keepdim=True)
        on_node = hit.any(1)
        basis[on_node] = hit[on_node].to(torch.float64)
        out += basis.sum(0)
    return out


def _kernel_mean_cheb(a, b, sigma, lo, hi, n_nodes) -> float:
    # The kernel is entire, so interpolating it in both arguments at enough Chebyshev
    # nodes reproduces the pairwise mean to rounding error in O((|a| + |b|) * n_nodes).
    j = torch.arange(n_nodes, dtype=torch.float64)
    nodes = (lo + hi) / 2 + (hi - lo) / 2 * torch.cos(math.pi * j / (n_nodes - 1))
    weights = (-1.0) ** j
    weights[0] /= 2
    weights[-1] /= 2
    wa = _cheb_basis_sums(a, nodes, weights)
    wb = wa if b is a else _cheb_basis_sums(b, nodes, weights)
    k = torch.exp(-0.5 * ((nodes[:, None] - nodes[None, :]) / sigma) ** 2)
    return float(wa @ k @ wb) / (len(a) * len(b))


def _kernel_mean_exact(a: torch.Tensor, b: torch.Tensor, sigma: float, chunk: int = 2048) -> float:
    total = 0.0
    scale = -0.5 / (sigma * sigma)
    for i in range(0, len(a), chunk):
        d2 = torch.cdist(a[i:i + chunk], b).square_()
        total += float(d2.mul_(scale).exp_().sum())
    return total / (len(a) * len(b))


def _precedes(a: torch.Tensor, b: torch.Tensor) -> bool:
    if a.shape != b.shape:
        return tuple(a.shape) < tuple(b.shape)
    diff = (a != b).flatten().nonzero()
    if len(diff) == 0:
        return False
    i = int(diff[0])
    return bool(a.flatten()[i] < b.flatten()[i])


def mmd_squared(xs, ys, bandwidth: float) -> float:
    """Biased (V-statistic) squared MMD with a Gaussian kernel of width ``bandwidth``."""
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    a, b = _as2d(xs), _as2d(ys)
    if _precedes(b, a):
        a, b = b, a   # fixed argument order keeps the cross term, and so the result, exactly symmetric
    kab = _kernel_mean(a, b, bandwidth)
    return _kernel_mean(a, a, bandwidth) + _kernel_mean(b, b, bandwidth) - 2 * kab


def median_bandwidth(samples, max_points: int = 2000, seed: int = 0) -> float:
    """Median pairwise distance (median heuristic) on at most ``max_points`` points."""
    a = _as2d(samples)
    if len(a) > max_points:
        idx = torch.randperm(len(a), generator=torch.Generator().manual_seed(seed))[:max_points]
        a = a[idx]
    d = torch.pdist(a)
    return float(d.median())


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=np.float64).ravel()
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(x.std(ddof=1), iqr / 1.34) if iqr > 0 else x.std(ddof=1)
    return 0.9 * spread * len(x) ** (-0.2)


def kde(samples, bandwidth: float, grid, chunk: int = 4096) -> np.ndarray:
    """Gaussian kernel density estimate of 1-D ``samples`` evaluated at ``grid``."""
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    x = torch.as_tensor(np.asarray(samples, dtype=np.float64).ravel())
    if x.numel() == 0:
        raise ValueError("kde needs at least one sample")
    g = torch.as_tensor(np.asarray(grid, dtype=np.float64).ravel())
    out = torch.zeros_like(g)
    for i in range(0, len(x), chunk):
        u = (g[:, None] - x[None, i:i + chunk]) / bandwidth
        out += torch.exp(-0.5 * u * u).sum(1)
    return (out / (len(x) * bandwidth * math.sqrt(2 * math.pi))).numpy()


# --------------------------------------------------------------------------- benchmark


@dataclass
class MMDReport:
    kind: str
    bandwidth: float
    n_per_class: int
    runs: list = field(default_factory=list)     # one dict per run: seed + per-class and marginal MMD^2
    errors: list = field(default_factory=list)

    COLUMNS = CLASS_NAMES + ("Marginal",)

    def values(self, column: str) -> np.ndarray:
        return np.array([r[column] for r in self.runs], dtype=np.float64)

    def summary(self) -> dict:
        out = {}
        for c in self.COLUMNS:
            v = self.values(c)
            out[c] = {"mean": float(v.mean()), "std": float(v.std()), "median": float(np.median(v))} if len(v) else {}
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["kind", "seed", "column", "mmd2", "bandwidth", "n_per_class"])
            for r in self.runs:
                for c in self.COLUMNS:
                    w.writerow([self.kind, r["seed"], c, repr(r[c]), repr(self.bandwidth), self.n_per_class])


def default_mog_config(kind: str, seed: int = 0, **overrides) -> TrainConfig:
    """Training defaults used by the benchmark.

    MLP presets with latent dim 2, batch 256, 8000 steps, lr 1e-3 (3e-3 for C_mi and T),
    every lr annealed linearly to 0 over the second half; the classifier is
    trained on real data only.
    """
    base = dict(kind=kind, seed=seed, steps=8000, batch_size=256, backbone="mog-mlp", latent_dim=2,
                lr_G=1e-3, lr_D=1e-3, lr_C=1e-3, lr_Cmi=3e-3, lr_T=3e-3, lr_DY=1e-3,
                anneal_from=0.5, classifier_on_fake=False)
    base.update(overrides)
    return TrainConfig(**base)


def evaluation_bandwidth(spec: MoGSpec, n_per_class: int = 10000, seed: int = 12345) -> float:
    """Median-heuristic kernel width from a pooled real sample, shared by every run."""
    gen = torch.Generator().manual_seed(seed)
    pooled = torch.cat([class_samples(spec, k, n_per_class, gen) for k in range(spec.K)])
    return median_bandwidth(pooled, seed=seed)


def score_bundle(bundle, spec: MoGSpec, n_per_class: int, bandwidth: float, seed: int) -> dict:
    gen = torch.Generator().manual_seed(seed)
    out, reals, fakes = {}, [], []
    for k in range(spec.K):
        real = class_samples(spec, k, n_per_class, gen)
        fake = generate(bundle, torch.full((n_per_class,), k, dtype=torch.long), gen).to(torch.float64).ravel()
        out[CLASS_NAMES[k]] = mmd_squared(real, fake, bandwidth)
        reals.append(real)
        fakes.append(fake)
    out["Marginal"] = mmd_squared(torch.cat(reals), torch.cat(fakes), bandwidth)
    return out


def run_mog_benchmark(kind: str, runs: int = 5, config: Optional[TrainConfig] = None, spec: MoGSpec = MoGSpec(),
                      n_per_class: int = 10000, seed: int = 0, out_dir=None, keep_bundles: Optional[list] = None
                      ) -> MMDReport:
    """Train ``runs`` independent seeds of ``kind`` and score each with per-class and marginal MMD^2."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    config = config or default_mog_config(kind)
    config = replace(config, kind=kind)
    bw = evaluation_bandwidth(spec, n_per_class)
    report = MMDReport(kind, bw, n_per_class)
    data = SamplerDataset(spec.sampler(), spec.label_spec, (1,))
    for r in range(runs):
        run_seed = seed + r
        cfg = replace(config, seed=run_seed)
        t0 = time.time()
        run_dir = None if out_dir is None else f"{out_dir}/{kind}_seed{run_seed}"
        try:
            state, _ = fit(cfg, data, out_dir=run_dir)
        except TrainingAborted as e:
            log.error("%s seed %d aborted: %s", kind, run_seed, e)
            report.errors.append({"seed": run_seed, "error": str(e)})
            continue
        scores = score_bundle(state.bundle, spec, n_per_class, bw, seed=10_000 + run_seed)
        report.runs.append({"seed": run_seed, **scores})
        if keep_bundles is not None:
            keep_bundles.append(state.bundle)
        log.info("%s seed %d: %s (%.0fs)", kind, run_seed,
                 ", ".join(f"{k}={v:.4g}" for k, v in scores.items()), time.time() - t0)
    return report


def real_vs_real(spec: MoGSpec = MoGSpec(), n_per_class: int = 10000, seed: int = 1) -> dict:
    """Null calibration: two independent real samples scored like a generator."""
    bw = evaluation_bandwidth(spec, n_per_class)
    gen = torch.Generator().manual_seed(seed)
    out, a_all, b_all = {}, [], []
    for k in range(spec.K):
        a, b = class_samples(spec, k, n_per_class, gen), class_samples(spec, k, n_per_class, gen)
        out[CLASS_NAMES[k]] = mmd_squared(a, b, bw)
        a_all.append(a)
        b_all.append(b)
    out["Marginal"] = mmd_squared(torch.cat(a_all), torch.cat(b_all), bw)
    return out
