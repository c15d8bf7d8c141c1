"""Donsker-Varadhan mutual-information estimation (MINE) over (x, y) pairs."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
from torch import Tensor, nn

from .models import ConcatStatisticsNet, LabelSpec, ProjectionStatisticsNet, feature_net, init_weights

log = logging.getLogger(__name__)

MARGINAL_STRATEGIES = ("prior", "permute")


class MIEstimateError(RuntimeError):
    pass


@dataclass
class MIEstimate:
    value: float
    joint_mean: float
    log_mean_exp_marginal: float
    batch_size: int
    ema_denominator: float = float("nan")


def log_mean_exp(t: Tensor) -> Tensor:
    """log(mean(exp(t))) with max subtraction."""
    m = t.max().detach()
    if not torch.isfinite(m):
        raise MIEstimateError(f"non-finite statistic in marginal term (max={float(m)})")
    out = m + torch.log(torch.exp(t - m).mean())
    if not torch.isfinite(out):
        raise MIEstimateError(f"log-mean-exp overflow (max={float(m)})")
    return out


def dv_bound(t_joint: Tensor, t_marginal: Tensor) -> Tensor:
    """Differentiable DV bound ``mean(t_joint) - log mean exp(t_marginal)``."""
    if t_joint.numel() == 0 or t_marginal.numel() == 0:
        raise ValueError("dv bound needs nonempty batches")
    return t_joint.mean() - log_mean_exp(t_marginal)


def dv_estimate(t_joint, t_marginal) -> MIEstimate:
    t_joint = torch.as_tensor(t_joint, dtype=torch.float64).detach().flatten()
    t_marginal = torch.as_tensor(t_marginal, dtype=torch.float64).detach().flatten()
    if t_joint.numel() == 0 or t_marginal.numel() == 0:
        raise ValueError("dv_estimate needs nonempty batches")
    jm = float(t_joint.mean())
    lme = float(log_mean_exp(t_marginal))
    return MIEstimate(value=jm - lme, joint_mean=jm, log_mean_exp_marginal=lme, batch_size=int(t_joint.numel()))


def resample_marginal_labels(labels: Tensor, label_spec: LabelSpec, strategy: str = "prior",
                             generator: Optional[torch.Generator] = None) -> Tensor:
    """Labels for the product-of-marginals term: i.i.d. from the prior, or a permutation."""
    labels = torch.as_tensor(labels)
    if labels.numel() == 0:
        raise ValueError("empty label batch")
    if strategy == "prior":
        return label_spec.sample(len(labels), generator).to(labels.dtype)
    if strategy == "permute":
        return labels[torch.randperm(len(labels), generator=generator)]
    raise ValueError(f"unknown marginal strategy {strategy!r}; use one of {MARGINAL_STRATEGIES}")


class EMADenominator:
    """Running estimate of E[exp T] on the marginal, kept in log space.

    ``rate`` is the weight of the newest batch: ``ema <- (1 - rate) * ema + rate * batch``.
    """

    def __init__(self, rate: float = 0.01):
        if not 0 < rate <= 1:
            raise ValueError(f"ema rate must be in (0, 1], got {rate}")
        self.rate = rate
        self.log_value: Optional[float] = None

    def update(self, batch_lme: float) -> float:
        if self.log_value is None or self.rate == 1:
            self.log_value = batch_lme
        else:
            self.log_value = float(np.logaddexp(math.log1p(-self.rate) + self.log_value,
                                                math.log(self.rate) + batch_lme))
        return self.log_value

    @property
    def value(self) -> float:
        if self.log_value is None:
            return float("nan")
        return math.exp(self.log_value) if self.log_value < 709.0 else math.inf


def mine_step(T: nn.Module, x_fake: Tensor, y: Tensor, y_bar: Tensor, ema: EMADenominator):
    """One statistics-network evaluation for the DV objective.

    Returns ``(estimate, surrogate)``. Minimizing ``surrogate`` ascends the DV
    bound with the marginal term's denominator replaced by the EMA of
    E[exp T]; the reported estimate always uses the batch statistic. The
    generator output is detached so this never reaches G.
    """
    x = x_fake.detach()
    t_joint = T(x, y)
    t_marg = T(x, y_bar)
    lme = log_mean_exp(t_marg)
    log_ema = ema.update(float(lme.detach()))
    jm = t_joint.mean()
    surrogate = -(jm - torch.exp(t_marg - log_ema).mean())
    est = MIEstimate(value=float(jm.detach() - lme.detach()), joint_mean=float(jm.detach()),
                     log_mean_exp_marginal=float(lme.detach()), batch_size=len(x),
                     ema_denominator=ema.value)
    return est, surrogate


# --------------------------------------------------------------------------- standalone estimator

Sampler = Callable[[int, torch.Generator], tuple]


def build_statistic(arch: str, x_dim: int, K: Optional[int], width: int = 64, feature_dim: int = 64,
                    y_dim: int = 1, seed: Optional[int] = None, activation: str = "silu") -> nn.Module:
    """Statistics network for flat inputs. ``K=None`` means continuous ``y`` (concat only)."""
    if arch == "projection-T":
        if not K:
            raise ValueError("projection-T needs discrete labels")
        T = ProjectionStatisticsNet(feature_net("mog-mlp", (x_dim,), feature_dim, width, activation), K, feature_dim)
    elif arch == "concat-T":
        T = ConcatStatisticsNet(x_dim, K, width, y_dim, activation)
    else:
        raise ValueError(f"unknown statistics preset {arch!r}")
    init_weights(T, torch.Generator().manual_seed(seed) if seed is not None else None)
    return T


def estimate_mi_standalone(sampler: Sampler, T_arch: str = "projection-T", steps: int = 2000,
                           batch: int = 512, *, K: Optional[int] = None, x_dim: int = 1,
                           lr: float = 1e-3, ema_rate: float = 0.01, strategy: str = "permute",
                           label_spec: Optional[LabelSpec] = None, width: int = 64,
                           seed: int = 0, trace: Optional[list] = None,
                           divergence_limit: float = 50.0) -> float:
    """Train a fresh statistics network on ``sampler`` and return the DV estimate.

    The estimate is the median of the last 10% of per-step batch estimates.
    ``sampler(n, generator)`` returns ``(x, y)``; ``x`` has shape ``(n, x_dim)``,
    ``y`` is a class index vector (``K`` given) or a real vector. Per-step
    ``(step, estimate)`` pairs are appended to ``trace`` when given.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if strategy == "prior" and label_spec is None:
        raise ValueError("strategy 'prior' needs a label_spec")
    gen = torch.Generator().manual_seed(seed)
    T = build_statistic(T_arch, x_dim, K, width=width, seed=seed)
    opt = torch.optim.Adam(T.parameters(), lr=lr, betas=(0.5, 0.999))
    ema = EMADenominator(ema_rate)
    values = []
    for step in range(1, steps + 1):
        x, y = sampler(batch, gen)
        if strategy == "prior":
            y_bar = resample_marginal_labels(y, label_spec, "prior", gen)
        else:
            y_bar = y[torch.randperm(len(y), generator=gen)]
        est, surrogate = mine_step(T, x, y, y_bar, ema)
        if not math.isfinite(est.value) or est.value > divergence_limit:
            raise MIEstimateError(f"estimator diverged at step {step}: estimate={est.value:.4g} nats")
        opt.zero_grad(set_to_none=True)
        surrogate.backward()
        opt.step()
        values.append(est.value)
        if trace is not None:
            trace.append((step, est.value))
    tail = values[-max(1, steps // 10):]
    return float(np.median(tail))


# --------------------------------------------------------------------------- samplers


def gaussian_pair_sampler(rho: float) -> Sampler:
    """Standard bivariate normal with correlation ``rho``; y continuous."""
    s = math.sqrt(1 - rho * rho)

    def sample(n, gen):
        a = torch.randn(n, 1, generator=gen)
        b = rho * a + s * torch.randn(n, 1, generator=gen)
        return a, b.squeeze(1)
    return sample


def independent_sampler(K: int = 3) -> Sampler:
    def sample(n, gen):
        return torch.randn(n, 1, generator=gen), torch.randint(0, K, (n,), generator=gen)
    return sample


def class_gaussian_sampler(means, stds, prior=None) -> Sampler:
    """y ~ prior (uniform by default), x | y ~ Normal(means[y], stds[y])."""
    means = torch.tensor(means, dtype=torch.float32)
    stds = torch.tensor(stds, dtype=torch.float32)
    probs = torch.tensor(prior if prior is not None else [1.0] * len(means), dtype=torch.float64)

    def sample(n, gen):
        y = torch.multinomial(probs, n, replacement=True, generator=gen)
        x = means[y] + stds[y] * torch.randn(n, generator=gen)
        return x.unsqueeze(1), y
    return sample


def sign_bucket_sampler(rho: float) -> Sampler:
    """Correlated Gaussian pair with the second coordinate reduced to its sign (y in {0, 1})."""
    pair = gaussian_pair_sampler(rho)

    def sample(n, gen):
        x, b = pair(n, gen)
        return x, (b > 0).long()
    return sample
