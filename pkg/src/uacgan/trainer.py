"""Alternating min-max training for the AC-GAN family.

One iteration updates, in order: D, C, the objective's extra critic
(C_mi for ``tac``; T and optionally D_Y for ``uac``), then G with every
critic frozen. Each update computes gradients only for the network being
updated, so other parameters stay bitwise unchanged.

Randomness: the master seed is expanded with ``numpy.random.SeedSequence``
into one ``torch.Generator`` per consumer, in the fixed order of
:data:`RNG_STREAMS`. A consumer never draws from another's stream, so
e.g. the MINE label resampling does not perturb the latent draws.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np
import torch
from torch import Tensor

from . import checkpoint
from . import objectives as obj
from .mine import EMADenominator, MIEstimate, dv_bound, mine_step, resample_marginal_labels
from .models import ArchConfig, LabelSpec, LatentSpec, NetworkBundle, build_networks

log = logging.getLogger(__name__)

RNG_STREAMS = ("init", "data", "latent", "labels", "marginal", "eval")
NETS = ("G", "D", "C", "C_mi", "T", "D_Y")


@dataclass
class TrainConfig:
    kind: str = "uac"
    steps: int = 1000
    batch_size: int = 64
    lr_G: float = 2e-4
    lr_D: float = 2e-4
    lr_C: float = 2e-4
    lr_Cmi: float = 2e-4
    lr_T: float = 2e-4
    lr_DY: float = 2e-4
    betas: tuple = (0.5, 0.999)
    lambda_mi: float = 1.0
    mi_decay: float = 0.0          # ablation only: weight lambda_mi * exp(-mi_decay * step)
    n_critic: int = 1
    anneal_from: float = 1.0       # fraction of steps after which every lr decays linearly to 0; 1.0 = constant
    seed: int = 0
    ema_rate: float = 0.01
    marginal_strategy: str = "prior"
    classifier_on_fake: bool = True
    saturating: bool = False
    checkpoint_every: int = 0
    backbone: Optional[str] = None
    statistic: str = "projection-T"
    feature_dim: Optional[int] = None
    width: int = 64
    latent_dim: int = 2
    use_label_discriminator: bool = False
    activation: str = "silu"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.kind not in obj.KINDS:
            raise ValueError(f"kind must be one of {obj.KINDS}, got {self.kind!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        for name in ("lr_G", "lr_D", "lr_C", "lr_Cmi", "lr_T", "lr_DY"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.lambda_mi < 0:
            raise ValueError("lambda_mi must be >= 0")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if not 0.0 <= self.anneal_from <= 1.0:
            raise ValueError("anneal_from must be in [0, 1]")

    def lr(self, net: str) -> float:
        return getattr(self, "lr_" + net.replace("_", ""))

    def lr_factor(self, step: int) -> float:
        """Multiplier for every learning rate at 0-based ``step``."""
        start = self.anneal_from * self.steps
        if step < start:
            return 1.0
        return max(0.0, (self.steps - step) / (self.steps - start))

    def arch(self) -> ArchConfig:
        return ArchConfig(self.backbone, self.statistic, self.feature_dim, self.width, self.use_label_discriminator,
                          self.activation)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


class Dataset(Protocol):
    label_spec: LabelSpec
    data_shape: tuple

    def sample(self, n: int, generator: torch.Generator) -> tuple[Tensor, Tensor]: ...


class ArrayDataset:
    """In-memory labeled data; batches are drawn uniformly with replacement."""

    def __init__(self, x: Tensor, y: Tensor, label_spec: Optional[LabelSpec] = None):
        if len(x) == 0 or len(x) != len(y):
            raise ValueError("dataset must be nonempty with one label per sample")
        self.x, self.y = x, y.long()
        K = int(self.y.max()) + 1
        self.label_spec = label_spec or LabelSpec(max(K, 2))
        if int(self.y.min()) < 0 or int(self.y.max()) >= self.label_spec.num_classes:
            raise ValueError(f"labels outside 0..{self.label_spec.num_classes - 1}")
        self.data_shape = tuple(x.shape[1:])

    def __len__(self) -> int:
        return len(self.x)

    def sample(self, n, generator):
        idx = torch.randint(0, len(self.x), (n,), generator=generator)
        return self.x[idx], self.y[idx]


class SamplerDataset:
    """Infinite data from ``fn(n, generator) -> (x, y)``."""

    def __init__(self, fn: Callable, label_spec: LabelSpec, data_shape=(1,)):
        self.fn, self.label_spec, self.data_shape = fn, label_spec, tuple(data_shape)

    def sample(self, n, generator):
        return self.fn(n, generator)


@dataclass
class TrainState:
    config: TrainConfig
    bundle: NetworkBundle
    optimizers: dict
    rngs: dict
    ema: EMADenominator
    step: int = 0
    totals: dict = field(default_factory=dict)   # running sums of LossReport fields
    last_mi: Optional[MIEstimate] = None

    def running_means(self) -> dict:
        n = max(self.step, 1)
        return {k: v / n for k, v in self.totals.items()}


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, last_report: Optional[obj.LossReport], msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step, self.last_report = step, last_report


def spawn_generators(seed: int) -> dict[str, torch.Generator]:
    states = np.random.SeedSequence(seed).generate_state(len(RNG_STREAMS), dtype=np.uint64)
    return {name: torch.Generator().manual_seed(int(s) & (2**63 - 1)) for name, s in zip(RNG_STREAMS, states)}


def init_state(config: TrainConfig, data_shape, label_spec: LabelSpec) -> TrainState:
    rngs = spawn_generators(config.seed)
    init_seed = int(torch.randint(0, 2**62, (1,), generator=rngs["init"]))
    bundle = build_networks(config.arch(), data_shape, label_spec, LatentSpec(config.latent_dim), seed=init_seed)
    optimizers = {}
    for name in NETS:
        if name in bundle.networks():
            optimizers[name] = torch.optim.Adam(bundle.trainable(name), lr=config.lr(name), betas=config.betas)
    return TrainState(config, bundle, optimizers, rngs, EMADenominator(config.ema_rate))


def _update(opt: torch.optim.Optimizer, loss: Tensor) -> None:
    params = [p for g in opt.param_groups for p in g["params"]]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g
    opt.step()


def _mi_weight(cfg: TrainConfig, step: int) -> float:
    if cfg.mi_decay:
        return cfg.lambda_mi * math.exp(-cfg.mi_decay * step)
    return cfg.lambda_mi


def _check(value: Tensor, what: str, state: TrainState, last) -> None:
    if not torch.isfinite(value).all():
        raise TrainingAborted(state.step + 1, last, f"non-finite {what}")


def train_step(state: TrainState, real_batch: tuple[Tensor, Tensor],
               last_report: Optional[obj.LossReport] = None) -> tuple[TrainState, obj.LossReport]:
    cfg, b, opts, rng = state.config, state.bundle, state.optimizers, state.rngs
    x_real, y_real = real_batch
    n = len(x_real)
    if n != cfg.batch_size:
        raise ValueError(f"real batch has {n} samples, config says {cfg.batch_size}")
    K = b.label_spec.num_classes
    dtype = x_real.dtype
    if cfg.anneal_from < 1.0:
        f = cfg.lr_factor(state.step)
        for name, opt in opts.items():
            for g in opt.param_groups:
                g["lr"] = cfg.lr(name) * f

    z = b.latent_spec.sample(n, rng["latent"], dtype)
    y = b.label_spec.sample(n, rng["labels"])
    with torch.no_grad():
        x_fake = b.G(z, y)

    # D ascends term_a
    for i in range(cfg.n_critic):
        if i:
            z_extra = b.latent_spec.sample(n, rng["latent"], dtype)
            with torch.no_grad():
                x_d = b.G(z_extra, b.label_spec.sample(n, rng["labels"]))
        else:
            x_d = x_fake
        term_a = obj.gan_value(b.D(x_real), b.D(x_d))
        _check(term_a, "term_a", state, last_report)
        _update(opts["D"], obj.discriminator_loss(term_a))

    # C descends term_b (+ term_c)
    term_b = obj.cross_entropy_term(b.C(x_real), y_real)
    term_c = obj.cross_entropy_term(b.C(x_fake), y)
    loss_C = obj.classifier_loss(term_b, term_c, cfg.classifier_on_fake)
    _check(loss_C, "classifier loss", state, last_report)
    _update(opts["C"], loss_C)

    terms = {"term_a": term_a, "term_b": term_b, "term_c": term_c}
    y_bar = None
    loss_DY = None
    if cfg.kind == "tac":
        term_d = obj.tac_value(b.C_mi(x_fake), y)
        _check(term_d, "term_d", state, last_report)
        _update(opts["C_mi"], obj.twin_classifier_loss(term_d))
        terms["term_d"] = term_d
    elif cfg.kind == "uac":
        y_bar = resample_marginal_labels(y, b.label_spec, cfg.marginal_strategy, rng["marginal"])
        est, surrogate = mine_step(b.T, x_fake, y, y_bar, state.ema)
        if not math.isfinite(est.value):
            raise TrainingAborted(state.step + 1, last_report, "non-finite MINE estimate")
        _update(opts["T"], surrogate)
        state.last_mi = est
        terms["v_mine"] = est.value
        if b.D_Y is not None:
            y_unif = torch.randint(0, K, (n,), generator=rng["marginal"])
            p_q = torch.sigmoid(b.D_Y(y))
            p_u = torch.sigmoid(b.D_Y(y_unif))
            loss_DY = -obj.gan_value(p_q, p_u)
            _update(opts["D_Y"], loss_DY)

    # G descends its composed loss with all critics frozen
    x_g = b.G(z, y)
    g_gan = obj.generator_gan_loss(b.D(x_g), cfg.saturating)
    term_c_g = obj.cross_entropy_term(b.C(x_g), y)
    term_d_g = v_g = None
    if cfg.kind == "tac":
        term_d_g = obj.tac_value(b.C_mi(x_g), y)
    elif cfg.kind == "uac":
        v_g = dv_bound(b.T(x_g, y), b.T(x_g, y_bar))
    loss_G = obj.generator_loss(cfg.kind, g_gan, term_c_g, term_d_g, v_g, _mi_weight(cfg, state.step))
    _check(loss_G, "generator loss", state, last_report)
    _update(opts["G"], loss_G)

    terms["g_gan"] = g_gan
    report = obj.compose(cfg.kind, terms, cfg.lambda_mi, classifier_on_fake=cfg.classifier_on_fake,
                         loss_DY=loss_DY)
    report = dataclasses.replace(report, loss_G=float(loss_G.detach()))
    if not report.is_finite():
        raise TrainingAborted(state.step + 1, last_report, "non-finite loss report")
    state.step += 1
    for k, v in report.row().items():
        if v is not None:
            state.totals[k] = state.totals.get(k, 0.0) + v
    return state, report


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(state: TrainState, path) -> None:
    tensors = {"net." + k: v for k, v in state.bundle.state_dict().items()}
    for name, opt in state.optimizers.items():
        for idx, st in opt.state_dict()["state"].items():
            for key, v in st.items():
                tensors[f"opt.{name}.{idx}.{key}"] = torch.as_tensor(v)
    for name, g in state.rngs.items():
        tensors["rng." + name] = g.get_state()
    cfg = state.config.to_dict()
    meta = {
        "step": state.step,
        "config": cfg,
        "config_hash": checkpoint.config_hash(cfg),
        "ema_log_value": state.ema.log_value,
        "totals": state.totals,
        "label_prior": list(state.bundle.label_spec.prior),
        "data_shape": list(state.bundle.data_shape),
    }
    checkpoint.save(path, tensors, meta)


def load_checkpoint(path, config: Optional[TrainConfig] = None) -> TrainState:
    tensors, meta = checkpoint.load(path)
    stored = TrainConfig(**meta["config"])
    if config is not None and checkpoint.config_hash(config.to_dict()) != meta["config_hash"]:
        diff = {k for k, v in config.to_dict().items() if meta["config"].get(k) != v} - {"steps", "checkpoint_every"}
        if diff:
            raise checkpoint.CheckpointError(f"checkpoint config differs in: {', '.join(sorted(diff))}")
    cfg = config or stored
    state = init_state(cfg, tuple(meta["data_shape"]), LabelSpec(len(meta["label_prior"]), tuple(meta["label_prior"])))
    state.bundle.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("net.")})
    for name, opt in state.optimizers.items():
        per_param: dict = {}
        prefix = f"opt.{name}."
        for k, v in tensors.items():
            if k.startswith(prefix):
                idx, key = k[len(prefix):].split(".", 1)
                per_param.setdefault(int(idx), {})[key] = v
        sd = opt.state_dict()
        sd["state"] = per_param
        opt.load_state_dict(sd)
    for name, g in state.rngs.items():
        g.set_state(tensors["rng." + name])
    state.ema.log_value = meta["ema_log_value"]
    state.step = meta["step"]
    state.totals = dict(meta["totals"])
    return state


# --------------------------------------------------------------------------- fit

METRIC_FIELDS = ("step",) + obj.LossReport.FIELDS + ("mi_joint_mean", "mi_log_mean_exp", "mi_ema_denominator")


def report_row(step: int, report: obj.LossReport, mi: Optional[MIEstimate]) -> dict:
    row = {"step": step, **report.row()}
    if mi is not None:
        row.update(mi_joint_mean=mi.joint_mean, mi_log_mean_exp=mi.log_mean_exp_marginal,
                   mi_ema_denominator=mi.ema_denominator)
    return row


def fit(config: TrainConfig, data: Dataset, out_dir=None, resume=None,
        on_step: Optional[Callable[[TrainState, obj.LossReport], None]] = None) -> tuple[TrainState, list[dict]]:
    """Run ``config.steps`` iterations; returns the final state and per-step metric rows.

    With ``out_dir``, metrics go to ``metrics.csv`` and checkpoints to
    ``checkpoints/step_XXXXXXX.ckpt`` every ``checkpoint_every`` steps.
    ``resume`` is a checkpoint path; training continues from its step.
    """
    state = load_checkpoint(resume, config) if resume else init_state(config, data.data_shape, data.label_spec)
    if state.bundle.label_spec.num_classes != data.label_spec.num_classes:
        raise ValueError("dataset label spec does not match the model's")
    if tuple(state.bundle.data_shape) != tuple(data.data_shape):
        raise ValueError(f"dataset shape {tuple(data.data_shape)} does not match the model's {state.bundle.data_shape}")
    rows: list[dict] = []
    writer = fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        kept = []
        if resume and (out / "metrics.csv").exists():
            # drop rows past the checkpoint so a resumed run rewrites them
            with open(out / "metrics.csv", newline="") as f:
                kept = [r for r in csv.DictReader(f) if int(r["step"]) <= state.step]
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        writer.writerows(kept)
    report = None
    try:
        while state.step < config.steps:
            batch = data.sample(config.batch_size, state.rngs["data"])
            state, report = train_step(state, batch, report)
            row = report_row(state.step, report, state.last_mi if config.kind == "uac" else None)
            rows.append(row)
            if writer:
                writer.writerow(row)
            if on_step:
                on_step(state, report)
            if out_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(state, Path(out_dir) / "checkpoints" / f"step_{state.step:07d}.ckpt")
    finally:
        if fh:
            fh.close()
    return state, rows


@torch.no_grad()
def generate(bundle: NetworkBundle, y: Tensor, generator: torch.Generator, batch: int = 4096) -> Tensor:
    """Samples ``G(z, y)`` with fresh ``z``; batch norm runs on its running statistics."""
    was_training = bundle.G.training
    bundle.G.eval()
    try:
        z = bundle.latent_spec.sample(len(y), generator)
        return torch.cat([bundle.G(z[i:i + batch], y[i:i + batch]) for i in range(0, len(y), batch)])
    finally:
        bundle.G.train(was_training)
