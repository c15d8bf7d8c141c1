"""Network presets: generator, discriminator, classifiers, statistics networks.

Every network follows a fixed output contract:

* ``G(z, y)``  -> data tensor, shape ``(B, *data_shape)``
* ``D(x)``     -> probability in (0, 1), shape ``(B,)``
* ``C(x)``     -> class probabilities, shape ``(B, K)``
* ``T(x, y)``  -> real scalar, shape ``(B,)``
* ``D_Y(y)``   -> logit, shape ``(B,)``
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

BACKBONES = ("mog-mlp", "mnist-conv", "cifar10-conv")
STATISTICS = ("concat-T", "projection-T")
PRESETS = BACKBONES + STATISTICS

ACTIVATIONS = {
    "leaky_relu": lambda: nn.LeakyReLU(0.2),
    "silu": nn.SiLU,
}

_BACKBONE_SHAPES = {
    "mog-mlp": (1,),
    "mnist-conv": (1, 28, 28),
    "cifar10-conv": (3, 32, 32),
}


@dataclass(frozen=True)
class LatentSpec:
    dim: int
    prior: str = "standard normal"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"latent dim must be >= 1, got {self.dim}")
        if self.prior != "standard normal":
            raise ValueError(f"unsupported latent prior {self.prior!r}")

    def sample(self, n: int, generator: Optional[torch.Generator] = None, dtype=torch.float32) -> Tensor:
        return torch.randn(n, self.dim, generator=generator, dtype=dtype)


@dataclass(frozen=True)
class LabelSpec:
    num_classes: int
    prior: tuple = ()

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if not self.prior:
            object.__setattr__(self, "prior", tuple([1.0 / self.num_classes] * self.num_classes))
        p = np.asarray(self.prior, dtype=np.float64)
        if p.shape != (self.num_classes,):
            raise ValueError(f"prior has length {p.size}, expected {self.num_classes}")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"prior must be a probability vector, got {self.prior}")
        object.__setattr__(self, "prior", tuple(float(v) for v in p))

    @property
    def K(self) -> int:
        return self.num_classes

    def sample(self, n: int, generator: Optional[torch.Generator] = None) -> Tensor:
        probs = torch.tensor(self.prior, dtype=torch.float64)
        return torch.multinomial(probs, n, replacement=True, generator=generator)


@dataclass
class ArchConfig:
    """Which presets to build. ``backbone=None`` infers it from the data shape."""

    backbone: Optional[str] = None
    statistic: str = "projection-T"
    feature_dim: Optional[int] = None
    width: int = 64
    use_label_discriminator: bool = False
    activation: str = "silu"      # MLP presets only; conv presets use the DCGAN activations

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; known: {', '.join(ACTIVATIONS)}")

    @classmethod
    def coerce(cls, arch) -> "ArchConfig":
        if isinstance(arch, ArchConfig):
            return arch
        if isinstance(arch, dict):
            return cls(**arch)
        if isinstance(arch, str):
            if arch in BACKBONES:
                return cls(backbone=arch)
            if arch in STATISTICS:
                return cls(statistic=arch)
        raise ValueError(f"unknown architecture preset {arch!r}; known: {', '.join(PRESETS)}")


def init_weights(module: nn.Module, generator: Optional[torch.Generator] = None) -> None:
    """N(0, 0.02) weights for linear/conv/embedding layers, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d, nn.Embedding)):
            nn.init.normal_(m.weight, 0.0, 0.02, generator=generator)
            if getattr(m, "bias", None) is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, 0.02, generator=generator)
            nn.init.zeros_(m.bias)


def mlp(n_in: int, width: int, n_out: int, depth: int = 2, activation: str = "silu") -> nn.Sequential:
    layers: list[nn.Module] = []
    d = n_in
    for _ in range(depth):
        layers += [nn.Linear(d, width), ACTIVATIONS[activation]()]
        d = width
    layers.append(nn.Linear(d, n_out))
    return nn.Sequential(*layers)


def one_hot(y: Tensor, K: int, dtype=torch.float32) -> Tensor:
    return F.one_hot(y.long(), K).to(dtype)


def check_labels(y: Tensor, K: int) -> None:
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= K):
        raise IndexError(f"class index out of range 0..{K - 1}: min={int(y.min())}, max={int(y.max())}")


# --------------------------------------------------------------------------- generators


class MLPGenerator(nn.Module):
    def __init__(self, latent_dim: int, K: int, width: int = 64, out_dim: int = 1, activation: str = "silu"):
        super().__init__()
        self.K = K
        self.net = mlp(latent_dim + K, width, out_dim, activation=activation)

    def forward(self, z: Tensor, y: Tensor) -> Tensor:
        return self.net(torch.cat([z, one_hot(y, self.K, z.dtype)], dim=1))


class ConvGenerator(nn.Module):
    """DCGAN-style generator; label enters as a one-hot vector concatenated to z."""

    def __init__(self, latent_dim: int, K: int, out_shape: Sequence[int]):
        super().__init__()
        self.K = K
        c, h, _ = out_shape
        if h == 28:
            self.base, chans = 7, (128, 64)
        elif h == 32:
            self.base, chans = 4, (256, 128, 64)
        else:
            raise ValueError(f"unsupported image size {h}")
        self.c0 = chans[0]
        self.fc = nn.Linear(latent_dim + K, chans[0] * self.base * self.base)
        self.bn0 = nn.BatchNorm2d(chans[0])
        ups: list[nn.Module] = []
        for a, b in zip(chans[:-1], chans[1:]):
            ups += [nn.ConvTranspose2d(a, b, 4, 2, 1), nn.BatchNorm2d(b), nn.ReLU(True)]
        ups += [nn.ConvTranspose2d(chans[-1], c, 4, 2, 1), nn.Tanh()]
        self.ups = nn.Sequential(*ups)

    def forward(self, z: Tensor, y: Tensor) -> Tensor:
        h = self.fc(torch.cat([z, one_hot(y, self.K, z.dtype)], dim=1))
        h = F.relu(self.bn0(h.view(-1, self.c0, self.base, self.base)))
        return self.ups(h)


# --------------------------------------------------------------------------- feature extractors


class ConvFeatures(nn.Module):
    """Strided conv stack mapping an image to a flat feature vector."""

    def __init__(self, in_shape: Sequence[int], out_dim: int):
        super().__init__()
        c, h, _ = in_shape
        self.convs = nn.Sequential(
            nn.Conv2d(c, 64, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(64, 128, 4, 2, 1), nn.LeakyReLU(0.2),
        )
        side = h // 4
        self.fc = nn.Linear(128 * side * side, out_dim)

    def forward(self, x: Tensor) -> Tensor:
        return F.leaky_relu(self.fc(self.convs(x).flatten(1)), 0.2)


def feature_net(backbone: str, data_shape, out_dim: int, width: int, activation: str = "silu") -> nn.Module:
    if backbone == "mog-mlp":
        return nn.Sequential(mlp(int(np.prod(data_shape)), width, out_dim, depth=1, activation=activation),
                             ACTIVATIONS[activation]())
    return ConvFeatures(data_shape, out_dim)


class Discriminator(nn.Module):
    def __init__(self, features: nn.Module, feat_dim: int):
        super().__init__()
        self.features = features
        self.head = nn.Linear(feat_dim, 1)

    def logits(self, x: Tensor) -> Tensor:
        return self.head(self.features(_flat_if_mlp(self.features, x))).squeeze(1)

    def forward(self, x: Tensor) -> Tensor:
        return torch.sigmoid(self.logits(x))


class Classifier(nn.Module):
    def __init__(self, features: nn.Module, feat_dim: int, K: int):
        super().__init__()
        self.features = features
        self.head = nn.Linear(feat_dim, K)

    def logits(self, x: Tensor) -> Tensor:
        return self.head(self.features(_flat_if_mlp(self.features, x)))

    def forward(self, x: Tensor) -> Tensor:
        return torch.softmax(self.logits(x), dim=1)


def _flat_if_mlp(features: nn.Module, x: Tensor) -> Tensor:
    return x.flatten(1) if isinstance(features, nn.Sequential) else x


# --------------------------------------------------------------------------- statistics networks


class LabelDiscriminatorNet(nn.Module):
    """Logit of a discriminator telling labels drawn from Q_Y apart from uniform labels."""

    def __init__(self, K: int):
        super().__init__()
        self.K = K
        self.logit = nn.Embedding(K, 1)

    def forward(self, y: Tensor) -> Tensor:
        check_labels(y, self.K)
        return self.logit(y.long()).squeeze(1)


class ProjectionStatisticsNet(nn.Module):
    """T(x, y) = v_y . phi(x) + psi(phi(x)) + c_y.

    With a label discriminator attached, T(x, y) additionally gets
    ``- D_Y(y) + log K``. The label discriminator is trained by its own
    objective, so its logit enters T detached.
    """

    def __init__(self, phi: nn.Module, K: int, feature_dim: int,
                 label_discriminator: Optional[LabelDiscriminatorNet] = None):
        super().__init__()
        self.K = K
        self.phi = phi
        self.embed = nn.Embedding(K, feature_dim)
        self.psi = nn.Linear(feature_dim, 1)
        self.c = nn.Parameter(torch.zeros(K))
        self.label_discriminator = label_discriminator

    @property
    def use_label_discriminator(self) -> bool:
        return self.label_discriminator is not None

    def features(self, x: Tensor) -> Tensor:
        return self.phi(_flat_if_mlp(self.phi, x))

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        check_labels(y, self.K)
        y = y.long()
        h = self.features(x)
        out = (self.embed(y) * h).sum(1) + self.psi(h).squeeze(1) + self.c[y]
        if self.label_discriminator is not None:
            out = out - self.label_discriminator(y).detach() + math.log(self.K)
        return out


class ConcatStatisticsNet(nn.Module):
    """Input-concat baseline: T(x, y) = MLP([x, onehot(y)]).

    ``K=None`` treats ``y`` as a continuous vector (used for the Gaussian
    validation targets of the standalone estimator).
    """

    def __init__(self, x_dim: int, K: Optional[int], width: int = 64, y_dim: int = 1, activation: str = "silu"):
        super().__init__()
        self.K = K
        self.net = mlp(x_dim + (K if K else y_dim), width, 1, activation=activation)

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        x = x.flatten(1)
        if self.K:
            check_labels(y, self.K)
            yin = one_hot(y, self.K, x.dtype)
        else:
            yin = y.reshape(len(y), -1).to(x.dtype)
        return self.net(torch.cat([x, yin], dim=1)).squeeze(1)


# --------------------------------------------------------------------------- bundle


@dataclass
class NetworkBundle:
    G: nn.Module
    D: Discriminator
    C: Classifier
    C_mi: Classifier
    T: nn.Module
    D_Y: Optional[LabelDiscriminatorNet] = None
    arch: ArchConfig = field(default_factory=ArchConfig)
    data_shape: tuple = (1,)
    label_spec: LabelSpec = field(default_factory=lambda: LabelSpec(2))
    latent_spec: LatentSpec = field(default_factory=lambda: LatentSpec(2))

    def networks(self) -> dict[str, nn.Module]:
        nets = {"G": self.G, "D": self.D, "C": self.C, "C_mi": self.C_mi, "T": self.T}
        if self.D_Y is not None:
            nets["D_Y"] = self.D_Y
        return nets

    def trainable(self, name: str) -> list[nn.Parameter]:
        """Parameters updated by network ``name``'s optimizer (T excludes its attached D_Y)."""
        net = self.networks()[name]
        if name == "T" and getattr(net, "label_discriminator", None) is not None:
            return [p for n, p in net.named_parameters() if not n.startswith("label_discriminator.")]
        return list(net.parameters())

    def state_dict(self) -> dict[str, Tensor]:
        out = {}
        for name, net in self.networks().items():
            for k, v in net.state_dict().items():
                if name == "T" and k.startswith("label_discriminator."):
                    continue
                out[f"{name}.{k}"] = v
        return out

    def load_state_dict(self, state: dict[str, Tensor]) -> None:
        for name, net in self.networks().items():
            prefix = name + "."
            sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            if name == "T" and self.D_Y is not None:
                sub.update({"label_discriminator." + k: v for k, v in self.D_Y.state_dict().items()})
            net.load_state_dict(sub)

    def to(self, dtype) -> "NetworkBundle":
        for net in self.networks().values():
            net.to(dtype)
        return self


def build_networks(arch, data_shape: Sequence[int], label_spec: LabelSpec, latent_spec: LatentSpec,
                   seed: Optional[int] = None) -> NetworkBundle:
    """Build every network for a preset with freshly initialized parameters.

    ``arch`` is a preset name (a backbone such as ``"mog-mlp"`` or a
    statistics-network preset such as ``"projection-T"``), a dict, or an
    :class:`ArchConfig`.
    """
    cfg = ArchConfig.coerce(arch)
    data_shape = tuple(int(s) for s in data_shape)
    backbone = cfg.backbone
    if backbone is None:
        backbone = next((b for b, s in _BACKBONE_SHAPES.items() if s == data_shape), None)
        if backbone is None:
            raise ValueError(f"no backbone preset for data shape {data_shape}")
    if backbone not in BACKBONES:
        raise ValueError(f"unknown backbone preset {backbone!r}")
    if cfg.statistic not in STATISTICS:
        raise ValueError(f"unknown statistics preset {cfg.statistic!r}")
    if _BACKBONE_SHAPES[backbone] != data_shape:
        raise ValueError(f"preset {backbone!r} expects data shape {_BACKBONE_SHAPES[backbone]}, got {data_shape}")

    K = label_spec.num_classes
    is_mlp = backbone == "mog-mlp"
    width = cfg.width
    act = cfg.activation
    fdim = cfg.feature_dim or (64 if is_mlp else 128)
    if is_mlp:
        G = MLPGenerator(latent_spec.dim, K, width, out_dim=int(np.prod(data_shape)), activation=act)
    else:
        G = ConvGenerator(latent_spec.dim, K, data_shape)
    D = Discriminator(feature_net(backbone, data_shape, width, width, act), width)
    C = Classifier(feature_net(backbone, data_shape, width, width, act), width, K)
    C_mi = Classifier(feature_net(backbone, data_shape, width, width, act), width, K)
    D_Y = LabelDiscriminatorNet(K) if cfg.use_label_discriminator else None
    if cfg.statistic == "projection-T":
        T = ProjectionStatisticsNet(feature_net(backbone, data_shape, fdim, width, act), K, fdim, D_Y)
    else:
        T = ConcatStatisticsNet(int(np.prod(data_shape)), K, width, activation=act)

    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    for net in (G, D, C, C_mi, T) + ((D_Y,) if D_Y is not None else ()):
        init_weights(net, gen)
    return NetworkBundle(G, D, C, C_mi, T, D_Y, cfg, data_shape, label_spec, latent_spec)


def statistic_forward(T: nn.Module, x: Tensor, y: Tensor) -> Tensor:
    """Evaluate a statistics network; raises ``IndexError`` for labels outside 0..K-1."""
    y = torch.as_tensor(y)
    if y.dim() == 0:
        y = y.reshape(1)
    K = getattr(T, "K", None)
    if K:
        check_labels(y, K)
    return T(x, y)


def optimal_label_logit(q_y, K: int) -> np.ndarray:
    """Logit of the optimal label discriminator, ``log q_y + log K``.

    Classes with zero mass map to ``-inf``.
    """
    q = np.asarray(q_y, dtype=np.float64)
    if q.shape != (K,) or (q < 0).any() or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError(f"q_y must be a probability vector of length {K}")
    with np.errstate(divide="ignore"):
        return np.log(q) + np.log(K)
