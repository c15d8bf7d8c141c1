"""Image experiments: MNIST/CIFAR10 loading, Inception Score, FID and single-class sample grids."""
from __future__ import annotations

import gzip
import hashlib
import json
import logging
import os
import pickle
import tarfile
import urllib.request
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor, nn

from . import checkpoint
from .models import LabelSpec
from .trainer import generate

log = logging.getLogger(__name__)

CACHE_ENV = "UACGAN_DATA_DIR"
ASSETS = Path(__file__).parent / "assets"
MNIST_EXTRACTOR = ASSETS / "mnist_classifier_v2.ckpt"

MNIST_FILES = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}
MNIST_MIRRORS = ("https://ossci-datasets.s3.amazonaws.com/mnist/", "http://yann.lecun.com/exdb/mnist/")
CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz"
CIFAR_MD5 = "c58f30108f718f92721af3b95e74349a"
SPLIT_SIZES = {("mnist", "train"): 60000, ("mnist", "test"): 10000,
               ("cifar10", "train"): 50000, ("cifar10", "test"): 10000, ("mnist-5k", "train"): 5000}
SHAPES = {"mnist": (1, 28, 28), "mnist-5k": (1, 28, 28), "cifar10": (3, 32, 32)}


class DataUnavailable(RuntimeError):
    pass


def cache_dir(override=None) -> Path:
    return Path(override or os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "uacgan")


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fetch(urls, dest: Path, md5: str) -> None:
    if dest.exists() and _md5(dest) == md5:
        return
    dest.parent.mkdir(parents=True, exist_ok=True)
    errors = []
    for url in urls:
        try:
            log.info("downloading %s", url)
            urllib.request.urlretrieve(url, dest)
        except OSError as e:
            errors.append(f"{url}: {e}")
            continue
        if _md5(dest) == md5:
            return
        errors.append(f"{url}: checksum mismatch")
        dest.unlink()
    raise DataUnavailable(f"could not fetch {dest.name} ({'; '.join(errors)}); "
                          f"place the file (md5 {md5}) in {dest.parent} or set ${CACHE_ENV}")


@dataclass
class ImageDataset:
    name: str
    images: Tensor        # (N, C, H, W), float32 in [-1, 1]
    labels: Tensor        # (N,), int64 in 0..9
    split: str = "train"

    def __post_init__(self):
        shape = SHAPES[self.name]
        if tuple(self.images.shape[1:]) != shape:
            raise ValueError(f"{self.name} images must be {shape}, got {tuple(self.images.shape[1:])}")
        expected = SPLIT_SIZES.get((self.name, self.split))
        if expected is not None and len(self.labels) != expected:
            raise ValueError(f"{self.name}/{self.split} should have {expected} samples, got {len(self.labels)}")

    @property
    def label_spec(self) -> LabelSpec:
        return LabelSpec(10)

    @property
    def data_shape(self) -> tuple:
        return SHAPES[self.name]

    def __len__(self):
        return len(self.labels)

    def sample(self, n, generator):
        idx = torch.randint(0, len(self.labels), (n,), generator=generator)
        return self.images[idx], self.labels[idx]


def _to_unit_range(u8: np.ndarray) -> Tensor:
    return torch.from_numpy(u8.astype(np.float32) / 127.5 - 1.0)


def _read_idx(path: Path) -> np.ndarray:
    with gzip.open(path, "rb") as f:
        data = f.read()
    ndim = data[3]
    dims = np.frombuffer(data, dtype=">i4", count=ndim, offset=4)
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def load_mnist(split: str = "train", root=None, download: bool = True) -> ImageDataset:
    root = cache_dir(root) / "mnist"
    prefix = "train" if split == "train" else "t10k"
    img_f, lab_f = root / f"{prefix}-images-idx3-ubyte.gz", root / f"{prefix}-labels-idx1-ubyte.gz"
    for f in (img_f, lab_f):
        if download:
            _fetch([m + f.name for m in MNIST_MIRRORS], f, MNIST_FILES[f.name])
        elif not f.exists():
            raise DataUnavailable(f"missing {f}")
    images = _read_idx(img_f)[:, None]
    labels = torch.from_numpy(_read_idx(lab_f).astype(np.int64))
    return ImageDataset("mnist", _to_unit_range(images), labels, split)


def load_mnist_5k() -> ImageDataset:
    """The 5000-digit MNIST subset bundled with ``mlxtend`` (500 per class); works offline."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as e:  # pragma: no cover
        raise DataUnavailable("mnist-5k needs the mlxtend package (pip install mlxtend)") from e
    X, y = mnist_data()
    images = X.reshape(-1, 1, 28, 28).astype(np.uint8)
    return ImageDataset("mnist-5k", _to_unit_range(images), torch.from_numpy(y.astype(np.int64)), "train")


def load_cifar10(split: str = "train", root=None, download: bool = True) -> ImageDataset:
    root = cache_dir(root)
    archive = root / "cifar-10-python.tar.gz"
    if download:
        _fetch([CIFAR_URL], archive, CIFAR_MD5)
    elif not archive.exists():
        raise DataUnavailable(f"missing {archive}")
    names = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    xs, ys = [], []
    with tarfile.open(archive) as tar:
        for n in names:
            d = pickle.load(tar.extractfile(f"cifar-10-batches-py/{n}"), encoding="latin1")
            xs.append(np.asarray(d["data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
            ys.append(np.asarray(d["labels"], dtype=np.int64))
    return ImageDataset("cifar10", _to_unit_range(np.concatenate(xs)), torch.from_numpy(np.concatenate(ys)), split)


def load_dataset(name: str, split: str = "train", root=None, download: bool = True) -> ImageDataset:
    if name == "mnist":
        return load_mnist(split, root, download)
    if name == "mnist-5k":
        return load_mnist_5k()
    if name == "cifar10":
        return load_cifar10(split, root, download)
    raise ValueError(f"unknown dataset {name!r}; use mnist, mnist-5k or cifar10")


# --------------------------------------------------------------------------- metrics


def inception_score(class_prob_rows, n_splits: int = 10) -> tuple[float, float]:
    """exp(E_x KL(p(y|x) || p(y))) per split, with p(y) the split's mean row; mean and std over splits."""
    p = np.asarray(class_prob_rows, dtype=np.float64)
    if n_splits < 1:
        raise ValueError("n_splits must be >= 1")
    if len(p) < n_splits:
        raise ValueError(f"{len(p)} rows cannot be divided into {n_splits} splits")
    scores = []
    for part in np.array_split(p, n_splits):
        py = part.mean(0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(part > 0, part * (np.log(part) - np.log(py)), 0.0).sum(1)
        scores.append(float(np.exp(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))


def _psd_sqrt(m: np.ndarray, what: str) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    if w.min() < -1e-3:
        log.warning("clipping negative eigenvalue %.3g in %s", w.min(), what)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The trace term uses ``tr (S1 S2)^(1/2) = tr (A S2 A)^(1/2)`` with
    ``A = S1^(1/2)``, so every square root is of a symmetric PSD matrix
    (eigendecomposition, negative eigenvalues clipped at 0).
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, dtype=np.float64)), np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    s1, s2 = np.atleast_2d(np.asarray(sigma1, dtype=np.float64)), np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    for s, name in ((s1, "sigma1"), (s2, "sigma2")):
        if s.shape != (len(mu1), len(mu1)):
            raise ValueError(f"{name} has shape {s.shape}, expected {(len(mu1), len(mu1))}")
        if np.abs(s - s.T).max() > 1e-6 * max(1.0, np.abs(s).max()):
            raise ValueError(f"{name} is not symmetric")
    s1, s2 = (s1 + s1.T) / 2, (s2 + s2.T) / 2
    a = _psd_sqrt(s1, "sigma1")
    w = np.linalg.eigvalsh(a @ s2 @ a)
    if w.min() < -1e-3:
        log.warning("clipping negative eigenvalue %.3g in covariance product", w.min())
    tr_covmean = np.sqrt(np.clip(w, 0, None)).sum()
    return float(((mu1 - mu2) ** 2).sum() + np.trace(s1) + np.trace(s2) - 2 * tr_covmean)


def gaussian_moments(features) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(features, dtype=np.float64)
    return f.mean(0), np.cov(f, rowvar=False)


# --------------------------------------------------------------------------- feature extractors


class MnistClassifier(nn.Module):
    """Small CNN; its 64-d penultimate activations serve as FID features."""

    FEATURES = 64

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 32, 3)
        self.conv2 = nn.Conv2d(32, 64, 3)
        self.fc1 = nn.Linear(64 * 5 * 5, self.FEATURES)
        self.fc2 = nn.Linear(self.FEATURES, 10)

    def features(self, x: Tensor) -> Tensor:
        h = F.max_pool2d(F.relu(self.conv1(x)), 2)
        h = F.max_pool2d(F.relu(self.conv2(h)), 2)
        return F.relu(self.fc1(h.flatten(1)))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.features(x))


class FeatureExtractor:
    """Pairs a network with its identity so every score names what produced it."""

    def __init__(self, net: nn.Module, name: str, weights_hash: str, prepare=None):
        self.net = net.eval()
        self.name, self.weights_hash = name, weights_hash
        self.prepare = prepare or (lambda x: x)

    @torch.no_grad()
    def __call__(self, images: Tensor, batch: int = 500) -> tuple[np.ndarray, np.ndarray]:
        feats, probs = [], []
        for i in range(0, len(images), batch):
            x = self.prepare(images[i:i + batch])
            f, logits = self._forward(x)
            feats.append(f.double().numpy())
            probs.append(torch.softmax(logits.double(), 1).numpy())
        return np.concatenate(feats), np.concatenate(probs)

    def _forward(self, x):
        f = self.net.features(x)
        return f, self.net.fc2(f) if hasattr(self.net, "fc2") else self.net.fc(f)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def mnist_extractor(path=MNIST_EXTRACTOR) -> FeatureExtractor:
    path = Path(path)
    if not path.exists():
        raise DataUnavailable(f"MNIST feature extractor weights missing at {path}; "
                              f"create them with: python scripts/train_mnist_classifier.py --out {path}")
    tensors, meta = checkpoint.load(path)
    net = MnistClassifier()
    net.load_state_dict(tensors)
    return FeatureExtractor(net, meta.get("name", "mnist-cnn"), file_sha256(path))


class _InceptionPool3(nn.Module):
    def __init__(self, inception):
        super().__init__()
        self.inception = inception
        self.fc = inception.fc
        inception.fc = nn.Identity()

    def features(self, x):
        return self.inception(x)


def cifar10_extractor() -> FeatureExtractor:
    """torchvision Inception-v3 (ImageNet weights) pool3 features; needs the weights in the torch hub cache."""
    import torchvision
    from torchvision.models import Inception_V3_Weights

    weights = Inception_V3_Weights.IMAGENET1K_V1
    fname = Path(torch.hub.get_dir()) / "checkpoints" / Path(weights.url).name
    if not fname.exists():
        raise DataUnavailable(
            f"Inception-v3 weights not found at {fname}. Fetch them with:\n  python -c \"import torchvision; "
            f"torchvision.models.inception_v3(weights='IMAGENET1K_V1')\"")
    net = torchvision.models.inception_v3(weights=weights, aux_logits=True, init_weights=False)
    net.aux_logits, net.AuxLogits = False, None
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

    def prepare(x):
        x = F.interpolate((x + 1) / 2, size=(299, 299), mode="bilinear", align_corners=False)
        return (x - mean) / std
    return FeatureExtractor(_InceptionPool3(net), "inception-v3-pool3/torchvision-IMAGENET1K_V1",
                            file_sha256(fname), prepare)


def extractor_for(dataset_name: str) -> FeatureExtractor:
    return cifar10_extractor() if dataset_name == "cifar10" else mnist_extractor()


# --------------------------------------------------------------------------- scoring


@dataclass
class ScoreReport:
    inception_score: float
    inception_std: float
    fid: float
    n_samples: int
    extractor: str
    weights_hash: str
    dataset: str = ""
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def real_statistics(dataset: ImageDataset, extractor: FeatureExtractor, max_samples: Optional[int] = None):
    images = dataset.images if max_samples is None else dataset.images[:max_samples]
    feats, _ = extractor(images)
    return gaussian_moments(feats)


def score_images(images: Tensor, real_moments, extractor: FeatureExtractor, n_splits: int = 10,
                 dataset_name: str = "", seed: int = 0) -> ScoreReport:
    feats, probs = extractor(images)
    is_mean, is_std = inception_score(probs, n_splits)
    mu, sigma = gaussian_moments(feats)
    fid = frechet_distance(mu, sigma, *real_moments)
    return ScoreReport(is_mean, is_std, fid, len(images), extractor.name, extractor.weights_hash, dataset_name, seed)


def score_generator(bundle, dataset: ImageDataset, n_samples: int = 10000, extractor: Optional[FeatureExtractor] = None,
                    seed: int = 0, n_splits: int = 10, real_moments=None) -> ScoreReport:
    """IS and FID of ``n_samples`` generated images with labels drawn from the label prior."""
    bundle = getattr(bundle, "bundle", bundle)
    if tuple(bundle.data_shape) != dataset.data_shape:
        raise ValueError(f"generator produces {bundle.data_shape}, dataset is {dataset.data_shape}")
    extractor = extractor or extractor_for(dataset.name)
    gen = torch.Generator().manual_seed(seed)
    y = bundle.label_spec.sample(n_samples, gen)
    images = generate(bundle, y, gen)
    real_moments = real_moments or real_statistics(dataset, extractor)
    return score_images(images, real_moments, extractor, n_splits, dataset.name, seed)


def self_fid(dataset: ImageDataset, extractor: FeatureExtractor, seed: int = 0) -> float:
    """FID between two random halves of the real set (calibration floor).

    Halves are drawn within each class so both keep the dataset's class
    proportions.
    """
    gen = torch.Generator().manual_seed(seed)
    first, second = [], []
    for k in range(dataset.label_spec.num_classes):
        idx = torch.nonzero(dataset.labels == k).flatten()
        idx = idx[torch.randperm(len(idx), generator=gen)]
        half = len(idx) // 2
        first.append(idx[:half])
        second.append(idx[half:2 * half])
    f1, _ = extractor(dataset.images[torch.cat(first)])
    f2, _ = extractor(dataset.images[torch.cat(second)])
    return frechet_distance(*gaussian_moments(f1), *gaussian_moments(f2))


# --------------------------------------------------------------------------- grids

COLLAPSE_VARIANCE = 1e-3


@dataclass
class GridResult:
    path: Path
    variance: float
    collapsed: bool


def save_grid(images: Tensor, rows: int, cols: int, path) -> None:
    x = ((images.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    n, c, h, w = x.shape
    canvas = torch.zeros(c, rows * h, cols * w, dtype=torch.uint8)
    for i in range(min(n, rows * cols)):
        r, q = divmod(i, cols)
        canvas[:, r * h:(r + 1) * h, q * w:(q + 1) * w] = x[i]
    arr = canvas.permute(1, 2, 0).numpy()
    Image.fromarray(arr[:, :, 0] if c == 1 else arr).save(path, format="PNG")


def class_grid(bundle, k: int, rows: int, cols: int, path, seed: int = 0,
               collapse_threshold: float = COLLAPSE_VARIANCE) -> GridResult:
    """PNG grid of ``G(z_i, k)`` for i.i.d. ``z_i``; flags near-zero across-sample variance."""
    bundle = getattr(bundle, "bundle", bundle)
    K = bundle.label_spec.num_classes
    if not 0 <= k < K:
        raise IndexError(f"class {k} out of range 0..{K - 1}")
    if len(bundle.data_shape) != 3:
        raise ValueError(f"class grids need an image generator; data shape is {tuple(bundle.data_shape)}")
    gen = torch.Generator().manual_seed(seed)
    images = generate(bundle, torch.full((rows * cols,), k, dtype=torch.long), gen)
    variance = float(images.double().var(0).mean())
    collapsed = variance < collapse_threshold
    if collapsed:
        log.warning("class %d samples look collapsed: mean per-pixel variance %.3g < %.3g", k, variance,
                    collapse_threshold)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_grid(images, rows, cols, path)
    return GridResult(path, variance, collapsed)
