"""Sample generation and evaluation metrics (MSE, inception score, FID, mode coverage)."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np
import torch
from scipy.special import rel_entr
from torch import nn

from aaae.errors import ConfigurationError, InputError

FID_EPS = 1e-6
DEFAULT_SAMPLES = 10_000


class FeatureExtractor(Protocol):
    name: str

    def features(self, images: torch.Tensor) -> np.ndarray: ...

    def probabilities(self, images: torch.Tensor) -> np.ndarray: ...


@dataclass
class EvalReport:
    n_samples: int
    mse: float | None = None
    icp: float | None = None
    fid: float | None = None
    mode_coverage: tuple[int, float] | None = None
    extractor: str | None = None
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None and v != []}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@torch.no_grad()
def generate_samples(model, n: int, seed: int = 0, chunk: int = 500, return_codes=False):
    """Decode approximator codes for ``z ~ N(0, I)``; the encoder is never used."""
    if n < 1:
        raise InputError("n must be >= 1")
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(n, model.noise_dim, generator=gen)
    was = model.training
    model.eval()
    try:
        codes = torch.cat([model.approximate(z[i:i + chunk]) for i in range(0, n, chunk)])
        samples = torch.cat([model.decode(codes[i:i + chunk]) for i in range(0, n, chunk)])
    finally:
        model.train(was)
    return (samples, codes) if return_codes else samples


def mse(x, x_hat) -> float:
    """Mean squared error after mapping pixels from [-1, 1] to [0, 1]."""
    x = torch.as_tensor(x, dtype=torch.float64)
    x_hat = torch.as_tensor(x_hat, dtype=torch.float64)
    if x.shape != x_hat.shape:
        raise InputError(f"mse: shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return float((((x - x_hat) / 2) ** 2).mean())


def inception_score(probs, splits: int = 10) -> float:
    """``exp(E_x KL(p(y|x) || p(y)))`` averaged over ``splits`` chunks.

    ``probs`` is an (n, K) array of class probabilities, or a pair
    ``(samples, extractor)`` whose extractor exposes ``probabilities``.
    """
    if isinstance(probs, tuple):
        samples, extractor = probs
        if not hasattr(extractor, "probabilities"):
            raise ConfigurationError("extractor has no class-probability head")
        probs = extractor.probabilities(samples)
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) < splits:
        raise InputError("need an (n, K) probability array with n >= splits")
    scores = []
    for part in np.array_split(p, splits):
        # exactly rounded column sums, so identical rows reproduce their own marginal
        marginal = np.array([[math.fsum(col) for col in part.T]]) / len(part)
        kl = rel_entr(part, marginal).sum(axis=1)
        scores.append(math.exp(kl.mean()))
    return float(np.mean(scores))


def _sqrtm_psd(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b, flags: list | None = None) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The trace of the product's square root is taken from the eigenvalues of
    the symmetric matrix ``S_a^{1/2} S_b S_a^{1/2}``, which has the same
    spectrum; negative round-off eigenvalues are clamped to zero.
    """
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    try:
        root_a = _sqrtm_psd(cov_a)
        w = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    except np.linalg.LinAlgError:
        if flags is not None:
            flags.append(f"fid: covariance regularized with {FID_EPS}*I")
        eye = np.eye(len(cov_a)) * FID_EPS
        root_a = _sqrtm_psd(cov_a + eye)
        w = np.linalg.eigvalsh(root_a @ (cov_b + eye) @ root_a)
    tr_covmean = np.sqrt(np.clip(w, 0, None)).sum()
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_covmean
    return float(max(value, 0.0))


def feature_stats(feats) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    return f.mean(axis=0), np.atleast_2d(np.cov(f, rowvar=False))


def fid(a, b, flags: list | None = None) -> float:
    """Fréchet distance between Gaussians fitted to two (n, d) feature sets."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    d = 1 if a.ndim == 1 else a.shape[1]
    if len(a) < d + 1 or len(b) < d + 1:
        raise InputError(f"fid needs at least {d + 1} rows per set")
    return frechet_distance(*feature_stats(a), *feature_stats(b), flags=flags)


def mode_coverage(samples, centers, sigma, threshold_radius=None, min_fraction=0.01) -> tuple[int, float]:
    """(modes hit, fraction of samples within 3 sigma of any center).

    A mode counts as hit when at least ``min_fraction`` of the samples lie
    within ``threshold_radius`` (default ``3 * sigma``) of its center.
    """
    x = np.asarray(samples, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    if len(c) == 0:
        raise InputError("centers must be non-empty")
    radius = 3 * sigma if threshold_radius is None else threshold_radius
    dist = np.sqrt(((x[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    near = dist <= radius
    hits = int((near.mean(axis=0) >= min_fraction).sum())
    quality = float((dist.min(axis=1) <= 3 * sigma).mean())
    return hits, quality


class MNISTClassifier(nn.Module):
    """Small convolutional classifier used as the feature network for MNIST-style data."""

    def __init__(self, channels=3, n_classes=10, feature_dim=128):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(64, 64, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Flatten(), nn.Linear(64 * 4 * 4, feature_dim), nn.ReLU(),
        )
        self.head = nn.Linear(feature_dim, n_classes)

    def forward(self, x):
        return self.head(self.body(x))


class TorchExtractor:
    """Wraps a classifier whose ``body`` gives features and ``head`` gives logits."""

    def __init__(self, net: nn.Module, name="mnist-cnn", chunk=500):
        self.net = net.eval()
        self.name = name
        self.chunk = chunk

    @torch.no_grad()
    def _run(self, images, fn):
        images = torch.as_tensor(images, dtype=torch.float32)
        return torch.cat([fn(images[i:i + self.chunk]) for i in range(0, len(images), self.chunk)]).double().numpy()

    def features(self, images) -> np.ndarray:
        return self._run(images, self.net.body)

    def probabilities(self, images) -> np.ndarray:
        return self._run(images, lambda x: torch.softmax(self.net(x), dim=1))

    def accuracy(self, images, labels) -> float:
        pred = self.probabilities(images).argmax(axis=1)
        return float((pred == np.asarray(labels)).mean())

    def save(self, path) -> None:
        torch.save({"name": self.name, "state_dict": self.net.state_dict()}, path)

    @classmethod
    def load(cls, path, channels=3) -> TorchExtractor:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        net = MNISTClassifier(channels)
        net.load_state_dict(blob["state_dict"])
        return cls(net, blob.get("name", "mnist-cnn"))


def train_mnist_classifier(dataset, epochs=3, batch_size=128, lr=1e-3, seed=0) -> TorchExtractor:
    """Supervised training of :class:`MNISTClassifier` on a labelled image dataset."""
    if dataset.labels is None:
        raise InputError("classifier training needs labels")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    net = MNISTClassifier(dataset.sample_shape[0], int(dataset.labels.max()) + 1)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    labels = torch.as_tensor(dataset.labels, dtype=torch.long)
    net.train()
    for _ in range(epochs):
        order = torch.randperm(len(dataset), generator=gen)
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            loss = nn.functional.cross_entropy(net(dataset.data[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return TorchExtractor(net)


def evaluate(model, test_images=None, extractor=None, n_samples=DEFAULT_SAMPLES, seed=0,
             ring=None, splits=10) -> EvalReport:
    """Assemble an :class:`EvalReport` from whichever inputs are supplied.

    ``ring`` is an optional ``(centers, sigma)`` pair for point-data models.
    """
    from aaae.trainer import reconstruct

    report = EvalReport(n_samples=n_samples)
    samples = generate_samples(model, n_samples, seed)
    if test_images is not None:
        report.mse = mse(test_images, reconstruct(model, test_images))
    if extractor is not None:
        report.extractor = extractor.name
        if hasattr(extractor, "probabilities"):
            report.icp = inception_score(extractor.probabilities(samples), splits)
        if test_images is not None:
            report.fid = fid(extractor.features(test_images), extractor.features(samples), report.flags)
    if ring is not None:
        centers, sigma = ring
        report.mode_coverage = mode_coverage(samples.numpy(), centers, sigma)
    return report
