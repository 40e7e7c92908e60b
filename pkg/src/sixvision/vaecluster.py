"""VAE feature extraction over address images and K-means subclassing."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import imgcode
from .addr import Address, format_address
from .tensor import Adam, assert_finite

logger = logging.getLogger(__name__)


class InsufficientData(ValueError):
    pass


class TooFewPoints(ValueError):
    pass


class VaeModel(nn.Module):
    """Two strided convs + dense heads for (mu, logvar); mirrored decoder
    producing 8x16 Bernoulli logits."""

    def __init__(self, latent_dim: int = 16, width: int = 32, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.latent_dim = latent_dim
            self.enc1 = nn.Conv2d(1, width // 2, 3, padding=1)
            self.enc2 = nn.Conv2d(width // 2, width, 3, stride=2, padding=1)
            self.enc_fc = nn.Linear(width * 4 * 8, 2 * latent_dim)
            self.dec_fc = nn.Linear(latent_dim, width * 4 * 8)
            self.dec1 = nn.ConvTranspose2d(width, width // 2, 4, stride=2, padding=1)
            self.dec2 = nn.Conv2d(width // 2, 1, 3, padding=1)
            self.width = width

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = F.relu(self.enc2(F.relu(self.enc1(x))))
        mu, logvar = self.enc_fc(h.flatten(1)).chunk(2, dim=1)
        return mu, logvar.clamp(-10, 10)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.dec_fc(z)).view(-1, self.width, 4, 8)
        return self.dec2(F.relu(self.dec1(h)))

    def elbo_terms(self, x: torch.Tensor, generator: torch.Generator | None = None):
        """Per-example reconstruction log-likelihood and KL to N(0, I)."""
        mu, logvar = self.encode(x)
        eps = torch.randn(mu.shape, generator=generator)
        z = mu + eps * torch.exp(0.5 * logvar)
        logits = self.decode(z)
        rec = -F.binary_cross_entropy_with_logits(logits, x, reduction="none").flatten(1).sum(1)
        kl = 0.5 * (mu.pow(2) + logvar.exp() - 1 - logvar).sum(1)
        return rec, kl


def _images_tensor(images) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[:, None]
    return torch.from_numpy(arr)


def train_vae(images, epochs: int = 200, seed: int = 0, latent_dim: int = 16,
              batch: int = 64, lr: float = 2e-3, history: list | None = None) -> VaeModel:
    """Maximise the ELBO; epoch-mean ELBO values are appended to ``history``."""
    data = _images_tensor(images)
    if len(data) < 2:
        raise InsufficientData("VAE training needs at least two images")
    model = VaeModel(latent_dim, seed=seed)
    opt = Adam(model, lr)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        order = torch.randperm(len(data), generator=gen)
        total = 0.0
        for start in range(0, len(data), batch):
            xb = data[order[start : start + batch]]
            rec, kl = model.elbo_terms(xb, gen)
            elbo = (rec - kl).mean()
            assert_finite(elbo, "ELBO")
            opt.step(-elbo)
            total += elbo.item() * len(xb)
        if history is not None:
            history.append(total / len(data))
    model.eval()
    return model


@torch.no_grad()
def latent_of(model: VaeModel, img) -> np.ndarray:
    """Latent mean(s) for one ``(8, 16)`` image or a ``(n, 8, 16)`` batch."""
    arr = np.asarray(img)
    single = arr.ndim == 2
    mu, _ = model.encode(_images_tensor(arr[None] if single else arr))
    out = mu.numpy().astype(np.float64)
    return out[0] if single else out


@torch.no_grad()
def reconstruct_proba(model: VaeModel, img) -> np.ndarray:
    arr = np.asarray(img)
    mu, _ = model.encode(_images_tensor(arr[None] if arr.ndim == 2 else arr))
    p = torch.sigmoid(model.decode(mu))[:, 0].numpy()
    return p[0] if arr.ndim == 2 else p


@dataclass(frozen=True)
class Clustering:
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    inertia_history: tuple[float, ...]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def assignments(self, addresses: Sequence[Address]) -> dict[Address, int]:
        return {a: int(c) for a, c in zip(addresses, self.labels)}


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def _inertia(x, labels, centroids) -> float:
    return float(((x - centroids[labels]) ** 2).sum())


def kmeans(latents, k: int = 6, seed: int = 0, max_iter: int = 300) -> Clustering:
    """Lloyd iterations from a seeded farthest-point start.

    A cluster that empties is refilled by moving the point farthest from the
    centroid of the largest cluster, which splits that cluster.
    """
    x = np.asarray(latents, dtype=np.float64)
    n = len(x)
    if k < 1 or n < k:
        raise TooFewPoints(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    centroids = [x[rng.integers(n)]]
    d = _sq_dists(x, np.array(centroids)).min(1)
    for _ in range(1, k):
        centroids.append(x[int(np.argmax(d))])
        d = np.minimum(d, _sq_dists(x, np.array(centroids[-1:]))[:, 0])
    centroids = np.array(centroids)

    labels = _sq_dists(x, centroids).argmin(1)
    history = [_inertia(x, labels, centroids)]
    for _ in range(max_iter):
        labels = _repair(x, _sq_dists(x, centroids).argmin(1), k)
        new = np.array([x[labels == j].mean(0) for j in range(k)])
        history.append(_inertia(x, labels, new))
        if np.allclose(new, centroids, rtol=0, atol=1e-12):
            centroids = new
            break
        centroids = new
    labels = _repair(x, _sq_dists(x, centroids).argmin(1), k)
    return Clustering(k, labels, centroids, tuple(history))


def _repair(x: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    labels = labels.copy()
    while True:
        sizes = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(sizes == 0)
        if len(empty) == 0:
            return labels
        big = int(np.argmax(sizes))
        members = np.flatnonzero(labels == big)
        centre = x[members].mean(0)
        far = members[int(np.argmax(((x[members] - centre) ** 2).sum(1)))]
        labels[far] = empty[0]


def purity(labels: Sequence[int], truth: Sequence) -> float:
    """Fraction of points whose cluster's majority true label matches theirs."""
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    hit = 0
    for c in np.unique(labels):
        _, counts = np.unique(truth[labels == c], return_counts=True)
        hit += counts.max()
    return hit / len(labels)


def write_clustering_csv(addresses: Sequence[Address], labels, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["address", "subclass_id"])
        for a, c in zip(addresses, labels):
            w.writerow([format_address(a), int(c)])


class VaeKMeans(ClusterMixin, TransformerMixin, BaseEstimator):
    """Cluster addresses by K-means over VAE latent means of their images.

    ``transform`` returns latent means, ``predict`` the nearest subclass.
    """

    def __init__(self, n_clusters: int = 6, latent_dim: int = 16, vae_epochs: int = 200,
                 batch_size: int = 64, learning_rate: float = 2e-3, random_state: int = 0):
        self.n_clusters = n_clusters
        self.latent_dim = latent_dim
        self.vae_epochs = vae_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    @staticmethod
    def _images(X):
        X = list(X) if not isinstance(X, np.ndarray) else X
        if isinstance(X, np.ndarray):
            return X.reshape(len(X), imgcode.ROWS, imgcode.COLS)
        return imgcode.encode_many(X)

    def fit(self, X, y=None):
        images = self._images(X)
        self.elbo_history_ = []
        self.vae_ = train_vae(images, self.vae_epochs, self.random_state, self.latent_dim,
                              self.batch_size, self.learning_rate, self.elbo_history_)
        latents = latent_of(self.vae_, images)
        self.clustering_ = kmeans(latents, self.n_clusters, self.random_state)
        self.labels_ = self.clustering_.labels
        self.cluster_centers_ = self.clustering_.centroids
        return self

    def transform(self, X):
        check_is_fitted(self, "vae_")
        return latent_of(self.vae_, self._images(X))

    def predict(self, X):
        return _sq_dists(self.transform(X), self.cluster_centers_).argmin(1)
