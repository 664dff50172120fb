"""Class balancing and training-time augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, TriModalSample
from .errors import DimMismatch, SingleClass
from .model import MODALITIES


@dataclass
class AugmentConfig:
    noise_sigma: float = 0.01
    noise_prob: float = 0.5
    mixup_prob: float = 0.5
    mixup_alpha: float = 0.4
    smote_k: int = 1
    smote: bool = True
    modalities: list = field(default_factory=lambda: list(MODALITIES))
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        for name in ("noise_prob", "mixup_prob"):
            if not 0 <= getattr(self, name) <= 1:
                out.append(f"augment.{name}: must lie in [0, 1]")
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            out.append("augment.noise_sigma: must be finite and >= 0")
        if not (np.isfinite(self.mixup_alpha) and self.mixup_alpha > 0):
            out.append("augment.mixup_alpha: must be finite and > 0")
        if self.smote_k < 1:
            out.append("augment.smote_k: must be >= 1")
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown:
            out.append(f"augment.modalities: unknown {sorted(unknown)}")
        return out


def nearest_minority_neighbors(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other rows of ``x`` (Euclidean, ties by index).

    A lone row is its own neighbour.
    """
    n = x.shape[0]
    if n == 1:
        return np.zeros((1, k), dtype=np.int64)
    d2 = np.stack([((x - row) ** 2).sum(axis=1) for row in x])
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def smote_balance(train: Dataset, k: int = 1, seed: int = 0) -> Dataset:
    """Upsample the minority class by replicating nearest minority neighbours.

    Each synthetic row is a full copy (image, text, tabular, label, site) of
    a minority sample's nearest minority neighbour in tabular space, so the
    three modalities stay aligned. Base samples are visited in a shuffled
    cycle so every minority sample is used as evenly as possible.
    """
    labels = train.labels
    counts = np.bincount(labels, minlength=2)
    if counts.min() == 0:
        raise SingleClass("SMOTE needs both classes present")
    minority = int(np.argmin(counts))
    deficit = int(counts.max() - counts.min())
    if deficit == 0:
        return train
    members = np.flatnonzero(labels == minority)
    if not (k == 1 or k <= len(members) - 1):
        raise ValueError(f"k={k} exceeds available minority neighbours ({len(members) - 1})")
    rng = np.random.default_rng(seed)
    neigh = nearest_minority_neighbors(train.tabular[members], k)
    picks = []
    while len(picks) < deficit:
        for base in rng.permutation(len(members)):
            j = neigh[base, 0] if k == 1 else neigh[base, rng.integers(k)]
            picks.append(members[j])
            if len(picks) == deficit:
                break
    picks = np.asarray(picks, dtype=np.int64)
    return Dataset(
        ids=train.ids + [f"{train.ids[j]}#smote{n}" for n, j in enumerate(picks)],
        image=np.concatenate([train.image, train.image[picks]]),
        text=np.concatenate([train.text, train.text[picks]]),
        tabular=np.concatenate([train.tabular, train.tabular[picks]]),
        labels=np.concatenate([train.labels, train.labels[picks]]),
        sites=train.sites + [train.sites[j] for j in picks],
        nihss=None if train.nihss is None else train.nihss + [train.nihss[j] for j in picks],
        tabular_names=list(train.tabular_names),
    )


def gaussian_noise(x: np.ndarray, sigma: float, prob: float, rng: np.random.Generator) -> np.ndarray:
    """With probability ``prob`` add N(0, sigma^2) noise to ``x``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if prob <= 0 or sigma == 0 or rng.random() >= prob:
        return x
    return x + rng.normal(0.0, sigma, size=x.shape)


def mixup(a: TriModalSample, b: TriModalSample, lam: float):
    """Convex combination of two samples: (image, text, tabular, soft label)."""
    if not 0 <= lam <= 1:
        raise ValueError("lambda must lie in [0, 1]")
    out = []
    for name in ("image_emb", "text_emb", "tabular"):
        xa, xb = np.asarray(getattr(a, name), dtype=np.float64), np.asarray(getattr(b, name), dtype=np.float64)
        if xa.shape != xb.shape:
            raise DimMismatch(f"{name}: {xa.shape} vs {xb.shape}")
        out.append(lam * xa + (1.0 - lam) * xb)
    return (*out, lam * a.label + (1.0 - lam) * b.label)


def augment_batch(batch: tuple, y: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """Per-sample Gaussian noise, then batch-wise MixUp against a permutation.

    Returns new (x_img, x_txt, x_tab) and float soft labels; inputs are not
    modified.
    """
    xs = [np.array(x, dtype=np.float64) for x in batch]
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    active = [m in cfg.modalities for m in MODALITIES]
    if cfg.noise_sigma > 0 and cfg.noise_prob > 0:
        hit = rng.random(n) < cfg.noise_prob
        for x, on in zip(xs, active):
            if on:
                x[hit] += rng.normal(0.0, cfg.noise_sigma, size=(int(hit.sum()), x.shape[1]))
    if cfg.mixup_prob > 0 and n > 1 and rng.random() < cfg.mixup_prob:
        lam = rng.beta(cfg.mixup_alpha, cfg.mixup_alpha)
        perm = rng.permutation(n)
        for i, on in enumerate(active):
            if on:
                xs[i] = lam * xs[i] + (1.0 - lam) * xs[i][perm]
        y = lam * y + (1.0 - lam) * y[perm]
    return tuple(xs), y
