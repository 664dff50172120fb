"""Synthetic tri-modal cohorts driven by a shared Gaussian latent.

Each modality is a noisy linear view of the latent ``z``. The latent is
split into three blocks; every modality observes all of ``z`` (so the
noiseless limit is fully predictive) but with a strong gain only on its
own block:

* tabular: latent block 0 (clinical factors), plus one column along the
  label direction of that block and nuisance covariates;
* image:   latent block 1 (imaging factors), spread over ``d_img`` dims;
* text:    latent block 2, spread over ``d_txt`` dims with the most noise.

The label weights give block 0 the largest share, then block 1, then
block 2, so single-modality informativeness is ordered
tabular > image > text and no modality alone carries the whole signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, write_dataset
from .errors import ConfigError

DEFAULT_SITES = [("tongji", 0.35), ("xinhua", 0.25), ("oriental", 0.2), ("putuo", 0.2)]

# share of label-logit variance carried by each latent block
BLOCK_SHARES = (0.55, 0.3, 0.15)
# image/text gains are large because their noise is spread over thousands of
# dimensions; with small gains the networks memorise noise before they find
# the latent directions
STRONG_GAIN = {"tabular": 1.0, "image": 12.0, "text": 8.0}
WEAK_GAIN = 0.1


@dataclass
class SynthConfig:
    n: int = 729
    d_img: int = 2048
    d_txt: int = 3072
    d_tab: int = 16
    latent_dim: int = 8
    noise_img: float = 0.5
    noise_txt: float = 1.0
    noise_tab: float = 0.3
    pos_rate: float = 0.3186
    signal: float = 4.0
    site_shift: float = 0.5
    sites: list = field(default_factory=lambda: [list(s) for s in DEFAULT_SITES])
    seed: int = 42

    def problems(self) -> list[str]:
        out = []
        if self.n < 2:
            out.append("synth.n: need at least 2 samples")
        if self.latent_dim < 3:
            out.append("synth.latent_dim: need at least 3 latent dimensions")
        for name in ("d_img", "d_txt"):
            if getattr(self, name) < self.latent_dim:
                out.append(f"synth.{name}: must be >= latent_dim ({self.latent_dim})")
        if self.d_tab < self.latent_dim // 2 + 1:
            out.append(f"synth.d_tab: must be >= {self.latent_dim // 2 + 1}")
        for name in ("noise_img", "noise_txt", "noise_tab", "site_shift"):
            if getattr(self, name) < 0:
                out.append(f"synth.{name}: must be >= 0")
        if not 0 < self.pos_rate < 1:
            out.append("synth.pos_rate: must lie in (0, 1)")
        if not self.sites:
            out.append("synth.sites: need at least one site")
        else:
            total = sum(float(f) for _, f in self.sites)
            if abs(total - 1.0) > 1e-9 or any(float(f) < 0 for _, f in self.sites):
                out.append("synth.sites: fractions must be non-negative and sum to 1")
        return out


def latent_blocks(latent_dim: int) -> list[np.ndarray]:
    """Index sets of the tabular / image / text latent blocks."""
    half = latent_dim // 2
    cut = half + max(1, (latent_dim - half + 1) // 2) if latent_dim - half > 1 else half
    return [np.arange(0, half), np.arange(half, cut), np.arange(cut, latent_dim)]


def _site_counts(n: int, fractions: list[float]) -> np.ndarray:
    raw = np.asarray(fractions) * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts


def _gain_profile(latent_dim: int, strong_block: np.ndarray, strong: float) -> np.ndarray:
    gains = np.full(latent_dim, WEAK_GAIN)
    gains[strong_block] = strong
    return gains


def _spread(rng, dim: int, gains: np.ndarray) -> np.ndarray:
    """(dim, L) matrix with orthogonal columns of norm ``gains``."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, len(gains))))
    return q[:, : len(gains)] * gains


def _calibrate_bias(logits: np.ndarray, u: np.ndarray, target: int) -> float:
    """Bisection on the intercept so that sum(u < sigmoid(logit + b)) hits target."""
    lo, hi = -50.0, 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        count = int(np.sum(u < 1.0 / (1.0 + np.exp(-(logits + mid)))))
        if count == target:
            return mid
        if count < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class SynthTruth:
    """Generator internals, for oracle checks."""

    z: np.ndarray
    logit: np.ndarray
    weights: np.ndarray
    bias: float


def generate(cfg: SynthConfig, return_truth: bool = False):
    problems = cfg.problems()
    if problems:
        raise ConfigError(problems)
    rng = np.random.default_rng(cfg.seed)
    n, L = cfg.n, cfg.latent_dim
    blocks = latent_blocks(L)

    names = [str(s) for s, _ in cfg.sites]
    counts = _site_counts(n, [float(f) for _, f in cfg.sites])
    site_idx = rng.permutation(np.repeat(np.arange(len(names)), counts))
    shifts = rng.standard_normal((len(names), L))
    shifts *= cfg.site_shift / np.linalg.norm(shifts, axis=1, keepdims=True)
    z = rng.standard_normal((n, L)) + shifts[site_idx]

    w = np.zeros(L)
    for block, share in zip(blocks, BLOCK_SHARES):
        if len(block):
            direction = rng.standard_normal(len(block))
            w[block] = np.sqrt(share) * direction / np.linalg.norm(direction)
    w *= cfg.signal
    logit = z @ w
    u = rng.random(n)
    bias = _calibrate_bias(logit, u, int(round(cfg.pos_rate * n)))
    labels = (u < 1.0 / (1.0 + np.exp(-(logit + bias)))).astype(np.int64)

    g_img = _spread(rng, cfg.d_img, _gain_profile(L, blocks[1], STRONG_GAIN["image"]))
    g_txt = _spread(rng, cfg.d_txt, _gain_profile(L, blocks[2], STRONG_GAIN["text"]))
    image = z @ g_img.T + cfg.noise_img * rng.standard_normal((n, cfg.d_img))
    text = z @ g_txt.T + cfg.noise_txt * rng.standard_normal((n, cfg.d_txt))

    tab_gain = _gain_profile(L, blocks[0], STRONG_GAIN["tabular"])
    w0 = w[blocks[0]] / np.linalg.norm(w[blocks[0]])
    n_nuisance = cfg.d_tab - L - 1
    columns = [z * tab_gain, (z[:, blocks[0]] @ w0)[:, None]]
    tab_signal = np.concatenate(columns, axis=1)[:, : cfg.d_tab]
    tabular = tab_signal + cfg.noise_tab * rng.standard_normal(tab_signal.shape)
    if n_nuisance > 0:
        tabular = np.concatenate([tabular, rng.standard_normal((n, n_nuisance))], axis=1)

    ds = Dataset(
        ids=[f"s{i:05d}" for i in range(n)],
        # stored at float32 precision so EMB1 export is lossless
        image=image.astype(np.float32).astype(np.float64),
        text=text.astype(np.float32).astype(np.float64),
        tabular=tabular.astype(np.float32).astype(np.float64),
        labels=labels,
        sites=[names[i] for i in site_idx],
        tabular_names=[f"tab{j:02d}" for j in range(cfg.d_tab)],
    )
    if return_truth:
        return ds, SynthTruth(z=z, logit=logit + bias, weights=w, bias=bias)
    return ds


def export(ds: Dataset, directory: str | Path) -> Path:
    """Write ``ds`` as EMB1 + CSV + manifest under ``directory``."""
    try:
        return write_dataset(ds, directory)
    except OSError as exc:
        raise OSError(f"cannot export dataset to {directory}: {exc}") from exc
