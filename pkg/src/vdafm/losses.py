"""Alignment, classification and contrastive objectives and their weighting."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BCE_CLAMP = 1e-7


@dataclass
class LossWeights:
    lambda_align: float = 0.02
    lambda_cl: float = 0.2
    cl_decay: float = 0.95
    tau: float = 0.07

    def problems(self) -> list[str]:
        out = []
        if not self.tau > 0:
            out.append("loss.tau: must be > 0")
        if not 0 < self.cl_decay <= 1:
            out.append("loss.cl_decay: must lie in (0, 1]")
        for name in ("lambda_align", "lambda_cl"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                out.append(f"loss.{name}: must be finite and >= 0")
        return out


# the two coefficient settings reported for the method
PRESETS = {
    "setup42": {"lambda_align": 0.02, "lambda_cl": 0.2},
    "sweep-best": {"lambda_align": 0.2, "lambda_cl": 0.02},
}


@dataclass
class LossBreakdown:
    l_t2v: float
    l_v2t: float
    l_align: float
    l_cls: float
    l_cl: float
    l_total: float

    def as_dict(self) -> dict:
        return asdict(self)


def _cosine_distance(a, b, eps: Optional[float]) -> Tensor:
    return ad.mean(1.0 - ad.cosine_similarity(a, b, eps=eps))


def loss_t2v(e_img_prime, v_img, eps: Optional[float] = None) -> Tensor:
    """Batch mean of 1 - cos between encoded image tokens and visual embeddings."""
    return _cosine_distance(e_img_prime, v_img, eps)


def loss_v2t(e_txt, v_txt, eps: Optional[float] = None) -> Tensor:
    """Batch mean of 1 - cos between text embeddings and back-projected text tokens."""
    return _cosine_distance(e_txt, v_txt, eps)


def loss_align(l_t2v, l_v2t) -> Tensor:
    return ad.scale(ad.add(l_t2v, l_v2t), 0.5)


def loss_cls(p, y) -> Tensor:
    """Mean binary cross-entropy; ``y`` may hold soft labels."""
    p = ad.clamp(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = ad.as_tensor(y)
    ll = ad.mul(y, ad.log(p)) + ad.mul(1.0 - y, ad.log(1.0 - p))
    return -ad.mean(ll)


def loss_cl(v, e, tau: float, eps: Optional[float] = None) -> Tensor:
    """Symmetric InfoNCE over the cosine-similarity matrix of matched rows."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    v, e = ad.as_tensor(v), ad.as_tensor(e)
    n = v.shape[0]
    s = ad.scale(ad.matmul(ad.normalize(v, eps=eps), ad.normalize(e, eps=eps).transpose()), 1.0 / tau)
    diag = Tensor(np.eye(n))
    rows = ad.sum_(ad.mul(ad.log_softmax(s, axis=1), diag))
    cols = ad.sum_(ad.mul(ad.log_softmax(s, axis=0), diag))
    return ad.scale(ad.add(rows, cols), -1.0 / (2 * n))


def cl_weight(w: LossWeights, epoch: int) -> float:
    return w.lambda_cl * w.cl_decay**epoch


def loss_total(l_align, l_cls, l_cl, w: LossWeights, epoch: int) -> Tensor:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return ad.add(ad.add(ad.scale(l_align, w.lambda_align), l_cls), ad.scale(l_cl, cl_weight(w, epoch)))


def combine(l_t2v, l_v2t, l_cls, l_cl, w: LossWeights, epoch: int,
            use_align: bool = True, use_cl: bool = True) -> tuple[Tensor, LossBreakdown]:
    """Total objective plus a float breakdown; disabled terms get weight 0."""
    weights = LossWeights(
        lambda_align=w.lambda_align if use_align else 0.0,
        lambda_cl=w.lambda_cl if use_cl else 0.0,
        cl_decay=w.cl_decay,
        tau=w.tau,
    )
    l_al = loss_align(l_t2v, l_v2t)
    total = loss_total(l_al, l_cls, l_cl, weights, epoch)
    parts = [ad.as_tensor(t).item() for t in (l_t2v, l_v2t, l_al, l_cls, l_cl, total)]
    return total, LossBreakdown(*parts)
