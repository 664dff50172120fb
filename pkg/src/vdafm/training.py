"""Optimiser, schedule, early stopping and the training / CV drivers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numba
import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, augment_batch, smote_balance
from .data import Dataset, Split
from .errors import ConfigError, InsufficientClassSamples, NonFinite, OutOfRange, ShapeMismatch
from .losses import LossWeights, cl_weight, combine, loss_cl, loss_cls, loss_t2v, loss_v2t
from .metrics import alignment_angle, evaluate
from .model import (
    MODALITIES,
    ModelParams,
    VdafmConfig,
    ablate_modality,
    forward,
    init_params,
    predict,
)

# cosine floors used while training so that zeroed modalities (all-zero
# embeddings at initialisation) do not abort the run
TRAIN_NORM_EPS = 1e-8
METRIC_KEYS = ("auc", "acc", "f1", "recall", "precision", "specificity")
EPOCH_COLUMNS = ("epoch", "lr", "l_t2v", "l_v2t", "l_align", "l_cls", "l_cl", "l_total",
                 "val_auc", "val_acc", "val_f1", "val_recall", "val_precision", "val_specificity")


@dataclass
class TrainConfig:
    max_epochs: int = 100
    patience: int = 30
    warmup_epochs: int = 15
    clip_norm: float = 1.0
    batch_size: int = 32
    base_lr: float = 1e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 42

    def problems(self) -> list[str]:
        out = []
        if self.max_epochs < 1:
            out.append("train.max_epochs: must be >= 1")
        if not 0 <= self.warmup_epochs < self.max_epochs:
            out.append("train.warmup_epochs: must lie in [0, max_epochs)")
        if self.patience < 1:
            out.append("train.patience: must be >= 1")
        if not self.clip_norm > 0:
            out.append("train.clip_norm: must be > 0")
        if self.batch_size < 2:
            out.append("train.batch_size: must be >= 2")
        if not self.base_lr > 0:
            out.append("train.base_lr: must be > 0")
        if self.weight_decay < 0:
            out.append("train.weight_decay: must be >= 0")
        return out


@dataclass
class Ablation:
    modalities_zeroed: list = field(default_factory=list)
    use_l_align: bool = True
    use_l_cl: bool = True

    def problems(self) -> list[str]:
        unknown = set(self.modalities_zeroed) - set(MODALITIES)
        if unknown:
            return [f"ablation.modalities_zeroed: unknown {sorted(unknown)}"]
        return []


@dataclass
class RunSettings:
    model: VdafmConfig
    loss: LossWeights
    train: TrainConfig
    augment: AugmentConfig
    ablation: Ablation


# ---------------------------------------------------------------- schedule


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` then cosine annealing towards zero."""
    if not 0 <= epoch < cfg.max_epochs:
        raise OutOfRange(f"epoch {epoch} outside [0, {cfg.max_epochs})")
    w = cfg.warmup_epochs
    if epoch < w:
        return cfg.base_lr * (epoch + 1) / w
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / (cfg.max_epochs - w)))


def global_norm(grads: dict) -> float:
    return math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads.values()))


def clip_gradients(grads: dict, max_norm: float) -> dict:
    """Rescale all gradients jointly so their global L2 norm is <= max_norm."""
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


# --------------------------------------------------------------- optimiser


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    base_lr: float = 1e-4
    weight_decay: float = 0.0
    # names whose moments are still exactly zero (never saw a nonzero gradient)
    untouched: set = field(default_factory=set)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "OptimState":
        return cls(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                   base_lr=cfg.base_lr, weight_decay=cfg.weight_decay)


@numba.njit(cache=True)
def _radam_kernel(p, g, m, v, b1, b2, grad_scale, momentum_lr, adaptive_lr, v_corr, eps,
                  decay, rectified):
    for i in range(p.size):
        gi = g[i] * grad_scale
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        x = p[i] - decay * p[i]
        if rectified:
            x -= adaptive_lr * mi / (np.sqrt(vi) * v_corr + eps)
        else:
            x -= momentum_lr * mi
        p[i] = x


def radam_step(state: OptimState, params: dict, grads: dict, lr: float,
               grad_scale: float = 1.0) -> None:
    """One rectified-Adam update, in place on ``params`` (name -> Tensor or array).

    While the variance estimate is unreliable (rho_t <= 4) the step falls
    back to bias-corrected momentum; weight decay is decoupled.
    ``grad_scale`` multiplies every gradient first (used for clipping).
    """
    b1, b2 = state.beta1, state.beta2
    state.t += 1
    t = state.t
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    b2t = b2**t
    rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
    bias1 = 1.0 - b1**t
    rectified = rho_t > 4.0
    r_t = 0.0
    if rectified:
        r_t = math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                        / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
    for name, p in params.items():
        data = p.data if isinstance(p, ad.Tensor) else p
        g = np.ascontiguousarray(grads[name], dtype=np.float64)
        if g.shape != data.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {data.shape}")
        if not data.flags.c_contiguous:
            raise ValueError(f"{name}: parameter storage must be contiguous")
        if name not in state.m:
            state.m[name] = np.zeros(data.size)
            state.v[name] = np.zeros(data.size)
            state.untouched.add(name)
        if name in state.untouched:
            # zero moments and a zero gradient leave everything unchanged
            if state.weight_decay == 0 and not g.any():
                continue
            state.untouched.discard(name)
        _radam_kernel(data.reshape(-1), g.reshape(-1), state.m[name], state.v[name],
                      b1, b2, grad_scale, lr / bias1, lr * r_t / bias1,
                      1.0 / math.sqrt(1.0 - b2t), state.eps, lr * state.weight_decay, rectified)


# ------------------------------------------------------------ early stop


class EarlyStopping:
    """Stops once the metric has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value``; return True when training should stop."""
        if value > self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------- training


@dataclass
class RunReport:
    epochs: list
    best_epoch: int
    stop_epoch: int
    best_val_auc: float
    val: dict
    test: Optional[dict] = None
    alignment: Optional[dict] = None
    restored: str = "best"
    n_train: int = 0
    n_train_balanced: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: ModelParams
    report: RunReport


def _batch(ds: Dataset, idx=None) -> tuple:
    if idx is None:
        return ds.image, ds.text, ds.tabular
    return ds.image[idx], ds.text[idx], ds.tabular[idx]


def _maybe_ablate(batch, ablation: Ablation):
    return ablate_modality(batch, ablation.modalities_zeroed) if ablation.modalities_zeroed else batch


def batch_losses(params, cfg: VdafmConfig, batch, y, weights: LossWeights, epoch: int,
                 ablation: Ablation, train: bool, rng=None, eps: Optional[float] = TRAIN_NORM_EPS):
    """Forward pass plus all loss terms; returns (total, breakdown, trace)."""
    trace = forward(params, cfg, batch, train=train, rng=rng)
    l_t2v = loss_t2v(trace.E_img_prime, trace.V_img, eps=eps)
    l_v2t = loss_v2t(trace.E_txt, trace.V_txt, eps=eps)
    l_cl = loss_cl(trace.E_img, trace.E_txt, weights.tau, eps=eps)
    l_cls = loss_cls(trace.p, y)
    total, parts = combine(l_t2v, l_v2t, l_cls, l_cl, weights, epoch,
                           use_align=ablation.use_l_align, use_cl=ablation.use_l_cl)
    return total, parts, trace


def probe_alignment(params, cfg: VdafmConfig, batch) -> dict:
    """Mean image/text angles before (E_img, E_txt) and after the encoder."""
    tr = forward(params, cfg, batch, train=False)
    return {
        "pre_transformer_deg": alignment_angle(tr.E_img.data, tr.E_txt.data),
        "post_transformer_deg": alignment_angle(tr.E_img_prime.data, tr.E_txt_prime.data),
    }


def _round_to_f32(params: ModelParams) -> None:
    for t in params.values():
        t.data = t.data.astype(np.float32).astype(np.float64)


def _metrics_block(params, cfg, ds: Dataset, idx, ablation: Ablation) -> dict:
    batch = _maybe_ablate(_batch(ds, idx), ablation)
    return evaluate(predict(params, cfg, batch), ds.labels[idx])


def train(ds: Dataset, split: Split, settings: RunSettings,
          progress: Optional[Callable[[dict], None]] = None,
          init: Optional[ModelParams] = None,
          on_batch: Optional[Callable[[list], None]] = None) -> TrainResult:
    """Train one model; the returned params are those of the best val-AUC epoch.

    Each epoch: SMOTE-balanced training set (balanced once, up front),
    shuffled mini-batches with noise/MixUp augmentation, forward, total
    loss, backward, global-norm clipping, RAdam. Validation uses the
    untouched validation rows. Returned parameters are rounded to float32
    so that they match what a checkpoint stores.

    ``progress`` receives each epoch row; ``on_batch`` receives the ids of
    every training batch (SMOTE copies carry a ``#smote`` suffix).
    """
    mcfg, weights, tcfg, acfg, abl = (settings.model, settings.loss, settings.train,
                                      settings.augment, settings.ablation)
    problems = mcfg.problems() + weights.problems() + tcfg.problems() + acfg.problems() + abl.problems()
    if problems:
        raise ConfigError(problems)
    if not split.train or not split.val:
        raise InsufficientClassSamples("train and validation splits must be non-empty")
    if len(set(ds.labels[split.val].tolist())) < 2:
        raise InsufficientClassSamples("validation split needs both classes")

    seeds = np.random.SeedSequence(tcfg.seed).spawn(4)
    init_seed = int(seeds[0].generate_state(1)[0])
    smote_seed = int(seeds[1].generate_state(1)[0])
    rng_batches = np.random.default_rng(seeds[2])
    rng_dropout = np.random.default_rng(seeds[3])

    params = init if init is not None else init_params(mcfg, init_seed)
    names = list(params.keys())
    train_ds = ds.subset(split.train)
    n_train = len(train_ds)
    if acfg.smote:
        train_ds = smote_balance(train_ds, acfg.smote_k, smote_seed)
    state = OptimState.from_config(tcfg)
    stopper = EarlyStopping(tcfg.patience)
    best = params.copy_arrays()
    rows = []
    stop_epoch = tcfg.max_epochs - 1

    for epoch in range(tcfg.max_epochs):
        lr = lr_at(epoch, tcfg)
        order = rng_batches.permutation(len(train_ds))
        sums = dict.fromkeys(("l_t2v", "l_v2t", "l_align", "l_cls", "l_cl", "l_total"), 0.0)
        for step, s in enumerate(range(0, len(order), tcfg.batch_size)):
            idx = order[s:s + tcfg.batch_size]
            if on_batch is not None:
                on_batch([train_ds.ids[i] for i in idx])
            batch, y = augment_batch(_batch(train_ds, idx), train_ds.labels[idx], acfg, rng_batches)
            batch = _maybe_ablate(batch, abl)
            try:
                with ad.Tape() as tape:
                    total, parts, _ = batch_losses(params, mcfg, batch, y, weights, epoch, abl,
                                                   train=True, rng=rng_dropout)
                grads = tape.backward(total, wrt=list(params.values()))
                grads = {n: grads[params[n]] for n in names}
                norm = global_norm(grads)
                factor = tcfg.clip_norm / norm if norm > tcfg.clip_norm else 1.0
                radam_step(state, params, grads, lr, grad_scale=factor)
            except NonFinite as exc:
                raise NonFinite(f"epoch {epoch} step {step}: {exc}") from exc
            for k, v in parts.as_dict().items():
                sums[k] += v * len(idx)
        val = _metrics_block(params, mcfg, ds, split.val, abl)
        row = {"epoch": epoch, "lr": lr, **{k: v / len(train_ds) for k, v in sums.items()}}
        row.update({f"val_{k}": val[k] for k in METRIC_KEYS})
        rows.append(row)
        if progress is not None:
            progress(row)
        if val["auc"] > stopper.best:
            best = params.copy_arrays()
        if stopper.update(epoch, val["auc"]):
            stop_epoch = epoch
            break

    params.load_arrays(best)
    _round_to_f32(params)
    val_final = _metrics_block(params, mcfg, ds, split.val, abl)
    test = alignment = None
    if split.test:
        test = _metrics_block(params, mcfg, ds, split.test, abl)
        alignment = probe_alignment(params, mcfg, _maybe_ablate(_batch(ds, split.test), abl))
    report = RunReport(
        epochs=rows,
        best_epoch=stopper.best_epoch,
        stop_epoch=stop_epoch,
        best_val_auc=stopper.best,
        val=val_final,
        test=test,
        alignment=alignment,
        n_train=n_train,
        n_train_balanced=len(train_ds),
    )
    return TrainResult(params, report)


# ---------------------------------------------------------- aggregation


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value); order-free."""
    values = [float(v) for v in values]
    if not values:
        return float("nan"), float("nan")
    mu = math.fsum(values) / len(values)
    if len(values) == 1:
        return mu, 0.0
    return mu, math.sqrt(math.fsum((v - mu) ** 2 for v in values) / (len(values) - 1))


def aggregate(metric_dicts: Sequence[dict], keys: Sequence[str] = METRIC_KEYS) -> dict:
    out = {}
    for k in keys:
        vals = [m[k] for m in metric_dicts if m.get(k) is not None]
        mu, sd = mean_std(vals)
        out[k] = {"mean": mu, "std": sd, "n": len(vals)}
    return out


def with_seed(settings: RunSettings, seed: int) -> RunSettings:
    tcfg = TrainConfig(**{**asdict(settings.train), "seed": int(seed)})
    return RunSettings(settings.model, settings.loss, tcfg, settings.augment, settings.ablation)


def fold_job(job: tuple) -> dict:
    """Train one (fold, seed) pair; module level so it can run in a worker process."""
    ds, split, settings, fold, seed = job
    res = train(ds, split, with_seed(settings, seed))
    return {"fold": fold, "seed": seed, "val": res.report.val,
            "best_epoch": res.report.best_epoch, "stop_epoch": res.report.stop_epoch}


def cross_validate(ds: Dataset, k: int, settings: RunSettings, seeds: Sequence[int],
                   split_seed: int = 42, runner: Optional[Callable] = None) -> dict:
    """k-fold x seed repetitions, evaluated on each fold's validation part.

    ``runner(fn, jobs)`` may be supplied to execute the (fold, seed) runs
    concurrently; it must return one result per job.
    """
    from .data import SplitSpec, make_splits

    if k < 2:
        raise ConfigError("cross-validation needs k >= 2")
    if not seeds:
        raise ConfigError("need at least one seed")
    folds = make_splits(ds, SplitSpec(kind="kfold", folds=k, seed=split_seed))
    jobs = [(ds, folds[f], settings, f, s) for f in range(k) for s in seeds]
    results = runner(fold_job, jobs) if runner else [fold_job(j) for j in jobs]
    results = sorted(results, key=lambda r: (r["fold"], r["seed"]))
    return {"runs": results, "aggregate": aggregate([r["val"] for r in results])}
