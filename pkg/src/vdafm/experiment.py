"""Experiment configuration and the drivers behind each CLI subcommand.

Configuration is a set of flat dotted keys (``loss.lambda_cl``,
``model.n_layers`` ...) layered as defaults < JSON config file < command
line. Every driver writes into its own output directory; a run that is
repeated with the same configuration and seeds produces byte-identical
CSV files and checkpoints. The only wall-clock value anywhere is the
``generated_at`` field of ``report.json``.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence


from .augment import AugmentConfig
from .data import Dataset, Split, SplitSpec, load_dataset, make_splits
from .errors import ConfigError, MissingId, SingleSite
from .losses import PRESETS, LossWeights
from .metrics import evaluate
from .model import (
    MODALITIES,
    VdafmConfig,
    ablate_modality,
    check_data_dims,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .synthetic import SynthConfig, generate
from .training import (
    EPOCH_COLUMNS,
    METRIC_KEYS,
    Ablation,
    RunSettings,
    TrainConfig,
    aggregate,
    probe_alignment,
    train,
)

SECTIONS = {
    "synth": SynthConfig,
    "split": SplitSpec,
    "model": VdafmConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "augment": AugmentConfig,
    "ablation": Ablation,
}
# top-level keys that are not part of a section
TOP_LEVEL = ("data", "out", "seeds", "folds", "jobs", "preset", "sweep")
CHECKPOINT_NAME = "model.vck"
# where and how a run executes; left out of checkpoints so they stay byte-identical
RUNTIME_KEYS = ("out", "jobs")


@dataclass
class ExperimentConfig:
    data: Optional[str] = None  # manifest path; None means synthetic data
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    model: VdafmConfig = field(default_factory=VdafmConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    ablation: Ablation = field(default_factory=Ablation)
    out: str = "out"
    seeds: list = field(default_factory=lambda: [42])
    folds: int = 0  # 0: holdout split, k >= 2: k-fold cross-validation
    jobs: int = 1
    preset: Optional[str] = None
    sweep: dict = field(default_factory=dict)

    # ------------------------------------------------------------ flat view

    def to_flat(self) -> dict:
        flat = {}
        for key in TOP_LEVEL:
            flat[key] = getattr(self, key)
        for name in SECTIONS:
            for k, v in asdict(getattr(self, name)).items():
                flat[f"{name}.{k}"] = v
        return dict(sorted(flat.items()))

    @classmethod
    def from_flat(cls, layers: Sequence[dict]) -> "ExperimentConfig":
        """Build a config from override layers applied in order.

        A ``preset`` named in a layer is expanded beneath that layer's own
        explicit keys. Every unknown key and bad value is reported at once.
        """
        cfg = cls()
        problems = []
        for layer in layers:
            layer = dict(layer)
            preset = layer.get("preset")
            if preset is not None:
                if preset not in PRESETS:
                    problems.append(f"preset: unknown {preset!r} (choose from {sorted(PRESETS)})")
                else:
                    for k, v in PRESETS[preset].items():
                        layer.setdefault(f"loss.{k}", v)
            for key, value in layer.items():
                try:
                    cfg.set(key, value)
                except ConfigError as exc:
                    problems.extend(exc.problems)
        if problems:
            # report value problems of the keys that did apply in the same pass
            raise ConfigError(problems + [p for p in cfg.problems() if p not in problems])
        return cfg

    def set(self, key: str, value: Any) -> None:
        if key in TOP_LEVEL:
            setattr(self, key, _coerce(key, getattr(self, key), value))
            return
        section, _, name = key.partition(".")
        target = getattr(self, section, None) if section in SECTIONS else None
        if target is None or name not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"{key}: unknown configuration key")
        setattr(target, name, _coerce(key, getattr(target, name), value))

    def copy(self) -> "ExperimentConfig":
        return ExperimentConfig.from_flat([self.to_flat()])

    # ----------------------------------------------------------- validation

    def problems(self, dims: Optional[tuple] = None) -> list[str]:
        """Every configuration problem; ``dims`` are the data's (image, text, tabular) widths.

        For synthetic data the widths come from ``synth``; for a manifest the
        dimension check needs ``dims`` from the loaded data.
        """
        out = []
        for name in SECTIONS:
            section = getattr(self, name)
            if name == "split" and section.kind != "holdout":
                out.append("split.kind: set through the command (folds / loho), keep 'holdout'")
                continue
            if name == "synth" and self.data is not None:
                continue
            out.extend(section.problems())
        if not self.seeds:
            out.append("seeds: need at least one seed")
        if any(isinstance(s, bool) or not isinstance(s, int) for s in self.seeds):
            out.append("seeds: must be integers")
        if self.folds == 1 or self.folds < 0:
            out.append("folds: use 0 for a holdout split or k >= 2")
        if self.jobs < 1:
            out.append("jobs: must be >= 1")
        if dims is None and self.data is None:
            dims = (self.synth.d_img, self.synth.d_txt, self.synth.d_tab)
        if dims is not None:
            expected = (self.model.d_img_in, self.model.d_txt_in, self.model.d_tab)
            names = ("model.d_img_in", "model.d_txt_in", "model.d_tab")
            for n, e, g in zip(names, expected, dims):
                if e != g:
                    out.append(f"{n}: model expects {e} but the data has {g}")
        return out

    def settings(self, seed: Optional[int] = None) -> RunSettings:
        tcfg = TrainConfig(**asdict(self.train))
        if seed is not None:
            tcfg.seed = int(seed)
        return RunSettings(
            model=VdafmConfig(**asdict(self.model)),
            loss=LossWeights(**asdict(self.loss)),
            train=tcfg,
            augment=AugmentConfig(**asdict(self.augment)),
            ablation=Ablation(**asdict(self.ablation)),
        )


def _parse_scalar(value: Any) -> Any:
    if not isinstance(value, str):
        return value
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _coerce(key: str, current: Any, value: Any) -> Any:
    """Convert ``value`` (possibly a CLI string) to the type of ``current``."""
    raw = value
    value = _parse_scalar(value)
    bad = ConfigError(f"{key}: cannot use {raw!r} here (expected {type(current).__name__})")
    if current is None:
        # optional string fields
        if value is None or isinstance(value, str):
            return value
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return str(raw)
        raise bad
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        raise bad
    if isinstance(current, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise bad
    if isinstance(current, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise bad
    if isinstance(current, str):
        return str(raw) if not isinstance(raw, str) else raw
    if isinstance(current, list):
        if isinstance(value, str):
            value = [_parse_scalar(v.strip()) for v in value.split(",") if v.strip()]
        elif isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, list):
            raise bad
        if key == "seeds" and any(isinstance(v, bool) or not isinstance(v, int) for v in value):
            raise ConfigError(f"seeds: expected integers, got {raw!r}")
        return value
    if isinstance(current, dict):
        if not isinstance(value, dict):
            raise bad
        return value
    raise bad


def load_config_file(path: str | Path) -> dict:
    """Read a JSON config; nested objects are flattened to dotted keys."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config: {path} must hold a JSON object")
    flat = {}
    for key, value in raw.items():
        if key in SECTIONS and isinstance(value, dict):
            for k, v in value.items():
                flat[f"{key}.{k}"] = v
        else:
            flat[key] = value
    if isinstance(flat.get("data"), str):
        # manifest paths in a config file are relative to the file
        flat["data"] = str((Path(path).parent / flat["data"]).resolve())
    return flat


# ------------------------------------------------------------------ data


def load_data(cfg: ExperimentConfig) -> Dataset:
    if cfg.data is not None:
        return load_dataset(cfg.data)
    return generate(cfg.synth)


def prepare(cfg: ExperimentConfig) -> Dataset:
    """Validate ``cfg`` (all problems at once) and load its dataset."""
    problems = cfg.problems()
    if problems:
        raise ConfigError(problems)
    ds = load_data(cfg)
    if cfg.data is not None:
        problems = cfg.problems(dims=ds.dims)
        if problems:
            raise ConfigError(problems)
    return ds


# ------------------------------------------------------------- run jobs


@dataclass
class RunJob:
    """One training run; self-contained so it can be shipped to a worker."""

    tag: str
    ds: Dataset
    split: Split
    settings: RunSettings
    out_dir: Optional[str]
    save_checkpoint: bool
    config_echo: dict
    audit_site: Optional[str] = None


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])


def execute_run(job: RunJob) -> dict:
    """Train, write the run's files, return a JSON-ready summary."""
    ds = job.ds
    seen_sites: set = set()
    n_batches = [0]
    site_of = dict(zip(ds.ids, ds.sites))

    def audit(ids):
        n_batches[0] += 1
        seen_sites.update(site_of[i.split("#smote")[0]] for i in ids)

    res = train(ds, job.split, job.settings, on_batch=audit if job.audit_site else None)
    rep = res.report
    summary = {
        "tag": job.tag,
        "seed": job.settings.train.seed,
        "best_epoch": rep.best_epoch,
        "stop_epoch": rep.stop_epoch,
        "best_val_auc": rep.best_val_auc,
        "restored": rep.restored,
        "n_train": rep.n_train,
        "n_train_balanced": rep.n_train_balanced,
        "val": rep.val,
        "test": rep.test,
        "alignment": rep.alignment,
    }
    if job.audit_site is not None:
        test_ids = {ds.ids[i] for i in job.split.test}
        fit_ids = {ds.ids[i] for i in job.split.train + job.split.val}
        summary["audit"] = {
            "held_out_site": job.audit_site,
            "batches": n_batches[0],
            "site_in_training_batches": job.audit_site in seen_sites,
            "id_overlap": len(test_ids & fit_ids),
            "passed": job.audit_site not in seen_sites and not (test_ids & fit_ids),
        }
    if job.out_dir is not None:
        out = Path(job.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "epochs.csv", EPOCH_COLUMNS, rep.epochs)
        summary["epochs_csv"] = "epochs.csv"
        if job.save_checkpoint:
            meta = {
                "experiment": {k: v for k, v in job.config_echo.items() if k not in RUNTIME_KEYS},
                "seed": job.settings.train.seed,
                "ablation": asdict(job.settings.ablation),
                "test_ids": [ds.ids[i] for i in job.split.test],
                "best_epoch": rep.best_epoch,
                "restored": rep.restored,
            }
            save_checkpoint(out / CHECKPOINT_NAME, res.params, job.settings.model, meta)
            summary["checkpoint"] = CHECKPOINT_NAME
    return summary


def run_jobs(jobs: Sequence[RunJob], n_workers: int = 1,
             fn: Callable[[RunJob], dict] = execute_run) -> list[dict]:
    """Run jobs in order, or concurrently on up to ``n_workers`` processes.

    Results come back in submission order either way.
    """
    if n_workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(n_workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def _splits_for(cfg: ExperimentConfig, ds: Dataset) -> list[tuple[str, Split]]:
    if cfg.folds >= 2:
        folds = make_splits(ds, SplitSpec(**{**asdict(cfg.split), "kind": "kfold", "folds": cfg.folds}))
        return [(f"fold{f}", s) for f, s in enumerate(folds)]
    return [("", make_splits(ds, cfg.split))]


def _tag(prefix: str, seed: int) -> str:
    return f"{prefix}_seed{seed}" if prefix else f"seed{seed}"


def _summarise(runs: Sequence[dict]) -> dict:
    out = {"val": aggregate([r["val"] for r in runs])}
    tests = [r["test"] for r in runs if r.get("test")]
    if tests:
        out["test"] = aggregate(tests)
    aligned = [r["alignment"] for r in runs if r.get("alignment")]
    if aligned:
        out["alignment"] = aggregate(aligned, keys=("pre_transformer_deg", "post_transformer_deg"))
    return out


def write_report(out: Path, command: str, cfg: ExperimentConfig, body: dict) -> Path:
    report = {
        "command": command,
        "config": cfg.to_flat(),
        "generated_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        **body,
    }
    path = out / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def _metric_columns(prefixes=("val", "test")) -> list[str]:
    return [f"{p}_{k}_{s}" for p in prefixes for k in METRIC_KEYS for s in ("mean", "std")]


def _metric_row(summary: dict) -> dict:
    row = {}
    for part in ("val", "test"):
        for k, stats in summary.get(part, {}).items():
            row[f"{part}_{k}_mean"] = stats["mean"] if stats["n"] else None
            row[f"{part}_{k}_std"] = stats["std"] if stats["n"] else None
    return row


# --------------------------------------------------------------- drivers


def run_train(cfg: ExperimentConfig, ds: Optional[Dataset] = None) -> dict:
    """Holdout or k-fold training over every seed; writes report, epochs, checkpoints."""
    ds = prepare(cfg) if ds is None else ds
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.to_flat()
    plan = [(prefix, split, seed) for prefix, split in _splits_for(cfg, ds) for seed in cfg.seeds]
    single = len(plan) == 1
    jobs = [
        RunJob(
            tag=_tag(prefix, seed),
            ds=ds,
            split=split,
            settings=cfg.settings(seed),
            out_dir=str(out if single else out / "runs" / _tag(prefix, seed)),
            save_checkpoint=True,
            config_echo=echo,
        )
        for prefix, split, seed in plan
    ]
    runs = run_jobs(jobs, cfg.jobs)
    for job, run in zip(jobs, runs):
        rel = Path(job.out_dir).relative_to(out)
        for key in ("epochs_csv", "checkpoint"):
            if key in run:
                run[key] = str(rel / run[key]) if str(rel) != "." else run[key]
    body = {
        "mode": "kfold" if cfg.folds >= 2 else "holdout",
        "runs": runs,
        "aggregate": _summarise(runs),
        "restored": "best validation-AUC epoch",
    }
    write_report(out, "train", cfg, body)
    return body


def modality_combinations() -> list[tuple[str, tuple]]:
    """The seven non-empty modality subsets, largest first."""
    combos = []
    for r in (3, 2, 1):
        for keep in itertools.combinations(MODALITIES, r):
            combos.append(("+".join(keep), keep))
    return combos


LOSS_COMBINATIONS = (
    ("cls", False, False),
    ("cls+align", True, False),
    ("cls+cl", False, True),
    ("cls+align+cl", True, True),
)
ABLATION_COLUMNS = ["group", "name", *MODALITIES, "l_cls", "l_align", "l_cl", "n_runs",
                    *_metric_columns()]


def ablation_variants(cfg: ExperimentConfig) -> list[dict]:
    rows = []
    for name, keep in modality_combinations():
        rows.append({"group": "modality", "name": name, "keep": keep,
                     "l_align": cfg.ablation.use_l_align, "l_cl": cfg.ablation.use_l_cl})
    for name, use_align, use_cl in LOSS_COMBINATIONS:
        rows.append({"group": "loss", "name": name, "keep": MODALITIES,
                     "l_align": use_align, "l_cl": use_cl})
    return rows


def _variant_config(cfg: ExperimentConfig, keep, use_align: bool, use_cl: bool) -> ExperimentConfig:
    v = cfg.copy()
    v.ablation = Ablation(modalities_zeroed=[m for m in MODALITIES if m not in keep],
                          use_l_align=use_align, use_l_cl=use_cl)
    return v


def _plan_runs(cfg: ExperimentConfig, ds: Dataset, out: Path, label: str) -> list[RunJob]:
    echo = cfg.to_flat()
    return [
        RunJob(tag=_tag(prefix, seed), ds=ds, split=split, settings=cfg.settings(seed),
               out_dir=str(out / label / _tag(prefix, seed)), save_checkpoint=False,
               config_echo=echo)
        for prefix, split in _splits_for(cfg, ds) for seed in cfg.seeds
    ]


def _run_variants(cfg: ExperimentConfig, ds: Dataset, variants: list[tuple[str, ExperimentConfig]],
                  out: Path) -> dict[str, list[dict]]:
    """Run each labelled variant once per (split, seed); identical variants share runs."""
    unique: dict[str, tuple[str, ExperimentConfig]] = {}
    alias = {}
    for label, vcfg in variants:
        key = json.dumps(vcfg.to_flat(), sort_keys=True, default=str)
        unique.setdefault(key, (label, vcfg))
        alias[label] = unique[key][0]
    jobs, owners = [], []
    for label, vcfg in unique.values():
        planned = _plan_runs(vcfg, ds, out / "runs", label)
        jobs.extend(planned)
        owners.extend([label] * len(planned))
    results = run_jobs(jobs, cfg.jobs)
    grouped: dict[str, list[dict]] = {}
    for owner, res in zip(owners, results):
        grouped.setdefault(owner, []).append(res)
    return {label: grouped[alias[label]] for label, _ in variants}


def run_ablate(cfg: ExperimentConfig, ds: Optional[Dataset] = None) -> list[dict]:
    """Seven modality subsets and four loss combinations; one CSV row each."""
    ds = prepare(cfg) if ds is None else ds
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    specs = ablation_variants(cfg)
    variants = [(f"{s['group']}-{s['name']}", _variant_config(cfg, s["keep"], s["l_align"], s["l_cl"]))
                for s in specs]
    results = _run_variants(cfg, ds, variants, out)
    rows = []
    for spec, (label, _) in zip(specs, variants):
        runs = results[label]
        row = {"group": spec["group"], "name": spec["name"], "l_cls": True,
               "l_align": spec["l_align"], "l_cl": spec["l_cl"], "n_runs": len(runs),
               **{m: m in spec["keep"] for m in MODALITIES}}
        row.update(_metric_row(_summarise(runs)))
        rows.append(row)
    write_csv(out / "ablation.csv", ABLATION_COLUMNS, rows)
    write_report(out, "ablate", cfg, {"rows": rows, "runs": {k: v for k, v in results.items()}})
    return rows


def sweep_grid(cfg: ExperimentConfig) -> list[dict]:
    """Cartesian product of the sweep spec, in the spec's key order."""
    if not cfg.sweep:
        raise ConfigError("sweep: empty sweep specification")
    problems = []
    probe = cfg.copy()
    for key, values in cfg.sweep.items():
        if key in TOP_LEVEL:
            problems.append(f"sweep: {key} cannot be swept")
            continue
        if not isinstance(values, list) or not values:
            problems.append(f"sweep: {key} needs a non-empty list of values")
            continue
        for v in values:
            try:
                probe.set(key, v)
            except ConfigError as exc:
                problems.extend(f"sweep: {p}" for p in exc.problems)
    if problems:
        raise ConfigError(problems)
    keys = list(cfg.sweep)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(cfg.sweep[k] for k in keys))]


def run_grid(cfg: ExperimentConfig, ds: Optional[Dataset] = None) -> list[dict]:
    """Every sweep point; rows carry aggregate metrics and a best flag (val AUC)."""
    points = sweep_grid(cfg)
    variants, problems = [], []
    for i, point in enumerate(points):
        v = cfg.copy()
        v.sweep = {}
        for key, value in point.items():
            v.set(key, value)
        for p in v.problems():
            problems.append(f"grid point {point}: {p}")
        variants.append((f"point{i:03d}", v))
    if problems:
        raise ConfigError(problems)
    ds = prepare(cfg) if ds is None else ds
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    results = _run_variants(cfg, ds, variants, out)
    rows = []
    for (label, _), point in zip(variants, points):
        runs = results[label]
        rows.append({"point": label, **point, "n_runs": len(runs), **_metric_row(_summarise(runs))})
    aucs = [r.get("val_auc_mean") for r in rows]
    valid = [a for a in aucs if a is not None]
    best = aucs.index(max(valid)) if valid else None
    for i, r in enumerate(rows):
        r["best"] = i == best
    columns = ["point", *points[0].keys(), "n_runs", *_metric_columns(), "best"]
    write_csv(out / "grid.csv", columns, rows)
    write_report(out, "grid", cfg, {"rows": rows, "selection": "validation AUC mean"})
    return rows


LOHO_COLUMNS = ["site", "n_test", "n_test_pos", "n_runs", "audit_passed",
                *[f"test_{k}_{s}" for k in METRIC_KEYS for s in ("mean", "std")],
                "val_auc_mean", "val_auc_std"]


def run_loho(cfg: ExperimentConfig, ds: Optional[Dataset] = None) -> list[dict]:
    """Leave-one-site-out: one model per held-out site, with a leakage audit."""
    ds = prepare(cfg) if ds is None else ds
    sites = sorted(set(ds.sites))
    if len(sites) < 2:
        raise SingleSite(f"leave-one-site-out needs at least 2 sites, found {sites}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.to_flat()
    jobs, owners = [], []
    for site in sites:
        split = make_splits(ds, SplitSpec(**{**asdict(cfg.split), "kind": "loho", "held_out_site": site}))
        for seed in cfg.seeds:
            jobs.append(RunJob(tag=_tag(site, seed), ds=ds, split=split, settings=cfg.settings(seed),
                               out_dir=str(out / "runs" / _tag(site, seed)), save_checkpoint=False,
                               config_echo=echo, audit_site=site))
            owners.append((site, split))
    results = run_jobs(jobs, cfg.jobs)
    rows = []
    for site in sites:
        runs = [r for (s, _), r in zip(owners, results) if s == site]
        split = next(sp for s, sp in owners if s == site)
        summary = _summarise(runs)
        row = {"site": site, "n_test": len(split.test),
               "n_test_pos": int(ds.labels[split.test].sum()), "n_runs": len(runs),
               "audit_passed": all(r["audit"]["passed"] for r in runs)}
        row.update({k: v for k, v in _metric_row(summary).items() if k in LOHO_COLUMNS})
        rows.append(row)
    write_csv(out / "loho.csv", LOHO_COLUMNS, rows)
    write_report(out, "loho", cfg, {"rows": rows, "runs": results})
    return rows


def run_eval(checkpoint: str | Path, data: Optional[str] = None) -> dict:
    """Test metrics and alignment angles of a saved model; parameters are untouched.

    The dataset defaults to the one recorded in the checkpoint's config echo
    and the rows to its recorded test ids (all rows if none were recorded).
    """
    params, mcfg, header = load_checkpoint(checkpoint)
    echo = header.get("experiment") or {}
    if data is not None:
        ds = load_dataset(data)
    else:
        cfg = ExperimentConfig.from_flat([{k: v for k, v in echo.items()
                                           if k.split(".")[0] in ("data", "synth")}])
        ds = load_data(cfg)
    check_data_dims(mcfg, ds.dims)
    wanted = header.get("test_ids") or list(ds.ids)
    index = {sid: i for i, sid in enumerate(ds.ids)}
    missing = [sid for sid in wanted if sid not in index]
    if missing:
        raise MissingId(f"{len(missing)} checkpoint test ids absent from the data, e.g. {missing[:3]}")
    idx = [index[sid] for sid in wanted]
    zeroed = (header.get("ablation") or {}).get("modalities_zeroed") or []
    batch = (ds.image[idx], ds.text[idx], ds.tabular[idx])
    if zeroed:
        batch = ablate_modality(batch, zeroed)
    result = {
        "checkpoint": str(checkpoint),
        "n": len(idx),
        "test": evaluate(predict(params, mcfg, batch), ds.labels[idx]),
        "alignment": probe_alignment(params, mcfg, batch),
    }
    return result

