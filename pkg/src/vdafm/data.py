"""Samples, datasets, ingestion and split generation."""

from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .embio import read_emb, write_emb
from .errors import (
    AllMissing,
    ConfigError,
    DataError,
    DimMismatch,
    InsufficientClassSamples,
    MissingId,
)

MISSING_MARKERS = ("", "NA")
NIHSS_GOOD_OUTCOME_BELOW = 7


@dataclass
class TriModalSample:
    id: str
    image_emb: np.ndarray
    text_emb: np.ndarray
    tabular: np.ndarray
    label: int
    site: str = "default"
    nihss: Optional[int] = None


@dataclass
class Dataset:
    """Column-major view of an ordered list of samples.

    Rows of ``image``, ``text`` and ``tabular`` are aligned with ``ids``.
    """

    ids: list[str]
    image: np.ndarray
    text: np.ndarray
    tabular: np.ndarray
    labels: np.ndarray
    sites: list[str]
    nihss: Optional[list[Optional[int]]] = None
    tabular_names: Optional[list[str]] = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.text = np.asarray(self.text, dtype=np.float64)
        self.tabular = np.asarray(self.tabular, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.ids)
        for name in ("image", "text", "tabular"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise DimMismatch(f"{name} has shape {arr.shape}, expected {n} rows")
        if self.labels.shape != (n,) or len(self.sites) != n:
            raise DimMismatch("labels/sites length does not match ids")
        if len(set(self.ids)) != n:
            dupes = [k for k, c in Counter(self.ids).items() if c > 1]
            raise DataError(f"duplicate ids: {dupes[:5]}")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        if self.tabular_names is None:
            self.tabular_names = [f"f{j}" for j in range(self.tabular.shape[1])]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.image.shape[1], self.text.shape[1], self.tabular.shape[1]

    def sample(self, i: int) -> TriModalSample:
        return TriModalSample(
            id=self.ids[i],
            image_emb=self.image[i],
            text_emb=self.text[i],
            tabular=self.tabular[i],
            label=int(self.labels[i]),
            site=self.sites[i],
            nihss=None if self.nihss is None else self.nihss[i],
        )

    @property
    def samples(self) -> list[TriModalSample]:
        return [self.sample(i) for i in range(len(self))]

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            ids=[self.ids[i] for i in idx],
            image=self.image[idx],
            text=self.text[idx],
            tabular=self.tabular[idx],
            labels=self.labels[idx],
            sites=[self.sites[i] for i in idx],
            nihss=None if self.nihss is None else [self.nihss[i] for i in idx],
            tabular_names=list(self.tabular_names),
        )

    @classmethod
    def from_samples(cls, samples: Iterable[TriModalSample]) -> "Dataset":
        samples = list(samples)
        if not samples:
            raise DataError("empty sample list")
        dims = {(len(s.image_emb), len(s.text_emb), len(s.tabular)) for s in samples}
        if len(dims) != 1:
            raise DimMismatch(f"samples disagree on dims: {sorted(dims)}")
        has_nihss = any(s.nihss is not None for s in samples)
        return cls(
            ids=[s.id for s in samples],
            image=np.stack([s.image_emb for s in samples]),
            text=np.stack([s.text_emb for s in samples]),
            tabular=np.stack([s.tabular for s in samples]),
            labels=np.array([s.label for s in samples]),
            sites=[s.site for s in samples],
            nihss=[s.nihss for s in samples] if has_nihss else None,
        )


def label_from_nihss(nihss: int) -> int:
    """NIHSS below 7 is a good prognosis (label 1), otherwise poor (label 0)."""
    if nihss < 0:
        raise ValueError(f"NIHSS must be non-negative, got {nihss}")
    return 1 if nihss < NIHSS_GOOD_OUTCOME_BELOW else 0


def _is_missing(v) -> bool:
    if v is None:
        return True
    if isinstance(v, str):
        return v.strip() in MISSING_MARKERS
    try:
        return math.isnan(v)
    except TypeError:
        return False


def impute_mode(column: Sequence) -> list:
    """Replace missing entries (None, NaN, "" or "NA") by the column mode.

    Ties between equally frequent values go to the one seen first.
    """
    observed = [v for v in column if not _is_missing(v)]
    if not observed:
        raise AllMissing("column has no observed values")
    counts = Counter(observed)
    top = max(counts.values())
    mode = next(v for v in observed if counts[v] == top)
    return [mode if _is_missing(v) else v for v in column]


_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def _term_pattern(terms: Iterable[str]) -> Optional[re.Pattern]:
    terms = [t for t in terms if t]
    if not terms:
        return None
    alt = "|".join(re.escape(t) for t in sorted(terms, key=len, reverse=True))
    return re.compile(rf"(?<!\w)(?:{alt})(?!\w)", re.IGNORECASE)


def filter_report(text: str, whitelist: Iterable[str] = (), blacklist: Iterable[str] = ()) -> str:
    """Sentence-level black/white-list filter for generated report text.

    Sentences with any blacklisted term are dropped. A non-empty whitelist
    additionally keeps only sentences mentioning at least one of its terms.
    Matching is case-insensitive on whole words.
    """
    whitelist, blacklist = set(whitelist), set(blacklist)
    overlap = {t.lower() for t in whitelist} & {t.lower() for t in blacklist}
    if overlap:
        raise ValueError(f"terms on both lists: {sorted(overlap)}")
    if not whitelist and not blacklist:
        return text
    black, white = _term_pattern(blacklist), _term_pattern(whitelist)
    kept = []
    for sentence in _SENTENCE_END.split(text.strip()):
        if not sentence:
            continue
        if black is not None and black.search(sentence):
            continue
        if white is not None and not white.search(sentence):
            continue
        kept.append(sentence)
    return " ".join(kept)


# ---------------------------------------------------------------- ingestion


def _read_ids(path: Path) -> list[str]:
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def _parse_float(raw: str, where: str) -> Optional[float]:
    if _is_missing(raw):
        return None
    try:
        return float(raw)
    except ValueError:
        raise DataError(f"{where}: not a number: {raw!r}") from None


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load a dataset described by a JSON manifest.

    Paths in the manifest are resolved relative to the manifest's directory.
    Tabular missing values are mode-imputed per column.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    missing_keys = [k for k in ("ids", "image", "text", "tabular", "labels_or_nihss") if k not in manifest]
    if missing_keys:
        raise DataError(f"manifest lacks keys: {missing_keys}")
    base = manifest_path.parent
    ids = _read_ids(base / manifest["ids"])
    image = read_emb(base / manifest["image"])
    text = read_emb(base / manifest["text"])
    for name, mat in (("image", image), ("text", text)):
        if mat.shape[0] != len(ids):
            raise DimMismatch(f"{name} matrix has {mat.shape[0]} rows but {len(ids)} ids")

    label_col = manifest["labels_or_nihss"]
    site_col = manifest.get("site")
    with open(base / manifest["tabular"], newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("tabular CSV is empty") from None
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DimMismatch(f"tabular line {lineno}: {len(row)} cells, header has {len(header)}")
            rows[row[0]] = row
    if len(rows) != len(ids):
        raise DimMismatch(f"tabular CSV has {len(rows)} rows but {len(ids)} ids")
    absent = [i for i in ids if i not in rows]
    if absent:
        raise MissingId(f"ids missing from tabular CSV: {absent[:5]}")
    col = {name: j for j, name in enumerate(header)}
    if label_col not in col:
        raise DataError(f"label column {label_col!r} not in tabular header")
    if site_col is not None and site_col not in col:
        raise DataError(f"site column {site_col!r} not in tabular header")

    label_is_nihss = manifest.get("label_kind", "nihss" if label_col.lower() == "nihss" else "label") == "nihss"
    nihss_col = label_col if label_is_nihss else next((h for h in header[1:] if h.lower() == "nihss"), None)
    plain_label_col = None if label_is_nihss else label_col
    if label_is_nihss:
        plain_label_col = next((h for h in header[1:] if h.lower() == "label"), None)
    reserved = {header[0], label_col, site_col, nihss_col, plain_label_col} - {None}
    feature_cols = [h for h in header[1:] if h not in reserved]

    ordered = [rows[i] for i in ids]
    labels, nihss = [], [] if nihss_col else None
    for r in ordered:
        raw_label = r[col[plain_label_col]] if plain_label_col else ""
        label = None if _is_missing(raw_label) else int(float(raw_label))
        if nihss_col:
            raw = r[col[nihss_col]]
            if _is_missing(raw):
                if label is None:
                    raise DataError(f"sample {r[0]}: neither label nor NIHSS present")
                nihss.append(None)
            else:
                score = int(float(raw))
                derived = label_from_nihss(score)
                if label is not None and label != derived:
                    raise DataError(f"sample {r[0]}: label {label} contradicts NIHSS {score}")
                label = derived
                nihss.append(score)
        if label is None:
            raise DataError(f"sample {r[0]}: missing label")
        labels.append(label)

    columns = []
    for name in feature_cols:
        j = col[name]
        values = [_parse_float(r[j], f"column {name}") for r in ordered]
        try:
            columns.append(impute_mode(values))
        except AllMissing:
            raise AllMissing(f"tabular column {name!r} has no observed values") from None
    tabular = np.array(columns, dtype=np.float64).T if columns else np.zeros((len(ids), 0))
    sites = [r[col[site_col]] for r in ordered] if site_col else ["default"] * len(ids)
    return Dataset(
        ids=ids,
        image=image,
        text=text,
        tabular=tabular,
        labels=np.array(labels),
        sites=sites,
        nihss=nihss,
        tabular_names=feature_cols,
    )


def write_dataset(ds: Dataset, directory: str | Path) -> Path:
    """Write EMB1 matrices, id list, tabular CSV and a manifest; return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "ids.txt").write_text("".join(f"{i}\n" for i in ds.ids))
    write_emb(directory / "image.emb", ds.image)
    write_emb(directory / "text.emb", ds.text)
    header = ["id", *ds.tabular_names, "label", "site"]
    if ds.nihss is not None:
        header.append("nihss")
    with open(directory / "tabular.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, sid in enumerate(ds.ids):
            row = [sid, *(repr(float(v)) for v in ds.tabular[i]), int(ds.labels[i]), ds.sites[i]]
            if ds.nihss is not None:
                row.append("" if ds.nihss[i] is None else ds.nihss[i])
            w.writerow(row)
    manifest = {
        "ids": "ids.txt",
        "image": "image.emb",
        "text": "text.emb",
        "tabular": "tabular.csv",
        "labels_or_nihss": "label",
        "site": "site",
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ------------------------------------------------------------------- splits


@dataclass
class SplitSpec:
    kind: str = "holdout"
    test_fraction: float = 0.2
    val_fraction: float = 0.2
    folds: int = 5
    held_out_site: Optional[str] = None
    seed: int = 42

    def problems(self) -> list[str]:
        out = []
        if self.kind not in ("holdout", "kfold", "loho"):
            out.append(f"split.kind: unknown kind {self.kind!r}")
        if not 0 < self.test_fraction < 1:
            out.append("split.test_fraction: must lie in (0, 1)")
        if not 0 < self.val_fraction < 1:
            out.append("split.val_fraction: must lie in (0, 1)")
        if self.kind == "kfold" and self.folds < 2:
            out.append("split.folds: k-fold needs at least 2 folds")
        if self.kind == "loho" and not self.held_out_site:
            out.append("split.held_out_site: required for loho")
        return out


@dataclass
class Split:
    train: list[int]
    val: list[int]
    test: list[int] = field(default_factory=list)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _check_classes(labels: np.ndarray, idx: Sequence[int], name: str) -> None:
    got = set(labels[list(idx)].tolist())
    if got != {0, 1}:
        raise InsufficientClassSamples(f"{name} split would contain only labels {sorted(got)}")


def _stratified_take(pool_pos: list[int], pool_neg: list[int], size: int, pos_rate: float):
    n_pos = min(max(_round_half_up(size * pos_rate), size - len(pool_neg)), len(pool_pos))
    n_neg = size - n_pos
    return pool_pos[:n_pos] + pool_neg[:n_neg], pool_pos[n_pos:], pool_neg[n_neg:]


def _holdout(labels: np.ndarray, eligible: np.ndarray, n_test: int, val_fraction: float, rng):
    pos = [int(i) for i in rng.permutation(eligible[labels[eligible] == 1])]
    neg = [int(i) for i in rng.permutation(eligible[labels[eligible] == 0])]
    rate = len(pos) / len(eligible)
    test, pos, neg = _stratified_take(pos, neg, n_test, rate)
    n_val = _round_half_up(val_fraction * (len(eligible) - n_test))
    val, pos, neg = _stratified_take(pos, neg, n_val, rate)
    return sorted(pos + neg), sorted(val), sorted(test)


def make_splits(ds: Dataset, spec: SplitSpec) -> Split | list[Split]:
    """Stratified holdout / k-fold / leave-one-site-out index splits.

    Holdout and LOHO return one ``Split``; k-fold returns one ``Split`` per
    fold with the fold as ``val`` and an empty ``test``.
    """
    problems = spec.problems()
    if problems:
        raise ConfigError(problems)
    n = len(ds)
    if n == 0:
        raise DataError("empty dataset")
    labels = ds.labels
    rng = np.random.default_rng(spec.seed)

    if spec.kind == "holdout":
        n_test = _round_half_up(spec.test_fraction * n)
        train, val, test = _holdout(labels, np.arange(n), n_test, spec.val_fraction, rng)
        for name, idx in (("train", train), ("val", val), ("test", test)):
            _check_classes(labels, idx, name)
        return Split(train, val, test)

    if spec.kind == "loho":
        site_arr = np.array(ds.sites)
        if spec.held_out_site not in set(ds.sites):
            raise DataError(f"site {spec.held_out_site!r} not present in dataset")
        test = np.flatnonzero(site_arr == spec.held_out_site)
        rest = np.flatnonzero(site_arr != spec.held_out_site)
        if len(rest) == 0:
            raise DataError("no samples left outside the held-out site")
        train, val, _ = _holdout(labels, rest, 0, spec.val_fraction, rng)
        for name, idx in (("train", train), ("val", val), ("test", test)):
            _check_classes(labels, idx, name)
        return Split(train, val, sorted(int(i) for i in test))

    k = spec.folds
    if k > n:
        raise InsufficientClassSamples(f"{k} folds requested for {n} samples")
    pos = rng.permutation(np.flatnonzero(labels == 1))
    neg = rng.permutation(np.flatnonzero(labels == 0))
    # positives dealt round-robin first, negatives continue the same deal
    order = np.concatenate([pos, neg])
    assignment = np.arange(n) % k
    folds = []
    for f in range(k):
        val = sorted(int(i) for i in order[assignment == f])
        train = sorted(int(i) for i in order[assignment != f])
        _check_classes(labels, val, f"fold {f} val")
        _check_classes(labels, train, f"fold {f} train")
        folds.append(Split(train, val, []))
    return folds
