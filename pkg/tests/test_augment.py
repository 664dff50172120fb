from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vdafm.augment import (
    AugmentConfig,
    augment_batch,
    gaussian_noise,
    mixup,
    nearest_minority_neighbors,
    smote_balance,
)
from vdafm.data import Dataset, TriModalSample
from vdafm.errors import DimMismatch, SingleClass


def make_ds(labels, seed=0, d_tab=3):
    rng = np.random.default_rng(seed)
    n = len(labels)
    return Dataset(ids=[f"p{i}" for i in range(n)], image=rng.standard_normal((n, 4)),
                   text=rng.standard_normal((n, 5)), tabular=rng.standard_normal((n, d_tab)),
                   labels=np.array(labels), sites=[f"s{i % 2}" for i in range(n)])


def brute_nearest(x, i):
    best, best_d = None, np.inf
    for j in range(len(x)):
        if j != i:
            d = float(np.sum((x[i] - x[j]) ** 2))
            if d < best_d:
                best, best_d = j, d
    return best


def test_smote_counts_example():
    out = smote_balance(make_ds([0, 0, 0, 1]), k=1, seed=0)
    assert sorted(out.labels.tolist()) == [0, 0, 0, 1, 1, 1]


def test_smote_balanced_is_unchanged():
    ds = make_ds([0, 1])
    assert smote_balance(ds, 1, 0) is ds


def test_smote_single_class():
    with pytest.raises(SingleClass):
        smote_balance(make_ds([1, 1, 1]), 1, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(8, 40))
def test_smote_copies_nearest_neighbour_record(seed, n):
    rng = np.random.default_rng(seed)
    labels = (rng.random(n) < 0.3).astype(int)
    if labels.sum() < 2 or labels.sum() == n:
        return
    ds = make_ds(labels.tolist(), seed=seed)
    out = smote_balance(ds, 1, seed)
    counts = np.bincount(out.labels, minlength=2)
    assert counts[0] == counts[1] and len(out) == 2 * counts.max()
    # originals untouched, in place
    np.testing.assert_array_equal(out.image[:n], ds.image)
    assert out.ids[:n] == ds.ids
    minority = np.flatnonzero(ds.labels == np.argmin(np.bincount(ds.labels)))
    allowed = {int(minority[brute_nearest(ds.tabular[minority], i)]) for i in range(len(minority))}
    for r in range(n, len(out)):
        src = ds.ids.index(out.ids[r].split("#smote")[0])
        assert src in allowed
        np.testing.assert_array_equal(out.image[r], ds.image[src])
        np.testing.assert_array_equal(out.text[r], ds.text[src])
        np.testing.assert_array_equal(out.tabular[r], ds.tabular[src])
        assert out.labels[r] == ds.labels[src] and out.sites[r] == ds.sites[src]


def test_nearest_neighbors_matches_brute_force():
    x = np.random.default_rng(5).standard_normal((30, 4))
    got = nearest_minority_neighbors(x, 1)[:, 0]
    assert got.tolist() == [brute_nearest(x, i) for i in range(30)]


def test_smote_is_deterministic():
    ds = make_ds([0] * 10 + [1] * 3)
    a, b = smote_balance(ds, 1, 7), smote_balance(ds, 1, 7)
    assert a.ids == b.ids
    assert a.image.tobytes() == b.image.tobytes()


def test_gaussian_noise_examples():
    rng = np.random.default_rng(0)
    x = np.arange(3.0)
    np.testing.assert_array_equal(gaussian_noise(x, 0.0, 1.0, rng), x)
    np.testing.assert_array_equal(gaussian_noise(x, 0.5, 0.0, rng), x)
    draws = np.stack([gaussian_noise(np.zeros(4), 0.01, 1.0, rng) for _ in range(10_000)])
    std = draws.std(axis=0, ddof=1)
    assert ((std >= 0.0095) & (std <= 0.0105)).all()


def test_gaussian_noise_probability():
    rng = np.random.default_rng(1)
    hits = sum(not np.array_equal(gaussian_noise(np.zeros(2), 0.01, 0.5, rng), np.zeros(2))
               for _ in range(4000))
    assert abs(hits / 4000 - 0.5) < 0.03


def sample(img, txt, tab, label):
    return TriModalSample("x", np.asarray(img, float), np.asarray(txt, float), np.asarray(tab, float), label)


def test_mixup_examples():
    a = sample([1.0, 2.0], [3.0], [0.0, 0.0], 1)
    b = sample([5.0, 6.0], [7.0], [2.0, 2.0], 0)
    img, txt, tab, y = mixup(a, b, 1.0)
    np.testing.assert_array_equal(img, a.image_emb)
    assert y == 1
    _, _, tab, y = mixup(a, b, 0.5)
    np.testing.assert_array_equal(tab, [1.0, 1.0])
    assert y == 0.5
    img, _, _, _ = mixup(sample([4.0], [0.0], [0.0], 0), sample([0.0], [0.0], [0.0], 0), 0.25)
    assert img[0] == 1.0
    with pytest.raises(DimMismatch):
        mixup(a, sample([1.0], [3.0], [0.0, 0.0], 0), 0.5)


def test_augment_batch_mixup_stays_in_hull_and_is_deterministic():
    rng_data = np.random.default_rng(0)
    batch = tuple(rng_data.standard_normal((16, d)) for d in (4, 5, 3))
    y = (rng_data.random(16) < 0.5).astype(float)
    cfg = AugmentConfig(noise_prob=0.0, mixup_prob=1.0)
    out, y2 = augment_batch(batch, y, cfg, np.random.default_rng(3))
    for x, mixed in zip(batch, out):
        lo, hi = x.min(axis=0), x.max(axis=0)
        assert ((mixed >= lo - 1e-12) & (mixed <= hi + 1e-12)).all()
    assert ((y2 >= 0) & (y2 <= 1)).all()
    again, y3 = augment_batch(batch, y, cfg, np.random.default_rng(3))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(out, again)) and y2.tobytes() == y3.tobytes()
    # inputs are not modified
    assert not any(np.shares_memory(a, b) for a, b in zip(out, batch))


def test_augment_batch_respects_modality_toggle():
    batch = tuple(np.zeros((8, d)) for d in (2, 2, 2))
    cfg = AugmentConfig(noise_prob=1.0, noise_sigma=0.1, mixup_prob=0.0, modalities=["image"])
    out, _ = augment_batch(batch, np.zeros(8), cfg, np.random.default_rng(0))
    assert out[0].any() and not out[1].any() and not out[2].any()


def test_config_problems():
    assert AugmentConfig().problems() == []
    bad = AugmentConfig(noise_prob=2, mixup_alpha=0, smote_k=0, modalities=["audio"]).problems()
    assert len(bad) == 4
