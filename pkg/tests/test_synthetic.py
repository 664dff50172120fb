from __future__ import annotations

import numpy as np
import pytest

from vdafm.data import load_dataset
from vdafm.errors import ConfigError
from vdafm.metrics import roc_auc
from vdafm.synthetic import SynthConfig, export, generate, latent_blocks


def test_positive_rate_calibrated():
    ds = generate(SynthConfig())
    assert len(ds) == 729
    assert 0.3086 * 729 <= ds.labels.sum() <= 0.3286 * 729
    assert ds.dims == (2048, 3072, 16)
    assert len(set(ds.sites)) == 4


def test_noiseless_modalities_determine_the_label_logit():
    cfg = SynthConfig(n=400, d_img=40, d_txt=50, noise_img=0, noise_txt=0, noise_tab=0)
    ds, truth = generate(cfg, return_truth=True)
    assert roc_auc(truth.logit, ds.labels) > 0.9
    for x in (ds.image, ds.text, ds.tabular):
        # each noiseless view is an injective linear map of z, so the
        # least-squares read-out recovers the oracle logit
        coef, *_ = np.linalg.lstsq(np.c_[x, np.ones(len(x))], truth.logit, rcond=None)
        recovered = np.c_[x, np.ones(len(x))] @ coef
        np.testing.assert_allclose(recovered, truth.logit, atol=1e-3)
        assert roc_auc(recovered, ds.labels) == pytest.approx(roc_auc(truth.logit, ds.labels), abs=1e-3)


def test_same_seed_identical_files(tmp_path):
    cfg = SynthConfig(n=30, d_img=8, d_txt=9, d_tab=10)
    export(generate(cfg), tmp_path / "a")
    export(generate(cfg), tmp_path / "b")
    for name in ("image.emb", "text.emb", "tabular.csv", "ids.txt", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_export_round_trip(tmp_path):
    ds = generate(SynthConfig(n=3, d_img=8, d_txt=9, d_tab=10, pos_rate=0.5))
    manifest = export(ds, tmp_path)
    assert (tmp_path / "image.emb").read_bytes()[4:8] == (3).to_bytes(4, "little")
    import json

    assert all(not str(v).startswith("/") for v in json.loads(manifest.read_text()).values())
    back = load_dataset(manifest)
    for name in ("image", "text", "tabular"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ds, name))
    assert back.labels.tolist() == ds.labels.tolist() and back.sites == ds.sites


def test_invalid_config():
    with pytest.raises(ConfigError) as err:
        generate(SynthConfig(n=0, pos_rate=1.5, sites=[["a", 0.5]]))
    assert len(err.value.problems) == 3
    with pytest.raises(ConfigError, match="d_img"):
        generate(SynthConfig(d_img=4))


def test_latent_blocks_partition():
    for L in range(3, 12):
        blocks = latent_blocks(L)
        assert sorted(np.concatenate(blocks).tolist()) == list(range(L))
        assert all(len(b) for b in blocks)
