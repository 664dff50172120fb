from __future__ import annotations

import numpy as np
import pytest

from vdafm.model import VdafmConfig
from vdafm.synthetic import SynthConfig, generate

TINY_SYNTH = dict(n=120, d_img=24, d_txt=32, d_tab=12)
TINY_MODEL = dict(d_img_in=24, d_txt_in=32, d_tab=12, d_hidden=16, d_model=8,
                  n_heads=2, d_fuse=8, d_cls_hidden=8)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_ds():
    return generate(SynthConfig(**TINY_SYNTH))


@pytest.fixture
def tiny_model_cfg():
    return VdafmConfig(**TINY_MODEL)


def tiny_experiment_layer(out, **extra) -> dict:
    """Flat override layer for a fast desk-scale experiment."""
    layer = {f"synth.{k}": v for k, v in TINY_SYNTH.items()}
    layer.update({f"model.{k}": v for k, v in TINY_MODEL.items()})
    layer.update({"train.max_epochs": 4, "train.warmup_epochs": 1, "train.patience": 3,
                  "out": str(out)})
    layer.update(extra)
    return layer


# criterion number -> (passed, one-line detail), filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
