from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from conftest import TINY_MODEL, TINY_SYNTH, tiny_experiment_layer
from vdafm import experiment as ex
from vdafm.cli import main
from vdafm.errors import ConfigError, SingleSite
from vdafm.synthetic import SynthConfig, export, generate


def write_config(path, out, **extra):
    path.write_text(json.dumps(tiny_experiment_layer(out, **extra)))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- config


def test_config_layers_and_presets():
    cfg = ex.ExperimentConfig.from_flat([{"preset": "sweep-best"}, {"loss.lambda_cl": 0.5}])
    assert cfg.loss.lambda_align == 0.2 and cfg.loss.lambda_cl == 0.5
    cfg = ex.ExperimentConfig.from_flat([{"seeds": "39,40", "train.max_epochs": "20"}])
    assert cfg.seeds == [39, 40] and cfg.train.max_epochs == 20
    flat = cfg.to_flat()
    assert list(flat) == sorted(flat)
    assert ex.ExperimentConfig.from_flat([flat]).to_flat() == flat


def test_config_problems_are_collected():
    with pytest.raises(ConfigError) as err:
        ex.ExperimentConfig.from_flat([{"model.d_tab": 5, "train.max_epochs": 0,
                                        "nope.key": 1, "folds": 1}])
    text = "\n".join(err.value.problems)
    assert "model.d_tab" in text and "train.max_epochs" in text and "nope.key" in text
    assert "folds" in text


def test_config_type_errors():
    for bad in ({"train.max_epochs": 2.5}, {"augment.smote": "yes"}, {"seeds": ["a"]}):
        with pytest.raises(ConfigError):
            ex.ExperimentConfig.from_flat([bad])


def test_nested_config_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"patience": 5}, "data": "d/manifest.json"}))
    layer = ex.load_config_file(tmp_path / "c.json")
    assert layer["train.patience"] == 5
    assert layer["data"] == str(tmp_path / "d" / "manifest.json")


# ---------------------------------------------------------------- gen


def test_gen_and_usage_errors(tmp_path, capsys):
    assert main(["gen", "--n", "40", "--synth.d_img", "8", "--synth.d_txt", "8",
                 "--out", str(tmp_path / "a")]) == 0
    assert capsys.readouterr().out.strip().endswith("manifest.json")
    assert main(["gen", "--n", "40", "--synth.d_img", "8", "--synth.d_txt", "8",
                 "--out", str(tmp_path / "b")]) == 0
    for name in ("image.emb", "text.emb", "tabular.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert main(["gen", "--n", "0", "--out", str(tmp_path / "c")]) == 2
    assert "synth.n" in capsys.readouterr().err
    assert main(["gen", "--bogus"]) == 2
    assert main(["nonsense"]) == 2
    assert main(["train", "--seeds", "x,y"]) == 2


def test_missing_manifest_is_data_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 3


def test_train_dim_mismatch_names_field(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", tmp_path / "o", **{"model.d_tab": 5})
    assert main(["train", "--config", cfg]) == 2
    assert "model.d_tab" in capsys.readouterr().err


def test_manifest_dim_mismatch(tmp_path, capsys):
    manifest = export(generate(SynthConfig(**{**TINY_SYNTH, "d_tab": 10})), tmp_path / "d")
    cfg = write_config(tmp_path / "c.json", tmp_path / "o")
    assert main(["train", "--config", cfg, "--data", str(manifest)]) == 2
    assert "model.d_tab" in capsys.readouterr().err


# ---------------------------------------------------------------- train / eval


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    cfg = write_config(root / "c.json", root / "out")
    assert main(["train", "--config", cfg]) == 0
    return root / "out"


def test_train_outputs(trained):
    report = json.loads((trained / "report.json").read_text())
    assert report["command"] == "train" and report["mode"] == "holdout"
    assert report["config"]["model.d_hidden"] == TINY_MODEL["d_hidden"]
    assert (trained / "epochs.csv").exists() and (trained / ex.CHECKPOINT_NAME).exists()
    rows = read_csv(trained / "epochs.csv")
    assert len(rows) == report["runs"][0]["stop_epoch"] + 1


def test_eval_matches_report_and_is_repeatable(trained, capsys):
    report = json.loads((trained / "report.json").read_text())
    ckpt = str(trained / ex.CHECKPOINT_NAME)
    before = (trained / ex.CHECKPOINT_NAME).read_bytes()
    assert main(["eval", "--checkpoint", ckpt]) == 0
    first = capsys.readouterr().out
    assert main(["eval", "--checkpoint", ckpt]) == 0
    assert capsys.readouterr().out == first
    result = json.loads(first)
    assert result["test"] == report["runs"][0]["test"]
    assert result["alignment"] == report["runs"][0]["alignment"]
    assert (trained / ex.CHECKPOINT_NAME).read_bytes() == before


def test_eval_dimension_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", tmp_path / "o",
                       **{"model.d_model": 256, "model.n_heads": 8, "train.max_epochs": 1,
                          "train.warmup_epochs": 0})
    assert main(["train", "--config", cfg]) == 0
    small = export(generate(SynthConfig(n=40, d_img=8, d_txt=8, d_tab=12)), tmp_path / "small")
    capsys.readouterr()
    code = main(["eval", "--checkpoint", str(tmp_path / "o" / ex.CHECKPOINT_NAME), "--data", str(small)])
    assert code == 3
    assert "d_img" in capsys.readouterr().err


def test_eval_corrupt_checkpoint(trained, tmp_path):
    blob = bytearray((trained / ex.CHECKPOINT_NAME).read_bytes())
    blob[-3] ^= 0xFF
    (tmp_path / "bad.vck").write_bytes(bytes(blob))
    assert main(["eval", "--checkpoint", str(tmp_path / "bad.vck")]) == 3


def test_multi_seed_and_jobs_are_identical(tmp_path):
    outs = []
    for jobs in (1, 2):
        out = tmp_path / f"j{jobs}"
        cfg = write_config(tmp_path / f"c{jobs}.json", out)
        assert main(["train", "--config", cfg, "--seeds", "39,40", "--jobs", str(jobs)]) == 0
        outs.append(out)
    report = json.loads((outs[0] / "report.json").read_text())
    assert report["aggregate"]["val"]["auc"]["n"] == 2
    for tag in ("seed39", "seed40"):
        for name in ("epochs.csv", ex.CHECKPOINT_NAME):
            a = (outs[0] / "runs" / tag / name).read_bytes()
            assert a == (outs[1] / "runs" / tag / name).read_bytes()


def test_kfold_mode(tmp_path):
    cfg = ex.ExperimentConfig.from_flat([tiny_experiment_layer(tmp_path, folds=3,
                                                               **{"train.max_epochs": 2})])
    body = ex.run_train(cfg)
    assert body["mode"] == "kfold" and len(body["runs"]) == 3


# ---------------------------------------------------------------- ablate / grid / loho


def test_ablate_rows_and_cross_command_consistency(tmp_path, trained):
    cfg = write_config(tmp_path / "c.json", tmp_path / "o")
    assert main(["ablate", "--config", cfg]) == 0
    rows = read_csv(tmp_path / "o" / "ablation.csv")
    assert len(rows) == 11
    assert [r["group"] for r in rows].count("modality") == 7
    text_only = next(r for r in rows if r["name"] == "text")
    assert (text_only["image"], text_only["text"], text_only["tabular"]) == ("0", "1", "0")
    report = json.loads((trained / "report.json").read_text())
    full = next(r for r in rows if r["name"] == "image+text+tabular")
    assert float(full["val_auc_mean"]) == report["runs"][0]["val"]["auc"]


def test_grid_counts_and_empty_sweep(tmp_path, capsys):
    cfg = ex.ExperimentConfig.from_flat([tiny_experiment_layer(
        tmp_path, sweep={"model.n_layers": [1, 2, 3], "model.n_heads": [1, 2, 4, 8]})])
    assert len(ex.sweep_grid(cfg)) == 12
    cfg = ex.ExperimentConfig.from_flat([tiny_experiment_layer(tmp_path / "g", **{"train.max_epochs": 2})])
    path = write_config(tmp_path / "c.json", tmp_path / "g", **{"train.max_epochs": 2})
    assert main(["grid", "--config", path, "--sweep", "model.dropout=0.3,0.5,0.7"]) == 0
    rows = read_csv(tmp_path / "g" / "grid.csv")
    assert len(rows) == 3 and sum(r["best"] == "1" for r in rows) == 1
    best = max(rows, key=lambda r: float(r["val_auc_mean"]))
    assert best["best"] == "1"
    assert main(["grid", "--config", path]) == 2
    assert main(["grid", "--config", path, "--sweep", "model.nope=1,2"]) == 2
    assert "model.nope" in capsys.readouterr().err


def test_loho_single_site(tmp_path):
    cfg = ex.ExperimentConfig.from_flat([tiny_experiment_layer(tmp_path, **{"synth.sites": [["only", 1.0]]})])
    with pytest.raises(SingleSite):
        ex.run_loho(cfg)
    path = write_config(tmp_path / "c.json", tmp_path / "o", **{"synth.sites": [["only", 1.0]]})
    assert main(["loho", "--config", path]) == 3


def test_report_timestamp_is_the_only_difference(tmp_path):
    texts = []
    for name in ("a", "b"):
        cfg = ex.ExperimentConfig.from_flat([tiny_experiment_layer(tmp_path / "x", **{"train.max_epochs": 2})])
        ex.run_train(cfg)
        report = json.loads((tmp_path / "x" / "report.json").read_text())
        report.pop("generated_at")
        texts.append(json.dumps(report, sort_keys=True))
    assert texts[0] == texts[1]
    assert np.isfinite(json.loads(texts[0])["aggregate"]["val"]["auc"]["mean"])
