import json

import numpy as np
import pytest

from mpcnet.cli import main
from mpcnet.config import ConfigError, RunConfig
from mpcnet.pointcloud import load_cloud

SCENE = {"classes": [{"name": "a", "point_count": 300, "object_scale": 1.0,
                      "spectral_signature": [0.2, 0.3, 0.4]},
                     {"name": "b", "point_count": 300, "object_scale": 2.0,
                      "spectral_signature": [0.7, 0.6, 0.5]}],
         "label_rate": 1.0, "noise_sigma": 0.05, "extent": 10.0, "seed": 1}


def tiny_config(**overrides):
    cfg = {"scene": SCENE,
           "sampling": {"k": 64, "cell_size": 2.0, "train_ratio": 0.2, "seed": 0},
           "network": {"base_channels": 2, "head_hidden": 4},
           "loss": {"lambda": 1.0},
           "train": {"epochs": 2, "learning_rate": 0.5, "seed": 0}}
    cfg.update(overrides)
    return cfg


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(tiny_config()))
    return path


def test_gen_writes_loadable_cloud(tmp_path):
    spec = tmp_path / "scene.json"
    spec.write_text(json.dumps(SCENE))
    for fmt in ("csv", "bin"):
        out = tmp_path / f"cloud.{fmt}"
        assert main(["gen", str(spec), "--out", str(out), "--format", fmt]) == 0
        cloud = load_cloud(out, fmt)
        assert cloud.n_points == 600 and cloud.n_classes == 2


def test_sample_manifest_for_both_strategies(tmp_path):
    spec = tmp_path / "scene.json"
    spec.write_text(json.dumps(SCENE))
    cloud = tmp_path / "cloud.bin"
    main(["gen", str(spec), "--out", str(cloud)])
    for strategy in ("gbs", "rs"):
        out = tmp_path / f"{strategy}.json"
        samples = tmp_path / f"{strategy}_samples.json"
        code = main(["sample", str(cloud), "--out", str(out), "--samples", str(samples),
                     "--cell-size", "2.0", "--train-ratio", "0.2", "--k", "64", "--seed", "3",
                     "--strategy", strategy, "--n-samples", "4"])
        assert code == 0
        manifest = json.loads(out.read_text())
        assert manifest["strategy"] == strategy and manifest["k"] == 64
        assert "train" in json.loads(samples.read_text())


def test_train_then_eval_reproduces_report(tmp_path, config_file):
    run = tmp_path / "run"
    assert main(["train", "--config", str(config_file), "--out", str(run)]) == 0
    for name in ("params.npz", "run_log.json", "report.json", "report.csv"):
        assert (run / name).exists()
    log = json.loads((run / "run_log.json").read_text())
    assert len(log["epochs"]) == 2
    again = tmp_path / "again"
    assert main(["eval", "--config", str(config_file), "--params", str(run / "params.npz"),
                 "--out", str(again), "--shards", "3"]) == 0
    first = json.loads((run / "report.json").read_text())
    second = json.loads((again / "report.json").read_text())
    np.testing.assert_equal(first, second)


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--seeds", "0"]) == 0
    assert "6/6 gradient checks passed" in capsys.readouterr().out
    assert main(["gradcheck", "--seeds", "0", "--tol", "0"]) == 1


def test_ablate_and_compare_sampling_write_reports(tmp_path, config_file):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(config_file), "--out", str(out), "--single-seed",
                 "--configs", "baseline", "full"]) == 0
    table = json.loads((out / "ablation.json").read_text())
    assert set(table["runs"]) == {"baseline", "full"}
    assert (out / "ablation.csv").read_text().startswith("config,")
    assert main(["ablate", "--config", str(config_file), "--out", str(out), "--single-seed",
                 "--sweep", "lambda=0.5,1.0"]) == 0
    assert (out / "sweep_lambda.csv").exists()
    assert main(["compare-sampling", "--config", str(config_file), "--out", str(out),
                 "--single-seed"]) == 0
    rows = (out / "sampling_comparison.csv").read_text().splitlines()
    assert rows[0] == "metric,RS,GBS" and [r.split(",")[0] for r in rows[1:]] == \
        ["oa", "aa", "kappa", "miou", "time"]


def test_config_errors_exit_with_code_two(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(tiny_config(train={"epochz": 3})))
    assert main(["train", "--config", str(bad)]) == 2
    assert "epochz" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["ablate", "--config", str(bad), "--sweep", "depth=1,2"]) == 2


def test_run_config_validation():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"scenery": {}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict(tiny_config(sampling={"strategy": "fps"}))
    with pytest.raises(ConfigError):
        RunConfig.from_dict(tiny_config(loss={"class_weighting": "maybe"}))
    cfg = RunConfig.from_dict(tiny_config(loss={"class_weighting": "off", "lambda": 0.5}))
    tc = cfg.train_config()
    assert tc.class_weighting is False and tc.lam == 0.5
    assert cfg.net_config(2, 3).receptive_field == 64
