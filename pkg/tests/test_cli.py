from __future__ import annotations

import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from mahalanobis_ood import fileio, synthetic
from mahalanobis_ood.cli import main
from mahalanobis_ood.gda import FeatureMatrix

SCHEMA = json.loads((Path(__file__).parents[1] / "docs" / "eval_schema.json").read_text())

QUICK = """\
seed = 7
metrics = ["tnr_at_tpr95", "auroc", "detection_accuracy", "aupr_in", "aupr_out"]

[data]
n_train = 300
n_val = 60
n_test = 60

[net]
hidden = [16, 16]
epochs = 5

[preprocess]
eps_grid = [0.0, 0.01]

[cv]
outer_folds = 2
inner_folds = 2
iterations = 100
l2_grid = [0.01]

[odin]
temperatures = [1.0, 1000.0]

[garbage]
n = 20
iterations = 20
"""


@pytest.fixture
def quick(tmp_path):
    path = tmp_path / "quick.toml"
    path.write_text(QUICK)
    return path


def _run(*argv):
    return main([str(a) for a in argv])


def test_hand_example_fit_and_score(tmp_path):
    (tmp_path / "f.csv").write_text("x,y,label\n0,0,0\n2,0,0\n0,2,1\n0,4,1\n")
    (tmp_path / "q.csv").write_text("x,y\n1,0\n0,0\n0,3\n")
    assert _run("fit", "--features", tmp_path / "f.csv", "--out", tmp_path / "m.json") == 0
    model = fileio.load_json(tmp_path / "m.json")
    np.testing.assert_allclose(model["means"], [[1, 0], [0, 3]])
    assert _run("score", "--features", tmp_path / "q.csv", "--model", tmp_path / "m.json",
                "--out", tmp_path / "s.csv") == 0
    scores, labels = fileio.read_scores(tmp_path / "s.csv")
    # tied covariance 0.5 I: (0,0) is at squared distance 1 from (1,0), i.e. 2 in Mahalanobis units
    np.testing.assert_allclose(scores, [0.0, -2.0, 0.0], rtol=1e-5, atol=1e-12)
    assert labels is None


def test_full_pipeline(tmp_path, quick):
    d = tmp_path / "data"
    assert _run("gen-data", "--config", quick, "--outdir", d) == 0
    assert _run("train-net", "--train", d / "train.mdfv", "--out", tmp_path / "net.json",
                "--hidden", "16,16", "--epochs", 5) == 0
    for split in ("train", "test", "ood_test"):
        assert _run("dump-features", "--net", tmp_path / "net.json", "--input", d / f"{split}.mdfv",
                    "--out", tmp_path / f"f_{split}.mdfv") == 0
    assert fileio.read_features(tmp_path / "f_train.mdfv").d == 16
    assert _run("fit", "--features", tmp_path / "f_train.mdfv", "--out", tmp_path / "model.json") == 0
    for split, pos in (("test", 1), ("ood_test", 0)):
        assert _run("score", "--features", tmp_path / f"f_{split}.mdfv", "--model", tmp_path / "model.json",
                    "--positive", pos, "--out", tmp_path / f"s_{split}.csv") == 0

    figs = tmp_path / "figs"
    assert _run("eval", "--pos", tmp_path / "s_test.csv", "--neg", tmp_path / "s_ood_test.csv",
                "--name", "penultimate", "--out", tmp_path / "report.json",
                "--delimited", tmp_path / "report.tsv", "--sep", "\t", "--figdir", figs) == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    jsonschema.validate(doc, SCHEMA)
    assert doc["reports"]["penultimate"]["n_pos"] == 60
    assert (tmp_path / "report.tsv").read_text().startswith("method\ttnr_at_tpr95")
    assert {p.name for p in figs.iterdir()} == {"roc.png", "pr.png", "hist_penultimate.png"}

    # combined score file path
    pos, _ = fileio.read_scores(tmp_path / "s_test.csv")
    neg, _ = fileio.read_scores(tmp_path / "s_ood_test.csv")
    fileio.write_scores(tmp_path / "both.csv", np.r_[pos, neg], np.r_[np.ones(60), np.zeros(60)])
    assert _run("eval", "--scores", tmp_path / "both.csv", "--out", tmp_path / "r2.json") == 0
    doc2 = json.loads((tmp_path / "r2.json").read_text())
    assert doc2["reports"]["detector"] == doc["reports"]["penultimate"]

    # adversarial negatives and the detector
    net = tmp_path / "net.json"
    assert _run("attack", "--net", net, "--method", "fgsm", "--input", d / "val.mdfv", "--eps", 0.5,
                "--out", tmp_path / "fgsm.mdfv") == 0
    assert _run("attack", "--net", net, "--method", "bim", "--input", d / "val.mdfv", "--eps", 0.5,
                "--iterations", 5, "--out", tmp_path / "bim.mdfv") == 0
    assert _run("attack", "--net", net, "--method", "noisy", "--input", d / "val.mdfv", "--eps", 0.5,
                "--out", tmp_path / "noisy.mdfv") == 0
    val = fileio.read_features(d / "val.mdfv").values
    assert np.max(np.abs(fileio.read_features(tmp_path / "bim.mdfv").values - val)) <= 0.5 + 1e-12
    assert _run("train-detector", "--config", quick, "--net", net, "--train", d / "train.mdfv",
                "--pos", d / "val.mdfv", tmp_path / "noisy.mdfv", "--neg", tmp_path / "fgsm.mdfv",
                "--eps-grid", "0,0.01", "--out", tmp_path / "det.json") == 0
    det = fileio.load_json(tmp_path / "det.json")
    assert det["eps"] in (0.0, 0.01) and len(det["alphas"]) == 2
    assert _run("score", "--features", d / "test.mdfv", "--detector", tmp_path / "det.json", "--net", net,
                "--out", tmp_path / "det_scores.csv") == 0
    assert fileio.read_scores(tmp_path / "det_scores.csv")[0].shape == (60,)
    assert _run("attack", "--net", net, "--method", "garbage", "--models", tmp_path / "det.json",
                "-n", 5, "--iterations", 10, "--step", 0.05, "--out", tmp_path / "garbage.mdfv") == 0
    g = fileio.read_features(tmp_path / "garbage.mdfv")
    assert g.n == 5 and np.all(g.labels == 0)


def test_incremental_commands(tmp_path):
    rng = np.random.default_rng(0)
    means = rng.normal(size=(4, 3)) * 3
    y = np.repeat(np.arange(4), 30)
    x = means[y] + rng.normal(size=(120, 3))
    fileio.write_features(tmp_path / "base.mdfv", FeatureMatrix(x[y < 3], y[y < 3]))
    fileio.write_features(tmp_path / "new.mdfv", FeatureMatrix(x[y == 3]))
    fileio.write_features(tmp_path / "new_test.mdfv", FeatureMatrix(x[y == 3], y[y == 3]))
    assert _run("fit", "--features", tmp_path / "base.mdfv", "--out", tmp_path / "m.json") == 0
    assert _run("incr-add", "--model", tmp_path / "m.json", "--features", tmp_path / "new.mdfv",
                "--out", tmp_path / "m2.json") == 0
    doc = fileio.load_json(tmp_path / "m2.json")
    assert len(doc["means"]) == 4 and doc["class_count_history"] == [3, 4]
    assert _run("incr-eval", "--model", tmp_path / "m2.json", "--base-test", tmp_path / "base.mdfv",
                "--new-test", tmp_path / "new_test.mdfv", "--num-base", 3, "--figdir", tmp_path) == 0
    assert (tmp_path / "sweep.png").stat().st_size > 0


def test_incr_eval_output(tmp_path, capsys):
    rng = np.random.default_rng(1)
    y = np.repeat(np.arange(3), 20)
    x = np.eye(3)[y] * 5 + rng.normal(size=(60, 3))
    fileio.write_features(tmp_path / "all.mdfv", FeatureMatrix(x, y))
    fileio.write_features(tmp_path / "base.mdfv", FeatureMatrix(x[y < 2], y[y < 2]))
    fileio.write_features(tmp_path / "new.mdfv", FeatureMatrix(x[y == 2], y[y == 2]))
    assert _run("fit", "--features", tmp_path / "all.mdfv", "--out", tmp_path / "m.json") == 0
    capsys.readouterr()
    assert _run("incr-eval", "--model", tmp_path / "m.json", "--base-test", tmp_path / "base.mdfv",
                "--new-test", tmp_path / "new.mdfv", "--num-base", 2, "--metrics", "mahalanobis",
                "--sep", "\t") == 0
    name, value = capsys.readouterr().out.strip().split("\t")
    assert name == "mahalanobis" and 0.0 <= float(value) <= 1.0


def test_demo_is_byte_identical(tmp_path, quick, capsys):
    outputs = []
    for run in range(2):
        synthetic._SETUPS.clear()
        out = tmp_path / f"demo{run}.json"
        delim = tmp_path / f"demo{run}.csv"
        assert _run("demo", "--config", quick, "--seed", 3, "--out", out, "--delimited", delim) == 0
        outputs.append((capsys.readouterr().out, out.read_bytes(), delim.read_bytes()))
    assert outputs[0] == outputs[1]
    doc = json.loads(outputs[0][1])
    jsonschema.validate(doc, SCHEMA)
    assert doc["config"]["seed"] == 3
    assert set(doc["reports"]) == {"baseline", "odin", "mahalanobis_penultimate", "mahalanobis_full"}
    assert "AUROC" in outputs[0][0]


def test_demo_adversarial_and_figures(tmp_path, quick):
    figs = tmp_path / "figs"
    assert _run("demo", "--config", quick, "--adversarial", "--figdir", figs, "--out", tmp_path / "d.json") == 0
    doc = json.loads((tmp_path / "d.json").read_text())
    assert {"adv_fgsm", "adv_bim", "garbage"} <= set(doc["reports"])
    names = {p.name for p in figs.iterdir()}
    assert {"roc.png", "pr.png", "sweep.png", "hist_baseline.png", "hist_mahalanobis_full.png"} <= names
    before = (figs / "roc.png").read_bytes()
    assert _run("demo", "--config", quick, "--figdir", figs) == 0
    assert (figs / "roc.png").read_bytes() == before


def test_metric_column_selection(tmp_path, quick, capsys):
    cfg = tmp_path / "cols.toml"
    cfg.write_text(QUICK.replace('metrics = ["tnr_at_tpr95", "auroc", "detection_accuracy", "aupr_in", "aupr_out"]',
                                 'metrics = ["auroc"]'))
    assert _run("demo", "--config", cfg) == 0
    header = capsys.readouterr().out.splitlines()[1]
    assert "AUROC" in header and "TNR" not in header
    cfg.write_text('metrics = ["accuracy"]\n')
    assert _run("demo", "--config", cfg) == 1
    assert "accuracy" in capsys.readouterr().err


def test_exit_codes(tmp_path, capsys):
    assert _run() == 2
    assert _run("frobnicate") == 2
    assert _run("fit", "--features", "x.mdfv") == 2
    assert _run("eval", "--pos", "a.csv") == 2
    assert "--pos needs --neg" in capsys.readouterr().err

    assert _run("fit", "--features", tmp_path / "missing.mdfv", "--out", tmp_path / "m.json") == 1
    assert "error:" in capsys.readouterr().err

    fileio.write_scores(tmp_path / "neg_only.csv", [0.1, 0.2, 0.3], [False, False, False])
    assert _run("eval", "--scores", tmp_path / "neg_only.csv") == 1
    assert "SingleClass" in capsys.readouterr().err

    (tmp_path / "bad.toml").write_text("[cv]\nfolds = 3\n")
    assert _run("demo", "--config", tmp_path / "bad.toml") == 1
    err = capsys.readouterr().err
    assert "ConfigError" in err and "cv.folds" in err

    (tmp_path / "bad.mdfv").write_bytes(b"XXXX" + bytes(30))
    assert _run("fit", "--features", tmp_path / "bad.mdfv", "--out", tmp_path / "m.json") == 1
    assert "BadMagic" in capsys.readouterr().err
