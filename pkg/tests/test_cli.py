import json
import subprocess
import sys

import numpy as np
import pytest

from geega import cli, config
from geega.featuremaps import FeatureSet

SMALL = """
synth.n_subjects = 2
synth.duration_s = 30
train.epochs = 2
train.batch = 4
train.lr = 1e-3
encoder.embed_dim = 16
encoder.heads = 2
encoder.mlp_hidden = 32
gcn.nodes = 2
gcn.node_dim = 8
gcn.out_dim = 8
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL)
    assert cli.main(["synth", "--config", str(cfg), "--seed", "3", "--out", str(root / "raw")]) == 0
    assert cli.main(["featgen", str(root / "raw"), "--config", str(cfg), "--out", str(root / "feat")]) == 0
    assert cli.main(["train", "--features", str(root / "feat"), "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root


def test_synth_default_counts(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("synth.duration_s = 10\n")
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").glob("*.geeg"))
    assert len(files) == 8
    assert files[:2] == ["S01_class0.geeg", "S01_class1.geeg"]


def test_synth_byte_identical(workspace, tmp_path):
    assert cli.main(["synth", "--config", str(workspace / "small.cfg"), "--seed", "3", "--out", str(tmp_path)]) == 0
    for p in (workspace / "raw").glob("*.geeg"):
        assert p.read_bytes() == (tmp_path / p.name).read_bytes()


def test_invalid_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("train.learning_rate = 0.1\n")
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("geega: error:") and "train.learning_rate" in err


def test_featgen_counts(workspace):
    fs = FeatureSet.load(workspace / "feat" / "features.geec")
    assert fs.topo.shape == (12, 5, 32, 32)  # 4 recordings x 3 windows
    assert fs.spectro.shape == (12, 4, 32, 32)
    man = json.loads((workspace / "feat" / "manifest_featgen.json").read_text())
    assert man["status"] == "ok"
    assert set(man["notes"]["segments"].values()) == {3}
    assert (workspace / "feat" / "topomap_preview.png").stat().st_size > 0


def test_featgen_single_recording_three_windows(workspace, tmp_path):
    src = tmp_path / "one"
    src.mkdir()
    (src / "x.geeg").write_bytes((workspace / "raw" / "S01_class1.geeg").read_bytes())
    assert cli.main(["featgen", str(src), "--out", str(tmp_path / "f")]) == 0
    fs = FeatureSet.load(tmp_path / "f" / "features.geec")
    assert len(fs) == 3 and set(fs.labels.tolist()) == {1}


def test_featgen_no_notch_in_manifest(workspace, tmp_path):
    assert cli.main(["featgen", str(workspace / "raw"), "--no-notch", "--out", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "manifest_featgen.json").read_text())
    assert man["notes"]["notch"] == "skipped"
    assert man["config"]["features.use_notch"] is False


def test_featgen_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert cli.main(["featgen", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 1
    assert "no .geeg or .csv" in capsys.readouterr().err


def test_featgen_montage_mismatch_names_file(workspace, tmp_path, capsys):
    assert cli.main(["featgen", str(workspace / "raw"), "--montage", "bci2a22", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "S01_class0.geeg" in err


def test_train_outputs(workspace):
    run = workspace / "run"
    lines = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]
    summary = lines[-1]
    assert summary["summary"] and summary["folds"] == 2 and summary["ablations"] == []
    for k, s in enumerate(["S01", "S02"]):
        fold = run / f"fold{k:02d}_{s}"
        for name in ("checkpoint.geec", "conflicts.csv", "conflict_heatmap.png", "loss_curves.png"):
            assert (fold / name).is_file()
    assert (run / "conflict_report.csv").read_text().startswith("pair,epoch,conflict_fraction")


def test_train_ablate_labels_summary(workspace, tmp_path, capsys):
    assert cli.main(["train", "--features", str(workspace / "feat"), "--config", str(workspace / "small.cfg"),
                     "--ablate", "git", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "ablations=git" in out
    man = json.loads((tmp_path / "manifest_train.json").read_text())
    assert man["config"]["train.use_git"] is False


def test_train_missing_cache(tmp_path, capsys):
    assert cli.main(["train", "--features", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1
    assert "feature cache not found" in capsys.readouterr().err


def test_eval(workspace, capsys):
    ckpt = workspace / "run" / "fold00_S01" / "checkpoint.geec"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--features", str(workspace / "feat"),
                     "--subject", "S01"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["n"] == 6 and 0 <= res["accuracy"] <= 100


def test_eval_missing_checkpoint(workspace, tmp_path, capsys):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "x.geec"), "--features", str(workspace / "feat")]) == 1
    assert "checkpoint not found" in capsys.readouterr().err


def test_diagnose(workspace, tmp_path, capsys):
    log = workspace / "run" / "fold00_S01" / "conflicts.csv"
    assert cli.main(["diagnose", "--log", str(log), "--out", str(tmp_path)]) == 0
    assert "GCN-topo" in capsys.readouterr().out
    assert (tmp_path / "conflict_heatmap.png").is_file()
    assert (tmp_path / "conflict_report.csv").is_file()


def test_diagnose_empty_log(tmp_path, capsys):
    log = tmp_path / "empty.csv"
    log.write_text("epoch,batch,pair,cosine,conflict\n")
    assert cli.main(["diagnose", "--log", str(log), "--out", str(tmp_path / "o")]) == 1
    assert capsys.readouterr().err.startswith("geega: error:")


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "geega.cli", "diagnose", "--log", str(tmp_path / "none"),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 1
    assert proc.stderr.strip().startswith("geega: error:")


def test_config_round_trip():
    cfg = config.parse(SMALL)
    assert cfg.train.overrides["encoder.embed_dim"] == 16
    again = config.parse(config.dump(cfg))
    assert again.flat() == cfg.flat()
    with pytest.raises(config.ConfigError, match="train.epochs"):
        config.parse("train.epochs = many")
