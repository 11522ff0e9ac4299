"""End-to-end command line pipeline on a small synthetic world."""

import json

import numpy as np
import pytest

from susmap import __version__
from susmap.cli import main
from susmap.dataset import load_manifest, split_subset
from susmap.models import load_model
from susmap.raster import load_raster, load_stack
from susmap.training import base_rate

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run synth -> split -> train llr -> align -> train cnn -> predict."""
    root = tmp_path_factory.mktemp("pipeline")
    world = root / "world"
    assert main(["synth", "--out", str(world), "--rows", "96", "--cols", "96",
                 "--seed", "0"]) == 0

    splits = root / "splits"
    assert main(["split", "--out", str(splits), "--labels", str(world / "labels.json"),
                 "--core", "24", "--pad", "8", "--seed", "0"]) == 0

    llr = root / "llr"
    assert main(["train", "--out", str(llr), "--stack", str(world / "stack.json"),
                 "--labels", str(world / "labels.json"),
                 "--patches", str(splits / "patches.csv"),
                 "--model", "llr", "--lr", "0.25", "--epochs", "2",
                 "--batch-size", "8", "--seed", "0"]) == 0

    aligned = root / "aligned"
    assert main(["align", "--out", str(aligned), "--stack", str(world / "stack.json"),
                 "--dem", str(world / "dem.json"),
                 "--select", "slope,lithology/litho0"]) == 0

    cnn = root / "cnn"
    assert main(["train", "--out", str(cnn), "--stack", str(aligned / "combined.json"),
                 "--labels", str(world / "labels.json"),
                 "--patches", str(splits / "patches.csv"),
                 "--model", "cnn", "--depth", "1", "--widths", "4,6",
                 "--lr", "0.05", "--epochs", "1", "--batch-size", "8",
                 "--seed", "0"]) == 0

    pred = root / "pred"
    assert main(["predict", "--out", str(pred), "--stack", str(aligned / "combined.json"),
                 "--model", str(cnn / "model.json"),
                 "--core", "48", "--pad", "16"]) == 0
    return root


def test_synth_outputs_and_manifest(pipeline):
    world = pipeline / "world"
    for name in ("dem.json", "slope.json", "lithology.json", "labels.json",
                 "stack.json", "manifest.json"):
        assert (world / name).exists(), name
    manifest = json.loads((world / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 0
    assert len(manifest["config_sha256"]) == 64
    assert manifest["versions"]["susmap"] == __version__
    for name in manifest["outputs"]:
        assert (world / name).exists(), name


def test_split_manifest_partitions_grid(pipeline):
    patches = load_manifest(pipeline / "splits" / "patches.csv")
    assert len(patches) == 16  # 96/24 squared
    names = {p.split for p in patches}
    assert names == {"train", "val", "test"}
    assert any(p.has_positive for p in patches)


def test_train_writes_model_history_and_figure(pipeline):
    llr = pipeline / "llr"
    assert (llr / "model.json").exists() and (llr / "model.bin").exists()
    lines = (llr / "history.csv").read_text().strip().splitlines()
    assert lines[0] == "epoch,train_nll,val_nll,lr"
    assert len(lines) == 3
    assert (llr / "loss.png").read_bytes()[:8] == PNG_MAGIC
    model, opt = load_model(llr / "model.json")
    assert model.spec.kind == "llr"
    assert opt is not None and opt.kind == "adam"


def test_align_outputs(pipeline):
    aligned = pipeline / "aligned"
    stack = load_stack(aligned / "aligned.json")
    assert stack.num_channels == 6  # 2 channels x 3 ranges
    assert stack.channel_names[0] == "slope@30m"
    combined = load_stack(aligned / "combined.json")
    assert combined.num_channels == 7 + 6
    rows = (aligned / "selected.csv").read_text().strip().splitlines()
    assert rows[0] == "channel_index,channel_name,weight"
    assert len(rows) == 3


def test_predict_writes_probability_map_and_heatmap(pipeline):
    pred = pipeline / "pred"
    prob = load_raster(pred / "susceptibility.json")
    assert prob.values.shape == (96, 96)
    assert np.all((prob.values >= 0) & (prob.values <= 1))
    assert (pred / "susceptibility.png").read_bytes()[:8] == PNG_MAGIC


def test_eval_reports_metrics_per_split(pipeline, capsys, tmp_path):
    world, splits, llr = pipeline / "world", pipeline / "splits", pipeline / "llr"
    out = tmp_path / "eval"
    assert main(["eval", "--out", str(out), "--stack", str(world / "stack.json"),
                 "--labels", str(world / "labels.json"),
                 "--patches", str(splits / "patches.csv"),
                 "--model", str(llr / "model.json"),
                 "--splits", "val,test"]) == 0
    printed = capsys.readouterr().out
    assert "val:" in printed and "test:" in printed

    lines = (out / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "split,n_cells,n_positives,nll,auc"
    assert len(lines) == 3
    for line in lines[1:]:
        split, n, npos, nll, auc = line.split(",")
        assert 0.0 <= float(auc) <= 1.0 and float(nll) > 0
    roc_lines = (out / "roc.csv").read_text().strip().splitlines()
    assert roc_lines[0] == "split,threshold,fpr,tpr"
    assert (out / "roc.png").read_bytes()[:8] == PNG_MAGIC


def test_roc_command_on_stitched_map(pipeline, tmp_path):
    out = tmp_path / "roc"
    assert main(["roc", "--out", str(out),
                 "--pred", str(pipeline / "pred" / "susceptibility.json"),
                 "--labels", str(pipeline / "world" / "labels.json")]) == 0
    lines = (out / "metrics.csv").read_text().strip().splitlines()
    assert len(lines) == 2 and lines[1].startswith("map,")
    assert (out / "roc.png").read_bytes()[:8] == PNG_MAGIC


def test_gradcheck_command(tmp_path, capsys):
    out = tmp_path / "grad"
    assert main(["gradcheck", "--seeds", "1", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "PASS" in printed and "FAIL" not in printed
    lines = (out / "gradcheck.csv").read_text().strip().splitlines()
    assert lines[0] == "op,max_rel_error,tolerance,passed"
    assert len(lines) > 1


def test_synth_rerun_is_byte_identical(tmp_path):
    outs = []
    for i in range(2):
        out = tmp_path / f"w{i}"
        assert main(["synth", "--out", str(out), "--rows", "64", "--cols", "64",
                     "--seed", "3"]) == 0
        outs.append(out)
    for name in ("dem.bin", "stack.bin", "labels.bin", "lithology.bin"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_train_rerun_is_byte_identical(pipeline, tmp_path):
    world, splits = pipeline / "world", pipeline / "splits"
    outs = []
    for i in range(2):
        out = tmp_path / f"t{i}"
        assert main(["train", "--out", str(out), "--stack", str(world / "stack.json"),
                     "--labels", str(world / "labels.json"),
                     "--patches", str(splits / "patches.csv"),
                     "--model", "llr", "--lr", "0.25", "--epochs", "2",
                     "--batch-size", "8", "--seed", "0"]) == 0
        outs.append(out)
    assert (outs[0] / "model.bin").read_bytes() == (outs[1] / "model.bin").read_bytes()
    assert (outs[0] / "history.csv").read_bytes() == (outs[1] / "history.csv").read_bytes()


def test_flags_override_config_file(pipeline, tmp_path):
    world, splits = pipeline / "world", pipeline / "splits"
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"kind": "llr", "lr": 0.125, "epochs": 3}))
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--stack", str(world / "stack.json"),
                 "--labels", str(world / "labels.json"),
                 "--patches", str(splits / "patches.csv"),
                 "--config", str(config), "--epochs", "1"]) == 0
    lines = (out / "history.csv").read_text().strip().splitlines()
    assert len(lines) == 2  # flag epochs=1 wins over config epochs=3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["epochs"] == 1
    assert manifest["config"]["lr"] == 0.125  # config value kept where no flag


def test_naive_p_estimate_uses_train_base_rate(pipeline, tmp_path):
    world, splits = pipeline / "world", pipeline / "splits"
    out = tmp_path / "naive"
    assert main(["train", "--out", str(out), "--stack", str(world / "stack.json"),
                 "--labels", str(world / "labels.json"),
                 "--patches", str(splits / "patches.csv"),
                 "--model", "naive", "--naive-p", "estimate", "--epochs", "1"]) == 0
    model, _ = load_model(out / "model.json")
    labels = load_raster(world / "labels.json")
    patches = split_subset(load_manifest(splits / "patches.csv"), "train")
    assert model.spec.naive_p == pytest.approx(base_rate(labels, patches), rel=1e-6)


def test_repo_presets_match_documented_settings():
    from pathlib import Path

    presets = Path(__file__).resolve().parents[1] / "configs"
    lacnn = json.loads((presets / "lacnn.json").read_text())
    assert lacnn == {"kind": "lacnn", "optimizer": "adam", "lr": 0.001,
                     "epochs": 30, "batch_size": 9, "depth": 3,
                     "widths": [32, 64, 128, 256]}
    cnn = json.loads((presets / "cnn.json").read_text())
    assert cnn["optimizer"] == "sgd" and cnn["lr"] == 0.125 and cnn["epochs"] == 20
    llr = json.loads((presets / "llr.json").read_text())
    assert llr["lr"] == 0.125 and llr["epochs"] == 10 and llr["batch_size"] == 15
    nn = json.loads((presets / "nn.json").read_text())
    assert nn["lr"] == 0.125 and nn["epochs"] == 10 and nn["batch_size"] == 13
    lann = json.loads((presets / "lann.json").read_text())
    assert lann["lr"] == 0.016 and lann["epochs"] == 15 and lann["batch_size"] == 10


def test_usage_errors_exit_1(capsys, tmp_path, pipeline):
    world = pipeline / "world"
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train", "--out", str(tmp_path)]) == 1  # missing required flags
    # files exist but neither --weights nor --select was given
    assert main(["align", "--out", str(tmp_path / "a"),
                 "--stack", str(world / "stack.json"),
                 "--dem", str(world / "dem.json")]) == 1
    capsys.readouterr()


def test_data_errors_exit_2(capsys, tmp_path, pipeline):
    world, splits = pipeline / "world", pipeline / "splits"
    assert main(["train", "--out", str(tmp_path / "x"),
                 "--stack", str(tmp_path / "missing.json"),
                 "--labels", str(world / "labels.json"),
                 "--patches", str(splits / "patches.csv"),
                 "--model", "llr", "--epochs", "1"]) == 2

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"kind": "llr", "warp_speed": 9}))
    assert main(["train", "--out", str(tmp_path / "y"),
                 "--stack", str(world / "stack.json"),
                 "--labels", str(world / "labels.json"),
                 "--patches", str(splits / "patches.csv"),
                 "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "warp_speed" in err


def test_encode_command(pipeline, tmp_path):
    world = pipeline / "world"
    out = tmp_path / "enc"
    assert main(["encode", "--out", str(out),
                 "--categorical", f"lithology={world / 'lithology.json'}",
                 "--continuous", f"dem={world / 'dem.json'}",
                 "--continuous", f"slope={world / 'slope.json'}"]) == 0
    stack = load_stack(out / "stack.json")
    assert list(stack.channel_names) == [
        "lithology/litho0", "lithology/litho1", "lithology/litho2",
        "lithology/litho3", "lithology/litho4", "dem", "slope"]


def test_encode_rejects_malformed_pairs(tmp_path, capsys):
    assert main(["encode", "--out", str(tmp_path / "e"),
                 "--categorical", "no-equals-sign"]) == 1
    assert main(["encode", "--out", str(tmp_path / "e2")]) == 1
    capsys.readouterr()
