import json

import pytest
import yaml

from hybridsynth.cli import DEFAULTS, EXIT_CONFIG, EXIT_MISSING, EXIT_OK, RunConfig, main, tree_hash
from hybridsynth.manipulate import read_manifest


def run(out, *args, toy_root=None):
    argv = [*args, "--out", str(out)]
    if toy_root is not None:
        argv += ["--set", f"dataset.root={toy_root}"]
    return main(argv)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, toy_root):
    out = tmp_path_factory.mktemp("cli")
    fast = ["--set", "training.steps=3", "--set", "generation.count_per_decoder=3"]
    assert run(out, "prepare-conditions", toy_root=toy_root) == EXIT_OK
    assert run(out, "train", *fast, toy_root=toy_root) == EXIT_OK
    return out, fast


def test_config_round_trip(tmp_path):
    cfg = RunConfig.from_dict(DEFAULTS)
    path = tmp_path / "run.yaml"
    path.write_text(cfg.dump())
    again = RunConfig.load(path)
    assert again.to_dict() == cfg.to_dict()
    assert yaml.safe_load(again.dump()) == cfg.to_dict()


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"training": {"steps": -1, "lr": "fast"}, "generation": {"area": [0.5, 0.1]}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert err.count("config error") >= 3
    assert main(["train", "--out", str(tmp_path), "--manipulations", "merge,shear"]) == EXIT_CONFIG
    assert main(["train", "--out", str(tmp_path), "--set", "nokey"]) == EXIT_CONFIG
    assert not (tmp_path / "train").exists()


def test_missing_prerequisite_exit_3(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path)]) == EXIT_MISSING
    assert "train --mode rgb" in capsys.readouterr().err
    assert main(["report", "--out", str(tmp_path)]) == EXIT_MISSING


def test_decoder_filter_and_run_manifest(trained, toy_root):
    out, fast = trained
    assert run(out, "generate", "--decoders", "ahd", *fast, toy_root=toy_root) == EXIT_OK
    _, rows = read_manifest(out / "generate" / "rgb" / "manifest.jsonl")
    assert rows and {r["decoder"] for r in rows} == {"ahd"}
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert {"prepare-conditions", "train", "generate"} <= set(manifest["commands"])
    assert manifest["config"]["generation"]["decoders"] == "ahd"
    outputs = manifest["commands"]["generate"]["outputs"]
    assert "generate/rgb/manifest.jsonl" in outputs


def test_evaluate_generation_is_deterministic(trained, toy_root):
    out, fast = trained
    assert run(out, "generate", *fast, toy_root=toy_root) == EXIT_OK
    assert run(out, "evaluate-generation", *fast, toy_root=toy_root) == EXIT_OK
    path = out / "evaluate-generation" / "rgb" / "report.json"
    first = path.read_bytes()
    assert run(out, "evaluate-generation", *fast, toy_root=toy_root) == EXIT_OK
    assert path.read_bytes() == first
    rep = json.loads(first)
    assert rep["is_mean"] >= 1 and rep["cluster_lpips"] >= 0
    assert run(out, "report", toy_root=toy_root) == EXIT_OK


def test_generate_rerun_is_byte_identical(trained, toy_root):
    out, fast = trained
    assert run(out, "generate", *fast, toy_root=toy_root) == EXIT_OK
    first = tree_hash(out / "generate")
    assert run(out, "generate", *fast, toy_root=toy_root) == EXIT_OK
    assert tree_hash(out / "generate") == first


def test_depth_mode_requires_rgb_checkpoint(tmp_path, toy_root):
    assert run(tmp_path, "prepare-conditions", toy_root=toy_root) == EXIT_OK
    assert run(tmp_path, "finetune-depth", toy_root=toy_root) == EXIT_MISSING
    assert run(tmp_path, "generate", "--mode", "depth", toy_root=toy_root) == EXIT_MISSING


def test_make_toy(tmp_path):
    root = tmp_path / "toy"
    assert main(["make-toy", "--out", str(tmp_path / "o"), "--set", f"dataset.root={root}", "--size", "32"]) == 0
    assert len(list(root.rglob("*.png"))) == 20


def test_depth_level_pipeline(trained, toy_root):
    out, fast = trained
    assert run(out, "finetune-depth", "--set", "training.finetune_steps=2", toy_root=toy_root) == EXIT_OK
    assert run(out, "generate", "--mode", "depth", *fast, toy_root=toy_root) == EXIT_OK
    header, rows = read_manifest(out / "generate" / "depth" / "manifest.jsonl")
    assert header["mode"] == "depth" and rows
