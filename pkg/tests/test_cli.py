import json
import subprocess
import sys

import pytest

from trigger_erasure import btf
from trigger_erasure.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main

SMALL = """\
tasks = 0
episodes = 10
calib_episodes = 30
train_steps = 10
color_perms = 0
sweep_episodes = 5
sweep_fractions = 0.1
sweep_poison_rates = 0.4
sweep_triggers = circular-block
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL)
    base = ["--config", str(cfg), "--seed", "5"]

    def call(*args):
        return main([args[0], *base, *args[1:]])

    assert call("gen", "--out", str(root / "data")) == EXIT_OK
    assert call("calibrate", "--dataset", str(root / "data/calib"), "--out", str(root / "ref")) == EXIT_OK
    assert call("train", "--dataset", str(root / "data/calib"), "--out", str(root / "dec")) == EXIT_OK
    return root, base, call


def test_gen_outputs(run):
    root, _, _ = run
    for split in ("calib", "test"):
        lines = (root / "data" / split / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == (30 if split == "calib" else 10)
        assert len(list((root / "data" / split / "images").glob("*.btf"))) == len(lines)
    assert "seed = 5" in (root / "data/config.txt").read_text()


def test_gen_same_seed_same_manifest(run, tmp_path):
    root, _, call = run
    assert call("gen", "--out", str(tmp_path)) == EXIT_OK
    assert (tmp_path / "test/manifest.jsonl").read_bytes() == (root / "data/test/manifest.jsonl").read_bytes()


def test_train_outputs(run):
    root, _, _ = run
    rows = (root / "dec/loss.csv").read_text().splitlines()
    assert rows[0] == "step,mask_ratio,loss" and len(rows) == 11
    assert (root / "dec/decoder.btf").exists()


def test_detect_writes_token_grids(run):
    root, _, call = run
    frame = root / "data/test/images/00003.btf"
    assert call("detect", "--reference", str(root / "ref"), "--frame", str(frame), "--out", str(root / "det")) == EXIT_OK
    body = json.loads((root / "det/detection.json").read_text())
    assert set(body["backdoor"]) <= set(body["anomalies"])
    for name in ("score", "saliency", "mask"):
        assert btf.read_pnm(root / "det" / f"{name}.pgm").shape == (8, 8)


def test_evaluate_ablate_sweep(run):
    root, _, call = run
    inputs = ["--dataset", str(root / "data/test"), "--reference", str(root / "ref"),
              "--decoder", str(root / "dec/decoder.btf")]
    assert call("evaluate", *inputs, "--out", str(root / "eval")) == EXIT_OK
    report = json.loads((root / "eval/report.json").read_text())
    o = report["overall"]
    assert o["tp"] == (o["cp"] + 100 - o["asr"]) / 2
    assert len(report["episodes"]) == 10
    assert call("ablate", *inputs, "--out", str(root / "abl")) == EXIT_OK
    assert len((root / "abl/ablation.csv").read_text().splitlines()) == 5
    assert call("sweep", "--reference", str(root / "ref"), "--decoder", str(root / "dec/decoder.btf"),
                "--out", str(root / "sweep")) == EXIT_OK
    assert len((root / "sweep/sweep.csv").read_text().splitlines()) == 2


def test_unknown_config_key_exits_2(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = red\n")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INVALID


def test_missing_manifest_exits_2(tmp_path):
    assert main(["calibrate", "--dataset", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_INVALID


def test_corrupt_reference_exits_2(run, tmp_path):
    root, base, _ = run
    (tmp_path / "task-0.btf").write_bytes(b"not a tensor file")
    frame = root / "data/test/images/00000.btf"
    code = main(["detect", *base, "--reference", str(tmp_path), "--frame", str(frame), "--out", str(tmp_path / "o")])
    assert code == EXIT_INVALID


def test_missing_decoder_file_exits_3(run, tmp_path):
    root, base, _ = run
    code = main(["evaluate", *base, "--dataset", str(root / "data/test"), "--reference", str(root / "ref"),
                 "--decoder", str(tmp_path / "nope.btf"), "--out", str(tmp_path / "o")])
    assert code == EXIT_RUNTIME


def test_bad_seed_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--seed", "-3", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "trigger_erasure", "calibrate", "--dataset", str(tmp_path),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == EXIT_INVALID
    assert proc.stderr.startswith("error:")
