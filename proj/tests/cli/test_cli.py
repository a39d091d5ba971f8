# SPDX-License-Identifier: Apache-2.0
import json
import os
import subprocess
from pathlib import Path

import pytest

CLI = os.environ.get("MPREID_CLI", "mpreid")

TINY = {
    "encoder": {"embed_dim": 16, "layers": 1, "heads": 2, "patch_size": 8, "image_size": 16,
                "context_length": 40, "mlp_ratio": 2},
    "data": {"identities": 12, "samples_per_identity": 4, "image_size": 16},
    "prompts": {"vocab_size": 400},
    "train": {"S": 3, "K": 2, "steps": 3},
}


def run(*args, check=True):
    proc = subprocess.run([CLI, *map(str, args)], capture_output=True, text=True)
    if check and proc.returncode != 0:
        raise AssertionError(f"{args} exited {proc.returncode}: {proc.stderr}")
    return proc


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = json.loads(json.dumps(TINY))
    cfg["paths"] = {
        "data_dir": str(root / "data"),
        "prompts": str(root / "prompts.jsonl"),
        "vocab": str(root / "vocab.json"),
        "output_dir": str(root / "runs"),
    }
    path = root / "config.json"
    path.write_text(json.dumps(cfg))
    run("gen-data", "--config", path)
    run("gen-prompts", "--config", path)
    return root, path


def test_generation_writes_manifests(workspace):
    root, _ = workspace
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert len(manifest["config_hash"]) == 64
    lines = (root / "prompts.jsonl").read_text().splitlines()
    assert len(lines) == 12
    assert all(len(json.loads(line)["vqa"]) == 7 for line in lines)


def test_train_twice_gives_identical_metrics(workspace):
    root, cfg = workspace
    run("train", "--config", cfg, "--seed", 1, "--out", root / "a")
    run("train", "--config", cfg, "--seed", 1, "--out", root / "b")
    a = (root / "a" / "metrics.csv").read_bytes()
    assert a == (root / "b" / "metrics.csv").read_bytes()
    assert len(a.splitlines()) == 4
    manifest = json.loads((root / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 1 and manifest["version"]


def test_eval_without_checkpoint_is_a_validation_error(workspace):
    _, cfg = workspace
    proc = run("eval", "--config", cfg, check=False)
    assert proc.returncode == 2
    assert "paths.checkpoint" in proc.stderr


def test_invalid_config_lists_every_violation(workspace):
    _, cfg = workspace
    proc = run("train", "--config", cfg, "--set", "loss.tau=0", "--set", "train.K=1", check=False)
    assert proc.returncode == 2
    assert "loss.tau" in proc.stderr and "train.K" in proc.stderr


def test_train_eval_report_flow(workspace):
    root, cfg = workspace
    run("train", "--config", cfg, "--seed", 2, "--out", root / "c")
    out = root / "c" / "report.json"
    run("eval", "--config", cfg, "--seed", 2, "--checkpoint", root / "c" / "checkpoint.mpt", "--out", out)
    report = json.loads(out.read_text())
    assert 0.0 <= report["mAP"] <= 1.0
    assert report["seed"] == 2
    summary = run("report", root / "c")
    assert "LP+CP&VP" in summary.stdout

    bad = dict(report, schema_version=report["schema_version"] + 1)
    (root / "bad").mkdir()
    (root / "bad" / "report.json").write_text(json.dumps(bad))
    proc = run("report", out, root / "bad" / "report.json", check=False)
    assert proc.returncode == 2
    assert "schema version" in proc.stderr


def test_eval_rejects_checkpoint_from_other_config(workspace):
    root, cfg = workspace
    run("train", "--config", cfg, "--seed", 3, "--out", root / "d")
    proc = run("eval", "--config", cfg, "--seed", 4, "--checkpoint", root / "d" / "checkpoint.mpt", check=False)
    assert proc.returncode == 2


def test_ablate_default_rows_gives_six_row_csv(workspace):
    root, cfg = workspace
    captions = root / "captions.jsonl"
    with captions.open("w") as f:
        for line in (root / "prompts.jsonl").read_text().splitlines():
            p = json.loads(line)
            f.write(json.dumps({"id": p["id"], "caption": p["chatgpt"]}) + "\n")
    proc = run("ablate", "--config", cfg, "--seed", 0, "--set", "train.steps=1",
               f"paths.captions={captions}", "--out", root / "ablation")
    rows = (root / "ablation" / "ablation.csv").read_text().splitlines()
    assert rows[0] == "strategy,seed,mAP,r1,r5,r10"
    assert [r.split(",")[0] for r in rows[1:]] == ["LP", "LP+AW", "LP+GC", "LP+VP", "LP+CP", "LP+CP&VP"]
    assert "LP+CP&VP" in proc.stdout


def test_ablate_caption_row_without_captions_fails_fast(workspace):
    root, cfg = workspace
    proc = run("ablate", "--config", cfg, "--seed", 0, "--rows", "LP", "LP+GC", "--out", root / "abl2", check=False)
    assert proc.returncode == 2
    assert "LP+GC" in proc.stderr
    assert not (root / "abl2" / "LP_seed0").exists()
