"""Command-line behaviour: exit codes, outputs and environment overrides.

Runs the binary named by $W2S_CLI (set by ctest); skipped otherwise.
"""

import csv
import json
import os
import pathlib
import subprocess

import pytest

CLI = os.environ.get("W2S_CLI")
pytestmark = pytest.mark.skipif(not CLI, reason="W2S_CLI not set")


def run(*args, env=None, cwd=None):
    full_env = dict(os.environ)
    full_env.pop("W2S_OUT_DIR", None)
    full_env.pop("W2S_THREADS", None)
    full_env.update(env or {})
    return subprocess.run([CLI, *map(str, args)], capture_output=True, text=True, env=full_env, cwd=cwd)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--preset", "tiny", "--out", root / "data").returncode == 0
    r = run("train", "--preset", "tiny", "--manifest", root / "data" / "manifest.json", "--out", root / "m.ckpt")
    assert r.returncode == 0, r.stderr
    return root


def test_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--preset", "tiny", "--seed", "11", "--out", tmp_path / name).returncode == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 11
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    splits = [r["split"] for r in manifest["recordings"]]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (8, 1, 1)


def test_config_presets_and_bad_config(tmp_path):
    r = run("config", "desk")
    assert r.returncode == 0
    assert json.loads(r.stdout)["model"]["epochs"] == 240
    bad = tmp_path / "bad.json"
    bad.write_text('{"model": {"feature_dim": 0}}')
    r = run("synth", "--config", bad, "--out", tmp_path / "d")
    assert r.returncode == 1
    assert "feature_dim" in r.stderr
    assert run("synth", "--preset", "enormous").returncode == 1
    assert run("no-such-command").returncode == 1


def test_train_writes_log_and_checkpoint(trained):
    lines = (trained / "m.ckpt.log.jsonl").read_text().splitlines()
    records = [json.loads(l) for l in lines]
    assert records and all({"step", "lr", "train_loss"} <= set(r) for r in records)
    assert any("val_loss" in r for r in records)


def test_resume_schedule_needs_init_from(trained):
    r = run("train", "--preset", "tiny", "--manifest", trained / "data" / "manifest.json", "--resume-schedule")
    assert r.returncode == 1
    assert "--init-from" in r.stderr


def test_init_from_continues(trained, tmp_path):
    # The epoch budget counts from the start of the original run.
    config = json.loads(run("config", "tiny").stdout)
    config["train"]["max_epochs"] = 5
    (tmp_path / "c.json").write_text(json.dumps(config))
    r = run("train", "--config", tmp_path / "c.json", "--manifest", trained / "data" / "manifest.json",
            "--init-from", trained / "m.ckpt", "--resume-schedule", "--out", tmp_path / "more.ckpt")
    assert r.returncode == 0, r.stderr
    records = [json.loads(l) for l in (tmp_path / "more.ckpt.log.jsonl").read_text().splitlines()]
    assert records and records[0]["step"] > 1
    assert records[-1]["epoch"] <= 5


def test_eval_report_svg_and_bad_modality(trained, tmp_path):
    manifest = trained / "data" / "manifest.json"
    r = run("eval", "--checkpoint", trained / "m.ckpt", "--manifest", manifest, "--split", "train",
            "--modalities", "ECG,THX", "--group-by", "age_band", "--out", tmp_path / "r.json", "--svg", tmp_path / "c.svg")
    assert r.returncode == 0, r.stderr
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["n_recordings"] == 8
    assert report["groups"]
    assert (tmp_path / "c.svg").read_text().startswith("<svg")
    r = run("eval", "--checkpoint", trained / "m.ckpt", "--manifest", manifest, "--modalities", "EEG")
    assert r.returncode == 1
    assert "ECG, PPG, ABD, THX" in r.stderr


def test_infer_csv(trained, tmp_path):
    out = tmp_path / "p.csv"
    r = run("infer", "--checkpoint", trained / "m.ckpt", "--input", trained / "data" / "synth00000.w2s",
            "--modalities", "PPG", "--out", out)
    assert r.returncode == 0, r.stderr
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == ["epoch", "stage", "p_wake", "p_light", "p_deep", "p_rem"]
    assert len(rows) == 8
    for row in rows:
        assert abs(sum(float(row[k]) for k in ("p_wake", "p_light", "p_deep", "p_rem")) - 1.0) < 1e-5


def test_missing_input_is_a_data_error(trained, tmp_path):
    r = run("infer", "--checkpoint", trained / "m.ckpt", "--input", tmp_path / "absent.w2s")
    assert r.returncode == 2
    assert "absent.w2s" in r.stderr


def test_preprocess_then_noop(trained, tmp_path):
    r = run("preprocess", "--preset", "tiny", "--manifest", trained / "data" / "manifest.json", "--out", tmp_path / "p")
    assert r.returncode == 0, r.stderr
    r = run("preprocess", "--preset", "tiny", "--manifest", tmp_path / "p" / "manifest.json", "--out", tmp_path / "q")
    assert r.returncode == 0
    assert "already preprocessed" in r.stderr
    assert not (tmp_path / "q" / "manifest.json").exists()


def test_environment_overrides(tmp_path):
    r = run("synth", "--preset", "tiny", env={"W2S_OUT_DIR": str(tmp_path)})
    assert r.returncode == 0
    assert (tmp_path / "data" / "manifest.json").exists()
    r = run("synth", "--preset", "tiny", "--out", tmp_path / "x", env={"W2S_THREADS": "many"})
    assert r.returncode == 1


def test_gradcheck_exit_codes():
    assert run("gradcheck", "--trials", "1").returncode == 0
    r = run("gradcheck", "--trials", "1", "--inject-fault")
    assert r.returncode == 3
    assert "FAIL" in r.stdout
