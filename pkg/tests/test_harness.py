import csv
import json
import re
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from detgen.errors import ConfigError
from detgen.harness import config as hc
from detgen.harness.cli import main
from detgen.harness.report import build_report, color_value, read_matrix_csv
from detgen.harness.runs import RunDir, load_checkpoint, read_jsonl, verify_manifest

TINY = Path(__file__).parent / "data" / "tiny.toml"


def run_cli(*argv):
    """In-process CLI call; returns (exit code, stderr JSON or None)."""
    try:
        main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code, None
    return 0, None


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    assert run_cli("pipeline", "--config", TINY, "--out", out, "--quiet")[0] == 0
    return out


def test_config_round_trip(tmp_path):
    cfg = hc.load_config(TINY)
    p = tmp_path / "c.toml"
    hc.save_config(cfg, p)
    again = hc.load_config(p)
    assert again.to_toml() == cfg.to_toml() and again.digest() == cfg.digest()
    hc.save_config(again, tmp_path / "d.toml")
    assert p.read_bytes() == (tmp_path / "d.toml").read_bytes()


def test_config_overrides_and_rejections(tmp_path):
    cfg = hc.load_config(TINY, {"stage2.steps": 7, "bench.rewrite_fraction": 0.25})
    assert cfg.stage2.steps == 7 and cfg.bench.rewrite_fraction == 0.25
    with pytest.raises(ConfigError):
        hc.load_config(TINY, {"stage2.stepz": 7})
    bad = tmp_path / "bad.toml"
    bad.write_text("[generator]\nhiden = [4]\n")
    with pytest.raises(ConfigError):
        hc.load_config(bad)


def test_cli_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[stage1]\nlearning_rate = 1\n")
    assert run_cli("pretrain-generator", "--config", bad, "--out", tmp_path / "r")[0] == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config" and "learning_rate" in err["message"]
    broken = tmp_path / "broken.toml"
    broken.write_text("[stage1\nsteps = 3\n")
    assert run_cli("pretrain-generator", "--config", broken, "--out", tmp_path / "r")[0] == 2
    assert run_cli("grpo-stage1", "--config", TINY, "--out", tmp_path / "empty")[0] == 2
    assert run_cli("no-such-command")[0] == 2


def test_stage2_rejects_deterministic_sampler(tiny_run, tmp_path, capsys):
    run = tmp_path / "copy"
    shutil.copytree(tiny_run, run)
    code, _ = run_cli("grpo-stage2", "--config", TINY, "--out", run, "--set", "generator.eta=0")
    assert code == 2
    assert "eta" in capsys.readouterr().err


def test_pipeline_outputs_and_manifest(tiny_run):
    assert verify_manifest(tiny_run) == []
    m = json.loads((tiny_run / "manifest.json").read_text())
    assert set(m["phases"]) >= {"pretrain-generator", "train-detectors", "sft-policy", "grpo-stage1", "grpo-stage2", "arena"}
    for rec in read_jsonl(tiny_run / "metrics_stage1.jsonl") + read_jsonl(tiny_run / "metrics_stage2.jsonl"):
        assert set(rec) >= {"stage", "step", "mean_reward", "mean_advantage_abs", "mean_ratio", "clip_fraction", "mean_kl", "loss"}
        assert rec["wallclock_ms"] is None
    battles = read_jsonl(tiny_run / "bench" / "battles.jsonl")
    assert len(battles) == 200
    assert set(battles[0]) == {"battle_id", "class", "entry_a", "entry_b", "margin", "winner"}
    entries, rates = read_matrix_csv(tiny_run / "bench" / "winmatrix.csv")
    assert entries[0] == "real" and {"sft", "grpo"} <= set(entries)
    for i in range(len(entries)):
        for j in range(len(entries)):
            if i != j and not np.isnan(rates[i][j]):
                assert rates[i][j] + rates[j][i] == pytest.approx(1.0)


def test_manifest_detects_tampering(tiny_run, tmp_path):
    run = tmp_path / "t"
    shutil.copytree(tiny_run, run)
    with open(run / "policy_sft.json", "a") as fh:
        fh.write(" ")
    problems = verify_manifest(run)
    assert any("policy_sft.json" in p and "mismatch" in p for p in problems)
    with pytest.raises(ConfigError):
        build_report([run], tmp_path / "rep")


def test_run_dir_lock(tmp_path):
    with RunDir(tmp_path / "r"):
        with pytest.raises(ConfigError):
            RunDir(tmp_path / "r").__enter__()
    with RunDir(tmp_path / "r"):
        pass


def test_sample_and_score(tiny_run, tmp_path, capsys):
    out = tmp_path / "s.jsonl"
    assert run_cli("sample", "--checkpoint", tiny_run / "generator_stage2.json", "--class", 3, "-n", 10,
                   "--seed", 1, "--policy", tiny_run / "policy_stage1.json", "--output", out)[0] == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 10
    rec = json.loads(lines[0])
    assert rec["tokens"][0] == 3 and rec["origin"] == "generated" and len(rec["x"]) == 2
    # same seed, same samples
    assert run_cli("sample", "--checkpoint", tiny_run / "generator_stage2.json", "--class", 3, "-n", 10,
                   "--seed", 1, "--policy", tiny_run / "policy_stage1.json", "--output", tmp_path / "s2.jsonl")[0] == 0
    assert (tmp_path / "s2.jsonl").read_bytes() == out.read_bytes()

    prompts, window = tmp_path / "prompts.jsonl", tmp_path / "window.jsonl"
    assert run_cli("sample", "--checkpoint", tiny_run / "generator.json", "--class", 2, "-n", 3,
                   "--policy", tiny_run / "policy_sft.json", "--output", tmp_path / "s3.jsonl",
                   "--dump-prompts", prompts, "--dump-window", window, "--window-len", 2)[0] == 0
    recs = [json.loads(l) for l in prompts.read_text().splitlines()]
    assert len(recs) == 3 and all(r["user_class"] == 2 and len(r["logprobs"]) == len(r["tokens"]) - 1 for r in recs)
    steps = [json.loads(l) for l in window.read_text().splitlines()]
    assert len(steps) == 3 * 2 and {s["step"] for s in steps} == {7, 6}

    capsys.readouterr()
    expl = tmp_path / "explain.csv"
    assert run_cli("score", "--checkpoint", tiny_run / "detectors.json", "--input", out, "--explain", expl)[0] == 0
    scores = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert len(scores) == 10
    for s in scores:
        assert 0 <= s["r_sem"] <= 1 and 0 <= s["r_feat"] <= 1 and -1 <= s["r_align"] <= 1
    with open(expl, newline="") as fh:
        rows = list(csv.DictReader(fh))
    suite = load_checkpoint(tiny_run / "detectors.json", "detector_suite")
    assert len(rows) == 10 * (len(suite.semantic.stat_names) + 1)
    # contributions sum to the logit gap, which reproduces r_sem = sigmoid(-gap)
    for i, s in enumerate(scores):
        gap = sum(float(r["contribution"]) for r in rows if int(r["index"]) == i)
        assert 1 / (1 + np.exp(gap)) == pytest.approx(s["r_sem"], rel=1e-9, abs=1e-12)
    assert [r["statistic"] for r in rows[: len(suite.semantic.stat_names)]] == list(suite.semantic.stat_names)


def test_score_rejects_bad_input(tiny_run, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"x": [1.0, 2.0, 3.0], "class": 0}\n')
    assert run_cli("score", "--checkpoint", tiny_run / "detectors.json", "--input", bad)[0] == 2
    assert run_cli("score", "--checkpoint", tiny_run / "generator.json", "--input", bad)[0] == 2


def test_report_bundle(tiny_run, tmp_path):
    with pytest.raises(ConfigError):
        build_report([], tmp_path / "none")
    out = tmp_path / "rep"
    summary = build_report([tiny_run], out)
    name = tiny_run.name
    # heatmap colors encode the CSV win rates
    entries, rates = read_matrix_csv(out / f"{name}_winrates.csv")
    svg = (out / f"{name}_winmatrix.svg").read_text()
    cells = re.findall(r'fill="(rgb\([^"]+\))" data-row="(\d+)" data-col="(\d+)" data-value="([^"]+)"', svg)
    assert cells
    for fill, i, j, v in cells:
        assert float(v) == rates[int(i)][int(j)]
        assert abs(color_value(fill) - rates[int(i)][int(j)]) <= 1 / 255
    # one curve row per metrics line
    for stage in ("stage1", "stage2"):
        with open(out / f"{name}_curves_{stage}.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(read_jsonl(tiny_run / f"metrics_{stage}.jsonl"))
    assert not any("arena" in g for g in summary["gaps"])


def test_report_lists_gaps(tiny_run, tmp_path):
    run = tmp_path / "partial"
    run.mkdir()
    for f in ("generator.json", "manifest.json"):
        shutil.copy(tiny_run / f, run / f)
    m = json.loads((run / "manifest.json").read_text())
    m["phases"] = {"pretrain-generator": m["phases"]["pretrain-generator"]}
    m["phases"]["pretrain-generator"]["outputs"] = {"generator.json": m["phases"]["pretrain-generator"]["outputs"]["generator.json"]}
    (run / "manifest.json").write_text(json.dumps(m))
    summary = build_report([run], tmp_path / "rep")
    assert any("no arena results" in g for g in summary["gaps"])
    assert any("stage1" in g for g in summary["gaps"])


def test_cli_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "detgen.harness.cli", "report", "--output", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 2
    assert json.loads(r.stderr.strip())["error"] == "config"
