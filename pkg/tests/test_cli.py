import json
import sys

import pytest
from click.testing import CliRunner

from segforge.cli import main


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, args, **kw):
    result = runner.invoke(main, args, catch_exceptions=False, **kw)
    return result


@pytest.fixture
def corpus(runner, tmp_path):
    out = tmp_path / "corpus"
    r = invoke(runner, ["fixtures", "--out", str(out), "--count", "3",
                        "--size", "96", "--seed", "5"])
    assert r.exit_code == 0
    return str(out / "manifest.jsonl")


def test_fixtures_command_writes_corpus(runner, corpus, tmp_path):
    info = json.loads(
        invoke(runner, ["fixtures", "--out", str(tmp_path / "c2"), "--count", "2",
                        "--size", "64", "--seed", "1"]).output
    )
    assert info["count"] == 2
    assert (tmp_path / "c2" / "manifest.jsonl").exists()
    assert (tmp_path / "c2" / "masks" / "fixture_0000.png").exists()


def test_synth_filter_score_stats_pipeline(runner, corpus, tmp_path):
    traj = tmp_path / "traj.jsonl"
    r = invoke(runner, ["synth", "--manifest", corpus, "--out", str(traj),
                        "--paradigm", "both", "--seed", "5"])
    assert r.exit_code == 0
    stats = json.loads(r.output)
    assert stats["generated"] == {"box": 3, "click": 3}

    kept = tmp_path / "kept.jsonl"
    r = invoke(runner, ["filter", str(traj), "--out", str(kept), "--filter-iou", "0.7"])
    assert r.exit_code == 0
    assert json.loads(r.output)["read"] == 6

    scores = tmp_path / "scores.jsonl"
    r = invoke(runner, ["score", str(kept), "--out", str(scores), "--group-key", "id"])
    assert r.exit_code == 0
    report = json.loads(r.output)
    assert report["epsilon"] == 0.2
    lines = [json.loads(x) for x in scores.read_text().splitlines()]
    assert all(0.0 <= l["r_total"] <= 1.0 for l in lines)
    for g in report["groups"].values():
        assert abs(sum(g["advantages"])) < 1e-4

    r = invoke(runner, ["stats", str(traj)])
    summary = json.loads(r.output)
    assert summary["total"] == 6
    assert set(summary["paradigm_counts"]) == {"box", "click"}


def test_run_and_replay(runner, corpus, tmp_path):
    report_path = tmp_path / "run.json"
    r = invoke(runner, ["run", "--manifest", corpus, "--out", str(report_path),
                        "--policy", "hybrid", "--seed", "5", "--group-key", "modality"])
    assert r.exit_code == 0
    agg = json.loads(r.output)
    assert "synthetic" in agg
    report = json.loads(report_path.read_text())
    assert len(report["episodes"]) == 3

    traj = tmp_path / "traj.jsonl"
    invoke(runner, ["synth", "--manifest", corpus, "--out", str(traj), "--seed", "5"])
    replay_path = tmp_path / "replay.json"
    r = invoke(runner, ["replay", str(traj), "--manifest", corpus,
                        "--out", str(replay_path)])
    assert r.exit_code == 0
    assert json.loads(r.output)["mismatches"] == 0


def test_run_with_external_policy_double(runner, corpus, tmp_path):
    policy = f"cmd:{sys.executable} -m segforge.doubles policy --mode stop"
    out = tmp_path / "run.json"
    r = invoke(runner, ["run", "--manifest", corpus, "--out", str(out),
                        "--policy", policy, "--seed", "0"])
    assert r.exit_code == 0
    report = json.loads(out.read_text())
    assert all(e["termination"] == "stopped" for e in report["episodes"])
    assert all(e["steps"][0]["action"]["name"] == "stop_action" for e in report["episodes"])


def test_seed_env_fallback(runner, tmp_path, monkeypatch, corpus):
    t1, t2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    monkeypatch.setenv("SEGFORGE_SEED", "99")
    invoke(runner, ["synth", "--manifest", corpus, "--out", str(t1)])
    monkeypatch.delenv("SEGFORGE_SEED")
    invoke(runner, ["synth", "--manifest", corpus, "--out", str(t2), "--seed", "99"])
    assert t1.read_bytes() == t2.read_bytes()


def test_config_file_precedence(runner, corpus, tmp_path):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text('tau = 0.1\nseed = 7\nparadigm = "box"\n', encoding="utf-8")
    t_cfg = tmp_path / "cfg.jsonl"
    t_flag = tmp_path / "flag.jsonl"
    t_plain = tmp_path / "plain.jsonl"
    # Config applies when the flag is absent.
    invoke(runner, ["synth", "--manifest", corpus, "--out", str(t_cfg),
                    "--config", str(cfg)])
    invoke(runner, ["synth", "--manifest", corpus, "--out", str(t_plain),
                    "--paradigm", "box", "--tau", "0.1", "--seed", "7"])
    assert t_cfg.read_bytes() == t_plain.read_bytes()
    # Explicit flags beat the config file.
    invoke(runner, ["synth", "--manifest", corpus, "--out", str(t_flag),
                    "--config", str(cfg), "--seed", "8"])
    assert t_flag.read_bytes() != t_cfg.read_bytes()


def test_unknown_backend_spec_fails(runner, corpus, tmp_path):
    r = runner.invoke(
        main,
        ["synth", "--manifest", corpus, "--out", str(tmp_path / "t.jsonl"),
         "--backend", "magic"],
    )
    assert r.exit_code != 0


def test_filter_skips_corrupt_lines_to_stderr(runner, corpus, tmp_path):
    traj = tmp_path / "traj.jsonl"
    invoke(runner, ["synth", "--manifest", corpus, "--out", str(traj), "--seed", "5"])
    with open(traj, "a", encoding="utf-8") as f:
        f.write("garbage line\n")
    kept = tmp_path / "kept.jsonl"
    r = runner.invoke(main, ["filter", str(traj), "--out", str(kept)])
    assert r.exit_code == 0
    # Diagnostics go to stderr; the summary JSON is the last stdout line.
    summary = json.loads(r.output.strip().splitlines()[-1])
    assert summary["read"] == 3
