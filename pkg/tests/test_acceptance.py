"""Acceptance gate: one test per headline guarantee, each reporting a
PASS/FAIL line in the terminal summary (see conftest)."""

import json
import math
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

import conftest
from segforge import dataio, harness, masks, protocol, rewards, synth
from segforge.actions import AddBox, AddPoint, Stop
from segforge.backend import (
    BackendDimensionError,
    BackendTimeoutError,
    ExternalBackend,
    MalformedReplyError,
    OracleBackend,
)
from segforge.cli import main as cli_main
from segforge.fixtures import make_fixture_samples
from segforge.rng import SplitMix64

GOLDEN = Path(__file__).parent / "golden"


@contextmanager
def criterion(name):
    conftest.ACCEPTANCE_RESULTS[name] = "FAIL"
    yield
    conftest.ACCEPTANCE_RESULTS[name] = "PASS"


# 1 ---------------------------------------------------------------------------------


def test_metric_identities():
    with criterion("metric identities (1000 random 64x64 pairs)"):
        rng = np.random.default_rng(12345)
        start = time.perf_counter()
        for _ in range(1000):
            a = rng.random((64, 64)) < rng.random()
            b = rng.random((64, 64)) < rng.random()
            i = masks.iou(a, b)
            d = masks.dice(a, b)
            assert abs(d - 2.0 * i / (1.0 + i)) <= 1e-12
            assert 0.0 <= i <= d <= 1.0
        elapsed = time.perf_counter() - start
        assert elapsed < 1.0, f"metric loop took {elapsed:.3f}s"


# 2 ---------------------------------------------------------------------------------


def _brute_distance_transform(m):
    h, w = m.shape
    bg = [
        (y, x)
        for y in range(-1, h + 1)
        for x in range(-1, w + 1)
        if not (0 <= y < h and 0 <= x < w) or not m[y, x]
    ]
    out = np.zeros((h, w), dtype=float)
    for y in range(h):
        for x in range(w):
            if m[y, x]:
                out[y, x] = min(math.hypot(y - by, x - bx) for by, bx in bg)
    return out


def test_distance_transform_oracle_equivalence():
    with criterion("distance transform equals brute force (200 masks <= 32x32)"):
        rng = SplitMix64(777)
        for _ in range(200):
            h = 1 + rng.randint(0, 31)
            w = 1 + rng.randint(0, 31)
            p = 0.3 + 0.5 * rng.uniform()
            m = np.array(
                [[rng.uniform() < p for _ in range(w)] for _ in range(h)], dtype=bool
            )
            got = masks.distance_transform(m)
            want = _brute_distance_transform(m)
            assert np.array_equal(got, want)


# 3 ---------------------------------------------------------------------------------


def test_construction_guarantees():
    with criterion("trajectory construction guarantees (500 fixtures)"):
        samples = make_fixture_samples(250, size=256, seed=20260823)
        params = synth.SynthParams()
        start = time.perf_counter()
        trajs, stats = synth.synthesize_batch(
            samples, params, OracleBackend, base_seed=1, jobs=1,
            paradigms=("box", "click"),
        )
        elapsed = time.perf_counter() - start
        assert len(trajs) == 500
        assert stats.failed == 0
        for t in trajs:
            series = t.iou_series
            deltas = [b - a for a, b in zip(series, series[1:])]
            assert all(d >= params.tau for d in deltas)  # refinement progress
            assert all(d > 0 for d in deltas)  # strictly increasing
            assert len(t.steps) <= 1 + params.max_clicks  # <= 6 actions
            assert all(s.retries_used <= params.max_retries for s in t.steps)
            assert t.accepted == (t.final_iou >= params.filter_min_iou)
            if t.accepted:
                assert t.final_iou >= 0.7
        assert elapsed < 60.0, f"synthesis took {elapsed:.1f}s single-threaded"


# 4 ---------------------------------------------------------------------------------


def test_reward_golden_value():
    with criterion("reward golden value 0.727160 and clip bounds"):
        b = rewards.total_reward(
            iou_series=[0.5, 0.7, 0.65],
            dice_final=0.7879,
            n_tool_actions=3,
            has_tool_action=True,
            stopped_within_budget=True,
        )
        assert abs(b.r_total - 0.727160) <= 1e-6
        # Clip floor: collapse from a near-perfect mask to almost nothing.
        floor = rewards.total_reward(
            iou_series=[0.95, 0.01],
            dice_final=0.0198,
            n_tool_actions=2,
            has_tool_action=True,
            stopped_within_budget=False,
        )
        assert floor.r_total == pytest.approx(0.2 * 0.5)  # inner clipped to 0
        # Clip ceiling: perfect final mask plus improvement bonus.
        ceil = rewards.total_reward(
            iou_series=[0.2, 0.6, 1.0],
            dice_final=1.0,
            n_tool_actions=3,
            has_tool_action=True,
            stopped_within_budget=True,
        )
        assert ceil.r_total == pytest.approx(0.2 + 0.8)  # inner clipped to 1


# 5 ---------------------------------------------------------------------------------


def test_grpo_math():
    with criterion("GRPO advantages and clipped surrogate hand cases"):
        assert rewards.group_advantages([1.0, 0.0, 1.0, 0.0]) == [1.0, -1.0, 1.0, -1.0]
        assert rewards.group_advantages([0.4, 0.4, 0.4, 0.4]) == [0.0, 0.0, 0.0, 0.0]
        rng = SplitMix64(3)
        for _ in range(50):
            n = 2 + rng.randint(0, 10)
            vals = [rng.uniform() for _ in range(n)]
            advs = rewards.group_advantages(vals)
            if all(a == 0.0 for a in advs):
                continue
            mean = sum(advs) / n
            std = math.sqrt(sum((a - mean) ** 2 for a in advs) / n)
            assert abs(mean) < 1e-9
            assert abs(std - 1.0) < 1e-9
        assert rewards.grpo_surrogate([1.5], [1.0], epsilon=0.2) == pytest.approx(1.2)
        assert rewards.grpo_surrogate([0.5], [-1.0], epsilon=0.2) == pytest.approx(-0.8)


# 6 ---------------------------------------------------------------------------------


def test_protocol_round_trip():
    with criterion("protocol round trip, golden prompts, coord error <= 1px"):
        rng = SplitMix64(99)
        for _ in range(10_000):
            kind = rng.randint(0, 2)
            if kind == 0:
                a = AddBox(
                    rng.randint(0, 1000), rng.randint(0, 1000),
                    rng.randint(0, 1000), rng.randint(0, 1000),
                )
            elif kind == 1:
                a = AddPoint(
                    rng.randint(0, 1000), rng.randint(0, 1000),
                    "positive" if rng.randint(0, 1) else "negative",
                )
            else:
                a = Stop()
            assert protocol.parse_tool_call(protocol.serialize_tool_call(a)) == a

        assert protocol.render_system_prompt().encode("utf-8") == (
            GOLDEN / "system_prompt.txt"
        ).read_bytes()
        assert protocol.render_initial_turn("the left kidney").encode("utf-8") == (
            GOLDEN / "initial_turn.txt"
        ).read_bytes()
        assert protocol.render_followup_turn().encode("utf-8") == (
            GOLDEN / "followup_turn.txt"
        ).read_bytes()

        worst = max(
            abs(protocol.denormalize_coord(protocol.normalize_coord(p, 1024), 1024) - p)
            for p in range(1024)
        )
        assert worst <= 1


# 7 ---------------------------------------------------------------------------------


def test_multi_turn_superiority():
    with criterion("greedy hybrid beats single box on 100 fixtures"):
        samples = make_fixture_samples(100, size=256, seed=424242)

        def config_for(s):
            h, w = s.dimensions()
            return protocol.EpisodeConfig(width=w, height=h, target=s.target)

        box_trajs = harness.run_episodes(
            harness.SingleBoxPolicy, OracleBackend, samples, config_for,
            base_seed=0, jobs=4,
        )
        hyb_trajs = harness.run_episodes(
            harness.GreedyHybridPolicy, OracleBackend, samples, config_for,
            base_seed=0, jobs=4,
        )
        box_mean = sum(t.final_iou for t in box_trajs) / len(box_trajs)
        hyb_mean = sum(t.final_iou for t in hyb_trajs) / len(hyb_trajs)
        assert hyb_mean >= box_mean
        for s, bt, ht in zip(samples, box_trajs, hyb_trajs):
            gt = s.load_gt()
            session = OracleBackend().open_session(s, stable_key_for(s))
            pred = session.apply(AddBox(*masks.bounding_box(gt)))
            session.close()
            if masks.error_decompose(pred, gt).empty:
                continue
            assert ht.final_iou > bt.final_iou, f"no improvement on {s.sample_id}"
        ts = harness.turn_stats(hyb_trajs)
        assert sum(ts.declined) == 0


def stable_key_for(sample):
    from segforge.rng import stable_key

    return stable_key(0, sample.sample_id)


# 8 ---------------------------------------------------------------------------------


def test_end_to_end_determinism(tmp_path):
    with criterion("CLI pipeline rerun is byte-identical"):
        runner = CliRunner()

        def pipeline(root):
            root.mkdir()
            corpus = root / "corpus"
            args_list = [
                ["fixtures", "--out", str(corpus), "--count", "4", "--size", "128",
                 "--seed", "21"],
                ["synth", "--manifest", str(corpus / "manifest.jsonl"),
                 "--out", str(root / "traj.jsonl"), "--paradigm", "both",
                 "--seed", "21"],
                ["filter", str(root / "traj.jsonl"), "--out", str(root / "kept.jsonl")],
                ["score", str(root / "kept.jsonl"), "--out", str(root / "scores.jsonl"),
                 "--group-key", "id"],
                ["run", "--manifest", str(corpus / "manifest.jsonl"),
                 "--out", str(root / "run.json"), "--policy", "hybrid",
                 "--seed", "21"],
            ]
            stdout = []
            for args in args_list:
                r = runner.invoke(cli_main, args, catch_exceptions=False)
                assert r.exit_code == 0, r.output
                stdout.append(r.output.replace(str(root), "<root>"))
            return stdout

        out_a = pipeline(tmp_path / "a")
        out_b = pipeline(tmp_path / "b")
        assert out_a == out_b
        for name in ("traj.jsonl", "kept.jsonl", "scores.jsonl", "run.json"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes(), f"{name} differs between reruns"
        for png in sorted((tmp_path / "a" / "corpus" / "masks").iterdir()):
            twin = tmp_path / "b" / "corpus" / "masks" / png.name
            assert png.read_bytes() == twin.read_bytes()


# 9 ---------------------------------------------------------------------------------


def test_external_protocol_conformance(tmp_path):
    with criterion("external wire-protocol conformance and failure scoring"):
        gt = np.zeros((64, 64), dtype=bool)
        gt[10:50, 10:22] = True
        gt[38:50, 10:50] = True
        sample = dataio.SampleRecord(sample_id="wire", target="region", gt=gt)
        mask_png = tmp_path / "gt.png"
        dataio.store_mask(gt, mask_png)

        def backend_argv(mode, delay=0.0):
            argv = [sys.executable, "-m", "segforge.doubles", "backend",
                    "--mode", mode, "--mask", str(mask_png)]
            if delay:
                argv += ["--delay", str(delay)]
            return argv

        # Full episode: replayed expert actions against the echo backend.
        expert = synth.synthesize(
            sample, synth.SynthParams(paradigm="box"), OracleBackend(), seed=0
        )
        traj_path = tmp_path / "expert.jsonl"
        dataio.write_trajectories([expert], traj_path)
        policy = harness.ExternalPolicy(
            [sys.executable, "-m", "segforge.doubles", "policy", "--mode", "replay",
             "--trajectory", str(traj_path)]
        )
        backend = ExternalBackend(backend_argv("echo"), timeout=10.0)
        cfg = protocol.EpisodeConfig(
            width=64, height=64, target=sample.target,
            coord_mode=protocol.COORD_MODE_NORMALIZED,
        )
        try:
            traj = harness.run_episode(policy, backend, sample, cfg)
        finally:
            policy.close()
            backend.close()
        assert traj.termination == protocol.TERM_STOPPED
        assert traj.tool_action_count == expert.tool_action_count
        assert traj.final_iou == 1.0  # echo backend returns the stored mask
        assert rewards.trajectory_reward(traj).r_fmt == 1.0

        # Designated error per failure mode, and R_fmt <= 0.5 when scored.
        for mode, err, delay, timeout in (
            ("malformed", MalformedReplyError, 0.0, 10.0),
            ("bad-dims", BackendDimensionError, 0.0, 10.0),
            ("echo", BackendTimeoutError, 5.0, 0.3),
        ):
            bk = ExternalBackend(backend_argv(mode, delay=delay), timeout=timeout)
            session = bk.open_session(sample, 0)
            with pytest.raises(err):
                session.apply(AddPoint(12, 12, "positive"))
            bk.close()

            bk2 = ExternalBackend(backend_argv(mode, delay=delay), timeout=timeout)
            pol = harness.SingleBoxPolicy()
            cfg2 = protocol.EpisodeConfig(width=64, height=64, target=sample.target)
            try:
                failed = harness.run_episode(pol, bk2, sample, cfg2)
            finally:
                bk2.close()
            assert failed.termination == protocol.TERM_BACKEND_ERROR
            assert rewards.trajectory_reward(failed).r_fmt <= 0.5
