"""Operator surface: fixtures, synth, filter, score, run, replay, stats.

Configuration precedence is flags > TOML config file > defaults. Data goes
to files or standard output; diagnostics go to standard error. Every
subcommand is deterministic under a fixed seed.
"""

from __future__ import annotations

import json
import os
import shlex
import sys

import click

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import dataio, fixtures, harness, protocol, rewards, synth
from .backend import ExternalBackend, OracleBackend
from .records import PARADIGM_BOX, PARADIGM_CLICK


def _load_config(path):
    if not path:
        return {}
    with open(path, "rb") as f:
        return tomllib.load(f)


def _resolve(ctx, config, name, flag_value):
    """flags > config file > defaults."""
    source = ctx.get_parameter_source(name)
    if source is not None and source.name == "COMMANDLINE":
        return flag_value
    if name in config:
        return config[name]
    return flag_value


def _default_seed() -> int:
    return int(os.environ.get("SEGFORGE_SEED", "0"))


def _make_backend(spec: str):
    if spec == "oracle":
        return OracleBackend()
    if spec.startswith("cmd:"):
        return ExternalBackend(shlex.split(spec[4:]))
    raise click.ClickException(f"unknown backend spec {spec!r} (use 'oracle' or 'cmd:<argv>')")


def _make_policy(spec: str):
    if spec == "point":
        return harness.SinglePointPolicy()
    if spec == "box":
        return harness.SingleBoxPolicy()
    if spec == "hybrid":
        return harness.GreedyHybridPolicy()
    if spec.startswith("cmd:"):
        return harness.ExternalPolicy(shlex.split(spec[4:]))
    raise click.ClickException(
        f"unknown policy spec {spec!r} (use 'point', 'box', 'hybrid', or 'cmd:<argv>')"
    )


@click.group()
def main():
    """Deterministic interactive-segmentation tooling."""


@main.command("fixtures")
@click.option("--out", required=True, type=click.Path(), help="output directory")
@click.option("--count", default=10, show_default=True)
@click.option("--size", default=256, show_default=True)
@click.option("--seed", type=int, default=_default_seed)
def cmd_fixtures(out, count, size, seed):
    """Generate synthetic blob masks plus a sample manifest."""
    manifest = fixtures.write_fixture_corpus(out, count=count, size=size, seed=seed)
    click.echo(json.dumps({"manifest": manifest, "count": count, "size": size, "seed": seed}))


@main.command("synth")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option(
    "--paradigm",
    type=click.Choice(["box", "click", "both", "hybrid"]),
    default="hybrid",
    show_default=True,
)
@click.option("--tau", default=0.04, show_default=True)
@click.option("--max-clicks", default=5, show_default=True)
@click.option("--retries", default=5, show_default=True)
@click.option("--box-jitter", default=5, show_default=True)
@click.option("--click-sigma", default=2.0, show_default=True)
@click.option("--filter-iou", default=0.7, show_default=True)
@click.option("--seed", type=int, default=_default_seed)
@click.option("--jobs", default=1, show_default=True)
@click.option("--backend", "backend_spec", default="oracle", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.pass_context
def cmd_synth(ctx, manifest, out, paradigm, tau, max_clicks, retries, box_jitter,
              click_sigma, filter_iou, seed, jobs, backend_spec, config_path):
    """Synthesize expert trajectories for every sample in the manifest."""
    config = _load_config(config_path)
    paradigm = _resolve(ctx, config, "paradigm", paradigm)
    tau = _resolve(ctx, config, "tau", tau)
    max_clicks = _resolve(ctx, config, "max_clicks", max_clicks)
    retries = _resolve(ctx, config, "retries", retries)
    box_jitter = _resolve(ctx, config, "box_jitter", box_jitter)
    click_sigma = _resolve(ctx, config, "click_sigma", click_sigma)
    filter_iou = _resolve(ctx, config, "filter_iou", filter_iou)
    seed = _resolve(ctx, config, "seed", seed)
    jobs = _resolve(ctx, config, "jobs", jobs)
    backend_spec = _resolve(ctx, config, "backend", backend_spec)

    samples = dataio.read_manifest(manifest)
    paradigms = None
    if paradigm == "both":
        paradigms = (PARADIGM_BOX, PARADIGM_CLICK)
        paradigm = PARADIGM_BOX  # placeholder, overridden per task
    params = synth.SynthParams(
        tau=tau,
        max_clicks=max_clicks,
        max_retries=retries,
        box_jitter_halfwidth=box_jitter,
        click_jitter_sigma=click_sigma,
        filter_min_iou=filter_iou,
        paradigm=paradigm,
    )
    trajs, stats = synth.synthesize_batch(
        samples, params, lambda: _make_backend(backend_spec), seed, jobs=jobs,
        paradigms=paradigms,
    )
    dataio.write_trajectories(trajs, out)
    click.echo(json.dumps(stats.as_dict(), sort_keys=True))
    if stats.failed:
        click.echo(f"{stats.failed} trajectories failed", err=True)
        sys.exit(1)


@main.command("filter")
@click.argument("trajectories", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--filter-iou", default=0.7, show_default=True)
def cmd_filter(trajectories, out, filter_iou):
    """Keep trajectories whose final IoU meets the threshold."""
    trajs, diags = dataio.read_trajectories(trajectories, on_error="skip")
    for d in diags:
        click.echo(d, err=True)
    kept = [t for t in trajs if t.final_iou >= filter_iou]
    dataio.write_trajectories(kept, out)
    click.echo(
        json.dumps(
            {"read": len(trajs), "kept": len(kept), "threshold": filter_iou},
            sort_keys=True,
        )
    )


@main.command("score")
@click.argument("trajectories", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--group-key", default=None, help="trajectory field to group by (e.g. id)")
@click.option("--epsilon", default=0.2, show_default=True)
def cmd_score(trajectories, out, group_key, epsilon):
    """Score trajectories with the reward stack and group advantages."""
    trajs, diags = dataio.read_trajectories(trajectories, on_error="skip")
    for d in diags:
        click.echo(d, err=True)
    weights = rewards.RewardWeights()
    breakdowns = [rewards.trajectory_reward(t, weights) for t in trajs]

    def key_of(t):
        if group_key is None:
            return "all"
        try:
            return str(getattr(t, {"id": "sample_id"}.get(group_key, group_key)))
        except AttributeError:
            raise click.ClickException(f"unknown group key {group_key!r}")

    groups: dict[str, list[int]] = {}
    for i, t in enumerate(trajs):
        groups.setdefault(key_of(t), []).append(i)
    advantages = [0.0] * len(trajs)
    group_report = {}
    for key in sorted(groups):
        idx = groups[key]
        rs = [breakdowns[i].r_total for i in idx]
        advs = rewards.group_advantages(rs)
        for i, a in zip(idx, advs):
            advantages[i] = a
        group_report[key] = {
            "rewards": [round(r, 6) for r in rs],
            "advantages": [round(a, 6) for a in advs],
        }

    with open(out, "w", encoding="utf-8", newline="\n") as f:
        for t, b, adv in zip(trajs, breakdowns, advantages):
            f.write(
                json.dumps(
                    {
                        "id": t.sample_id,
                        "paradigm": t.paradigm,
                        "group": key_of(t),
                        "r_fmt": round(b.r_fmt, 6),
                        "r_qual": round(b.r_qual, 6),
                        "r_imp": round(b.r_imp, 6),
                        "r_over": round(b.r_over, 6),
                        "r_cost": round(b.r_cost, 6),
                        "r_total": round(b.r_total, 6),
                        "advantage": round(adv, 6),
                    }
                )
                + "\n"
            )
    click.echo(json.dumps({"epsilon": epsilon, "groups": group_report}, sort_keys=True))


@main.command("run")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--policy", "policy_spec", default="hybrid", show_default=True)
@click.option("--backend", "backend_spec", default="oracle", show_default=True)
@click.option("--max-turns", default=5, show_default=True)
@click.option("--seed", type=int, default=_default_seed)
@click.option("--jobs", default=1, show_default=True)
@click.option(
    "--group-key",
    type=click.Choice(["modality", "dataset"]),
    default=None,
    help="sample field for metric aggregation",
)
def cmd_run(manifest, out, policy_spec, backend_spec, max_turns, seed, jobs, group_key):
    """Run policy episodes over a manifest and write a run report."""
    samples = dataio.read_manifest(manifest)
    by_id = {s.sample_id: s for s in samples}
    external = policy_spec.startswith("cmd:")
    mode = protocol.COORD_MODE_NORMALIZED if external else protocol.COORD_MODE_PIXEL

    def config_for(sample):
        h, w = sample.dimensions()
        return protocol.EpisodeConfig(
            width=w, height=h, target=sample.target, max_turns=max_turns, coord_mode=mode
        )

    trajs = harness.run_episodes(
        lambda: _make_policy(policy_spec),
        lambda: _make_backend(backend_spec),
        samples,
        config_for,
        base_seed=seed,
        jobs=jobs,
    )
    grouping = None
    if group_key is not None:
        grouping = lambda t: getattr(by_id[t.sample_id], group_key) or "unknown"
    report = {
        "policy": policy_spec,
        "backend": backend_spec,
        "seed": seed,
        "turn_stats": harness.turn_stats(trajs).as_dict(),
        "aggregate_metrics": harness.aggregate_metrics(trajs, grouping),
        "episodes": [dataio.trajectory_to_obj(t) for t in trajs],
    }
    dataio.write_json_report(report, out)
    click.echo(json.dumps(report["aggregate_metrics"], sort_keys=True))


@main.command("replay")
@click.argument("trajectories", type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--backend", "backend_spec", default="oracle", show_default=True)
@click.option("--out", required=True, type=click.Path())
def cmd_replay(trajectories, manifest, backend_spec, out):
    """Re-apply recorded actions against a backend and compare final IoU."""
    from . import masks

    trajs, diags = dataio.read_trajectories(trajectories, on_error="skip")
    for d in diags:
        click.echo(d, err=True)
    samples = {s.sample_id: s for s in dataio.read_manifest(manifest)}
    backend = _make_backend(backend_spec)
    results = []
    for t in trajs:
        sample = samples.get(t.sample_id)
        if sample is None:
            results.append({"id": t.sample_id, "error": "sample not in manifest"})
            continue
        gt = sample.load_gt()
        session = backend.open_session(sample, t.seed)
        achieved = 0.0
        for step in t.steps:
            from .actions import is_tool_action

            if not is_tool_action(step.action):
                continue
            pred = session.apply(step.action)
            achieved = masks.iou(pred, gt)
        session.close()
        results.append(
            {
                "id": t.sample_id,
                "recorded_final_iou": round(t.final_iou, 6),
                "replayed_final_iou": round(achieved, 6),
                "match": abs(achieved - t.final_iou) <= 1e-6,
            }
        )
    dataio.write_json_report({"results": results}, out)
    mismatches = sum(1 for r in results if not r.get("match", False))
    click.echo(json.dumps({"replayed": len(results), "mismatches": mismatches}))


@main.command("stats")
@click.argument("trajectories", type=click.Path(exists=True))
def cmd_stats(trajectories):
    """Corpus summary: paradigm counts, turn histogram, IoU distribution."""
    trajs, diags = dataio.read_trajectories(trajectories, on_error="skip")
    for d in diags:
        click.echo(d, err=True)
    paradigm_counts: dict[str, int] = {}
    accepted_counts: dict[str, int] = {}
    turn_hist: dict[str, int] = {}
    for t in trajs:
        paradigm_counts[t.paradigm] = paradigm_counts.get(t.paradigm, 0) + 1
        if t.accepted:
            accepted_counts[t.paradigm] = accepted_counts.get(t.paradigm, 0) + 1
        k = str(t.tool_action_count)
        turn_hist[k] = turn_hist.get(k, 0) + 1
    finals = sorted(t.final_iou for t in trajs)

    def quantile(q):
        if not finals:
            return 0.0
        i = min(int(q * (len(finals) - 1) + 0.5), len(finals) - 1)
        return round(finals[i], 6)

    summary = {
        "total": len(trajs),
        "paradigm_counts": dict(sorted(paradigm_counts.items())),
        "accepted_counts": dict(sorted(accepted_counts.items())),
        "turn_histogram": dict(sorted(turn_hist.items(), key=lambda kv: int(kv[0]))),
        "final_iou": {
            "min": quantile(0.0),
            "p25": quantile(0.25),
            "median": quantile(0.5),
            "p75": quantile(0.75),
            "max": quantile(1.0),
        },
        "rl_subset_count": sum(1 for t in trajs if synth.rl_subset_predicate(t)),
    }
    click.echo(json.dumps(summary, sort_keys=True))


if __name__ == "__main__":
    main()
