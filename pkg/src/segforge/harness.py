"""Multi-turn episode runner for scripted and external policies.

The scripted policies are ground-truth-informed measurement instruments
(single centroid point, single tight box, and the greedy hybrid expert),
not deployable agents. ``turn_stats`` summarizes per-turn improved /
declined / unchanged outcomes; ``aggregate_metrics`` groups mean Dice/IoU
and interaction depth by an arbitrary key.
"""

from __future__ import annotations

import concurrent.futures
import json
import os
import subprocess
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import dataio, masks, protocol
from .actions import Action, AddBox, AddPoint, Stop, is_tool_action
from .backend import BackendError, BackendTimeoutError, BackendClosedError
from .records import Trajectory, TrajectoryStep
from .rng import SplitMix64, stable_key
from .synth import SynthParams, init_action, select_corrective_click

UNCHANGED_EPS = 1e-6


@dataclass
class PolicyContext:
    """Everything a policy may look at when choosing its next reply."""

    target: str
    turn_index: int  # tool actions taken so far
    config: protocol.EpisodeConfig
    history: Sequence[protocol.EpisodeEntry]
    current_mask: Optional[np.ndarray]
    gt: Optional[np.ndarray] = None
    probe: Optional[Callable[[Action], float]] = None  # candidate -> IoU, no commit
    metrics: Optional[dict] = None


class Policy:
    name = "policy"

    def reply(self, ctx: PolicyContext) -> str:
        raise NotImplementedError

    def close(self) -> None:
        pass


def _emit(action: Action, ctx: PolicyContext) -> str:
    if ctx.config.coord_mode == protocol.COORD_MODE_NORMALIZED:
        action = protocol.normalize_action(action, ctx.config.width, ctx.config.height)
    return protocol.serialize_tool_call(action)


class SinglePointPolicy(Policy):
    """Centroid click, then stop."""

    name = "point"

    def reply(self, ctx: PolicyContext) -> str:
        if ctx.turn_index == 0:
            cx, cy = masks.centroid(ctx.gt)
            if not ctx.gt[cy, cx]:
                cx, cy = masks.nearest_foreground(ctx.gt, (cx, cy))
            return _emit(AddPoint(cx, cy, "positive"), ctx)
        return _emit(Stop(), ctx)


class SingleBoxPolicy(Policy):
    """Tight ground-truth bounding box, then stop."""

    name = "box"

    def reply(self, ctx: PolicyContext) -> str:
        if ctx.turn_index == 0:
            return _emit(AddBox(*masks.bounding_box(ctx.gt)), ctx)
        return _emit(Stop(), ctx)


class GreedyHybridPolicy(Policy):
    """The expert simulator repackaged as a policy.

    Initializes with a box (zero jitter by default), then keeps clicking
    while some candidate in ``max_retries`` trials would raise IoU by at
    least tau (verified through the probe); stops otherwise, which makes
    optimal stopping observable without a learned model.
    """

    name = "hybrid"

    def __init__(self, params: Optional[SynthParams] = None, seed: int = 0):
        self.params = params or SynthParams(
            box_jitter_halfwidth=0, click_jitter_sigma=0.0
        )
        self.seed = seed
        self._rng: Optional[SplitMix64] = None

    def reply(self, ctx: PolicyContext) -> str:
        if ctx.gt is None or ctx.probe is None:
            raise ValueError("greedy hybrid policy needs ground truth and a probe")
        if ctx.turn_index == 0:
            self._rng = SplitMix64(stable_key(self.seed, ctx.target, "greedy"))
            return _emit(init_action(ctx.gt, "box", self.params, self._rng), ctx)
        if ctx.turn_index >= ctx.config.max_turns:
            return _emit(Stop(), ctx)
        pred = ctx.current_mask
        cur_iou = masks.iou(pred, ctx.gt)
        err = masks.error_decompose(pred, ctx.gt)
        if err.empty:
            return _emit(Stop(), ctx)
        for trial in range(self.params.max_retries):
            click = select_corrective_click(
                err, trial, self.params.click_jitter_sigma, self._rng
            )
            if ctx.probe(click) - cur_iou >= self.params.tau:
                return _emit(click, ctx)
        return _emit(Stop(), ctx)


class ExternalPolicy(Policy):
    """Line-JSON subprocess policy: one request line per turn, one raw
    reply line back, parsed by the episode state machine."""

    name = "external"

    def __init__(self, argv: Sequence[str], timeout: float = 10.0, workdir: Optional[str] = None):
        self.argv = list(argv)
        self.timeout = timeout
        self._workdir = workdir or tempfile.mkdtemp(prefix="segforge-policy-")
        try:
            self.proc = subprocess.Popen(
                self.argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0
            )
        except OSError as e:
            raise BackendClosedError(f"cannot start policy {argv!r}: {e}") from e
        self._buf = b""

    def reply(self, ctx: PolicyContext) -> str:
        mask_path = None
        if ctx.current_mask is not None:
            mask_path = os.path.join(self._workdir, f"turn_{ctx.turn_index:02d}.png")
            dataio.store_mask(ctx.current_mask, mask_path)
        turn_prompt = (
            protocol.render_initial_turn(ctx.target)
            if ctx.turn_index == 0
            else protocol.render_followup_turn()
        )
        request = {
            "system": protocol.render_system_prompt(),
            "prompt": turn_prompt,
            "turn": ctx.turn_index,
            "metrics": ctx.metrics or {},
            "mask_path": mask_path,
        }
        try:
            self.proc.stdin.write((json.dumps(request) + "\n").encode("utf-8"))
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            raise BackendClosedError(f"policy pipe broken: {e}") from e
        line = self._read_line()
        # Replies are JSON-enveloped so multi-line tool-call text survives
        # the line-delimited channel; a bare line is taken as the raw reply.
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            return line
        if isinstance(obj, dict) and isinstance(obj.get("reply"), str):
            return obj["reply"]
        return line

    def _read_line(self) -> str:
        import select

        fd = self.proc.stdout.fileno()
        while b"\n" not in self._buf:
            ready, _, _ = select.select([fd], [], [], self.timeout)
            if not ready:
                raise BackendTimeoutError(f"policy reply not within {self.timeout}s")
            chunk = os.read(fd, 65536)
            if not chunk:
                raise BackendClosedError("policy closed its output stream")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line.decode("utf-8", errors="replace")

    def close(self) -> None:
        try:
            if self.proc.stdin and not self.proc.stdin.closed:
                self.proc.stdin.close()
        except OSError:
            pass
        try:
            self.proc.wait(timeout=2)
        except subprocess.TimeoutExpired:
            self.proc.kill()


def run_episode(
    policy: Policy,
    backend,
    sample,
    config: protocol.EpisodeConfig,
    seed: int = 0,
    evaluate: bool = True,
) -> Trajectory:
    """Drive one episode to termination and record it as a trajectory.

    Per-turn IoU/Dice against ground truth are recorded in evaluation
    mode; policy/backend failures become termination causes rather than
    exceptions.
    """
    gt = masks.as_mask(sample.load_gt()) if evaluate or _needs_gt(policy) else None
    session = backend.open_session(sample, seed)
    state = protocol.EpisodeState(config=config)
    traj = Trajectory(
        sample_id=sample.sample_id,
        paradigm=policy.name,
        seed=seed,
        width=config.width,
        height=config.height,
    )

    def probe(action: Action) -> float:
        mask = session.apply(action)
        value = masks.iou(mask, gt)
        session.rollback_last()
        return value

    try:
        while not state.done:
            ctx = PolicyContext(
                target=sample.target,
                turn_index=state.turns_used,
                config=config,
                history=state.history,
                current_mask=state.current_observation,
                gt=gt,
                probe=probe if gt is not None else None,
                metrics=_last_metrics(traj),
            )
            try:
                reply = policy.reply(ctx)
            except (BackendError, OSError):
                state._finish(protocol.TERM_BACKEND_ERROR)
                break
            before = len(state.history)
            protocol.episode_step(state, reply, session)
            for entry in state.history[before:]:
                if is_tool_action(entry.action) and gt is not None:
                    iou_v = masks.iou(entry.observation, gt)
                    dice_v = masks.dice(entry.observation, gt)
                elif traj.steps:
                    iou_v, dice_v = traj.steps[-1].iou_after, traj.steps[-1].dice_after
                else:
                    iou_v, dice_v = 0.0, 0.0
                traj.steps.append(
                    TrajectoryStep(
                        turn=len(traj.steps),
                        action=entry.action,
                        iou_after=iou_v,
                        dice_after=dice_v,
                        retries_used=0,
                    )
                )
    finally:
        session.close()
    traj.termination = state.termination
    traj.stopped = state.termination == protocol.TERM_STOPPED
    series = traj.iou_series
    traj.final_iou = series[-1] if series else 0.0
    # Acceptance is a synthesis-filter concept; episode records leave it
    # unset and cmd_filter can relabel by final IoU if needed.
    traj.accepted = False
    return traj


def _needs_gt(policy: Policy) -> bool:
    return isinstance(policy, (SinglePointPolicy, SingleBoxPolicy, GreedyHybridPolicy))


def _last_metrics(traj: Trajectory) -> dict:
    if not traj.steps:
        return {}
    last = traj.steps[-1]
    return {"iou": round(last.iou_after, 6), "dice": round(last.dice_after, 6)}


# --- statistics -----------------------------------------------------------------


@dataclass
class TurnStats:
    """Per-turn outcome counts. Index t describes the transition into the
    t-th tool action (t >= 1); turn 0 is initialization only."""

    active: list[int] = field(default_factory=list)
    improved: list[int] = field(default_factory=list)
    declined: list[int] = field(default_factory=list)
    unchanged: list[int] = field(default_factory=list)
    mean_iou_active: list[float] = field(default_factory=list)
    mean_iou_all: list[float] = field(default_factory=list)
    total: int = 0

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "active": self.active,
            "improved": self.improved,
            "declined": self.declined,
            "unchanged": self.unchanged,
            "mean_iou_active": [round(v, 6) for v in self.mean_iou_active],
            "mean_iou_all": [round(v, 6) for v in self.mean_iou_all],
        }


def turn_stats(trajectories: Sequence[Trajectory]) -> TurnStats:
    series_list = [t.iou_series for t in trajectories if t.iou_series]
    stats = TurnStats(total=len(series_list))
    if not series_list:
        return stats
    max_len = max(len(s) for s in series_list)
    for t in range(max_len):
        active = [s for s in series_list if len(s) > t]
        stats.active.append(len(active))
        stats.mean_iou_active.append(sum(s[t] for s in active) / len(active))
        # Full-denominator variant: finished samples carry their final IoU.
        carried = [s[min(t, len(s) - 1)] for s in series_list]
        stats.mean_iou_all.append(sum(carried) / len(carried))
        if t == 0:
            stats.improved.append(0)
            stats.declined.append(0)
            stats.unchanged.append(0)
            continue
        imp = dec = unc = 0
        for s in active:
            delta = s[t] - s[t - 1]
            if delta > UNCHANGED_EPS:
                imp += 1
            elif delta < -UNCHANGED_EPS:
                dec += 1
            else:
                unc += 1
        stats.improved.append(imp)
        stats.declined.append(dec)
        stats.unchanged.append(unc)
    return stats


def aggregate_metrics(
    trajectories: Sequence[Trajectory],
    group_key: Optional[Callable[[Trajectory], str]] = None,
) -> dict:
    """Unweighted per-group mean final Dice/IoU and mean tool-action count."""
    groups: dict[str, list[Trajectory]] = {}
    for t in trajectories:
        key = group_key(t) if group_key is not None else "all"
        groups.setdefault(key, []).append(t)
    out = {}
    for key in sorted(groups):
        members = groups[key]
        dices = [t.dice_series[-1] if t.dice_series else 0.0 for t in members]
        ious = [t.iou_series[-1] if t.iou_series else 0.0 for t in members]
        turns = [t.tool_action_count for t in members]
        n = len(members)
        out[key] = {
            "count": n,
            "mean_dice": round(sum(dices) / n, 6),
            "mean_iou": round(sum(ious) / n, 6),
            "mean_turns": round(sum(turns) / n, 6),
        }
    return out


def run_episodes(
    policy_factory: Callable[[], Policy],
    backend_factory: Callable[[], object],
    samples: Sequence,
    config_for: Callable[[object], protocol.EpisodeConfig],
    base_seed: int,
    jobs: int = 1,
) -> list[Trajectory]:
    """Run independent episodes over samples, results in input order."""
    import threading

    local = threading.local()

    def worker(sample):
        if not hasattr(local, "policy"):
            local.policy = policy_factory()
            local.backend = backend_factory()
        seed = stable_key(base_seed, sample.sample_id)
        return run_episode(local.policy, local.backend, sample, config_for(sample), seed)

    if jobs <= 1:
        return [worker(s) for s in samples]
    with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, samples))
