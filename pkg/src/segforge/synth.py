"""Expert trajectory synthesis: hybrid box/click initialization, error-driven
corrective clicks, progress-constrained retries, early stop, and the global
IoU filter.

Every candidate click must raise IoU by at least ``tau`` or it is rolled
back from the backend session and resampled; after ``max_retries`` failed
trials the trajectory terminates early. Determinism is guaranteed by
(base seed, params, sample set): all jitter comes from a splitmix stream
keyed by the per-sample seed.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import masks
from .actions import NEGATIVE, POSITIVE, Action, AddBox, AddPoint
from .backend import BackendError
from .records import (
    PARADIGM_BOX,
    PARADIGM_CLICK,
    PARADIGM_HYBRID,
    PARADIGMS,
    FilterStats,
    Trajectory,
    TrajectoryStep,
)
from .rng import SplitMix64, round_half_up, stable_key


@dataclass(frozen=True)
class SynthParams:
    tau: float = 0.04  # minimum per-click IoU gain
    max_clicks: int = 5  # refinement clicks after initialization
    max_retries: int = 5  # candidate trials per refinement turn
    box_jitter_halfwidth: int = 5  # per-coordinate uniform box jitter
    click_jitter_sigma: float = 2.0  # Gaussian click jitter (pixels)
    filter_min_iou: float = 0.7  # global acceptance filter
    paradigm: str = PARADIGM_HYBRID

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must be in (0, 1)")
        if self.max_clicks < 1 or self.max_retries < 1:
            raise ValueError("max_clicks and max_retries must be >= 1")
        if not 0.0 <= self.filter_min_iou <= 1.0:
            raise ValueError("filter_min_iou must be in [0, 1]")
        if self.box_jitter_halfwidth < 0 or self.click_jitter_sigma < 0:
            raise ValueError("jitter magnitudes must be nonnegative")
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"paradigm must be one of {PARADIGMS}")


def _clamp(v: int, lo: int, hi: int) -> int:
    return min(max(v, lo), hi)


def init_action(
    gt: np.ndarray, paradigm: str, params: SynthParams, rng: SplitMix64
) -> Action:
    """First prompt: jittered tight box, or jittered centroid click.

    Box coordinates are jittered independently, clamped in-bounds, and
    re-ordered. A jittered centroid that leaves the ground truth is
    snapped to the nearest ground-truth pixel so the opening click of a
    Sequential-Click trajectory always lands on target.
    """
    gt = masks.as_mask(gt)
    if not gt.any():
        raise masks.EmptyMaskError("cannot initialize on an empty ground truth")
    h, w = gt.shape
    if paradigm == PARADIGM_BOX:
        x1, y1, x2, y2 = masks.bounding_box(gt)
        j = params.box_jitter_halfwidth
        if j > 0:
            x1 += rng.randint(-j, j)
            y1 += rng.randint(-j, j)
            x2 += rng.randint(-j, j)
            y2 += rng.randint(-j, j)
        x1, x2 = _clamp(x1, 0, w - 1), _clamp(x2, 0, w - 1)
        y1, y2 = _clamp(y1, 0, h - 1), _clamp(y2, 0, h - 1)
        return AddBox(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))
    if paradigm == PARADIGM_CLICK:
        cx, cy = masks.centroid(gt)
        dx, dy = rng.gauss_pair(params.click_jitter_sigma)
        px = _clamp(cx + round_half_up(dx), 0, w - 1)
        py = _clamp(cy + round_half_up(dy), 0, h - 1)
        if not gt[py, px]:
            px, py = masks.nearest_foreground(gt, (px, py))
        return AddPoint(px, py, POSITIVE)
    raise ValueError(f"paradigm must be resolved to box or click, got {paradigm!r}")


def select_corrective_click(
    err: masks.ErrorDecomposition,
    trial: int,
    sigma: float,
    rng: SplitMix64,
) -> AddPoint:
    """Pick the next corrective click from the dominant error mask.

    The FN mask is targeted with a positive click when strictly larger
    than the FP mask, otherwise the FP mask with a negative click. Trial
    0 clicks the interior peak of the largest component; later trials
    cycle through components by descending area and add Gaussian jitter,
    snapping back into the target mask if the jitter exits it.
    """
    fn_area = int(np.count_nonzero(err.fn_mask))
    fp_area = int(np.count_nonzero(err.fp_mask))
    if fn_area == 0 and fp_area == 0:
        raise masks.EmptyMaskError("no error region to click")
    if fn_area > fp_area:
        target, polarity = err.fn_mask, POSITIVE
    else:
        target, polarity = err.fp_mask, NEGATIVE

    comps = masks.connected_components(target)
    # Descending area; equal areas keep raster order of first pixel.
    order = sorted(range(1, comps.count + 1), key=lambda lbl: -int(comps.areas[lbl - 1]))
    label = order[trial % len(order)]
    comp = comps.component_mask(label)
    px, py = masks.interior_peak(comp)
    if trial > 0:
        dx, dy = rng.gauss_pair(sigma)
        h, w = target.shape
        px = _clamp(px + round_half_up(dx), 0, w - 1)
        py = _clamp(py + round_half_up(dy), 0, h - 1)
        if not target[py, px]:
            px, py = masks.nearest_foreground(target, (px, py))
    return AddPoint(px, py, polarity)


def resolve_paradigm(paradigm: str, rng: SplitMix64) -> str:
    if paradigm == PARADIGM_HYBRID:
        return PARADIGM_BOX if rng.uniform() < 0.5 else PARADIGM_CLICK
    return paradigm


def synthesize(sample, params: SynthParams, backend, seed: int) -> Trajectory:
    """Run the full generation loop for one sample.

    The first action is exempt from the gain threshold; each refinement
    click is accepted only if it raises IoU by at least tau, with failed
    candidates rolled back from the session so the accepted history is
    the sole backend state.
    """
    gt = masks.as_mask(sample.load_gt())
    h, w = gt.shape
    rng = SplitMix64(stable_key(seed, sample.sample_id, "synth"))
    paradigm = resolve_paradigm(params.paradigm, rng)
    traj = Trajectory(
        sample_id=sample.sample_id,
        paradigm=paradigm,
        seed=seed,
        width=w,
        height=h,
    )
    try:
        session = backend.open_session(sample, seed)
    except BackendError as e:
        traj.failure = f"open_session: {e}"
        return traj
    try:
        a0 = init_action(gt, paradigm, params, rng)
        pred = session.apply(a0)
        cur_iou = masks.iou(pred, gt)
        traj.steps.append(
            TrajectoryStep(
                turn=0,
                action=a0,
                iou_after=cur_iou,
                dice_after=masks.dice(pred, gt),
                retries_used=0,
            )
        )
        for turn in range(1, params.max_clicks + 1):
            err = masks.error_decompose(pred, gt)
            if err.empty:
                break
            accepted_step = None
            for trial in range(params.max_retries):
                click = select_corrective_click(err, trial, params.click_jitter_sigma, rng)
                new_pred = session.apply(click)
                new_iou = masks.iou(new_pred, gt)
                if new_iou - cur_iou >= params.tau:
                    accepted_step = TrajectoryStep(
                        turn=turn,
                        action=click,
                        iou_after=new_iou,
                        dice_after=masks.dice(new_pred, gt),
                        retries_used=trial,
                    )
                    pred, cur_iou = new_pred, new_iou
                    break
                session.rollback_last()
            if accepted_step is None:
                break
            traj.steps.append(accepted_step)
        traj.final_iou = cur_iou
        traj.accepted = traj.final_iou >= params.filter_min_iou
    except BackendError as e:
        # Keep the partial steps for diagnostics.
        traj.failure = str(e)
        traj.accepted = False
        traj.stopped = False
        if traj.steps:
            traj.final_iou = traj.steps[-1].iou_after
    finally:
        session.close()
    return traj


def per_sample_seed(base_seed: int, sample_id: str) -> int:
    return stable_key(base_seed, sample_id)


def synthesize_batch(
    samples: Sequence,
    params: SynthParams,
    backend_factory: Callable[[], object],
    base_seed: int,
    jobs: int = 1,
    paradigms: Optional[Iterable[str]] = None,
) -> tuple[list[Trajectory], FilterStats]:
    """Synthesize one trajectory per (sample, paradigm), in input order.

    ``paradigms`` defaults to a single pass with ``params.paradigm``; pass
    e.g. ("box", "click") to generate both corpora explicitly. Output
    order is independent of ``jobs``.
    """
    plist = list(paradigms) if paradigms is not None else [params.paradigm]
    tasks = [
        (sample, dataclasses.replace(params, paradigm=p))
        for sample in samples
        for p in plist
    ]
    local = threading.local()

    def worker(task):
        sample, task_params = task
        if not hasattr(local, "backend"):
            local.backend = backend_factory()
        return synthesize(sample, task_params, local.backend, per_sample_seed(base_seed, sample.sample_id))

    if jobs <= 1:
        results = [worker(t) for t in tasks]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(worker, tasks))
    stats = FilterStats()
    for traj in results:
        stats.record(traj)
    return results, stats


def rl_subset_predicate(traj: Trajectory, min_rounds: int = 3, max_rounds: int = 5) -> bool:
    """Accepted trajectories whose interaction depth suits RL training."""
    return traj.accepted and min_rounds <= traj.tool_action_count <= max_rounds
