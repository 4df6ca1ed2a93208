"""Reward stack and group-relative advantage math, as pure functions over
recorded metric series. Nothing here is differentiated or optimized; the
clipped surrogate is evaluated, never trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .records import Trajectory

STD_FLOOR = 1e-9


@dataclass(frozen=True)
class RewardWeights:
    w_iou: float = 0.5
    w_dice: float = 0.5
    w1: float = 0.2  # format weight
    w2: float = 0.8  # clipped quality/process weight
    lambda1: float = 0.1  # improvement bonus
    lambda2: float = 1.0  # overshoot penalty
    lambda3: float = 0.01  # tool cost
    clip_lo: float = 0.0
    clip_hi: float = 1.0

    def __post_init__(self):
        fields = (self.w_iou, self.w_dice, self.w1, self.w2, self.lambda1, self.lambda2, self.lambda3)
        if any(v < 0 for v in fields):
            raise ValueError("reward weights must be nonnegative")
        if self.clip_lo > self.clip_hi:
            raise ValueError("clip_lo must not exceed clip_hi")


@dataclass(frozen=True)
class RewardBreakdown:
    r_fmt: float
    r_qual: float
    r_imp: float
    r_over: float
    r_cost: float
    r_total: float


def format_reward(has_tool_action: bool, stopped_within_budget: bool) -> float:
    """Half a point for using an interaction primitive, half for a clean stop."""
    return 0.5 * bool(has_tool_action) + 0.5 * bool(stopped_within_budget)


def quality_reward(iou_final: float, dice_final: float, weights: RewardWeights = RewardWeights()) -> float:
    if not (0.0 <= iou_final <= 1.0 and 0.0 <= dice_final <= 1.0):
        raise ValueError("final metrics must be in [0, 1]")
    return weights.w_iou * iou_final + weights.w_dice * dice_final


def improvement_bonus(iou_series: Sequence[float]) -> float:
    """Sum of positive per-turn IoU deltas over the observation series."""
    if len(iou_series) == 0:
        return 0.0
    return sum(max(0.0, b - a) for a, b in zip(iou_series, iou_series[1:]))


def overshoot_penalty(iou_series: Sequence[float]) -> float:
    """Peak IoU minus final IoU; zero iff the series peaks at the end."""
    if len(iou_series) == 0:
        return 0.0
    return max(iou_series) - iou_series[-1]


def tool_cost(n_tool_actions: int) -> float:
    """Raw tool-action count; stop is free. Scaled by lambda3 in the total."""
    if n_tool_actions < 0:
        raise ValueError("action count must be nonnegative")
    return float(n_tool_actions)


def total_reward(
    iou_series: Sequence[float],
    dice_final: float,
    n_tool_actions: int,
    has_tool_action: bool,
    stopped_within_budget: bool,
    weights: RewardWeights = RewardWeights(),
) -> RewardBreakdown:
    r_fmt = format_reward(has_tool_action, stopped_within_budget)
    if len(iou_series) == 0:
        r_qual = 0.0
    else:
        r_qual = quality_reward(iou_series[-1], dice_final, weights)
    r_imp = improvement_bonus(iou_series)
    r_over = overshoot_penalty(iou_series)
    r_cost = tool_cost(n_tool_actions)
    inner = (
        r_qual
        + weights.lambda1 * r_imp
        - weights.lambda2 * r_over
        - weights.lambda3 * r_cost
    )
    clipped = min(max(inner, weights.clip_lo), weights.clip_hi)
    return RewardBreakdown(
        r_fmt=r_fmt,
        r_qual=r_qual,
        r_imp=r_imp,
        r_over=r_over,
        r_cost=r_cost,
        r_total=weights.w1 * r_fmt + weights.w2 * clipped,
    )


def trajectory_reward(traj: Trajectory, weights: RewardWeights = RewardWeights()) -> RewardBreakdown:
    series = traj.iou_series
    dice_final = traj.dice_series[-1] if traj.dice_series else 0.0
    return total_reward(
        iou_series=series,
        dice_final=dice_final,
        n_tool_actions=traj.tool_action_count,
        has_tool_action=traj.tool_action_count > 0,
        stopped_within_budget=traj.stopped,
        weights=weights,
    )


def group_advantages(rewards: Sequence[float]) -> list[float]:
    """Group-normalized advantages with population standard deviation.

    Degenerate groups (std below 1e-9) get all-zero advantages instead of
    a division blow-up.
    """
    n = len(rewards)
    if n < 1:
        raise ValueError("group must contain at least one reward")
    mean = sum(rewards) / n
    var = sum((r - mean) ** 2 for r in rewards) / n
    std = math.sqrt(var)
    if std < STD_FLOOR:
        return [0.0] * n
    return [(r - mean) / std for r in rewards]


def grpo_surrogate(
    ratios: Sequence[float],
    advantages: Sequence[float],
    epsilon: float = 0.2,
) -> float:
    """Mean of min(ratio * A, clip(ratio, 1-eps, 1+eps) * A) over the group."""
    if len(ratios) != len(advantages):
        raise ValueError("ratios and advantages must have equal length")
    if len(ratios) == 0:
        raise ValueError("empty group")
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must be in (0, 1)")
    total = 0.0
    for r, a in zip(ratios, advantages):
        if r <= 0.0:
            raise ValueError(f"ratio must be positive, got {r}")
        clipped = min(max(r, 1.0 - epsilon), 1.0 + epsilon)
        total += min(r * a, clipped * a)
    return total / len(ratios)
