"""Deterministic interactive-segmentation tooling: mask math, an oracle
prompt backend, expert trajectory synthesis, reward and advantage math, a
bit-exact tool-call protocol, and a multi-turn policy harness."""

from .actions import NEGATIVE, POSITIVE, Action, AddBox, AddPoint, Stop
from .masks import dice, error_decompose, iou
from .records import Trajectory, TrajectoryStep
from .rewards import RewardBreakdown, RewardWeights, group_advantages, grpo_surrogate, total_reward
from .synth import SynthParams, synthesize, synthesize_batch

__version__ = "0.1.0"

__all__ = [
    "Action",
    "AddBox",
    "AddPoint",
    "Stop",
    "POSITIVE",
    "NEGATIVE",
    "iou",
    "dice",
    "error_decompose",
    "Trajectory",
    "TrajectoryStep",
    "RewardWeights",
    "RewardBreakdown",
    "total_reward",
    "group_advantages",
    "grpo_surrogate",
    "SynthParams",
    "synthesize",
    "synthesize_batch",
]
