"""Shared record types: trajectories, steps, and corpus bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .actions import Action, is_tool_action

PARADIGM_BOX = "box"  # Box-to-Point: box first, corrective clicks after
PARADIGM_CLICK = "click"  # Sequential-Click: centroid click first
PARADIGM_HYBRID = "hybrid"  # per-sample coin flip between the two

PARADIGMS = (PARADIGM_BOX, PARADIGM_CLICK, PARADIGM_HYBRID)


@dataclass(frozen=True)
class TrajectoryStep:
    turn: int
    action: Action  # pixel coordinates
    iou_after: float
    dice_after: float
    retries_used: int


@dataclass
class Trajectory:
    sample_id: str
    paradigm: str  # resolved paradigm: "box" or "click"
    seed: int
    width: int
    height: int
    steps: list[TrajectoryStep] = field(default_factory=list)
    final_iou: float = 0.0
    accepted: bool = False
    stopped: bool = True  # ended by a deliberate stop (vs budget/failure)
    termination: Optional[str] = None
    failure: Optional[str] = None

    @property
    def tool_action_count(self) -> int:
        return sum(1 for s in self.steps if is_tool_action(s.action))

    @property
    def iou_series(self) -> list[float]:
        return [s.iou_after for s in self.steps if is_tool_action(s.action)]

    @property
    def dice_series(self) -> list[float]:
        return [s.dice_after for s in self.steps if is_tool_action(s.action)]


@dataclass
class FilterStats:
    generated: dict[str, int] = field(default_factory=dict)
    accepted: dict[str, int] = field(default_factory=dict)
    failed: int = 0

    def record(self, traj: Trajectory) -> None:
        self.generated[traj.paradigm] = self.generated.get(traj.paradigm, 0) + 1
        if traj.accepted:
            self.accepted[traj.paradigm] = self.accepted.get(traj.paradigm, 0) + 1
        if traj.failure is not None:
            self.failed += 1

    def as_dict(self) -> dict:
        return {
            "generated": dict(sorted(self.generated.items())),
            "accepted": dict(sorted(self.accepted.items())),
            "failed": self.failed,
        }
