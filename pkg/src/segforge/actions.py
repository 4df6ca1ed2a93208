"""The action space: box prompts, point prompts, and the stop signal."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass(frozen=True)
class AddBox:
    x1: int
    y1: int
    x2: int
    y2: int

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class AddPoint:
    x: int
    y: int
    polarity: str  # POSITIVE or NEGATIVE

    def __post_init__(self):
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"bad polarity: {self.polarity!r}")

    @property
    def point(self) -> tuple[int, int]:
        return (self.x, self.y)

    @property
    def positive(self) -> bool:
        return self.polarity == POSITIVE


@dataclass(frozen=True)
class Stop:
    pass


Action = Union[AddBox, AddPoint, Stop]


def is_tool_action(a: Action) -> bool:
    """True for actions that invoke the segmentation backend."""
    return not isinstance(a, Stop)
