"""The tool-calling wire protocol and the multi-turn episode state machine.

The prompt templates and the ``<tool_call>`` text format are treated as a
normative wire format: rendering is byte-exact (golden-file tested) and
canonical on the way out, while parsing tolerates surrounding chatter,
whitespace, and JSON key order on the way in.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .actions import NEGATIVE, POSITIVE, Action, AddBox, AddPoint, Stop, is_tool_action
from .rng import round_half_up

TOOL_ADD_BBOX = "add_bbox"
TOOL_ADD_POINT = "add_point"
TOOL_STOP = "stop_action"

TOOLS = [
    {
        "type": "function",
        "function": {
            "name": TOOL_ADD_BBOX,
            "description": "Add a bounding box to initialize or refine the segmentation.",
            "parameters": {
                "type": "object",
                "properties": {
                    "bbox_2d": {
                        "type": "array",
                        "items": {"type": "integer"},
                        "minItems": 4,
                        "maxItems": 4,
                        "description": "2D bounding box in [x1, y1, x2, y2] format",
                    }
                },
                "required": ["bbox_2d"],
            },
        },
    },
    {
        "type": "function",
        "function": {
            "name": TOOL_ADD_POINT,
            "description": "Add a point to refine the mask (positive to include areas, negative to exclude areas).",
            "parameters": {
                "type": "object",
                "properties": {
                    "point_2d": {
                        "type": "array",
                        "items": {"type": "integer"},
                        "minItems": 2,
                        "maxItems": 2,
                        "description": "2D coordinate point in [x, y] format",
                    },
                    "point_type": {"type": "string", "enum": ["positive", "negative"]},
                },
                "required": ["point_2d", "point_type"],
            },
        },
    },
    {
        "type": "function",
        "function": {
            "name": TOOL_STOP,
            "description": "Stop the refinement process when the mask accurately covers the target object.",
            "parameters": {"type": "object", "properties": {}},
        },
    },
]


def tools_json() -> str:
    return json.dumps(TOOLS, indent=2)


_SYSTEM_TEMPLATE = """You are a professional segmentation annotator specializing in mask creation and refinement. Your core task is to segment the USER-SPECIFIED TARGET REGION from the provided image. No preliminary mask is available—you must first create an initial mask using the tool, then iteratively refine it to achieve pixel-level accuracy. The mask will be displayed as a semi-transparent green overlay; your goal is to ensure it exactly covers the entire target region and excludes all non-target areas (e.g., background, adjacent objects).

# Tools

You must call one function to assist with the user query. You are provided with function signatures within <tools></tools> XML tags:
<tools>
{tools}
</tools>

For each function call, return a json object with function name and arguments within <tool_call></tool_call> XML tags:
<tool_call>
{{"name": <function-name>, "arguments": <args-json-object>}}
</tool_call>

Only use the provided functions to complete your task. Do not invent or assume any other functions. Carefully consider the current mask state before each action."""


def render_system_prompt() -> str:
    return _SYSTEM_TEMPLATE.format(tools=tools_json())


def render_initial_turn(target: str) -> str:
    return (
        f"<image> The target to be segmented is: {target}.\n"
        "Now, please analyze the original image, then decide your first action."
    )


def render_followup_turn() -> str:
    return (
        "<image> Here is the updated mask after your previous action. "
        "Based on this, what is your next action? If the mask is now accurate, "
        "you can call 'stop_action' to finish."
    )


# --- tool-call text format ---------------------------------------------------


class ToolCallError(ValueError):
    """Base class for protocol violations in a model reply."""


class NoToolCallError(ToolCallError):
    pass


class MultipleToolCallsError(ToolCallError):
    pass


class MalformedToolCallError(ToolCallError):
    """JSON that does not decode or lacks the name/arguments structure."""


class UnknownToolError(ToolCallError):
    pass


class BadArgumentsError(ToolCallError):
    """Wrong arity, wrong type, or bad enum value."""


class CoordinateRangeError(ToolCallError):
    pass


def action_to_wire(a: Action) -> dict:
    """{"name": ..., "arguments": ...} object for an action."""
    if isinstance(a, Stop):
        return {"name": TOOL_STOP, "arguments": {}}
    if isinstance(a, AddBox):
        return {"name": TOOL_ADD_BBOX, "arguments": {"bbox_2d": [a.x1, a.y1, a.x2, a.y2]}}
    if isinstance(a, AddPoint):
        return {
            "name": TOOL_ADD_POINT,
            "arguments": {"point_2d": [a.x, a.y], "point_type": a.polarity},
        }
    raise TypeError(f"not an action: {a!r}")


def serialize_tool_call(a: Action) -> str:
    body = json.dumps(action_to_wire(a))
    return f"<tool_call>\n{body}\n</tool_call>"


_SPAN_RE = re.compile(r"<tool_call>(.*?)</tool_call>", re.DOTALL)


def action_from_wire(obj: object, coord_max: Optional[int] = None) -> Action:
    if not isinstance(obj, dict):
        raise MalformedToolCallError("tool call is not a JSON object")
    name = obj.get("name")
    args = obj.get("arguments")
    if not isinstance(name, str) or not isinstance(args, dict):
        raise MalformedToolCallError("tool call must carry a name and an arguments object")
    if name == TOOL_STOP:
        return Stop()
    if name == TOOL_ADD_BBOX:
        coords = _int_list(args.get("bbox_2d"), 4, "bbox_2d", coord_max)
        return AddBox(*coords)
    if name == TOOL_ADD_POINT:
        coords = _int_list(args.get("point_2d"), 2, "point_2d", coord_max)
        ptype = args.get("point_type")
        if ptype not in (POSITIVE, NEGATIVE):
            raise BadArgumentsError(f"point_type must be positive or negative, got {ptype!r}")
        return AddPoint(coords[0], coords[1], ptype)
    raise UnknownToolError(f"unknown tool {name!r}")


def _int_list(v: object, n: int, field_name: str, coord_max: Optional[int]) -> list[int]:
    if not isinstance(v, list) or len(v) != n:
        raise BadArgumentsError(f"{field_name} must be a list of {n} integers, got {v!r}")
    out = []
    for c in v:
        if isinstance(c, bool) or not isinstance(c, int):
            raise BadArgumentsError(f"{field_name} must contain integers, got {c!r}")
        if c < 0 or (coord_max is not None and c > coord_max):
            raise CoordinateRangeError(f"coordinate {c} out of range in {field_name}")
        out.append(c)
    return out


def parse_tool_call(reply: str, coord_max: Optional[int] = None) -> Action:
    """Extract and validate the single tool call in a model reply.

    Free text around the span is ignored; more than one span is a
    protocol violation ("single action per turn").
    """
    spans = _SPAN_RE.findall(reply)
    if not spans:
        raise NoToolCallError("no <tool_call> span in reply")
    if len(spans) > 1:
        raise MultipleToolCallsError(f"{len(spans)} tool_call spans in one reply")
    try:
        obj = json.loads(spans[0].strip())
    except json.JSONDecodeError as e:
        raise MalformedToolCallError(f"bad JSON in tool call: {e}") from e
    return action_from_wire(obj, coord_max=coord_max)


# --- coordinate normalization -------------------------------------------------

COORD_SCALE = 1000


def normalize_coord(p: int, extent: int) -> int:
    """Pixel index in [0, extent) to an integer in [0, 1000]."""
    if not 0 <= p < extent:
        raise ValueError(f"pixel {p} out of range for extent {extent}")
    if extent == 1:
        return 0
    n = round_half_up(p * COORD_SCALE / (extent - 1))
    return min(max(n, 0), COORD_SCALE)


def denormalize_coord(n: int, extent: int) -> int:
    """Integer in [0, 1000] back to a pixel index in [0, extent)."""
    if not 0 <= n <= COORD_SCALE:
        raise ValueError(f"normalized coordinate {n} out of [0, {COORD_SCALE}]")
    p = round_half_up(n * (extent - 1) / COORD_SCALE)
    return min(max(p, 0), extent - 1)


def normalize_action(a: Action, width: int, height: int) -> Action:
    if isinstance(a, AddBox):
        return AddBox(
            normalize_coord(a.x1, width),
            normalize_coord(a.y1, height),
            normalize_coord(a.x2, width),
            normalize_coord(a.y2, height),
        )
    if isinstance(a, AddPoint):
        return AddPoint(normalize_coord(a.x, width), normalize_coord(a.y, height), a.polarity)
    return a


def denormalize_action(a: Action, width: int, height: int) -> Action:
    if isinstance(a, AddBox):
        return AddBox(
            denormalize_coord(a.x1, width),
            denormalize_coord(a.y1, height),
            denormalize_coord(a.x2, width),
            denormalize_coord(a.y2, height),
        )
    if isinstance(a, AddPoint):
        return AddPoint(
            denormalize_coord(a.x, width), denormalize_coord(a.y, height), a.polarity
        )
    return a


# --- episode state machine ----------------------------------------------------

TERM_STOPPED = "stopped"
TERM_BUDGET = "budget_exhausted"
TERM_PARSE_FAILURE = "parse_failure"
TERM_BACKEND_ERROR = "backend_error"

COORD_MODE_PIXEL = "pixel"
COORD_MODE_NORMALIZED = "normalized"


@dataclass
class EpisodeConfig:
    width: int
    height: int
    target: str = ""
    max_turns: int = 5
    coord_mode: str = COORD_MODE_PIXEL

    def __post_init__(self):
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        if self.coord_mode not in (COORD_MODE_PIXEL, COORD_MODE_NORMALIZED):
            raise ValueError(f"bad coord_mode {self.coord_mode!r}")


@dataclass
class EpisodeEntry:
    action: Action  # pixel coordinates
    observation: Optional[np.ndarray]  # prediction after the action


@dataclass
class EpisodeState:
    config: EpisodeConfig
    history: list[EpisodeEntry] = field(default_factory=list)
    turns_used: int = 0
    done: bool = False
    termination: Optional[str] = None

    @property
    def current_observation(self) -> Optional[np.ndarray]:
        for entry in reversed(self.history):
            if entry.observation is not None:
                return entry.observation
        return None

    def _finish(self, cause: str) -> None:
        if self.done:
            raise RuntimeError("episode already finished")
        self.done = True
        self.termination = cause


def _check_pixel_bounds(a: Action, width: int, height: int) -> None:
    if isinstance(a, AddBox):
        xs, ys = (a.x1, a.x2), (a.y1, a.y2)
    elif isinstance(a, AddPoint):
        xs, ys = (a.x,), (a.y,)
    else:
        return
    if any(x >= width for x in xs) or any(y >= height for y in ys):
        raise CoordinateRangeError(f"{a!r} out of bounds for {width}x{height}")


def episode_step(state: EpisodeState, reply: str, session) -> EpisodeState:
    """Advance the episode by one model reply.

    Stop does not consume a turn; after the last allowed tool action the
    agent gets one more reply in which only stop is acceptable.
    """
    if state.done:
        raise RuntimeError("cannot step a finished episode")
    cfg = state.config
    coord_max = COORD_SCALE if cfg.coord_mode == COORD_MODE_NORMALIZED else None
    try:
        action = parse_tool_call(reply, coord_max=coord_max)
        if cfg.coord_mode == COORD_MODE_PIXEL:
            _check_pixel_bounds(action, cfg.width, cfg.height)
    except ToolCallError:
        state._finish(TERM_PARSE_FAILURE)
        return state

    if isinstance(action, Stop):
        # Observation inherited from the previous action.
        state.history.append(EpisodeEntry(action=action, observation=None))
        state._finish(TERM_STOPPED)
        return state

    if state.turns_used >= cfg.max_turns:
        state._finish(TERM_BUDGET)
        return state

    if cfg.coord_mode == COORD_MODE_NORMALIZED:
        action = denormalize_action(action, cfg.width, cfg.height)
    try:
        mask = session.apply(action)
    except Exception:
        state._finish(TERM_BACKEND_ERROR)
        return state
    state.history.append(EpisodeEntry(action=action, observation=mask))
    state.turns_used += 1
    return state


def tool_action_count(state: EpisodeState) -> int:
    return sum(1 for e in state.history if is_tool_action(e.action))
