"""Persistence and interchange: samples, PNG masks, trajectory JSONL,
SFT chat serialization, and run reports.

All writers are deterministic byte-for-byte: stable key order, floats
rounded to 6 decimal places, "\\n" line endings. Trajectory actions are
stored in [0, 1000]-normalized coordinates with the image dimensions
recorded alongside, and converted back to pixels on read.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
from PIL import Image

from . import protocol
from .actions import Action, Stop, is_tool_action
from .records import Trajectory, TrajectoryStep


class MaskFormatError(ValueError):
    pass


class CorruptLineError(ValueError):
    def __init__(self, line_number: int, reason: str):
        super().__init__(f"line {line_number}: {reason}")
        self.line_number = line_number
        self.reason = reason


@dataclass
class SampleRecord:
    sample_id: str
    gt_mask_path: Optional[str] = None
    target: str = "target region"
    modality: str = ""
    dataset: str = ""
    image_path: Optional[str] = None
    gt: Optional[np.ndarray] = None  # in-memory override of gt_mask_path

    def load_gt(self) -> np.ndarray:
        if self.gt is not None:
            return self.gt
        if self.gt_mask_path is None:
            raise ValueError(f"sample {self.sample_id!r} has no ground-truth mask")
        self.gt = load_mask(self.gt_mask_path)
        return self.gt

    def dimensions(self) -> tuple[int, int]:
        """(height, width) of the ground-truth grid."""
        return self.load_gt().shape


def load_mask(path) -> np.ndarray:
    """Read a single-channel PNG; any nonzero pixel is foreground."""
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as e:
        raise MaskFormatError(f"cannot read mask {path}: {e}") from e
    if img.mode not in ("L", "1", "I", "I;16"):
        raise MaskFormatError(f"mask {path} must be single-channel, got mode {img.mode}")
    arr = np.asarray(img.convert("I"))
    if arr.size == 0:
        raise MaskFormatError(f"mask {path} has zero area")
    return arr != 0


def store_mask(m: np.ndarray, path) -> None:
    """Write a mask as an 8-bit grayscale PNG with values 0/255."""
    arr = (np.asarray(m, dtype=bool).astype(np.uint8)) * 255
    Image.fromarray(arr, mode="L").save(path, format="PNG")


# --- sample manifests ----------------------------------------------------------


def write_manifest(samples: Iterable[SampleRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            obj = {
                "id": s.sample_id,
                "gt_mask": s.gt_mask_path,
                "target": s.target,
                "modality": s.modality,
                "dataset": s.dataset,
            }
            if s.image_path is not None:
                obj["image"] = s.image_path
            f.write(json.dumps(obj) + "\n")


def read_manifest(path) -> list[SampleRecord]:
    base = Path(path).parent
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = SampleRecord(
                    sample_id=str(obj["id"]),
                    gt_mask_path=_resolve(base, obj.get("gt_mask")),
                    target=obj.get("target", "target region"),
                    modality=obj.get("modality", ""),
                    dataset=obj.get("dataset", ""),
                    image_path=_resolve(base, obj.get("image")),
                )
            except (KeyError, TypeError, json.JSONDecodeError) as e:
                raise CorruptLineError(i, f"bad manifest entry: {e}") from e
            out.append(rec)
    return out


def _resolve(base: Path, p: Optional[str]) -> Optional[str]:
    if p is None:
        return None
    q = Path(p)
    return str(q if q.is_absolute() else base / q)


# --- trajectory JSONL ----------------------------------------------------------


def _r6(x: float) -> float:
    return round(float(x), 6)


def trajectory_to_obj(traj: Trajectory) -> dict:
    steps = []
    for s in traj.steps:
        wire = protocol.action_to_wire(
            protocol.normalize_action(s.action, traj.width, traj.height)
        )
        steps.append(
            {
                "turn": s.turn,
                "action": wire,
                "iou_after": _r6(s.iou_after),
                "dice_after": _r6(s.dice_after),
                "retries_used": s.retries_used,
            }
        )
    obj = {
        "id": traj.sample_id,
        "paradigm": traj.paradigm,
        "seed": traj.seed,
        "width": traj.width,
        "height": traj.height,
        "steps": steps,
        "final_iou": _r6(traj.final_iou),
        "accepted": traj.accepted,
        "stopped": traj.stopped,
    }
    if traj.termination is not None:
        obj["termination"] = traj.termination
    if traj.failure is not None:
        obj["failure"] = traj.failure
    return obj


def trajectory_from_obj(obj: dict) -> Trajectory:
    width = int(obj["width"])
    height = int(obj["height"])
    steps = []
    for s in obj["steps"]:
        action = protocol.action_from_wire(s["action"], coord_max=protocol.COORD_SCALE)
        action = protocol.denormalize_action(action, width, height)
        steps.append(
            TrajectoryStep(
                turn=int(s["turn"]),
                action=action,
                iou_after=float(s["iou_after"]),
                dice_after=float(s["dice_after"]),
                retries_used=int(s["retries_used"]),
            )
        )
    return Trajectory(
        sample_id=str(obj["id"]),
        paradigm=str(obj["paradigm"]),
        seed=int(obj["seed"]),
        width=width,
        height=height,
        steps=steps,
        final_iou=float(obj["final_iou"]),
        accepted=bool(obj["accepted"]),
        stopped=bool(obj.get("stopped", True)),
        termination=obj.get("termination"),
        failure=obj.get("failure"),
    )


def write_trajectories(trajs: Iterable[Trajectory], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for traj in trajs:
            f.write(json.dumps(trajectory_to_obj(traj)) + "\n")


def read_trajectories(path, on_error: str = "abort") -> tuple[list[Trajectory], list[str]]:
    """Read trajectory JSONL; returns (trajectories, diagnostics).

    on_error: "abort" raises on the first corrupt line, "skip" records a
    diagnostic and continues.
    """
    if on_error not in ("abort", "skip"):
        raise ValueError("on_error must be 'abort' or 'skip'")
    out: list[Trajectory] = []
    diagnostics: list[str] = []
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(trajectory_from_obj(json.loads(line)))
            except (KeyError, TypeError, ValueError) as e:
                err = CorruptLineError(i, str(e))
                if on_error == "abort":
                    raise err from e
                diagnostics.append(str(err))
    return out, diagnostics


# --- SFT chat serialization ----------------------------------------------------


@dataclass
class SftSample:
    messages: list[dict] = field(default_factory=list)
    images: list[str] = field(default_factory=list)


def default_mask_ref(sample_id: str, turn: int) -> str:
    return f"{sample_id}/mask_turn_{turn:02d}.png"


def to_sft_sample(
    traj: Trajectory,
    sample: SampleRecord,
    mask_ref: Callable[[str, int], str] = default_mask_ref,
) -> SftSample:
    """Convert an accepted trajectory into a chat sample.

    Layout: system prompt, then alternating user/assistant turns; every
    user turn carries an image reference (the source image first, then
    the post-action mask render), and the assistant finishes with stop.
    """
    if not traj.accepted:
        raise ValueError(f"trajectory for {traj.sample_id!r} was rejected by the IoU filter")
    out = SftSample()
    out.messages.append({"role": "system", "content": protocol.render_system_prompt()})
    out.messages.append(
        {"role": "user", "content": protocol.render_initial_turn(sample.target)}
    )
    out.images.append(sample.image_path or f"{sample.sample_id}/image.png")
    for step in traj.steps:
        action = protocol.normalize_action(step.action, traj.width, traj.height)
        out.messages.append(
            {"role": "assistant", "content": protocol.serialize_tool_call(action)}
        )
        out.messages.append({"role": "user", "content": protocol.render_followup_turn()})
        out.images.append(mask_ref(traj.sample_id, step.turn))
    out.messages.append(
        {"role": "assistant", "content": protocol.serialize_tool_call(Stop())}
    )
    return out


def write_sft_samples(samples: Iterable[SftSample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            f.write(json.dumps({"messages": s.messages, "images": s.images}) + "\n")


# --- reports -------------------------------------------------------------------


def write_json_report(obj: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def dumps_report(obj: dict) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)
