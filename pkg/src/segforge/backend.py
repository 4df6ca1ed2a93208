"""Interactive segmentation backends.

Two implementations of the same prompt-history -> mask contract:

* ``OracleBackend`` — a deterministic rule-based stand-in that consults the
  ground truth, so the whole pipeline is testable without model weights.
  It deliberately produces imperfect first predictions (eroded boundary
  plus an optional spurious blob) and repairs/damages them in response to
  clicks the way a competent interactive model would.
* ``ExternalBackend`` — a line-delimited JSON wire-protocol client that
  drives a real segmentation model running in a subprocess.

A session is single-owner; predictions are a deterministic function of
(seed, sample id, prompt history).
"""

from __future__ import annotations

import base64
import json
import os
import select
import subprocess
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import masks
from .actions import Action, AddBox, AddPoint, Stop
from .rng import SplitMix64, stable_key


class BackendError(Exception):
    """Base class for backend failures."""


class PromptOrderError(BackendError):
    """Stop passed as a prompt, a second box, or a box after points."""


class BackendTimeoutError(BackendError):
    pass


class MalformedReplyError(BackendError):
    pass


class BackendDimensionError(BackendError):
    pass


class BackendClosedError(BackendError):
    pass


MAX_BLOB_DRAWS = 64


@dataclass(frozen=True)
class OracleParams:
    """Pixel radii for the oracle's imperfections.

    erosion_radius shaves the boundary of box/first-click predictions,
    blob_radius sizes the spurious in-box false-positive blob, and
    click_radius sizes the damage/FP disc for off-target clicks.
    """

    erosion_radius: float = 3.0
    blob_radius: float = 5.0
    click_radius: float = 5.0


class Session:
    """Abstract prompt-history -> mask session."""

    def apply(self, action: Action) -> np.ndarray:
        raise NotImplementedError

    def rollback_last(self) -> None:
        raise NotImplementedError

    @property
    def history(self) -> Sequence[Action]:
        raise NotImplementedError

    @property
    def prediction(self) -> np.ndarray:
        raise NotImplementedError

    def close(self) -> None:
        pass


def _validate_prompt(history: Sequence[Action], action: Action) -> None:
    if isinstance(action, Stop):
        raise PromptOrderError("stop is not a prompt")
    if isinstance(action, AddBox) and len(history) > 0:
        raise PromptOrderError("a box prompt is only allowed first")


class OracleSession(Session):
    def __init__(self, sample_id: str, gt: np.ndarray, seed: int, params: OracleParams):
        self.sample_id = sample_id
        self.gt = masks.as_mask(gt)
        if not self.gt.any():
            raise ValueError(f"sample {sample_id!r} has an empty ground-truth mask")
        self.seed = seed
        self.params = params
        self._history: list[Action] = []
        # Prediction after each prompt; index 0 is the empty initial mask.
        self._preds: list[np.ndarray] = [np.zeros_like(self.gt)]

    @property
    def history(self) -> Sequence[Action]:
        return tuple(self._history)

    @property
    def prediction(self) -> np.ndarray:
        return self._preds[-1].copy()

    def apply(self, action: Action) -> np.ndarray:
        _validate_prompt(self._history, action)
        self._check_bounds(action)
        if isinstance(action, AddBox):
            new = self._apply_box(action)
        else:
            new = self._apply_point(action)
        self._history.append(action)
        self._preds.append(new)
        return new.copy()

    def rollback_last(self) -> None:
        if not self._history:
            raise RuntimeError("nothing to roll back")
        self._history.pop()
        self._preds.pop()

    def _check_bounds(self, action: Action) -> None:
        h, w = self.gt.shape
        if isinstance(action, AddBox):
            x1, y1, x2, y2 = action.bbox
            if not (0 <= x1 <= x2 < w and 0 <= y1 <= y2 < h):
                raise PromptOrderError(f"box {action.bbox} out of bounds for {w}x{h}")
        elif isinstance(action, AddPoint):
            if not (0 <= action.x < w and 0 <= action.y < h):
                raise PromptOrderError(f"point {action.point} out of bounds for {w}x{h}")

    def _apply_box(self, action: AddBox) -> np.ndarray:
        gt_in_box = masks.clip_to_box(self.gt, action.bbox)
        pred = masks.erode(gt_in_box, self.params.erosion_radius)
        blob = self._spurious_blob(action.bbox)
        return pred | blob

    def _spurious_blob(self, box: tuple[int, int, int, int]) -> np.ndarray:
        """FP blob around a pseudo-random in-box background pixel.

        Rejection sampling is bounded so sessions stay O(1) in draws; a
        box with no background pixel simply yields no blob.
        """
        x1, y1, x2, y2 = box
        rng = SplitMix64(stable_key(self.seed, self.sample_id, "blob"))
        for _ in range(MAX_BLOB_DRAWS):
            qx = rng.randint(x1, x2)
            qy = rng.randint(y1, y2)
            if not self.gt[qy, qx]:
                blob = masks.disc((qx, qy), self.params.blob_radius, self.gt.shape)
                return masks.clip_to_box(blob, box) & ~self.gt
        return np.zeros_like(self.gt)

    def _apply_point(self, action: AddPoint) -> np.ndarray:
        pred = self._preds[-1]
        x, y = action.point
        if not self._history:
            # Sequential-Click start: segment the clicked GT component,
            # imperfectly; a miss produces a small FP disc.
            if self.gt[y, x]:
                comps = masks.connected_components(self.gt)
                comp = comps.component_mask(comps.labels[y, x])
                return masks.erode(comp, self.params.erosion_radius)
            return masks.disc((x, y), self.params.click_radius, self.gt.shape)

        err = masks.error_decompose(pred, self.gt)
        if action.positive:
            if err.fn_mask[y, x]:
                comps = masks.connected_components(err.fn_mask)
                return pred | comps.component_mask(comps.labels[y, x])
            if self.gt[y, x]:
                return pred.copy()
            return pred | masks.disc((x, y), self.params.click_radius, self.gt.shape)
        else:
            if err.fp_mask[y, x]:
                comps = masks.connected_components(err.fp_mask)
                return pred & ~comps.component_mask(comps.labels[y, x])
            if pred[y, x] and self.gt[y, x]:
                return pred & ~masks.disc((x, y), self.params.click_radius, self.gt.shape)
            return pred.copy()


class OracleBackend:
    def __init__(self, params: OracleParams = OracleParams()):
        self.params = params

    def open_session(self, sample, seed: int) -> OracleSession:
        gt = sample.load_gt()
        return OracleSession(sample.sample_id, gt, seed, self.params)

    def close(self) -> None:
        pass


# --- wire protocol -------------------------------------------------------------


def encode_mask_b64(m: np.ndarray) -> str:
    """Row-major bit-packed mask, LSB-first per byte, rows byte-padded."""
    m = masks.as_mask(m)
    packed = np.packbits(m.astype(np.uint8), axis=1, bitorder="little")
    return base64.b64encode(packed.tobytes()).decode("ascii")


def decode_mask_b64(data: str, width: int, height: int) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
    except Exception as e:
        raise MalformedReplyError(f"bad base64 mask payload: {e}") from e
    row_bytes = (width + 7) // 8
    if len(raw) != row_bytes * height:
        raise MalformedReplyError(
            f"mask payload is {len(raw)} bytes, expected {row_bytes * height}"
        )
    packed = np.frombuffer(raw, dtype=np.uint8).reshape(height, row_bytes)
    return np.unpackbits(packed, axis=1, count=width, bitorder="little").astype(bool)


class _LineChannel:
    """Line-delimited JSON over a subprocess's standard streams."""

    def __init__(self, argv: Sequence[str], timeout: float):
        self.timeout = timeout
        try:
            self.proc = subprocess.Popen(
                list(argv),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                bufsize=0,
            )
        except OSError as e:
            raise BackendClosedError(f"cannot start backend {argv!r}: {e}") from e
        self._buf = b""

    def send(self, obj: dict) -> None:
        line = json.dumps(obj) + "\n"
        try:
            self.proc.stdin.write(line.encode("utf-8"))
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            raise BackendClosedError(f"backend pipe broken: {e}") from e

    def recv(self) -> dict:
        fd = self.proc.stdout.fileno()
        while b"\n" not in self._buf:
            ready, _, _ = select.select([fd], [], [], self.timeout)
            if not ready:
                raise BackendTimeoutError(f"no reply within {self.timeout}s")
            chunk = os.read(fd, 65536)
            if not chunk:
                raise BackendClosedError("backend closed its output stream")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        try:
            obj = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise MalformedReplyError(f"reply is not a JSON line: {e}") from e
        if not isinstance(obj, dict):
            raise MalformedReplyError("reply is not a JSON object")
        return obj

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


class ExternalSession(Session):
    def __init__(self, channel: _LineChannel, sample, seed: int):
        self._channel = channel
        self._sample = sample
        self._seed = seed
        self._history: list[Action] = []
        gt_shape = sample.dimensions()
        self._shape = gt_shape  # (height, width)
        self._pred = np.zeros(gt_shape, dtype=bool)
        self._open()

    def _open(self) -> None:
        h, w = self._shape
        msg = {
            "type": "open",
            "sample_id": self._sample.sample_id,
            "width": w,
            "height": h,
        }
        if getattr(self._sample, "image_path", None):
            msg["image_path"] = str(self._sample.image_path)
        self._channel.send(msg)
        ack = self._channel.recv()
        if ack.get("type") != "ack":
            raise MalformedReplyError(f"expected ack, got {ack!r}")

    @property
    def history(self) -> Sequence[Action]:
        return tuple(self._history)

    @property
    def prediction(self) -> np.ndarray:
        return self._pred.copy()

    def apply(self, action: Action) -> np.ndarray:
        from .protocol import action_to_wire

        _validate_prompt(self._history, action)
        self._channel.send({"type": "prompt", "action": action_to_wire(action)})
        reply = self._channel.recv()
        if reply.get("type") != "mask":
            raise MalformedReplyError(f"expected mask reply, got {reply!r}")
        try:
            w = int(reply["width"])
            h = int(reply["height"])
            data = reply["data_b64"]
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedReplyError(f"mask reply missing fields: {e}") from e
        if (h, w) != self._shape:
            raise BackendDimensionError(
                f"backend returned {w}x{h}, sample is {self._shape[1]}x{self._shape[0]}"
            )
        mask = decode_mask_b64(data, w, h)
        self._history.append(action)
        self._pred = mask
        return mask.copy()

    def rollback_last(self) -> None:
        """Re-open the backend sample and replay the accepted history."""
        if not self._history:
            raise RuntimeError("nothing to roll back")
        history = self._history[:-1]
        self._channel.send({"type": "close"})
        self._history = []
        self._pred = np.zeros(self._shape, dtype=bool)
        self._open()
        for action in history:
            self.apply(action)

    def close(self) -> None:
        try:
            self._channel.send({"type": "close"})
        except BackendError:
            pass


class ExternalBackend:
    """Spawns one subprocess per session over the line-JSON wire protocol."""

    def __init__(self, argv: Sequence[str], timeout: float = 10.0):
        self.argv = list(argv)
        self.timeout = timeout
        self._channels: list[_LineChannel] = []

    def open_session(self, sample, seed: int) -> ExternalSession:
        channel = _LineChannel(self.argv, self.timeout)
        self._channels.append(channel)
        return ExternalSession(channel, sample, seed)

    def close(self) -> None:
        for ch in self._channels:
            ch.close()
        self._channels.clear()
