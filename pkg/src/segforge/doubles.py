"""Subprocess test doubles for the backend and policy wire protocols.

Run as ``python -m segforge.doubles backend ...`` or ``... policy ...``.
These exist so protocol conformance (handshakes, malformed replies,
timeouts, dimension mismatches) can be exercised end to end without any
real model.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def _emit_raw(text: str) -> None:
    sys.stdout.write(text + "\n")
    sys.stdout.flush()


def run_backend(args) -> int:
    from .backend import encode_mask_b64
    from .dataio import load_mask

    fixed_mask = load_mask(args.mask) if args.mask else None
    width = height = None
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        msg = json.loads(line)
        kind = msg.get("type")
        if kind == "open":
            width, height = int(msg["width"]), int(msg["height"])
            _emit({"type": "ack"})
        elif kind == "prompt":
            if args.delay:
                time.sleep(args.delay)
            if args.mode == "malformed":
                _emit_raw("this is not json")
                continue
            if args.mode == "truncated":
                _emit(
                    {
                        "type": "mask",
                        "width": width,
                        "height": height,
                        "data_b64": "!!!not-base64!!!",
                    }
                )
                continue
            if args.mode == "bad-dims":
                w, h = width + 1, height
                mask = np.zeros((h, w), dtype=bool)
            elif fixed_mask is not None:
                mask, w, h = fixed_mask, width, height
            else:
                mask = np.zeros((height, width), dtype=bool)
                w, h = width, height
            _emit(
                {
                    "type": "mask",
                    "width": w,
                    "height": h,
                    "data_b64": encode_mask_b64(mask),
                }
            )
        elif kind == "close":
            width = height = None
    return 0


def run_policy(args) -> int:
    stop_reply = '<tool_call>\n{"name": "stop_action", "arguments": {}}\n</tool_call>'
    replay_actions = []
    if args.mode == "replay":
        with open(args.trajectory, "r", encoding="utf-8") as f:
            record = json.loads(f.readline())
        replay_actions = [step["action"] for step in record["steps"]]
    cursor = 0
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        json.loads(line)  # request is consumed but mostly ignored
        if args.delay:
            time.sleep(args.delay)
        if args.mode == "garbage":
            _emit({"reply": "no tool call here at all"})
        elif args.mode == "replay" and cursor < len(replay_actions):
            wire = json.dumps(replay_actions[cursor])
            cursor += 1
            _emit({"reply": f"<tool_call>\n{wire}\n</tool_call>"})
        else:
            _emit({"reply": stop_reply})
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="segforge.doubles")
    sub = parser.add_subparsers(dest="role", required=True)

    b = sub.add_parser("backend", help="wire-protocol backend double")
    b.add_argument("--mask", help="PNG mask echoed for every prompt")
    b.add_argument(
        "--mode",
        choices=["echo", "malformed", "truncated", "bad-dims"],
        default="echo",
    )
    b.add_argument("--delay", type=float, default=0.0, help="seconds before each reply")

    p = sub.add_parser("policy", help="wire-protocol policy double")
    p.add_argument("--mode", choices=["stop", "replay", "garbage"], default="stop")
    p.add_argument("--trajectory", help="trajectory JSONL for replay mode")
    p.add_argument("--delay", type=float, default=0.0)

    args = parser.parse_args(argv)
    if args.role == "backend":
        return run_backend(args)
    return run_policy(args)


if __name__ == "__main__":
    sys.exit(main())
