"""Seeded synthetic fixtures: random blob masks so the whole pipeline runs
with zero external data.

Each fixture is a single connected union of overlapping ellipses with at
least 64 foreground pixels, kept away from degenerate sizes so the oracle
backend leaves recoverable errors after a box prompt.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import masks
from .dataio import SampleRecord, store_mask, write_manifest
from .rng import SplitMix64, stable_key

MIN_AREA = 64


def random_blob_mask(rng: SplitMix64, width: int, height: int) -> np.ndarray:
    """Connected union of 1-4 ellipses, area >= 64 px."""
    for _ in range(64):
        mask = np.zeros((height, width), dtype=bool)
        n_lobes = rng.randint(1, 4)
        rmax = max(8, min(width, height) // 6)
        margin = rmax + 2
        cx = rng.randint(margin, width - 1 - margin)
        cy = rng.randint(margin, height - 1 - margin)
        for _ in range(n_lobes):
            a = rng.randint(8, rmax)
            b = rng.randint(8, rmax)
            mask |= _ellipse(cx, cy, a, b, width, height)
            # Next center inside the current lobe keeps the blob connected.
            step = max(1, min(a, b) - 2)
            cx = min(max(cx + rng.randint(-step, step), margin), width - 1 - margin)
            cy = min(max(cy + rng.randint(-step, step), margin), height - 1 - margin)
        if (
            int(np.count_nonzero(mask)) >= MIN_AREA
            and masks.connected_components(mask).count == 1
        ):
            return mask
    raise RuntimeError(f"could not generate a blob on a {width}x{height} grid")


def _ellipse(cx: int, cy: int, a: int, b: int, width: int, height: int) -> np.ndarray:
    ys = np.arange(height)[:, None]
    xs = np.arange(width)[None, :]
    return ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0


def make_fixture_samples(
    count: int, size: int = 256, seed: int = 0, prefix: str = "fixture"
) -> list[SampleRecord]:
    """In-memory fixtures; deterministic in (count, size, seed)."""
    out = []
    for i in range(count):
        sid = f"{prefix}_{i:04d}"
        rng = SplitMix64(stable_key(seed, sid, "fixture"))
        gt = random_blob_mask(rng, size, size)
        out.append(
            SampleRecord(
                sample_id=sid,
                target=f"synthetic blob {i}",
                modality="synthetic",
                dataset="fixtures",
                gt=gt,
            )
        )
    return out


def write_fixture_corpus(
    out_dir, count: int, size: int = 256, seed: int = 0, prefix: str = "fixture"
) -> str:
    """Write fixture masks plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    mask_dir = out_dir / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    samples = make_fixture_samples(count, size=size, seed=seed, prefix=prefix)
    for s in samples:
        path = mask_dir / f"{s.sample_id}.png"
        store_mask(s.gt, path)
        s.gt_mask_path = str(Path("masks") / f"{s.sample_id}.png")
    manifest = out_dir / "manifest.jsonl"
    write_manifest(samples, manifest)
    return str(manifest)
