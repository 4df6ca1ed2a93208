"""Pure raster mathematics over binary masks.

A mask is a 2-D boolean numpy array of shape (height, width). All
functions are pure; none mutates its inputs. Coordinates follow the
(x, y) = (column, row) convention used by the action space, and every
argmax-style operation breaks ties in raster order (smallest y, then
smallest x) so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .rng import round_half_up

_STRUCT8 = np.ones((3, 3), dtype=int)


class DimensionMismatchError(ValueError):
    """Two masks that must share a pixel grid do not."""


class EmptyMaskError(ValueError):
    """Operation requires at least one foreground pixel."""


def as_mask(a: np.ndarray) -> np.ndarray:
    m = np.asarray(a)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"mask must be 2-D and nonempty, got shape {m.shape}")
    return m.astype(bool, copy=False)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")


@dataclass(frozen=True)
class ErrorDecomposition:
    """FN = ground truth missed by the prediction, FP = spurious prediction."""

    fn_mask: np.ndarray
    fp_mask: np.ndarray

    @property
    def empty(self) -> bool:
        return not (self.fn_mask.any() or self.fp_mask.any())


@dataclass(frozen=True)
class ComponentSet:
    """8-connected foreground components; label 0 is background.

    Labels are assigned in raster-scan order of each component's first
    pixel, so label 1 is the component whose first pixel comes earliest.
    """

    labels: np.ndarray
    areas: np.ndarray  # areas[i] is the pixel count of label i+1
    count: int

    def component_mask(self, label: int) -> np.ndarray:
        return self.labels == label


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = as_mask(a), as_mask(b)
    _check_same_shape(a, b)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    inter = int(np.count_nonzero(a & b))
    return inter / union


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = as_mask(a), as_mask(b)
    _check_same_shape(a, b)
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if total == 0:
        return 1.0
    inter = int(np.count_nonzero(a & b))
    return 2.0 * inter / total


def error_decompose(pred: np.ndarray, gt: np.ndarray) -> ErrorDecomposition:
    pred, gt = as_mask(pred), as_mask(gt)
    _check_same_shape(pred, gt)
    return ErrorDecomposition(fn_mask=gt & ~pred, fp_mask=pred & ~gt)


def connected_components(m: np.ndarray) -> ComponentSet:
    m = as_mask(m)
    raw, count = ndimage.label(m, structure=_STRUCT8)
    if count == 0:
        return ComponentSet(labels=raw, areas=np.zeros(0, dtype=np.int64), count=0)
    # Relabel by raster order of each component's first pixel; scipy does
    # this already in practice, but the contract should not depend on it.
    flat = raw.ravel()
    first = np.full(count + 1, flat.size, dtype=np.int64)
    nz = np.flatnonzero(flat)
    # reversed so earlier indices win
    first[flat[nz[::-1]]] = nz[::-1]
    order = np.argsort(first[1:], kind="stable")
    remap = np.zeros(count + 1, dtype=raw.dtype)
    remap[order + 1] = np.arange(1, count + 1)
    labels = remap[raw]
    areas = np.bincount(labels.ravel(), minlength=count + 1)[1:].astype(np.int64)
    return ComponentSet(labels=labels, areas=areas, count=count)


def distance_transform(m: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each foreground pixel to the nearest
    background pixel; the image border counts as background. Background
    pixels map to 0.
    """
    m = as_mask(m)
    padded = np.zeros((m.shape[0] + 2, m.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = m
    d = ndimage.distance_transform_edt(padded)
    return d[1:-1, 1:-1]


def interior_peak(m: np.ndarray) -> tuple[int, int]:
    """(x, y) of the distance-transform argmax; raster-order tie-break."""
    m = as_mask(m)
    if not m.any():
        raise EmptyMaskError("interior_peak of an empty mask")
    d = distance_transform(m)
    idx = int(np.argmax(d))  # argmax returns the first (raster-order) max
    y, x = divmod(idx, m.shape[1])
    return x, y


def bounding_box(m: np.ndarray) -> tuple[int, int, int, int]:
    """Tightest inclusive (x1, y1, x2, y2) around the foreground."""
    m = as_mask(m)
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        raise EmptyMaskError("bounding_box of an empty mask")
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def centroid(m: np.ndarray) -> tuple[int, int]:
    """Arithmetic mean of foreground (x, y), rounded half-up to a pixel.

    The result is not snapped into the mask; concave shapes can yield a
    centroid outside the foreground, which callers handle themselves.
    """
    m = as_mask(m)
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        raise EmptyMaskError("centroid of an empty mask")
    return round_half_up(float(xs.mean())), round_half_up(float(ys.mean()))


def dilate(m: np.ndarray, r: float) -> np.ndarray:
    """Union of Euclidean discs of radius r around foreground pixels."""
    m = as_mask(m)
    if r < 0:
        raise ValueError("radius must be nonnegative")
    if r == 0 or not m.any():
        return m.copy()
    d = ndimage.distance_transform_edt(~m)
    return d <= r


def erode(m: np.ndarray, r: float) -> np.ndarray:
    """Pixels whose in-image disc of radius r lies inside the mask.

    Out-of-image samples of the structuring element are ignored (treated
    as foreground), which keeps closing extensive for border-touching
    masks: erode(dilate(m, r), r) always contains m.
    """
    m = as_mask(m)
    if r < 0:
        raise ValueError("radius must be nonnegative")
    if r == 0:
        return m.copy()
    if m.all():
        # No background anywhere: every in-image disc lies inside the mask.
        # (scipy's edt is undefined when the input has no zeros.)
        return m.copy()
    d = ndimage.distance_transform_edt(m)
    return d > r


def disc(center: tuple[int, int], r: float, shape: tuple[int, int]) -> np.ndarray:
    """Pixels within Euclidean distance r of (x, y) center, clipped to grid."""
    if r < 0:
        raise ValueError("radius must be nonnegative")
    h, w = shape
    cx, cy = center
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


def clip_to_box(m: np.ndarray, box: tuple[int, int, int, int]) -> np.ndarray:
    """Zero out everything outside the inclusive box (x1, y1, x2, y2)."""
    m = as_mask(m)
    x1, y1, x2, y2 = box
    if not (0 <= x1 <= x2 < m.shape[1] and 0 <= y1 <= y2 < m.shape[0]):
        raise ValueError(f"box {box} out of bounds for shape {m.shape}")
    out = np.zeros_like(m)
    out[y1 : y2 + 1, x1 : x2 + 1] = m[y1 : y2 + 1, x1 : x2 + 1]
    return out


def box_mask(box: tuple[int, int, int, int], shape: tuple[int, int]) -> np.ndarray:
    """Solid rectangle mask for an inclusive pixel box."""
    x1, y1, x2, y2 = box
    h, w = shape
    if not (0 <= x1 <= x2 < w and 0 <= y1 <= y2 < h):
        raise ValueError(f"box {box} out of bounds for shape {shape}")
    out = np.zeros(shape, dtype=bool)
    out[y1 : y2 + 1, x1 : x2 + 1] = True
    return out


def nearest_foreground(m: np.ndarray, point: tuple[int, int]) -> tuple[int, int]:
    """Closest foreground pixel to (x, y); raster-order tie-break."""
    m = as_mask(m)
    if not m.any():
        raise EmptyMaskError("nearest_foreground of an empty mask")
    px, py = point
    ys, xs = np.nonzero(m)  # raster order
    d2 = (xs - px) ** 2 + (ys - py) ** 2
    i = int(np.argmin(d2))  # first minimum wins
    return int(xs[i]), int(ys[i])
