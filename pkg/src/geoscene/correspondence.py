"""Sparse cross-view matches to dense soft correspondence masks.

Each match contributes a peak-normalised Gaussian kernel to the mask of
its view; overlapping footprints accumulate and the sum is clipped. The
full-resolution masks are then cropped, average-pooled to the token grid
and rescaled so the strongest cell is 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gamk
from .errors import DataError, FormatError, ParameterError

__all__ = [
    "MatchSet", "RadialKernel", "gaussian_kernel", "splat_masks", "splat_one",
    "downsample_mask", "build_masks", "write_mask", "read_mask",
    "read_matches", "write_matches",
]


@dataclass
class MatchSet:
    """Matched pixel coordinates; view 0 is the target image, view 1 the scene view.

    Coordinates are ``(x, y)`` with the origin at the top-left pixel.
    """

    points_view0: np.ndarray
    points_view1: np.ndarray

    def __post_init__(self):
        self.points_view0 = np.asarray(self.points_view0, dtype=np.float64).reshape(-1, 2)
        self.points_view1 = np.asarray(self.points_view1, dtype=np.float64).reshape(-1, 2)
        if len(self.points_view0) != len(self.points_view1):
            raise DataError(f"match lists differ in length: "
                            f"{len(self.points_view0)} vs {len(self.points_view1)}")

    @property
    def count(self) -> int:
        return len(self.points_view0)

    def swapped(self) -> "MatchSet":
        return MatchSet(self.points_view1.copy(), self.points_view0.copy())


@dataclass(frozen=True)
class RadialKernel:
    radius: int
    sigma: float
    weights: np.ndarray


def gaussian_kernel(radius: int = 3, sigma: float = 1.5) -> RadialKernel:
    if radius < 0 or int(radius) != radius:
        raise ParameterError(f"kernel radius must be a non-negative integer, got {radius}")
    if not sigma > 0:
        raise ParameterError(f"kernel sigma must be positive, got {sigma}")
    r = int(radius)
    d = np.arange(-r, r + 1, dtype=np.float64)
    dist2 = d[None, :] ** 2 + d[:, None] ** 2
    w = np.exp(-dist2 / (2.0 * sigma * sigma))
    return RadialKernel(r, float(sigma), w)


def _round_half_up(v: np.ndarray) -> np.ndarray:
    return np.floor(v + 0.5).astype(np.int64)


def _check_points(points: np.ndarray, height: int, width: int, view: int) -> None:
    for i, (x, y) in enumerate(points):
        if not (0 <= x < width and 0 <= y < height):
            raise DataError(f"match {i}: view {view} point ({x}, {y}) "
                            f"outside {width}x{height} image")


def splat_one(points: np.ndarray, height: int, width: int, kernel: RadialKernel,
              clip_max: float = 1.0) -> np.ndarray:
    """Accumulate one kernel copy per point onto an ``height x width`` grid and clip."""
    r = kernel.radius
    pad = np.zeros((height + 2 * r + 1, width + 2 * r + 1), dtype=np.float64)
    centers = _round_half_up(np.asarray(points, dtype=np.float64).reshape(-1, 2))
    for cx, cy in centers:
        # padded coordinates: pixel (x, y) lives at (x + r, y + r)
        pad[cy:cy + 2 * r + 1, cx:cx + 2 * r + 1] += kernel.weights
    mask = pad[r:r + height, r:r + width]
    return np.clip(mask, 0.0, clip_max).astype(np.float32)


def splat_masks(matches: MatchSet, height: int, width: int,
                kernel: RadialKernel | None = None,
                clip_max: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Dense masks ``(M0, M1)`` for the two views of a match set.

    Points are rounded half-up to integer pixels; kernel cells falling
    outside the image are dropped.
    """
    if height < 1 or width < 1:
        raise ParameterError(f"image size must be positive, got {height}x{width}")
    if clip_max <= 0:
        raise ParameterError(f"clip_max must be positive, got {clip_max}")
    kernel = kernel or gaussian_kernel()
    _check_points(matches.points_view0, height, width, 0)
    _check_points(matches.points_view1, height, width, 1)
    m0 = splat_one(matches.points_view0, height, width, kernel, clip_max)
    m1 = splat_one(matches.points_view1, height, width, kernel, clip_max)
    return m0, m1


def downsample_mask(mask: np.ndarray, patch: int, crop=None, normalize: bool = True) -> np.ndarray:
    """Average-pool ``mask`` over ``patch x patch`` cells of a crop.

    ``crop`` is ``(x, y, w, h)`` and defaults to the whole image. With
    ``normalize`` the pooled grid is divided by its maximum (an all-zero
    grid stays zero).
    """
    mask = np.asarray(mask)
    height, width = mask.shape
    x, y, w, h = crop if crop is not None else (0, 0, width, height)
    if patch < 1:
        raise ParameterError(f"patch size must be positive, got {patch}")
    if x < 0 or y < 0 or w < 1 or h < 1 or x + w > width or y + h > height:
        raise ParameterError(f"crop {(x, y, w, h)} outside {width}x{height} mask")
    if w % patch or h % patch:
        raise ParameterError(f"crop size {w}x{h} not divisible by patch {patch}")
    region = mask[y:y + h, x:x + w].astype(np.float64)
    pooled = region.reshape(h // patch, patch, w // patch, patch).mean(axis=(1, 3))
    if normalize:
        peak = pooled.max()
        if peak > 0:
            pooled = pooled / peak
    return pooled.astype(np.float32)


def build_masks(matches: MatchSet, height: int, width: int, patch: int,
                kernel: RadialKernel | None = None, clip_max: float = 1.0,
                crop=None, normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Token-resolution masks ``(M~0, M~1)`` straight from a match set."""
    m0, m1 = splat_masks(matches, height, width, kernel, clip_max)
    return (downsample_mask(m0, patch, crop, normalize),
            downsample_mask(m1, patch, crop, normalize))


def write_mask(path, mask) -> None:
    gamk.write_tensor(path, mask)


def read_mask(path) -> np.ndarray:
    arr = gamk.read_tensor(path)
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected a 2-d mask, got shape {arr.shape}")
    return arr


def read_matches(path, bounds: tuple[int, int] | None = None) -> MatchSet:
    """Load a JSON-lines match file with fields ``x0, y0, x1, y1`` per line.

    With ``bounds=(height, width)`` every coordinate is range-checked and
    the error names the offending line.
    """
    p0, p1 = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                p0.append((float(rec["x0"]), float(rec["y0"])))
                p1.append((float(rec["x1"]), float(rec["y1"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed match record ({exc})") from None
            if bounds is not None:
                height, width = bounds
                for x, y in (p0[-1], p1[-1]):
                    if not (0 <= x < width and 0 <= y < height):
                        raise DataError(f"{path}:{lineno}: coordinate ({x}, {y}) "
                                        f"outside {width}x{height} image")
    return MatchSet(np.array(p0).reshape(-1, 2), np.array(p1).reshape(-1, 2))


def write_matches(path, matches: MatchSet) -> None:
    lines = []
    for (x0, y0), (x1, y1) in zip(matches.points_view0, matches.points_view1):
        lines.append(json.dumps({"x0": float(x0), "y0": float(y0),
                                 "x1": float(x1), "y1": float(y1)}))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
