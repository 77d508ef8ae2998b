"""Threshold segmentation of the distal lumen in endoscopic frames.

Pipeline: grayscale -> circular crop -> darkest-region threshold ->
largest connected component -> centroid and its distance to image center.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

# 4-neighborhood connectivity for component labeling
_STRUCT4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class SegmentationConfig:
    percentile_dark: float = 5.0      # adaptive threshold percentile within the crop
    absolute_ceiling: float = 60.0 / 255.0
    min_area_px: int = 20             # on 128x128
    crop_diameter: Optional[int] = None  # defaults to image width

    def __post_init__(self):
        if not 0.0 < self.percentile_dark < 50.0:
            raise ValueError("percentile_dark must be in (0, 50)")
        if self.min_area_px < 1:
            raise ValueError("min_area_px must be >= 1")


@dataclass(frozen=True)
class LumenDetection:
    detected: bool                      # the L flag
    centroid: Optional[Tuple[float, float]]  # P_L as (x, y); None when not detected
    center: Tuple[float, float]         # P_c = (width/2, height/2)
    ld_px: Optional[float]              # ||P_L - P_c||, pixels
    ld_norm: Optional[float]            # ld_px / (width/2), clamped to [0, 1]
    area_px: int = 0
    mask: Optional[np.ndarray] = field(default=None, repr=False, compare=False)


@lru_cache(maxsize=8)
def _crop_mask(width: int, height: int, diameter: int) -> np.ndarray:
    cx, cy = width / 2.0, height / 2.0
    ys, xs = np.mgrid[0:height, 0:width]
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= (diameter / 2.0) ** 2


def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    """Luminance in [0,1] from (H,W,3) uint8 RGB."""
    return pixels.astype(np.float64) @ GRAY_WEIGHTS / 255.0


def ld_norm(p_l: Tuple[float, float], p_c: Tuple[float, float], width: int) -> float:
    """Centroid-to-center distance normalized by half the image width, clamped to 1."""
    d = float(np.hypot(p_l[0] - p_c[0], p_l[1] - p_c[1]))
    return min(1.0, d / (width / 2.0))


def detect(frame, config: SegmentationConfig = SegmentationConfig()) -> LumenDetection:
    """Run the segmentation pipeline on a square RGB frame.

    Accepts a Frame or a raw (H,W,3) uint8 array. Degenerate frames never
    raise; they come back as not-detected.
    """
    pixels = np.asarray(getattr(frame, "pixels", frame))
    h, w = pixels.shape[:2]
    if h != w:
        raise ValueError("frame must be square")
    center = (w / 2.0, h / 2.0)

    gray = to_grayscale(pixels) if pixels.ndim == 3 else pixels.astype(np.float64)
    diameter = config.crop_diameter or w
    crop = _crop_mask(w, h, diameter)
    in_crop = gray[crop]

    # threshold at an actual pixel value (method="lower"), capped by the ceiling
    thr = min(float(np.percentile(in_crop, config.percentile_dark, method="lower")),
              config.absolute_ceiling)
    mask = crop & (gray <= thr)

    labels, n = ndimage.label(mask, structure=_STRUCT4)
    if n == 0:
        return LumenDetection(False, None, center, None, None, 0, mask)

    areas = ndimage.sum_labels(np.ones_like(gray), labels, index=range(1, n + 1))
    best = _pick_component(gray, labels, areas, center)
    area = int(areas[best - 1])
    if area < config.min_area_px:
        return LumenDetection(False, None, center, None, None, area, mask)

    ys, xs = np.nonzero(labels == best)
    p_l = (float(xs.mean()), float(ys.mean()))
    d = float(np.hypot(p_l[0] - center[0], p_l[1] - center[1]))
    return LumenDetection(True, p_l, center, d, min(1.0, d / (w / 2.0)), area,
                          labels == best)


def _pick_component(gray, labels, areas, center):
    """Largest component; ties broken by lower mean intensity, then by
    lower centroid-to-center distance."""
    max_area = areas.max()
    candidates = [i + 1 for i, a in enumerate(areas) if a == max_area]
    if len(candidates) == 1:
        return candidates[0]

    def key(lab):
        ys, xs = np.nonzero(labels == lab)
        mean_int = gray[ys, xs].mean()
        dist = np.hypot(xs.mean() - center[0], ys.mean() - center[1])
        return (mean_int, dist)

    return min(candidates, key=key)


def mask_overlay(pixels: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the detected region in green over the frame, for logs and the UI."""
    pixels = np.asarray(getattr(pixels, "pixels", pixels))
    out = pixels.copy()
    green = np.array([0, 255, 0], dtype=np.float64)
    blend = (1 - alpha) * out[mask].astype(np.float64) + alpha * green
    out[mask] = blend.astype(np.uint8)
    return out
