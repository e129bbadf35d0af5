"""Ink-mark ROI detection on a registered inked slide.

Blue ink is isolated by subtracting the red channel from the blue one. When
the clean scan is available, the score is gated to pixels where the two scans
actually differ, so blue-stained nuclei present on both do not register as ink.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import raster
from .pyramid import ImagePyramid, PyramidError, denormalize_box, normalize_box
from .raster import BBox, NormBBox, RasterError

log = logging.getLogger(__name__)

RED, GREEN, BLUE = 0, 1, 2


@dataclass(frozen=True)
class InkConfig:
    min_ink_score: int = 30
    min_diff: int = 20
    close_radius: int = 2
    open_radius: int = 1
    min_skeleton_px: int = 30
    margin_px: int = 4


@dataclass(frozen=True)
class RoiBox:
    id: int
    norm: NormBBox
    source_level: int


@dataclass(frozen=True)
class RoiSet:
    slide_id: str
    boxes: tuple[RoiBox, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)


def _floored_otsu(score: np.ndarray, floor: int) -> np.ndarray:
    _, t = raster.otsu_threshold(score)
    return score[:, :, 0] > max(t, floor - 1)


def detect_ink_mask(inked_aligned, clean=None, cfg: InkConfig = InkConfig()) -> np.ndarray:
    """Binary mask of blue ink on the aligned inked image.

    Otsu thresholds are floored (``min_ink_score`` for blue-minus-red,
    ``min_diff`` for the scan difference) so a mark-free slide cannot be
    forced into two classes by noise alone.
    """
    inked = raster.to_rgb(inked_aligned)
    score = raster.channel_subtract(inked, BLUE, RED)
    if clean is not None:
        clean = raster.to_rgb(clean)
        if clean.shape != inked.shape:
            raise RasterError(f"clean {clean.shape} and inked {inked.shape} differ in size")
        diff = np.abs(inked.astype(np.int16) - clean.astype(np.int16)).max(axis=2)
        changed = _floored_otsu(diff.astype(np.uint8)[:, :, None], cfg.min_diff)
        score = np.where(changed[:, :, None], score, 0).astype(np.uint8)
    mask = _floored_otsu(score, cfg.min_ink_score)
    mask = raster.morphology(mask, "close", cfg.close_radius)
    return raster.morphology(mask, "open", cfg.open_radius)


def extract_roi_boxes(ink, level: int, pyramid: ImagePyramid, cfg: InkConfig = InkConfig(),
                      slide_id: str = "") -> RoiSet:
    w, h = pyramid.dims(level)
    ink = np.asarray(ink, dtype=bool)
    if ink.shape != (h, w):
        raise RasterError(f"ink mask {ink.shape[::-1]} does not match level {level} size {w}x{h}")
    skel = raster.skeletonize(ink)
    boxes = []
    for comp in raster.connected_components(skel):
        if comp.area < cfg.min_skeleton_px:
            continue
        b = comp.bbox
        m = cfg.margin_px
        grown = BBox(max(0, b.x0 - m), max(0, b.y0 - m), min(w, b.x1 + m), min(h, b.y1 + m))
        boxes.append(normalize_box(grown, level, pyramid))
    boxes.sort(key=lambda nb: (nb.y0, nb.x0, nb.y1, nb.x1))
    return RoiSet(slide_id, tuple(RoiBox(i, nb, level) for i, nb in enumerate(boxes)))


def crop_rois(pyramid: ImagePyramid, rois: RoiSet, target_level: int,
              threads: int = 1) -> list[tuple[RoiBox, np.ndarray]]:
    pyramid.dims(target_level)

    def one(roi: RoiBox):
        try:
            box = denormalize_box(roi.norm, target_level, pyramid)
        except PyramidError as exc:
            log.warning("skipping ROI %d: %s", roi.id, exc)
            return None
        return roi, pyramid.read_region(target_level, box)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, rois))
    else:
        results = [one(r) for r in rois]
    return [r for r in results if r is not None]


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def dump_manifest(rois: RoiSet) -> str:
    """One JSON object per line: id, level, x0, y0, x1, y1 (6 decimals)."""
    lines = []
    for r in rois:
        n = r.norm
        lines.append(
            f'{{"id": {r.id}, "level": {r.source_level}, "x0": {_fmt(n.x0)}, '
            f'"y0": {_fmt(n.y0)}, "x1": {_fmt(n.x1)}, "y1": {_fmt(n.y1)}}}')
    return "".join(line + "\n" for line in lines)


def parse_manifest(text: str, slide_id: str = "") -> RoiSet:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            boxes.append(RoiBox(int(rec["id"]), NormBBox(rec["x0"], rec["y0"], rec["x1"], rec["y1"]),
                                int(rec["level"])))
        except (ValueError, KeyError, TypeError, RasterError) as exc:
            raise ValueError(f"ROI manifest line {lineno}: {exc}") from exc
    return RoiSet(slide_id, tuple(boxes))


def write_manifest(path, rois: RoiSet) -> None:
    Path(path).write_text(dump_manifest(rois), encoding="utf-8")


def read_manifest(path, slide_id: str = "") -> RoiSet:
    return parse_manifest(Path(path).read_text(encoding="utf-8"), slide_id)


def roi_pixel_boxes(rois: Sequence[RoiBox], level: int, pyramid: ImagePyramid) -> list[BBox]:
    return [denormalize_box(r.norm, level, pyramid) for r in rois]
