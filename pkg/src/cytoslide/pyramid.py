"""Multi-level image pyramid and cross-level box arithmetic.

On disk a pyramid is a directory holding ``meta.txt`` with the single line
``width height channels levels factor pixel_um`` plus one ``level_<k>.png``
per level. ``pixel_um`` of ``0`` means the physical pixel size is unknown.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import BBox, NormBBox, RasterError, as_image, read_png, write_png

NORM_DECIMALS = 6
_NORM_GRID = 10 ** NORM_DECIMALS
_SNAP = 1e-6


class PyramidError(RasterError):
    pass


def level_shape(width: int, height: int, factor: int, k: int) -> tuple[int, int]:
    d = factor ** k
    return -(-width // d), -(-height // d)


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter mean over ``factor x factor`` blocks, rounding half to even.

    Edge blocks that overhang the image average only the pixels they cover.
    """
    h, w, c = img.shape
    oh, ow = -(-h // factor), -(-w // factor)
    padded = np.zeros((oh * factor, ow * factor, c), dtype=np.float64)
    padded[:h, :w] = img
    weight = np.zeros((oh * factor, ow * factor), dtype=np.float64)
    weight[:h, :w] = 1.0
    sums = padded.reshape(oh, factor, ow, factor, c).sum(axis=(1, 3))
    counts = weight.reshape(oh, factor, ow, factor).sum(axis=(1, 3))
    return np.rint(sums / counts[:, :, None]).astype(np.uint8)


@dataclass(frozen=True)
class ImagePyramid:
    levels: tuple[np.ndarray, ...]
    factor: int = 2
    pixel_um: float | None = None

    def __post_init__(self):
        if self.factor < 2:
            raise PyramidError("pyramid factor must be >= 2")
        if not self.levels:
            raise PyramidError("pyramid needs at least one level")
        h0, w0 = self.levels[0].shape[:2]
        for k, lvl in enumerate(self.levels):
            if lvl.shape[:2][::-1] != level_shape(w0, h0, self.factor, k):
                raise PyramidError(f"level {k} has shape {lvl.shape}, inconsistent with level 0")
            lvl.setflags(write=False)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def channels(self) -> int:
        return self.levels[0].shape[2]

    def _check_level(self, level: int) -> None:
        if not 0 <= level < len(self.levels):
            raise PyramidError(f"invalid level {level}; pyramid has levels 0..{len(self.levels) - 1}")

    def level(self, k: int) -> np.ndarray:
        self._check_level(k)
        return self.levels[k]

    def dims(self, level: int) -> tuple[int, int]:
        """``(width, height)`` of a level."""
        self._check_level(level)
        h, w = self.levels[level].shape[:2]
        return w, h

    def read_region(self, level: int, box: BBox) -> np.ndarray:
        w, h = self.dims(level)
        if box.x0 < 0 or box.y0 < 0 or box.x1 > w or box.y1 > h:
            raise PyramidError(f"box {box.as_tuple()} outside level {level} bounds {w}x{h}")
        return self.levels[level][box.y0:box.y1, box.x0:box.x1].copy()

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        w, h = self.dims(0)
        um = 0.0 if self.pixel_um is None else self.pixel_um
        (d / "meta.txt").write_text(
            f"{w} {h} {self.channels} {self.n_levels} {self.factor} {um:g}\n", encoding="ascii")
        for k, lvl in enumerate(self.levels):
            write_png(d / f"level_{k}.png", lvl)

    @classmethod
    def load(cls, directory) -> "ImagePyramid":
        d = Path(directory)
        try:
            fields = (d / "meta.txt").read_text(encoding="ascii").split()
            w, h, c, n, factor = (int(x) for x in fields[:5])
            um = float(fields[5]) if len(fields) > 5 else 0.0
        except (OSError, ValueError) as exc:
            raise PyramidError(f"unreadable pyramid metadata in {d}: {exc}") from exc
        levels = []
        for k in range(n):
            lvl = as_image(read_png(d / f"level_{k}.png"))
            if lvl.shape[2] != c:
                raise PyramidError(f"level {k} has {lvl.shape[2]} channels, meta says {c}")
            levels.append(lvl)
        if levels[0].shape[:2] != (h, w):
            raise PyramidError("level 0 size disagrees with meta.txt")
        return cls(tuple(levels), factor, um or None)


def build_pyramid(level0, levels: int, factor: int = 2, pixel_um: float | None = None) -> ImagePyramid:
    img = as_image(level0)
    if levels < 1:
        raise PyramidError("levels must be >= 1")
    if factor < 2:
        raise PyramidError("factor must be >= 2")
    h, w = img.shape[:2]
    for k in range(1, levels):
        if min(w, h) // factor ** k == 0:
            raise PyramidError(
                f"level {k} would be degenerate: {w}x{h} cannot be downsampled by {factor}^{k}")
    out = [img.copy()]
    for _ in range(1, levels):
        out.append(downsample(out[-1], factor))
    return ImagePyramid(tuple(out), factor, pixel_um)


def clamp_box(x0, y0, x1, y1, width: int, height: int) -> BBox:
    cx0, cy0 = max(0, int(x0)), max(0, int(y0))
    cx1, cy1 = min(width, int(x1)), min(height, int(y1))
    if cx0 >= cx1 or cy0 >= cy1:
        raise PyramidError(f"box {(x0, y0, x1, y1)} is empty after clamping to {width}x{height}")
    return BBox(cx0, cy0, cx1, cy1)


def map_box(box: BBox, from_level: int, to_level: int, p: ImagePyramid) -> BBox:
    """Rescale a box between levels, rounding outward and clamping."""
    p._check_level(from_level)
    w, h = p.dims(to_level)
    steps = from_level - to_level
    if steps >= 0:
        s = p.factor ** steps
        x0, y0, x1, y1 = box.x0 * s, box.y0 * s, box.x1 * s, box.y1 * s
    else:
        s = p.factor ** -steps
        x0, y0 = box.x0 // s, box.y0 // s
        x1, y1 = -(-box.x1 // s), -(-box.y1 // s)
    return clamp_box(x0, y0, x1, y1, w, h)


def _floor_grid(v: float) -> float:
    return math.floor(v * _NORM_GRID + _SNAP) / _NORM_GRID


def _ceil_grid(v: float) -> float:
    return math.ceil(v * _NORM_GRID - _SNAP) / _NORM_GRID


def normalize_box(box: BBox, level: int, p: ImagePyramid) -> NormBBox:
    """Divide by level size, rounded outward onto a 1e-6 grid."""
    w, h = p.dims(level)
    return NormBBox(
        max(0.0, _floor_grid(box.x0 / w)), max(0.0, _floor_grid(box.y0 / h)),
        min(1.0, _ceil_grid(box.x1 / w)), min(1.0, _ceil_grid(box.y1 / h)))


def _snap_tol(dim: int) -> float:
    # Undo the outward grid rounding of normalize_box (at most 1e-6 of the
    # level size) without ever snapping across half a pixel.
    return min(0.49, dim / _NORM_GRID + _SNAP)


def _floor_px(v: float, tol: float) -> int:
    r = round(v)
    return int(r) if abs(v - r) <= tol else math.floor(v)


def _ceil_px(v: float, tol: float) -> int:
    r = round(v)
    return int(r) if abs(v - r) <= tol else math.ceil(v)


def denormalize_box(nb: NormBBox, level: int, p: ImagePyramid) -> BBox:
    w, h = p.dims(level)
    tw, th = _snap_tol(w), _snap_tol(h)
    return clamp_box(_floor_px(nb.x0 * w, tw), _floor_px(nb.y0 * h, th),
                     _ceil_px(nb.x1 * w, tw), _ceil_px(nb.y1 * h, th), w, h)
