"""Core raster primitives.

Images are plain numpy arrays: ``uint8`` of shape ``(H, W, C)`` with ``C`` in
``{1, 3}``; masks are ``bool`` arrays of shape ``(H, W)``. Every function here
is pure and returns fresh arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

GRAY_WEIGHTS = (0.299, 0.587, 0.114)
CONNECTIVITY_8 = np.ones((3, 3), dtype=bool)


class RasterError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class BBox:
    """Half-open pixel box ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise RasterError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    def contains(self, other: "BBox") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and other.x1 <= self.x1 and other.y1 <= self.y1)

    def iou(self, other: "BBox") -> float:
        ix = max(0, min(self.x1, other.x1) - max(self.x0, other.x0))
        iy = max(0, min(self.y1, other.y1) - max(self.y0, other.y0))
        inter = ix * iy
        return inter / (self.area + other.area - inter)


@dataclass(frozen=True)
class NormBBox:
    """Box in unit-normalized coordinates, ``0 <= x0 < x1 <= 1``."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise RasterError(f"invalid normalized box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True)
class Component:
    label: int
    area: int
    centroid: tuple[float, float]  # (x, y)
    bbox: BBox


def as_image(img) -> np.ndarray:
    """Coerce to a ``(H, W, C)`` uint8 array, validating shape."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise RasterError(f"expected (H, W, 1|3) image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise RasterError("image must be at least 1x1")
    if arr.dtype != np.uint8:
        raise RasterError(f"expected uint8 pixels, got {arr.dtype}")
    return arr


def to_rgb(img) -> np.ndarray:
    img = as_image(img)
    if img.shape[2] == 1:
        return np.repeat(img, 3, axis=2)
    return img


def to_gray(img) -> np.ndarray:
    img = as_image(img)
    if img.shape[2] == 1:
        return img
    weighted = img.astype(np.float64) @ np.asarray(GRAY_WEIGHTS)
    return np.rint(weighted).clip(0, 255).astype(np.uint8)[:, :, None]


def channel_subtract(img, a: int, b: int) -> np.ndarray:
    """Saturating ``max(0, img[a] - img[b])`` as a one-channel image."""
    img = as_image(img)
    c = img.shape[2]
    if not (0 <= a < c and 0 <= b < c):
        raise RasterError(f"channel index out of range for {c}-channel image: {a}, {b}")
    diff = img[:, :, a].astype(np.int16) - img[:, :, b].astype(np.int16)
    return np.maximum(diff, 0).astype(np.uint8)[:, :, None]


def otsu_level(hist: np.ndarray) -> int | None:
    """Otsu split point over a histogram; ``None`` if only one bin is populated.

    Pixels ``<= t`` form the lower class. When several ``t`` tie for the best
    between-class variance, the middle of the tied range is returned.
    """
    hist = np.asarray(hist, dtype=np.float64)
    if np.count_nonzero(hist) < 2:
        return None
    bins = np.arange(hist.size, dtype=np.float64)
    w0 = np.cumsum(hist)
    total = w0[-1]
    w1 = total - w0
    s0 = np.cumsum(hist * bins)
    mu_total = s0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = s0 / w0
        mu1 = (mu_total - s0) / w1
        var = w0 * w1 * (mu0 - mu1) ** 2
    var = np.where((w0 > 0) & (w1 > 0), var, -1.0)
    best = var.max()
    tied = np.flatnonzero(var >= best * (1 - 1e-12))
    return int((tied[0] + tied[-1]) // 2)


def otsu_threshold(img) -> tuple[np.ndarray, int]:
    """Binarize a grayscale image with Otsu's method.

    Returns ``(mask, threshold)`` with ``mask = img > threshold``. A constant
    image yields its own value as threshold and an all-false mask.
    """
    img = as_image(img)
    if img.shape[2] != 1:
        raise RasterError("otsu_threshold expects a one-channel image")
    plane = img[:, :, 0]
    hist = np.bincount(plane.ravel(), minlength=256)
    t = otsu_level(hist)
    if t is None:
        t = int(plane.flat[0])
    return plane > t, t


def disc(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def _check_mask(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise RasterError(f"expected 2-D mask, got shape {m.shape}")
    return m.astype(bool, copy=False)


def dilate(mask, radius: int) -> np.ndarray:
    return ndimage.binary_dilation(_check_mask(mask), structure=disc(radius))


def erode(mask, radius: int) -> np.ndarray:
    # Outside the image counts as set so opening stays anti-extensive and
    # closing extensive right up to the border.
    return ndimage.binary_erosion(_check_mask(mask), structure=disc(radius), border_value=1)


def morphology(mask, op: str, radius: int) -> np.ndarray:
    if radius < 1:
        raise RasterError("morphology radius must be >= 1")
    if op == "dilate":
        return dilate(mask, radius)
    if op == "erode":
        return erode(mask, radius)
    if op == "open":
        return dilate(erode(mask, radius), radius)
    if op == "close":
        return erode(dilate(mask, radius), radius)
    raise RasterError(f"unknown morphology op {op!r}")


def _neighbours(p: np.ndarray):
    # P2..P9 clockwise from north, on a zero-padded array.
    return (p[:-2, 1:-1], p[:-2, 2:], p[1:-1, 2:], p[2:, 2:],
            p[2:, 1:-1], p[2:, :-2], p[1:-1, :-2], p[:-2, :-2])


def _zhang_suen_pass(img: np.ndarray, first: bool) -> np.ndarray:
    p = np.pad(img, 1)
    n = [x.astype(np.uint8) for x in _neighbours(p)]
    p2, p3, p4, p5, p6, p7, p8, p9 = n
    b = sum(n)
    seq = n + [p2]
    a = sum(((seq[i] == 0) & (seq[i + 1] == 1)).astype(np.uint8) for i in range(8))
    if first:
        c1 = p2 * p4 * p6 == 0
        c2 = p4 * p6 * p8 == 0
    else:
        c1 = p2 * p4 * p8 == 0
        c2 = p2 * p6 * p8 == 0
    return img & (b >= 2) & (b <= 6) & (a == 1) & c1 & c2


def zhang_suen(mask) -> np.ndarray:
    """Textbook two-subiteration Zhang-Suen thinning."""
    img = _check_mask(mask).copy()
    while True:
        changed = False
        for first in (True, False):
            drop = _zhang_suen_pass(img, first)
            if drop.any():
                img &= ~drop
                changed = True
        if not changed:
            return img


def skeletonize(mask) -> np.ndarray:
    """Zhang-Suen thinning that never erases a component outright.

    Plain Zhang-Suen deletes 2x2 blocks completely; such components keep the
    pixel closest to their centroid.
    """
    m = _check_mask(mask)
    skel = zhang_suen(m)
    labels, n = ndimage.label(m, structure=CONNECTIVITY_8)
    if n == 0:
        return skel
    alive = np.zeros(n + 1, dtype=bool)
    alive[np.unique(labels[skel])] = True
    for lab in np.flatnonzero(~alive[1:]) + 1:
        ys, xs = np.nonzero(labels == lab)
        d = (ys - ys.mean()) ** 2 + (xs - xs.mean()) ** 2
        k = int(np.argmin(d))
        skel[ys[k], xs[k]] = True
    return skel


def label_components(mask) -> tuple[np.ndarray, list[Component]]:
    """8-connected labelling; labels are 1..N ordered by ``(bbox.y0, bbox.x0)``."""
    m = _check_mask(mask)
    raw, n = ndimage.label(m, structure=CONNECTIVITY_8)
    if n == 0:
        return raw, []
    objs = ndimage.find_objects(raw)
    idx = np.arange(1, n + 1)
    areas = np.bincount(raw.ravel(), minlength=n + 1)
    ys, xs = np.nonzero(raw)
    lab = raw[ys, xs]
    sx = np.bincount(lab, weights=xs, minlength=n + 1)
    sy = np.bincount(lab, weights=ys, minlength=n + 1)
    order = sorted(idx, key=lambda i: (objs[i - 1][0].start, objs[i - 1][1].start, i))
    remap = np.zeros(n + 1, dtype=np.int32)
    comps = []
    for new, old in enumerate(order, start=1):
        remap[old] = new
        sl_y, sl_x = objs[old - 1]
        comps.append(Component(
            label=new,
            area=int(areas[old]),
            centroid=(sx[old] / areas[old], sy[old] / areas[old]),
            bbox=BBox(sl_x.start, sl_y.start, sl_x.stop, sl_y.stop),
        ))
    return remap[raw], comps


def connected_components(mask) -> list[Component]:
    return label_components(mask)[1]


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            return np.asarray(im)
        if im.mode == "1":
            return np.asarray(im.convert("L")) > 0
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return as_image(np.asarray(im))


def write_png(path, img) -> None:
    """Write a uint8 image, a bool mask (0/255) or a uint16 label map."""
    arr = np.asarray(img)
    if arr.dtype == bool:
        im = Image.fromarray(arr.astype(np.uint8) * 255)
    elif arr.dtype == np.uint16:
        im = Image.fromarray(arr)
    else:
        arr = as_image(arr)
        im = Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    im.save(path, format="PNG", optimize=False)
