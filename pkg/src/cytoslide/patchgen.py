"""Labelled patch generation and dataset splitting.

Patches are 128x128 windows slid over each ROI crop with stride 64. Mostly
white windows are discarded; a window is abnormal when more than 20% of its
area is covered by the hand-drawn abnormal-cell mask.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import raster

log = logging.getLogger(__name__)

PATCH_SIZE = 128
STRIDE = 64
MAX_BACKGROUND = 0.75
ABNORMAL_FRACTION = 0.20
WHITE_CUTOFF = 200

NORMAL = "normal"
ABNORMAL = "abnormal"
LABELS = (NORMAL, ABNORMAL)


@dataclass(frozen=True)
class PatchRecord:
    roi_id: int
    origin: tuple[int, int]
    image: np.ndarray = field(repr=False)
    bg_fraction: float
    abn_fraction: float
    label: str

    @property
    def size(self) -> int:
        return self.image.shape[0]

    @property
    def filename(self) -> str:
        return f"roi{self.roi_id}_x{self.origin[0]}_y{self.origin[1]}.png"


def sliding_patches(roi, size: int = PATCH_SIZE, stride: int = STRIDE):
    img = raster.as_image(roi)
    h, w = img.shape[:2]
    if h < size or w < size:
        log.warning("ROI %dx%d is smaller than one %dpx window", w, h, size)
        return []
    return [((x, y), img[y:y + size, x:x + size])
            for y in range(0, h - size + 1, stride)
            for x in range(0, w - size + 1, stride)]


def background_fraction(patch, white_cutoff: int = WHITE_CUTOFF) -> float:
    img = raster.as_image(patch)
    return float((img.min(axis=2) >= white_cutoff).mean())


def label_patch(origin, size: int, abnormal_mask) -> tuple[float, str]:
    mask = np.asarray(abnormal_mask, dtype=bool)
    x, y = origin
    h, w = mask.shape
    if x < 0 or y < 0 or x + size > w or y + size > h:
        raise ValueError(f"window at {origin} size {size} exceeds mask {w}x{h}")
    count = int(mask[y:y + size, x:x + size].sum())
    # Integer form of count / size^2 > 0.20, immune to float rounding at the boundary.
    abnormal = count * 100 > 20 * size * size
    return count / (size * size), ABNORMAL if abnormal else NORMAL


def extract_patches(roi, abnormal_mask=None, roi_id: int = 0, size: int = PATCH_SIZE,
                    stride: int = STRIDE, white_cutoff: int = WHITE_CUTOFF,
                    max_background: float = MAX_BACKGROUND) -> list[PatchRecord]:
    """Slide, drop background-dominated windows, and label the rest."""
    img = raster.as_image(roi)
    if abnormal_mask is None:
        abnormal_mask = np.zeros(img.shape[:2], dtype=bool)
    if np.asarray(abnormal_mask).shape != img.shape[:2]:
        raise ValueError("abnormal mask and ROI differ in size")
    out = []
    for origin, patch in sliding_patches(img, size, stride):
        bg = background_fraction(patch, white_cutoff)
        if bg > max_background:
            continue
        frac, label = label_patch(origin, size, abnormal_mask)
        out.append(PatchRecord(roi_id, origin, patch.copy(), bg, frac, label))
    return out


def centroid_patches(abnormal_mask, roi, size: int = PATCH_SIZE, roi_id: int = 0,
                     white_cutoff: int = WHITE_CUTOFF) -> list[PatchRecord]:
    """One abnormal window per mask object, centred on its centroid."""
    img = raster.as_image(roi)
    mask = np.asarray(abnormal_mask, dtype=bool)
    h, w = img.shape[:2]
    if mask.shape != (h, w):
        raise ValueError("abnormal mask and ROI differ in size")
    if h < size or w < size:
        raise ValueError(f"ROI {w}x{h} smaller than a {size}px window")
    out = []
    for comp in raster.connected_components(mask):
        cx, cy = comp.centroid
        x = min(max(int(np.rint(cx)) - size // 2, 0), w - size)
        y = min(max(int(np.rint(cy)) - size // 2, 0), h - size)
        patch = img[y:y + size, x:x + size].copy()
        frac, _ = label_patch((x, y), size, mask)
        out.append(PatchRecord(roi_id, (x, y), patch, background_fraction(patch, white_cutoff),
                               frac, ABNORMAL))
    return out


MANIFEST_COLUMNS = ("patch_path", "roi_id", "origin_x", "origin_y", "label", "abn_fraction", "bg_fraction")


def dump_patch_manifest(records: Iterable[PatchRecord], prefix: str = "") -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(MANIFEST_COLUMNS)
    for r in records:
        wr.writerow([prefix + r.filename, r.roi_id, r.origin[0], r.origin[1], r.label,
                     f"{r.abn_fraction:.5f}", f"{r.bg_fraction:.5f}"])
    return buf.getvalue()


def read_labelled_table(path) -> list[dict[str, str]]:
    """Rows of a CSV that has at least a path-like first column and ``label``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for i, row in enumerate(rows, start=2):
        lab = (row.get("label") or "").strip().lower()
        if lab not in LABELS:
            raise ValueError(f"{path}:{i}: unknown label {row.get('label')!r}")
        row["label"] = lab
    return rows


@dataclass(frozen=True)
class SplitItem:
    ref: str
    source: str  # "patch" or "external"
    label: str


@dataclass(frozen=True)
class ClassCounts:
    train: int
    validation: int
    test: int = 0

    @property
    def total(self) -> int:
        return self.train + self.validation + self.test


@dataclass(frozen=True)
class SplitCounts:
    """Per-class allocation; defaults are the published 2060-per-class split."""

    patch: ClassCounts = ClassCounts(1200, 200, 660)
    external_normal: ClassCounts = ClassCounts(196, 46)
    external_abnormal: ClassCounts = ClassCounts(560, 115)

    @classmethod
    def proportional(cls, n_patch: int, n_ext_normal: int, n_ext_abnormal: int) -> "SplitCounts":
        """Scale the default ratios to other input sizes (remainder goes to test/validation)."""
        base = cls()

        def scale(c: ClassCounts, n: int, with_test: bool) -> ClassCounts:
            tr = int(n * c.train / c.total)
            if with_test:
                va = int(n * c.validation / c.total)
                return ClassCounts(tr, va, n - tr - va)
            return ClassCounts(tr, n - tr)

        return cls(scale(base.patch, n_patch, True),
                   scale(base.external_normal, n_ext_normal, False),
                   scale(base.external_abnormal, n_ext_abnormal, False))


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[SplitItem, ...]
    validation: tuple[SplitItem, ...]
    test: tuple[SplitItem, ...]
    seed: int

    def counts(self) -> dict[str, dict[str, int]]:
        out = {}
        for name in ("train", "validation", "test"):
            items = getattr(self, name)
            out[name] = {lab: sum(1 for it in items if it.label == lab) for lab in LABELS}
        return out


def _take(items: list, n: int, what: str) -> tuple[list, list]:
    if n > len(items):
        raise ValueError(f"insufficient {what}: need {n}, have {len(items)}")
    return items[:n], items[n:]


def balance_and_split(patch_records: Sequence[SplitItem], external_records: Sequence[SplitItem],
                      seed: int, counts: SplitCounts = SplitCounts()) -> DatasetSplit:
    """Balance patch classes and partition into train/validation/test.

    Every abnormal patch is kept and an equal number of normal patches is
    drawn without replacement. External records go to train/validation only.
    """
    rng = np.random.default_rng(seed)
    abn = [r for r in patch_records if r.label == ABNORMAL]
    nor = [r for r in patch_records if r.label == NORMAL]
    if len(nor) < len(abn):
        raise ValueError(f"insufficient normal patches: need {len(abn)}, have {len(nor)}")
    nor = [nor[i] for i in sorted(rng.choice(len(nor), size=len(abn), replace=False))]
    train, val, test = [], [], []
    for label, pool in ((NORMAL, nor), (ABNORMAL, abn)):
        pool = [pool[i] for i in rng.permutation(len(pool))]
        c = counts.patch
        part, pool = _take(pool, c.train, f"{label} patches for train")
        train += part
        part, pool = _take(pool, c.validation, f"{label} patches for validation")
        val += part
        part, pool = _take(pool, c.test, f"{label} patches for test")
        test += part
    for label, c in ((NORMAL, counts.external_normal), (ABNORMAL, counts.external_abnormal)):
        pool = [r for r in external_records if r.label == label]
        pool = [pool[i] for i in rng.permutation(len(pool))]
        part, pool = _take(pool, c.train, f"external {label} records for train")
        train += part
        part, pool = _take(pool, c.validation, f"external {label} records for validation")
        val += part
    shuffle = lambda xs: tuple(xs[i] for i in rng.permutation(len(xs)))  # noqa: E731
    return DatasetSplit(shuffle(train), shuffle(val), shuffle(test), seed)


def dump_split_manifest(items: Iterable[SplitItem]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(("path", "source", "label"))
    for it in items:
        wr.writerow((it.ref, it.source, it.label))
    return buf.getvalue()


def write_split(directory, split: DatasetSplit) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in ("train", "validation", "test"):
        p = d / f"{name}.csv"
        p.write_text(dump_split_manifest(getattr(split, name)), encoding="utf-8")
        paths.append(p)
    return paths
