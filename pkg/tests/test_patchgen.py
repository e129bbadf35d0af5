import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cytoslide import patchgen as P
from cytoslide.patchgen import ABNORMAL, NORMAL, SplitItem


def gray(h, w, v=120):
    return np.full((h, w, 3), v, np.uint8)


def mask_with(count, size=128):
    m = np.zeros((size, size), bool)
    m.ravel()[:count] = True
    return m


@pytest.mark.parametrize("side,expect", [(512, 49), (128, 1), (191, 1), (192, 4)])
def test_window_counts(side, expect):
    assert len(P.sliding_patches(gray(side, side))) == expect


def test_small_roi_warns(caplog):
    assert P.sliding_patches(gray(100, 300)) == []
    assert "smaller than one" in caplog.text


@settings(max_examples=60, deadline=None)
@given(st.integers(16, 200), st.integers(16, 200), st.integers(4, 16), st.integers(1, 12))
def test_window_formula_and_order(w, h, size, stride):
    wins = P.sliding_patches(gray(h, w), size, stride)
    brute = [(x, y) for y in range(h) for x in range(w)
             if x % stride == 0 and y % stride == 0 and x + size <= w and y + size <= h]
    assert [o for o, _ in wins] == brute
    assert len(wins) == ((w - size) // stride + 1) * ((h - size) // stride + 1)
    assert all(p.shape == (size, size, 3) for _, p in wins)


def test_background_fraction():
    assert P.background_fraction(gray(8, 8, 255)) == 1.0
    assert P.background_fraction(gray(8, 8, 50)) == 0.0
    p = gray(8, 8, 50)
    p[:4, :4] = (210, 220, 200)
    assert P.background_fraction(p) == 0.25
    p[0, 0] = (255, 255, 199)  # one channel below the cutoff
    assert P.background_fraction(p) == 15 / 64


def test_label_boundary_3276_3277():
    frac, lab = P.label_patch((0, 0), 128, mask_with(3277))
    assert lab == ABNORMAL and frac == pytest.approx(0.20001, abs=1e-5)
    frac, lab = P.label_patch((0, 0), 128, mask_with(3276))
    assert lab == NORMAL and frac == pytest.approx(0.19995, abs=1e-5)
    assert P.label_patch((0, 0), 128, np.zeros((128, 128), bool)) == (0.0, NORMAL)
    with pytest.raises(ValueError):
        P.label_patch((1, 0), 128, np.zeros((128, 128), bool))


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 64 * 64), st.integers(0, 64 * 64))
def test_label_monotone(a, b):
    lo, hi = sorted((a, b))
    labels = [P.label_patch((0, 0), 64, mask_with(n, 64))[1] for n in (lo, hi)]
    assert not (labels[0] == ABNORMAL and labels[1] == NORMAL)
    assert (labels[1] == ABNORMAL) == (hi * 5 > 64 * 64)


def test_extract_patches_rules():
    roi = gray(512, 512, 120)
    roi[:192, :192] = 255  # four windows lie entirely in white
    assert len(P.extract_patches(roi)) == 45
    recs = P.extract_patches(gray(512, 512))
    assert len(recs) == 49 and all(r.label == NORMAL for r in recs)
    roi = gray(256, 256)
    roi[:128, :96] = 250  # 75% white exactly: kept
    roi2 = roi.copy()
    roi2[:128, 96] = 250  # just above 75%: dropped
    assert (0, 0) in [r.origin for r in P.extract_patches(roi)]
    assert (0, 0) not in [r.origin for r in P.extract_patches(roi2)]
    mask = np.zeros((256, 256), bool)
    mask[130:200, 130:200] = True
    recs = {r.origin: r for r in P.extract_patches(gray(256, 256), mask)}
    assert recs[(128, 128)].label == ABNORMAL and recs[(0, 0)].label == NORMAL
    assert recs[(128, 128)].filename == "roi0_x128_y128.png"
    with pytest.raises(ValueError):
        P.extract_patches(gray(256, 256), np.zeros((255, 256), bool))


def test_extract_deterministic():
    rng = np.random.default_rng(0)
    roi = rng.integers(0, 256, (300, 260, 3), dtype=np.uint8)
    mask = rng.random((300, 260)) < 0.3
    a = P.extract_patches(roi, mask, 3)
    b = P.extract_patches(roi.copy(), mask.copy(), 3)
    assert [(r.origin, r.bg_fraction, r.abn_fraction, r.label) for r in a] == \
           [(r.origin, r.bg_fraction, r.abn_fraction, r.label) for r in b]


def blob_mask(size, centers, r=6):
    yy, xx = np.mgrid[:size, :size]
    m = np.zeros((size, size), bool)
    for cx, cy in centers:
        m |= (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    return m


def test_centroid_patches():
    (rec,) = P.centroid_patches(blob_mask(1024, [(300, 300)]), gray(1024, 1024))
    assert rec.origin == (236, 236) and rec.label == ABNORMAL
    (rec,) = P.centroid_patches(blob_mask(1024, [(10, 10)]), gray(1024, 1024))
    assert rec.origin == (0, 0)
    (rec,) = P.centroid_patches(blob_mask(300, [(295, 150)], 3), gray(300, 300))
    assert rec.origin == (300 - 128, 150 - 64)
    centers = [(40, 500), (500, 40), (900, 900), (100, 100), (600, 600)]
    recs = P.centroid_patches(blob_mask(1024, centers), gray(1024, 1024))
    assert len(recs) == 5 and all(r.image.shape == (128, 128, 3) for r in recs)
    # raster order of each blob's first pixel, clamped at the borders
    assert [r.origin for r in recs] == [(436, 0), (36, 36), (0, 436), (536, 536), (836, 836)]
    with pytest.raises(ValueError):
        P.centroid_patches(np.zeros((100, 100), bool), gray(100, 100))


def test_patch_manifest_format():
    recs = P.extract_patches(gray(192, 192), blob_mask(192, [(64, 64)], 40))
    text = P.dump_patch_manifest(recs, prefix="patches/")
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0]) == P.MANIFEST_COLUMNS
    assert rows[1][0] == "patches/roi0_x0_y0.png"
    assert rows[1][5].count(".") == 1 and len(rows[1][5].split(".")[1]) == 5


# --- splitting -------------------------------------------------------------

def published_inputs():
    patches = [SplitItem(f"p{i}", "patch", ABNORMAL) for i in range(2060)]
    patches += [SplitItem(f"n{i}", "patch", NORMAL) for i in range(2060 + 500)]
    ext = [SplitItem(f"h{i}", "external", NORMAL) for i in range(242)]
    ext += [SplitItem(f"g{i}", "external", ABNORMAL) for i in range(675)]
    return patches, ext


def test_published_split_counts():
    patches, ext = published_inputs()
    split = P.balance_and_split(patches, ext, seed=5)
    c = split.counts()
    assert c == {"train": {NORMAL: 1396, ABNORMAL: 1760},
                 "validation": {NORMAL: 246, ABNORMAL: 315},
                 "test": {NORMAL: 660, ABNORMAL: 660}}
    assert sum(sum(v.values()) for v in c.values()) == 5037
    assert all(it.source == "patch" for it in split.test)
    refs = [it.ref for part in (split.train, split.validation, split.test) for it in part]
    assert len(refs) == len(set(refs))
    # every abnormal patch kept, normals sampled down to match
    assert sum(r.startswith("p") for r in refs) == 2060
    assert sum(r.startswith("n") for r in refs) == 2060


def test_split_deterministic_and_seeded(tmp_path):
    patches, ext = published_inputs()
    a = P.balance_and_split(patches, ext, seed=1)
    b = P.balance_and_split(patches, ext, seed=1)
    c = P.balance_and_split(patches, ext, seed=2)
    assert a == b and a.train != c.train
    P.write_split(tmp_path / "a", a)
    P.write_split(tmp_path / "b", b)
    for name in ("train", "validation", "test"):
        assert (tmp_path / "a" / f"{name}.csv").read_bytes() == (tmp_path / "b" / f"{name}.csv").read_bytes()


def test_split_insufficient():
    patches, ext = published_inputs()
    with pytest.raises(ValueError, match="insufficient"):
        P.balance_and_split(patches[:2000], ext, seed=0)
    with pytest.raises(ValueError, match="external"):
        P.balance_and_split(patches, ext[:100], seed=0)
    few = [SplitItem("a", "patch", ABNORMAL)] * 3
    with pytest.raises(ValueError, match="normal"):
        P.balance_and_split(few, [], seed=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 60), st.integers(0, 40), st.integers(0, 30), st.integers(0, 30), st.integers(0, 99))
def test_proportional_split_partitions(n_abn, extra_norm, en, ea, seed):
    patches = [SplitItem(f"a{i}", "patch", ABNORMAL) for i in range(n_abn)]
    patches += [SplitItem(f"n{i}", "patch", NORMAL) for i in range(n_abn + extra_norm)]
    ext = [SplitItem(f"e{i}", "external", NORMAL) for i in range(en)]
    ext += [SplitItem(f"f{i}", "external", ABNORMAL) for i in range(ea)]
    split = P.balance_and_split(patches, ext, seed, P.SplitCounts.proportional(n_abn, en, ea))
    parts = [it.ref for part in (split.train, split.validation, split.test) for it in part]
    assert len(parts) == len(set(parts)) == 2 * n_abn + en + ea
    c = split.counts()
    assert sum(v[ABNORMAL] for v in c.values()) == n_abn + ea
    assert sum(v[NORMAL] for v in c.values()) == n_abn + en


def test_read_labelled_table(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("path,label\na.png,Normal\nb.png,ABNORMAL\n")
    assert [r["label"] for r in P.read_labelled_table(p)] == [NORMAL, ABNORMAL]
    p.write_text("path,label\na.png,weird\n")
    with pytest.raises(ValueError, match=":2:"):
        P.read_labelled_table(p)
