"""Feature-based alignment of an inked slide onto its clean reference.

ORB built from its parts: FAST-9 corners ranked by Harris response,
intensity-centroid orientation, and a steered 256-test binary descriptor.
Matches are filtered by a ratio test plus mutual cross-check, and a
homography is fit with RANSAC over normalized 4-point DLT.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .raster import RasterError, as_image, to_gray

log = logging.getLogger(__name__)

PATCH_RADIUS = 15
N_TESTS = 256
PATTERN_SEED = 0x0AB
HARRIS_K = 0.04
HARRIS_BLOCK = 7
SAMPLE_BOX = 5

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy).
CIRCLE = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
])
FAST_ARC = 9


class RegistrationError(RuntimeError):
    pass


class EstimationFailed(RegistrationError):
    pass


class Keypoint(NamedTuple):
    x: float
    y: float
    response: float
    orientation: float


class Match(NamedTuple):
    ref_idx: int
    target_idx: int
    distance: int


def _make_pattern() -> np.ndarray:
    rng = np.random.default_rng(PATTERN_SEED)
    reach = PATCH_RADIUS - SAMPLE_BOX // 2
    pts = []
    while len(pts) < 2 * N_TESTS:
        p = rng.normal(0.0, 2 * PATCH_RADIUS / 5, size=2)
        if p @ p <= reach ** 2:
            pts.append(p)
    return np.asarray(pts).reshape(N_TESTS, 2, 2)


# (256, 2, 2): test i compares point [i, 0] against point [i, 1]; columns are (x, y).
BRIEF_PATTERN = _make_pattern()
_disc_y, _disc_x = np.mgrid[-PATCH_RADIUS:PATCH_RADIUS + 1, -PATCH_RADIUS:PATCH_RADIUS + 1]
_in_disc = _disc_x ** 2 + _disc_y ** 2 <= PATCH_RADIUS ** 2
DISC_DX = _disc_x[_in_disc]
DISC_DY = _disc_y[_in_disc]


def _gray_plane(img) -> np.ndarray:
    return to_gray(as_image(img))[:, :, 0]


def _fast_candidates(g: np.ndarray, t: int, border: int):
    """FAST-9 segment test over the interior; returns flat indices and scores."""
    h, w = g.shape
    b = max(border, 3)
    if h <= 2 * b or w <= 2 * b:
        return np.empty(0, dtype=np.int64), np.empty(0)
    gi = g.astype(np.int16)
    c = gi[b:h - b, b:w - b]
    n_bright = np.zeros(c.shape, np.int8)
    n_dark = np.zeros(c.shape, np.int8)
    # Any arc of 9 covers at least two of the four compass points.
    for dx, dy in CIRCLE[::4]:
        v = gi[b + dy:h - b + dy, b + dx:w - b + dx]
        n_bright += v > c + t
        n_dark += v < c - t
    ys, xs = np.nonzero((n_bright >= 2) | (n_dark >= 2))
    ys, xs = ys + b, xs + b
    c = gi[ys, xs]
    ring = np.stack([gi[ys + dy, xs + dx] for dx, dy in CIRCLE])
    diff = ring - c

    def has_arc(flags):
        ext = np.concatenate([flags, flags[:FAST_ARC - 1]]).astype(np.int8)
        cs = np.zeros((ext.shape[0] + 1, ext.shape[1]), np.int8)
        np.cumsum(ext, axis=0, out=cs[1:])
        return ((cs[FAST_ARC:] - cs[:-FAST_ARC]) == FAST_ARC).any(axis=0)

    corner = has_arc(diff > t) | has_arc(diff < -t)
    diff = diff[:, corner]
    score = np.maximum(np.where(diff > t, diff - t, 0).sum(0),
                       np.where(-diff > t, -diff - t, 0).sum(0)).astype(np.float64)
    return ys[corner] * w + xs[corner], score


def harris_response(g: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Harris measure over a 7x7 block of Sobel gradients at each point.

    The image is edge-padded, so points near the border are well defined.
    """
    r = HARRIS_BLOCK // 2 + 1
    p = np.pad(g.astype(np.float64), r, mode="edge")
    off = np.arange(-r, r + 1)
    patch = p[(ys + r)[:, None, None] + off[None, :, None], (xs + r)[:, None, None] + off[None, None, :]]
    dx = patch[:, :, 2:] - patch[:, :, :-2]
    ix = dx[:, :-2] + 2 * dx[:, 1:-1] + dx[:, 2:]
    dy = patch[:, 2:, :] - patch[:, :-2, :]
    iy = dy[:, :, :-2] + 2 * dy[:, :, 1:-1] + dy[:, :, 2:]
    sxx = (ix * ix).sum((1, 2))
    syy = (iy * iy).sum((1, 2))
    sxy = (ix * iy).sum((1, 2))
    return sxx * syy - sxy * sxy - HARRIS_K * (sxx + syy) ** 2


def orientations(g: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Intensity-centroid angle over a radius-15 disc; outside pixels count as 0."""
    p = np.pad(g.astype(np.float64), PATCH_RADIUS)
    vals = p[ys[:, None] + PATCH_RADIUS + DISC_DY, xs[:, None] + PATCH_RADIUS + DISC_DX]
    m10 = vals @ DISC_DX
    m01 = vals @ DISC_DY
    return np.arctan2(m01, m10)


def detect_keypoints(img, fast_threshold: int = 20, max_keypoints: int = 500,
                     border: int = 3) -> list[Keypoint]:
    """Oriented FAST-9 keypoints, strongest Harris response first.

    ``border`` keeps detections that many pixels away from the edge (at least
    the 3 px the FAST circle needs).
    """
    g = _gray_plane(img)
    h, w = g.shape
    if h < 2 * PATCH_RADIUS + 1 or w < 2 * PATCH_RADIUS + 1:
        raise RasterError(f"image {w}x{h} smaller than the {2 * PATCH_RADIUS + 1}px descriptor patch")
    flat, score = _fast_candidates(g, int(fast_threshold), border)
    if flat.size == 0:
        return []
    # 3x3 non-maximum suppression on the FAST score; candidates sit >= 3 px
    # from the border so the neighbour offsets stay in range.
    score_map = np.zeros(h * w)
    score_map[flat] = score
    keep = np.ones(flat.size, dtype=bool)
    for off in (-w - 1, -w, -w + 1, -1, 1, w - 1, w, w + 1):
        keep &= score >= score_map.take(flat + off)
    ys, xs = np.divmod(flat[keep], w)
    resp = harris_response(g, xs, ys)
    order = np.lexsort((xs, ys, -resp))[:max_keypoints]
    ys, xs, resp = ys[order], xs[order], resp[order]
    theta = orientations(g, xs, ys)
    return [Keypoint(float(x), float(y), float(r), float(t))
            for x, y, r, t in zip(xs, ys, resp, theta)]


def compute_descriptors(img, keypoints: Sequence[Keypoint]) -> tuple[list[Keypoint], np.ndarray]:
    """Steered binary descriptors packed as ``(N, 32)`` uint8.

    Keypoints closer than 15 px to the border are dropped; the kept keypoints
    are returned alongside, in their original order.
    """
    g = _gray_plane(img)
    h, w = g.shape
    kept = [k for k in keypoints
            if PATCH_RADIUS <= round(k.x) < w - PATCH_RADIUS
            and PATCH_RADIUS <= round(k.y) < h - PATCH_RADIUS]
    if not kept:
        return [], np.zeros((0, N_TESTS // 8), dtype=np.uint8)
    # Each test point reads a 5x5 box mean around its location.
    smooth = ndimage.uniform_filter(g.astype(np.float32), SAMPLE_BOX, mode="nearest")
    cx = np.array([round(k.x) for k in kept])
    cy = np.array([round(k.y) for k in kept])
    cos = np.cos([k.orientation for k in kept])[:, None]
    sin = np.sin([k.orientation for k in kept])[:, None]

    def sample(pts):
        x = cx[:, None] + np.rint(pts[:, 0] * cos - pts[:, 1] * sin).astype(np.int64)
        y = cy[:, None] + np.rint(pts[:, 0] * sin + pts[:, 1] * cos).astype(np.int64)
        return smooth[y, x]

    bits = sample(BRIEF_PATTERN[:, 0]) < sample(BRIEF_PATTERN[:, 1])
    return kept, np.packbits(bits, axis=1)


def hamming_matrix(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.uint8).view(np.uint64)
    b = np.ascontiguousarray(b, dtype=np.uint8).view(np.uint64)
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.int32)
    for i in range(0, a.shape[0], chunk):
        x = a[i:i + chunk, None, :] ^ b[None, :, :]
        out[i:i + chunk] = np.bitwise_count(x).sum(axis=2, dtype=np.int32)
    return out


def match_descriptors(ref: np.ndarray, target: np.ndarray, ratio: float = 0.8,
                      cross_check: bool = True) -> list[Match]:
    """Nearest-neighbour matching with Lowe ratio test and mutual check.

    With a single target descriptor there is no second neighbour and the
    ratio test passes by convention.
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    if len(ref) == 0 or len(target) == 0:
        return []
    d = hamming_matrix(np.asarray(ref), np.asarray(target))
    nearest = np.argmin(d, axis=1)
    d1 = d[np.arange(len(ref)), nearest]
    if d.shape[1] > 1:
        d2 = np.partition(d, 1, axis=1)[:, 1]
        ok = d1 < ratio * d2
    else:
        ok = np.ones(len(ref), dtype=bool)
    if cross_check:
        back = np.argmin(d, axis=0)
        ok &= back[nearest] == np.arange(len(ref))
    matches = [Match(int(i), int(nearest[i]), int(d1[i])) for i in np.flatnonzero(ok)]
    matches.sort(key=lambda m: (m.distance, m.ref_idx, m.target_idx))
    return matches


def _normalizer(pts: np.ndarray) -> np.ndarray:
    """Hartley similarity: centroid to origin, mean distance sqrt(2).

    Works on ``(..., N, 2)`` and returns ``(..., 3, 3)``.
    """
    c = pts.mean(axis=-2, keepdims=True)
    d = np.sqrt(((pts - c) ** 2).sum(-1)).mean(-1)
    s = np.sqrt(2) / np.maximum(d, 1e-12)
    T = np.zeros(pts.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * c[..., 0, 0]
    T[..., 1, 2] = -s * c[..., 0, 1]
    T[..., 2, 2] = 1.0
    return T


def _apply(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply ``(..., 3, 3)`` homographies to ``(..., N, 2)`` points."""
    ph = np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1)
    q = ph @ np.swapaxes(H, -1, -2)
    return q[..., :2] / q[..., 2:3]


def dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized DLT, batched over leading axes. Returns H with ``dst ~ H src``."""
    Ts, Td = _normalizer(src), _normalizer(dst)
    s = _apply(Ts, src)
    d = _apply(Td, dst)
    x, y = s[..., 0], s[..., 1]
    u, v = d[..., 0], d[..., 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    r1 = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=-1)
    r2 = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=-1)
    A = np.concatenate([r1, r2], axis=-2)
    _, _, vt = np.linalg.svd(A)
    Hn = vt[..., -1, :].reshape(vt.shape[:-2] + (3, 3))
    return np.linalg.inv(Td) @ Hn @ Ts


def _collinear(pts: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """True where any 3 of the 4 points in each ``(n, 4, 2)`` sample are collinear."""
    out = np.zeros(pts.shape[0], dtype=bool)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = pts[:, i], pts[:, j], pts[:, k]
        area = np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                      - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
        scale = np.maximum(((b - a) ** 2).sum(1), ((c - a) ** 2).sum(1))
        out |= area <= eps * np.maximum(scale, 1e-12)
    return out


def normalize_h(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64) / H[2, 2]
    H[2, 2] = 1.0
    return H


def reprojection_error(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return np.sqrt(((_apply(H, src) - dst) ** 2).sum(-1))


def estimate_homography_ransac(matches: Sequence[Match], ref_kps: Sequence[Keypoint],
                               target_kps: Sequence[Keypoint], inlier_px: float = 3.0,
                               max_iters: int = 2000, seed: int = 0,
                               chunk: int = 500) -> tuple[np.ndarray, np.ndarray]:
    """Fit H mapping target keypoints onto reference keypoints.

    Returns ``(H, inlier_flags)`` with flags aligned to the input ``matches``
    order. Sampling runs over matches sorted by ``(ref_idx, target_idx)`` so
    the result does not depend on input order.
    """
    if len(matches) < 4:
        raise EstimationFailed(f"need at least 4 matches, got {len(matches)}")
    if inlier_px <= 0:
        raise ValueError("inlier_px must be > 0")
    order = sorted(range(len(matches)), key=lambda i: (matches[i].ref_idx, matches[i].target_idx))
    canon = [matches[i] for i in order]
    src = np.array([(target_kps[m.target_idx].x, target_kps[m.target_idx].y) for m in canon])
    dst = np.array([(ref_kps[m.ref_idx].x, ref_kps[m.ref_idx].y) for m in canon])
    n = len(canon)

    rng = np.random.default_rng(seed)
    samples = rng.integers(0, n, size=(max_iters, 4))
    while True:
        s = np.sort(samples, axis=1)
        dup = (np.diff(s, axis=1) == 0).any(axis=1)
        if not dup.any():
            break
        samples[dup] = rng.integers(0, n, size=(int(dup.sum()), 4))
    good = ~(_collinear(src[samples]) | _collinear(dst[samples]))
    samples = samples[good]
    if len(samples) == 0:
        raise EstimationFailed(f"all {max_iters} minimal samples were degenerate")

    best_count, best_err, best_H = -1, np.inf, None
    thr2 = inlier_px * inlier_px
    for i in range(0, len(samples), chunk):
        batch = samples[i:i + chunk]
        with np.errstate(all="ignore"):
            Hs = dlt(src[batch], dst[batch])
            proj = _apply(Hs, np.broadcast_to(src, (len(batch),) + src.shape))
            err2 = ((proj - dst) ** 2).sum(-1)
        err2 = np.where(np.isfinite(err2), err2, np.inf)
        inl = err2 < thr2
        counts = inl.sum(1)
        cost = np.where(inl, err2, thr2).sum(1)
        # Most inliers wins; ties go to lower truncated squared error, then earlier sample.
        j = int(np.lexsort((np.arange(len(batch)), cost, -counts))[0])
        if counts[j] > best_count or (counts[j] == best_count and cost[j] < best_err):
            best_count, best_err, best_H = int(counts[j]), float(cost[j]), Hs[j]
    if best_H is None or best_count < 4:
        raise EstimationFailed(f"no model reached 4 inliers (best {best_count})")

    inliers = reprojection_error(best_H, src, dst) < inlier_px
    if inliers.sum() >= 4:
        H = dlt(src[inliers], dst[inliers])
    else:
        H = best_H
    H = normalize_h(H)
    if not np.all(np.isfinite(H)) or abs(np.linalg.det(H)) < 1e-12:
        raise EstimationFailed("refit homography is singular")
    canon_flags = reprojection_error(H, src, dst) < inlier_px
    flags = np.empty(n, dtype=bool)
    flags[np.asarray(order)] = canon_flags
    return H, flags


def warp(img, h: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Resample ``img`` into an ``out_w x out_h`` frame where ``out(x) = img(h^-1 x)``.

    Bilinear interpolation; samples falling outside the source are 0.
    """
    img = as_image(img)
    h = np.asarray(h, dtype=np.float64)
    if not np.all(np.isfinite(h)) or abs(np.linalg.det(h)) < 1e-12:
        raise RegistrationError("homography is singular")
    inv = np.linalg.inv(h)
    src_h, src_w, c = img.shape
    xs = np.arange(out_w, dtype=np.float64)[None, :]
    ys = np.arange(out_h, dtype=np.float64)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        den = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
        sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / den
        sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / den
    eps = 1e-9
    valid = (sx >= -eps) & (sx <= src_w - 1 + eps) & (sy >= -eps) & (sy <= src_h - 1 + eps)
    sx = np.clip(np.where(valid, sx, 0.0), 0, src_w - 1)
    sy = np.clip(np.where(valid, sy, 0.0), 0, src_h - 1)
    x0 = np.minimum(sx.astype(np.intp), max(src_w - 2, 0))
    y0 = np.minimum(sy.astype(np.intp), max(src_h - 2, 0))
    x1 = np.minimum(x0 + 1, src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    fx = sx - x0
    fy = sy - y0
    i00 = y0 * src_w + x0
    i01 = y0 * src_w + x1
    i10 = y1 * src_w + x0
    i11 = y1 * src_w + x1
    out = np.zeros((out_h, out_w, c), dtype=np.uint8)
    for ch in range(c):
        f = img[:, :, ch].astype(np.float64).ravel()
        v00 = f.take(i00)
        v10 = f.take(i10)
        top = v00 + (f.take(i01) - v00) * fx
        bot = v10 + (f.take(i11) - v10) * fx
        val = top + (bot - top) * fy
        out[:, :, ch] = np.where(valid, np.rint(val), 0).clip(0, 255)
    return out


@dataclass(frozen=True)
class RegisterConfig:
    fast_threshold: int = 20
    max_keypoints: int = 500
    ratio: float = 0.8
    inlier_px: float = 3.0
    max_iters: int = 2000
    seed: int = 0


@dataclass
class RegistrationResult:
    homography: np.ndarray
    ref_keypoints: list[Keypoint]
    target_keypoints: list[Keypoint]
    matches: list[Match]
    inliers: np.ndarray

    def match_table(self) -> str:
        """Delimited dump of matches: ref_x, ref_y, tgt_x, tgt_y, distance, inlier."""
        lines = ["ref_x,ref_y,tgt_x,tgt_y,distance,inlier"]
        for m, ok in zip(self.matches, self.inliers):
            r, t = self.ref_keypoints[m.ref_idx], self.target_keypoints[m.target_idx]
            lines.append(f"{r.x:.2f},{r.y:.2f},{t.x:.2f},{t.y:.2f},{m.distance},{int(ok)}")
        return "\n".join(lines) + "\n"


def register_detailed(reference, target, cfg: RegisterConfig = RegisterConfig()) -> RegistrationResult:
    ref_g = _gray_plane(reference)
    tgt_g = _gray_plane(target)
    border = PATCH_RADIUS + 1
    ref_kps = detect_keypoints(ref_g, cfg.fast_threshold, cfg.max_keypoints, border)
    tgt_kps = detect_keypoints(tgt_g, cfg.fast_threshold, cfg.max_keypoints, border)
    ref_kps, ref_d = compute_descriptors(ref_g, ref_kps)
    tgt_kps, tgt_d = compute_descriptors(tgt_g, tgt_kps)
    if len(ref_kps) < 4 or len(tgt_kps) < 4:
        raise RegistrationError(
            f"too few keypoints: reference={len(ref_kps)}, target={len(tgt_kps)}")
    matches = match_descriptors(ref_d, tgt_d, cfg.ratio)
    log.debug("keypoints ref=%d target=%d matches=%d", len(ref_kps), len(tgt_kps), len(matches))
    try:
        H, flags = estimate_homography_ransac(matches, ref_kps, tgt_kps, cfg.inlier_px,
                                              cfg.max_iters, cfg.seed)
    except EstimationFailed as exc:
        raise EstimationFailed(
            f"{exc} (keypoints ref={len(ref_kps)} target={len(tgt_kps)}, matches={len(matches)})"
        ) from exc
    return RegistrationResult(H, ref_kps, tgt_kps, matches, flags)


def register(reference, target, cfg: RegisterConfig = RegisterConfig()) -> np.ndarray:
    """Homography mapping ``target`` pixel coordinates into ``reference``."""
    return register_detailed(reference, target, cfg).homography


def homography_from(rotation_deg: float = 0.0, tx: float = 0.0, ty: float = 0.0,
                    center: tuple[float, float] = (0.0, 0.0), scale: float = 1.0,
                    perspective: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Rotation about ``center`` followed by translation, with optional projective terms."""
    a = math.radians(rotation_deg)
    cx, cy = center
    c, s = scale * math.cos(a), scale * math.sin(a)
    R = np.array([[c, -s, cx - c * cx + s * cy + tx],
                  [s, c, cy - s * cx - c * cy + ty],
                  [perspective[0], perspective[1], 1.0]])
    return normalize_h(R)
