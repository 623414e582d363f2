"""Planar alignment of an exposure bracket against a reference pair.

Corners come from a Harris detector, descriptors are zero-mean normalized
15x15 patches matched brute-force by correlation with a ratio test, and the
homography is estimated by RANSAC over 4-point normalized-DLT fits with a
final refit on the consensus set. Mosaiced frames are warped per packed
plane so interpolation never mixes CFA channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter, sobel

from .errors import AlignmentError, InsufficientFeaturesError, ShapeError
from .raw import PackedRaw, pack_raw, unpack_raw

PATCH = 15
MIN_CORNERS = 8
RATIO_TEST = 0.8  # best/second-best correlation distance


@dataclass
class Correspondence:
    p: tuple[float, float]  # (x, y) in the source image
    q: tuple[float, float]  # (x, y) in the target image
    score: float = 1.0


@dataclass
class Homography:
    h: np.ndarray  # 3x3, normalized so h[2,2] == 1

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.float64)
        if self.h.shape != (3, 3):
            raise ShapeError(f"homography must be 3x3, got {self.h.shape}")
        if abs(np.linalg.det(self.h)) < 1e-12:
            raise ValueError("homography is singular")
        if abs(self.h[2, 2]) > 1e-12:
            self.h = self.h / self.h[2, 2]

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        ph = np.hstack([pts, np.ones((len(pts), 1))])
        q = ph @ self.h.T
        return q[:, :2] / q[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))


@dataclass
class RansacConfig:
    iters: int = 2000
    inlier_px: float = 2.0
    min_inliers: int = 10
    seed: int = 0


@dataclass
class AlignReport:
    n_matches: int
    n_inliers: int
    inlier_ratio: float
    mean_reproj_px: float


def harris_corners(img: np.ndarray, max_corners: int = 500, k: float = 0.05,
                   rel_threshold: float = 0.01, border: int = PATCH) -> np.ndarray:
    """Corner locations [(x, y), ...] sorted by response, border excluded."""
    img = np.asarray(img, dtype=np.float64)
    ix = sobel(img, axis=1, mode="nearest")
    iy = sobel(img, axis=0, mode="nearest")
    a = gaussian_filter(ix * ix, 1.5, mode="nearest")
    b = gaussian_filter(iy * iy, 1.5, mode="nearest")
    c = gaussian_filter(ix * iy, 1.5, mode="nearest")
    response = a * b - c * c - k * (a + b) ** 2

    peak = maximum_filter(response, size=5, mode="nearest")
    mask = (response == peak) & (response > rel_threshold * response.max())
    mask[:border, :] = mask[-border:, :] = False
    mask[:, :border] = mask[:, -border:] = False
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return np.empty((0, 2))
    order = np.argsort(response[ys, xs])[::-1][:max_corners]
    return np.column_stack([xs[order], ys[order]]).astype(np.float64)


def _descriptors(img: np.ndarray, corners: np.ndarray) -> np.ndarray:
    half = PATCH // 2
    out = np.empty((len(corners), PATCH * PATCH))
    for i, (x, y) in enumerate(corners.astype(int)):
        patch = img[y - half : y + half + 1, x - half : x + half + 1].ravel()
        patch = patch - patch.mean()
        norm = np.linalg.norm(patch)
        out[i] = patch / (norm + 1e-12)
    return out


def detect_and_match(src: np.ndarray, dst: np.ndarray,
                     max_corners: int = 500) -> list[Correspondence]:
    """Brute-force correlation matching of Harris corners, ratio-filtered."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape:
        raise ShapeError(f"images differ: {src.shape} vs {dst.shape}")
    if min(src.shape) < 32:
        raise ShapeError(f"images too small to align: {src.shape}")
    corners_src = harris_corners(src, max_corners)
    corners_dst = harris_corners(dst, max_corners)
    if len(corners_src) < MIN_CORNERS or len(corners_dst) < MIN_CORNERS:
        raise InsufficientFeaturesError(
            f"found {len(corners_src)}/{len(corners_dst)} corners, need {MIN_CORNERS}"
        )
    d_src = _descriptors(src, corners_src)
    d_dst = _descriptors(dst, corners_dst)
    ncc = d_src @ d_dst.T  # [n_src, n_dst] correlations in [-1, 1]

    matches = []
    for i in range(len(corners_src)):
        row = ncc[i]
        best = int(np.argmax(row))
        dist_best = 1.0 - row[best]
        if len(row) > 1:
            second = np.partition(row, -2)[-2]
            dist_second = 1.0 - second
            if dist_best >= RATIO_TEST * dist_second:
                continue
        matches.append(
            Correspondence(
                p=(float(corners_src[i, 0]), float(corners_src[i, 1])),
                q=(float(corners_dst[best, 0]), float(corners_dst[best, 1])),
                score=float(0.5 * (1.0 + row[best])),
            )
        )
    matches.sort(key=lambda m: m.score, reverse=True)
    return matches


def _normalize_points(pts: np.ndarray):
    centroid = pts.mean(axis=0)
    dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / (dist + 1e-12)
    t = np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])
    ph = np.hstack([pts, np.ones((len(pts), 1))])
    return (ph @ t.T)[:, :2], t


def _dlt(p: np.ndarray, q: np.ndarray) -> np.ndarray | None:
    """Direct linear transform on Hartley-normalized coordinates."""
    pn, tp = _normalize_points(p)
    qn, tq = _normalize_points(q)
    n = len(p)
    a = np.zeros((2 * n, 9))
    x, y = pn[:, 0], pn[:, 1]
    u, v = qn[:, 0], qn[:, 1]
    a[0::2] = np.column_stack([x, y, np.ones(n), np.zeros((n, 3)), -u * x, -u * y, -u])
    a[1::2] = np.column_stack([np.zeros((n, 3)), x, y, np.ones(n), -v * x, -v * y, -v])
    try:
        _, sv, vt = np.linalg.svd(a)
    except np.linalg.LinAlgError:
        return None
    if n == 4 and sv[-2] < 1e-10:  # degenerate (collinear) minimal sample
        return None
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(tq) @ hn @ tp
    if abs(h[2, 2]) < 1e-12:
        return None
    return h / h[2, 2]


def _reproj_errors(h: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    ph = np.hstack([p, np.ones((len(p), 1))])
    proj = ph @ h.T
    wcol = proj[:, 2:3]
    bad = np.abs(wcol[:, 0]) < 1e-12
    wcol = np.where(np.abs(wcol) < 1e-12, 1e-12, wcol)
    err = np.sqrt(((proj[:, :2] / wcol - q) ** 2).sum(axis=1))
    err[bad] = np.inf
    return err


def estimate_homography(
    matches, ransac: RansacConfig | None = None
) -> tuple[Homography, np.ndarray]:
    """RANSAC homography from correspondences; returns (H, inlier mask)."""
    ransac = ransac or RansacConfig()
    if isinstance(matches, np.ndarray):
        pts = np.asarray(matches, dtype=np.float64)
        p, q = pts[:, 0:2], pts[:, 2:4]
    else:
        p = np.array([m.p for m in matches], dtype=np.float64)
        q = np.array([m.q for m in matches], dtype=np.float64)
    n = len(p)
    if n < 4:
        raise AlignmentError(f"need at least 4 matches, got {n}")

    rng = np.random.default_rng(ransac.seed)
    best_count = -1
    best_err = np.inf
    best_mask = None
    for _ in range(ransac.iters):
        pick = rng.choice(n, size=4, replace=False)
        h = _dlt(p[pick], q[pick])
        if h is None:
            continue
        err = _reproj_errors(h, p, q)
        mask = err < ransac.inlier_px
        count = int(mask.sum())
        if count > best_count or (count == best_count and float(err[mask].mean() if count else np.inf) < best_err):
            best_count = count
            best_mask = mask
            best_err = float(err[mask].mean()) if count else np.inf

    if best_mask is None or best_count < max(4, ransac.min_inliers):
        raise AlignmentError(
            f"consensus too small: {max(best_count, 0)} inliers < {ransac.min_inliers}"
        )

    h = _dlt(p[best_mask], q[best_mask])
    if h is None:
        raise AlignmentError("degenerate consensus set")
    err = _reproj_errors(h, p, q)
    mask = err < ransac.inlier_px
    return Homography(h), mask


def warp(img: np.ndarray, h: Homography) -> np.ndarray:
    """Inverse-mapped bilinear warp; out-of-bounds samples become 0."""
    img = np.asarray(img, dtype=np.float64)
    plane_like = img[..., None] if img.ndim == 2 else img
    hh, ww = plane_like.shape[:2]
    hinv = np.linalg.inv(h.h)
    ys, xs = np.mgrid[0:hh, 0:ww]
    coords = np.stack([xs.ravel(), ys.ravel(), np.ones(hh * ww)])
    src = hinv @ coords
    sx = src[0] / src[2]
    sy = src[1] / src[2]

    eps = 1e-9  # tolerate roundoff at the exact image boundary
    valid = (sx >= -eps) & (sx <= ww - 1 + eps) & (sy >= -eps) & (sy <= hh - 1 + eps)
    sx = np.clip(sx, 0.0, ww - 1)
    sy = np.clip(sy, 0.0, hh - 1)

    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = sx - x0
    fy = sy - y0

    x0c = np.clip(x0, 0, ww - 1)
    y0c = np.clip(y0, 0, hh - 1)
    x1c = np.clip(x0 + 1, 0, ww - 1)
    y1c = np.clip(y0 + 1, 0, hh - 1)

    out = np.zeros((hh * ww, plane_like.shape[2]))
    flat = plane_like.reshape(hh * ww, -1)
    w00 = ((1 - fx) * (1 - fy))[:, None]
    w01 = (fx * (1 - fy))[:, None]
    w10 = ((1 - fx) * fy)[:, None]
    w11 = (fx * fy)[:, None]
    out = (
        flat[y0c * ww + x0c] * w00
        + flat[y0c * ww + x1c] * w01
        + flat[y1c * ww + x0c] * w10
        + flat[y1c * ww + x1c] * w11
    )
    out[~valid] = 0.0
    out = out.reshape(hh, ww, -1)
    return out[:, :, 0] if img.ndim == 2 else out


def warp_mosaic(plane: np.ndarray, h: Homography, phase: str) -> np.ndarray:
    """Warp a CFA mosaic plane per packed channel, then reassemble.

    Each half-resolution plane sees the homography conjugated into its own
    sample grid (full-res pixel x = 2u + offset), so color samples never
    blend across CFA sites.
    """
    packed = pack_raw(plane, phase)
    from .raw import _PHASE_OFFSETS

    warped = []
    for sub, (dy, dx) in zip(packed.planes, _PHASE_OFFSETS[phase]):
        t = np.array([[2.0, 0.0, float(dx)], [0.0, 2.0, float(dy)], [0.0, 0.0, 1.0]])
        h_plane = Homography(np.linalg.inv(t) @ h.h @ t)
        warped.append(warp(sub, h_plane))
    return unpack_raw(PackedRaw(planes=np.stack(warped)), phase)


def align_bracket(
    ref_src: np.ndarray,
    ref_dst: np.ndarray,
    bracket: list[np.ndarray],
    ransac: RansacConfig | None = None,
    phases: list[str | None] | None = None,
) -> tuple[list[np.ndarray], AlignReport]:
    """Estimate H from the best-exposure pair, warp every bracket frame.

    ``phases[i]`` marks frame i as a CFA mosaic of that phase (plane-wise
    warp); None warps directly.
    """
    matches = detect_and_match(ref_src, ref_dst)
    if len(matches) < 4:
        raise InsufficientFeaturesError(f"only {len(matches)} matches survived filtering")
    h, mask = estimate_homography(matches, ransac)
    p = np.array([m.p for m in matches])
    q = np.array([m.q for m in matches])
    err = _reproj_errors(h.h, p, q)
    report = AlignReport(
        n_matches=len(matches),
        n_inliers=int(mask.sum()),
        inlier_ratio=float(mask.mean()),
        mean_reproj_px=float(err[mask].mean()),
    )
    phases = phases or [None] * len(bracket)
    aligned = [
        warp_mosaic(frame, h, phase) if phase else warp(frame, h)
        for frame, phase in zip(bracket, phases)
    ]
    return aligned, report
