"""Inverse (grid-sampling) and forward (z-buffered splatting) warps."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from rigidsynth.camgeo import (
    InvalidInputError,
    Intrinsics,
    Pose6DoF,
    Z_MIN,
    backproject,
    check_depth,
    pixel_grid,
    project_xyz,
    snap,
    transform_xyz,
    upsample_intrinsics,
)

DEFAULT_ALPHA = 2
FILL_RADIUS = 2


@dataclass
class WarpResult:
    image: np.ndarray
    validity: np.ndarray
    carried_depth: Optional[np.ndarray] = None


def _check_alpha(alpha) -> int:
    if int(alpha) != alpha or alpha < 1:
        raise InvalidInputError(f"alpha must be a positive integer, got {alpha}")
    return int(alpha)


def nearest_index(n_up: int, n: int, alpha: int) -> np.ndarray:
    """Source index of every upsampled index.

    Upsampled pixel ``j`` sits at coordinate ``j / alpha`` (the convention
    fixed by ``c' = alpha * c``); its nearest source pixel is
    ``round(j / alpha)`` with halves rounded up, clamped to the raster.
    """
    j = np.arange(n_up, dtype=np.int64)
    return np.minimum((j + alpha // 2) // alpha, n - 1)


def upsample_nearest(raster: np.ndarray, alpha: int) -> np.ndarray:
    """Nearest-neighbour upsampling by ``alpha`` on the ``j / alpha`` lattice."""
    a = _check_alpha(alpha)
    raster = np.asarray(raster)
    if a == 1:
        return np.array(raster, copy=True)
    h, w = raster.shape[:2]
    iy = nearest_index(a * h, h, a)
    ix = nearest_index(a * w, w, a)
    return raster[iy[:, None], ix[None, :]]


def downsample_stride(raster: np.ndarray, alpha: int) -> np.ndarray:
    a = _check_alpha(alpha)
    return np.array(raster[::a, ::a], copy=True)


def _check_raster(img: np.ndarray, K: Intrinsics, name: str) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape[:2] != K.shape:
        raise InvalidInputError(f"{name} shape {img.shape[:2]} does not match intrinsics {K.shape}")
    return img


def bilinear_sample(img: np.ndarray, u: np.ndarray, v: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Bilinearly sample ``img`` at ``(u, v)`` where ``valid``; zero elsewhere.

    Coordinates must lie in ``[0, W-1] x [0, H-1]`` wherever ``valid``;
    the upper lattice index is clamped to the last row/column.
    """
    h, w = img.shape[:2]
    uu = np.where(valid, u, 0.0)
    vv = np.where(valid, v, 0.0)
    x0 = np.minimum(np.floor(uu), max(w - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(vv), max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = uu - x0
    wy = vv - y0
    if img.ndim == 3:
        wx = wx[..., None]
        wy = wy[..., None]
    top = img[y0, x0] * (1.0 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1.0 - wx) + img[y1, x1] * wx
    out = top * (1.0 - wy) + bot * wy
    mask = valid[..., None] if img.ndim == 3 else valid
    return np.where(mask, out, 0.0)


def correspondences(D_tgt: np.ndarray, pose_tgt_to_ref: Pose6DoF, K: Intrinsics):
    """Sampling coordinates in the reference view for every target pixel."""
    pc = backproject(D_tgt, K)
    p = pc.points
    X, Y, Z = transform_xyz(p[..., 0], p[..., 1], p[..., 2], pose_tgt_to_ref)
    u, v, _ = project_xyz(X, Y, Z, K)
    valid = (Z > Z_MIN) & (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)
    return u, v, valid


def inverse_warp(
    I_ref: np.ndarray,
    D_tgt: np.ndarray,
    pose_tgt_to_ref: Pose6DoF,
    K: Intrinsics,
    D_ref: Optional[np.ndarray] = None,
) -> WarpResult:
    """Synthesize the target view by sampling ``I_ref`` at reprojected coordinates.

    When ``D_ref`` is given it is sampled at the same coordinates and
    returned as ``carried_depth``.
    """
    I_ref = _check_raster(I_ref, K, "reference image")
    D_tgt = check_depth(D_tgt, K)
    u, v, valid = correspondences(D_tgt, pose_tgt_to_ref, K)
    image = bilinear_sample(I_ref, u, v, valid)
    carried = None
    if D_ref is not None:
        carried = bilinear_sample(_check_raster(D_ref, K, "reference depth"), u, v, valid)
    return WarpResult(image, valid, carried)


def inverse_warp_with_depth(I_ref, D_tgt, D_ref, pose_tgt_to_ref, K) -> WarpResult:
    return inverse_warp(I_ref, D_tgt, pose_tgt_to_ref, K, D_ref=D_ref)


def transformed_depth(D_src: np.ndarray, pose_src_to_other: Pose6DoF, K: Intrinsics) -> np.ndarray:
    """Depth of every source pixel's 3D point as seen from the other camera.

    The result stays on the source pixel grid.
    """
    p = backproject(D_src, K).points
    _, _, Z = transform_xyz(p[..., 0], p[..., 1], p[..., 2], pose_src_to_other)
    return Z


# ---------------------------------------------------------------------------
# forward projection


@dataclass
class SplatBuffer:
    """Per-target-pixel winner of a z-buffered forward projection.

    ``source`` holds the flat index of the winning source pixel at the
    original resolution (-1 for holes), ``depth`` its projected depth.
    ``hit`` marks cells reached directly by the splat, ``filled`` cells
    completed by the nearest-neighbour hole fill.
    """

    source: np.ndarray
    depth: np.ndarray
    hit: np.ndarray
    filled: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.hit | self.filled

    @property
    def shape(self) -> tuple[int, int]:
        return self.source.shape

    @property
    def hole_fraction(self) -> float:
        return float(1.0 - self.valid.mean())

    def gather(self, raster: np.ndarray) -> np.ndarray:
        """Carry a source-resolution payload along the splat geometry."""
        raster = np.asarray(raster)
        h, w = self.shape
        if raster.shape[:2] != (h, w):
            raise InvalidInputError(f"payload shape {raster.shape[:2]} does not match splat {(h, w)}")
        flat = raster.reshape((h * w,) + raster.shape[2:])
        idx = np.where(self.source >= 0, self.source, 0)
        out = flat[idx]
        mask = self.valid if raster.ndim == 2 else self.valid[..., None]
        return np.where(mask, out, np.zeros((), dtype=out.dtype))


@dataclass
class _CellWinners:
    """Best candidate per output cell; key order is (depth, slot, src)."""

    depth: np.ndarray
    slot: np.ndarray
    src: np.ndarray

    @classmethod
    def empty(cls, n_cells: int) -> "_CellWinners":
        return cls(
            np.full(n_cells, np.inf),
            np.full(n_cells, np.iinfo(np.int64).max, dtype=np.int64),
            np.full(n_cells, np.iinfo(np.int64).max, dtype=np.int64),
        )


def _scatter(cell, depth, slot, src, n_cells: int) -> _CellWinners:
    out = _CellWinners.empty(n_cells)
    if cell.size == 0:
        return out
    # segment by cell, then lexicographic min of (depth, slot, src) per segment
    order = np.argsort(cell, kind="stable")
    c = cell[order]
    starts = np.flatnonzero(np.r_[True, c[1:] != c[:-1]])
    seg = np.cumsum(np.r_[False, c[1:] != c[:-1]])
    z = depth[order]
    best = z == np.minimum.reduceat(z, starts)[seg]
    sl = np.where(best, slot[order], np.iinfo(np.int64).max)
    best &= sl == np.minimum.reduceat(sl, starts)[seg]
    sr = np.where(best, src[order], np.iinfo(np.int64).max)
    best &= sr == np.minimum.reduceat(sr, starts)[seg]
    pick = order[best]
    out.depth[cell[pick]] = depth[pick]
    out.slot[cell[pick]] = slot[pick]
    out.src[cell[pick]] = src[pick]
    return out


def _merge(a: _CellWinners, b: _CellWinners) -> _CellWinners:
    better = (b.depth < a.depth) | (
        (b.depth == a.depth) & ((b.slot < a.slot) | ((b.slot == a.slot) & (b.src < a.src)))
    )
    return _CellWinners(
        np.where(better, b.depth, a.depth),
        np.where(better, b.slot, a.slot),
        np.where(better, b.src, a.src),
    )


def _fill_offsets(radius: int) -> list[tuple[int, int, int]]:
    offs = [
        (max(abs(dy), abs(dx)), dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if (dy, dx) != (0, 0)
    ]
    return sorted(offs)


def _fill_holes(source, depth, hit, radius: int):
    """Nearest occupied neighbour by Chebyshev distance, ties to smaller depth."""
    h, w = hit.shape
    filled = np.zeros_like(hit)
    if radius <= 0 or hit.all() or not hit.any():
        return source, depth, filled
    best_d = np.full((h, w), np.inf)
    best_r = np.full((h, w), radius + 1)
    best_src = np.full((h, w), -1, dtype=np.int64)
    empty = ~hit
    for r, dy, dx in _fill_offsets(radius):
        ys0, ys1 = max(0, -dy), min(h, h - dy)
        xs0, xs1 = max(0, -dx), min(w, w - dx)
        if ys0 >= ys1 or xs0 >= xs1:
            continue
        tgt = (slice(ys0, ys1), slice(xs0, xs1))
        nb = (slice(ys0 + dy, ys1 + dy), slice(xs0 + dx, xs1 + dx))
        cand = empty[tgt] & hit[nb]
        nd = depth[nb]
        take = cand & ((r < best_r[tgt]) | ((r == best_r[tgt]) & (nd < best_d[tgt])))
        best_r[tgt] = np.where(take, r, best_r[tgt])
        best_d[tgt] = np.where(take, nd, best_d[tgt])
        best_src[tgt] = np.where(take, source[nb], best_src[tgt])
    filled = empty & (best_src >= 0)
    source = np.where(filled, best_src, source)
    depth = np.where(filled, best_d, depth)
    return source, depth, filled


def splat(
    D_ref: np.ndarray,
    pose_ref_to_tgt: Pose6DoF,
    K: Intrinsics,
    alpha: int = DEFAULT_ALPHA,
    fill_radius: int = FILL_RADIUS,
    partitions: Optional[Sequence[np.ndarray]] = None,
) -> SplatBuffer:
    """Forward-project the (pre-upsampled) reference geometry into the target view.

    Every upsampled source pixel lands on the rounded target coordinate at
    the upsampled resolution; each output cell keeps the smallest-depth
    occupant of the ``alpha x alpha`` block of upsampled cells nearest to
    it. ``partitions`` optionally splits the upsampled source indices
    into groups that are scattered independently and then reduced; the
    result does not depend on the grouping.
    """
    a = _check_alpha(alpha)
    D_ref = check_depth(D_ref, K)
    h, w = K.shape
    Ku = upsample_intrinsics(K, a)
    Du = upsample_nearest(D_ref, a)
    xs, ys = pixel_grid(*Du.shape)
    X = Du * ((xs - Ku.cx) / Ku.fx)
    Y = Du * ((ys - Ku.cy) / Ku.fy)
    Xt, Yt, Zt = transform_xyz(X, Y, Du, pose_ref_to_tgt)
    front = Zt > Z_MIN
    with np.errstate(divide="ignore", invalid="ignore"):
        u = snap(np.where(front, Ku.fx * Xt / Zt + Ku.cx, 0.0))
        v = snap(np.where(front, Ku.fy * Yt / Zt + Ku.cy, 0.0))
    front &= np.isfinite(u) & np.isfinite(v) & (np.abs(u) < 1e12) & (np.abs(v) < 1e12)
    ur = np.rint(np.where(front, u, 0.0)).astype(np.int64)
    vr = np.rint(np.where(front, v, 0.0)).astype(np.int64)
    # output cell = nearest original pixel of the upsampled target coordinate
    cx_ = (ur + a // 2) // a
    cy_ = (vr + a // 2) // a
    keep = (front & (cx_ >= 0) & (cx_ < w) & (cy_ >= 0) & (cy_ < h)).ravel()

    src = np.nonzero(keep)[0]
    cx_, cy_, z = cx_.ravel()[src], cy_.ravel()[src], Zt.ravel()[src]
    cell = cy_ * w + cx_
    slot = (vr.ravel()[src] + a // 2 - a * cy_) * a + (ur.ravel()[src] + a // 2 - a * cx_)

    n_cells = h * w
    if partitions is None:
        win = _scatter(cell, z, slot, src, n_cells)
    else:
        win = _CellWinners.empty(n_cells)
        pos = np.full(keep.size, -1, dtype=np.int64)
        pos[src] = np.arange(src.size)
        for part in partitions:
            sel = pos[np.asarray(part, dtype=np.int64)]
            sel = np.sort(sel[sel >= 0])
            win = _merge(win, _scatter(cell[sel], z[sel], slot[sel], src[sel], n_cells))

    hit = np.isfinite(win.depth).reshape(h, w)
    wu = a * w
    src_up = np.where(hit.ravel(), win.src, 0)
    source = nearest_index(a * h, h, a)[src_up // wu] * w + nearest_index(wu, w, a)[src_up % wu]
    source = np.where(hit.ravel(), source, -1).reshape(h, w)
    depth = np.where(hit.ravel(), win.depth, 0.0).reshape(h, w)
    source, depth, filled = _fill_holes(source, depth, hit, fill_radius)
    return SplatBuffer(source=source, depth=depth, hit=hit, filled=filled)


def forward_project(
    I_ref: np.ndarray,
    D_ref: np.ndarray,
    pose_ref_to_tgt: Pose6DoF,
    K: Intrinsics,
    alpha: int = DEFAULT_ALPHA,
    fill_radius: int = FILL_RADIUS,
) -> WarpResult:
    """Forward-warp ``I_ref`` into the target view using reference geometry.

    Returns the warped image, the complement of the hole mask and the
    projected depth raster.
    """
    I_ref = _check_raster(I_ref, K, "reference image")
    buf = splat(D_ref, pose_ref_to_tgt, K, alpha, fill_radius)
    return WarpResult(buf.gather(I_ref), buf.valid, buf.depth)
