"""Training-objective terms: photometric, geometric, smoothness, translation and height.

All reductions go through :func:`tree_sum`, a fixed pairwise summation
tree, so every loss value is reproducible bit for bit regardless of array
layout.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from rigidsynth.camgeo import Intrinsics, InvalidInputError

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
COS_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    photometric: float = 2.0
    geometric: float = 1.0
    smoothness: float = 0.1
    translation: float = 0.1
    height: float = 0.02
    ssim_gamma: float = 0.85

    def __post_init__(self) -> None:
        for name in ("photometric", "geometric", "smoothness", "translation", "height"):
            if not getattr(self, name) >= 0:
                raise InvalidInputError(f"loss weight {name} must be non-negative")
        if not 0.0 <= self.ssim_gamma <= 1.0:
            raise InvalidInputError("ssim_gamma must lie in [0, 1]")

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(
            self.photometric * c,
            self.geometric * c,
            self.smoothness * c,
            self.translation * c,
            self.height * c,
            self.ssim_gamma,
        )


@dataclass
class LossComponents:
    Lp: float = 0.0
    Lg: float = 0.0
    Ls: float = 0.0
    Lt: float = 0.0
    Lh: float = 0.0
    valid_pixel_fraction: float = 0.0

    def __add__(self, other: "LossComponents") -> "LossComponents":
        return LossComponents(
            self.Lp + other.Lp,
            self.Lg + other.Lg,
            self.Ls + other.Ls,
            self.Lt + other.Lt,
            self.Lh + other.Lh,
            0.5 * (self.valid_pixel_fraction + other.valid_pixel_fraction),
        )

    def report(self, weights: LossWeights) -> dict:
        out = asdict(self)
        out["total"] = total_loss(self, weights)
        return {k: out[k] for k in ("Lp", "Lg", "Ls", "Lt", "Lh", "total", "valid_pixel_fraction")}


def total_loss(c: LossComponents, w: LossWeights) -> float:
    return (
        w.photometric * c.Lp
        + w.geometric * c.Lg
        + w.smoothness * c.Ls
        + w.translation * c.Lt
        + w.height * c.Lh
    )


# ---------------------------------------------------------------------------
# reductions


def tree_sum(values) -> float:
    """Sum by repeatedly adding adjacent pairs (odd tails padded with 0.0)."""
    a = np.asarray(values, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    while a.size > 1:
        if a.size % 2:
            a = np.append(a, 0.0)
        a = a[0::2] + a[1::2]
    return float(a[0])


def weighted_mean(values: np.ndarray, weights: np.ndarray) -> float:
    """``sum(w * v) / sum(w)``; 0.0 when the weights vanish."""
    den = tree_sum(weights)
    if den == 0.0:
        return 0.0
    return tree_sum(np.asarray(weights, dtype=np.float64) * values) / den


def _channel_mean(x: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return x
    acc = x[..., 0]
    for c in range(1, x.shape[-1]):
        acc = acc + x[..., c]
    return acc / x.shape[-1]


# ---------------------------------------------------------------------------
# depth consistency


def depth_inconsistency(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Normalized depth disagreement ``mask * |a - b| / (a + b)``.

    Pixels where ``a + b`` is not positive are left at zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    s = a + b
    ok = (np.asarray(mask) > 0) & (s > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.abs(a - b) / s
    m = np.asarray(mask, dtype=np.float64)
    return np.where(ok, m * d, 0.0)


def unify_inconsistency(maps: Iterable[np.ndarray]) -> np.ndarray:
    out = None
    for m in maps:
        out = np.array(m, dtype=np.float64, copy=True) if out is None else out + m
    if out is None:
        raise InvalidInputError("no inconsistency maps to unify")
    return out


def weighted_valid_mask(d_diff: np.ndarray, valid: np.ndarray) -> np.ndarray:
    return (1.0 - d_diff) * np.asarray(valid, dtype=np.float64)


# ---------------------------------------------------------------------------
# photometric


def _pool3(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[:2]
    acc = None
    for dy in range(3):
        for dx in range(3):
            s = x[dy : h - 2 + dy, dx : w - 2 + dx]
            acc = s if acc is None else acc + s
    return acc / 9.0


def ssim(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Per-pixel SSIM from 3x3 mean pooling over valid windows.

    The result is cropped by one pixel on each side: shape (H-2, W-2[, C]).
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise InvalidInputError(f"ssim operands differ in shape: {A.shape} vs {B.shape}")
    if A.shape[0] < 3 or A.shape[1] < 3:
        raise InvalidInputError("ssim needs at least a 3x3 raster")
    mu_a = _pool3(A)
    mu_b = _pool3(B)
    sig_a = _pool3(A * A) - mu_a * mu_a
    sig_b = _pool3(B * B) - mu_b * mu_b
    sig_ab = _pool3(A * B) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * sig_ab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (sig_a + sig_b + SSIM_C2)
    return num / den


def photometric_error_map(I2: np.ndarray, I_hat: np.ndarray, gamma: float) -> np.ndarray:
    """Per-pixel ``(1-g)|I2 - I_hat| + g (1 - SSIM)``, channel-averaged, interior only."""
    l1 = np.abs(np.asarray(I2, dtype=np.float64) - I_hat)[1:-1, 1:-1]
    s = ssim(I2, I_hat)
    return _channel_mean((1.0 - gamma) * l1 + gamma * (1.0 - s))


def photometric_loss(I2: np.ndarray, I_hat: np.ndarray, V: np.ndarray, gamma: float = 0.85) -> float:
    """Weighted photometric loss normalized by the total weight.

    The one-pixel border is excluded (SSIM needs a full window).
    """
    e = photometric_error_map(I2, I_hat, gamma)
    return weighted_mean(e, np.asarray(V, dtype=np.float64)[1:-1, 1:-1])


def geometric_loss(valid: np.ndarray, d_diff: np.ndarray) -> float:
    return weighted_mean(d_diff, np.asarray(valid, dtype=np.float64))


def smoothness_loss(D: np.ndarray, I: np.ndarray) -> float:
    """Edge-aware smoothness, summed over x and y forward differences."""
    D = np.asarray(D, dtype=np.float64)
    I = np.asarray(I, dtype=np.float64)
    total = 0.0
    for axis in (1, 0):
        dD = np.diff(D, axis=axis)
        dI = _channel_mean(np.abs(np.diff(I, axis=axis)))
        t = dD * np.exp(-dI)
        if t.size:
            total += tree_sum(t * t) / t.size
    return total


# ---------------------------------------------------------------------------
# object motion priors


def mean_backprojected_point(depth: np.ndarray, mask: np.ndarray, K: Intrinsics) -> Optional[np.ndarray]:
    m = np.asarray(mask) > 0
    n = int(m.sum())
    if n == 0:
        return None
    ys, xs = np.nonzero(m)
    d = np.asarray(depth, dtype=np.float64)[m]
    X = d * ((xs - K.cx) / K.fx)
    Y = d * ((ys - K.cy) / K.fy)
    return np.array([tree_sum(X) / n, tree_sum(Y) / n, tree_sum(d) / n])


def translation_prior(
    D_fw: np.ndarray, M_fw: np.ndarray, D2: np.ndarray, M2: np.ndarray, K: Intrinsics
) -> Optional[np.ndarray]:
    """Mean target-frame object point minus mean forward-warped object point.

    Returns None when either mask is empty.
    """
    fw = mean_backprojected_point(D_fw, M_fw, K)
    tg = mean_backprojected_point(D2, M2, K)
    if fw is None or tg is None:
        return None
    return tg - fw


def _norm3(v) -> float:
    return math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])


def translation_constraint_loss(ts: Sequence, tps: Sequence) -> float:
    if len(ts) != len(tps):
        raise InvalidInputError("translation and prior counts differ")
    total = 0.0
    for t, tp in zip(ts, tps):
        nt, np_ = _norm3(t), _norm3(tp)
        cos_term = 0.0
        if nt >= COS_EPS and np_ >= COS_EPS:
            # 1 - cos as half the squared distance of the unit vectors: exactly 0 for t == tp
            d = [t[i] / nt - tp[i] / np_ for i in range(3)]
            cos_term = 0.5 * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
        total += abs(nt - np_) + cos_term
    return total


def mask_pixel_height(mask: np.ndarray) -> int:
    rows = np.flatnonzero(np.asarray(mask).any(axis=1))
    return 0 if rows.size == 0 else int(rows[-1] - rows[0] + 1)


def height_constraint_loss(
    D: np.ndarray,
    masks: Sequence[np.ndarray],
    fy: float,
    p_h: float,
    heights: Optional[Sequence[float]] = None,
    mean_depth: Optional[float] = None,
) -> float:
    """Object height prior: per-object mean of ``|D - fy * p_h / h|`` over the mask, over the scene mean depth.

    ``mean_depth`` is a constant with respect to ``D`` (pass it explicitly to
    freeze it); it defaults to the mean of ``D``.
    """
    D = np.asarray(D, dtype=np.float64)
    dbar = tree_sum(D) / D.size if mean_depth is None else float(mean_depth)
    if heights is None:
        heights = [mask_pixel_height(m) for m in masks]
    total = 0.0
    for m, h in zip(masks, heights):
        m = np.asarray(m) > 0
        n = int(m.sum())
        if n == 0:
            continue
        if h < 1:
            raise InvalidInputError(f"object pixel height must be >= 1, got {h}")
        total += tree_sum(np.abs(D[m] - fy * p_h / h)) / n / dbar
    return total
