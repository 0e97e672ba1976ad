"""Instance masks and instance-wise view synthesis.

Masks are handled as boolean stacks of shape (n, H, W). Instance ``k``
of frame 1 and instance ``k`` of frame 2 are the same object; stacks are
ordered by descending frame-1 area.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from rigidsynth.camgeo import InvalidInputError, Intrinsics, Pose6DoF
from rigidsynth.warp import (
    DEFAULT_ALPHA,
    FILL_RADIUS,
    SplatBuffer,
    WarpResult,
    inverse_warp,
    splat,
    transformed_depth,
)

N_MAX = 3


def _as_stack(M, shape=None) -> np.ndarray:
    M = np.asarray(M)
    if M.ndim == 2:
        M = M[None]
    if M.ndim != 3:
        raise InvalidInputError(f"mask stack must be (n, H, W), got shape {M.shape}")
    if shape is not None and M.shape[0] and M.shape[1:] != tuple(shape):
        raise InvalidInputError(f"mask shape {M.shape[1:]} does not match raster {tuple(shape)}")
    return M > 0


@dataclass
class InstanceMaskStack:
    """Binary masks of one frame pair, ids 1..n ordered by frame-1 area."""

    frame1: np.ndarray
    frame2: np.ndarray
    dropped: int = 0

    def __post_init__(self) -> None:
        self.frame1 = np.asarray(self.frame1, dtype=bool)
        self.frame2 = np.asarray(self.frame2, dtype=bool)
        if self.frame1.shape != self.frame2.shape or self.frame1.ndim != 3:
            raise InvalidInputError("frame mask stacks must share an (n, H, W) shape")
        for f in (self.frame1, self.frame2):
            if f.shape[0] and (f.sum(axis=0) > 1).any():
                raise InvalidInputError("instance masks must be pairwise disjoint")

    @property
    def n(self) -> int:
        return self.frame1.shape[0]

    @property
    def background(self) -> np.ndarray:
        return background_mask(self.frame1, self.frame2)

    @classmethod
    def from_labels(cls, L1: np.ndarray, L2: np.ndarray, n_max: int = N_MAX) -> "InstanceMaskStack":
        """Build from label rasters (0 = background, ids shared across the pair).

        Instances are re-ranked by frame-1 area; those past ``n_max`` are
        merged into the background and counted in ``dropped``.
        """
        L1 = np.asarray(L1)
        L2 = np.asarray(L2)
        if L1.shape != L2.shape:
            raise InvalidInputError(f"label rasters differ in shape: {L1.shape} vs {L2.shape}")
        ids = sorted((set(np.unique(L1).tolist()) | set(np.unique(L2).tolist())) - {0})
        m1 = np.array([L1 == i for i in ids], dtype=bool).reshape(len(ids), *L1.shape)
        m2 = np.array([L2 == i for i in ids], dtype=bool).reshape(len(ids), *L1.shape)
        m1, m2 = order_by_area(m1, m2)
        dropped = max(0, len(ids) - n_max)
        return cls(m1[:n_max], m2[:n_max], dropped)

    def to_labels(self) -> tuple[np.ndarray, np.ndarray]:
        return stack_to_labels(self.frame1), stack_to_labels(self.frame2)


def stack_to_labels(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=bool)
    out = np.zeros(M.shape[1:], dtype=np.uint8)
    for k in range(M.shape[0]):
        out[M[k]] = k + 1
    return out


def order_by_area(M1: np.ndarray, M2: np.ndarray):
    """Sort both stacks by descending frame-1 area (stable)."""
    if M1.shape[0] == 0:
        return M1, M2
    areas = M1.sum(axis=(1, 2))
    order = np.argsort(-areas, kind="stable")
    return M1[order], M2[order]


def background_mask(M1, M2) -> np.ndarray:
    """Pixels outside every instance of both frames."""
    M1 = _as_stack(M1)
    M2 = _as_stack(M2)
    bg = np.ones(M1.shape[1:] if M1.shape[0] else M2.shape[1:], dtype=bool)
    if M1.shape[0]:
        bg &= ~M1.any(axis=0)
    if M2.shape[0]:
        bg &= ~M2.any(axis=0)
    return bg


def binarize(x: np.ndarray) -> np.ndarray:
    """Round fractional mask values up, keeping the result in {0, 1}."""
    return np.clip(np.ceil(np.asarray(x, dtype=np.float64)), 0.0, 1.0) > 0


@dataclass
class ForwardStage:
    """Ego-motion-compensated forward projection of frame 1 and its masks."""

    buffer: SplatBuffer
    image: np.ndarray
    masks: np.ndarray
    depth: np.ndarray

    def instance_image(self, k: int) -> np.ndarray:
        m = self.masks[k].astype(np.float64)
        return self.image * (m[..., None] if self.image.ndim == 3 else m)

    def instance_depth(self, k: int) -> np.ndarray:
        return self.depth * self.masks[k]


def forward_warp_pair(
    I1: np.ndarray,
    D1: np.ndarray,
    M1,
    ego_pose: Pose6DoF,
    K: Intrinsics,
    alpha: int = DEFAULT_ALPHA,
    fill_radius: int = FILL_RADIUS,
    buffer: Optional[SplatBuffer] = None,
) -> ForwardStage:
    """Forward-project frame 1 and every instance mask with one shared splat."""
    M1 = _as_stack(M1, K.shape) if np.asarray(M1).size else np.zeros((0,) + K.shape, dtype=bool)
    buf = buffer if buffer is not None else splat(D1, ego_pose, K, alpha, fill_radius)
    image = buf.gather(np.asarray(I1, dtype=np.float64))
    masks = np.array([binarize(buf.gather(m.astype(np.float64))) for m in M1], dtype=bool)
    masks = masks.reshape((M1.shape[0],) + K.shape)
    return ForwardStage(buf, image, masks, buf.depth)


def propagate_instance_mask(M_fw_k: np.ndarray, D2: np.ndarray, obj_pose: Pose6DoF, K: Intrinsics) -> np.ndarray:
    """Inverse-warp a forward-projected mask into frame 2 and re-binarize."""
    w = inverse_warp(np.asarray(M_fw_k, dtype=np.float64), D2, obj_pose, K)
    return binarize(w.image) & w.validity


@dataclass
class Region:
    """One disjoint region of the synthesized view with its aligned depth pair."""

    mask: np.ndarray
    aligned_depth: np.ndarray
    transformed_depth: np.ndarray
    instance: int  # 0 = background


@dataclass
class SynthesizedView:
    image: np.ndarray
    valid: np.ndarray
    regions: list[Region]
    instance_masks: np.ndarray
    exited: list[bool] = field(default_factory=list)
    forward: Optional[ForwardStage] = None

    @property
    def n(self) -> int:
        return self.instance_masks.shape[0]


def make_disjoint(masks: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Assign multiply-claimed pixels to the earliest (largest) instance."""
    claimed = None
    out = []
    for m in masks:
        m = np.asarray(m, dtype=bool)
        if claimed is None:
            claimed = np.zeros_like(m)
        keep = m & ~claimed
        claimed = claimed | keep
        out.append(keep)
    return out


def compose_view(
    bg_region: np.ndarray,
    bg_warp: WarpResult,
    bg_transformed: np.ndarray,
    inst_masks: Sequence[np.ndarray],
    inst_warps: Sequence[WarpResult],
    inst_transformed: Sequence[np.ndarray],
) -> SynthesizedView:
    """Merge background and instance terms into one partitioned view."""
    masks = make_disjoint(inst_masks)
    any_inst = np.zeros_like(bg_region, dtype=bool)
    for m in masks:
        any_inst |= m
    bg = bg_region & bg_warp.validity & ~any_inst
    img_mask = bg[..., None] if bg_warp.image.ndim == 3 else bg
    image = np.where(img_mask, bg_warp.image, 0.0)
    valid = bg.astype(np.float64)
    regions = [Region(bg, bg_warp.carried_depth, bg_transformed, 0)]
    for k, (m, w, td) in enumerate(zip(masks, inst_warps, inst_transformed)):
        mm = m[..., None] if w.image.ndim == 3 else m
        image = image + np.where(mm, w.image, 0.0)
        valid = valid + m
        regions.append(Region(m, w.carried_depth, td, k + 1))
    stack = np.array(masks, dtype=bool).reshape((len(masks),) + bg_region.shape)
    return SynthesizedView(image, valid, regions, stack, [not m.any() for m in masks])


def synthesize_view(
    I1: np.ndarray,
    D1: np.ndarray,
    D2: np.ndarray,
    M1,
    M2,
    ego_pose_fwd: Pose6DoF,
    ego_pose_bwd: Pose6DoF,
    object_poses: Sequence[Pose6DoF],
    K: Intrinsics,
    alpha: int = DEFAULT_ALPHA,
    forward: Optional[ForwardStage] = None,
) -> SynthesizedView:
    """Instance-wise reconstruction of frame 2 from frame 1.

    ``ego_pose_fwd`` maps frame-1 points into frame 2 (used for the forward
    projection), ``ego_pose_bwd`` maps frame-2 points into frame 1 (used for
    the background inverse warp). ``object_poses[k]`` maps frame-2 points of
    instance ``k`` onto its ego-compensated frame-1 geometry.
    """
    M1 = _as_stack(M1, K.shape) if np.asarray(M1).size else np.zeros((0,) + K.shape, dtype=bool)
    M2 = _as_stack(M2, K.shape) if np.asarray(M2).size else np.zeros((0,) + K.shape, dtype=bool)
    n = M1.shape[0]
    if M2.shape[0] != n:
        raise InvalidInputError(f"frame stacks disagree on instance count: {n} vs {M2.shape[0]}")
    if len(object_poses) != n:
        raise InvalidInputError(f"expected {n} object poses, got {len(object_poses)}")

    bg_region = background_mask(M1, M2) if n else np.ones(K.shape, dtype=bool)
    bg_warp = inverse_warp(I1, D2, ego_pose_bwd, K, D_ref=D1)
    bg_td = transformed_depth(D2, ego_pose_bwd, K)
    if n == 0:
        view = compose_view(bg_region, bg_warp, bg_td, [], [], [])
        return view

    fw = forward if forward is not None else forward_warp_pair(I1, D1, M1, ego_pose_fwd, K, alpha)
    masks, warps, tds = [], [], []
    for k, pose in enumerate(object_poses):
        w = inverse_warp(fw.instance_image(k), D2, pose, K, D_ref=fw.instance_depth(k))
        masks.append(propagate_instance_mask(fw.masks[k], D2, pose, K))
        warps.append(w)
        tds.append(transformed_depth(D2, pose, K))
    view = compose_view(bg_region, bg_warp, bg_td, masks, warps, tds)
    view.forward = fw
    return view
