"""Direct pose optimization through the instance-aware synthesis pipeline.

The camera and object pose regressors of a learning pipeline are replaced
by gradient descent on the pose parameters themselves. Gradients are
central finite differences of the objective under a *frozen context*: the
forward-projection splat, the binarized region masks and the translation
priors are rebuilt between outer iterations and held constant inside one
(they are piecewise constant in the poses and carry no gradient).

Direction naming: ``"fwd"`` synthesizes frame 2 from frame 1 and is driven
by ``P_{2->1}`` poses; ``"bwd"`` synthesizes frame 1 from frame 2 and is
driven by ``P_{1->2}`` poses.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional, Sequence

import numpy as np

from rigidsynth.camgeo import (
    InvalidInputError,
    Intrinsics,
    Pose6DoF,
    Z_MIN,
    backproject,
    compose,
    invert,
    transform_xyz,
)
from rigidsynth.instance import (
    ForwardStage,
    background_mask,
    binarize,
    forward_warp_pair,
)
from rigidsynth.loss import (
    LossComponents,
    LossWeights,
    geometric_loss,
    height_constraint_loss,
    mask_pixel_height,
    mean_backprojected_point,
    photometric_loss,
    smoothness_loss,
    total_loss,
    translation_constraint_loss,
    translation_prior,
    tree_sum,
)
from rigidsynth.warp import DEFAULT_ALPHA, FILL_RADIUS, bilinear_sample, splat

log = logging.getLogger(__name__)

MIN_BACKGROUND_FRACTION = 0.05
TEXTURE_EPS = 1e-6


class SolverError(RuntimeError):
    def __init__(self, message: str, stage: str = ""):
        super().__init__(f"[{stage}] {message}" if stage else message)
        self.stage = stage


class DegenerateInputError(SolverError):
    pass


class BundleError(InvalidInputError):
    pass


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 200
    joint_max_iters: int = 10
    step_size: float = 0.05
    h_translation: float = 1e-4
    h_rotation: float = 1e-5
    tol: float = 1e-6
    patience: int = 5
    armijo: float = 1e-4
    max_halvings: int = 30
    alpha: int = DEFAULT_ALPHA
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    height_step_scale: float = 0.1
    init_height: float = 1.5
    prior_init: bool = True
    refine: bool = True
    refine_max_iters: int = 100

    def __post_init__(self) -> None:
        for name in ("max_iters", "joint_max_iters", "refine_max_iters", "patience", "max_halvings", "alpha"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        for name in ("step_size", "h_translation", "h_rotation", "tol", "armijo", "height_step_scale", "init_height"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")


# ---------------------------------------------------------------------------
# finite differences


def numeric_gradient(objective: Callable[[np.ndarray], float], params, h) -> np.ndarray:
    """Central differences ``(f(p + h e_i) - f(p - h e_i)) / 2h`` per coordinate."""
    p = np.asarray(params, dtype=np.float64)
    hs = np.broadcast_to(np.asarray(h, dtype=np.float64), p.shape)
    g = np.zeros_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = hs[i]
        fp = objective(p + e)
        fm = objective(p - e)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise SolverError(f"objective is not finite when probing coordinate {i}")
        g[i] = (fp - fm) / (2.0 * hs[i])
    return g


def pose_steps(n_poses: int, opts: SolverOptions) -> np.ndarray:
    one = [opts.h_rotation] * 3 + [opts.h_translation] * 3
    return np.array(one * n_poses, dtype=np.float64)


# ---------------------------------------------------------------------------
# per-direction objective


def _clamped_sample(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    u = np.clip(np.nan_to_num(u, nan=0.0), 0.0, w - 1)
    v = np.clip(np.nan_to_num(v, nan=0.0), 0.0, h - 1)
    return bilinear_sample(img, u, v, np.ones(u.shape, dtype=bool))


@dataclass
class Frozen:
    """Quantities held constant within one outer iteration."""

    regions: list[tuple[int, np.ndarray]]  # (instance, flat pixel indices); 0 = background
    valid: np.ndarray
    forward: Optional[ForwardStage] = None
    priors: list[Optional[np.ndarray]] = field(default_factory=list)
    cache: dict = field(default_factory=dict)
    direct: Optional[Pose6DoF] = None  # ego pose when instances sample the source frame directly


class DirectionProblem:
    """Reconstruct the target frame from the source frame of one direction."""

    def __init__(self, I_src, D_src, M_src, I_tgt, D_tgt, M_tgt, K: Intrinsics, opts: SolverOptions):
        self.I_src = np.asarray(I_src, dtype=np.float64)
        self.D_src = np.asarray(D_src, dtype=np.float64)
        self.I_tgt = np.asarray(I_tgt, dtype=np.float64)
        self.D_tgt = np.asarray(D_tgt, dtype=np.float64)
        self.M_src = np.asarray(M_src, dtype=bool)
        self.M_tgt = np.asarray(M_tgt, dtype=bool)
        self.K = K
        self.opts = opts
        self.n = self.M_src.shape[0]
        self.bg = background_mask(self.M_src, self.M_tgt) if self.n else np.ones(K.shape, dtype=bool)
        pts = backproject(self.D_tgt, K).points.reshape(-1, 3)
        self.X, self.Y, self.Z = pts[:, 0], pts[:, 1], pts[:, 2]
        self.smooth = smoothness_loss(self.D_src, self.I_src)
        self.heights = [mask_pixel_height(m) for m in self.M_src]
        self.mean_depth = tree_sum(self.D_src) / self.D_src.size
        self.fill = self.I_tgt.reshape(-1, self.I_tgt.shape[-1]) if self.I_tgt.ndim == 3 else self.I_tgt.ravel()

    # geometry -------------------------------------------------------------

    def sample_coords(self, pose: Pose6DoF, idx: Optional[np.ndarray] = None):
        X, Y, Z = (self.X, self.Y, self.Z) if idx is None else (self.X[idx], self.Y[idx], self.Z[idx])
        Xo, Yo, Zo = transform_xyz(X, Y, Z, pose)
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.K.fx * Xo / Zo + self.K.cx
            v = self.K.fy * Yo / Zo + self.K.cy
        return u, v, Zo

    def validity(self, pose: Pose6DoF) -> np.ndarray:
        u, v, z = self.sample_coords(pose)
        ok = (z > Z_MIN) & (u >= 0) & (u <= self.K.width - 1) & (v >= 0) & (v <= self.K.height - 1)
        return ok.reshape(self.K.shape)

    def forward_stage(self, ego_src_to_tgt: Pose6DoF) -> ForwardStage:
        buf = splat(self.D_src, ego_src_to_tgt, self.K, self.opts.alpha, FILL_RADIUS)
        return forward_warp_pair(self.I_src, self.D_src, self.M_src, ego_src_to_tgt, self.K, buffer=buf)

    def _warped_mask(self, fw: ForwardStage, k: int, pose: Pose6DoF):
        u, v, z = self.sample_coords(pose)
        ok = (z > Z_MIN) & (u >= 0) & (u <= self.K.width - 1) & (v >= 0) & (v <= self.K.height - 1)
        ok = ok.reshape(self.K.shape)
        m = bilinear_sample(fw.masks[k].astype(np.float64), u.reshape(self.K.shape), v.reshape(self.K.shape), ok)
        return m, ok

    def propagated_mask(self, fw: ForwardStage, k: int, pose: Pose6DoF) -> np.ndarray:
        m, ok = self._warped_mask(fw, k, pose)
        return binarize(m) & ok

    def supported_mask(self, fw: ForwardStage, k: int, pose: Pose6DoF) -> np.ndarray:
        """Target pixels of instance ``k`` whose bilinear footprint lies inside the warped instance."""
        m, ok = self._warped_mask(fw, k, pose)
        return self.M_tgt[k] & ok & (m >= 1.0)

    def direct_support(self, k: int, ego: Pose6DoF, pose: Pose6DoF) -> np.ndarray:
        """Target pixels of instance ``k`` landing fully inside source instance ``k`` under ``ego . pose``."""
        eff = compose(ego, pose)
        u, v, z = self.sample_coords(eff)
        shape = self.K.shape
        ok = (z > Z_MIN) & (u >= 0) & (u <= self.K.width - 1) & (v >= 0) & (v <= self.K.height - 1)
        ok = ok.reshape(shape)
        m = bilinear_sample(self.M_src[k].astype(np.float64), u.reshape(shape), v.reshape(shape), ok)
        return self.M_tgt[k] & ok & (m >= 1.0)

    # context --------------------------------------------------------------

    def background_support(self, ego: Pose6DoF) -> np.ndarray:
        """Background pixels whose ego correspondence lands on source background.

        Drops target pixels that are background in both frames but whose
        bilinear footprint in the source touches an instance, i.e. pixels
        occluded by an object in the source frame.
        """
        u, v, z = self.sample_coords(ego)
        shape = self.K.shape
        ok = (z > Z_MIN) & (u >= 0) & (u <= self.K.width - 1) & (v >= 0) & (v <= self.K.height - 1)
        ok = ok.reshape(shape)
        region = self.bg & ok
        if self.n:
            src_obj = self.M_src.any(axis=0).astype(np.float64)
            hit = bilinear_sample(src_obj, u.reshape(shape), v.reshape(shape), ok)
            region &= hit == 0.0
        return region

    def freeze(
        self,
        ego: Pose6DoF,
        objects: Sequence[Pose6DoF] = (),
        forward: Optional[ForwardStage] = None,
        only: Optional[int] = None,
        direct: bool = False,
    ) -> Frozen:
        """Support regions and translation priors at the given poses.

        ``only=k`` restricts the context to instance ``k`` (no background).
        ``direct=True`` samples instances from the source frame through the
        composed pose ``ego . object`` instead of the forward-projected frame;
        no translation priors are attached then.
        Regions are pairwise disjoint: instance supports lie inside the
        disjoint target instance masks, the background outside all of them.
        """
        regions: list[tuple[int, np.ndarray]] = []
        priors: list[Optional[np.ndarray]] = []
        valid = np.zeros(self.K.shape, dtype=bool)
        if only is None:
            bg = self.background_support(ego)
            regions.append((0, np.flatnonzero(bg)))
            valid |= bg
        for k, pose in enumerate(objects):
            if only is not None and k != only:
                priors.append(None)
                continue
            if direct:
                priors.append(None)
                m = self.direct_support(k, ego, pose)
            else:
                priors.append(translation_prior(forward.depth, forward.masks[k], self.D_tgt, self.M_tgt[k], self.K))
                m = self.supported_mask(forward, k, pose)
            if m.any():
                regions.append((k + 1, np.flatnonzero(m)))
                valid |= m
        return Frozen(regions, valid, forward, priors, direct=ego if direct else None)

    # objective ------------------------------------------------------------

    def _region_terms(self, frozen: Frozen, inst: int, idx: np.ndarray, pose: Pose6DoF):
        key = (inst, pose.vector().tobytes())
        hit = frozen.cache.get(key)
        if hit is not None:
            return hit
        if inst and frozen.direct is not None:
            pose = compose(frozen.direct, pose)
        u, v, z = self.sample_coords(pose, idx)
        if inst == 0:
            src_img, src_depth = self.I_src, self.D_src
        elif frozen.direct is not None:
            m = self.M_src[inst - 1]
            src_img = self.I_src * (m[..., None] if self.I_src.ndim == 3 else m)
            src_depth = self.D_src * m
        else:
            src_img = frozen.forward.instance_image(inst - 1)
            src_depth = frozen.forward.instance_depth(inst - 1)
        img = _clamped_sample(src_img, u, v)
        a = _clamped_sample(src_depth, u, v)
        s = a + z
        with np.errstate(divide="ignore", invalid="ignore"):
            dd = np.where(s > 0, np.abs(a - z) / s, 0.0)
        out = (img, dd)
        if len(frozen.cache) > 256:
            frozen.cache.clear()
        frozen.cache[key] = out
        return out

    def components(
        self,
        frozen: Frozen,
        ego: Pose6DoF,
        objects: Sequence[Pose6DoF] = (),
        p_h: Optional[float] = None,
        crop: Optional[tuple[int, int, int, int]] = None,
    ) -> LossComponents:
        h, w = self.K.shape
        comp = self.fill.copy()
        dd = np.zeros(h * w)
        for inst, idx in frozen.regions:
            if idx.size == 0:
                continue
            pose = ego if inst == 0 else objects[inst - 1]
            img, d = self._region_terms(frozen, inst, idx, pose)
            comp[idx] = img
            dd[idx] = d
        comp = comp.reshape(self.I_tgt.shape)
        dd = dd.reshape(h, w)
        valid = frozen.valid.astype(np.float64)
        I_tgt = self.I_tgt
        if crop is not None:
            y0, y1, x0, x1 = crop
            comp, dd, valid, I_tgt = comp[y0:y1, x0:x1], dd[y0:y1, x0:x1], valid[y0:y1, x0:x1], I_tgt[y0:y1, x0:x1]
        V = (1.0 - dd) * valid
        c = LossComponents()
        c.Lp = photometric_loss(I_tgt, comp, V, self.opts.weights.ssim_gamma)
        c.Lg = geometric_loss(valid, dd)
        c.valid_pixel_fraction = float(frozen.valid.mean())
        ts, tps = [], []
        for k, tp in enumerate(frozen.priors):
            if tp is None or k >= len(objects):
                continue
            q = objects[k]
            ts.append(-(q.rotation.T @ q.translation))
            tps.append(tp)
        c.Lt = translation_constraint_loss(ts, tps)
        if p_h is not None and self.n:
            c.Lh = height_constraint_loss(
                self.D_src, self.M_src, self.K.fy, p_h, self.heights, mean_depth=self.mean_depth
            )
        c.Ls = self.smooth
        return c

    def crop_for(self, frozen: Frozen) -> tuple[int, int, int, int]:
        h, w = self.K.shape
        if not frozen.valid.any():
            return (0, h, 0, w)
        ys, xs = np.nonzero(frozen.valid)
        return (max(0, ys.min() - 1), min(h, ys.max() + 2), max(0, xs.min() - 1), min(w, xs.max() + 2))


# ---------------------------------------------------------------------------
# descent


@dataclass
class DescentResult:
    x: np.ndarray
    value: float
    trajectory: list[float]
    iterations: int
    converged: bool
    reason: str


def descend(
    prepare: Callable[[np.ndarray], Any],
    objective: Callable[[np.ndarray, Any], float],
    x0: np.ndarray,
    h: np.ndarray,
    scale: np.ndarray,
    opts: SolverOptions,
    max_iters: Optional[int] = None,
    gradient: Optional[Callable[[np.ndarray, Any], np.ndarray]] = None,
) -> DescentResult:
    """Gradient descent with Armijo backtracking in the scaled variables ``x / scale``.

    The first trial step of every iteration is the Barzilai-Borwein step
    from the previous iteration (halved until sufficient decrease).
    ``prepare`` rebuilds the frozen context at an iterate; the accepted
    objective values are those of the rebuilt context and never increase.
    """
    max_iters = max_iters or opts.max_iters
    x = np.asarray(x0, dtype=np.float64).copy()
    ctx = prepare(x)
    fx = objective(x, ctx)
    traj = [fx]
    prev_y = prev_g = None
    step = None
    small = 0
    reason = "max_iters"
    it = 0
    for it in range(1, max_iters + 1):
        if gradient is not None:
            g = gradient(x, ctx)
        else:
            g = numeric_gradient(lambda p: objective(p, ctx), x, h)
        gy = g * scale
        gn2 = float(gy @ gy)
        if gn2 == 0.0:
            reason = "zero_gradient"
            break
        y = x / scale
        if prev_y is not None:
            dy, dg = y - prev_y, gy - prev_g
            denom = float(dy @ dg)
            step = float(dy @ dy) / denom if denom > 0 else 2.0 * step
        if step is None or not math.isfinite(step) or step <= 0:
            step = opts.step_size / math.sqrt(gn2)
        s = step
        accepted = False
        for _ in range(opts.max_halvings):
            xn = (y - s * gy) * scale
            cn = prepare(xn)
            fn = objective(xn, cn)
            if math.isfinite(fn) and fn <= fx - opts.armijo * s * gn2:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            reason = "line_search"
            break
        prev_y, prev_g = y, gy
        step = s
        rel = abs(fx - fn) / max(abs(fx), 1e-12)
        x, ctx, fx = xn, cn, fn
        traj.append(fx)
        small = small + 1 if rel < opts.tol else 0
        if small >= opts.patience:
            reason = "tolerance"
            break
    converged = reason in ("tolerance", "line_search", "zero_gradient")
    return DescentResult(x, fx, traj, it, converged, reason)


# ---------------------------------------------------------------------------
# stages


@dataclass
class FramePair:
    I1: np.ndarray
    I2: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    K: Intrinsics
    scene_id: str = "scene"

    @classmethod
    def from_bundle(cls, b) -> "FramePair":
        missing = [f for f in ("I1", "I2", "D1", "D2", "K") if getattr(b, f, None) is None]
        if missing:
            raise BundleError(f"bundle is missing {', '.join(missing)}")
        M1 = getattr(b, "M1", None)
        M2 = getattr(b, "M2", None)
        shape = b.K.shape
        M1 = np.zeros((0,) + shape, dtype=bool) if M1 is None else np.asarray(M1, dtype=bool)
        M2 = np.zeros((0,) + shape, dtype=bool) if M2 is None else np.asarray(M2, dtype=bool)
        pair = cls(b.I1, b.I2, b.D1, b.D2, M1, M2, b.K, getattr(b, "scene_id", "scene"))
        pair.validate()
        return pair

    def validate(self) -> None:
        shape = self.K.shape
        for name in ("I1", "I2"):
            a = np.asarray(getattr(self, name))
            if a.shape[:2] != shape:
                raise BundleError(f"{name} has shape {a.shape[:2]}, expected {shape}")
        for name in ("D1", "D2"):
            a = np.asarray(getattr(self, name))
            if a.shape != shape:
                raise BundleError(f"{name} has shape {a.shape}, expected {shape}")
            if not np.all(np.isfinite(a)) or np.any(a <= 0):
                raise BundleError(f"{name} must be finite and strictly positive")
        if self.M1.shape != self.M2.shape or self.M1.shape[1:] != shape:
            raise BundleError("instance mask stacks must be (n, H, W) and agree across frames")


@dataclass
class StageFlag:
    converged: bool
    reason: str
    iterations: int
    seconds: float = 0.0


@dataclass
class MotionEstimate:
    ego_fwd: Pose6DoF
    ego_bwd: Pose6DoF
    objects_fwd: list[Pose6DoF]
    objects_bwd: list[Pose6DoF]
    p_h: float
    trajectories: dict[str, list[float]] = field(default_factory=dict)
    flags: dict[str, StageFlag] = field(default_factory=dict)
    reports: dict[str, dict] = field(default_factory=dict)
    exited: list[bool] = field(default_factory=list)
    scene_id: str = "scene"
    seed: int = 0

    @property
    def ego_residual(self) -> tuple[float, float]:
        """Translation (m) and rotation (deg) of ``ego_fwd @ ego_bwd``."""
        m = self.ego_fwd.matrix() @ self.ego_bwd.matrix()
        c = (np.trace(m[:3, :3]) - 1.0) / 2.0
        return float(np.linalg.norm(m[:3, 3])), math.degrees(math.acos(min(1.0, max(-1.0, c))))

    def to_json(self) -> dict[str, Any]:
        t_res, r_res = self.ego_residual
        return {
            "scene_id": self.scene_id,
            "seed": self.seed,
            "ego": {"fwd": self.ego_fwd.to_json(), "bwd": self.ego_bwd.to_json()},
            "objects": [
                {"id": k + 1, "fwd": f.to_json(), "bwd": b.to_json(), "exited_view": bool(self.exited[k]) if k < len(self.exited) else False}
                for k, (f, b) in enumerate(zip(self.objects_fwd, self.objects_bwd))
            ],
            "p_h": self.p_h,
            "ego_consistency": {"translation_m": t_res, "rotation_deg": r_res},
            "stages": {
                name: {
                    "converged": f.converged,
                    "reason": f.reason,
                    "iterations": f.iterations,
                    "loss_trajectory": self.trajectories.get(name, []),
                }
                for name, f in self.flags.items()
            },
            "loss_reports": self.reports,
        }


def _depth_scale(D: np.ndarray, region: Optional[np.ndarray] = None) -> float:
    vals = D[region] if region is not None and region.any() else D.ravel()
    return float(np.median(vals))


def _pose_scale(n_poses: int, depth_scale: float) -> np.ndarray:
    return np.array(([1.0 / depth_scale] * 3 + [1.0] * 3) * n_poses)


def _objective(problem: DirectionProblem, c: LossComponents, w: LossWeights, with_t=False) -> float:
    val = w.photometric * c.Lp + w.geometric * c.Lg
    if with_t:
        val += w.translation * c.Lt
    return val


def _textureless(I: np.ndarray, region: np.ndarray) -> bool:
    """True when the image is flat (to ``TEXTURE_EPS``) across the region."""
    I = np.asarray(I, dtype=np.float64)
    if I.ndim == 2:
        I = I[..., None]
    vals = I[region]
    return vals.size == 0 or float(np.ptp(vals, axis=0).max()) < TEXTURE_EPS


def _problems(pair: FramePair, opts: SolverOptions) -> dict[str, DirectionProblem]:
    return {
        "fwd": DirectionProblem(pair.I1, pair.D1, pair.M1, pair.I2, pair.D2, pair.M2, pair.K, opts),
        "bwd": DirectionProblem(pair.I2, pair.D2, pair.M2, pair.I1, pair.D1, pair.M1, pair.K, opts),
    }


def ego_objective(pair: FramePair, at: Pose6DoF, opts: SolverOptions = SolverOptions(), direction: str = "fwd"):
    """Ego-stage objective of one direction as a function of the 6-vector pose.

    Support regions are frozen at ``at``. Direction ``"fwd"`` reconstructs
    frame 2 (pose ``P_{2->1}``), ``"bwd"`` reconstructs frame 1.
    """
    problem = _problems(pair, opts)[direction]
    frozen = problem.freeze(at)
    return lambda x: _objective(problem, problem.components(frozen, Pose6DoF.from_vector(x)), opts.weights)


def object_objective(
    pair: FramePair,
    ego: Pose6DoF,
    objects: Sequence[Pose6DoF],
    k: int,
    opts: SolverOptions = SolverOptions(),
    direction: str = "fwd",
):
    """Refinement objective of instance ``k`` as a function of its 6-vector pose.

    Frame-1 pixels are sampled directly through ``ego . object``; the
    support is frozen at ``objects``.
    """
    problem = _problems(pair, opts)[direction]
    frozen = problem.freeze(ego, objects, only=k, direct=True)
    base = list(objects)

    def f(x):
        poses = list(base)
        poses[k] = Pose6DoF.from_vector(x)
        return _objective(problem, problem.components(frozen, ego, poses), opts.weights)

    return f


def _ego_direction(problem: DirectionProblem, init: Pose6DoF, opts: SolverOptions) -> DescentResult:
    w = opts.weights
    scale = _pose_scale(1, _depth_scale(problem.D_tgt, problem.bg))
    h = pose_steps(1, opts)

    def prepare(x):
        return problem.freeze(Pose6DoF.from_vector(x))

    def objective(x, ctx):
        return _objective(problem, problem.components(ctx, Pose6DoF.from_vector(x)), w)

    return descend(prepare, objective, init.vector(), h, scale, opts)


def estimate_ego(pair: FramePair, opts: SolverOptions = SolverOptions(), problems=None):
    """Stage 1: camera motion from the background region by inverse warping only.

    Returns ``(ego_fwd, ego_bwd, info)`` where ``info`` maps the direction
    name to its :class:`DescentResult`.
    """
    problems = problems or _problems(pair, opts)
    bg = problems["fwd"].bg
    if bg.mean() < MIN_BACKGROUND_FRACTION:
        raise DegenerateInputError(
            f"background covers {bg.mean():.1%} of the frame, need at least {MIN_BACKGROUND_FRACTION:.0%}",
            "ego",
        )
    if _textureless(pair.I1, bg) or _textureless(pair.I2, bg):
        r = DescentResult(Pose6DoF().vector(), 0.0, [0.0], 0, False, "textureless")
        return Pose6DoF(), Pose6DoF(), {"bwd": r, "fwd": r}
    # ego_fwd = P_{1->2} drives the reconstruction of frame 1
    rb = _ego_direction(problems["bwd"], Pose6DoF(), opts)
    ego_fwd = Pose6DoF.from_vector(rb.x)
    rf = _ego_direction(problems["fwd"], invert(ego_fwd), opts)
    ego_bwd = Pose6DoF.from_vector(rf.x)
    return ego_fwd, ego_bwd, {"bwd": rb, "fwd": rf}


def centered_pose(x: np.ndarray, center: np.ndarray) -> Pose6DoF:
    """Pose from angles and a translation of ``center``: ``X -> R (X - c) + c + t_c``."""
    R = Pose6DoF(*x[:3]).rotation
    t = np.asarray(x[3:6], dtype=np.float64) + center - R @ center
    return Pose6DoF(*x[:3], *t)


def centered_vector(pose: Pose6DoF, center: np.ndarray) -> np.ndarray:
    v = pose.vector()
    v[3:] = pose.translation - center + pose.rotation @ center
    return v


def _object_direction(
    problem: DirectionProblem, fw: ForwardStage, k: int, ego: Pose6DoF, init: Pose6DoF, opts: SolverOptions
) -> tuple[DescentResult, bool]:
    """Stage-2 descent for one instance in one direction.

    The pose is optimized as a rotation about the target instance centroid
    plus a translation of that centroid; with the camera-origin
    parameterization a small rotation moves a distant object sideways and
    couples strongly with its translation.
    """
    w = opts.weights
    n = problem.n
    h = pose_steps(1, opts)
    objects = [Pose6DoF()] * n
    center = mean_backprojected_point(problem.D_tgt, problem.M_tgt[k], problem.K)
    if center is None or not problem.propagated_mask(fw, k, init).any():
        return DescentResult(Pose6DoF().vector(), 0.0, [0.0], 0, True, "exited_view"), True

    def poses(x):
        o = list(objects)
        o[k] = centered_pose(x, center)
        return o

    def prepare(x):
        fr = problem.freeze(ego, poses(x), forward=fw, only=k)
        return fr, problem.crop_for(fr)

    def objective(x, ctx):
        fr, crop = ctx
        c = problem.components(fr, ego, poses(x), crop=crop)
        return _objective(problem, c, w, with_t=True)

    x0 = centered_vector(init, center)
    if opts.prior_init and init.is_identity():
        # start on the prior instead of the cosine term's singular point t = 0
        tp = problem.freeze(ego, poses(x0), forward=fw, only=k).priors[k]
        if tp is not None:
            x0[3:] = -tp
    first = prepare(x0)[0]
    if not first.valid.any():
        return DescentResult(Pose6DoF().vector(), 0.0, [0.0], 0, True, "exited_view"), True
    pts = backproject(problem.D_tgt, problem.K).points[problem.M_tgt[k]]
    radius = max(float(np.sqrt(((pts - center) ** 2).sum(axis=1).mean())), 1e-3)
    scale = np.array([1.0 / radius] * 3 + [1.0] * 3)
    r = descend(prepare, objective, x0, h, scale, opts)
    r.x = centered_pose(r.x, center).vector()
    return r, False


def _object_refine(
    problem: DirectionProblem, k: int, ego: Pose6DoF, init: Pose6DoF, opts: SolverOptions
) -> DescentResult:
    """Polish one object pose by sampling the source frame directly through ``ego . pose``.

    The nearest-neighbour splat quantizes the forward-projected instance to
    the pixel grid; bilinear sampling of the source frame removes that
    error while keeping the same photometric and geometric terms.
    """
    w = opts.weights
    h = pose_steps(1, opts)
    objects = [Pose6DoF()] * problem.n
    center = mean_backprojected_point(problem.D_tgt, problem.M_tgt[k], problem.K)
    x0 = centered_vector(init, center)

    def poses(x):
        o = list(objects)
        o[k] = centered_pose(x, center)
        return o

    def prepare(x):
        fr = problem.freeze(ego, poses(x), only=k, direct=True)
        return fr, problem.crop_for(fr)

    def objective(x, ctx):
        fr, crop = ctx
        c = problem.components(fr, ego, poses(x), crop=crop)
        return _objective(problem, c, w)

    if not prepare(x0)[0].valid.any():
        return DescentResult(init.vector(), 0.0, [0.0], 0, True, "exited_view")
    pts = backproject(problem.D_tgt, problem.K).points[problem.M_tgt[k]]
    radius = max(float(np.sqrt(((pts - center) ** 2).sum(axis=1).mean())), 1e-3)
    scale = np.array([1.0 / radius] * 3 + [1.0] * 3)
    r = descend(prepare, objective, x0, h, scale, opts, max_iters=opts.refine_max_iters)
    r.x = centered_pose(r.x, center).vector()
    return r


def refine_objects(
    pair: FramePair,
    ego_fwd: Pose6DoF,
    ego_bwd: Pose6DoF,
    objects_fwd: Sequence[Pose6DoF],
    objects_bwd: Sequence[Pose6DoF],
    opts: SolverOptions = SolverOptions(),
    problems=None,
    skip: Sequence[bool] = (),
):
    """Direct-sampling refinement of every object pose with the ego poses frozen."""
    problems = problems or _problems(pair, opts)
    of, ob, info = list(objects_fwd), list(objects_bwd), {}
    for k in range(len(ob)):
        if k < len(skip) and skip[k]:
            continue
        rf = _object_refine(problems["fwd"], k, ego_bwd, ob[k], opts)
        rb = _object_refine(problems["bwd"], k, ego_fwd, of[k], opts)
        ob[k] = Pose6DoF.from_vector(rf.x)
        of[k] = Pose6DoF.from_vector(rb.x)
        info[k] = {"fwd": rf, "bwd": rb}
    return of, ob, info


def estimate_objects(
    pair: FramePair,
    ego_fwd: Pose6DoF,
    ego_bwd: Pose6DoF,
    opts: SolverOptions = SolverOptions(),
    problems=None,
):
    """Stage 2: per-instance motion with the ego poses frozen.

    Returns ``(objects_fwd, objects_bwd, info)``; ``objects_bwd[k]`` is the
    ``P_{2->1}`` pose used to reconstruct frame 2, ``objects_fwd[k]`` the
    ``P_{1->2}`` pose used to reconstruct frame 1.
    """
    n = pair.M1.shape[0]
    if n == 0:
        return [], [], {}
    problems = problems or _problems(pair, opts)
    fw_f = problems["fwd"].forward_stage(ego_fwd)
    fw_b = problems["bwd"].forward_stage(ego_bwd)
    objs_bwd, objs_fwd, info = [], [], {}
    for k in range(n):
        rf, exf = _object_direction(problems["fwd"], fw_f, k, ego_bwd, Pose6DoF(), opts)
        rb, exb = _object_direction(problems["bwd"], fw_b, k, ego_fwd, Pose6DoF(), opts)
        objs_bwd.append(Pose6DoF.from_vector(rf.x))
        objs_fwd.append(Pose6DoF.from_vector(rb.x))
        info[k] = {"fwd": rf, "bwd": rb, "exited": exf or exb}
    return objs_fwd, objs_bwd, info


class JointObjective:
    """Full two-direction objective over every pose and the height prior.

    Parameter layout: ``[ego_fwd(6), ego_bwd(6), obj_fwd_k(6)..., obj_bwd_k(6)..., p_h]``.
    """

    def __init__(self, problems: dict[str, DirectionProblem], n: int, opts: SolverOptions):
        self.p = problems
        self.n = n
        self.opts = opts

    def unpack(self, x):
        n = self.n
        ego_fwd = Pose6DoF.from_vector(x[0:6])
        ego_bwd = Pose6DoF.from_vector(x[6:12])
        of = [Pose6DoF.from_vector(x[12 + 6 * k : 18 + 6 * k]) for k in range(n)]
        ob = [Pose6DoF.from_vector(x[12 + 6 * n + 6 * k : 18 + 6 * n + 6 * k]) for k in range(n)]
        return ego_fwd, ego_bwd, of, ob, float(x[-1])

    def prepare(self, x):
        ego_fwd, ego_bwd, of, ob, _ = self.unpack(x)
        fw_f = self.p["fwd"].forward_stage(ego_fwd) if self.n else None
        fw_b = self.p["bwd"].forward_stage(ego_bwd) if self.n else None
        return {
            "fwd": self.p["fwd"].freeze(ego_bwd, ob, forward=fw_f),
            "bwd": self.p["bwd"].freeze(ego_fwd, of, forward=fw_b),
        }

    def direction_components(self, x, ctx) -> dict[str, LossComponents]:
        ego_fwd, ego_bwd, of, ob, p_h = self.unpack(x)
        return {
            "fwd": self.p["fwd"].components(ctx["fwd"], ego_bwd, ob, p_h),
            "bwd": self.p["bwd"].components(ctx["bwd"], ego_fwd, of, p_h),
        }

    def value(self, x, ctx) -> float:
        cs = self.direction_components(x, ctx)
        w = self.opts.weights
        return total_loss(cs["fwd"], w) + total_loss(cs["bwd"], w)

    def gradient(self, x, ctx) -> np.ndarray:
        """Exact block-separable finite differences.

        Under a frozen context the forward direction depends only on
        ``ego_bwd``, ``obj_bwd`` and ``p_h``, the backward direction only on
        ``ego_fwd``, ``obj_fwd`` and ``p_h``.
        """
        n = self.n
        w = self.opts.weights
        g = np.zeros_like(x)
        blocks = {
            "fwd": np.r_[np.arange(6, 12), np.arange(12 + 6 * n, 12 + 12 * n)],
            "bwd": np.r_[np.arange(0, 6), np.arange(12, 12 + 6 * n)],
        }
        steps = pose_steps(1 + n, self.opts)
        for name, idx in blocks.items():
            def f(sub, idx=idx, name=name):
                xx = x.copy()
                xx[idx] = sub
                ego_fwd, ego_bwd, of, ob, p_h = self.unpack(xx)
                if name == "fwd":
                    c = self.p["fwd"].components(ctx["fwd"], ego_bwd, ob, None)
                else:
                    c = self.p["bwd"].components(ctx["bwd"], ego_fwd, of, None)
                return total_loss(c, w)

            g[idx] = numeric_gradient(f, x[idx], steps)
        if n:
            def fh(v):
                xx = x.copy()
                xx[-1] = v[0]
                return self.value(xx, ctx)

            g[-1] = numeric_gradient(fh, x[-1:], [self.opts.h_translation])[0]
        return g


def _report(problems, x, joint: JointObjective, weights: LossWeights) -> dict:
    ctx = joint.prepare(x)
    cs = joint.direction_components(x, ctx)
    both = cs["fwd"] + cs["bwd"]
    return {
        "fwd": cs["fwd"].report(weights),
        "bwd": cs["bwd"].report(weights),
        "combined": both.report(weights),
    }


def solve(bundle, opts: SolverOptions = SolverOptions()) -> MotionEstimate:
    """Staged estimation: ego, objects with frozen ego, joint refinement, direct object refinement."""
    pair = bundle if isinstance(bundle, FramePair) else FramePair.from_bundle(bundle)
    pair.validate()
    n = pair.M1.shape[0]
    problems = _problems(pair, opts)
    joint = JointObjective(problems, n, opts)
    est = MotionEstimate(Pose6DoF(), Pose6DoF(), [Pose6DoF()] * n, [Pose6DoF()] * n, opts.init_height,
                         scene_id=pair.scene_id, seed=opts.seed)

    def pack(e: MotionEstimate):
        parts = [e.ego_fwd.vector(), e.ego_bwd.vector()]
        parts += [p.vector() for p in e.objects_fwd] + [p.vector() for p in e.objects_bwd]
        return np.concatenate(parts + [np.array([e.p_h])])

    t0 = time.perf_counter()
    est.reports["initial"] = _report(problems, pack(est), joint, opts.weights)
    ego_fwd, ego_bwd, info = estimate_ego(pair, opts, problems)
    est.ego_fwd, est.ego_bwd = ego_fwd, ego_bwd
    est.trajectories["ego"] = info["bwd"].trajectory + info["fwd"].trajectory
    est.flags["ego"] = StageFlag(
        info["bwd"].converged and info["fwd"].converged,
        info["bwd"].reason if not info["bwd"].converged else info["fwd"].reason,
        info["bwd"].iterations + info["fwd"].iterations,
        time.perf_counter() - t0,
    )
    est.reports["ego"] = _report(problems, pack(est), joint, opts.weights)
    if info["fwd"].reason == "textureless":
        log.warning("textureless input: returning identity poses")
        return est

    t1 = time.perf_counter()
    of, ob, oinfo = estimate_objects(pair, ego_fwd, ego_bwd, opts, problems)
    if n:
        est.objects_fwd, est.objects_bwd = of, ob
        est.exited = [oinfo[k]["exited"] for k in range(n)]
        traj, conv, iters, reasons = [], True, 0, []
        for k in range(n):
            for d in ("fwd", "bwd"):
                r = oinfo[k][d]
                traj += r.trajectory
                conv &= r.converged
                iters += r.iterations
                reasons.append(r.reason)
        est.trajectories["objects"] = traj
        est.flags["objects"] = StageFlag(conv, ",".join(reasons), iters, time.perf_counter() - t1)
        est.reports["objects"] = _report(problems, pack(est), joint, opts.weights)

    t2 = time.perf_counter()
    scale = np.r_[_pose_scale(2 + 2 * n, _depth_scale(pair.D2)), [1.0 / opts.height_step_scale]]
    h = np.r_[pose_steps(2 + 2 * n, opts), [opts.h_translation]]
    # p_h moves at height_step_scale times the pose step: scale^2 multiplies its gradient step
    scale[-1] = math.sqrt(opts.height_step_scale)
    r = descend(joint.prepare, joint.value, pack(est), h, scale, opts,
                max_iters=opts.joint_max_iters, gradient=joint.gradient)
    ef, eb, of, ob, p_h = joint.unpack(r.x)
    est.ego_fwd, est.ego_bwd, est.objects_fwd, est.objects_bwd, est.p_h = ef, eb, of, ob, p_h
    est.trajectories["joint"] = r.trajectory
    est.flags["joint"] = StageFlag(r.converged, r.reason, r.iterations, time.perf_counter() - t2)
    est.reports["joint"] = _report(problems, r.x, joint, opts.weights)

    if n and opts.refine:
        t3 = time.perf_counter()
        of, ob, rinfo = refine_objects(pair, ef, eb, of, ob, opts, problems, skip=est.exited)
        est.objects_fwd, est.objects_bwd = of, ob
        traj, conv, iters, reasons = [], True, 0, []
        for k in sorted(rinfo):
            for d in ("fwd", "bwd"):
                rr = rinfo[k][d]
                traj += rr.trajectory
                conv &= rr.converged
                iters += rr.iterations
                reasons.append(rr.reason)
        est.trajectories["refine"] = traj
        est.flags["refine"] = StageFlag(conv, ",".join(reasons), iters, time.perf_counter() - t3)
        est.reports["refine"] = _report(problems, pack(est), joint, opts.weights)
    return est
