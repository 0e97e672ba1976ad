"""Synthetic two-frame scenes with exact depth, masks and motions.

Scenes are a textured background plane plus up to three textured planar
rectangles. Camera 1 defines the world frame. Frame 2 sees the world
through the ego pose ``E`` (frame-1 -> frame-2 coordinates), and each
object additionally undergoes its motion ``M``, expressed in camera-2
coordinates and acting on the ego-compensated geometry, so an object
point moves as ``X2 = M @ E @ X1``.

Surface colours are attached to the surfaces through their frame-1 image
position: a point's colour is a seeded smooth lattice function,
bilinearly interpolated at the point's projection into camera 1 at time 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from rigidsynth.camgeo import (
    InvalidInputError,
    Intrinsics,
    Pose6DoF,
    Z_MIN,
    compose,
    invert,
    pixel_grid,
    project_xyz,
    transform_xyz,
)
from rigidsynth.instance import stack_to_labels
from rigidsynth.io import write_depth, write_image, write_json, write_labels

Z_MAX = 200.0
N_MAX_OBJECTS = 3


class DegenerateSceneError(InvalidInputError):
    def __init__(self, message: str, object_index: Optional[int] = None):
        super().__init__(message)
        self.object_index = object_index


@dataclass(frozen=True)
class Texture:
    """Smooth colour field sampled on the integer lattice and bilinearly interpolated."""

    seed: int
    components: int = 4
    min_wavelength: float = 14.0
    max_wavelength: float = 48.0
    amplitude: float = 0.07

    def _params(self):
        rng = np.random.default_rng(self.seed)
        n = self.components
        lam = rng.uniform(self.min_wavelength, self.max_wavelength, size=(3, n))
        theta = rng.uniform(0.0, 2 * math.pi, size=(3, n))
        kx = np.cos(theta) / lam
        ky = np.sin(theta) / lam
        phase = rng.uniform(0.0, 2 * math.pi, size=(3, n))
        amp = self.amplitude * rng.uniform(0.6, 1.0, size=(3, n))
        base = rng.uniform(0.35, 0.65, size=3)
        return base, amp, kx, ky, phase

    def lattice(self, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        """Texture values at integer lattice points, shape ``i.shape + (3,)``."""
        base, amp, kx, ky, phase = self._params()
        i = np.asarray(i, dtype=np.float64)[..., None]
        j = np.asarray(j, dtype=np.float64)[..., None]
        out = np.empty(i.shape[:-1] + (3,))
        for c in range(3):
            arg = 2 * math.pi * (kx[c] * i + ky[c] * j) + phase[c]
            out[..., c] = base[c] + (amp[c] * np.sin(arg)).sum(axis=-1)
        return np.clip(out, 0.0, 1.0)

    def sample(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        i0 = np.floor(u)
        j0 = np.floor(v)
        wx = (u - i0)[..., None]
        wy = (v - j0)[..., None]
        g00 = self.lattice(i0, j0)
        g01 = self.lattice(i0 + 1, j0)
        g10 = self.lattice(i0, j0 + 1)
        g11 = self.lattice(i0 + 1, j0 + 1)
        top = g00 * (1.0 - wx) + g01 * wx
        bot = g10 * (1.0 - wx) + g11 * wx
        return top * (1.0 - wy) + bot * wy


@dataclass
class BackgroundConfig:
    distance: float = 15.0
    tilt: float = 0.0
    texture_seed: int = 0

    @property
    def normal(self) -> np.ndarray:
        return np.array([0.0, math.sin(self.tilt), math.cos(self.tilt)])


@dataclass
class ObjectConfig:
    extent: tuple[float, float]
    center: tuple[float, float, float]
    orientation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    motion: Pose6DoF = field(default_factory=Pose6DoF)
    texture_seed: int = 1

    def corners(self) -> np.ndarray:
        R = Pose6DoF(*self.orientation).rotation
        hw, hh = self.extent[0] / 2, self.extent[1] / 2
        local = np.array([[-hw, -hh, 0], [hw, -hh, 0], [hw, hh, 0], [-hw, hh, 0]], dtype=np.float64)
        return local @ R.T + np.asarray(self.center, dtype=np.float64)


@dataclass
class SceneConfig:
    intrinsics: Intrinsics
    background: BackgroundConfig = field(default_factory=BackgroundConfig)
    objects: list[ObjectConfig] = field(default_factory=list)
    ego: Pose6DoF = field(default_factory=Pose6DoF)
    noise: float = 0.0
    noise_seed: int = 0
    scene_id: str = "scene"

    def to_json(self) -> dict[str, Any]:
        return {
            "scene_id": self.scene_id,
            "intrinsics": self.intrinsics.to_json(),
            "background": {
                "distance": self.background.distance,
                "tilt": self.background.tilt,
                "texture_seed": self.background.texture_seed,
            },
            "objects": [
                {
                    "extent": list(o.extent),
                    "center": list(o.center),
                    "orientation": list(o.orientation),
                    "motion": o.motion.to_json(),
                    "texture_seed": o.texture_seed,
                }
                for o in self.objects
            ],
            "ego": self.ego.to_json(),
            "noise": self.noise,
            "noise_seed": self.noise_seed,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "SceneConfig":
        try:
            bg = obj.get("background", {})
            objects = [
                ObjectConfig(
                    extent=tuple(float(x) for x in o["extent"]),
                    center=tuple(float(x) for x in o["center"]),
                    orientation=tuple(float(x) for x in o.get("orientation", (0, 0, 0))),
                    motion=Pose6DoF.from_json(o["motion"]) if "motion" in o else Pose6DoF(),
                    texture_seed=int(o.get("texture_seed", 1)),
                )
                for o in obj.get("objects", [])
            ]
            return cls(
                intrinsics=Intrinsics.from_json(obj["intrinsics"]),
                background=BackgroundConfig(
                    float(bg.get("distance", 15.0)), float(bg.get("tilt", 0.0)), int(bg.get("texture_seed", 0))
                ),
                objects=objects,
                ego=Pose6DoF.from_json(obj["ego"]) if "ego" in obj else Pose6DoF(),
                noise=float(obj.get("noise", 0.0)),
                noise_seed=int(obj.get("noise_seed", 0)),
                scene_id=str(obj.get("scene_id", "scene")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed scene config: {exc}") from exc


@dataclass
class ObjectTruth:
    motion: Pose6DoF  # object motion in camera-2 coordinates
    fwd: Pose6DoF  # P^k_{1->2}: frame-1 target -> ego-compensated frame-2 geometry
    bwd: Pose6DoF  # P^k_{2->1}: frame-2 target -> ego-compensated frame-1 geometry


@dataclass
class SceneBundle:
    I1: np.ndarray
    I2: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    K: Intrinsics
    ego_fwd: Pose6DoF
    ego_bwd: Pose6DoF
    objects: list[ObjectTruth]
    config: Optional[SceneConfig] = None
    scene_id: str = "scene"

    @property
    def n(self) -> int:
        return self.M1.shape[0]

    @property
    def static(self) -> bool:
        return all(np.allclose(o.motion.matrix(), np.eye(4)) for o in self.objects)

    def truth_json(self) -> dict[str, Any]:
        return {
            "scene_id": self.scene_id,
            "ego": {"fwd": self.ego_fwd.to_json(), "bwd": self.ego_bwd.to_json()},
            "objects": [
                {"id": k + 1, "fwd": o.fwd.to_json(), "bwd": o.bwd.to_json(), "motion": o.motion.to_json()}
                for k, o in enumerate(self.objects)
            ],
        }


def object_truth(motion: Pose6DoF, ego: Pose6DoF) -> ObjectTruth:
    return ObjectTruth(
        motion=motion,
        fwd=compose(invert(ego), compose(motion, ego)),
        bwd=invert(motion),
    )


def _rays(K: Intrinsics):
    xs, ys = pixel_grid(K.height, K.width)
    return (xs - K.cx) / K.fx, (ys - K.cy) / K.fy


def _plane_depth(rx, ry, normal, offset):
    """Depth along unit-z rays hitting the plane ``normal . X = offset``."""
    denom = normal[0] * rx + normal[1] * ry + normal[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = offset / denom
    return np.where(denom > 0, t, np.inf) if offset > 0 else np.where(denom < 0, t, np.inf)


def _validate(cfg: SceneConfig) -> None:
    if len(cfg.objects) > N_MAX_OBJECTS:
        raise InvalidInputError(f"at most {N_MAX_OBJECTS} objects supported, got {len(cfg.objects)}")
    bg = cfg.background
    if not Z_MIN < bg.distance < Z_MAX:
        raise InvalidInputError(f"background distance {bg.distance} outside ({Z_MIN}, {Z_MAX})")
    n = bg.normal
    for k, o in enumerate(cfg.objects):
        if min(o.extent) <= 0:
            raise DegenerateSceneError(f"object {k} has non-positive extent", k)
        c1 = o.corners()
        T2 = o.motion.matrix() @ cfg.ego.matrix()
        c2 = c1 @ T2[:3, :3].T + T2[:3, 3]
        for frame, c in ((1, c1), (2, c2)):
            if (c[:, 2] <= Z_MIN).any() or (c[:, 2] >= Z_MAX).any():
                raise DegenerateSceneError(f"object {k} is behind the camera in frame {frame}", k)
        if (c1 @ n >= bg.distance).any():
            raise DegenerateSceneError(f"object {k} is not in front of the background", k)


def _render_frame(cfg: SceneConfig, frame: int):
    K = cfg.intrinsics
    rx, ry = _rays(K)
    E = cfg.ego if frame == 2 else Pose6DoF()
    bg = cfg.background
    nb = E.rotation @ bg.normal
    db = bg.distance + float(nb @ E.translation)
    depth = _plane_depth(rx, ry, nb, db)
    if not np.all(np.isfinite(depth)) or (depth <= Z_MIN).any() or (depth >= Z_MAX).any():
        raise DegenerateSceneError(f"background does not cover frame {frame}")
    label = np.zeros(K.shape, dtype=np.int64)
    to_frame1 = [invert(E)]
    for k, o in enumerate(cfg.objects):
        T = compose(o.motion, E) if frame == 2 else Pose6DoF()
        R = T.rotation @ Pose6DoF(*o.orientation).rotation
        c = T.rotation @ np.asarray(o.center, dtype=np.float64) + T.translation
        nrm = R[:, 2]
        denom = nrm[0] * rx + nrm[1] * ry + nrm[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = float(nrm @ c) / denom
        X, Y, Z = t * rx - c[0], t * ry - c[1], t - c[2]
        a = R[0, 0] * X + R[1, 0] * Y + R[2, 0] * Z
        b = R[0, 1] * X + R[1, 1] * Y + R[2, 1] * Z
        hit = (
            np.isfinite(t)
            & (t > Z_MIN)
            & (np.abs(a) <= o.extent[0] / 2)
            & (np.abs(b) <= o.extent[1] / 2)
            & (t < depth)
        )
        depth = np.where(hit, t, depth)
        label = np.where(hit, k + 1, label)
        to_frame1.append(invert(T))

    image = np.zeros(K.shape + (3,))
    textures = [Texture(bg.texture_seed)] + [Texture(o.texture_seed) for o in cfg.objects]
    for s, (tex, back) in enumerate(zip(textures, to_frame1)):
        sel = label == s
        if not sel.any():
            continue
        d = depth[sel]
        X1, Y1, Z1 = transform_xyz(d * rx[sel], d * ry[sel], d, back)
        with np.errstate(divide="ignore", invalid="ignore"):
            u, v, _ = project_xyz(X1, Y1, Z1, K)
        image[sel] = tex.sample(u, v)
    return image, depth, label


def render_scene(cfg: SceneConfig) -> SceneBundle:
    """Render both frames of a scene with exact depth and masks."""
    _validate(cfg)
    I1, D1, L1 = _render_frame(cfg, 1)
    I2, D2, L2 = _render_frame(cfg, 2)
    n = len(cfg.objects)
    M1 = np.array([L1 == k + 1 for k in range(n)], dtype=bool).reshape(n, *cfg.intrinsics.shape)
    M2 = np.array([L2 == k + 1 for k in range(n)], dtype=bool).reshape(n, *cfg.intrinsics.shape)
    areas = M1.sum(axis=(1, 2))
    order = np.argsort(-areas, kind="stable")
    M1, M2 = M1[order], M2[order]
    truths = [object_truth(cfg.objects[i].motion, cfg.ego) for i in order]
    if cfg.noise > 0:
        rng = np.random.default_rng(cfg.noise_seed)
        I1 = np.clip(I1 + rng.normal(0.0, cfg.noise, I1.shape), 0.0, 1.0)
        I2 = np.clip(I2 + rng.normal(0.0, cfg.noise, I2.shape), 0.0, 1.0)
    return SceneBundle(
        I1, I2, D1, D2, M1, M2, cfg.intrinsics, cfg.ego, invert(cfg.ego), truths, cfg, cfg.scene_id
    )


# ---------------------------------------------------------------------------
# standard suite

SUITE_SIZE = 20
SUITE_INTRINSICS = Intrinsics(fx=120.0, fy=120.0, cx=95.5, cy=39.5, width=192, height=80)
# (object count, objects move) per scene index; scene 7 has two moving objects
_SUITE_LAYOUT = [
    (0, False), (0, False), (1, False), (1, True), (2, True),
    (0, False), (1, True), (2, True), (3, True), (2, False),
    (1, True), (3, True), (0, False), (2, True), (1, True),
    (3, False), (2, True), (1, True), (2, True), (3, True),
]


def _bbox(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    return ys.min(), ys.max(), xs.min(), xs.max()


def _layout_ok(bundle: SceneBundle, n: int, min_area: int = 120, margin: int = 3, gap: int = 4) -> bool:
    h, w = bundle.K.shape
    for M in (bundle.M1, bundle.M2):
        if M.shape[0] != n:
            return False
        boxes = []
        for m in M:
            if m.sum() < min_area:
                return False
            y0, y1, x0, x1 = _bbox(m)
            if y0 < margin or x0 < margin or y1 > h - 1 - margin or x1 > w - 1 - margin:
                return False
            boxes.append((y0, y1, x0, x1))
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                a, b = boxes[i], boxes[j]
                if not (a[1] + gap < b[0] or b[1] + gap < a[0] or a[3] + gap < b[2] or b[3] + gap < a[2]):
                    return False
    return True


def _random_unit(rng, y_scale=0.3):
    v = rng.normal(size=3) * np.array([1.0, y_scale, 1.0])
    return v / np.linalg.norm(v)


def suite_config(index: int, seed: int = 0) -> SceneConfig:
    """Configuration of one standard-suite scene (deterministic in ``seed``)."""
    if not 0 <= index < SUITE_SIZE:
        raise InvalidInputError(f"suite index must be in [0, {SUITE_SIZE}), got {index}")
    n, moving = _SUITE_LAYOUT[index]
    rng = np.random.default_rng([seed, index])
    K = SUITE_INTRINSICS
    for _ in range(500):
        t_mag = rng.uniform(0.2, 0.5)
        t = _random_unit(rng, y_scale=0.2) * t_mag
        rot = np.radians(
            [rng.uniform(-0.5, 0.5), rng.uniform(-2.0, 2.0), rng.uniform(-0.5, 0.5)]
        )
        rot *= min(1.0, 2.0 / max(np.degrees(np.linalg.norm(rot)), 1e-9))
        ego = Pose6DoF(*rot, *t)
        bg = BackgroundConfig(
            distance=rng.uniform(14.0, 20.0),
            tilt=rng.uniform(-0.08, 0.08),
            texture_seed=int(rng.integers(1 << 30)),
        )
        objects = []
        for _k in range(n):
            motion = Pose6DoF()
            if moving:
                d = _random_unit(rng, y_scale=0.1) * rng.uniform(0.15, 0.3)
                motion = Pose6DoF(tx=d[0], ty=d[1], tz=d[2])
            z = rng.uniform(5.5, 9.5)
            objects.append(
                ObjectConfig(
                    extent=(rng.uniform(1.4, 2.4), rng.uniform(1.0, 1.6)),
                    center=(rng.uniform(-0.55, 0.55) * z, rng.uniform(-0.15, 0.15) * z, z),
                    motion=motion,
                    texture_seed=int(rng.integers(1 << 30)),
                )
            )
        cfg = SceneConfig(K, bg, objects, ego, scene_id=f"suite_{seed}_{index:02d}")
        try:
            bundle = render_scene(cfg)
        except DegenerateSceneError:
            continue
        if _layout_ok(bundle, n):
            return cfg
    raise RuntimeError(f"could not place suite scene {index}")  # pragma: no cover


def standard_suite(seed: int = 0) -> list[SceneBundle]:
    return [render_scene(suite_config(i, seed)) for i in range(SUITE_SIZE)]


# ---------------------------------------------------------------------------
# bundle directories

BUNDLE_FILES = {"I1": "i1.png", "I2": "i2.png", "D1": "d1.f32", "D2": "d2.f32", "M1": "m1.png", "M2": "m2.png"}


def write_bundle(bundle: SceneBundle, directory) -> Path:
    """Write a bundle directory: images, depths, label masks, ``meta.json`` and ``manifest.json``.

    Label value ``k + 1`` marks instance ``k`` (frame-1 area order), which
    is also the object id in the ground-truth block of ``meta.json``.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_image(out / BUNDLE_FILES["I1"], bundle.I1)
    write_image(out / BUNDLE_FILES["I2"], bundle.I2)
    write_depth(out / BUNDLE_FILES["D1"], bundle.D1)
    write_depth(out / BUNDLE_FILES["D2"], bundle.D2)
    write_labels(out / BUNDLE_FILES["M1"], stack_to_labels(bundle.M1))
    write_labels(out / BUNDLE_FILES["M2"], stack_to_labels(bundle.M2))
    meta = {"scene_id": bundle.scene_id, "truth": bundle.truth_json()}
    if bundle.config is not None:
        meta["config"] = bundle.config.to_json()
    write_json(out / "meta.json", meta)
    manifest = dict(BUNDLE_FILES, K=bundle.K.to_json(), scene_id=bundle.scene_id)
    write_json(out / "manifest.json", manifest)
    return out


def write_suite(seed: int, directory) -> list[Path]:
    root = Path(directory)
    return [write_bundle(render_scene(suite_config(i, seed)), root / f"scene_{i:02d}") for i in range(SUITE_SIZE)]
