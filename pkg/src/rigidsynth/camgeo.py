"""Pinhole camera model, SE(3) pose algebra and point-cloud projection.

Conventions used everywhere in the package:

* A pose ``P_{a->b}`` maps 3D points expressed in camera ``a`` coordinates
  into camera ``b`` coordinates: ``X_b = R @ X_a + t``.
* Euler angles are intrinsic rotations applied X, then Y, then Z, i.e.
  ``R = Rx(rx) @ Ry(ry) @ Rz(rz)``.
* Pixel ``(x, y)`` samples the continuous image coordinate ``(x, y)``
  exactly (no half-pixel offset).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

Z_MIN = 1e-3
# projections closer than this to an integer are snapped onto it
SNAP_EPS = 1e-9


class InvalidInputError(ValueError):
    """Raised when an input violates a documented precondition."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise InvalidInputError("width and height must be integers")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError("raster size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} raster"
            )
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Intrinsics":
        try:
            return cls(
                fx=float(obj["fx"]),
                fy=float(obj["fy"]),
                cx=float(obj["cx"]),
                cy=float(obj["cy"]),
                width=obj["width"],
                height=obj["height"],
            )
        except (KeyError, TypeError) as exc:
            raise InvalidInputError(f"malformed intrinsics object: {exc}") from exc


def _rotation_xyz(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    # Rx @ Ry @ Rz expanded by hand
    return np.array(
        [
            [cy * cz, -cy * sz, sy],
            [cx * sz + sx * sy * cz, cx * cz - sx * sy * sz, -sx * cy],
            [sx * sz - cx * sy * cz, sx * cz + cx * sy * sz, cx * cy],
        ]
    )


@dataclass(frozen=True)
class Pose6DoF:
    """Rigid transform stored as XYZ Euler angles (radians) and a translation (meters)."""

    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    _matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        comps = (self.rx, self.ry, self.rz, self.tx, self.ty, self.tz)
        if not all(math.isfinite(float(c)) for c in comps):
            raise InvalidInputError(f"pose components must be finite, got {comps}")
        for name, c in zip(("rx", "ry", "rz", "tx", "ty", "tz"), comps):
            object.__setattr__(self, name, float(c))
        m = np.eye(4)
        m[:3, :3] = _rotation_xyz(self.rx, self.ry, self.rz)
        m[:3, 3] = (self.tx, self.ty, self.tz)
        m.setflags(write=False)
        object.__setattr__(self, "_matrix", m)

    @classmethod
    def identity(cls) -> "Pose6DoF":
        return cls()

    @classmethod
    def from_vector(cls, v) -> "Pose6DoF":
        """Build from ``[rx, ry, rz, tx, ty, tz]``."""
        v = [float(x) for x in v]
        if len(v) != 6:
            raise InvalidInputError(f"pose vector needs 6 entries, got {len(v)}")
        return cls(*v)

    def vector(self) -> np.ndarray:
        return np.array([self.rx, self.ry, self.rz, self.tx, self.ty, self.tz])

    def is_identity(self) -> bool:
        return not any((self.rx, self.ry, self.rz, self.tx, self.ty, self.tz))

    @property
    def rotation(self) -> np.ndarray:
        return self._matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self._matrix[:3, 3]

    def matrix(self) -> np.ndarray:
        return self._matrix

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose6DoF":
        """Extract XYZ Euler angles from a 4x4 (or 3x4) rigid transform.

        At gimbal lock (|ry| = pi/2) rx is fixed to 0 and the remaining
        rotation is absorbed into rz.
        """
        m = np.asarray(m, dtype=np.float64)
        r = m[:3, :3]
        sy = min(1.0, max(-1.0, r[0, 2]))
        ry = math.asin(sy)
        if abs(sy) < 1.0 - 1e-12:
            rx = math.atan2(-r[1, 2], r[2, 2])
            rz = math.atan2(-r[0, 1], r[0, 0])
        else:
            rx = 0.0
            rz = math.atan2(r[1, 0], r[1, 1])
        return cls(rx, ry, rz, m[0, 3], m[1, 3], m[2, 3])

    def to_json(self) -> dict[str, Any]:
        return {"euler_xyz": [self.rx, self.ry, self.rz], "t": [self.tx, self.ty, self.tz]}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Pose6DoF":
        try:
            r = [float(x) for x in obj["euler_xyz"]]
            t = [float(x) for x in obj["t"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed pose object: {exc}") from exc
        if len(r) != 3 or len(t) != 3:
            raise InvalidInputError("pose needs 3 euler angles and 3 translation components")
        return cls(*r, *t)


def compose(a: Pose6DoF, b: Pose6DoF) -> Pose6DoF:
    """Pose whose matrix is ``a.matrix() @ b.matrix()`` (apply ``b`` first)."""
    return Pose6DoF.from_matrix(a.matrix() @ b.matrix())


def invert(a: Pose6DoF) -> Pose6DoF:
    r = a.rotation
    m = np.eye(4)
    m[:3, :3] = r.T
    m[:3, 3] = -r.T @ a.translation
    return Pose6DoF.from_matrix(m)


def rotation_angle_deg(a: Pose6DoF) -> float:
    """Geodesic rotation angle of a pose, in degrees."""
    c = (np.trace(a.rotation) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


@dataclass(frozen=True)
class PointCloud:
    """Per-pixel 3D points of shape (H, W, 3) and a validity flag of shape (H, W)."""

    points: np.ndarray
    valid: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


def check_depth(depth: np.ndarray, K: Intrinsics | None = None) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise InvalidInputError(f"depth must be 2-D, got shape {depth.shape}")
    if K is not None and depth.shape != K.shape:
        raise InvalidInputError(f"depth shape {depth.shape} does not match intrinsics {K.shape}")
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise InvalidInputError("depth must be finite and strictly positive")
    return depth


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:height, 0:width]
    return xs.astype(np.float64), ys.astype(np.float64)


def backproject(depth: np.ndarray, K: Intrinsics) -> PointCloud:
    depth = check_depth(depth, K)
    xs, ys = pixel_grid(*depth.shape)
    X = depth * ((xs - K.cx) / K.fx)
    Y = depth * ((ys - K.cy) / K.fy)
    pts = np.stack([X, Y, depth.copy()], axis=-1)
    return PointCloud(pts, np.ones(depth.shape, dtype=bool))


def transform_xyz(X, Y, Z, pose: Pose6DoF):
    """Apply ``pose`` component-wise with a fixed evaluation order.

    Written out term by term (no BLAS) so results are reproducible bit for
    bit by a scalar loop doing the same arithmetic.
    """
    m = pose.matrix()
    r00, r01, r02, t0 = (float(v) for v in m[0])
    r10, r11, r12, t1 = (float(v) for v in m[1])
    r20, r21, r22, t2 = (float(v) for v in m[2])
    Xo = r00 * X + r01 * Y + r02 * Z + t0
    Yo = r10 * X + r11 * Y + r12 * Z + t1
    Zo = r20 * X + r21 * Y + r22 * Z + t2
    return Xo, Yo, Zo


def transform_points(pc: PointCloud, pose: Pose6DoF) -> PointCloud:
    p = pc.points
    X, Y, Z = transform_xyz(p[..., 0], p[..., 1], p[..., 2], pose)
    return PointCloud(np.stack([X, Y, Z], axis=-1), pc.valid.copy())


def snap(u: np.ndarray) -> np.ndarray:
    r = np.rint(u)
    return np.where(np.abs(u - r) < SNAP_EPS, r, u)


def project_xyz(X, Y, Z, K: Intrinsics):
    """Continuous pixel coordinates and validity for camera-frame points.

    Points with ``Z <= Z_MIN`` or landing outside ``[0, W) x [0, H)`` are
    invalid; their coordinates are still returned (NaN behind the camera).
    """
    front = Z > Z_MIN
    with np.errstate(divide="ignore", invalid="ignore"):
        u = snap(K.fx * X / Z + K.cx)
        v = snap(K.fy * Y / Z + K.cy)
    u = np.where(front, u, np.nan)
    v = np.where(front, v, np.nan)
    inside = front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    return u, v, inside


def project(pc: PointCloud, K: Intrinsics):
    """Project a cloud; returns ``(uv, depth, valid)`` with ``uv`` of shape (..., 2)."""
    p = pc.points
    u, v, inside = project_xyz(p[..., 0], p[..., 1], p[..., 2], K)
    return np.stack([u, v], axis=-1), p[..., 2].copy(), inside & pc.valid


def upsample_intrinsics(K: Intrinsics, alpha: int) -> Intrinsics:
    if int(alpha) != alpha or alpha < 1:
        raise InvalidInputError(f"upsampling factor must be a positive integer, got {alpha}")
    a = int(alpha)
    return Intrinsics(
        fx=a * K.fx,
        fy=a * K.fy,
        cx=a * K.cx,
        cy=a * K.cy,
        width=a * K.width,
        height=a * K.height,
    )
