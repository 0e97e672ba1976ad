"""Run configuration and bundle manifests, validated before any work starts."""
from __future__ import annotations

from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from rigidsynth.camgeo import InvalidInputError, Intrinsics
from rigidsynth.instance import InstanceMaskStack
from rigidsynth.io import PathLike, read_depth, read_image, read_json, read_labels, write_json
from rigidsynth.loss import LossWeights
from rigidsynth.solver import FramePair, SolverOptions


class ConfigError(InvalidInputError):
    """A configuration or manifest failed schema validation."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class WeightsModel(_Strict):
    photometric: float = Field(2.0, ge=0)
    geometric: float = Field(1.0, ge=0)
    smoothness: float = Field(0.1, ge=0)
    translation: float = Field(0.1, ge=0)
    height: float = Field(0.02, ge=0)
    ssim_gamma: float = Field(0.85, ge=0, le=1)


class SolverModel(_Strict):
    max_iters: int = Field(200, ge=1)
    joint_max_iters: int = Field(10, ge=1)
    refine: bool = True
    refine_max_iters: int = Field(100, ge=1)
    step_size: float = Field(0.05, gt=0)
    h_translation: float = Field(1e-4, gt=0)
    h_rotation: float = Field(1e-5, gt=0)
    tol: float = Field(1e-6, gt=0)
    patience: int = Field(5, ge=1)
    armijo: float = Field(1e-4, gt=0, lt=1)
    max_halvings: int = Field(30, ge=1)
    height_step_scale: float = Field(0.1, gt=0)
    init_height: float = Field(1.5, gt=0)
    prior_init: bool = True


class PathsModel(_Strict):
    bundle: Optional[str] = None
    out: Optional[str] = None
    masks: Optional[str] = None
    flow: Optional[str] = None


class RunConfig(_Strict):
    """Everything needed to reproduce one run from a single JSON document."""

    solver: SolverModel = SolverModel()
    weights: WeightsModel = WeightsModel()
    alpha: int = Field(2, ge=1, le=8)
    tau: float = Field(0.5, gt=0, le=1)
    n_max: int = Field(3, ge=1)
    seed: int = 0
    paths: PathsModel = PathsModel()

    def solver_options(self) -> SolverOptions:
        return SolverOptions(
            **self.solver.model_dump(),
            alpha=self.alpha,
            weights=LossWeights(**self.weights.model_dump()),
            seed=self.seed,
        )

    @classmethod
    def parse(cls, obj: Any) -> "RunConfig":
        try:
            return cls.model_validate(obj)
        except ValidationError as exc:
            first = exc.errors()[0]
            where = ".".join(str(p) for p in first["loc"]) or "<root>"
            raise ConfigError(f"invalid run config at {where}: {first['msg']}") from exc

    @classmethod
    def load(cls, path: PathLike) -> "RunConfig":
        try:
            return cls.parse(read_json(path))
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def save(self, path: PathLike) -> None:
        write_json(path, self.model_dump())


class IntrinsicsModel(_Strict):
    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float
    width: int = Field(ge=1)
    height: int = Field(ge=1)


class BundleManifest(_Strict):
    """File paths of one frame pair; relative paths resolve against the manifest's directory."""

    I1: str
    I2: str
    D1: str
    D2: str
    K: IntrinsicsModel
    M1: Optional[str] = None
    M2: Optional[str] = None
    scene_id: str = "scene"

    @classmethod
    def load(cls, path: PathLike) -> tuple["BundleManifest", Path]:
        obj = read_json(path)
        try:
            return cls.model_validate(obj), Path(path).resolve().parent
        except ValidationError as exc:
            first = exc.errors()[0]
            where = ".".join(str(p) for p in first["loc"]) or "<root>"
            raise ConfigError(f"{path}: invalid bundle manifest at {where}: {first['msg']}") from exc

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(**self.K.model_dump())


def masks_from_labels(L1: np.ndarray, L2: np.ndarray, n_max: int = 3) -> tuple[np.ndarray, np.ndarray]:
    s = InstanceMaskStack.from_labels(L1, L2, n_max)
    return s.frame1, s.frame2


def load_bundle(path: PathLike, n_max: int = 3) -> FramePair:
    """Read a bundle manifest and every file it lists into a :class:`FramePair`."""
    m, root = BundleManifest.load(path)
    K = m.intrinsics()

    def at(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else root / q

    I1, I2 = read_image(at(m.I1)), read_image(at(m.I2))
    D1 = read_depth(at(m.D1)).astype(np.float64)
    D2 = read_depth(at(m.D2)).astype(np.float64)
    if (m.M1 is None) != (m.M2 is None):
        raise ConfigError(f"{path}: M1 and M2 must both be given or both omitted")
    if m.M1 is not None:
        M1, M2 = masks_from_labels(read_labels(at(m.M1)), read_labels(at(m.M2)), n_max)
    else:
        M1 = M2 = np.zeros((0,) + K.shape, dtype=bool)
    return FramePair(I1, I2, D1, D2, M1, M2, K, m.scene_id)
