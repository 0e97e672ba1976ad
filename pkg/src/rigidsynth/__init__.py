"""Two-frame motion factorization into camera ego-motion and rigid object motion."""
from rigidsynth.camgeo import Intrinsics, InvalidInputError, Pose6DoF, compose, invert
from rigidsynth.instance import InstanceMaskStack, synthesize_view
from rigidsynth.loss import LossComponents, LossWeights
from rigidsynth.solver import FramePair, MotionEstimate, SolverError, SolverOptions, solve
from rigidsynth.synth import SceneConfig, render_scene, standard_suite
from rigidsynth.warp import forward_project, inverse_warp

__version__ = "0.1.0"

__all__ = [
    "FramePair",
    "InstanceMaskStack",
    "Intrinsics",
    "InvalidInputError",
    "LossComponents",
    "LossWeights",
    "MotionEstimate",
    "Pose6DoF",
    "SceneConfig",
    "SolverError",
    "SolverOptions",
    "compose",
    "forward_project",
    "invert",
    "inverse_warp",
    "render_scene",
    "solve",
    "standard_suite",
    "synthesize_view",
]
