"""Pose error metrics against ground truth, per scene and over a suite."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Any, Optional

import numpy as np

from rigidsynth.camgeo import InvalidInputError, Pose6DoF, compose, invert, rotation_angle_deg
from rigidsynth.io import PathLike, read_json


class EvaluationError(InvalidInputError):
    """Prediction and ground truth do not describe the same scene."""


def translation_error(pred: Pose6DoF, gt: Pose6DoF) -> tuple[float, Optional[float]]:
    """Endpoint error in meters and as a percentage of the ground-truth translation norm.

    The percentage is None for a zero ground-truth translation.
    """
    e = float(np.linalg.norm(pred.translation - gt.translation))
    n = float(np.linalg.norm(gt.translation))
    return e, (100.0 * e / n if n > 0 else None)


def rotation_error_deg(pred: Pose6DoF, gt: Pose6DoF) -> float:
    """Geodesic angle of ``pred @ inv(gt)`` in degrees."""
    return rotation_angle_deg(compose(pred, invert(gt)))


def pose_errors(pred: Pose6DoF, gt: Pose6DoF) -> dict[str, Any]:
    e, pct = translation_error(pred, gt)
    return {"translation_m": e, "translation_pct": pct, "rotation_deg": rotation_error_deg(pred, gt)}


def _pose(block: dict, key: str, where: str) -> Pose6DoF:
    if key not in block:
        raise EvaluationError(f"{where} has no {key!r} pose")
    return Pose6DoF.from_json(block[key])


def evaluate_estimate(pred: dict, gt: dict) -> dict[str, Any]:
    """Compare an estimate JSON with a ground-truth block.

    ``gt`` may be a bundle ``meta.json`` (the ``truth`` block is used) or the
    truth block itself.
    """
    truth = gt.get("truth", gt)
    sid_p, sid_g = pred.get("scene_id"), truth.get("scene_id")
    if sid_p is not None and sid_g is not None and sid_p != sid_g:
        raise EvaluationError(f"scene id mismatch: prediction {sid_p!r} vs ground truth {sid_g!r}")
    try:
        report: dict[str, Any] = {"scene_id": sid_g if sid_g is not None else sid_p, "ego": {}, "objects": []}
        for d in ("fwd", "bwd"):
            report["ego"][d] = pose_errors(_pose(pred["ego"], d, "prediction ego"), _pose(truth["ego"], d, "ground-truth ego"))
        pobj = {int(o["id"]): o for o in pred.get("objects", [])}
        for o in truth.get("objects", []):
            k = int(o["id"])
            if k not in pobj:
                raise EvaluationError(f"prediction has no entry for object {k}")
            report["objects"].append(
                {"id": k, **{d: pose_errors(_pose(pobj[k], d, f"object {k}"), _pose(o, d, f"object {k}")) for d in ("fwd", "bwd")}}
            )
    except (KeyError, TypeError) as exc:
        raise EvaluationError(f"malformed estimate or ground truth: missing {exc}") from exc
    return report


def _finite(values):
    return [v for v in values if v is not None and math.isfinite(v)]


def summarize(reports: list[dict]) -> dict[str, Any]:
    """Mean and max of each metric over ego and object poses."""
    groups: dict[str, list[dict]] = {"ego": [], "objects": []}
    for r in reports:
        groups["ego"] += [r["ego"][d] for d in ("fwd", "bwd")]
        groups["objects"] += [o[d] for o in r["objects"] for d in ("fwd", "bwd")]
    out: dict[str, Any] = {"scenes": len(reports)}
    for g, rows in groups.items():
        out[g] = {}
        for key in ("translation_m", "translation_pct", "rotation_deg"):
            vals = _finite(row[key] for row in rows)
            out[g][key] = {"mean": float(np.mean(vals)) if vals else None, "max": float(np.max(vals)) if vals else None}
    return out


def evaluate_paths(pred: PathLike, gt: PathLike) -> dict[str, Any]:
    """Evaluate one estimate file, or every ``<scene>/estimate.json`` under a directory.

    For directories, each subdirectory of ``gt`` holding a ``meta.json``
    must have a matching ``estimate.json`` in the same-named subdirectory
    of ``pred``.
    """
    pred, gt = Path(pred), Path(gt)
    if pred.is_file():
        return evaluate_estimate(read_json(pred), read_json(gt))
    if not pred.is_dir() or not gt.is_dir():
        raise EvaluationError(f"{pred} and {gt} must both be files or both be directories")
    reports = []
    for scene in sorted(p for p in gt.iterdir() if (p / "meta.json").is_file()):
        est = pred / scene.name / "estimate.json"
        if not est.is_file():
            raise EvaluationError(f"{est}: missing estimate for scene {scene.name}")
        reports.append(evaluate_estimate(read_json(est), read_json(scene / "meta.json")))
    return {"scenes": reports, "summary": summarize(reports)}
