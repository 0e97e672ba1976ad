"""Temporally consistent instance ids from per-frame masks and optical flow.

Each frame's instances are propagated into the next frame by forward flow,
compared by IoU with the next frame's instances (occluded pixels excluded
on both sides), and linked greedily in descending IoU order.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from rigidsynth.camgeo import InvalidInputError
from rigidsynth.io import PathLike, read_flow, read_labels, write_json, write_labels
from rigidsynth.warp import bilinear_sample

BETA1 = 0.01
BETA2 = 0.5
TAU = 0.5
N_MAX = 3

_FRAME_RE = re.compile(r"^(\d+)$")


class MissingFrameError(InvalidInputError):
    def __init__(self, message: str, frame: int):
        super().__init__(message)
        self.frame = frame


def _check_flow(flow: np.ndarray, shape=None) -> np.ndarray:
    f = np.asarray(flow, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != 2:
        raise InvalidInputError(f"flow must be (H, W, 2), got shape {f.shape}")
    if shape is not None and f.shape[:2] != tuple(shape):
        raise InvalidInputError(f"flow raster {f.shape[:2]} does not match frame {tuple(shape)}")
    if not np.isfinite(f).all():
        raise InvalidInputError("flow values must be finite")
    return f


def occlusion_mask(flow_fwd: np.ndarray, flow_bwd: np.ndarray, beta1: float = BETA1, beta2: float = BETA2) -> np.ndarray:
    """Forward-backward consistency check in the source frame of ``flow_fwd``.

    A pixel whose forward flow leaves the frame has no backward flow to
    check against and is reported occluded.
    """
    ff = _check_flow(flow_fwd)
    fb = _check_flow(flow_bwd, ff.shape[:2])
    h, w = ff.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    u = xs + ff[..., 0]
    v = ys + ff[..., 1]
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    bu = bilinear_sample(fb[..., 0], u, v, inside)
    bv = bilinear_sample(fb[..., 1], u, v, inside)
    ru = ff[..., 0] + bu
    rv = ff[..., 1] + bv
    lhs = ru * ru + rv * rv
    rhs = beta1 * (ff[..., 0] ** 2 + ff[..., 1] ** 2 + bu * bu + bv * bv) + beta2
    return (lhs > rhs) | ~inside


def propagate_mask_by_flow(mask: np.ndarray, flow_fwd: np.ndarray) -> np.ndarray:
    """Move every mask pixel to its rounded flow target; arrivals outside the frame are dropped."""
    m = np.asarray(mask) > 0
    f = _check_flow(flow_fwd, m.shape)
    h, w = m.shape
    ys, xs = np.nonzero(m)
    tx = np.rint(xs + f[ys, xs, 0]).astype(np.int64)
    ty = np.rint(ys + f[ys, xs, 1]).astype(np.int64)
    keep = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    out = np.zeros_like(m)
    out[ty[keep], tx[keep]] = True
    return out


def iou(a: np.ndarray, b: np.ndarray, exclude: Optional[np.ndarray] = None) -> float:
    """Intersection over union of two binary masks, ignoring ``exclude`` pixels; 0 for an empty union."""
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    if exclude is not None:
        keep = ~(np.asarray(exclude) > 0)
        a = a & keep
        b = b & keep
    union = int((a | b).sum())
    if union == 0:
        return 0.0
    return int((a & b).sum()) / union


@dataclass
class Match:
    """Result of linking frame-t instances to frame-t1 instances."""

    pairs: dict[int, int]  # frame-t1 index -> frame-t index
    iou: np.ndarray  # (n_t, n_t1)


def match_instances(
    masks_t: Sequence[np.ndarray],
    masks_t1: Sequence[np.ndarray],
    flow_fwd: np.ndarray,
    flow_bwd: np.ndarray,
    tau: float = TAU,
    beta1: float = BETA1,
    beta2: float = BETA2,
) -> Match:
    """Greedy one-to-one matching by descending occlusion-aware IoU.

    Frame-t pixels failing the consistency check are not propagated;
    frame-t1 pixels failing the reverse check are excluded from both
    operands. Ties in IoU resolve to the lower (t, t1) index pair.
    """
    if not 0.0 < tau <= 1.0:
        raise InvalidInputError(f"tau must lie in (0, 1], got {tau}")
    ff = _check_flow(flow_fwd)
    fb = _check_flow(flow_bwd, ff.shape[:2])
    n0, n1 = len(masks_t), len(masks_t1)
    scores = np.zeros((n0, n1))
    if n0 and n1:
        occ_t = occlusion_mask(ff, fb, beta1, beta2)
        occ_t1 = occlusion_mask(fb, ff, beta1, beta2)
        for i, m in enumerate(masks_t):
            p = propagate_mask_by_flow(np.asarray(m, dtype=bool) & ~occ_t, ff)
            for j, m1 in enumerate(masks_t1):
                scores[i, j] = iou(p, m1, occ_t1)
    cand = sorted(((-scores[i, j], i, j) for i in range(n0) for j in range(n1)))
    used_t, pairs = set(), {}
    for neg, i, j in cand:
        if -neg < tau:
            break
        if i in used_t or j in pairs:
            continue
        used_t.add(i)
        pairs[j] = i
    return Match(pairs, scores)


@dataclass
class TrackedFrame:
    index: int
    ids: list[int]
    masks: list[np.ndarray]
    shape: tuple[int, int] = (0, 0)

    @property
    def areas(self) -> list[int]:
        return [int(m.sum()) for m in self.masks]


@dataclass
class TrackedInstances:
    frames: list[TrackedFrame] = field(default_factory=list)
    next_id: int = 1
    n_max: int = N_MAX

    @property
    def track_ids(self) -> list[int]:
        return sorted({i for f in self.frames for i in f.ids})

    def track_lengths(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for f in self.frames:
            for i in f.ids:
                out[i] = out.get(i, 0) + 1
        return out

    def labels(self, pos: int) -> np.ndarray:
        f = self.frames[pos]
        out = np.zeros(f.shape, dtype=np.int64)
        for i, m in zip(f.ids, f.masks):
            out[m] = i
        return out

    def pair_stacks(self, pos: int) -> tuple[list[int], np.ndarray, np.ndarray]:
        """Tracks present in frames ``pos`` and ``pos + 1``, by descending reference (frame ``pos``) area.

        Returns the track ids and the two mask stacks.
        """
        a, b = self.frames[pos], self.frames[pos + 1]
        common = [i for i in a.ids if i in b.ids]
        area = {i: int(m.sum()) for i, m in zip(a.ids, a.masks)}
        common.sort(key=lambda i: (-area[i], i))
        ma = {i: m for i, m in zip(a.ids, a.masks)}
        mb = {i: m for i, m in zip(b.ids, b.masks)}
        shape = a.shape
        s1 = np.array([ma[i] for i in common], dtype=bool).reshape((len(common),) + shape)
        s2 = np.array([mb[i] for i in common], dtype=bool).reshape((len(common),) + shape)
        return common, s1, s2


def split_labels(labels: np.ndarray) -> list[np.ndarray]:
    """Binary masks of a label raster in ascending id order."""
    L = np.asarray(labels)
    return [L == i for i in np.unique(L) if i != 0]


def track_sequence(
    frames: Sequence[Sequence[np.ndarray]],
    shape: tuple[int, int],
    flows_fwd: Sequence[np.ndarray],
    flows_bwd: Sequence[np.ndarray],
    tau: float = TAU,
    n_max: int = N_MAX,
    indices: Optional[Sequence[int]] = None,
) -> TrackedInstances:
    """Link instances over a sequence; ``flows_*[t]`` relate frames ``t`` and ``t + 1``."""
    if not 0.0 < tau <= 1.0:
        raise InvalidInputError(f"tau must lie in (0, 1], got {tau}")
    if n_max < 1:
        raise InvalidInputError("n_max must be positive")
    n = len(frames)
    if n and (len(flows_fwd) < n - 1 or len(flows_bwd) < n - 1):
        raise InvalidInputError(f"{n} frames need {n - 1} flow pairs")
    indices = list(range(n)) if indices is None else list(indices)
    out = TrackedInstances(n_max=n_max)
    prev_ids: list[int] = []
    for t in range(n):
        masks = [np.asarray(m, dtype=bool) for m in frames[t]]
        for m in masks:
            if m.shape != tuple(shape):
                raise InvalidInputError(f"frame {indices[t]}: mask raster {m.shape} differs from {tuple(shape)}")
        ids: list[int] = []
        if t == 0:
            link = {}
        else:
            link = match_instances(frames[t - 1], masks, flows_fwd[t - 1], flows_bwd[t - 1], tau).pairs
        for j in range(len(masks)):
            if j in link:
                ids.append(prev_ids[link[j]])
            else:
                ids.append(out.next_id)
                out.next_id += 1
        # within a frame, instances are listed by descending area
        order = sorted(range(len(masks)), key=lambda j: (-int(masks[j].sum()), ids[j]))
        out.frames.append(TrackedFrame(indices[t], [ids[j] for j in order], [masks[j] for j in order], tuple(shape)))
        prev_ids = ids
    return out


def _frame_files(directory: Path, suffix: str, prefix: str = "") -> dict[int, Path]:
    out = {}
    for p in directory.iterdir():
        if p.suffix != suffix or not p.stem.startswith(prefix):
            continue
        m = _FRAME_RE.match(p.stem[len(prefix):])
        if m:
            out[int(m.group(1))] = p
    return out


def annotate_sequence(
    mask_dir: PathLike,
    flow_dir: PathLike,
    tau: float = TAU,
    n_max: int = N_MAX,
    out_dir: Optional[PathLike] = None,
) -> TrackedInstances:
    """Track instances over a directory of label PNGs.

    Inputs: ``mask_dir/<index>.png`` label rasters with contiguous integer
    indices, ``flow_dir/fwd_<t>.flo`` (frame t -> t+1) and
    ``flow_dir/bwd_<t>.flo`` (frame t+1 -> t). With ``out_dir``, writes
    per-frame track-id PNGs, per-pair instance-mask PNGs renumbered by
    descending reference area, and ``tracks.json``.
    """
    mask_dir, flow_dir = Path(mask_dir), Path(flow_dir)
    for d in (mask_dir, flow_dir):
        if not d.is_dir():
            raise InvalidInputError(f"{d}: not a directory")
    files = _frame_files(mask_dir, ".png")
    idx = sorted(files)
    for a, b in zip(idx, idx[1:]):
        if b != a + 1:
            raise MissingFrameError(f"mask stream is missing frame {a + 1}", a + 1)
    fwd = _frame_files(flow_dir, ".flo", "fwd_")
    bwd = _frame_files(flow_dir, ".flo", "bwd_")
    for t in idx[:-1]:
        for name, table in (("forward", fwd), ("backward", bwd)):
            if t not in table:
                raise MissingFrameError(f"{name} flow stream is missing frame {t}", t)
    frames, ff, fb = [], [], []
    shape = None
    for t in idx:
        L = read_labels(files[t])
        if shape is not None and L.shape != shape:
            raise InvalidInputError(f"frame {t}: mask raster {L.shape} differs from {shape}")
        shape = L.shape
        frames.append(split_labels(L))
    for t in idx[:-1]:
        ff.append(_check_flow(read_flow(fwd[t]), shape))
        fb.append(_check_flow(read_flow(bwd[t]), shape))
    tracks = track_sequence(frames, shape or (0, 0), ff, fb, tau, n_max, indices=idx)
    if out_dir is not None:
        export_tracks(tracks, out_dir)
    return tracks


def export_tracks(tracks: TrackedInstances, out_dir: PathLike) -> dict:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    manifest: dict = {"frames": [], "pairs": [], "n_max": tracks.n_max}
    for pos, f in enumerate(tracks.frames):
        name = f"frames/{f.index:06d}.png"
        write_labels(out / name, tracks.labels(pos))
        manifest["frames"].append(
            {
                "index": f.index,
                "instances": [{"id": i, "area": a, "mask_file": name} for i, a in zip(f.ids, f.areas)],
            }
        )
    for pos in range(len(tracks.frames) - 1):
        ids, s1, s2 = tracks.pair_stacks(pos)
        a, b = tracks.frames[pos].index, tracks.frames[pos + 1].index
        names = [f"pairs/{a:06d}_1.png", f"pairs/{a:06d}_2.png"]
        for name, s in zip(names, (s1, s2)):
            L = np.zeros(s.shape[1:], dtype=np.int64)
            for k in range(s.shape[0]):
                L[s[k]] = k + 1
            write_labels(out / name, L)
        manifest["pairs"].append({"frames": [a, b], "tracks": ids, "mask_files": names})
    write_json(out / "tracks.json", manifest)
    return manifest
