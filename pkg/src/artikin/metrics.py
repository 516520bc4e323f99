"""Evaluation metrics: joint axis/pivot errors, end-point error and Chamfer.

Distances are in scene units here; :mod:`artikin.model_io` converts to
centimeters when writing a report. Angles are degrees.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .exceptions import InvalidInputError

CHAMFER_MAX_POINTS = 10_000


def _unit(v, name):
    v = np.asarray(v, dtype=float).reshape(3)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or abs(n - 1.0) > 1e-9:
        raise InvalidInputError(f"{name} must be a unit vector, got norm {n:.6g}")
    return v


def axis_error(pred, gt):
    """Unsigned angle between two joint axes, in degrees, within [0, 90].

    Uses ``atan2(|a x b|, |a . b|)``, which equals ``arccos(|a . b|)`` but
    stays accurate for nearly parallel axes.
    """
    a = _unit(pred, "pred axis")
    b = _unit(gt, "gt axis")
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), abs(a @ b))))


def position_error(pred_pivot, gt_point, gt_axis):
    """Distance from ``pred_pivot`` to the line ``gt_point + s * gt_axis``."""
    a = _unit(gt_axis, "gt axis")
    d = np.asarray(pred_pivot, dtype=float).reshape(3) - np.asarray(gt_point, dtype=float).reshape(3)
    return float(np.linalg.norm(d - (d @ a) * a))


def _row_norms(d):
    # Scaled by the largest component: exact for single-axis offsets and
    # safe from under/overflow.
    m = np.max(np.abs(d), axis=-1)
    safe = np.where(m > 0, m, 1.0)
    return m * np.sqrt(np.sum((d / safe[..., None]) ** 2, axis=-1))


def epe(pred_tracks, gt_tracks, mask=None):
    """Mean Euclidean distance over the masked ``(point, frame)`` samples.

    Summed with ``math.fsum`` so constant offsets come back exactly.
    """
    P = np.asarray(getattr(pred_tracks, "positions", pred_tracks), dtype=float)
    G = np.asarray(getattr(gt_tracks, "positions", gt_tracks), dtype=float)
    if P.shape != G.shape or P.shape[-1] != 3:
        raise InvalidInputError(f"track shapes differ: {P.shape} vs {G.shape}")
    m = np.ones(P.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != P.shape[:-1]:
        raise InvalidInputError(f"mask shape {m.shape} does not match tracks {P.shape[:-1]}")
    if not m.any():
        raise InvalidInputError("mask selects no samples")
    d = _row_norms(P[m] - G[m])
    return math.fsum(d) / len(d)


def _cap(points, limit):
    if len(points) <= limit:
        return points
    idx = np.linspace(0, len(points) - 1, limit).round().astype(int)
    return points[idx]


def chamfer(a, b, max_points=CHAMFER_MAX_POINTS):
    """Symmetric Chamfer distance: mean NN distance a->b plus mean b->a.

    Sets larger than ``max_points`` are thinned to evenly spaced indices,
    so the result is deterministic.
    """
    A = np.asarray(a, dtype=float).reshape(-1, 3)
    B = np.asarray(b, dtype=float).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        raise InvalidInputError("chamfer needs two non-empty point sets")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise InvalidInputError("chamfer inputs must be finite")
    A, B = _cap(A, max_points), _cap(B, max_points)
    d_ab, _ = cKDTree(B).query(A)
    d_ba, _ = cKDTree(A).query(B)
    return float(np.mean(d_ab)) + float(np.mean(d_ba))


@dataclass
class PartReport:
    """Metrics for one ground-truth dynamic part and its matched prediction.

    The predicted part's index is deliberately not stored, so reports do not
    depend on how the predicted parts happen to be ordered.
    """

    gt_part: int
    gt_kind: str = ""
    pred_kind: str = None
    axis_error: float = None
    position_error: float = None

    @property
    def type_correct(self):
        return self.pred_kind == self.gt_kind


@dataclass
class EvalReport:
    """Per-part joint errors plus trajectory and shape metrics (scene units, degrees)."""

    parts: list = field(default_factory=list)
    epe: float = 0.0
    chamfer_whole: float = 0.0
    chamfer_movable: float = None
    chamfer_static: float = None
    joint_type_accuracy: float = 1.0
    unmatched_pred: int = 0
    unmatched_gt: list = field(default_factory=list)

    def part(self, gt_part):
        for p in self.parts:
            if p.gt_part == gt_part:
                return p
        raise KeyError(gt_part)


def _centroids(model):
    lab = model.labels()
    mu = model.canonical_points
    out = {}
    for k, p in enumerate(model.parts):
        if k == 0 or p.kind == "static":
            continue
        idx = lab == k
        if np.any(idx):
            out[k] = mu[idx].mean(axis=0)
    return out


def match_parts(model, ground_truth):
    """Hungarian matching of dynamic parts by canonical-centroid distance.

    Returns ``{gt_part: pred_part}``. Predicted parts that own no points or
    are static are not candidates.
    """
    pc = _centroids(model)
    gc = _centroids(ground_truth)
    if not pc or not gc:
        return {}
    pk, gk = sorted(pc), sorted(gc)
    cost = np.array([[np.linalg.norm(gc[g] - pc[p]) for p in pk] for g in gk])
    rows, cols = linear_sum_assignment(cost)
    return {gk[r]: pk[c] for r, c in zip(rows, cols)}


def evaluate(model, ground_truth, tracks=None):
    """Score ``model`` against ``ground_truth`` over the same points and frames.

    Pivot (position) errors are reported for revolute ground-truth parts
    only; a prismatic joint's pivot does not affect its motion. Chamfer
    terms compare predicted and true positions at the last frame, split by
    ground-truth label (label 0 is the static set).
    """
    if model.n_points != ground_truth.n_points or model.n_frames != ground_truth.n_frames:
        raise InvalidInputError("model and ground truth cover different points or frames")
    if tracks is not None and (tracks.point_count != model.n_points
                               or tracks.frame_count != model.n_frames):
        raise InvalidInputError("tracks do not match the model shape")
    match = match_parts(model, ground_truth)
    gt_dyn = [k for k, p in enumerate(ground_truth.parts) if k > 0 and p.kind != "static"]
    reports = []
    for g in gt_dyn:
        gj = ground_truth.parts[g]
        rep = PartReport(gt_part=g, gt_kind=gj.kind)
        if g in match:
            pj = model.parts[match[g]]
            rep.pred_kind = pj.kind
            rep.axis_error = axis_error(pj.axis, gj.axis)
            if gj.kind == "revolute":
                rep.position_error = position_error(pj.pivot, gj.pivot, gj.axis)
        reports.append(rep)
    matched_pred = set(match.values())
    pred_dyn = [k for k, p in enumerate(model.parts) if k > 0 and p.kind != "static"]

    P = model.forward()
    G = ground_truth.forward()
    gl = ground_truth.labels()
    last = model.n_frames - 1
    movable = gl != 0
    acc = (float(np.mean([r.type_correct for r in reports])) if reports else 1.0)
    return EvalReport(
        parts=reports,
        epe=epe(P, G),
        chamfer_whole=chamfer(P[:, last], G[:, last]),
        chamfer_movable=chamfer(P[movable, last], G[movable, last]) if movable.any() else None,
        chamfer_static=chamfer(P[~movable, last], G[~movable, last]) if (~movable).any() else None,
        joint_type_accuracy=acc,
        unmatched_pred=sum(1 for k in pred_dyn if k not in matched_pred),
        unmatched_gt=[g for g in gt_dyn if g not in match],
    )
