"""JSON model and report files, plus a URDF-style joint block.

Model file (``"format": "artikin-model"``, version 1)::

    {
      "format": "artikin-model", "version": 1,
      "units": {"length": "m", "angle": "rad"},
      "canonical_frame": 0, "temperature": 1.0,
      "canonical_points": [[x, y, z], ...],
      "assignment_logits": [[z_0, ..., z_K-1], ...],
      "parts": [
        {"kind": "static" | "revolute" | "prismatic",
         "axis": [ax, ay, az] | null, "pivot": [px, py, pz],
         "scalars": [q_0, ..., q_T-1], "point_range": [lo, hi] | null}, ...
      ],
      "urdf": "<robot ...>...</robot>"          (optional, ignored on load)
    }

Report file (``"format": "artikin-report"``, version 1) stores distances in
centimeters (scene units are taken as meters) and angles in degrees.
Unknown keys are rejected in both files. Floats are written with ``repr``
precision, so a save/load round trip is exact.
"""

import json
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .exceptions import InvalidInputError, ParseError
from .kinematics import ArticulatedModel, Joint
from .metrics import EvalReport, PartReport

MODEL_FORMAT = "artikin-model"
REPORT_FORMAT = "artikin-report"
CM_PER_UNIT = 100.0

_MODEL_KEYS = {"format", "version", "units", "canonical_frame", "temperature",
               "canonical_points", "assignment_logits", "parts", "urdf"}
_PART_KEYS = {"kind", "axis", "pivot", "scalars", "point_range"}
_REPORT_KEYS = {"format", "version", "units", "parts", "epe", "chamfer_whole", "chamfer_movable",
                "chamfer_static", "joint_type_accuracy", "unmatched_pred", "unmatched_gt"}
_REPORT_PART_KEYS = {"gt_part", "gt_kind", "pred_kind", "axis_error", "position_error"}
_MODEL_UNITS = {"length": "m", "angle": "rad"}
_REPORT_UNITS = {"length": "cm", "angle": "deg"}


def _check_keys(d, allowed, where, path):
    if not isinstance(d, dict):
        raise ParseError(f"{where} must be an object", path)
    extra = sorted(set(d) - allowed)
    if extra:
        raise ParseError(f"{where}: unknown field(s) {', '.join(extra)}", path)


def _floats(x, shape, where, path):
    try:
        a = np.array(x, dtype=float)
    except (TypeError, ValueError):
        raise ParseError(f"{where} must be numeric", path) from None
    if shape is not None and a.shape != shape:
        raise ParseError(f"{where} has shape {a.shape}, expected {shape}", path)
    if not np.all(np.isfinite(a)):
        raise ParseError(f"{where} must be finite", path)
    return a


def _read_json(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None


def _write_json(doc, path):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Model


def model_to_dict(model, urdf=True):
    parts = []
    for k, p in enumerate(model.parts):
        rng = None if model.point_ranges is None else [int(v) for v in model.point_ranges[k]]
        parts.append({
            "kind": p.kind,
            "axis": None if p.axis is None else p.axis.tolist(),
            "pivot": p.pivot.tolist(),
            "scalars": p.scalars.tolist(),
            "point_range": rng,
        })
    doc = {
        "format": MODEL_FORMAT,
        "version": 1,
        "units": dict(_MODEL_UNITS),
        "canonical_frame": int(model.canonical_frame),
        "temperature": float(model.temperature),
        "canonical_points": model.canonical_points.tolist(),
        "assignment_logits": model.assignment_logits.tolist(),
        "parts": parts,
    }
    if urdf:
        doc["urdf"] = to_urdf(model)
    return doc


def model_from_dict(doc, path=None):
    _check_keys(doc, _MODEL_KEYS, "model", path)
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != 1:
        raise ParseError(f"expected format {MODEL_FORMAT!r} version 1", path)
    if doc.get("units", _MODEL_UNITS) != _MODEL_UNITS:
        raise ParseError(f"units must be {_MODEL_UNITS}", path)
    if "urdf" in doc and not isinstance(doc["urdf"], str):
        raise ParseError("urdf must be a string", path)
    for key in ("canonical_points", "assignment_logits", "parts"):
        if key not in doc:
            raise ParseError(f"missing field {key!r}", path)
    mu = _floats(doc["canonical_points"], None, "canonical_points", path)
    if mu.ndim != 2 or mu.shape[1] != 3:
        raise ParseError("canonical_points must be a list of 3-vectors", path)
    raw_parts = doc["parts"]
    if not isinstance(raw_parts, list) or not raw_parts:
        raise ParseError("parts must be a non-empty list", path)
    z = _floats(doc["assignment_logits"], (len(mu), len(raw_parts)), "assignment_logits", path)
    parts, ranges = [], []
    for k, pd in enumerate(raw_parts):
        where = f"parts[{k}]"
        _check_keys(pd, _PART_KEYS, where, path)
        kind = pd.get("kind")
        q = _floats(pd.get("scalars"), None, f"{where}.scalars", path)
        pivot = _floats(pd.get("pivot", [0.0, 0.0, 0.0]), (3,), f"{where}.pivot", path)
        axis = pd.get("axis")
        if kind != "static":
            axis = _floats(axis, (3,), f"{where}.axis", path)
            if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
                raise ParseError(f"{where}.axis is not unit length", path)
        elif axis is not None:
            raise ParseError(f"{where}: static parts carry no axis", path)
        try:
            parts.append(Joint(kind=kind, axis=axis, pivot=pivot, scalars=q))
        except InvalidInputError as exc:
            raise ParseError(f"{where}: {exc}", path) from None
        rng = pd.get("point_range")
        ranges.append(None if rng is None else tuple(int(v) for v in rng))
    point_ranges = None if all(r is None for r in ranges) else ranges
    try:
        return ArticulatedModel(parts=parts, canonical_points=mu, assignment_logits=z,
                                temperature=float(doc.get("temperature", 1.0)),
                                canonical_frame=int(doc.get("canonical_frame", 0)),
                                point_ranges=point_ranges)
    except InvalidInputError as exc:
        raise ParseError(str(exc), path) from None


def export_model(model, path, urdf=True):
    _write_json(model_to_dict(model, urdf=urdf), path)


def import_model(path):
    return model_from_dict(_read_json(path), path)


def to_urdf(model, name="articulated_object"):
    """URDF-style description: one link per part, one joint per dynamic part.

    Joint origins sit at the pivot; limits span the fitted scalar range.
    """
    lines = [f'<robot name="{escape(name)}">', '  <link name="part_0"/>']
    for k, p in enumerate(model.parts):
        if k == 0:
            continue
        lines.append(f'  <link name="part_{k}"/>')
        if p.kind == "static":
            lines.append(f'  <joint name="joint_{k}" type="fixed">')
        else:
            lines.append(f'  <joint name="joint_{k}" type="{p.kind}">')
        lines.append('    <parent link="part_0"/>')
        lines.append(f'    <child link="part_{k}"/>')
        x, y, zc = (repr(float(v)) for v in p.pivot)
        lines.append(f'    <origin xyz="{x} {y} {zc}" rpy="0 0 0"/>')
        if p.kind != "static":
            ax = " ".join(repr(float(v)) for v in p.axis)
            lines.append(f'    <axis xyz="{ax}"/>')
            lo, hi = float(np.min(p.scalars)), float(np.max(p.scalars))
            lines.append(f'    <limit lower="{lo!r}" upper="{hi!r}" effort="0" velocity="0"/>')
        lines.append('  </joint>')
    lines.append('</robot>')
    return "\n".join(lines) + "\n"


def bases_to_dict(bases):
    """Stage 1 motion bases as a JSON-ready dict (debug output, write-only)."""
    return {
        "format": "artikin-bases",
        "version": 1,
        "units": dict(_MODEL_UNITS),
        "canonical_frame": int(bases.canonical_frame),
        "rotations": bases.rotations.tolist(),
        "translations": bases.translations.tolist(),
        "distances": bases.distances.tolist(),
        "labels": bases.labels.tolist(),
        "centers": [None if not np.all(np.isfinite(c)) else c.tolist() for c in bases.centers],
        "notes": list(bases.notes),
    }


def export_bases(bases, path):
    _write_json(bases_to_dict(bases), path)


# ---------------------------------------------------------------------------
# Report


def _cm(x):
    return None if x is None else float(x) * CM_PER_UNIT


def _from_cm(x):
    return None if x is None else float(x) / CM_PER_UNIT


def report_to_dict(report):
    return {
        "format": REPORT_FORMAT,
        "version": 1,
        "units": dict(_REPORT_UNITS),
        "parts": [{"gt_part": int(p.gt_part), "gt_kind": p.gt_kind, "pred_kind": p.pred_kind,
                   "axis_error": p.axis_error, "position_error": _cm(p.position_error)}
                  for p in report.parts],
        "epe": _cm(report.epe),
        "chamfer_whole": _cm(report.chamfer_whole),
        "chamfer_movable": _cm(report.chamfer_movable),
        "chamfer_static": _cm(report.chamfer_static),
        "joint_type_accuracy": float(report.joint_type_accuracy),
        "unmatched_pred": int(report.unmatched_pred),
        "unmatched_gt": [int(g) for g in report.unmatched_gt],
    }


def report_from_dict(doc, path=None):
    _check_keys(doc, _REPORT_KEYS, "report", path)
    if doc.get("format") != REPORT_FORMAT or doc.get("version") != 1:
        raise ParseError(f"expected format {REPORT_FORMAT!r} version 1", path)
    if doc.get("units") != _REPORT_UNITS:
        raise ParseError(f"units must be {_REPORT_UNITS}", path)
    parts = []
    for k, pd in enumerate(doc.get("parts", [])):
        _check_keys(pd, _REPORT_PART_KEYS, f"parts[{k}]", path)
        parts.append(PartReport(gt_part=int(pd["gt_part"]), gt_kind=pd.get("gt_kind", ""),
                                pred_kind=pd.get("pred_kind"), axis_error=pd.get("axis_error"),
                                position_error=_from_cm(pd.get("position_error"))))
    try:
        return EvalReport(parts=parts, epe=_from_cm(doc["epe"]),
                          chamfer_whole=_from_cm(doc["chamfer_whole"]),
                          chamfer_movable=_from_cm(doc.get("chamfer_movable")),
                          chamfer_static=_from_cm(doc.get("chamfer_static")),
                          joint_type_accuracy=float(doc["joint_type_accuracy"]),
                          unmatched_pred=int(doc.get("unmatched_pred", 0)),
                          unmatched_gt=list(doc.get("unmatched_gt", [])))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"missing or bad field: {exc}", path) from None


def save_report(report, path):
    _write_json(report_to_dict(report), path)


def load_report(path):
    return report_from_dict(_read_json(path), path)
