"""3D point trajectories, their text file format, occlusion filling, and a
synthetic articulated-rig generator with known ground truth.

Track file layout (UTF-8 text)::

    ARTIKIN-TRACKS v1 N=<points> T=<frames>
    i t x y z v c          # one record per (point, frame), sorted by (i, t)

``v`` is 0/1 visibility, ``c`` a confidence in [0, 1]. Unobserved positions
may be written as ``nan``.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateTrackError, InvalidInputError, ParseError
from .geometry import rodrigues_many, unit_axis

logger = logging.getLogger(__name__)

TRACK_MAGIC = "ARTIKIN-TRACKS"
TRACK_VERSION = "v1"
RIG_FORMAT = "artikin-rig"

JOINT_KINDS = ("static", "revolute", "prismatic")


def _readonly(a):
    a = np.array(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TrackSet:
    """N point trajectories over T frames.

    Attributes
    ----------
    positions : (N, T, 3) float array, scene units (meters)
    visibility : (N, T) bool array
    confidence : (N, T) float array in [0, 1]
    """

    positions: np.ndarray
    visibility: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.positions, dtype=float)
        if X.ndim != 3 or X.shape[2] != 3:
            raise InvalidInputError(f"positions must be (N, T, 3), got {X.shape}")
        N, T, _ = X.shape
        V = np.asarray(self.visibility)
        if V.shape != (N, T):
            raise InvalidInputError(f"visibility shape {V.shape} != {(N, T)}")
        if V.dtype != bool:
            if not np.all(np.isin(V, (0, 1))):
                raise InvalidInputError("visibility must be boolean")
            V = V.astype(bool)
        C = np.asarray(self.confidence, dtype=float)
        if C.shape != (N, T):
            raise InvalidInputError(f"confidence shape {C.shape} != {(N, T)}")
        if not np.all(np.isfinite(C)) or np.any(C < 0) or np.any(C > 1):
            raise InvalidInputError("confidence must lie in [0, 1]")
        if T < 3:
            raise InvalidInputError(f"need at least 3 frames, got {T}")
        if N < 4:
            raise InvalidInputError(f"need at least 4 points, got {N}")
        if not np.all(np.isfinite(X[V])):
            raise InvalidInputError("visible positions must be finite")
        object.__setattr__(self, "positions", _readonly(X))
        object.__setattr__(self, "visibility", _readonly(V))
        object.__setattr__(self, "confidence", _readonly(C))

    @property
    def point_count(self):
        return self.positions.shape[0]

    @property
    def frame_count(self):
        return self.positions.shape[1]

    @property
    def sample_weights(self):
        """Per-sample weight ``v * c`` used by the data term."""
        return self.visibility * self.confidence

    def with_confidence(self, confidence):
        return TrackSet(self.positions, self.visibility, confidence)

    def subsample_frames(self, step):
        """Keep every ``step``-th frame starting at frame 0."""
        sl = slice(None, None, int(step))
        return TrackSet(self.positions[:, sl], self.visibility[:, sl], self.confidence[:, sl])

    def bbox_diagonal(self, frame=None):
        X = self.positions if frame is None else self.positions[:, frame]
        X = X.reshape(-1, 3)
        X = X[np.all(np.isfinite(X), axis=1)]
        return float(np.linalg.norm(X.max(axis=0) - X.min(axis=0)))

    def equals(self, other, atol=0.0):
        same_nan = np.array_equal(np.isnan(self.positions), np.isnan(other.positions))
        fin = np.isfinite(self.positions)
        return (
            self.positions.shape == other.positions.shape
            and same_nan
            and np.allclose(self.positions[fin], other.positions[fin], atol=atol, rtol=0)
            and np.array_equal(self.visibility, other.visibility)
            and np.allclose(self.confidence, other.confidence, atol=atol, rtol=0)
        )


def interpolate_occlusions(tracks):
    """Fill unobserved samples by linear interpolation between visible ones.

    Leading and trailing gaps hold the nearest visible value. Visibility flags
    are kept as they were so downstream weighting still sees the occlusion.
    """
    X = np.array(tracks.positions)
    V = tracks.visibility
    if V.all():
        return tracks
    frames = np.arange(tracks.frame_count)
    for i in range(tracks.point_count):
        vis = V[i]
        if vis.all():
            continue
        if vis.sum() < 2:
            raise DegenerateTrackError(
                f"point {i} is visible in {int(vis.sum())} frame(s); need at least 2", point_index=i)
        known = frames[vis]
        for d in range(3):
            # np.interp clamps outside [known[0], known[-1]]: hold extrapolation.
            X[i, ~vis, d] = np.interp(frames[~vis], known, X[i, vis, d])
    return TrackSet(X, V, tracks.confidence)


def save_tracks(tracks, path):
    N, T = tracks.point_count, tracks.frame_count
    lines = [f"{TRACK_MAGIC} {TRACK_VERSION} N={N} T={T}"]
    X, V, C = tracks.positions, tracks.visibility, tracks.confidence
    for i in range(N):
        for t in range(T):
            x, y, z = (float(v) for v in X[i, t])
            lines.append(f"{i} {t} {x!r} {y!r} {z!r} {int(V[i, t])} {float(C[i, t])!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def _parse_header(line, path):
    parts = line.split()
    if len(parts) != 4 or parts[0] != TRACK_MAGIC:
        raise ParseError(f"expected '{TRACK_MAGIC} {TRACK_VERSION} N=<int> T=<int>' header", path, 1)
    if parts[1] != TRACK_VERSION:
        raise ParseError(f"unsupported track format version {parts[1]!r}", path, 1)
    try:
        if not (parts[2].startswith("N=") and parts[3].startswith("T=")):
            raise ValueError
        N, T = int(parts[2][2:]), int(parts[3][2:])
    except ValueError:
        raise ParseError("malformed N=/T= fields in header", path, 1) from None
    if N <= 0 or T <= 0:
        raise ParseError("N and T must be positive", path, 1)
    return N, T


def load_tracks(path):
    """Read a track file; raise :class:`ParseError` on any malformed record."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc.strerror or exc}") from None
    if not lines:
        raise ParseError("empty file", path)
    N, T = _parse_header(lines[0], path)
    body = [(k + 2, ln) for k, ln in enumerate(lines[1:]) if ln.strip()]
    if len(body) != N * T:
        raise ParseError(f"expected {N * T} records, found {len(body)} (truncated?)", path,
                         body[-1][0] if body else 1)
    X = np.empty((N, T, 3))
    V = np.empty((N, T), dtype=bool)
    C = np.empty((N, T))
    for k, (lineno, ln) in enumerate(body):
        fields = ln.split()
        if len(fields) != 7:
            raise ParseError(f"expected 7 fields 'i t x y z v c', got {len(fields)}", path, lineno)
        try:
            i, t = int(fields[0]), int(fields[1])
            xyz = [float(f) for f in fields[2:5]]
            v = int(fields[5])
            c = float(fields[6])
        except ValueError as exc:
            raise ParseError(f"bad number: {exc}", path, lineno) from None
        if (i, t) != divmod(k, T):
            raise ParseError(f"record ({i}, {t}) out of order; expected {divmod(k, T)}", path, lineno)
        if v not in (0, 1):
            raise ParseError(f"visibility must be 0 or 1, got {v}", path, lineno)
        if not (0.0 <= c <= 1.0):
            raise ParseError(f"confidence {c} outside [0, 1]", path, lineno)
        if v and not all(np.isfinite(xyz)):
            raise ParseError("visible sample has non-finite position", path, lineno)
        X[i, t] = xyz
        V[i, t] = bool(v)
        C[i, t] = c
    try:
        return TrackSet(X, V, C)
    except InvalidInputError as exc:
        raise ParseError(str(exc), path) from None


# ---------------------------------------------------------------------------
# Synthetic rigs


@dataclass(frozen=True)
class NoiseSpec:
    position_sigma: float = 0.0
    occlusion_rate: float = 0.0
    confidence_floor: float = 1.0

    def __post_init__(self):
        vals = (self.position_sigma, self.occlusion_rate, self.confidence_floor)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise InvalidInputError("noise parameters must be finite and non-negative")
        if self.occlusion_rate >= 1:
            raise InvalidInputError("occlusion_rate must be < 1")
        if self.confidence_floor > 1:
            raise InvalidInputError("confidence_floor must be <= 1")


@dataclass(frozen=True, eq=False)
class PartSpec:
    """One rigid part of a synthetic rig.

    ``schedule`` holds the joint scalar per frame (radians or meters);
    ``window`` is the inclusive frame interval in which it may change.
    """

    kind: str
    points: np.ndarray
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    pivot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    schedule: np.ndarray = None
    window: tuple = None
    name: str = ""


def linear_schedule(n_frames, window, amplitude):
    """Joint scalar ramping linearly from 0 to ``amplitude`` across ``window``."""
    a, b = window
    t = np.arange(n_frames, dtype=float)
    frac = np.clip((t - a) / max(b - a, 1), 0.0, 1.0)
    return amplitude * frac


def smooth_schedule(n_frames, window, amplitude):
    """Cosine ease-in/ease-out ramp across ``window``."""
    frac = linear_schedule(n_frames, window, 1.0)
    return amplitude * 0.5 * (1.0 - np.cos(np.pi * frac))


_PROFILES = {"linear": linear_schedule, "smooth": smooth_schedule}


class RigSpec:
    """A ground-truth articulated object: part 0 static, the rest single joints."""

    def __init__(self, parts, n_frames):
        self.n_frames = int(n_frames)
        self.parts = [self._normalize(p) for p in parts]
        self.validate()

    def _normalize(self, p):
        pts = np.asarray(p.points, dtype=float).reshape(-1, 3)
        sched = np.zeros(self.n_frames) if p.schedule is None else np.asarray(p.schedule, dtype=float)
        axis = unit_axis(p.axis) if p.kind != "static" else np.asarray(p.axis, dtype=float)
        window = None if p.window is None else (int(p.window[0]), int(p.window[1]))
        return PartSpec(kind=p.kind, points=pts, axis=axis, pivot=np.asarray(p.pivot, dtype=float),
                        schedule=sched, window=window, name=p.name)

    @property
    def part_count(self):
        return len(self.parts)

    @property
    def point_count(self):
        return sum(len(p.points) for p in self.parts)

    def point_ranges(self):
        ranges, start = [], 0
        for p in self.parts:
            ranges.append((start, start + len(p.points)))
            start += len(p.points)
        return ranges

    def labels(self):
        return np.concatenate([np.full(len(p.points), k) for k, p in enumerate(self.parts)])

    def canonical_points(self):
        return np.concatenate([p.points for p in self.parts])

    def validate(self):
        T = self.n_frames
        if T < 3:
            raise InvalidInputError("rig needs at least 3 frames")
        if not self.parts or self.parts[0].kind != "static":
            raise InvalidInputError("part 0 must be the static base")
        windows = []
        for k, p in enumerate(self.parts):
            if p.kind not in JOINT_KINDS:
                raise InvalidInputError(f"part {k}: unknown joint kind {p.kind!r}")
            if k > 0 and p.kind == "static":
                raise InvalidInputError(f"part {k}: only part 0 may be static")
            if len(p.points) == 0:
                raise InvalidInputError(f"part {k} has no points")
            if p.schedule.shape != (T,) or not np.all(np.isfinite(p.schedule)):
                raise InvalidInputError(f"part {k}: schedule must have {T} finite values")
            if p.schedule[0] != 0.0:
                raise InvalidInputError(f"part {k}: schedule must start at 0 (canonical frame)")
            if p.kind == "static":
                if np.any(p.schedule != 0):
                    raise InvalidInputError("static part must have an all-zero schedule")
                continue
            if p.window is None:
                raise InvalidInputError(f"part {k}: dynamic parts need an activation window")
            a, b = p.window
            if not (0 <= a < b < T):
                raise InvalidInputError(f"part {k}: window {p.window} outside [0, {T - 1}]")
            s = p.schedule
            if np.any(s[:a + 1] != s[a]) or np.any(s[b:] != s[b]):
                raise InvalidInputError(f"part {k}: schedule changes outside its window")
            windows.append((a, b, k))
        windows.sort()
        for (a0, b0, k0), (a1, b1, k1) in zip(windows, windows[1:]):
            if a1 < b0:
                raise InvalidInputError(f"activation windows of parts {k0} and {k1} overlap")

    def forward(self):
        """Noiseless positions ``(N, T, 3)``."""
        out = []
        for p in self.parts:
            out.append(part_trajectories(p.kind, p.axis, p.pivot, p.schedule, p.points))
        return np.concatenate(out, axis=0)

    def bbox_diagonal(self):
        X = self.canonical_points()
        return float(np.linalg.norm(X.max(axis=0) - X.min(axis=0)))


def part_trajectories(kind, axis, pivot, schedule, points):
    """Apply one joint's per-frame transform to canonical points -> ``(M, T, 3)``."""
    points = np.asarray(points, dtype=float)
    T = len(schedule)
    if kind == "static":
        return np.repeat(points[:, None, :], T, axis=1)
    if kind == "prismatic":
        return points[:, None, :] + np.asarray(schedule)[None, :, None] * np.asarray(axis)[None, None, :]
    R = rodrigues_many(axis, schedule)
    v = points - pivot
    return np.einsum("tij,nj->nti", R, v) + pivot


def synthesize(rig, noise=None, seed=0):
    """Sample noisy tracks from ``rig``; returns ``(TrackSet, ground_truth_model)``.

    Noise, occlusion and confidence draws come from one generator seeded with
    ``seed``, so equal seeds give bit-identical output.
    """
    from .kinematics import ArticulatedModel, Joint, logits_from_labels

    noise = noise or NoiseSpec()
    rng = np.random.default_rng(seed)
    clean = rig.forward()
    N, T, _ = clean.shape
    X = clean + rng.normal(0.0, 1.0, size=clean.shape) * noise.position_sigma
    V = rng.random((N, T)) >= noise.occlusion_rate
    C = rng.uniform(noise.confidence_floor, 1.0, size=(N, T))
    X = np.where(V[..., None], X, np.nan)
    tracks = TrackSet(X, V, C)

    joints = [Joint(kind=p.kind, axis=p.axis if p.kind != "static" else None,
                    pivot=p.pivot, scalars=p.schedule) for p in rig.parts]
    truth = ArticulatedModel(parts=joints, canonical_points=rig.canonical_points(),
                             assignment_logits=logits_from_labels(rig.labels(), rig.part_count),
                             point_ranges=rig.point_ranges())
    return tracks, truth


def cabinet_rig(n_points=200, n_frames=60, seed=0, revolute_angle=np.pi / 2,
                prismatic_fraction=0.5, profile="linear"):
    """Three-part cabinet: static carcass, hinged door, sliding drawer.

    The door swings first, the drawer slides second, in disjoint windows that
    split the sequence in half. ``prismatic_fraction`` scales the drawer
    travel by the canonical bounding-box diagonal.
    """
    rng = np.random.default_rng(seed)
    n_door = n_points * 3 // 10
    n_drawer = n_points * 3 // 10
    n_base = n_points - n_door - n_drawer

    def box(lo, hi, n):
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        return lo + rng.random((n, 3)) * (hi - lo)

    base = box([0.0, 0.0, 0.0], [1.0, 0.6, 0.8], n_base)
    # Door: thin panel over the left half of the front face, hinged on its left edge.
    door = box([0.0, -0.04, 0.42], [0.5, -0.01, 0.8], n_door)
    # Drawer: right half, lower section, sliding out along -y.
    drawer = box([0.55, -0.02, 0.05], [0.95, 0.55, 0.38], n_drawer)
    parts_pts = [base, door, drawer]
    diag = float(np.linalg.norm(np.ptp(np.concatenate(parts_pts), axis=0)))

    half = (n_frames - 1) // 2
    w_door = (0, half)
    w_drawer = (half + 1, n_frames - 1)
    make = _PROFILES[profile]
    parts = [
        PartSpec(kind="static", points=base, name="base"),
        PartSpec(kind="revolute", points=door, axis=[0.0, 0.0, 1.0], pivot=[0.0, -0.04, 0.6],
                 schedule=make(n_frames, w_door, -revolute_angle), window=w_door, name="door"),
        PartSpec(kind="prismatic", points=drawer, axis=[0.0, -1.0, 0.0], pivot=[0.75, 0.0, 0.2],
                 schedule=make(n_frames, w_drawer, prismatic_fraction * diag), window=w_drawer,
                 name="drawer"),
    ]
    return RigSpec(parts, n_frames)


# ---------------------------------------------------------------------------
# Rig file (JSON)

_RIG_KEYS = {"format", "version", "n_frames", "point_seed", "parts"}
_PART_KEYS = {"name", "kind", "axis", "pivot", "points", "motion", "schedule", "window"}
_MOTION_KEYS = {"window", "amplitude", "profile"}
_BOX_KEYS = {"center", "size", "count"}


def _reject_unknown(d, allowed, where, path):
    if not isinstance(d, dict):
        raise ParseError(f"{where} must be an object", path)
    extra = set(d) - allowed
    if extra:
        raise ParseError(f"unknown key(s) {sorted(extra)} in {where}", path)


def rig_from_dict(doc, path=None):
    _reject_unknown(doc, _RIG_KEYS, "rig", path)
    if doc.get("format") != RIG_FORMAT or doc.get("version") != 1:
        raise ParseError(f"expected format {RIG_FORMAT!r} version 1", path)
    try:
        T = int(doc["n_frames"])
        raw_parts = doc["parts"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"missing or bad field: {exc}", path) from None
    rng = np.random.default_rng(int(doc.get("point_seed", 0)))
    parts = []
    for k, pd in enumerate(raw_parts):
        where = f"parts[{k}]"
        _reject_unknown(pd, _PART_KEYS, where, path)
        kind = pd.get("kind")
        pts = pd.get("points")
        if isinstance(pts, dict):
            _reject_unknown(pts, {"box"}, f"{where}.points", path)
            bx = pts["box"]
            _reject_unknown(bx, _BOX_KEYS, f"{where}.points.box", path)
            c, s = np.asarray(bx["center"], float), np.asarray(bx["size"], float)
            pts = c - s / 2 + rng.random((int(bx["count"]), 3)) * s
        pts = np.asarray(pts, dtype=float)
        window = pd.get("window")
        if "motion" in pd:
            if "schedule" in pd:
                raise ParseError(f"{where}: give either 'motion' or 'schedule', not both", path)
            m = pd["motion"]
            _reject_unknown(m, _MOTION_KEYS, f"{where}.motion", path)
            window = tuple(m["window"])
            profile = m.get("profile", "linear")
            if profile not in _PROFILES:
                raise ParseError(f"{where}: unknown profile {profile!r}", path)
            schedule = _PROFILES[profile](T, window, float(m["amplitude"]))
        else:
            schedule = pd.get("schedule")
        parts.append(PartSpec(kind=kind, points=pts, axis=pd.get("axis", [0.0, 0.0, 1.0]),
                              pivot=pd.get("pivot", [0.0, 0.0, 0.0]), schedule=schedule,
                              window=None if window is None else tuple(window),
                              name=pd.get("name", "")))
    try:
        return RigSpec(parts, T)
    except (InvalidInputError, ValueError, TypeError) as exc:
        raise ParseError(str(exc), path) from None


def rig_to_dict(rig):
    parts = []
    for p in rig.parts:
        d = {"name": p.name, "kind": p.kind, "points": p.points.tolist()}
        if p.kind != "static":
            d.update(axis=p.axis.tolist(), pivot=p.pivot.tolist(), schedule=p.schedule.tolist(),
                     window=list(p.window))
        parts.append(d)
    return {"format": RIG_FORMAT, "version": 1, "n_frames": rig.n_frames, "parts": parts}


def load_rig(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, exc.lineno) from None
    return rig_from_dict(doc, path)


def save_rig(rig, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rig_to_dict(rig), fh, indent=1)
