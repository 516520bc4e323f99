"""Stage 1: motion-prior initialization.

Points are grouped by *when* they move (time-prior segment clustering on a
confidence-weighted motion energy), then every group gets a per-frame SE(3)
basis from weighted Procrustes. A point's motion is a normalized blend of
these bases.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateGeometryError, InvalidInputError
from .geometry import RigidTransform, nearest_rotation, project_to_se3, weighted_procrustes

logger = logging.getLogger(__name__)

LOG_EPS = 1e-7
STATIC_PERCENTILE = 20.0
# Procrustes down-weighting for samples that were filled in by interpolation.
OCCLUDED_WEIGHT = 0.1


def weighted_speed(tracks):
    """Per-interval speed scaled by joint visibility and mean confidence.

    ``s[i, t] = |x[i, t+1] - x[i, t]| * v[i, t] v[i, t+1] (c[i, t] + c[i, t+1]) / 2``
    """
    X = tracks.positions
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("weighted_speed expects occlusion-interpolated tracks")
    V = tracks.visibility.astype(float)
    C = tracks.confidence
    step = np.linalg.norm(np.diff(X, axis=1), axis=2)
    w = V[:, 1:] * V[:, :-1] * 0.5 * (C[:, 1:] + C[:, :-1])
    return step * w


@dataclass(frozen=True)
class MotionEnergy:
    weighted_speeds: np.ndarray
    segment_energy: np.ndarray
    segment_boundaries: tuple  # (start, stop) interval indices, stop exclusive


def parse_horizon(horizon, n_frames):
    """Normalize a frame horizon to ``(first, last)`` inclusive frames.

    Accepts ``None`` (whole sequence), a pair, or an ``"a:b"`` string.
    """
    if horizon is None:
        return 0, n_frames - 1
    if isinstance(horizon, str):
        try:
            a, b = (int(s) for s in horizon.split(":"))
        except ValueError:
            raise InvalidInputError(f"horizon must look like 'a:b', got {horizon!r}") from None
    else:
        a, b = (int(v) for v in horizon)
    if not (0 <= a < b <= n_frames - 1):
        raise InvalidInputError(f"horizon {a}:{b} outside frames 0..{n_frames - 1}")
    return a, b


def motion_energy(speeds, n_parts, horizon=None):
    """Sum weighted speed within ``n_parts - 1`` near-equal temporal segments.

    ``horizon`` is an inclusive frame interval; its ``b - a`` intervals are
    split with the remainder going to the earliest segments.
    """
    speeds = np.asarray(speeds, dtype=float)
    n_segments = int(n_parts) - 1
    if n_segments < 1:
        raise InvalidInputError(f"need at least 2 parts, got {n_parts}")
    a, b = parse_horizon(horizon, speeds.shape[1] + 1)
    n_intervals = b - a
    if n_segments > n_intervals:
        raise InvalidInputError(f"{n_segments} segments do not fit in {n_intervals} intervals")
    base, extra = divmod(n_intervals, n_segments)
    bounds, start = [], a
    for s in range(n_segments):
        stop = start + base + (1 if s < extra else 0)
        bounds.append((start, stop))
        start = stop
    E = np.stack([speeds[:, lo:hi].sum(axis=1) for lo, hi in bounds], axis=1)
    return MotionEnergy(weighted_speeds=speeds, segment_energy=E, segment_boundaries=tuple(bounds))


def assign_parts_temporal(energy, n_parts):
    """Hard labels from peak-energy segment, plus per-slot distances.

    Returns ``labels`` (N,) and ``distances`` (N, K); soft coefficients are
    ``softmax(-distances)``. Label 0 (static) goes to points whose peak
    energy does not exceed the scene's 20th percentile of peak energies.
    """
    E = np.asarray(energy.segment_energy, dtype=float)
    if E.shape[1] != n_parts - 1:
        raise InvalidInputError(f"energy has {E.shape[1]} segments, expected {n_parts - 1}")
    e_max = E.max(axis=1)
    tau = float(np.percentile(e_max, STATIC_PERCENTILE))
    static = e_max <= tau
    labels = np.where(static, 0, np.argmax(E, axis=1) + 1)

    total = E.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        share = np.where(total > 0, E / np.where(total > 0, total, 1.0), 0.0)
        denom = e_max + tau
        static_share = np.where(denom > 0, tau / np.where(denom > 0, denom, 1.0), 1.0)
    d = np.empty((len(E), n_parts))
    d[:, 0] = -np.log(static_share + LOG_EPS)
    d[:, 1:] = -np.log(share + LOG_EPS)
    return labels.astype(int), d


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=float)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def spatial_median(points, n_iter=200, tol=1e-12):
    """Geometric median by Weiszfeld iteration."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    m = np.median(P, axis=0)
    for _ in range(n_iter):
        d = np.linalg.norm(P - m, axis=1)
        if np.any(d < 1e-15):
            # Iterate sits on a data point; stop there.
            break
        w = 1.0 / d
        m_new = (w @ P) / w.sum()
        if np.linalg.norm(m_new - m) <= tol * (1.0 + np.linalg.norm(m)):
            m = m_new
            break
        m = m_new
    return m


def procrustes_sample_weights(tracks):
    """Confidence, down-weighted where a sample was filled by interpolation."""
    return tracks.confidence * np.where(tracks.visibility, 1.0, OCCLUDED_WEIGHT)


@dataclass(frozen=True, eq=False)
class MotionBasisSet:
    """Per-frame SE(3) bases and per-point blend coefficients.

    ``rotations[b, t]`` / ``translations[b, t]`` map canonical-frame points of
    cluster ``b`` to frame ``t``. ``distances`` are the coefficient logits
    ``d`` with weights ``softmax(-d)``.
    """

    rotations: np.ndarray
    translations: np.ndarray
    distances: np.ndarray
    labels: np.ndarray
    centers: np.ndarray
    canonical_frame: int = 0
    notes: tuple = field(default=())

    @property
    def basis_count(self):
        return self.rotations.shape[0]

    @property
    def weights(self):
        return softmax(-self.distances, axis=1)

    def basis(self, b, t):
        return RigidTransform(self.rotations[b, t], self.translations[b, t])


def fit_motion_bases(tracks, labels, distances, canonical_frame=0):
    """One Procrustes basis per label class, from frame ``t0`` to every frame."""
    X = tracks.positions
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("fit_motion_bases expects occlusion-interpolated tracks")
    N, T, _ = X.shape
    labels = np.asarray(labels, dtype=int)
    distances = np.asarray(distances, dtype=float)
    B = distances.shape[1]
    t0 = int(canonical_frame)
    W = procrustes_sample_weights(tracks)
    Rs = np.broadcast_to(np.eye(3), (B, T, 3, 3)).copy()
    ts = np.zeros((B, T, 3))
    centers = np.zeros((B, 3))
    notes = []
    for b in range(B):
        idx = np.flatnonzero(labels == b)
        if len(idx) == 0:
            notes.append(f"basis {b}: no members, identity basis")
            centers[b] = np.nan
            continue
        centers[b] = spatial_median(X[idx, t0])
        src = X[idx, t0]
        for t in range(T):
            if t == t0:
                continue
            dst = X[idx, t]
            w = W[idx, t] * W[idx, t0]
            try:
                if len(idx) < 3:
                    raise DegenerateGeometryError("cluster has fewer than 3 points", rank=len(idx))
                T_bt = weighted_procrustes(src, dst, w)
                Rs[b, t], ts[b, t] = T_bt.rotation, T_bt.translation
            except DegenerateGeometryError as exc:
                wsum = w.sum()
                ww = w / wsum if wsum > 0 else np.full(len(idx), 1.0 / len(idx))
                ts[b, t] = ww @ dst - ww @ src
                msg = f"basis {b} frame {t}: {exc}; translation-only fallback"
                if not notes or not notes[-1].startswith(f"basis {b} "):
                    logger.warning(msg)
                notes.append(msg)
    return MotionBasisSet(rotations=Rs, translations=ts, distances=distances, labels=labels,
                          centers=centers, canonical_frame=t0, notes=tuple(notes))


def blend_transform(weights, rotations, translations):
    """Normalized blend of B bases at one frame.

    Rotation is the SO(3) projection of ``sum_b w_b R_b``; translation the
    plain weighted sum.
    """
    w = np.asarray(weights, dtype=float)
    M = np.tensordot(w, np.asarray(rotations, dtype=float), axes=1)
    t = np.tensordot(w, np.asarray(translations, dtype=float), axes=1)
    return project_to_se3(M, t)


def reconstruct_point(mu0, R0, blend):
    """Move a canonical point and orientation by ``blend``."""
    mu0 = np.asarray(mu0, dtype=float)
    return blend.rotation @ mu0 + blend.translation, blend.rotation @ np.asarray(R0, dtype=float)


def reconstruct_trajectories(basis_set, canonical_points):
    """Blend-reconstruct every point at every frame -> ``(N, T, 3)``."""
    W = basis_set.weights
    M = np.einsum("nb,btij->ntij", W, basis_set.rotations)
    t = np.einsum("nb,bti->nti", W, basis_set.translations)
    R = nearest_rotation(M)
    return np.einsum("ntij,nj->nti", R, canonical_points) + t


@dataclass(frozen=True, eq=False)
class Stage1Result:
    tracks: object
    energy: MotionEnergy
    labels: np.ndarray
    distances: np.ndarray
    bases: MotionBasisSet


def run_stage1(tracks, n_parts, horizon=None, canonical_frame=0):
    """Interpolated tracks -> energies -> labels -> motion bases."""
    speeds = weighted_speed(tracks)
    energy = motion_energy(speeds, n_parts, horizon)
    labels, d = assign_parts_temporal(energy, n_parts)
    bases = fit_motion_bases(tracks, labels, d, canonical_frame)
    return Stage1Result(tracks=tracks, energy=energy, labels=labels, distances=d, bases=bases)
