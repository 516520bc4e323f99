"""Rigid-body geometry in 3D: SE(3) values, Rodrigues rotations, weighted
Procrustes, projection onto SO(3) and PCA of point sets.

Everything here runs in float64 and is side-effect free.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateGeometryError, InvalidInputError

AXIS_EPS = 1e-7
ORTHO_TOL = 1e-9


def skew(v):
    """Cross-product matrix ``[v]x`` so that ``skew(v) @ u == cross(v, u)``."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def unit_axis(v, eps=AXIS_EPS):
    """Normalize a 3-vector to a unit axis.

    Divides by ``max(|v|, eps)``; the eps only guards against division by
    zero, so any non-degenerate input comes back with unit norm to rounding.
    """
    v = np.asarray(v, dtype=float).reshape(3)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"axis must be finite, got {v}")
    n = np.linalg.norm(v)
    if n < eps:
        raise InvalidInputError(f"axis norm {n:.3g} is below {eps:g}")
    return v / n


def _check_unit(axis, tol=ORTHO_TOL):
    a = np.asarray(axis, dtype=float).reshape(3)
    if not np.all(np.isfinite(a)) or abs(np.linalg.norm(a) - 1.0) > tol:
        raise InvalidInputError(f"axis {a} is not unit length")
    return a


@dataclass(frozen=True)
class RigidTransform:
    """An element of SE(3): ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidInputError("transform entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise InvalidInputError("rotation is not in SO(3)")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    def apply(self, points):
        """Transform a single point ``(3,)`` or a stack ``(..., 3)``."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def matrix(self):
        """4x4 homogeneous matrix."""
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def matrix34(self):
        return np.hstack([self.rotation, self.translation[:, None]])


def rodrigues(axis, angle):
    """Rotation by ``angle`` radians about the unit ``axis``.

    Closed form ``I + sin(angle) K + (1 - cos(angle)) K^2`` with ``K = [axis]x``.
    """
    a = _check_unit(axis)
    angle = float(angle)
    if not np.isfinite(angle):
        raise InvalidInputError(f"angle must be finite, got {angle}")
    K = skew(a)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rodrigues_many(axis, angles):
    """Vectorized :func:`rodrigues` over an array of angles -> ``(T, 3, 3)``.

    Does not re-validate the axis; callers pass a normalized one.
    """
    angles = np.asarray(angles, dtype=float)
    K = skew(axis)
    K2 = K @ K
    s = np.sin(angles)[:, None, None]
    c = np.cos(angles)[:, None, None]
    return np.eye(3)[None] + s * K[None] + (1.0 - c) * K2[None]


def revolute_transform(axis, pivot, angle):
    """Rotation about the line through ``pivot`` along ``axis``.

    The translation ``(I - R) pivot`` keeps every point of that line fixed.
    """
    R = rodrigues(axis, angle)
    c = np.asarray(pivot, dtype=float).reshape(3)
    return RigidTransform(R, c - R @ c)


def prismatic_transform(axis, displacement):
    """Pure translation by ``displacement`` along the unit ``axis``."""
    a = _check_unit(axis)
    d = float(displacement)
    if not np.isfinite(d):
        raise InvalidInputError(f"displacement must be finite, got {d}")
    return RigidTransform(np.eye(3), d * a)


def weighted_procrustes(src, dst, weights=None):
    """Least-squares rigid transform mapping ``src`` onto ``dst``.

    Minimizes ``sum_i w_i |R src_i + t - dst_i|^2`` in closed form via SVD of
    the weighted cross-covariance, flipping the weakest singular direction
    when the raw solution is a reflection.

    Raises
    ------
    DegenerateGeometryError
        Fewer than three positively weighted points, or the weighted point
        configuration is collinear (cross-covariance rank below 2).
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise InvalidInputError(f"src {src.shape} and dst {dst.shape} differ in shape")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if len(w) != len(src):
        raise InvalidInputError("weights length does not match point count")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidInputError("weights must be finite and non-negative")
    active = w > 0
    n_active = int(active.sum())
    if n_active < 3:
        raise DegenerateGeometryError("weighted Procrustes needs at least 3 weighted points",
                                      rank=min(n_active, 3))
    src, dst, w = src[active], dst[active], w[active]
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    xs = src - mu_s
    xd = dst - mu_d
    H = (xs * w[:, None]).T @ xd
    U, S, Vt = np.linalg.svd(H)
    scale = max(np.sqrt(w @ np.sum(xs * xs, axis=1)) * np.sqrt(w @ np.sum(xd * xd, axis=1)), 1e-300)
    rank = int(np.sum(S > 1e-12 * scale))
    if rank < 2:
        raise DegenerateGeometryError("points are collinear; rotation is underdetermined", rank=rank)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return RigidTransform(R, mu_d - R @ mu_s)


def nearest_rotation(M):
    """Closest rotation to ``M`` in Frobenius norm (``(..., 3, 3)`` stacks ok)."""
    M = np.asarray(M, dtype=float)
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    d = np.where(d == 0, 1.0, d)
    D = np.broadcast_to(np.eye(3), M.shape).copy()
    D[..., 2, 2] = d
    return U @ D @ Vt


def project_to_se3(blend_rotation, blend_translation):
    """Map a blended (non-orthogonal) rotation onto SO(3); translation passes through."""
    M = np.asarray(blend_rotation, dtype=float).reshape(3, 3)
    if not np.all(np.isfinite(M)):
        raise InvalidInputError("blended rotation must be finite")
    if np.max(np.abs(M)) == 0.0:
        raise DegenerateGeometryError("blended rotation is the zero matrix", rank=0)
    return RigidTransform(nearest_rotation(M), blend_translation)


@dataclass(frozen=True)
class PcaResult:
    """Principal axes of a 3D point set.

    ``eigenvectors[k]`` pairs with ``eigenvalues[k]``; values descend.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    centroid: np.ndarray


def pca(points):
    """PCA via eigen-decomposition of the (population) 3x3 covariance."""
    X = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(X) < 3:
        raise InvalidInputError(f"PCA needs at least 3 points, got {len(X)}")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("PCA input must be finite")
    centroid = X.mean(axis=0)
    Y = X - centroid
    cov = Y.T @ Y / len(X)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order].T
    # Deterministic sign: largest-magnitude component positive.
    for k in range(3):
        if vecs[k, np.argmax(np.abs(vecs[k]))] < 0:
            vecs[k] = -vecs[k]
    return PcaResult(eigenvalues=vals, eigenvectors=vecs, centroid=centroid)
