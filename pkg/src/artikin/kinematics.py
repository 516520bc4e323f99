"""Stage 2: explicit joint models and their refinement.

Each dynamic part is a revolute joint (axis, pivot, per-frame angle) or a
prismatic joint (axis, per-frame displacement). Points follow the part with
the highest assignment probability; assignment logits are trained through a
straight-through estimator that differentiates the soft mixture of part
transforms while the forward pass stays rigid.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import DivergenceError, InvalidInputError
from .geometry import RigidTransform, pca, prismatic_transform, revolute_transform, rodrigues_many
from .motion import softmax, spatial_median
from .tracks import JOINT_KINDS, interpolate_occlusions

logger = logging.getLogger(__name__)

LABEL_MARGIN = 10.0


@dataclass(frozen=True, eq=False)
class Joint:
    """One part's joint. ``scalars[t]`` is an angle (revolute) or a
    displacement (prismatic); static joints carry zeros."""

    kind: str
    axis: np.ndarray = None
    pivot: np.ndarray = None
    scalars: np.ndarray = None

    def __post_init__(self):
        if self.kind not in JOINT_KINDS:
            raise InvalidInputError(f"unknown joint kind {self.kind!r}")
        if self.scalars is None:
            raise InvalidInputError("joint needs a scalar sequence")
        q = np.array(self.scalars, dtype=float).reshape(-1)
        object.__setattr__(self, "scalars", q)
        pivot = np.zeros(3) if self.pivot is None else np.array(self.pivot, dtype=float).reshape(3)
        object.__setattr__(self, "pivot", pivot)
        if self.kind == "static":
            object.__setattr__(self, "axis", None)
            if np.any(q != 0):
                raise InvalidInputError("static joint scalars must be zero")
        else:
            a = np.array(self.axis, dtype=float).reshape(3)
            if abs(np.linalg.norm(a) - 1.0) > 1e-9:
                raise InvalidInputError(f"joint axis {a} is not unit length")
            object.__setattr__(self, "axis", a)

    @classmethod
    def static(cls, n_frames):
        return cls(kind="static", scalars=np.zeros(n_frames))

    @property
    def n_frames(self):
        return len(self.scalars)

    def transforms(self):
        """Per-frame ``(R, t)`` stacks of shape ``(T, 3, 3)`` and ``(T, 3)``."""
        T = self.n_frames
        if self.kind == "static":
            return np.broadcast_to(np.eye(3), (T, 3, 3)).copy(), np.zeros((T, 3))
        if self.kind == "prismatic":
            return np.broadcast_to(np.eye(3), (T, 3, 3)).copy(), self.scalars[:, None] * self.axis
        R = rodrigues_many(self.axis, self.scalars)
        return R, self.pivot - R @ self.pivot

    def transform_at(self, t):
        q = self.scalars[t]
        if self.kind == "static":
            return RigidTransform.identity()
        if self.kind == "prismatic":
            return prismatic_transform(self.axis, q)
        return revolute_transform(self.axis, self.pivot, q)


def logits_from_labels(labels, n_parts, margin=LABEL_MARGIN):
    """Logits putting ``margin`` on each point's label slot, 0 elsewhere."""
    labels = np.asarray(labels, dtype=int)
    z = np.zeros((len(labels), n_parts))
    z[np.arange(len(labels)), labels] = margin
    return z


@dataclass(frozen=True, eq=False)
class ArticulatedModel:
    """K jointed parts plus per-point canonical positions and assignment logits.

    Part 0 is the static base. Hard labels are ``argmax`` of the logits, ties
    going to the lower part index.
    """

    parts: list
    canonical_points: np.ndarray
    assignment_logits: np.ndarray
    temperature: float = 1.0
    canonical_frame: int = 0
    point_ranges: list = None
    notes: tuple = field(default=())

    def __post_init__(self):
        mu = np.array(self.canonical_points, dtype=float).reshape(-1, 3)
        z = np.array(self.assignment_logits, dtype=float)
        object.__setattr__(self, "canonical_points", mu)
        object.__setattr__(self, "assignment_logits", z)
        object.__setattr__(self, "parts", list(self.parts))
        if z.shape != (len(mu), len(self.parts)):
            raise InvalidInputError(f"logits shape {z.shape} != ({len(mu)}, {len(self.parts)})")
        if not self.parts or self.parts[0].kind != "static":
            raise InvalidInputError("part 0 must be static")
        if len({p.n_frames for p in self.parts}) != 1:
            raise InvalidInputError("all joints must share one frame count")
        if not self.temperature > 0:
            raise InvalidInputError("temperature must be positive")
        if not 0 <= self.canonical_frame < self.n_frames:
            raise InvalidInputError(f"canonical_frame {self.canonical_frame} out of range")
        for k, p in enumerate(self.parts):
            if abs(p.scalars[self.canonical_frame]) > 1e-12:
                raise InvalidInputError(f"part {k}: joint scalar at the canonical frame must be 0")

    @property
    def n_parts(self):
        return len(self.parts)

    @property
    def n_points(self):
        return len(self.canonical_points)

    @property
    def n_frames(self):
        return self.parts[0].n_frames

    def probabilities(self):
        return softmax(self.assignment_logits / self.temperature, axis=1)

    def labels(self):
        return np.argmax(self.assignment_logits, axis=1)

    @property
    def effective_parts(self):
        """Static base plus every non-static part that owns at least one point."""
        lab = self.labels()
        return 1 + sum(1 for k, p in enumerate(self.parts) if k > 0 and p.kind != "static"
                       and np.any(lab == k))

    def part_transforms(self):
        Rs, ts = zip(*(p.transforms() for p in self.parts))
        return np.stack(Rs), np.stack(ts)

    def forward(self, frames=None):
        """Predicted positions ``(N, T, 3)`` (or ``(N, 3)`` for an int frame)."""
        Rs, ts = self.part_transforms()
        lab = self.labels()
        if frames is None:
            frames = slice(None)
        R = Rs[lab][:, frames]
        t = ts[lab][:, frames]
        if np.ndim(frames) == 0 and not isinstance(frames, slice):
            return np.einsum("nij,nj->ni", R, self.canonical_points) + t
        return np.einsum("ntij,nj->nti", R, self.canonical_points) + t

    def subsample_frames(self, step):
        sl = slice(None, None, int(step))
        parts = [replace(p, scalars=p.scalars[sl]) for p in self.parts]
        return replace(self, parts=parts)

    def permuted(self, order):
        """Reorder dynamic parts; ``order`` is a permutation of ``1..K-1``."""
        full = [0] + list(order)
        return replace(self, parts=[self.parts[k] for k in full],
                       assignment_logits=self.assignment_logits[:, full],
                       point_ranges=None if self.point_ranges is None
                       else [self.point_ranges[k] for k in full])


def forward_model(model, t):
    """Positions of all points at frame ``t`` under hard assignment."""
    return model.forward(int(t))


# ---------------------------------------------------------------------------
# Robust initialization


def robust_center_trajectory(positions, member_indices, keep_fraction=0.8):
    """Trimmed-mean center of a point group at every frame.

    Keeps the ``keep_fraction`` of members nearest the frame's spatial
    median. Groups smaller than 5 fall back to the plain mean.
    """
    X = getattr(positions, "positions", positions)
    X = np.asarray(X, dtype=float)[np.asarray(member_indices)]
    if not (0 < keep_fraction <= 1):
        raise InvalidInputError("keep_fraction must lie in (0, 1]")
    n = len(X)
    if n == 0:
        raise InvalidInputError("no members")
    if n < 5:
        logger.warning("robust center: %d members < 5, using plain mean", n)
        return X.mean(axis=0)
    n_keep = max(1, int(np.ceil(keep_fraction * n - 1e-9)))
    out = np.empty((X.shape[1], 3))
    for t in range(X.shape[1]):
        P = X[:, t]
        med = spatial_median(P)
        d = np.linalg.norm(P - med, axis=1)
        keep = np.argsort(d, kind="stable")[:n_keep]
        out[t] = P[keep].mean(axis=0)
    return out


@dataclass(frozen=True)
class JointThresholds:
    linear_ratio: float = 2e-3
    static_displacement: float = 1e-9
    scale: float = 1.0


def _first_nonzero_sign(q):
    tol = 1e-9 * max(np.max(np.abs(q)), 1e-300)
    nz = np.flatnonzero(np.abs(q) > tol)
    return 1.0 if len(nz) == 0 or q[nz[0]] > 0 else -1.0


def fit_circle_2d(xy):
    """Algebraic (Kasa) circle fit -> ``(center, radius)``."""
    x, y = xy[:, 0], xy[:, 1]
    A = np.column_stack([x, y, np.ones_like(x)])
    b = -(x * x + y * y)
    (D, E, F), *_ = np.linalg.lstsq(A, b, rcond=None)
    center = np.array([-D / 2.0, -E / 2.0])
    return center, float(np.sqrt(max(center @ center - F, 0.0)))


def classify_joint(center_trajectory, thresholds=None, canonical_frame=0):
    """Pick a joint kind and initial parameters from a center trajectory.

    A near-1D PCA spectrum (``l2 / l1 < linear_ratio``) means prismatic; anything
    flatter-than-a-line is treated as a planar arc (revolute) whose axis is the
    plane normal and whose pivot comes from a circle fit in that plane.
    """
    th = thresholds or JointThresholds()
    c = np.asarray(center_trajectory, dtype=float)
    t0 = int(canonical_frame)
    T = len(c)
    disp = np.linalg.norm(c - c[t0], axis=1)
    if disp.max() < th.static_displacement * th.scale:
        return Joint.static(T)
    res = pca(c)
    l1, l2, _ = res.eigenvalues
    if l2 / l1 < th.linear_ratio:
        a = res.eigenvectors[0]
        q = (c - c[t0]) @ a
        s = _first_nonzero_sign(q)
        return Joint(kind="prismatic", axis=s * a, pivot=c.mean(axis=0), scalars=s * q)
    e1, e2, a = res.eigenvectors
    Y = c - res.centroid
    center2, _ = fit_circle_2d(np.column_stack([Y @ e1, Y @ e2]))
    pivot = res.centroid + center2[0] * e1 + center2[1] * e2
    u = c - pivot
    u = u - np.outer(u @ a, a)
    ref = u[t0]
    ang = np.arctan2(np.cross(ref, u) @ a, u @ ref)
    ang = np.unwrap(ang)
    ang = ang - ang[t0]
    s = _first_nonzero_sign(ang)
    return Joint(kind="revolute", axis=s * a, pivot=pivot, scalars=s * ang)


def consistent_logits(labels, distances):
    """Logits ``-d`` with slots swapped where needed so ``argmax == labels``."""
    z = -np.asarray(distances, dtype=float).copy()
    labels = np.asarray(labels, dtype=int)
    rows = np.arange(len(z))
    top = np.argmax(z, axis=1)
    bad = top != labels
    if np.any(bad):
        r = rows[bad]
        zl, zt = z[r, labels[bad]].copy(), z[r, top[bad]].copy()
        z[r, labels[bad]] = zt
        z[r, top[bad]] = zl
        # Ties after the swap would fall to the lower index.
        tie = (z[r, labels[bad]] == z[r, top[bad]]) & (top[bad] < labels[bad])
        z[r[tie], labels[bad][tie]] += 1e-9
    return z


@dataclass(frozen=True)
class RefineConfig:
    """Refinement hyperparameters.

    Learning rates follow the per-group defaults: logits 5e-3, axis and pivot
    1e-4, joint scalars 5e-3. Each follows ``schedule`` down to
    ``lr_final_fraction`` of its start value over ``n_iter`` steps. A group
    whose largest gradient entry is at most ``grad_tol`` (normalized units)
    skips that step.
    """

    lr_w: float = 5e-3
    lr_ac: float = 1e-4
    lr_q: float = 5e-3
    lambda_acc: float = 0.1
    lambda_z: float = 0.01
    n_iter: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_final_fraction: float = 0.3
    schedule: str = "exponential"
    keep_fraction: float = 0.8
    linear_ratio: float = 2e-3
    static_displacement: float = 1e-9
    temperature: float = 1.0
    divergence_factor: float = 1e3
    grad_tol: float = 1e-12
    workers: int = 1

    def __post_init__(self):
        positive = ("lr_w", "lr_ac", "lr_q", "beta1", "beta2", "adam_eps", "temperature",
                    "lr_final_fraction",
                    "divergence_factor", "linear_ratio", "static_displacement")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.lambda_acc < 0 or self.lambda_z < 0 or self.n_iter < 0 or self.grad_tol < 0:
            raise InvalidInputError("loss weights and n_iter must be non-negative")
        if not (0 < self.keep_fraction <= 1):
            raise InvalidInputError("keep_fraction must lie in (0, 1]")
        if self.schedule not in ("exponential", "constant"):
            raise InvalidInputError(f"unknown schedule {self.schedule!r}")
        if self.workers < 1:
            raise InvalidInputError("workers must be >= 1")


def initialize(tracks, labels, distances, config=None, canonical_frame=0):
    """Build an :class:`ArticulatedModel` from Stage 1 labels and distances."""
    cfg = config or RefineConfig()
    tracks = interpolate_occlusions(tracks)
    X = tracks.positions
    t0 = int(canonical_frame)
    labels = np.asarray(labels, dtype=int)
    K = np.asarray(distances).shape[1]
    mu = X[:, t0]
    scale = float(np.linalg.norm(np.ptp(mu, axis=0)))
    th = JointThresholds(cfg.linear_ratio, cfg.static_displacement, scale)
    parts = [Joint.static(tracks.frame_count)]
    notes = []
    for k in range(1, K):
        members = np.flatnonzero(labels == k)
        if len(members) == 0:
            notes.append(f"part {k}: no members, collapsed to static")
            parts.append(Joint.static(tracks.frame_count))
            continue
        center = robust_center_trajectory(X, members, cfg.keep_fraction)
        joint = classify_joint(center, th, t0)
        if joint.kind == "static":
            msg = f"part {k}: displacement below threshold, classified static"
            logger.warning(msg)
            notes.append(msg)
        parts.append(joint)
    z = consistent_logits(labels, distances)
    return ArticulatedModel(parts=parts, canonical_points=mu, assignment_logits=z,
                            temperature=cfg.temperature, canonical_frame=t0, notes=tuple(notes))


# ---------------------------------------------------------------------------
# Losses


def _homog(mu):
    return np.hstack([mu, np.ones((len(mu), 1))])


def fitting_loss(model, tracks, t):
    """Weighted squared track residual at frame ``t``.

    Returns the loss and ``dL/dT_i`` for every point as a ``(N, 3, 4)`` stack
    (residual gradient times the homogeneous canonical point).
    """
    t = int(t)
    pred = model.forward(t)
    x = np.nan_to_num(tracks.positions[:, t])
    w = tracks.visibility[:, t] * tracks.confidence[:, t]
    r = pred - x
    loss = float(np.sum(w * np.sum(r * r, axis=1)))
    g = 2.0 * w[:, None] * r
    return loss, g[:, :, None] * _homog(model.canonical_points)[:, None, :]


def ste_gradient(dL_dT, part_transforms, probabilities, temperature=1.0):
    """Straight-through gradient of the loss w.r.t. one point's logits.

    ``dL/dz_k = p_k sum_j <dL/dT, T_j> (delta_jk - p_j) / temperature``, the
    inner product being Frobenius over 3x4 transform matrices.
    """
    G = np.asarray(dL_dT, dtype=float).reshape(3, 4)
    Ts = np.stack([T.matrix34() if isinstance(T, RigidTransform) else np.asarray(T, float)[:3, :4]
                   for T in part_transforms])
    p = np.asarray(probabilities, dtype=float)
    inner = np.einsum("ij,kij->k", G, Ts)
    return p * (inner - p @ inner) / temperature


def acceleration_loss(model):
    """Sum of squared second differences of every dynamic joint's scalars.

    Returns ``(loss, grad)`` with ``grad`` shaped ``(K, T)``; static rows are 0.
    """
    Q = np.stack([p.scalars for p in model.parts])
    dyn = np.array([p.kind != "static" for p in model.parts])
    loss, grad = _acceleration(Q[dyn])
    full = np.zeros_like(Q)
    full[dyn] = grad
    return loss, full


def _acceleration(Q):
    D2 = Q[:, 2:] - 2.0 * Q[:, 1:-1] + Q[:, :-2]
    g2 = 2.0 * D2
    grad = np.zeros_like(Q)
    grad[:, 2:] += g2
    grad[:, 1:-1] -= 2.0 * g2
    grad[:, :-2] += g2
    return float(np.sum(D2 * D2)), grad


def check_view_axes(view_axes, n_frames):
    U = np.asarray(view_axes, dtype=float)
    if U.shape != (n_frames, 3):
        raise InvalidInputError(f"view axes must be ({n_frames}, 3), got {U.shape}")
    if not np.allclose(np.linalg.norm(U, axis=1), 1.0, atol=1e-9, rtol=0):
        raise InvalidInputError("view axes must be unit vectors")
    return U


def _depth_term(P, U, omega):
    D = P[:, 1:] - P[:, :-1]
    s = np.sum(D * U[None, 1:], axis=2)
    loss = float(np.sum(omega[:, None] * s * s))
    gs = 2.0 * omega[:, None] * s
    gP = np.zeros_like(P)
    gP[:, 1:] += gs[..., None] * U[None, 1:]
    gP[:, :-1] -= gs[..., None] * U[None, 1:]
    return loss, gP


def depth_stability_loss(model, tracks, view_axes, omega):
    """Weighted squared frame-to-frame displacement along each frame's view axis.

    Returns ``(loss, dL/dpositions)`` with the gradient shaped ``(N, T, 3)``.
    """
    U = check_view_axes(view_axes, model.n_frames)
    if tracks is not None and tracks.frame_count != model.n_frames:
        raise InvalidInputError("tracks and model disagree on frame count")
    return _depth_term(model.forward(), U, np.asarray(omega, dtype=float))


# ---------------------------------------------------------------------------
# Refinement


def _lr_scale(cfg, it):
    """Learning-rate multiplier at iteration ``it``: 1 at the start, ``lr_final_fraction`` at the end."""
    f = cfg.lr_final_fraction
    x = it / max(cfg.n_iter - 1, 1)
    if cfg.schedule == "constant":
        return 1.0
    return f ** x


class _Adam:
    def __init__(self, shape, lr, b1, b2, eps, gtol=0.0):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr, self.b1, self.b2, self.eps, self.gtol = lr, b1, b2, eps, gtol
        self.k = 0

    def step(self, x, g, scale=1.0):
        # Below gtol the gradient is round-off; for |g| << eps Adam acts like
        # plain descent with step lr / eps, which is unstable at an optimum.
        if not np.max(np.abs(g), initial=0.0) > self.gtol:
            return x
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.k)
        vhat = self.v / (1 - self.b2 ** self.k)
        return x - scale * self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self):
        return self.m, self.v, self.k

    def restore(self, state):
        self.m, self.v, self.k = state

    def restore_rows(self, rows, state):
        self.m = self.m.copy()
        self.v = self.v.copy()
        self.m[rows] = state[0][rows]
        self.v[rows] = state[1][rows]


class _Problem:
    """Flat parameter layout and the joint objective for :func:`refine`.

    Lengths are divided by the canonical bounding-box diagonal ``scale``, so
    learning rates and loss weights mean the same thing at any scene size.
    """

    def __init__(self, model, tracks, config, view_axes=None, omega=None):
        self.cfg = config
        self.kinds = [p.kind for p in model.parts]
        self.K = len(self.kinds)
        self.T = model.n_frames
        self.t0 = model.canonical_frame
        mu = model.canonical_points
        diag = float(np.linalg.norm(np.ptp(mu, axis=0)))
        self.scale = diag if diag > 0 else 1.0
        self.mu = mu / self.scale
        self.X = np.nan_to_num(tracks.positions) / self.scale
        self.W = tracks.visibility * tracks.confidence
        self.tau = model.temperature
        self.U = None if view_axes is None else check_view_axes(view_axes, self.T)
        self.omega = (softmax(model.assignment_logits / self.tau, axis=1)[:, 0]
                      if omega is None else np.asarray(omega, dtype=float))
        self.workers = config.workers
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()

    def _map_frames(self, fn):
        """Run ``fn(frame_slice)`` over frame chunks; results land in frame order."""
        if self._pool is None:
            return [fn(slice(0, self.T))]
        edges = np.linspace(0, self.T, self.workers + 1).astype(int)
        chunks = [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]
        return list(self._pool.map(fn, chunks))

    def pack(self, model):
        K, T = model.n_parts, model.n_frames
        A = np.zeros((K, 3))
        C = np.zeros((K, 3))
        Q = np.zeros((K, T))
        for k, p in enumerate(model.parts):
            if p.kind != "static":
                A[k] = p.axis
                C[k] = p.pivot / self.scale
                Q[k] = p.scalars / self.scale if p.kind == "prismatic" else p.scalars
        return model.assignment_logits.copy(), A, C, Q

    def transforms(self, A, C, Q):
        R = np.broadcast_to(np.eye(3), (self.K, self.T, 3, 3)).copy()
        t = np.zeros((self.K, self.T, 3))
        axes = np.zeros((self.K, 3))
        for k, kind in enumerate(self.kinds):
            if kind == "static":
                continue
            a = A[k] / np.linalg.norm(A[k])
            axes[k] = a
            if kind == "prismatic":
                t[k] = Q[k][:, None] * a
            else:
                R[k] = rodrigues_many(a, Q[k])
                t[k] = C[k] - R[k] @ C[k]
        return R, t, axes

    def poses(self, A, C, Q):
        # Cached on array identity: refine re-evaluates the same joints with
        # new logits, and the caller never mutates arrays it passed in.
        cache = self.__dict__.setdefault("_pose_cache", [])
        for key, val in cache:
            if key[0] is A and key[1] is C and key[2] is Q:
                return val
        R, tr, axes = self.transforms(A, C, Q)
        mu = self.mu

        def part_poses(sl):
            # Elementwise so the result is bitwise independent of chunking.
            Rs = R[:, sl]
            return (Rs[None, ..., 0] * mu[:, 0, None, None, None]
                    + Rs[None, ..., 1] * mu[:, 1, None, None, None]
                    + Rs[None, ..., 2] * mu[:, 2, None, None, None]) + tr[None, :, sl]

        Y = np.concatenate(self._map_frames(part_poses), axis=2)  # (N, K, T, 3)
        # Two entries: the accepted joints and the current trial.
        cache[:] = cache[-1:] + [((A, C, Q), (R, tr, axes, Y))]
        return R, tr, axes, Y

    def evaluate(self, Z, A, C, Q, want_grad=True):
        cfg = self.cfg
        R, tr, axes, Y = self.poses(A, C, Q)
        lab = np.argmax(Z, axis=1)
        mu = self.mu
        P = Y[np.arange(len(mu)), lab]
        r = P - self.X
        loss_fit = float(np.sum(self.W * np.sum(r * r, axis=2)))
        gP = 2.0 * self.W[..., None] * r
        loss_z = 0.0
        if self.U is not None and cfg.lambda_z > 0:
            loss_z, gz = _depth_term(P, self.U, self.omega)
            gP = gP + cfg.lambda_z * gz
        dyn = np.array([k != "static" for k in self.kinds])
        loss_acc, gQ_acc = _acceleration(Q[dyn]) if dyn.any() else (0.0, None)
        total = loss_fit + cfg.lambda_z * loss_z + cfg.lambda_acc * loss_acc
        parts = {"fit": loss_fit, "z": loss_z, "acc": loss_acc, "total": total}
        if not want_grad:
            return parts, None

        gA = np.zeros_like(A)
        gC = np.zeros_like(C)
        gQ = np.zeros_like(Q)
        for k, kind in enumerate(self.kinds):
            if kind == "static":
                continue
            idx = lab == k
            if not np.any(idx):
                continue
            g = gP[idx]
            a = axes[k]
            G_t = g.sum(axis=0)
            if kind == "prismatic":
                gQ[k] = G_t @ a
                g_axis = Q[k] @ G_t
            else:
                th = Q[k]
                w = P[idx] - C[k]
                v = mu[idx] - C[k]
                gQ[k] = np.sum(g * np.cross(a, w), axis=(0, 2))
                gC[k] = G_t.sum(axis=0) - np.einsum("tji,tj->i", R[k], G_t)
                s = np.sin(th)[None, :, None]
                omc = (1.0 - np.cos(th))[None, :, None]
                vg = np.cross(v[:, None, :], g)
                ag = (g @ a)[..., None]
                av = (v @ a)[:, None, None]
                g_axis = np.sum(s * vg + omc * (ag * v[:, None, :] + av * g), axis=(0, 1))
            n = np.linalg.norm(A[k])
            gA[k] = (g_axis - a * (a @ g_axis)) / n
        if dyn.any():
            gQ[dyn] += cfg.lambda_acc * gQ_acc
        gQ[:, self.t0] = 0.0

        # Straight-through logits gradient: dL/dT_i is taken at the soft
        # mixture sum_j p_ij T_j, so sum_t <dL/dT_i, T_j> reduces to
        # sum_t g_soft_it . (T_j(t) mu_i).
        p = softmax(Z / self.tau, axis=1)
        P_soft = np.sum(p[:, :, None, None] * Y, axis=1)
        g_soft = 2.0 * self.W[..., None] * (P_soft - self.X)
        if self.U is not None and cfg.lambda_z > 0:
            g_soft = g_soft + cfg.lambda_z * _depth_term(P_soft, self.U, self.omega)[1]
        M = np.sum(g_soft[:, None] * Y, axis=(2, 3))
        gZ = p * (M - np.sum(p * M, axis=1, keepdims=True)) / self.tau
        return parts, (gZ, gA, gC, gQ)

    def unpack(self, model, Z, A, C, Q):
        parts = []
        for k, p in enumerate(model.parts):
            if p.kind == "static":
                parts.append(p)
                continue
            a = A[k] / np.linalg.norm(A[k])
            if p.kind == "revolute":
                pivot, q = C[k] * self.scale, Q[k]
            else:
                pivot, q = p.pivot, Q[k] * self.scale
            parts.append(Joint(kind=p.kind, axis=a, pivot=pivot, scalars=q))
        return replace(model, parts=parts, assignment_logits=Z)


def refine(model, tracks, config=None, view_axes=None, omega=None, history=None):
    """Jointly optimize logits, axes, pivots and joint scalars with Adam.

    The data term is the weighted squared distance between predicted and
    observed tracks; acceleration and (when ``view_axes`` is given)
    depth-stability regularizers are added with their configured weights.
    Joint kinds, canonical points, prismatic pivots and ``q[t0]`` stay fixed.

    Internally all lengths are divided by the canonical bounding-box
    diagonal, which keeps the optimizer scale-equivariant.

    The loss sees the logits only through their argmax, so a logit step
    that relabels nothing is always kept. A trial that raises the total loss
    is resolved in order: keep the new logits with the old joints, else keep
    the new joints with the relabeled rows held back, else keep neither.
    Relabelings that raise the loss at the old joints halve those rows' logit
    steps from then on. A rejected joint step rewinds the joint moments,
    restarts their momentum and shortens the next step: the joint scalars
    first and all joint groups after a second rejection in a row, growing
    back by 1.25x per accepted step. The accepted loss is therefore
    non-increasing. Divergence is judged on trial losses.

    Parameters
    ----------
    history : list, optional
        If given, the accepted loss breakdown (in those normalized units) is
        appended at the start and after every iteration.
    """
    cfg = config or RefineConfig()
    tracks = interpolate_occlusions(tracks)
    if tracks.frame_count != model.n_frames or tracks.point_count != model.n_points:
        raise InvalidInputError("tracks and model disagree on shape")
    prob = _Problem(model, tracks, cfg, view_axes, omega)
    Z, A, C, Q = prob.pack(model)
    opts = [_Adam(x.shape, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.grad_tol)
            for x, lr in ((Z, cfg.lr_w), (A, cfg.lr_ac), (C, cfg.lr_ac), (Q, cfg.lr_q))]
    dyn = np.array([k != "static" for k in prob.kinds])
    rev = np.array([k == "revolute" for k in prob.kinds])
    def step(params, grads, scale, zrow):
        Z, A, C, Q = params
        gZ, gA, gC, gQ = grads
        Z = opts[0].step(Z, gZ, scale[0] * zrow[:, None])
        A = np.where(dyn[:, None], opts[1].step(A, gA, scale[1]), A)
        A[dyn] /= np.linalg.norm(A[dyn], axis=1, keepdims=True)
        C = np.where(rev[:, None], opts[2].step(C, gC, scale[2]), C)
        Q = np.where(dyn[:, None], opts[3].step(Q, gQ, scale[3]), Q)
        Q[:, prob.t0] = 0.0
        return Z, A, C, Q

    def trial_loss(trial, it):
        losses, g = prob.evaluate(*trial)
        if not np.isfinite(losses["total"]) or \
                losses["total"] > cfg.divergence_factor * max(initial, floor):
            raise DivergenceError(
                f"loss {losses['total']:.4g} at iteration {it} exceeds "
                f"{cfg.divergence_factor:g} x initial {initial:.4g}")
        return losses, g

    try:
        params = (Z, A, C, Q)
        best, grads = prob.evaluate(*params)
        initial = best["total"]
        # Floor the reference so a start at an exact optimum (loss ~ 0) does
        # not trip the guard on round-off; 1e-6 is a squared residual of
        # 1e-3 scene diagonals per unit weight.
        floor = 1e-6 * max(float(np.sum(prob.W)), 1.0)
        if history is not None:
            history.append(best)
        saved = [o.state() for o in opts]
        # Step factors for the joint groups after rejected trials. The joint
        # scalars are pinned down frame by frame and settle first, so their
        # oscillation is the usual cause of an uphill step; they back off
        # alone first and every group backs off after a second rejection in
        # a row.
        backoff = np.ones(4)
        zrow = np.ones(len(Z))
        streak = 0
        for it in range(cfg.n_iter):
            trial = step(params, grads, _lr_scale(cfg, it) * backoff, zrow)
            losses, trial_grads = trial_loss(trial, it)
            joints_ok = losses["total"] <= best["total"]
            if not joints_ok:
                flipped = np.flatnonzero(np.argmax(trial[0], 1) != np.argmax(params[0], 1))
                # With the old joints and no relabeling the loss is exactly
                # the accepted one, so the last candidate always passes.
                held = trial[0].copy()
                held[flipped] = params[0][flipped]
                cands = [(trial[0],) + params[1:]]
                if flipped.size:
                    cands += [(held,) + trial[1:], (held,) + params[1:]]
                for n, cand in enumerate(cands):
                    losses, trial_grads = trial_loss(cand, it)
                    if losses["total"] <= best["total"]:
                        break
                trial = cand
                joints_ok = n == 1
                if n > 0:
                    # Relabeling at the old joints went uphill.
                    zrow[flipped] *= 0.5
                    opts[0].restore_rows(flipped, saved[0])
            params, grads, best = trial, trial_grads, losses
            if joints_ok:
                backoff = np.minimum(1.0, 1.25 * backoff)
                streak = 0
            else:
                # Rewind the joints and drop their momentum (it may point
                # uphill, and then no step length helps).
                for o, st in zip(opts[1:], saved[1:]):
                    o.restore(st)
                    o.m = np.zeros_like(o.m)
                streak += 1
                if streak == 1:
                    backoff[3] *= 0.5
                else:
                    backoff[1:] *= 0.5
                backoff = np.maximum(backoff, 2.0 ** -40)
            saved = [o.state() for o in opts]
            if history is not None:
                history.append(best)
        Z, A, C, Q = params
    finally:
        prob.close()
    return prob.unpack(model, Z, A, C, Q)


def model_objective(model, tracks, config=None, view_axes=None, omega=None):
    """Loss breakdown and gradients of :func:`refine`'s objective at ``model``.

    Losses are in scene-normalized units (see :func:`refine`). Gradients are
    returned as ``(dZ, dA, dC, dQ)`` over the stacked, normalized
    parameters: logits, unnormalized axes, pivots and joint scalars.
    """
    cfg = config or RefineConfig()
    prob = _Problem(model, interpolate_occlusions(tracks), cfg, view_axes, omega)
    try:
        return prob.evaluate(*prob.pack(model))
    finally:
        prob.close()
