"""scikit-learn style front end for the two-stage fit."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .exceptions import InvalidInputError
from .kinematics import RefineConfig, initialize, refine
from .metrics import epe
from .motion import run_stage1
from .tracks import TrackSet, interpolate_occlusions

_DEFAULTS = RefineConfig()


def check_tracks(X, visibility=None, confidence=None):
    """Coerce ``X`` to a :class:`TrackSet`.

    ``X`` may already be a TrackSet (extra arguments must then be None) or an
    ``(N, T, 3)`` array whose non-finite rows mark occluded samples.
    """
    if isinstance(X, TrackSet):
        if visibility is not None or confidence is not None:
            raise InvalidInputError("pass visibility/confidence only with array input")
        return X
    P = np.asarray(X, dtype=float)
    if P.ndim != 3 or P.shape[2] != 3:
        raise InvalidInputError(f"tracks must have shape (N, T, 3), got {P.shape}")
    finite = np.all(np.isfinite(P), axis=2)
    V = finite if visibility is None else np.asarray(visibility, dtype=bool)
    if V.shape != P.shape[:2]:
        raise InvalidInputError(f"visibility shape {V.shape} != {P.shape[:2]}")
    if np.any(V & ~finite):
        raise InvalidInputError("visible samples must be finite")
    C = np.ones(P.shape[:2]) if confidence is None else np.asarray(confidence, dtype=float)
    return TrackSet(np.where(V[..., None], P, np.nan), V, C)


class ArticulationEstimator(BaseEstimator):
    """Recover an articulated model (static base plus joints) from 3D tracks.

    ``fit`` runs motion-prior initialization, joint classification and, unless
    ``refine=False``, gradient refinement of the joint parameters and part
    assignments.

    Parameters
    ----------
    n_parts : int
        Number of parts including the static base.
    horizon : str or pair, optional
        Inclusive frame range ``"a:b"`` used to segment motion in time.
    refine : bool
        Skip the refinement stage when False (initialization only).
    n_iter, lr_w, lr_ac, lr_q, lambda_acc, lambda_z, keep_fraction, workers
        Forwarded to :class:`RefineConfig`.
    view_axes : array (T, 3), optional
        Per-frame unit view directions; enables the depth-stability term.

    Attributes
    ----------
    model_ : ArticulatedModel
    initial_model_ : ArticulatedModel
    stage1_ : Stage1Result
    labels_ : ndarray (N,)
    history_ : list of dict
        Per-iteration loss breakdown of the refinement.
    """

    def __init__(self, n_parts=3, horizon=None, canonical_frame=0, refine=True,
                 n_iter=_DEFAULTS.n_iter, lr_w=_DEFAULTS.lr_w, lr_ac=_DEFAULTS.lr_ac,
                 lr_q=_DEFAULTS.lr_q, lambda_acc=_DEFAULTS.lambda_acc,
                 lambda_z=_DEFAULTS.lambda_z, keep_fraction=_DEFAULTS.keep_fraction,
                 workers=1, view_axes=None):
        self.n_parts = n_parts
        self.horizon = horizon
        self.canonical_frame = canonical_frame
        self.refine = refine
        self.n_iter = n_iter
        self.lr_w = lr_w
        self.lr_ac = lr_ac
        self.lr_q = lr_q
        self.lambda_acc = lambda_acc
        self.lambda_z = lambda_z
        self.keep_fraction = keep_fraction
        self.workers = workers
        self.view_axes = view_axes

    def _config(self):
        return RefineConfig(lr_w=self.lr_w, lr_ac=self.lr_ac, lr_q=self.lr_q,
                            lambda_acc=self.lambda_acc, lambda_z=self.lambda_z,
                            n_iter=int(self.n_iter), keep_fraction=self.keep_fraction,
                            workers=int(self.workers))

    def fit(self, X, y=None, visibility=None, confidence=None):
        tracks = interpolate_occlusions(check_tracks(X, visibility, confidence))
        if int(self.n_parts) < 2:
            raise InvalidInputError("n_parts must be at least 2")
        cfg = self._config()
        s1 = run_stage1(tracks, int(self.n_parts), self.horizon, self.canonical_frame)
        model0 = initialize(tracks, s1.labels, s1.distances, cfg, self.canonical_frame)
        history = []
        model = refine(model0, tracks, cfg, view_axes=self.view_axes, history=history) \
            if self.refine else model0
        self.stage1_ = s1
        self.initial_model_ = model0
        self.model_ = model
        self.history_ = history
        self.labels_ = model.labels()
        self.n_points_ = tracks.point_count
        self.n_frames_ = tracks.frame_count
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("ArticulationEstimator is not fitted; call fit first")

    def _check_shape(self, X):
        tracks = check_tracks(X)
        if tracks.point_count != self.n_points_ or tracks.frame_count != self.n_frames_:
            raise InvalidInputError("tracks do not match the fitted model's shape")
        return tracks

    def predict(self, X=None):
        """Hard part label for every point."""
        self._check_fitted()
        if X is not None:
            self._check_shape(X)
        return self.labels_.copy()

    def transform(self, X=None):
        """Model-predicted trajectories ``(N, T, 3)``."""
        self._check_fitted()
        if X is not None:
            self._check_shape(X)
        return self.model_.forward()

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y, **fit_params).transform()

    def score(self, X, y=None):
        """Negative mean distance between predicted and visible observed positions."""
        self._check_fitted()
        tracks = self._check_shape(X)
        return -epe(self.model_.forward(), np.nan_to_num(tracks.positions), tracks.visibility)
