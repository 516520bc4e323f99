"""Articulated-object kinematics from 3D point tracks.

Two stages: motion-prior initialization groups points by when they move and
fits per-group SE(3) motion bases; kinematic refinement turns each group into
an explicit revolute or prismatic joint and optimizes axes, pivots, joint
scalars and point assignments together.
"""

from .estimator import ArticulationEstimator, check_tracks
from .exceptions import (ArtikinError, DegenerateGeometryError, DegenerateTrackError,
                         DivergenceError, InvalidInputError, ParseError)
from .geometry import (RigidTransform, nearest_rotation, pca, prismatic_transform,
                       project_to_se3, revolute_transform, rodrigues, unit_axis,
                       weighted_procrustes)
from .kinematics import (ArticulatedModel, Joint, RefineConfig, classify_joint, initialize,
                         refine, robust_center_trajectory)
from .metrics import EvalReport, axis_error, chamfer, epe, evaluate, position_error
from .model_io import export_model, import_model, load_report, save_report, to_urdf
from .motion import run_stage1
from .tracks import (NoiseSpec, PartSpec, RigSpec, TrackSet, cabinet_rig, interpolate_occlusions,
                     load_rig, load_tracks, save_rig, save_tracks, synthesize)

__version__ = "0.1.0"
