"""Fitting a linear 3D face model to sparse 2D evidence.

Weak-perspective camera plus identity/expression shape coefficients are fitted by
Levenberg-Marquardt to landmark, silhouette-contour and cross-view keypoint
constraints.
"""

from defa.camera import Pose, compose_m, decompose_pose, project_points
from defa.energy import Observations, Weights
from defa.errors import DefaError, ValidationError
from defa.metrics import ced_curve, nme_lp, nme_nf
from defa.model import MorphableModel, ShapeParams, assemble_shape, load_model, save_model, synth_model
from defa.solver import FitResult, SolveOptions, fit_pair, fit_single

__all__ = [
    "DefaError",
    "FitResult",
    "MorphableModel",
    "Observations",
    "Pose",
    "ShapeParams",
    "SolveOptions",
    "ValidationError",
    "Weights",
    "assemble_shape",
    "ced_curve",
    "compose_m",
    "decompose_pose",
    "fit_pair",
    "fit_single",
    "load_model",
    "nme_lp",
    "nme_nf",
    "project_points",
    "save_model",
    "synth_model",
]
__version__ = "0.1.0"
