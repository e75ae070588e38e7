"""Face-alignment error metrics and cumulative error distribution curves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from defa.errors import ValidationError
from defa.model import EYE_CORNERS_68


@dataclass(frozen=True)
class ErrorRecord:
    image_id: str
    nme: float
    metric_kind: str
    n_points: int


def _mean_distance(pred, gt, mask) -> tuple[float, int]:
    pred = np.asarray(pred, dtype=np.float64).reshape(2, -1)
    gt = np.asarray(gt, dtype=np.float64).reshape(2, -1)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction {pred.shape} and ground truth {gt.shape} differ", "points")
    valid = np.ones(gt.shape[1], bool) if mask is None else np.asarray(mask, bool)
    n = int(valid.sum())
    if n == 0:
        raise ValidationError("no valid points", "mask")
    d = np.linalg.norm(pred[:, valid] - gt[:, valid], axis=0)
    return float(d.mean()), n


def nme_lp(pred, gt, mask=None, bbox=None) -> float:
    """Mean point-to-point error over valid points divided by sqrt(w * h) of the face box."""
    _, _, w, h = bbox
    if not (w > 0 and h > 0):
        raise ValidationError(f"box must have positive size, got {w}x{h}", "bbox")
    mean, _ = _mean_distance(pred, gt, mask)
    return mean / float(np.sqrt(w * h))


def nme_nf(pred, gt, mask=None, interocular: float | None = None) -> float:
    """Mean point-to-point error over valid points divided by the inter-ocular distance.

    Without ``interocular``, ``gt`` must follow the 68-point convention and the
    outer eye corners are used.
    """
    if interocular is None:
        interocular = interocular_distance(gt)
    if not interocular > 0:
        raise ValidationError(f"inter-ocular distance must be positive, got {interocular}", "interocular")
    mean, _ = _mean_distance(pred, gt, mask)
    return mean / interocular


def interocular_distance(gt, corners: tuple[int, int] = EYE_CORNERS_68) -> float:
    gt = np.asarray(gt, dtype=np.float64).reshape(2, -1)
    if gt.shape[1] <= max(corners):
        raise ValidationError(f"{gt.shape[1]} points do not include eye corners {corners}", "gt")
    return float(np.linalg.norm(gt[:, corners[0]] - gt[:, corners[1]]))


def ced_curve(errors, thresholds) -> list[tuple[float, float]]:
    """Fraction of errors ``<=`` each threshold."""
    errs = np.sort(np.asarray(errors, dtype=np.float64).reshape(-1))
    if len(errs) == 0:
        raise ValidationError("no errors to accumulate", "errors")
    th = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    if np.any(np.diff(th) < 0):
        raise ValidationError("thresholds must be sorted ascending", "thresholds")
    counts = np.searchsorted(errs, th, side="right")
    return [(float(t), float(c) / len(errs)) for t, c in zip(th, counts)]
