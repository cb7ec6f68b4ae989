"""Pose error metrics: MPJPE, Procrustes-aligned MPJPE, PCK and AUC.

All functions take ``(N, J, 3)`` (or ``(J, 3)``) arrays in millimetres.
"""
from __future__ import annotations

import warnings

import numpy as np

from .errors import DegenerateConfigurationError, ShapeMismatchError

PCK_THRESHOLD_MM = 150.0
AUC_THRESHOLDS_MM = np.arange(5.0, 151.0, 5.0)


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ShapeMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    return pred, gt


def joint_errors(pred, gt):
    pred, gt = _pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt):
    """Mean Euclidean distance over all joints of all samples."""
    return float(joint_errors(pred, gt).mean())


def procrustes_align(pred, gt, rank_tol=1e-10):
    """Similarity transform (rotation, uniform scale, translation) of a single
    ``(J, 3)`` prediction that best matches ``gt`` in least squares.

    Raises :class:`DegenerateConfigurationError` if the cross-covariance has
    rank below 2 (collinear or coincident joints).
    """
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    p0 = pred - mu_p
    g0 = gt - mu_g
    U, S, Vt = np.linalg.svd(p0.T @ g0)
    if S[0] <= 0.0 or S[1] <= rank_tol * S[0]:
        raise DegenerateConfigurationError(f"cross-covariance singular values {S}")
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.array([1.0, 1.0, d])
    R = (U * D) @ Vt
    scale = float((S * D).sum() / (p0 * p0).sum())
    return scale * p0 @ R + mu_g


def pa_mpjpe(pred, gt, return_skipped=False):
    """MPJPE after per-sample Procrustes alignment of ``pred`` onto ``gt``.

    Degenerate samples are skipped with a warning."""
    pred, gt = _pair(pred, gt)
    errs = []
    skipped = 0
    for p, g in zip(pred, gt):
        try:
            aligned = procrustes_align(p, g)
        except DegenerateConfigurationError:
            skipped += 1
            continue
        errs.append(np.linalg.norm(aligned - g, axis=-1).mean())
    if skipped:
        warnings.warn(f"pa_mpjpe skipped {skipped} degenerate sample(s)", stacklevel=2)
    value = float(np.mean(errs)) if errs else float("nan")
    return (value, skipped) if return_skipped else value


def pck_auc(pred, gt, threshold_mm=PCK_THRESHOLD_MM, auc_range=AUC_THRESHOLDS_MM):
    """Percent of joints with error below ``threshold_mm``, and the mean of
    that percentage over ``auc_range`` thresholds."""
    e = joint_errors(pred, gt).ravel()
    pck = 100.0 * np.mean(e < threshold_mm)
    curve = [100.0 * np.mean(e < t) for t in np.asarray(auc_range, dtype=np.float64)]
    return float(pck), float(np.mean(curve))
