"""Segmentation metrics: Dice coefficient and Hausdorff distance.

DSC is reported as a percentage; when prediction and reference are both empty
for a label the score is 100. Hausdorff uses boundary voxels only (a mask
voxel with at least one of its six face neighbours outside the mask; the
volume border counts as outside), anisotropic spacing applied per axis, and
returns None when either side has no boundary (empty mask).

Distances are computed by scaling each coordinate first, then
dx*dx + dy*dy + dz*dz, with a single sqrt at the very end, so results match
a brute-force double loop written the same way bit for bit.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError


def _check_masks(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim != 3:
        raise ShapeError(f"expected 3-D label volumes, got shape {pred.shape}")
    return pred, gt


def dsc(pred, gt, label: int) -> float:
    """Dice score for one label, in percent. Both sides empty -> 100.0."""
    pred, gt = _check_masks(pred, gt)
    p = pred == label
    g = gt == label
    np_, ng = int(p.sum()), int(g.sum())
    if np_ + ng == 0:
        return 100.0
    inter = int((p & g).sum())
    return 200.0 * inter / (np_ + ng)


def per_class_dsc(pred, gt, classes: int) -> np.ndarray:
    """DSC fraction for each label 1..classes-1; NaN marks a label that is
    absent from both volumes (no voxels on either side)."""
    pred, gt = _check_masks(pred, gt)
    out = np.full(classes - 1, np.nan, dtype=np.float64)
    for k in range(1, classes):
        if (pred == k).any() or (gt == k).any():
            out[k - 1] = dsc(pred, gt, k) / 100.0
    return out


def mean_foreground_dsc(pred, gt, classes: int) -> float:
    """Mean DSC over labels 1..classes-1, as a fraction in [0, 1].

    Labels absent from both volumes are excluded from the mean; if every
    label is absent the result is NaN.
    """
    per = per_class_dsc(pred, gt, classes)
    valid = ~np.isnan(per)
    return float(per[valid].mean()) if valid.any() else float("nan")


def boundary_voxels(mask) -> np.ndarray:
    """[n, 3] coordinates of mask voxels with a face neighbour outside."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1)
    interior = (
        padded[:-2, 1:-1, 1:-1] & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1] & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2] & padded[1:-1, 1:-1, 2:]
    )
    return np.argwhere(mask & ~interior)


def _directed_max_sq(a: np.ndarray, b: np.ndarray, spacing) -> float:
    """max over a of min over b of squared scaled distance."""
    sx, sy, sz = spacing
    ax = a[:, 0] * sx
    ay = a[:, 1] * sy
    az = a[:, 2] * sz
    bx = b[:, 0] * sx
    by = b[:, 1] * sy
    bz = b[:, 2] * sz
    worst = 0.0
    block = max(1, 2_000_000 // max(len(b), 1))
    for i in range(0, len(a), block):
        dx = ax[i:i + block, None] - bx[None, :]
        dy = ay[i:i + block, None] - by[None, :]
        dz = az[i:i + block, None] - bz[None, :]
        d2 = dx * dx + dy * dy + dz * dz
        worst = max(worst, float(d2.min(axis=1).max()))
    return worst


def hausdorff(pred, gt, label: int, spacing=(1.0, 1.0, 1.0)):
    """Symmetric Hausdorff distance between boundary sets; None if either
    side is empty for the label."""
    pred, gt = _check_masks(pred, gt)
    a = boundary_voxels(pred == label)
    b = boundary_voxels(gt == label)
    if len(a) == 0 or len(b) == 0:
        return None
    spacing = tuple(float(s) for s in spacing)
    return math.sqrt(max(_directed_max_sq(a, b, spacing),
                         _directed_max_sq(b, a, spacing)))


def hausdorff95(pred, gt, label: int, spacing=(1.0, 1.0, 1.0)):
    """95th-percentile variant: max of the two directed 95th percentiles of
    boundary-to-set distances. Robustness companion to ``hausdorff``; not
    part of the exactness guarantees."""
    pred, gt = _check_masks(pred, gt)
    a = boundary_voxels(pred == label)
    b = boundary_voxels(gt == label)
    if len(a) == 0 or len(b) == 0:
        return None
    spacing = np.asarray(spacing, dtype=np.float64)

    def directed(u, v):
        d2 = np.empty(len(u))
        block = max(1, 2_000_000 // max(len(v), 1))
        vs = v * spacing
        us = u * spacing
        for i in range(0, len(u), block):
            diff = us[i:i + block, None, :] - vs[None, :, :]
            d2[i:i + block] = (diff * diff).sum(axis=2).min(axis=1)
        return float(np.percentile(np.sqrt(d2), 95.0))

    return max(directed(a, b), directed(b, a))


def evaluate_pair(pred, gt, classes: int, spacing=(1.0, 1.0, 1.0), hd95=False):
    """Per-foreground-label metric rows: label, dsc, hausdorff[, hd95]."""
    rows = []
    for k in range(1, classes):
        row = {"label": k, "dsc": dsc(pred, gt, k),
               "hausdorff": hausdorff(pred, gt, k, spacing)}
        if hd95:
            row["hd95"] = hausdorff95(pred, gt, k, spacing)
        rows.append(row)
    return rows
