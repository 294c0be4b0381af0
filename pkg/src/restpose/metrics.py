"""Evaluation metrics: MPJPE, Procrustes-aligned reconstruction error, and
foreground/background segmentation scores. All joint inputs are (J, 3) in
millimeters, LSP joint order."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateGeometryError, DimensionError


def mpjpe(pred, gt) -> float:
    """Mean per-joint position error: mean Euclidean distance in mm."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"joint sets differ in shape: {p.shape} vs {g.shape}")
    return float(np.linalg.norm(p - g, axis=-1).mean())


def procrustes_align(pred, gt) -> np.ndarray:
    """Similarity-align pred to gt: the s*R*pred + t minimizing summed
    squared distance, with det(R) = +1 enforced (reflection guard)."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 2 or p.shape[1] != 3:
        raise DimensionError(f"expected matching (J, 3) sets, got {p.shape} vs {g.shape}")
    if p.shape[0] < 3:
        raise DegenerateGeometryError("need at least 3 points to align")
    mu_p = p.mean(axis=0)
    mu_g = g.mean(axis=0)
    P0 = p - mu_p
    G0 = g - mu_g
    var_p = (P0 ** 2).sum()
    if var_p <= 0 or (G0 ** 2).sum() <= 0:
        raise DegenerateGeometryError("point set collapsed to a single point")
    # second singular value ~ 0 means a collinear configuration
    for name, X in (("pred", P0), ("gt", G0)):
        sv = np.linalg.svd(X, compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1.0):
            raise DegenerateGeometryError(f"{name} points are collinear (rank < 2)")
    H = P0.T @ G0
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    s = np.trace(D @ np.diag(S)) / var_p
    t = mu_g - s * R @ mu_p
    return (s * (R @ p.T)).T + t


def reconstruction_error(pred, gt) -> float:
    """MPJPE after similarity (Procrustes) alignment of pred to gt."""
    return mpjpe(procrustes_align(pred, gt), gt)


def seg_scores(pred_mask, gt_mask) -> dict[str, float]:
    """Pixel accuracy and F1 of a hard silhouette against ground truth.

    Both masks must be binary and same-shape. By convention F1 = 1.0 when
    both masks are empty.
    """
    p = np.asarray(pred_mask)
    g = np.asarray(gt_mask)
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {g.shape}")
    for name, m in (("pred", p), ("gt", g)):
        vals = np.unique(m)
        if not np.isin(vals, (0, 1)).all():
            raise DimensionError(f"{name} mask is not binary")
    p = p.astype(bool)
    g = g.astype(bool)
    tp = int(np.count_nonzero(p & g))
    tn = int(np.count_nonzero(~p & ~g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    total = p.size
    accuracy = (tp + tn) / total
    denom = 2 * tp + fp + fn
    f1 = 1.0 if denom == 0 else 2 * tp / denom
    return {"accuracy": float(accuracy), "f1": float(f1)}
