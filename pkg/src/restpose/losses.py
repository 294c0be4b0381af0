"""Differentiable training objectives.

Reduction conventions (documented; the weights are then resolution
independent): squared-norm terms are means over joints / parameter entries,
absolute terms are means over pixels / vertex coordinates. The decoder
reconstruction term averages only over ground-truth mask pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .bodymodel import Camera, Mesh, project
from .errors import DimensionError


@dataclass
class StagePrediction:
    """One pass of the regressor: parameters, mesh, and both joint sets.

    stage is 0 for the coarse pass and 1 for the fine (post-reconstruction)
    pass. joints14_2d must equal project(joints14_3d, cam).
    """

    theta: Tensor        # (24, 3)
    beta: Tensor         # (10,)
    cam: Camera
    mesh: Mesh
    joints14_3d: Tensor  # (14, 3)
    joints14_2d: Tensor  # (14, 2)
    stage: int = 0


def validate_stage_prediction(pred: StagePrediction, tol: float = 1e-6) -> None:
    reproj = project(pred.joints14_3d, pred.cam)
    err = (reproj - pred.joints14_2d).abs().max().item()
    if err > tol:
        raise DimensionError(f"joints14_2d inconsistent with cam projection (max err {err:.2e})")


@dataclass
class LossWeights:
    w_2d: float = 1.0
    w_3d: float = 1.0
    w_smpl: float = 1.0
    w_mask: float = 1.0
    w_recon: float = 1.0

    def __post_init__(self):
        for name in ("w_2d", "w_3d", "w_smpl", "w_mask", "w_recon"):
            if getattr(self, name) < 0:
                raise DimensionError(f"loss weight {name} must be nonnegative")


@dataclass
class JointTargets:
    """Ground-truth joints for one sample."""

    joints2d: Tensor  # (14, 2) px
    joints3d: Tensor  # (14, 3) mm


def _pair(pred, gt, width: int) -> tuple[Tensor, Tensor]:
    p = torch.as_tensor(pred)
    g = torch.as_tensor(gt)
    if p.dtype != g.dtype:
        g = g.to(p.dtype)
    if p.shape != g.shape or p.shape[-1] != width:
        raise DimensionError(f"expected matching (J, {width}) tensors, got {tuple(p.shape)} vs {tuple(g.shape)}")
    return p, g


def loss_2d(pred, gt) -> Tensor:
    """Mean over joints of squared 2D distance."""
    p, g = _pair(pred, gt, 2)
    return ((p - g) ** 2).sum(-1).mean()


def loss_3d(pred, gt) -> Tensor:
    """Mean over joints of squared 3D distance."""
    p, g = _pair(pred, gt, 3)
    return ((p - g) ** 2).sum(-1).mean()


def loss_smpl(pred: StagePrediction, fit, mesh_opt: Mesh) -> Tensor:
    """Mesh L1 + parameter L2 against the optimizer-refined target.

    Mean absolute difference over vertex coordinates plus mean squared
    difference over the concatenated (theta, beta) vector. Camera
    parameters are not part of the comparison.
    """
    pv = torch.as_tensor(pred.mesh.vertices)
    ov = torch.as_tensor(mesh_opt.vertices, dtype=pv.dtype)
    if pv.shape != ov.shape:
        raise DimensionError(f"mesh shapes differ: {tuple(pv.shape)} vs {tuple(ov.shape)}")
    l1 = (pv - ov).abs().mean()
    params = torch.cat([torch.as_tensor(pred.theta).reshape(-1), torch.as_tensor(pred.beta).reshape(-1)])
    opt = torch.cat(
        [
            torch.as_tensor(fit.theta_opt, dtype=params.dtype).reshape(-1),
            torch.as_tensor(fit.beta_opt, dtype=params.dtype).reshape(-1),
        ]
    )
    l2 = ((params - opt) ** 2).mean()
    return l1 + l2


def loss_regressor_total(stages, gts: JointTargets, fits, w: LossWeights) -> Tensor:
    """Sum over coarse and fine stages of weighted 2D + 3D + body-parameter
    losses. `fits` is a (FitResult, Mesh) pair or None; without a fit the
    parameter term is skipped for that sample."""
    total = None
    for stage in stages:
        term = w.w_2d * loss_2d(stage.joints14_2d, gts.joints2d) + w.w_3d * loss_3d(
            stage.joints14_3d, gts.joints3d
        )
        if fits is not None and w.w_smpl > 0:
            fit, mesh_opt = fits
            term = term + w.w_smpl * loss_smpl(stage, fit, mesh_opt)
        total = term if total is None else total + term
    if total is None:
        raise DimensionError("loss_regressor_total needs at least one stage")
    return total


def loss_mask(pred, gt) -> Tensor:
    """Mean absolute per-pixel difference between silhouettes."""
    p = torch.as_tensor(pred)
    g = torch.as_tensor(gt)
    if p.dtype != g.dtype:
        g = g.to(p.dtype)
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {tuple(p.shape)} vs {tuple(g.shape)}")
    return (p - g).abs().mean()


def masked_recon_term(recon, gt, mask_gt) -> Tensor:
    """Mean absolute difference over pixels where mask_gt = 1 (0 if empty)."""
    r = torch.as_tensor(recon)
    g = torch.as_tensor(gt, dtype=r.dtype) if not torch.is_tensor(gt) else gt.to(r.dtype)
    m = torch.as_tensor(mask_gt, dtype=r.dtype) if not torch.is_tensor(mask_gt) else mask_gt.to(r.dtype)
    if r.shape != g.shape or r.squeeze().shape != m.squeeze().shape:
        raise DimensionError(
            f"recon/gt/mask shapes differ: {tuple(r.shape)} vs {tuple(g.shape)} vs {tuple(m.shape)}"
        )
    m = m.reshape(r.shape)
    denom = m.sum()
    if float(denom) == 0.0:
        return torch.zeros((), dtype=r.dtype)
    return ((r - g).abs() * m).sum() / denom


def loss_decoder(recon_depth, recon_ir, gt_depth_un, gt_ir_un, mask_pred, mask_gt) -> Tensor:
    """Mask loss plus masked-L1 reconstruction of uncovered depth and IR."""
    return (
        loss_mask(mask_pred, mask_gt)
        + masked_recon_term(recon_depth, gt_depth_un, mask_gt)
        + masked_recon_term(recon_ir, gt_ir_un, mask_gt)
    )
