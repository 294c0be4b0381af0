"""Fit body and camera parameters to target joints (SMPLify-lite).

The objective is a least-squares stack: 2D reprojection residuals, optional
3D joint residuals, and a magnitude regularizer on shape and non-root pose.
Each iteration takes a damped Gauss-Newton (Levenberg-Marquardt) step: the
Marquardt diagonal gives every parameter its own adaptive step scale, and
steps that fail to decrease the objective are rejected with the damping
raised, so accepted objectives are monotone non-increasing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bodymodel import (
    BodyParams,
    BodyTemplate,
    Camera,
    forward,
    regress_joints14,
    rodrigues,
)
from .errors import ConfigError, OptimizationError


@dataclass
class FitConfig:
    max_iters: int = 200
    step_size: float = 0.05   # larger -> lower initial damping
    tol: float = 1e-12        # stop when an accepted decrease falls below this
    lambda_3d: float = 1.0
    lambda_reg: float = 1e-3


@dataclass
class FitResult:
    theta_opt: np.ndarray      # (24, 3)
    beta_opt: np.ndarray       # (10,)
    cam_opt: Camera            # R derived from the root axis-angle
    final_objective: float
    iterations_used: int
    objective_trace: list = field(default_factory=list)

    @property
    def params(self) -> BodyParams:
        return BodyParams(theta=self.theta_opt, beta=self.beta_opt)


def init_camera_from_joints(template: BodyTemplate, params: BodyParams, targets_2d) -> np.ndarray:
    """Closed-form least-squares (s, tx, ty) aligning the posed joints of
    `params` to the 2D targets. Handy for initializing the fitter."""
    with torch.no_grad():
        mesh = forward(template, params.theta, params.beta)
        j = regress_joints14(template, mesh)
        R = rodrigues(torch.as_tensor(params.theta, dtype=torch.float64)[0])
        q = (j @ R.T)[:, :2]
    y = torch.as_tensor(np.asarray(targets_2d, dtype=np.float64))
    qb, yb = q.mean(0), y.mean(0)
    qc, yc = q - qb, y - yb
    s = float((qc * yc).sum() / (qc * qc).sum().clamp(min=1e-12))
    s = max(s, 1e-6)
    t = (yb - s * qb).numpy()
    return np.array([s, t[0], t[1]], dtype=np.float64)


def _make_residuals(template, t2d, t3d, cfg):
    sqrt_reg = float(np.sqrt(cfg.lambda_reg))
    sqrt_3d = float(np.sqrt(cfg.lambda_3d))

    def residuals(x):
        theta = x[:72].reshape(24, 3)
        beta = x[72:82]
        cam = x[82:85]
        mesh = forward(template, theta, beta)
        j = regress_joints14(template, mesh)
        R = rodrigues(theta[0])
        proj = cam[0] * (j @ R.T)[:, :2] + cam[1:3]
        parts = [(proj - t2d).reshape(-1)]
        if t3d is not None:
            parts.append(sqrt_3d * (j - t3d).reshape(-1))
        parts.append(sqrt_reg * torch.cat([beta, theta[1:].reshape(-1)]))
        return torch.cat(parts)

    return residuals


def fit_body_to_joints(
    template: BodyTemplate,
    targets_2d,
    targets_3d=None,
    init_params: BodyParams | None = None,
    init_cam=None,
    config: FitConfig | None = None,
) -> FitResult:
    """Minimize joint residuals over (theta, beta, s, tx, ty).

    init_cam is the (s, tx, ty) triple; the full camera rotation always
    comes from the root joint of theta. Stops at max_iters or when an
    accepted step decreases the objective by less than tol.
    """
    cfg = config or FitConfig()
    if cfg.max_iters < 1:
        raise ConfigError("max_iters must be >= 1")
    if init_params is None:
        init_params = BodyParams(theta=np.zeros((24, 3)), beta=np.zeros(10))
    if init_cam is None:
        init_cam = init_camera_from_joints(template, init_params, targets_2d)

    t2d = torch.as_tensor(np.asarray(targets_2d, dtype=np.float64))
    t3d = None if targets_3d is None else torch.as_tensor(np.asarray(targets_3d, dtype=np.float64))
    residuals = _make_residuals(template, t2d, t3d, cfg)

    x = torch.as_tensor(
        np.concatenate(
            [
                np.asarray(init_params.theta, dtype=np.float64).reshape(-1),
                np.asarray(init_params.beta, dtype=np.float64).reshape(-1),
                np.asarray(init_cam, dtype=np.float64).reshape(3),
            ]
        )
    ).clone()

    with torch.no_grad():
        r = residuals(x)
    obj = float((r * r).sum())
    if not np.isfinite(obj):
        raise OptimizationError("objective non-finite at initialization", iteration=0)
    trace = [obj]
    lam = 1e-4 / max(cfg.step_size, 1e-12) * 0.05  # default step 0.05 -> lam 1e-4
    nu = 2.0
    iterations = 0
    for it in range(cfg.max_iters):
        iterations = it + 1
        J = torch.autograd.functional.jacobian(residuals, x, vectorize=True)
        with torch.no_grad():
            r = residuals(x)
        if not (torch.isfinite(J).all() and torch.isfinite(r).all()):
            raise OptimizationError("objective became non-finite", iteration=it)
        g = J.T @ r
        H = J.T @ J
        D = torch.clamp(torch.diagonal(H), min=1e-10)
        try:
            delta = torch.linalg.solve(H + lam * torch.diag(D), -g)
        except torch.linalg.LinAlgError:
            lam *= nu
            nu *= 2
            continue
        x_new = x + delta
        with torch.no_grad():
            r_new = residuals(x_new)
        obj_new = float((r_new * r_new).sum())
        if np.isfinite(obj_new) and obj_new <= obj:
            decrease = obj - obj_new
            predicted = float(delta @ (lam * D * delta - g))
            rho = decrease / max(predicted, 1e-300)
            x = x_new
            obj = obj_new
            trace.append(obj)
            lam = lam * max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
            if decrease < cfg.tol:
                break
        else:
            if not np.isfinite(obj_new):
                raise OptimizationError("objective became non-finite", iteration=it)
            lam *= nu
            nu *= 2
            if lam > 1e14:
                break

    x_np = x.numpy()
    theta_np = x_np[:72].reshape(24, 3).copy()
    cam = Camera(
        s=float(max(x_np[82], 1e-9)),
        t=x_np[83:85].copy(),
        R=rodrigues(torch.as_tensor(theta_np[0])).numpy(),
    )
    return FitResult(
        theta_opt=theta_np,
        beta_opt=x_np[72:82].copy(),
        cam_opt=cam,
        final_objective=obj,
        iterations_used=iterations,
        objective_trace=trace,
    )


def save_fit(result: FitResult, sample_id: str, fits_dir: str | Path) -> Path:
    """Persist one fit as a JSON record under <fits_dir>/<sample_id>.json."""
    fits_dir = Path(fits_dir)
    fits_dir.mkdir(parents=True, exist_ok=True)
    rec = {
        "sample_id": sample_id,
        "theta": result.theta_opt.tolist(),
        "beta": result.beta_opt.tolist(),
        "cam": {"s": float(result.cam_opt.s), "t": np.asarray(result.cam_opt.t).tolist()},
        "final_objective": result.final_objective,
        "iterations_used": result.iterations_used,
    }
    path = fits_dir / f"{sample_id}.json"
    path.write_text(json.dumps(rec, sort_keys=True, indent=1))
    return path


def load_fit(sample_id: str, fits_dir: str | Path) -> FitResult | None:
    path = Path(fits_dir) / f"{sample_id}.json"
    if not path.is_file():
        return None
    rec = json.loads(path.read_text())
    theta = np.asarray(rec["theta"], dtype=np.float64)
    cam = Camera(
        s=float(rec["cam"]["s"]),
        t=np.asarray(rec["cam"]["t"], dtype=np.float64),
        R=rodrigues(torch.as_tensor(theta[0])).numpy(),
    )
    return FitResult(
        theta_opt=theta,
        beta_opt=np.asarray(rec["beta"], dtype=np.float64),
        cam_opt=cam,
        final_objective=float(rec["final_objective"]),
        iterations_used=int(rec["iterations_used"]),
    )
