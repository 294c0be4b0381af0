"""Parametric articulated body mesh: linear blend skinning over a 24-joint
tree, joint regression, and orthographic camera projection.

Pose theta is 24 axis-angle rotations (24, 3); shape beta is 10 PCA-style
coefficients. World units are millimeters. The built-in toy template is a
deterministic low-poly humanoid (capsule limbs) lying supine: head toward
+y, subject's left toward +x, z up from the bed plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import Tensor

from .archive import load_archive, save_archive
from .errors import ConfigError, DimensionError, EmptyInputError, FormatError

NUM_JOINTS = 24
NUM_BETAS = 10

# SMPL-topology kinematic tree, parent[0] = -1 (root)
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)

JOINT_NAMES = (
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_hand", "r_hand",
)

# 14-joint output order (LSP convention), mapped to tree joints above
LSP_JOINT_NAMES = (
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
    "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
    "neck", "head",
)
LSP_TO_TREE = (8, 5, 2, 1, 4, 7, 21, 19, 17, 16, 18, 20, 12, 15)
# left/right partner indices in LSP order, used by horizontal flips
LSP_FLIP_PAIRS = ((0, 5), (1, 4), (2, 3), (6, 11), (7, 10), (8, 9))
# left/right partner joints in the 24-joint tree
TREE_FLIP_PAIRS = ((1, 2), (4, 5), (7, 8), (10, 11), (13, 14), (16, 17), (18, 19), (20, 21), (22, 23))


@dataclass
class BodyParams:
    """Regression target: pose theta (24, 3) axis-angle + shape beta (10,)."""

    theta: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(NUM_JOINTS, 3)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(NUM_BETAS)


@dataclass
class Camera:
    """Orthographic camera: image = s * drop_z(R @ point) + t."""

    s: object
    t: object
    R: object


@dataclass
class Mesh:
    """Posed surface vertices (N, 3) and the 24 posed joints (24, 3)."""

    vertices: Tensor
    joints24: Tensor


@dataclass(eq=False)
class BodyTemplate:
    """Rest geometry plus the linear bases that turn (theta, beta) into a mesh.

    Arrays are float64 numpy; `parent` encodes the kinematic tree with
    parent[0] == -1. `pose_basis` (N, 3, 207) is optional and unused by the
    toy template.
    """

    rest_vertices: np.ndarray   # (N, 3) mm
    faces: np.ndarray           # (F, 3) int32
    shape_basis: np.ndarray     # (N, 3, 10)
    weights: np.ndarray         # (N, 24), rows sum to 1
    joint_regressor24: np.ndarray  # (24, N), rows sum to 1
    joint_regressor14: np.ndarray  # (14, N), rows sum to 1
    parent: np.ndarray          # (24,) int32
    pose_basis: np.ndarray | None = None  # (N, 3, 207), optional
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return int(self.rest_vertices.shape[0])

    def tensors(self, dtype: torch.dtype = torch.float64) -> dict[str, Tensor]:
        """Torch views of the template arrays, cached per dtype."""
        if dtype not in self._cache:
            tensors = {
                "rest": torch.as_tensor(self.rest_vertices, dtype=dtype),
                "shape_basis": torch.as_tensor(self.shape_basis, dtype=dtype),
                "weights": torch.as_tensor(self.weights, dtype=dtype),
                "J24": torch.as_tensor(self.joint_regressor24, dtype=dtype),
                "J14": torch.as_tensor(self.joint_regressor14, dtype=dtype),
                "faces": torch.as_tensor(self.faces.astype(np.int64)),
            }
            if self.pose_basis is not None:
                tensors["pose_basis"] = torch.as_tensor(self.pose_basis, dtype=dtype)
            self._cache[dtype] = tensors
        return self._cache[dtype]


def _check(cond: bool, name: str) -> None:
    if not cond:
        raise FormatError(f"template invariant failed: {name}")


def validate_template(t: BodyTemplate) -> None:
    """Raise FormatError naming the first violated template invariant."""
    n = t.rest_vertices.shape[0] if t.rest_vertices.ndim == 2 else 0
    _check(t.rest_vertices.ndim == 2 and t.rest_vertices.shape[1] == 3, "rest_vertices shape (N, 3)")
    _check(n >= NUM_JOINTS, "vertex count N >= 24")
    _check(np.isfinite(t.rest_vertices).all(), "rest_vertices finite")
    _check(t.faces.ndim == 2 and t.faces.shape[1] == 3, "faces shape (F, 3)")
    _check(t.faces.size == 0 or (t.faces.min() >= 0 and t.faces.max() < n), "face indices in range")
    _check(t.shape_basis.shape == (n, 3, NUM_BETAS), "shape_basis shape (N, 3, 10)")
    _check(np.isfinite(t.shape_basis).all(), "shape_basis finite")
    _check(t.weights.shape == (n, NUM_JOINTS), "weights shape (N, 24)")
    _check((t.weights >= -1e-12).all(), "skinning weights nonnegative")
    _check(np.abs(t.weights.sum(axis=1) - 1.0).max() <= 1e-6, "skinning weight rows sum to 1")
    _check(t.joint_regressor24.shape == (NUM_JOINTS, n), "J24 shape (24, N)")
    _check(np.abs(t.joint_regressor24.sum(axis=1) - 1.0).max() <= 1e-6, "J24 rows sum to 1")
    _check(t.joint_regressor14.shape == (14, n), "J14 shape (14, N)")
    _check(np.abs(t.joint_regressor14.sum(axis=1) - 1.0).max() <= 1e-6, "J14 rows sum to 1")
    _check(t.parent.shape == (NUM_JOINTS,), "parent shape (24,)")
    _check(int(t.parent[0]) == -1, "parent[0] is the root")
    # single rooted tree: every joint reaches the root without revisiting
    for j in range(1, NUM_JOINTS):
        seen = set()
        k = j
        while k != 0:
            _check(k not in seen and 0 <= k < NUM_JOINTS, "kinematic tree acyclic")
            seen.add(k)
            k = int(t.parent[k])
            _check(k >= 0, "kinematic tree rooted at joint 0")
    if t.pose_basis is not None:
        _check(t.pose_basis.shape == (n, 3, 207), "pose_basis shape (N, 3, 207)")
        _check(np.isfinite(t.pose_basis).all(), "pose_basis finite")


def rodrigues(axis_angle: Tensor) -> Tensor:
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3).

    Uses R = I + a*K + b*K^2 with K built from the unnormalized vector,
    a = sin(t)/t and b = (1-cos(t))/t^2, switching to their series below
    t < 1e-8 so the map is exact (identity) and smooth at zero.
    """
    aa = axis_angle
    theta2 = (aa * aa).sum(-1)
    theta = torch.sqrt(theta2.clamp(min=0))
    small = theta < 1e-8
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    safe = torch.sqrt(safe2)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(safe) / safe)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(safe)) / safe2)
    x, y, z = aa[..., 0], aa[..., 1], aa[..., 2]
    zero = torch.zeros_like(x)
    K = torch.stack(
        [
            torch.stack([zero, -z, y], -1),
            torch.stack([z, zero, -x], -1),
            torch.stack([-y, x, zero], -1),
        ],
        -2,
    )
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def _as_tensor(x, dtype=None) -> Tensor:
    t = torch.as_tensor(x)
    if dtype is not None and t.is_floating_point() and t.dtype != dtype:
        t = t.to(dtype)
    return t


def forward(template: BodyTemplate, theta, beta) -> Mesh:
    """Pose the template: LBS of the shaped rest mesh over the joint chain.

    theta: (24, 3) axis-angle; beta: (10,). Joints are regressed on the
    shaped rest mesh and carried through the same chain of transforms.
    """
    theta_t = _as_tensor(theta)
    dtype = theta_t.dtype if theta_t.is_floating_point() else torch.float64
    theta_t = _as_tensor(theta, dtype)
    beta_t = _as_tensor(beta, dtype)
    if theta_t.shape != (NUM_JOINTS, 3):
        raise DimensionError(f"theta must be (24, 3), got {tuple(theta_t.shape)}")
    if beta_t.shape != (NUM_BETAS,):
        raise DimensionError(f"beta must be (10,), got {tuple(beta_t.shape)}")
    if not (torch.isfinite(theta_t).all() and torch.isfinite(beta_t).all()):
        raise ConfigError("invalid parameter: theta/beta must be finite")

    tt = template.tensors(dtype)
    v_shaped = tt["rest"] + torch.einsum("vdk,k->vd", tt["shape_basis"], beta_t)
    rest_joints = tt["J24"] @ v_shaped  # (24, 3)

    R = rodrigues(theta_t)  # (24, 3, 3)
    v_posed = v_shaped
    if "pose_basis" in tt:
        eye = torch.eye(3, dtype=dtype)
        pose_feat = (R[1:] - eye).reshape(-1)  # (207,)
        v_posed = v_posed + torch.einsum("vdk,k->vd", tt["pose_basis"], pose_feat)

    # vertex transform for joint i: rotation about the (shaped) rest joint,
    # composed down the chain; exactly the identity at theta = 0
    rot: list[Tensor] = [None] * NUM_JOINTS  # type: ignore[list-item]
    trans: list[Tensor] = [None] * NUM_JOINTS  # type: ignore[list-item]
    rot[0] = R[0]
    trans[0] = rest_joints[0] - R[0] @ rest_joints[0]
    for i in range(1, NUM_JOINTS):
        p = int(template.parent[i])
        local_t = rest_joints[i] - R[i] @ rest_joints[i]
        rot[i] = rot[p] @ R[i]
        trans[i] = rot[p] @ local_t + trans[p]
    rot_all = torch.stack(rot)      # (24, 3, 3)
    trans_all = torch.stack(trans)  # (24, 3)

    joints24 = torch.einsum("jab,jb->ja", rot_all, rest_joints) + trans_all
    W = tt["weights"]
    vrot = torch.einsum("vj,jab->vab", W, rot_all)   # (N, 3, 3)
    vtrans = W @ trans_all                           # (N, 3)
    vertices = torch.einsum("vab,vb->va", vrot, v_posed) + vtrans
    return Mesh(vertices=vertices, joints24=joints24)


def regress_joints14(template: BodyTemplate, mesh: Mesh) -> Tensor:
    """14 LSP-ordered joints (R ankle ... head top) from posed vertices."""
    verts = _as_tensor(mesh.vertices)
    if verts.shape[0] != template.n_vertices:
        raise DimensionError(
            f"mesh has {verts.shape[0]} vertices, template expects {template.n_vertices}"
        )
    J14 = torch.as_tensor(template.joint_regressor14, dtype=verts.dtype)
    return J14 @ verts


def validate_camera(cam: Camera, tol: float = 1e-6) -> None:
    """Check s > 0 and that R is a proper rotation within tol."""
    s = float(torch.as_tensor(cam.s))
    R = torch.as_tensor(cam.R, dtype=torch.float64)
    if not s > 0:
        raise ConfigError(f"camera scale must be positive, got {s}")
    if R.shape != (3, 3):
        raise DimensionError(f"camera R must be (3, 3), got {tuple(R.shape)}")
    err = (R.T @ R - torch.eye(3, dtype=torch.float64)).abs().max().item()
    if err > tol:
        raise ConfigError(f"camera R not orthonormal (max |R^T R - I| = {err:.2e})")
    if abs(torch.linalg.det(R).item() - 1.0) > tol:
        raise ConfigError("camera R must have det +1")


def project(points, cam: Camera) -> Tensor:
    """Orthographic projection: s * drop_z(R @ p) + t, applied per point."""
    pts = _as_tensor(points)
    dtype = pts.dtype if pts.is_floating_point() else torch.float64
    pts = _as_tensor(points, dtype)
    R = _as_tensor(cam.R, dtype)
    t = _as_tensor(cam.t, dtype)
    s = _as_tensor(cam.s, dtype)
    return s * (pts @ R.T)[..., :2] + t


def camera_from_output(theta, cam3) -> Camera:
    """Assemble a Camera from regressor outputs: R is the root axis-angle
    rotation; the camera head supplies only (s, tx, ty)."""
    theta_t = _as_tensor(theta)
    c = _as_tensor(cam3, theta_t.dtype if theta_t.is_floating_point() else torch.float64)
    R = rodrigues(theta_t.reshape(NUM_JOINTS, 3)[0])
    return Camera(s=c[0], t=c[1:3], R=R)


def mean_params(dataset: Iterable[BodyParams]) -> BodyParams:
    """Arithmetic mean of pose and shape over a non-empty collection."""
    thetas = []
    betas = []
    for p in dataset:
        thetas.append(np.asarray(p.theta, dtype=np.float64))
        betas.append(np.asarray(p.beta, dtype=np.float64))
    if not thetas:
        raise EmptyInputError("mean_params needs at least one sample")
    return BodyParams(
        theta=np.mean(np.stack(thetas), axis=0),
        beta=np.mean(np.stack(betas), axis=0),
    )


# ---------------------------------------------------------------------------
# Toy template construction
# ---------------------------------------------------------------------------

# rest joint positions (mm): supine on the bed plane z = 0, undersides of
# the limb capsules roughly coplanar so the back rests flat
_REST_JOINTS = np.array(
    [
        (0, 0, 145), (85, -25, 120), (-85, -25, 120), (0, 115, 145),
        (95, -420, 100), (-95, -420, 100), (0, 235, 148),
        (100, -800, 84), (-100, -800, 84), (0, 345, 145),
        (105, -890, 72), (-105, -890, 72), (0, 490, 95),
        (65, 445, 100), (-65, 445, 100), (0, 610, 118),
        (175, 455, 92), (-175, 455, 92), (225, 190, 81), (-225, 190, 81),
        (255, -50, 74), (-255, -50, 74), (265, -140, 65), (-265, -140, 65),
    ],
    dtype=np.float64,
)

# capsule radius (mm) of the bone ending at each non-root joint
_BONE_RADIUS = {
    1: 78, 2: 78, 3: 102, 4: 60, 5: 60, 6: 108, 7: 44, 8: 44, 9: 102,
    10: 32, 11: 32, 12: 42, 13: 48, 14: 48, 15: 76, 16: 50, 17: 50,
    18: 40, 19: 40, 20: 33, 21: 33, 22: 24, 23: 24,
}

_BONES = tuple(range(1, NUM_JOINTS))  # bone c runs parent[c] -> c


def _ring_frame(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # orthonormal basis perpendicular to the bone direction
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, ref)
    u /= np.linalg.norm(u)
    v = np.cross(d, u)
    v /= np.linalg.norm(v)
    return u, v


def make_toy_template(n_vertices: int = 600, seed: int = 0) -> BodyTemplate:
    """Deterministic low-poly humanoid: capsule limbs on the 24-joint tree.

    Same (n_vertices, seed) gives a bit-identical template. Vertices sit in
    rings around each bone; each joint owns the ring centered on it, which
    the joint regressors average over.
    """
    if n_vertices < NUM_JOINTS:
        raise ConfigError(f"n_vertices must be >= {NUM_JOINTS}, got {n_vertices}")
    rng = np.random.default_rng(seed)
    joints = _REST_JOINTS
    lengths = {c: float(np.linalg.norm(joints[c] - joints[PARENTS[c]])) for c in _BONES}

    ring_k = min(8, max(3, n_vertices // (2 * len(_BONES))))
    full_rings = n_vertices >= 2 * len(_BONES) * 3
    verts: list[np.ndarray] = []
    ring_of_joint: dict[int, list[int]] = {}
    bone_of_vertex: list[tuple[int, float]] = []  # (bone child, fraction along bone)
    faces: list[tuple[int, int, int]] = []

    if full_rings:
        budget = n_vertices // ring_k
        extra = budget - 2 * len(_BONES)
        total_len = sum(lengths.values())
        extras = {c: int(extra * lengths[c] / total_len) for c in _BONES}
        leftover = extra - sum(extras.values())
        for c in sorted(_BONES, key=lambda c: -lengths[c]):
            if leftover <= 0:
                break
            extras[c] += 1
            leftover -= 1
        leaf = {c for c in _BONES if c not in set(PARENTS)}
        for c in _BONES:
            p = PARENTS[c]
            a, b = joints[p], joints[c]
            d = (b - a) / lengths[c]
            u, v = _ring_frame(d)
            r = float(_BONE_RADIUS[c])
            n_rings = 2 + extras[c]
            ring_starts = []
            for ri, f in enumerate(np.linspace(0.0, 1.0, n_rings)):
                center = a + f * (b - a)
                start = len(verts)
                ring_starts.append(start)
                phase = 2 * math.pi * (ri % 2) / (2 * ring_k)
                for kk in range(ring_k):
                    ang = phase + 2 * math.pi * kk / ring_k
                    verts.append(center + r * (math.cos(ang) * u + math.sin(ang) * v))
                    bone_of_vertex.append((c, float(f)))
            # joint ownership: bone end ring sits at joint c; first bone
            # touching the root contributes its start ring for joint 0
            ring_of_joint[c] = list(range(ring_starts[-1], ring_starts[-1] + ring_k))
            if p == 0 and 0 not in ring_of_joint:
                ring_of_joint[0] = list(range(ring_starts[0], ring_starts[0] + ring_k))
            for s0, s1 in zip(ring_starts[:-1], ring_starts[1:]):
                for kk in range(ring_k):
                    k2 = (kk + 1) % ring_k
                    faces.append((s0 + kk, s0 + k2, s1 + kk))
                    faces.append((s0 + k2, s1 + k2, s1 + kk))
            for s0 in (ring_starts[0], ring_starts[-1]):
                for kk in range(1, ring_k - 1):
                    faces.append((s0, s0 + kk, s0 + kk + 1))
        # pad to exactly n_vertices with an extra partial ring on the head
        head = joints[15]
        pad = n_vertices - len(verts)
        for kk in range(pad):
            ang = 2 * math.pi * (kk + 0.25) / max(pad, 1)
            verts.append(head + 0.6 * _BONE_RADIUS[15] * np.array([math.cos(ang), 0.25, math.sin(ang)]))
            bone_of_vertex.append((15, 1.0))
    else:
        # tiny-template fallback: one point per joint, extras along bones
        for j in range(NUM_JOINTS):
            ring_of_joint[j] = [len(verts)]
            verts.append(joints[j].copy())
            bone_of_vertex.append((j if j > 0 else 3, 1.0 if j > 0 else 0.0))
        order = sorted(_BONES, key=lambda c: -lengths[c])
        i = 0
        while len(verts) < n_vertices:
            c = order[i % len(order)]
            f = 0.5
            verts.append(joints[PARENTS[c]] + f * (joints[c] - joints[PARENTS[c]]))
            bone_of_vertex.append((c, f))
            i += 1
        for j in range(len(verts) - 2):
            faces.append((j, j + 1, j + 2))

    V = np.array(verts, dtype=np.float64)
    n = V.shape[0]

    weights = np.zeros((n, NUM_JOINTS), dtype=np.float64)
    for vi, (c, f) in enumerate(bone_of_vertex):
        w_child = max(0.0, f - 0.5)  # blend toward the far joint past mid-bone
        weights[vi, c] = w_child
        weights[vi, PARENTS[c]] += 1.0 - w_child

    J24 = np.zeros((NUM_JOINTS, n), dtype=np.float64)
    for j in range(NUM_JOINTS):
        idx = ring_of_joint[j]
        J24[j, idx] = 1.0 / len(idx)
    J14 = J24[list(LSP_TO_TREE)].copy()

    basis = np.zeros((n, 3, NUM_BETAS), dtype=np.float64)
    y = V[:, 1]
    basis[:, 1, 0] = 0.09 * y                                  # overall length
    basis[:, 0, 1] = 0.07 * V[:, 0]                            # girth
    basis[:, 2, 1] = 0.07 * (V[:, 2] - 140.0)
    upper = 1.0 / (1.0 + np.exp(-y / 120.0))                   # upper-body bulk
    basis[:, 0, 2] = 0.06 * V[:, 0] * upper
    basis[:, 2, 2] = 0.06 * (V[:, 2] - 140.0) * upper
    legs = 1.0 / (1.0 + np.exp((y + 25.0) / 80.0))             # leg length
    basis[:, 1, 3] = 0.10 * (y + 25.0) * legs
    for k in range(4, NUM_BETAS):
        freq = rng.uniform(0.3, 1.2) / 1700.0
        phase = rng.uniform(0, 2 * math.pi)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        amp = rng.uniform(8.0, 18.0)
        wave = np.sin(2 * math.pi * freq * y + phase)
        basis[:, :, k] = amp * wave[:, None] * direction[None, :]

    template = BodyTemplate(
        rest_vertices=V,
        faces=np.array(faces, dtype=np.int32),
        shape_basis=basis,
        weights=weights,
        joint_regressor24=J24,
        joint_regressor14=J14,
        parent=np.array(PARENTS, dtype=np.int32),
    )
    validate_template(template)
    return template


_TEMPLATE_KEYS = ("rest_vertices", "faces", "shape_basis", "weights", "J24", "J14", "parent")


def save_template(template: BodyTemplate, path: str | Path) -> None:
    arrays = {
        "rest_vertices": template.rest_vertices.astype(np.float64),
        "faces": template.faces.astype(np.int32),
        "shape_basis": template.shape_basis.astype(np.float64),
        "weights": template.weights.astype(np.float64),
        "J24": template.joint_regressor24.astype(np.float64),
        "J14": template.joint_regressor14.astype(np.float64),
        "parent": template.parent.astype(np.int32),
    }
    if template.pose_basis is not None:
        arrays["pose_basis"] = template.pose_basis.astype(np.float64)
    save_archive(path, arrays, meta={"kind": "body_template"})


def load_template(path: str | Path) -> BodyTemplate:
    """Read a template archive and validate every invariant."""
    arrays, _ = load_archive(path)
    missing = [k for k in _TEMPLATE_KEYS if k not in arrays]
    if missing:
        raise FormatError(f"template archive missing arrays: {', '.join(missing)}")
    template = BodyTemplate(
        rest_vertices=arrays["rest_vertices"].astype(np.float64),
        faces=arrays["faces"].astype(np.int32),
        shape_basis=arrays["shape_basis"].astype(np.float64),
        weights=arrays["weights"].astype(np.float64),
        joint_regressor24=arrays["J24"].astype(np.float64),
        joint_regressor14=arrays["J14"].astype(np.float64),
        parent=arrays["parent"].astype(np.int32),
        pose_basis=arrays.get("pose_basis"),
    )
    validate_template(template)
    return template
