"""Deterministic synthetic multimodal in-bed dataset: the desk-scale stand-in
for a real pressure-mat / depth / IR / RGB rig, plus the matching on-disk
loader and the train-time augmentations.

World frame: bed plane z = 0, z up toward the overhead camera, units mm.
Depth images store height above the bed normalized by 1000 mm (near is
large). The pressure map comes from plane indentation and is by construction
identical across cover conditions. Blankets are rendered as a smoothed,
inflated upper envelope of the body height field, so the covered depth is
pixelwise >= the uncovered depth in the normalized convention.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
import torch
from scipy.ndimage import gaussian_filter, maximum_filter

from . import bodymodel as bm
from .bodymodel import BodyParams, BodyTemplate, Camera
from .errors import ConfigError, DataError
from .networks import IMAGE_SIZE

COVER_TYPES = ("uncover", "cover1", "cover2")
DEPTH_RANGE_MM = 1000.0
CONTACT_DEPTH_MM = 30.0
# the (very soft) mattress conforms: surfaces within this height of the
# plane still register pressure, fading linearly with clearance
PM_CONFORMITY_MM = 150.0

# blanket rendering: (max-filter window px, blur sigma px, thickness mm, IR attenuation)
_COVERS = {
    "cover1": {"window": 7, "sigma": 3.0, "thickness_mm": 8.0, "ir_atten": 0.55},
    "cover2": {"window": 13, "sigma": 6.0, "thickness_mm": 25.0, "ir_atten": 0.30},
}


@dataclass
class MultimodalSample:
    """One aligned multimodal observation of a subject in bed."""

    rgb: np.ndarray              # (3, 224, 224) [0, 1]
    ir: np.ndarray               # (1, 224, 224)
    depth: np.ndarray            # (1, 224, 224)
    pm: np.ndarray               # (1, 224, 224)
    joints14_2d: np.ndarray      # (14, 2) px
    joints14_3d: np.ndarray      # (14, 3) mm
    mask_gt: np.ndarray          # (224, 224) {0, 1}
    uncovered_depth: np.ndarray  # (1, 224, 224)
    uncovered_ir: np.ndarray     # (1, 224, 224)
    cover_type: str
    subject_id: str
    pose_id: str
    gt_params: BodyParams | None = None
    gt_cam: np.ndarray | None = None   # (3,) s, tx, ty
    meta: dict = field(default_factory=dict)

    @property
    def sample_id(self) -> str:
        return f"{self.subject_id}_{self.pose_id}_{self.cover_type}"

    def camera(self) -> Camera | None:
        if self.gt_cam is None or self.gt_params is None:
            return None
        R = bm.rodrigues(torch.as_tensor(self.gt_params.theta[0], dtype=torch.float64)).numpy()
        return Camera(s=float(self.gt_cam[0]), t=self.gt_cam[1:3].copy(), R=R)

    def modality(self, name: str) -> np.ndarray:
        return {"depth": self.depth, "ir": self.ir, "pm": self.pm, "rgb": self.rgb}[name]


@dataclass
class DatasetSplit:
    train_ids: list
    eval_ids: list


@dataclass
class GenConfig:
    n_subjects: int = 2
    poses_per_subject: int = 3
    seed: int = 0
    cover_types: tuple = COVER_TYPES
    n_vertices: int = 600
    pm_dropout: bool = False   # opt-in sensor edge case: a limb off the mat
    ir_ghost: bool = False     # opt-in: heat residue from a previous pose


# ---------------------------------------------------------------------------
# pose and camera sampling
# ---------------------------------------------------------------------------


def _sample_pose(rng: np.random.Generator) -> np.ndarray:
    # axis sign conventions for the supine template: negative x-rotations at
    # hips/elbows lift the limb away from the bed, positive knee x-rotations
    # fold the shin back down toward it
    theta = np.zeros((24, 3))
    theta[0, 2] = rng.uniform(-0.15, 0.15)  # root yaw in the bed plane
    side = rng.random() < 0.35
    hip = -np.abs(rng.normal(0.22, 0.14, size=2))
    hip = np.clip(hip, -0.55, 0.0)
    theta[1, 0], theta[2, 0] = hip
    knee = np.abs(rng.normal(0.28, 0.18, size=2))
    knee = np.minimum(np.clip(knee, 0.0, 0.8), -hip + 0.10)  # shin stays above bed
    theta[4, 0], theta[5, 0] = knee
    spread = rng.normal(0.30 if not side else 0.12, 0.18, size=2)
    theta[16, 2] = -np.clip(spread[0], -0.15, 0.8)
    theta[17, 2] = np.clip(spread[1], -0.15, 0.8)
    bend = -np.abs(rng.normal(0.18, 0.13, size=2))
    theta[18, 0], theta[19, 0] = np.clip(bend, -0.5, 0.0)
    theta[18, 2] = rng.normal(0.0, 0.12)
    theta[19, 2] = rng.normal(0.0, 0.12)
    if side:
        roll = np.clip(rng.normal(0.10, 0.03), 0.04, 0.16) * (1 if rng.random() < 0.5 else -1)
        for j in (3, 6, 9):
            theta[j, 1] = roll
    theta[3, 0] = rng.normal(0.0, 0.05)
    theta[12, 0] = rng.normal(0.0, 0.08)
    return theta


def _sample_bedded_pose(template: BodyTemplate, beta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sample a lying pose, damping it until nothing digs far below the rest
    underside (limbs stay above the bed plane)."""
    with torch.no_grad():
        rest_min = float(bm.forward(template, np.zeros((24, 3)), beta).vertices[:, 2].min())
    theta = _sample_pose(rng)
    for _ in range(4):
        with torch.no_grad():
            mesh = bm.forward(template, theta, beta)
        if float(mesh.vertices[:, 2].min()) >= rest_min - 25.0:
            break
        theta[1:] *= 0.8
    return theta


def _fit_camera(verts_xy: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    lo = verts_xy.min(axis=0)
    hi = verts_xy.max(axis=0)
    extent = float(max(hi[0] - lo[0], hi[1] - lo[1]))
    s = 0.78 * (IMAGE_SIZE - 1) / extent * rng.uniform(0.95, 1.05)
    center = (lo + hi) / 2
    t = (IMAGE_SIZE - 1) / 2 - s * center + rng.uniform(-4, 4, size=2)
    return np.array([s, t[0], t[1]])


# ---------------------------------------------------------------------------
# software z-buffer (numpy, render-time only)
# ---------------------------------------------------------------------------


def _zbuffer(verts_px: np.ndarray, z: np.ndarray, faces: np.ndarray, size: int) -> np.ndarray:
    """Top-surface height map: per pixel the max interpolated z over covering
    faces; -inf where no face covers the pixel."""
    buf = np.full((size, size), -np.inf)
    for f in faces:
        tri = verts_px[f]
        zf = z[f]
        lo = np.floor(tri.min(axis=0)).astype(int)
        hi = np.ceil(tri.max(axis=0)).astype(int)
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, size - 1)
        if (hi < lo).any():
            continue
        xs = np.arange(lo[0], hi[0] + 1)
        ys = np.arange(lo[1], hi[1] + 1)
        X, Y = np.meshgrid(xs, ys)
        a, b, c = tri
        det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
        if abs(det) < 1e-12:
            continue
        w1 = ((X - a[0]) * (c[1] - a[1]) - (Y - a[1]) * (c[0] - a[0])) / det
        w2 = ((Y - a[1]) * (b[0] - a[0]) - (X - a[0]) * (b[1] - a[1])) / det
        w0 = 1.0 - w1 - w2
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        if not inside.any():
            continue
        zi = w0 * zf[0] + w1 * zf[1] + w2 * zf[2]
        patch = buf[lo[1] : hi[1] + 1, lo[0] : hi[0] + 1]
        np.maximum(patch, np.where(inside, zi, -np.inf), out=patch)
    return buf


def _quant16(x: np.ndarray) -> np.ndarray:
    """Quantize [0,1] floats to the uint16 grid and back (io-exact values)."""
    q = np.round(np.clip(x, 0.0, 1.0) * 65535.0)
    return q / 65535.0


def _quant8(x: np.ndarray) -> np.ndarray:
    q = np.round(np.clip(x, 0.0, 1.0) * 255.0)
    return q / 255.0


def _value_noise(rng: np.random.Generator, size: int, cells: int = 8) -> np.ndarray:
    grid = rng.random((cells, cells))
    return cv2.resize(grid, (size, size), interpolation=cv2.INTER_CUBIC)


def render_sample(
    template: BodyTemplate,
    params: BodyParams,
    cam3: np.ndarray,
    cover_type: str,
    subject_id: str,
    pose_id: str,
    rng: np.random.Generator,
    pm_dropout: bool = False,
    ir_ghost: bool = False,
    ghost_params: BodyParams | None = None,
) -> MultimodalSample:
    """Render one cover variant of a posed body. The per-(subject, pose) rng
    must be at the same state across cover variants so shared randomness
    (textures, noise) agrees between them."""
    if cover_type not in COVER_TYPES:
        raise ConfigError(f"unknown cover type: {cover_type}")
    size = IMAGE_SIZE
    with torch.no_grad():
        mesh = bm.forward(template, params.theta, params.beta)
        j3d = bm.regress_joints14(template, mesh).numpy()
    verts = mesh.vertices.numpy()
    R = bm.rodrigues(torch.as_tensor(params.theta[0], dtype=torch.float64)).numpy()
    verts_cam = verts @ R.T
    j3d_cam = j3d @ R.T
    s, tx, ty = float(cam3[0]), float(cam3[1]), float(cam3[2])
    verts_px = s * verts_cam[:, :2] + np.array([tx, ty])
    j2d = s * j3d_cam[:, :2] + np.array([tx, ty])

    # settle the body onto the bed: lowest vertex indents by the contact depth
    z_lift = -float(verts_cam[:, 2].min()) - CONTACT_DEPTH_MM
    z_render = verts_cam[:, 2] + z_lift

    height = _zbuffer(verts_px, z_render, template.faces, size)  # mm above bed
    mask = (height > -np.inf).astype(np.float64)
    body_mm = np.where(mask > 0, np.maximum(height, 0.0), 0.0)

    uncovered_depth = _quant16(body_mm / DEPTH_RANGE_MM)
    ir_base = gaussian_filter(mask * 0.88, sigma=2.5)
    uncovered_ir = _quant16(ir_base)

    # pressure from the conforming mattress against the body underside, plus
    # a faint distributed-weight response under the whole footprint so the
    # mat registers the full body outline
    underside = -_zbuffer(verts_px, -z_render, template.faces, size)  # min-z surface
    pressure = np.where(mask > 0, np.maximum(0.0, PM_CONFORMITY_MM - underside) + 10.0, 0.0)
    if pm_dropout:
        # sensor edge case: one ankle region registers no pressure
        limb_px = j2d[0] if rng.random() < 0.5 else j2d[5]  # r/l ankle, LSP order
        yy, xx = np.mgrid[0:size, 0:size]
        pressure[(xx - limb_px[0]) ** 2 + (yy - limb_px[1]) ** 2 < 28 ** 2] = 0.0
    pm_img = gaussian_filter(pressure, sigma=1.5) * (mask > 0)  # mat reads under the footprint only
    pm_scale = PM_CONFORMITY_MM + CONTACT_DEPTH_MM
    pm = _quant16(pm_img / pm_scale)

    bed_noise = _value_noise(rng, size)
    ghost_shift = rng.uniform(-28.0, 28.0, size=2)

    if cover_type == "uncover":
        depth = uncovered_depth.copy()
        ir = uncovered_ir.copy()
        shade = 0.35 + 0.6 * np.clip(body_mm / 300.0, 0, 1)
        rgb = np.empty((3, size, size))
        bed = (0.8 + 0.4 * bed_noise) * 0.55
        for ch, tint in enumerate((1.0, 0.82, 0.70)):
            body_col = 0.85 * tint * shade
            rgb[ch] = np.where(mask > 0, body_col, bed * (1.0, 0.83, 0.70)[ch])
    else:
        cover = _COVERS[cover_type]
        env = maximum_filter(body_mm, size=cover["window"]) + cover["thickness_mm"]
        env = gaussian_filter(env, sigma=cover["sigma"])
        env = np.maximum(env, body_mm)  # the blanket lies on top of the body
        depth = _quant16(env / DEPTH_RANGE_MM)
        ir = _quant16(ir_base * cover["ir_atten"])
        shade = 0.45 + 0.5 * np.clip(env / 350.0, 0, 1) + 0.06 * (bed_noise - 0.5)
        tintset = (0.72, 0.72, 0.78) if cover_type == "cover1" else (0.46, 0.52, 0.66)
        rgb = np.stack([np.clip(shade * tint, 0, 1) for tint in tintset])

    if ir_ghost and ghost_params is not None:
        with torch.no_grad():
            gmesh = bm.forward(template, ghost_params.theta, ghost_params.beta)
        gverts = gmesh.vertices.numpy() @ R.T
        gpx = s * gverts[:, :2] + np.array([tx, ty]) + ghost_shift
        gz = gverts[:, 2] - float(gverts[:, 2].min()) - CONTACT_DEPTH_MM
        gh = _zbuffer(gpx, gz, template.faces, size)
        ghost = gaussian_filter((gh > -np.inf) * 0.2, sigma=3.0)
        ir = _quant16(ir + ghost)

    rgb = _quant8(rgb)

    meta = {
        "depth_range_mm": DEPTH_RANGE_MM,
        "z_lift_mm": z_lift,
        "pm_scale": pm_scale,
        "contact_depth_mm": CONTACT_DEPTH_MM,
    }
    return MultimodalSample(
        rgb=rgb,
        ir=ir[None],
        depth=depth[None],
        pm=pm[None],
        joints14_2d=j2d,
        joints14_3d=j3d,
        mask_gt=mask,
        uncovered_depth=uncovered_depth[None],
        uncovered_ir=uncovered_ir[None],
        cover_type=cover_type,
        subject_id=subject_id,
        pose_id=pose_id,
        gt_params=params,
        gt_cam=np.array([s, tx, ty]),
        meta=meta,
    )


def make_split(subject_ids: list) -> DatasetSplit:
    """Subject-disjoint split: the last quarter (at least one when there are
    two or more subjects) evaluates, the rest train."""
    n = len(subject_ids)
    n_eval = 0 if n < 2 else max(1, n // 4)
    return DatasetSplit(train_ids=subject_ids[: n - n_eval], eval_ids=subject_ids[n - n_eval :])


def generate_samples(config: GenConfig) -> tuple[BodyTemplate, list[MultimodalSample]]:
    """Deterministically generate all samples in memory (no files)."""
    if config.n_subjects < 1:
        raise ConfigError("n_subjects must be >= 1")
    for c in config.cover_types:
        if c not in COVER_TYPES:
            raise ConfigError(f"unknown cover type: {c}")
    template = bm.make_toy_template(config.n_vertices, seed=config.seed)
    root_ss = np.random.SeedSequence(config.seed)
    subject_seeds = root_ss.spawn(config.n_subjects)
    samples: list[MultimodalSample] = []
    for si in range(config.n_subjects):
        subject_id = f"s{si:03d}"
        s_ss = subject_seeds[si]
        s_rng = np.random.default_rng(s_ss)
        beta = np.clip(s_rng.normal(0.0, 0.6, size=10), -1.5, 1.5)
        pose_seeds = s_ss.spawn(config.poses_per_subject)
        for pi in range(config.poses_per_subject):
            pose_id = f"p{pi:03d}"
            p_rng = np.random.default_rng(pose_seeds[pi])
            theta = _sample_bedded_pose(template, beta, p_rng)
            params = BodyParams(theta=theta, beta=beta)
            with torch.no_grad():
                mesh = bm.forward(template, theta, beta)
            R = bm.rodrigues(torch.as_tensor(theta[0], dtype=torch.float64)).numpy()
            verts_cam = mesh.vertices.numpy() @ R.T
            cam3 = _fit_camera(verts_cam[:, :2], p_rng)
            ghost = (
                BodyParams(theta=_sample_bedded_pose(template, beta, p_rng), beta=beta)
                if config.ir_ghost
                else None
            )
            render_state = p_rng.bit_generator.state
            for cover in config.cover_types:
                r = np.random.default_rng()
                r.bit_generator.state = render_state  # shared randomness across covers
                samples.append(
                    render_sample(
                        template, params, cam3, cover, subject_id, pose_id, r,
                        pm_dropout=config.pm_dropout, ir_ghost=config.ir_ghost,
                        ghost_params=ghost,
                    )
                )
    return template, samples


# ---------------------------------------------------------------------------
# on-disk layout (the SLP-style adapter format)
# ---------------------------------------------------------------------------


def _write_png16(path: Path, img01: np.ndarray) -> None:
    arr = np.round(np.clip(img01, 0, 1) * 65535.0).astype(np.uint16)
    if not cv2.imwrite(str(path), arr):
        raise DataError(f"could not write {path}")


def _read_png16(path: Path) -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise DataError(f"missing or unreadable modality file: {path}")
    return arr.astype(np.float64) / 65535.0


def save_sample(sample: MultimodalSample, root: Path) -> Path:
    d = root / sample.subject_id / f"{sample.pose_id}_{sample.cover_type}"
    d.mkdir(parents=True, exist_ok=True)
    rgb8 = np.round(np.transpose(sample.rgb, (1, 2, 0)) * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(d / "rgb.png"), rgb8[:, :, ::-1]):
        raise DataError(f"could not write {d / 'rgb.png'}")
    _write_png16(d / "ir.png", sample.ir[0])
    _write_png16(d / "depth.png", sample.depth[0])
    _write_png16(d / "pm.png", sample.pm[0])
    _write_png16(d / "uncovered_depth.png", sample.uncovered_depth[0])
    _write_png16(d / "uncovered_ir.png", sample.uncovered_ir[0])
    cv2.imwrite(str(d / "mask.png"), (sample.mask_gt * 255).astype(np.uint8))
    meta = dict(sample.meta)
    meta.update(
        {
            "subject_id": sample.subject_id,
            "pose_id": sample.pose_id,
            "cover_type": sample.cover_type,
            "joints14_2d": sample.joints14_2d.tolist(),
            "joints14_3d": sample.joints14_3d.tolist(),
            "image_scale": {"16bit": 65535, "8bit": 255, "offset": 0.0},
        }
    )
    if sample.gt_params is not None:
        meta["gt_params"] = {
            "theta": sample.gt_params.theta.tolist(),
            "beta": sample.gt_params.beta.tolist(),
        }
    if sample.gt_cam is not None:
        meta["gt_cam"] = sample.gt_cam.tolist()
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    return d


def generate_synthetic(config: GenConfig, out_dir: str | Path) -> dict:
    """Generate the dataset and write the documented directory layout.

    Returns the manifest. Same config (seed included) -> byte-identical
    output tree.
    """
    out = Path(out_dir)
    template, samples = generate_samples(config)
    out.mkdir(parents=True, exist_ok=True)
    bm.save_template(template, out / "template.arc")
    for sample in samples:
        save_sample(sample, out)
    subject_ids = sorted({s.subject_id for s in samples})
    split = make_split(subject_ids)
    train_samples = [s for s in samples if s.subject_id in split.train_ids]
    mp = bm.mean_params([s.gt_params for s in train_samples])
    mean_cam = np.mean([s.gt_cam for s in train_samples], axis=0)
    mean_rec = {
        "theta": mp.theta.tolist(),
        "beta": mp.beta.tolist(),
        "cam": mean_cam.tolist(),
        "n_train_samples": len(train_samples),
    }
    (out / "mean_params.json").write_text(json.dumps(mean_rec, sort_keys=True, indent=1))
    manifest = {
        "config": {
            "n_subjects": config.n_subjects,
            "poses_per_subject": config.poses_per_subject,
            "seed": config.seed,
            "cover_types": list(config.cover_types),
            "n_vertices": config.n_vertices,
            "pm_dropout": config.pm_dropout,
            "ir_ghost": config.ir_ghost,
        },
        "n_samples": len(samples),
        "sample_ids": [s.sample_id for s in samples],
        "split": {"train_ids": split.train_ids, "eval_ids": split.eval_ids},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def _resize_to_frame(img: np.ndarray) -> np.ndarray:
    if img.shape[:2] != (IMAGE_SIZE, IMAGE_SIZE):
        img = cv2.resize(img, (IMAGE_SIZE, IMAGE_SIZE), interpolation=cv2.INTER_LINEAR)
    return img


def load_slp(root: str | Path) -> tuple[BodyTemplate | None, list[MultimodalSample], dict]:
    """Load a dataset directory in the documented SLP-style layout.

    Returns (template or None, samples, manifest or {}). Modalities are
    resampled to 224 x 224 when needed; gt params are optional.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory does not exist: {root}")
    sample_dirs = sorted(p for p in root.glob("s*/p*") if p.is_dir())
    if not sample_dirs:
        raise DataError(f"no samples found under {root}")
    template = None
    if (root / "template.arc").is_file():
        template = bm.load_template(root / "template.arc")
    manifest = {}
    if (root / "manifest.json").is_file():
        manifest = json.loads((root / "manifest.json").read_text())
    samples = []
    for d in sample_dirs:
        meta_path = d / "meta.json"
        if not meta_path.is_file():
            raise DataError(f"missing annotation file: {meta_path}")
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as e:
            raise DataError(f"malformed annotation {meta_path}: line {e.lineno}: {e.msg}") from e
        for req in ("rgb.png", "ir.png", "depth.png", "pm.png", "mask.png"):
            if not (d / req).is_file():
                raise DataError(f"missing modality file: {d / req}")
        rgb_bgr = cv2.imread(str(d / "rgb.png"), cv2.IMREAD_COLOR)
        if rgb_bgr is None:
            raise DataError(f"missing or unreadable modality file: {d / 'rgb.png'}")
        rgb = _resize_to_frame(rgb_bgr[:, :, ::-1]).astype(np.float64) / 255.0
        ir = _resize_to_frame(_read_png16(d / "ir.png"))
        depth = _resize_to_frame(_read_png16(d / "depth.png"))
        pm = _resize_to_frame(_read_png16(d / "pm.png"))
        mask_raw = cv2.imread(str(d / "mask.png"), cv2.IMREAD_GRAYSCALE)
        if mask_raw is None:
            raise DataError(f"missing or unreadable modality file: {d / 'mask.png'}")
        mask = (_resize_to_frame(mask_raw).astype(np.float64) > 127).astype(np.float64)
        cover_type = meta.get("cover_type", "uncover")
        unc_d = d / "uncovered_depth.png"
        unc_i = d / "uncovered_ir.png"
        if cover_type != "uncover" and not (unc_d.is_file() and unc_i.is_file()):
            raise DataError(f"missing uncovered targets in {d}")
        uncovered_depth = _resize_to_frame(_read_png16(unc_d)) if unc_d.is_file() else depth.copy()
        uncovered_ir = _resize_to_frame(_read_png16(unc_i)) if unc_i.is_file() else ir.copy()
        gt_params = None
        if "gt_params" in meta:
            gt_params = BodyParams(
                theta=np.asarray(meta["gt_params"]["theta"], dtype=np.float64),
                beta=np.asarray(meta["gt_params"]["beta"], dtype=np.float64),
            )
        gt_cam = np.asarray(meta["gt_cam"], dtype=np.float64) if "gt_cam" in meta else None
        samples.append(
            MultimodalSample(
                rgb=np.transpose(rgb, (2, 0, 1)),
                ir=ir[None],
                depth=depth[None],
                pm=pm[None],
                joints14_2d=np.asarray(meta["joints14_2d"], dtype=np.float64),
                joints14_3d=np.asarray(meta["joints14_3d"], dtype=np.float64),
                mask_gt=mask,
                uncovered_depth=uncovered_depth[None],
                uncovered_ir=uncovered_ir[None],
                cover_type=cover_type,
                subject_id=meta.get("subject_id", d.parent.name),
                pose_id=meta.get("pose_id", d.name.split("_")[0]),
                gt_params=gt_params,
                gt_cam=gt_cam,
                meta={k: meta[k] for k in ("depth_range_mm", "z_lift_mm", "pm_scale") if k in meta},
            )
        )
    return template, samples, manifest


# ---------------------------------------------------------------------------
# augmentation and cropping
# ---------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    scale_range: tuple = (0.8, 1.2)
    max_rotation_deg: float = 30.0
    p_flip: float = 0.5


def _warp(img: np.ndarray, A: np.ndarray, nearest: bool = False) -> np.ndarray:
    flags = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    return cv2.warpAffine(img, A, (IMAGE_SIZE, IMAGE_SIZE), flags=flags, borderValue=0.0)


def flip_sample(sample: MultimodalSample) -> MultimodalSample:
    """Exact horizontal mirror: images reversed along x, joint labels swapped
    via the LSP pair table, 3D x negated, pose mirrored."""
    W = IMAGE_SIZE
    perm = np.arange(14)
    for a, b in bm.LSP_FLIP_PAIRS:
        perm[a], perm[b] = b, a
    j2d = sample.joints14_2d[perm].copy()
    j2d[:, 0] = (W - 1) - j2d[:, 0]
    j3d = sample.joints14_3d[perm].copy()
    j3d[:, 0] = -j3d[:, 0]
    gt_params = None
    if sample.gt_params is not None:
        theta = sample.gt_params.theta.copy()
        tperm = np.arange(24)
        for a, b in bm.TREE_FLIP_PAIRS:
            tperm[a], tperm[b] = b, a
        theta = theta[tperm]
        theta[:, 1] *= -1.0
        theta[:, 2] *= -1.0
        gt_params = BodyParams(theta=theta, beta=sample.gt_params.beta.copy())
    gt_cam = None
    if sample.gt_cam is not None:
        gt_cam = sample.gt_cam.copy()
        gt_cam[1] = (W - 1) - gt_cam[1]
    return replace(
        sample,
        rgb=sample.rgb[:, :, ::-1].copy(),
        ir=sample.ir[:, :, ::-1].copy(),
        depth=sample.depth[:, :, ::-1].copy(),
        pm=sample.pm[:, :, ::-1].copy(),
        mask_gt=sample.mask_gt[:, ::-1].copy(),
        uncovered_depth=sample.uncovered_depth[:, :, ::-1].copy(),
        uncovered_ir=sample.uncovered_ir[:, :, ::-1].copy(),
        joints14_2d=j2d,
        joints14_3d=j3d,
        gt_params=gt_params,
        gt_cam=gt_cam,
    )


def _apply_affine(sample: MultimodalSample, A: np.ndarray, angle_rad: float, scale: float) -> MultimodalSample:
    def warp_stack(arr, nearest=False):
        return np.stack([_warp(c, A, nearest) for c in arr])

    ones = np.ones((14, 1))
    j2d = np.hstack([sample.joints14_2d, ones]) @ A.T
    # 3D: same in-plane rotation about the camera axis through the body center
    c2 = sample.joints14_3d[:, :2].mean(axis=0)
    rot = np.array(
        [[math.cos(angle_rad), -math.sin(angle_rad)], [math.sin(angle_rad), math.cos(angle_rad)]]
    )
    j3d = sample.joints14_3d.copy()
    j3d[:, :2] = (j3d[:, :2] - c2) @ rot.T + c2
    return replace(
        sample,
        rgb=warp_stack(sample.rgb),
        ir=warp_stack(sample.ir),
        depth=warp_stack(sample.depth),
        pm=warp_stack(sample.pm),
        mask_gt=_warp(sample.mask_gt, A, nearest=True),
        uncovered_depth=warp_stack(sample.uncovered_depth),
        uncovered_ir=warp_stack(sample.uncovered_ir),
        joints14_2d=j2d,
        joints14_3d=j3d,
        # rotation / rescale invalidates the stored analytic camera and params
        gt_params=None,
        gt_cam=None,
    )


def augment(sample: MultimodalSample, rng: np.random.Generator, config: AugmentConfig | None = None) -> MultimodalSample:
    """One shared random scale / rotate / flip applied to every modality,
    the mask, and both joint sets."""
    cfg = config or AugmentConfig()
    out = sample
    if rng.random() < cfg.p_flip:
        out = flip_sample(out)
    angle_deg = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    scale = rng.uniform(*cfg.scale_range)
    if abs(angle_deg) > 1e-12 or abs(scale - 1.0) > 1e-12:
        center = ((IMAGE_SIZE - 1) / 2, (IMAGE_SIZE - 1) / 2)
        A = cv2.getRotationMatrix2D(center, angle_deg, scale)
        # cv2 measures angles counterclockwise in display coords; with the row
        # axis pointing down this is a clockwise in-plane rotation of content
        out = _apply_affine(out, A, -math.radians(angle_deg), scale)
    return out


def body_bbox(sample: MultimodalSample, from_mask: bool = True) -> tuple[float, float, float, float]:
    if from_mask and sample.mask_gt.any():
        ys, xs = np.nonzero(sample.mask_gt)
        return float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max())
    j = sample.joints14_2d
    return float(j[:, 0].min()), float(j[:, 1].min()), float(j[:, 0].max()), float(j[:, 1].max())


def crop_resize(sample: MultimodalSample, bbox: tuple) -> MultimodalSample:
    """Crop to the 20%-padded bbox and resize (aspect preserved, zero padded)
    back to 224 x 224; joints and the stored camera are remapped exactly."""
    x0, y0, x1, y1 = (float(v) for v in bbox)
    if x1 <= x0 or y1 <= y0:
        raise ConfigError(f"degenerate bbox: {bbox}")
    w, h = x1 - x0, y1 - y0
    x0, x1 = x0 - 0.2 * w, x1 + 0.2 * w
    y0, y1 = y0 - 0.2 * h, y1 + 0.2 * h
    side = max(x1 - x0, y1 - y0)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    scale = (IMAGE_SIZE - 1) / side
    # map source point p -> (p - corner) * scale
    corner = np.array([cx - side / 2, cy - side / 2])
    A = np.array([[scale, 0.0, -corner[0] * scale], [0.0, scale, -corner[1] * scale]])

    def warp_stack(arr, nearest=False):
        return np.stack([_warp(c, A, nearest) for c in arr])

    ones = np.ones((14, 1))
    j2d = np.hstack([sample.joints14_2d, ones]) @ A.T
    gt_cam = None
    if sample.gt_cam is not None:
        s, tx, ty = sample.gt_cam
        gt_cam = np.array([s * scale, (tx - corner[0]) * scale, (ty - corner[1]) * scale])
    return replace(
        sample,
        rgb=warp_stack(sample.rgb),
        ir=warp_stack(sample.ir),
        depth=warp_stack(sample.depth),
        pm=warp_stack(sample.pm),
        mask_gt=_warp(sample.mask_gt, A, nearest=True),
        uncovered_depth=warp_stack(sample.uncovered_depth),
        uncovered_ir=warp_stack(sample.uncovered_ir),
        joints14_2d=j2d,
        joints14_3d=sample.joints14_3d.copy(),
        gt_cam=gt_cam,
    )
