"""Level-wise pyramid fusion: train one fusion level at a time with every
lower level frozen, chain their predictions as initialization, and run the
coarse-to-fine reconstruct-and-refine cycle inside each level.

Level modality stacks follow the fixed schedule: level 0 fuses depth + IR,
level 1 adds the pressure map, level 2 adds RGB. Each level owns its own
regressor and reconstruction decoder.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import bodymodel as bm
from .archive import decode_archive, encode_archive
from .bodymodel import BodyParams, BodyTemplate, Camera
from .datagen import MultimodalSample
from .errors import ConfigError, DataError, InvariantViolationError
from .fitting import FitConfig, FitResult, fit_body_to_joints
from .losses import (
    JointTargets,
    LossWeights,
    StagePrediction,
    loss_mask,
    loss_regressor_total,
    masked_recon_term,
)
from .metrics import mpjpe, reconstruction_error, seg_scores
from .networks import (
    IMAGE_SIZE,
    LEVEL_MODALITIES,
    Decoder,
    DecoderOutput,
    NetConfig,
    Regressor,
    RegressorOutput,
    build_decoder,
    build_regressor,
    decoder_forward,
    hard_silhouette,
    layout_channels,
    rasterize_silhouette,
    regressor_forward,
    scale_camera,
)

COVER_ORDER = ("cover2", "cover1", "uncover")  # reporting order


@dataclass
class TrainConfig:
    steps: int = 500               # optimizer steps; one step consumes one batch
    batch_size: int = 8
    step_size: float = 1e-4        # Adam learning rate (toy default)
    seed: int = 0
    mask_size: int = 48            # rasterization grid during training
    sharpness: float = 30.0
    tol: float = 1e-4              # relative epoch-loss change that stops training
    weights: LossWeights = field(default_factory=LossWeights)
    net: NetConfig = field(default_factory=NetConfig)
    fit_refresh_every: int = 100   # steps between optimization-target refreshes; 0 = off
    fit_iters: int = 15
    layout_override: tuple | None = None  # standalone (non-pyramid) runs only


@dataclass
class FusionLevelState:
    level: int
    layout: tuple
    regressor: Regressor
    decoder: Decoder
    frozen: bool = False
    seed: int = 0
    epoch: int = 0
    mask_size: int = 48
    sharpness: float = 30.0
    mean_params: np.ndarray | None = None   # (85,) level-0 initialization
    training_log: list = field(default_factory=list)


def level_layout(k: int) -> tuple:
    if k not in LEVEL_MODALITIES:
        raise ConfigError(f"fusion level must be 0, 1 or 2, got {k}")
    return LEVEL_MODALITIES[k]


def build_stack(sample: MultimodalSample, layout) -> torch.Tensor:
    """Concatenate the sample's modalities in layout order as float32."""
    parts = []
    for name in layout:
        arr = sample.modality(name)
        if arr is None:
            raise DataError(f"sample {sample.sample_id} lacks modality '{name}'")
        parts.append(torch.as_tensor(np.asarray(arr), dtype=torch.float32))
    return torch.cat(parts, dim=0)


def mean_init_vector(mean_theta, mean_beta, mean_cam) -> np.ndarray:
    return np.concatenate(
        [
            np.asarray(mean_theta, dtype=np.float64).reshape(-1),
            np.asarray(mean_beta, dtype=np.float64).reshape(-1),
            np.asarray(mean_cam, dtype=np.float64).reshape(3),
        ]
    )


def stage_prediction(template: BodyTemplate, out: RegressorOutput, stage: int) -> StagePrediction:
    mesh = bm.forward(template, out.theta, out.beta)
    j3d = bm.regress_joints14(template, mesh)
    cam = out.camera()
    j2d = bm.project(j3d, cam)
    return StagePrediction(
        theta=out.theta, beta=out.beta, cam=cam, mesh=mesh,
        joints14_3d=j3d, joints14_2d=j2d, stage=stage,
    )


@dataclass
class CoarseFineResult:
    coarse: StagePrediction
    fine: StagePrediction
    recon: DecoderOutput
    mask: torch.Tensor       # soft silhouette at mask_size
    mask_full: torch.Tensor  # soft silhouette upsampled to 224


def _upsample_mask(mask: torch.Tensor, size: int = IMAGE_SIZE) -> torch.Tensor:
    if mask.shape[-1] == size:
        return mask
    return F.interpolate(
        mask.reshape(1, 1, *mask.shape), size=(size, size), mode="bilinear", align_corners=False
    )[0, 0]


def coarse_to_fine_forward(
    state: FusionLevelState,
    template: BodyTemplate,
    sample: MultimodalSample,
    init,
    bypass_recon: bool = False,
) -> CoarseFineResult:
    """One full cycle: coarse regression, silhouette, reconstruction of the
    uncovered depth/IR, and the fine regression on the reconstructed stack.

    With bypass_recon the fine pass re-reads the covered inputs (used by the
    reconstruction-module ablation).
    """
    stack = build_stack(sample, state.layout)
    init_vec = torch.as_tensor(
        init.vector if isinstance(init, RegressorOutput) else init, dtype=torch.float32
    ).reshape(-1)
    coarse_out, feats = regressor_forward(state.regressor, stack, init_vec)
    coarse = stage_prediction(template, coarse_out, stage=0)

    raster_cam = scale_camera(coarse.cam, state.mask_size / IMAGE_SIZE)
    mask = rasterize_silhouette(
        coarse.mesh.vertices, template.faces, raster_cam,
        size=state.mask_size, sharpness=state.sharpness,
    )
    mask_full = _upsample_mask(mask)

    depth = stack[0:1]
    ir = stack[1:2]
    recon = decoder_forward(state.decoder, mask_full * depth, mask_full * ir, feats)

    if bypass_recon:
        fine_stack = stack
    else:
        fine_stack = torch.cat([recon.depth_uncovered, recon.ir_uncovered, stack[2:]], dim=0)
    fine_out, _ = regressor_forward(state.regressor, fine_stack, coarse_out.vector)
    fine = stage_prediction(template, fine_out, stage=1)
    return CoarseFineResult(coarse=coarse, fine=fine, recon=recon, mask=mask, mask_full=mask_full)


# ---------------------------------------------------------------------------
# state serialization
# ---------------------------------------------------------------------------


def serialize_state(state: FusionLevelState) -> bytes:
    arrays: dict[str, np.ndarray] = {}
    for prefix, module in (("g", state.regressor), ("d", state.decoder)):
        for name, tensor in sorted(module.state_dict().items()):
            arrays[f"{prefix}.{name}"] = tensor.detach().cpu().numpy()
    if state.mean_params is not None:
        arrays["mean_params"] = np.asarray(state.mean_params, dtype=np.float64)
    meta = {
        "kind": "fusion_level_checkpoint",
        "level": state.level,
        "channel_layout": list(state.layout),
        "encoder_config": {"scale": state.regressor.config.scale,
                           "ief_iters": state.regressor.config.ief_iters,
                           "head_hidden": state.regressor.config.head_hidden},
        "seed": state.seed,
        "epoch": state.epoch,
        "frozen": state.frozen,
        "mask_size": state.mask_size,
        "sharpness": state.sharpness,
        "training_log": state.training_log,
    }
    return encode_archive(arrays, meta=meta)


def state_hash(state: FusionLevelState) -> str:
    return hashlib.sha256(serialize_state(state)).hexdigest()


def save_state(state: FusionLevelState, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(serialize_state(state))


def load_state(path: str | Path) -> FusionLevelState:
    arrays, meta = decode_archive(Path(path).read_bytes(), source=str(path))
    cfg = NetConfig(
        scale=meta["encoder_config"]["scale"],
        ief_iters=meta["encoder_config"]["ief_iters"],
        head_hidden=meta["encoder_config"]["head_hidden"],
    )
    layout = tuple(meta["channel_layout"])
    regressor = build_regressor(layout, seed=meta["seed"], config=cfg)
    decoder = build_decoder(seed=meta["seed"] + 1, config=cfg)
    g_sd = {k[2:]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("g.")}
    d_sd = {k[2:]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("d.")}
    regressor.load_state_dict(g_sd)
    decoder.load_state_dict(d_sd)
    return FusionLevelState(
        level=int(meta["level"]),
        layout=layout,
        regressor=regressor,
        decoder=decoder,
        frozen=bool(meta["frozen"]),
        seed=int(meta["seed"]),
        epoch=int(meta["epoch"]),
        mask_size=int(meta["mask_size"]),
        sharpness=float(meta["sharpness"]),
        mean_params=arrays.get("mean_params"),
        training_log=list(meta.get("training_log", [])),
    )


# ---------------------------------------------------------------------------
# full training state (for exact resume)
# ---------------------------------------------------------------------------


def save_train_state(
    path: str | Path,
    state: FusionLevelState,
    opt: torch.optim.Adam,
    np_rng: np.random.Generator,
    next_step: int,
    fits: dict,
) -> None:
    """Persist everything a seed-aligned restart needs: weights, Adam moments,
    both RNG states, and the in-the-loop fit targets."""
    arrays: dict[str, np.ndarray] = {}
    for prefix, module in (("g", state.regressor), ("d", state.decoder)):
        for name, tensor in sorted(module.state_dict().items()):
            arrays[f"{prefix}.{name}"] = tensor.detach().cpu().numpy()
    if state.mean_params is not None:
        arrays["mean_params"] = np.asarray(state.mean_params, dtype=np.float64)
    opt_sd = opt.state_dict()
    for idx, entry in opt_sd["state"].items():
        for key, val in entry.items():
            arrays[f"opt.{idx}.{key}"] = (
                val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray([float(val)])
            )
    arrays["torch_rng"] = torch.get_rng_state().numpy()
    for sid, (fit, mesh_opt, obj) in fits.items():
        arrays[f"fit.{sid}.theta"] = fit.theta_opt
        arrays[f"fit.{sid}.beta"] = fit.beta_opt
        arrays[f"fit.{sid}.cam"] = np.array(
            [float(fit.cam_opt.s), float(fit.cam_opt.t[0]), float(fit.cam_opt.t[1]), obj]
        )
    meta = {
        "kind": "train_state",
        "level": state.level,
        "channel_layout": list(state.layout),
        "encoder_config": {"scale": state.regressor.config.scale,
                           "ief_iters": state.regressor.config.ief_iters,
                           "head_hidden": state.regressor.config.head_hidden},
        "seed": state.seed,
        "epoch": state.epoch,
        "frozen": state.frozen,
        "mask_size": state.mask_size,
        "sharpness": state.sharpness,
        "training_log": state.training_log,
        "next_step": next_step,
        "np_rng_state": np_rng.bit_generator.state,
        "opt_param_groups": [
            {k: v for k, v in g.items() if k != "params"} for g in opt_sd["param_groups"]
        ],
        "opt_group_sizes": [len(g["params"]) for g in opt_sd["param_groups"]],
        "fit_ids": sorted(fits.keys()),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_archive(arrays, meta=meta))


def _restore_train_state(path: str | Path, template: BodyTemplate):
    from .fitting import FitResult

    arrays, meta = decode_archive(Path(path).read_bytes(), source=str(path))
    cfg = NetConfig(
        scale=meta["encoder_config"]["scale"],
        ief_iters=meta["encoder_config"]["ief_iters"],
        head_hidden=meta["encoder_config"]["head_hidden"],
    )
    layout = tuple(meta["channel_layout"])
    state = FusionLevelState(
        level=int(meta["level"]),
        layout=layout,
        regressor=build_regressor(layout, seed=meta["seed"], config=cfg),
        decoder=build_decoder(seed=meta["seed"] + 1, config=cfg),
        frozen=False,
        seed=int(meta["seed"]),
        epoch=int(meta["epoch"]),
        mask_size=int(meta["mask_size"]),
        sharpness=float(meta["sharpness"]),
        mean_params=arrays.get("mean_params"),
        training_log=list(meta.get("training_log", [])),
    )
    state.regressor.load_state_dict(
        {k[2:]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("g.")}
    )
    state.decoder.load_state_dict(
        {k[2:]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("d.")}
    )
    fits: dict[str, tuple] = {}
    for sid in meta.get("fit_ids", []):
        theta = arrays[f"fit.{sid}.theta"]
        beta = arrays[f"fit.{sid}.beta"]
        cam = arrays[f"fit.{sid}.cam"]
        fit = FitResult(
            theta_opt=theta,
            beta_opt=beta,
            cam_opt=Camera(
                s=float(cam[0]), t=cam[1:3].copy(),
                R=bm.rodrigues(torch.as_tensor(theta[0], dtype=torch.float64)).numpy(),
            ),
            final_objective=float(cam[3]),
            iterations_used=0,
        )
        with torch.no_grad():
            mesh_opt = bm.forward(template, theta, beta)
            mesh_opt = bm.Mesh(
                vertices=mesh_opt.vertices.to(torch.float32),
                joints24=mesh_opt.joints24.to(torch.float32),
            )
        fits[sid] = (fit, mesh_opt, float(cam[3]))
    opt_entries: dict[int, dict] = {}
    for key, arr in arrays.items():
        if not key.startswith("opt."):
            continue
        _, idx, name = key.split(".", 2)
        entry = opt_entries.setdefault(int(idx), {})
        if name == "step":
            entry[name] = torch.tensor(float(arr[0]))
        else:
            entry[name] = torch.from_numpy(arr.copy())
    payload = {
        "state": state,
        "fits": fits,
        "opt_entries": opt_entries,
        "opt_param_groups": meta["opt_param_groups"],
        "opt_group_sizes": meta["opt_group_sizes"],
        "torch_rng": arrays["torch_rng"],
        "np_rng_state": meta["np_rng_state"],
        "next_step": int(meta["next_step"]),
    }
    return payload


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _gt_targets(sample: MultimodalSample) -> JointTargets:
    return JointTargets(
        joints2d=torch.as_tensor(sample.joints14_2d, dtype=torch.float32),
        joints3d=torch.as_tensor(sample.joints14_3d, dtype=torch.float32),
    )


def _chain_init_vectors(
    lower_states: list[FusionLevelState], template: BodyTemplate, samples: list[MultimodalSample]
) -> dict[str, np.ndarray]:
    """Run the frozen lower chain once per sample; its fine parameters are
    the initialization for the next level."""
    inits: dict[str, np.ndarray] = {}
    for sample in samples:
        vec = lower_states[0].mean_params
        if vec is None:
            raise ConfigError("level-0 state carries no mean parameters")
        with torch.no_grad():
            for state in lower_states:
                fine = coarse_to_fine_forward(state, template, sample, vec).fine
                vec = np.concatenate(
                    [
                        fine.theta.detach().numpy().reshape(-1),
                        fine.beta.detach().numpy().reshape(-1),
                        [float(fine.cam.s), float(fine.cam.t[0]), float(fine.cam.t[1])],
                    ]
                )
        inits[sample.sample_id] = np.asarray(vec, dtype=np.float64)
    return inits


def _sample_loss(
    state: FusionLevelState,
    template: BodyTemplate,
    sample: MultimodalSample,
    init_vec,
    fits: dict,
    cfg: TrainConfig,
):
    result = coarse_to_fine_forward(state, template, sample, init_vec)
    targets = _gt_targets(sample)
    fit_entry = fits.get(sample.sample_id)
    loss_g = loss_regressor_total([result.coarse, result.fine], targets, fit_entry, cfg.weights)
    mask_gt = torch.as_tensor(sample.mask_gt, dtype=torch.float32)
    l_mask = loss_mask(result.mask_full, mask_gt)
    l_rec = masked_recon_term(
        result.recon.depth_uncovered, torch.as_tensor(sample.uncovered_depth, dtype=torch.float32), mask_gt
    ) + masked_recon_term(
        result.recon.ir_uncovered, torch.as_tensor(sample.uncovered_ir, dtype=torch.float32), mask_gt
    )
    loss_d = cfg.weights.w_mask * l_mask + cfg.weights.w_recon * l_rec
    return loss_g + loss_d, result


def _refresh_fits(
    state: FusionLevelState,
    template: BodyTemplate,
    samples: list[MultimodalSample],
    inits: dict,
    fits: dict,
    cfg: TrainConfig,
) -> None:
    """SPIN-style in-the-loop targets: refit from the current prediction and
    keep whichever parameters reach the lower objective."""
    fit_cfg = FitConfig(max_iters=cfg.fit_iters)
    for sample in samples:
        with torch.no_grad():
            result = coarse_to_fine_forward(state, template, sample, inits[sample.sample_id])
        init_params = BodyParams(
            theta=result.fine.theta.detach().numpy(), beta=result.fine.beta.detach().numpy()
        )
        init_cam = np.array(
            [float(result.fine.cam.s), float(result.fine.cam.t[0]), float(result.fine.cam.t[1])]
        )
        fit = fit_body_to_joints(
            template, sample.joints14_2d, sample.joints14_3d,
            init_params=init_params, init_cam=init_cam, config=fit_cfg,
        )
        old = fits.get(sample.sample_id)
        if old is None or fit.final_objective < old[2]:
            with torch.no_grad():
                mesh_opt = bm.forward(template, fit.theta_opt, fit.beta_opt)
                mesh_opt = bm.Mesh(
                    vertices=mesh_opt.vertices.to(torch.float32),
                    joints24=mesh_opt.joints24.to(torch.float32),
                )
            fits[sample.sample_id] = (fit, mesh_opt, fit.final_objective)


def train_level(
    k: int,
    dataset: list[MultimodalSample],
    lower_states: list[FusionLevelState],
    config: TrainConfig,
    template: BodyTemplate,
    mean_init: np.ndarray | None = None,
    resume_from: str | Path | None = None,
    train_state_path: str | Path | None = None,
) -> FusionLevelState:
    """Train fusion level k. Lower states must be the k frozen lower levels;
    their serialized bytes are verified unchanged. For k = 0 (or standalone
    layouts) `mean_init` supplies the 85-entry mean-parameter vector.

    `resume_from` continues a run saved by `train_state_path` exactly (same
    weights, optimizer moments, and RNG streams)."""
    if len(lower_states) != k:
        raise ConfigError(f"level {k} requires exactly {k} lower states, got {len(lower_states)}")
    for st in lower_states:
        if not st.frozen:
            raise InvariantViolationError(f"lower level {st.level} is not frozen")
    if not dataset:
        raise DataError("training dataset is empty")
    layout = tuple(config.layout_override) if config.layout_override else level_layout(k)
    if config.layout_override and k > 0:
        raise ConfigError("layout overrides are only for standalone single-level runs")

    lower_hashes = [state_hash(st) for st in lower_states]
    for st in lower_states:
        st.regressor.eval()
        st.decoder.eval()

    seed = config.seed * 10007 + k
    rng = np.random.default_rng(seed)
    start_step = 0
    fits: dict[str, tuple] = {}
    if resume_from is None:
        torch.manual_seed(seed)
        state = FusionLevelState(
            level=k,
            layout=layout,
            regressor=build_regressor(layout, seed=seed, config=config.net),
            decoder=build_decoder(seed=seed + 1, config=config.net),
            frozen=False,
            seed=seed,
            mask_size=config.mask_size,
            sharpness=config.sharpness,
        )
        opt = torch.optim.Adam(
            list(state.regressor.parameters()) + list(state.decoder.parameters()),
            lr=config.step_size,
        )
    else:
        payload = _restore_train_state(resume_from, template)
        state = payload["state"]
        if state.level != k or state.layout != layout:
            raise ConfigError("resume state does not match the requested level/layout")
        fits = payload["fits"]
        opt = torch.optim.Adam(
            list(state.regressor.parameters()) + list(state.decoder.parameters()),
            lr=config.step_size,
        )
        sd = opt.state_dict()
        sd["state"] = payload["opt_entries"]
        for group, saved in zip(sd["param_groups"], payload["opt_param_groups"]):
            group.update(saved)
        opt.load_state_dict(sd)
        torch.set_rng_state(torch.from_numpy(payload["torch_rng"].copy()))
        rng.bit_generator.state = payload["np_rng_state"]
        start_step = payload["next_step"]

    if k == 0:
        if state.mean_params is None:
            if mean_init is None:
                with_gt = [s.gt_params for s in dataset if s.gt_params is not None]
                cams = [s.gt_cam for s in dataset if s.gt_cam is not None]
                if not with_gt or not cams:
                    raise ConfigError("level 0 needs mean_init or ground-truth parameters in the dataset")
                mp = bm.mean_params(with_gt)
                mean_init = mean_init_vector(mp.theta, mp.beta, np.mean(cams, axis=0))
            state.mean_params = np.asarray(mean_init, dtype=np.float64)
        inits = {s.sample_id: state.mean_params for s in dataset}
    else:
        inits = _chain_init_vectors(lower_states, template, dataset)
        state.mean_params = lower_states[0].mean_params

    prev_epoch_loss = state.training_log[-1]["loss"] if state.training_log else None
    below_tol_streak = 0
    next_step = start_step
    for step in range(start_step, config.steps):
        if config.fit_refresh_every and step > 0 and step % config.fit_refresh_every == 0:
            _refresh_fits(state, template, dataset, inits, fits, config)
        order = rng.permutation(len(dataset))
        batch_idx = order[: config.batch_size]
        opt.zero_grad()
        batch_loss = 0.0
        for i in batch_idx:
            sample = dataset[int(i)]
            loss, _ = _sample_loss(state, template, sample, inits[sample.sample_id], fits, config)
            (loss / len(batch_idx)).backward()
            batch_loss += float(loss.detach()) / len(batch_idx)
        opt.step()
        state.training_log.append({"epoch": step, "loss": batch_loss})
        state.epoch = step + 1
        next_step = step + 1
        if prev_epoch_loss is not None:
            # loss-change stop: must stay below tol for several consecutive
            # steps so a momentary plateau does not end the run
            if abs(prev_epoch_loss - batch_loss) < config.tol * max(1.0, abs(prev_epoch_loss)):
                below_tol_streak += 1
                if below_tol_streak >= 5:
                    break
            else:
                below_tol_streak = 0
        prev_epoch_loss = batch_loss

    for st, before in zip(lower_states, lower_hashes):
        if state_hash(st) != before:
            raise InvariantViolationError(f"frozen level {st.level} changed during train_level({k})")
    if train_state_path is not None:
        save_train_state(train_state_path, state, opt, rng, next_step, fits)
    return state


# ---------------------------------------------------------------------------
# prediction and evaluation
# ---------------------------------------------------------------------------


def predict(
    states: list[FusionLevelState],
    template: BodyTemplate,
    sample: MultimodalSample,
    K: int,
    bypass_recon: bool = False,
) -> tuple[BodyParams, Camera, bm.Mesh]:
    """Chain levels 0..K; each level starts from the previous level's fine
    output and the result is level K's fine prediction."""
    if K + 1 > len(states):
        raise ConfigError(f"predict needs {K + 1} level states, got {len(states)}")
    vec = states[0].mean_params
    if vec is None:
        raise ConfigError("level-0 state carries no mean parameters")
    fine = None
    with torch.no_grad():
        for state in states[: K + 1]:
            result = coarse_to_fine_forward(state, template, sample, vec, bypass_recon=bypass_recon)
            fine = result.fine
            vec = np.concatenate(
                [
                    fine.theta.detach().numpy().reshape(-1),
                    fine.beta.detach().numpy().reshape(-1),
                    [float(fine.cam.s), float(fine.cam.t[0]), float(fine.cam.t[1])],
                ]
            )
    params = BodyParams(theta=fine.theta.detach().numpy(), beta=fine.beta.detach().numpy())
    return params, fine.cam, fine.mesh


def default_predictor(states, template, K: int, bypass_recon: bool = False):
    def run(sample: MultimodalSample):
        return predict(states, template, sample, K, bypass_recon=bypass_recon)

    return run


def evaluate(
    dataset: list[MultimodalSample],
    predictor,
    template: BodyTemplate,
    mask_size: int = 112,
    sharpness: float = 30.0,
) -> dict:
    """Per-cover-type MPJPE, reconstruction error and segmentation scores.

    `predictor` maps a sample to (BodyParams, Camera, Mesh). Strata with no
    samples are reported as absent.
    """
    per_sample = []
    for sample in dataset:
        params, cam, mesh = predictor(sample)
        with torch.no_grad():
            mesh64 = bm.forward(template, params.theta, params.beta)
            j3d = bm.regress_joints14(template, mesh64).numpy()
        rec = {
            "sample_id": sample.sample_id,
            "subject_id": sample.subject_id,
            "cover_type": sample.cover_type,
            "mpjpe_mm": mpjpe(j3d, sample.joints14_3d),
            "rec_err_mm": reconstruction_error(j3d, sample.joints14_3d),
        }
        with torch.no_grad():
            raster_cam = scale_camera(cam, mask_size / IMAGE_SIZE)
            soft = rasterize_silhouette(
                mesh64.vertices, template.faces, raster_cam, size=mask_size, sharpness=sharpness
            )
            hard = hard_silhouette(_upsample_mask(soft)).numpy()
        scores = seg_scores(hard, sample.mask_gt)
        rec["seg_accuracy"] = scores["accuracy"]
        rec["seg_f1"] = scores["f1"]
        per_sample.append(rec)

    strata = {}
    for cover in COVER_ORDER:
        rows = [r for r in per_sample if r["cover_type"] == cover]
        if not rows:
            continue
        strata[cover] = {
            "n": len(rows),
            "mpjpe_mm": float(np.mean([r["mpjpe_mm"] for r in rows])),
            "rec_err_mm": float(np.mean([r["rec_err_mm"] for r in rows])),
            "seg_accuracy": float(np.mean([r["seg_accuracy"] for r in rows])),
            "seg_f1": float(np.mean([r["seg_f1"] for r in rows])),
        }
    overall = {
        "n": len(per_sample),
        "mpjpe_mm": float(np.mean([r["mpjpe_mm"] for r in per_sample])),
        "rec_err_mm": float(np.mean([r["rec_err_mm"] for r in per_sample])),
        "seg_accuracy": float(np.mean([r["seg_accuracy"] for r in per_sample])),
        "seg_f1": float(np.mean([r["seg_f1"] for r in per_sample])),
    }
    return {"strata": strata, "overall": overall, "per_sample": per_sample}
