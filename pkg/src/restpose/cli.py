"""Batch entry points: synthesize data, train fusion levels, evaluate, and
render report figures.

Exit codes: 0 success, 2 config error, 3 data error, 4 dependency error,
5 numeric failure. Every command validates its configuration fully before
writing anything. The RESTPOSE_DATA environment variable supplies the
default dataset root.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import bodymodel as bm
from . import report as rp
from .datagen import COVER_TYPES, GenConfig, generate_synthetic, load_slp
from .errors import (
    ConfigError,
    DataError,
    DegenerateGeometryError,
    DependencyError,
    FormatError,
    InvariantViolationError,
    OptimizationError,
    RestposeError,
)
from .losses import LossWeights
from .networks import NetConfig, count_parameters
from .pyramid import (
    TrainConfig,
    coarse_to_fine_forward,
    default_predictor,
    evaluate,
    level_layout,
    load_state,
    mean_init_vector,
    save_state,
    state_hash,
    train_level,
)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DEPENDENCY = 4
EXIT_NUMERIC = 5


@dataclass
class RunConfig:
    """Flat JSON-serializable training run configuration."""

    dataset: str
    out_dir: str
    level: int = 0
    seed: int = 0
    steps: int = 500
    batch_size: int = 8
    step_size: float = 1e-3
    encoder_scale: str = "toy"
    mask_size: int = 48
    sharpness: float = 30.0
    tol: float = 1e-4
    fit_refresh_every: int = 100
    fit_iters: int = 15
    loss_weights: dict = field(default_factory=dict)
    layout: list | None = None   # standalone (ablation) runs only
    num_threads: int = 0         # 0 = leave torch's default

    @classmethod
    def from_file(cls, path: str, overrides: dict) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: line {e.lineno}: {e.msg}")
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        if "dataset" not in raw or raw["dataset"] is None:
            raw["dataset"] = os.environ.get("RESTPOSE_DATA")
        if not raw.get("dataset"):
            raise ConfigError("no dataset given (config key 'dataset' or RESTPOSE_DATA)")
        if "out_dir" not in raw or not raw["out_dir"]:
            raise ConfigError("config needs 'out_dir'")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.level not in (0, 1, 2):
            raise ConfigError(f"level must be 0, 1 or 2, got {self.level}")
        if not Path(self.dataset).is_dir():
            raise ConfigError(f"dataset directory does not exist: {self.dataset}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.step_size <= 0:
            raise ConfigError("step_size must be positive")
        if self.encoder_scale not in ("toy", "paper"):
            raise ConfigError(f"encoder_scale must be 'toy' or 'paper', got {self.encoder_scale}")
        if self.layout is not None and self.level != 0:
            raise ConfigError("layout overrides are only valid for single-level (level 0) runs")
        LossWeights(**self.loss_weights)  # validates nonnegativity

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            step_size=self.step_size,
            seed=self.seed,
            mask_size=self.mask_size,
            sharpness=self.sharpness,
            tol=self.tol,
            weights=LossWeights(**self.loss_weights),
            net=NetConfig(scale=self.encoder_scale),
            fit_refresh_every=self.fit_refresh_every,
            fit_iters=self.fit_iters,
            layout_override=tuple(self.layout) if self.layout else None,
        )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_dataset(root: str):
    template, samples, manifest = load_slp(root)
    if template is None:
        raise DataError(f"dataset {root} has no template.arc; training needs the body template")
    return template, samples, manifest


def _train_split(samples, manifest):
    split = manifest.get("split", {})
    train_ids = set(split.get("train_ids", []))
    if not train_ids:
        return samples
    return [s for s in samples if s.subject_id in train_ids]


def _eval_split(samples, manifest):
    split = manifest.get("split", {})
    eval_ids = set(split.get("eval_ids", []))
    chosen = [s for s in samples if s.subject_id in eval_ids]
    return chosen if chosen else samples


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    covers = tuple(COVER_TYPES) if args.covers == "all" else tuple(args.covers.split(","))
    config = GenConfig(
        n_subjects=args.subjects,
        poses_per_subject=args.poses,
        seed=args.seed,
        cover_types=covers,
        pm_dropout=args.pm_dropout,
        ir_ghost=args.ir_ghost,
    )
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise ConfigError(f"output directory {out} is not empty")
    manifest = generate_synthetic(config, out)
    print(f"wrote {manifest['n_samples']} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config, {"level": args.level, "seed": args.seed})
    if cfg.num_threads:
        torch.set_num_threads(cfg.num_threads)
    run_dir = Path(cfg.out_dir)
    k = cfg.level
    lower_paths = [run_dir / f"level{j}" / "checkpoint.arc" for j in range(k)]
    for p in lower_paths:
        if not p.is_file():
            raise DependencyError(f"level {k} needs the lower checkpoint {p}")
    template, samples, manifest = _load_dataset(cfg.dataset)
    train_samples = _train_split(samples, manifest)

    mean_init = None
    mp_file = Path(cfg.dataset) / "mean_params.json"
    if k == 0 and mp_file.is_file():
        rec = json.loads(mp_file.read_text())
        mean_init = mean_init_vector(rec["theta"], rec["beta"], rec["cam"])

    lower_states = []
    for p in lower_paths:
        st = load_state(p)
        st.frozen = True
        lower_states.append(st)
    hashes_before = {f"level{j}": _sha256(p) for j, p in enumerate(lower_paths)}

    level_dir = run_dir / f"level{k}"
    state_path = level_dir / "train_state.arc"
    resume_from = state_path if (args.resume and state_path.is_file()) else None
    state = train_level(
        k,
        train_samples,
        lower_states,
        cfg.train_config(),
        template,
        mean_init=mean_init,
        resume_from=resume_from,
        train_state_path=state_path,
    )
    state.frozen = True
    level_dir.mkdir(parents=True, exist_ok=True)
    save_state(state, level_dir / "checkpoint.arc")
    with open(level_dir / "loss_curve.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        for recd in state.training_log:
            writer.writerow([recd["epoch"], repr(recd["loss"])])
    hashes_after = {f"level{j}": _sha256(p) for j, p in enumerate(lower_paths)}
    if hashes_before != hashes_after:
        raise InvariantViolationError("lower-level checkpoints changed on disk during training")
    (level_dir / "freeze_manifest.json").write_text(
        json.dumps({"lower_hashes": hashes_after, "self_hash": state_hash(state)},
                   sort_keys=True, indent=1)
    )
    if k == 0 and state.mean_params is not None:
        (run_dir / "mean_params.json").write_text(
            json.dumps(
                {
                    "theta": state.mean_params[:72].reshape(24, 3).tolist(),
                    "beta": state.mean_params[72:82].tolist(),
                    "cam": state.mean_params[82:85].tolist(),
                },
                sort_keys=True, indent=1,
            )
        )
    print(f"level {k}: trained {state.epoch} steps, checkpoint at {level_dir / 'checkpoint.arc'}")
    return 0


def _load_run_states(run_dir: Path, K: int):
    states = []
    for j in range(K + 1):
        p = run_dir / f"level{j}" / "checkpoint.arc"
        if not p.is_file():
            raise DependencyError(f"missing checkpoint for level {j}: {p}")
        states.append(load_state(p))
    return states


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise ConfigError(f"run directory does not exist: {run_dir}")
    data_root = args.data or os.environ.get("RESTPOSE_DATA")
    if not data_root:
        raise ConfigError("no dataset given (--data or RESTPOSE_DATA)")
    template, samples, manifest = _load_dataset(data_root)
    eval_samples = _eval_split(samples, manifest)
    K = args.levels
    states = _load_run_states(run_dir, K)

    level_reports = {}
    per_sample_rows = []
    for k in range(K + 1):
        rep = evaluate(eval_samples, default_predictor(states[: k + 1], template, K=k), template)
        level_reports[k] = rep
        for row in rep["per_sample"]:
            per_sample_rows.append({"level": k, **row})

    out_dir = run_dir / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    param_count = count_parameters(states[K].regressor, states[K].decoder)
    metrics_doc = {
        "levels": {
            str(k): {"strata": rep["strata"], "overall": rep["overall"]}
            for k, rep in level_reports.items()
        },
        "param_count": param_count,
        "n_eval_samples": len(eval_samples),
    }

    tables = {
        "table1.csv": rp.table_joint_errors(level_reports),
        "table2.csv": rp.table_segmentation(level_reports[K], param_count),
    }
    if args.ablate:
        ablation_rows = {}
        for entry in args.ablate:
            label, path = entry.split("=", 1) if "=" in entry else (Path(entry).name, entry)
            a_states = _load_run_states(Path(path), 0)
            rep = evaluate(eval_samples, default_predictor(a_states, template, K=0), template)
            ablation_rows[label] = rep
        ablation_rows[f"pyramid (k = {K})"] = level_reports[K]
        tables["table3.csv"] = rp.table_ablation(ablation_rows)
        metrics_doc["ablation"] = {
            label: {"strata": rep["strata"]} for label, rep in ablation_rows.items()
        }

    (out_dir / "metrics.json").write_text(json.dumps(metrics_doc, sort_keys=True, indent=1))
    with open(out_dir / "per_sample.jsonl", "w") as f:
        for row in per_sample_rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    for name, rows in tables.items():
        rp.write_csv(rows, out_dir / name)
        print(rp.format_text_table(rows))
    print(f"metrics written to {out_dir}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise ConfigError(f"run directory does not exist: {run_dir}")
    data_root = args.data or os.environ.get("RESTPOSE_DATA")
    if not data_root:
        raise ConfigError("no dataset given (--data or RESTPOSE_DATA)")
    template, samples, manifest = _load_dataset(data_root)
    eval_samples = _eval_split(samples, manifest)
    K = args.levels
    states = _load_run_states(run_dir, K)
    out_dir = Path(args.figures) if args.figures else run_dir / "figures"
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(args.seed)
    rows = []
    for cover in ("uncover", "cover1", "cover2"):
        pool = [s for s in eval_samples if s.cover_type == cover]
        if not pool:
            continue
        sample = pool[int(rng.integers(len(pool)))]
        vec = states[0].mean_params
        with torch.no_grad():
            result = None
            for st in states[: K + 1]:
                result = coarse_to_fine_forward(st, template, sample, vec)
                fine = result.fine
                vec = np.concatenate(
                    [
                        fine.theta.numpy().reshape(-1),
                        fine.beta.numpy().reshape(-1),
                        [float(fine.cam.s), float(fine.cam.t[0]), float(fine.cam.t[1])],
                    ]
                )
        pred_2d = result.fine.joints14_2d.detach().numpy()
        rp.fig_qualitative(sample, result, pred_2d, out_dir / f"qualitative_{cover}.png")
        rp.fig_before_after(sample, template, result, out_dir / f"before_after_{cover}.png")
        err = float(np.linalg.norm(pred_2d - sample.joints14_2d, axis=1).mean())
        rows.append({"sample_id": sample.sample_id, "cover_type": cover, "mean_joint_err_px": err})

    states_log = states[K].training_log
    if states_log:
        rp.fig_loss_curve(states_log, out_dir / f"loss_level{K}.png")
    with open(out_dir / "figure_samples.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["sample_id", "cover_type", "mean_joint_err_px"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print(f"figures written to {out_dir}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="restpose", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=2)
    p.add_argument("--poses", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--covers", default="all", help="'all' or comma list of uncover,cover1,cover2")
    p.add_argument("--pm-dropout", action="store_true")
    p.add_argument("--ir-ghost", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one fusion level")
    p.add_argument("--config", required=True, help="RunConfig JSON file")
    p.add_argument("--level", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a run and write tables")
    p.add_argument("--run", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--levels", type=int, default=0, help="highest fusion level K")
    p.add_argument("--ablate", nargs="*", default=None,
                   help="label=run_dir entries for the modality ablation table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render qualitative figures")
    p.add_argument("--run", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--levels", type=int, default=0)
    p.add_argument("--figures", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DependencyError as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (OptimizationError, DegenerateGeometryError, InvariantViolationError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except RestposeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
