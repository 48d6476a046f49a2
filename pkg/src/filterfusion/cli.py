"""Command-line surface: dataset generation, pretraining, training,
evaluation, weight tracing, and the full architecture x blackout sweep.

Every command is a pure function of its flags, input files, and seed;
reruns produce identical artifacts. All outputs land under ``--out``
together with a manifest of content hashes. Exit codes: 0 success, 1
usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import simenv, svgplot, trainer
from .fusion import (ARCHITECTURE_KINDS, build_architecture, likelihood_grid,
                     sensor_likelihood_grid, trace_weights, write_trace_csv)
from .task import TASKS

SWEEP_BLACKOUTS = (0.0, 0.4, 0.8)
EVAL_PARTICLES = 100


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1, not 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Experiment config


@dataclasses.dataclass
class ExperimentConfig:
    """One human-readable JSON file driving a full experiment."""

    task: str = "push"
    architecture: str = "crossmodal-ekf"
    blackout: float = 0.0
    train_data: str | None = None
    test_data: str | None = None
    n_traj: int = 300
    n_steps: int = 120
    n_test: int = 10
    seed: int = 0
    out_dir: str = "runs"
    train: trainer.TrainConfig = dataclasses.field(
        default_factory=trainer.TrainConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of "
                             f"{tuple(TASKS)}")
        if self.architecture not in ARCHITECTURE_KINDS:
            raise ValueError(f"unknown architecture {self.architecture!r}; "
                             f"expected one of {ARCHITECTURE_KINDS}")
        if not 0.0 <= self.blackout <= 1.0:
            raise ValueError(f"blackout {self.blackout} outside [0, 1]")
        if isinstance(self.train, dict):
            self.train = trainer.TrainConfig.from_dict(self.train)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["train"] = self.train.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"config {path} is not valid JSON: {exc}")
        return cls.from_dict(data)

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# Artifact helpers


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def update_manifest(out_dir: Path, paths) -> Path:
    """Record content hashes of artifacts, merged into manifest.json."""
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    entries = {}
    if manifest_path.exists():
        entries = json.loads(manifest_path.read_text())
    for p in paths:
        p = Path(p)
        entries[p.relative_to(out_dir).as_posix()] = _sha256(p)
    manifest_path.write_text(
        json.dumps(entries, indent=2, sort_keys=True) + "\n")
    return manifest_path


def _ensure_out(path_str: str) -> Path:
    out = Path(path_str)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(path_str: str) -> simenv.Dataset:
    path = Path(path_str)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return simenv.read_dataset(path)


def _phase_seed(seed: int, phase: int) -> int:
    return int(np.random.SeedSequence([seed, phase]).generate_state(1)[0])


def _build_from_checkpoint(ckpt_path: str):
    """Rebuild the architecture a checkpoint was saved from."""
    ckpt = trainer.load_checkpoint(ckpt_path)
    meta = ckpt.meta
    for key in ("architecture", "task"):
        if key not in meta:
            raise ValueError(f"checkpoint {ckpt_path} lacks {key!r} metadata")
    arch = build_architecture(meta["architecture"], TASKS[meta["task"]],
                              np.random.default_rng(0))
    trainer.apply_checkpoint(arch, ckpt)
    return arch, ckpt


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    dataset = simenv.generate_dataset(args.task, args.traj, args.steps,
                                      args.blackout, args.seed)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    simenv.write_dataset(out, dataset)
    contact = float(np.mean([t.contacts.mean()
                             for t in dataset.trajectories]))
    black = float(np.mean([t.blackouts.mean()
                           for t in dataset.trajectories]))
    print(f"wrote {out}: task={args.task} traj={args.traj} "
          f"steps={args.steps} state_dim={dataset.task.state_dim}")
    print(f"contact fraction: {contact:.4f}")
    print(f"blackout fraction: {black:.4f} (target {args.blackout:g})")
    return 0


# ---------------------------------------------------------------------------
# pretrain


def _pretrain_into(arch, dataset, config, stage: str) -> dict:
    logs = {}
    if stage in ("dynamics", "all"):
        if hasattr(arch, "dynamics"):
            logs["dynamics"] = trainer.pretrain_dynamics(
                arch.dynamics, dataset, config)
        else:
            print(f"{arch.kind} has no dynamics model; skipping that stage")
    if stage in ("measurement", "all"):
        curves = trainer.pretrain_measurement(arch, dataset, config)
        if curves:
            logs["measurement"] = curves
        elif stage == "measurement":
            print(f"{arch.kind} has no measurement models or virtual "
                  f"sensors; nothing to pretrain")
    return logs


def cmd_pretrain(args) -> int:
    config = _train_config_from(args)
    dataset = _load_dataset(args.data)
    arch = build_architecture(args.arch, dataset.task,
                              np.random.default_rng(args.seed))
    logs = _pretrain_into(arch, dataset, config, args.stage)
    out = _ensure_out(args.out)
    ckpt_path = out / "pretrained.dfck"
    trainer.save_checkpoint(
        ckpt_path, arch.named_parameters(),
        meta={"architecture": arch.kind, "task": dataset.task.name,
              "stage": f"pretrained:{args.stage}", "seed": args.seed,
              "config": config.to_dict()})
    log_path = out / "pretrain_log.json"
    log_path.write_text(json.dumps(logs, indent=2) + "\n")
    update_manifest(out, [ckpt_path, log_path])
    for name, log in sorted(logs.items()):
        curves = log if isinstance(log, dict) else dict(enumerate(log))
        for key, curve in sorted(curves.items(), key=lambda kv: str(kv[0])):
            print(f"{name}[{key}]: first {curve[0]:.5f} "
                  f"last {curve[-1]:.5f} ({len(curve)} steps)")
    print(f"wrote {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    config = _train_config_from(args)
    dataset = _load_dataset(args.data)
    out = _ensure_out(args.out)
    state_path = out / "train_state.dfck"

    completed = 0
    history = []
    if args.resume and state_path.exists():
        arch, ckpt = _build_from_checkpoint(state_path)
        if arch.kind != args.arch:
            raise ValueError(f"cannot resume {args.arch} from a "
                             f"{arch.kind} checkpoint")
        completed = int(ckpt.meta.get("completed_phases", 0))
        history = ckpt.meta.get("history", [])
        print(f"resuming after {completed} completed phase(s)")
    elif args.init:
        arch, _ = _build_from_checkpoint(args.init)
        if arch.kind != args.arch:
            raise ValueError(f"--init checkpoint is for {arch.kind}, "
                             f"not {args.arch}")
    else:
        arch = build_architecture(args.arch, dataset.task,
                                  np.random.default_rng(args.seed))

    # one phase per schedule entry, each a pure function of the incoming
    # parameters, so an interrupted run resumed from train_state.dfck
    # reproduces the uninterrupted run exactly
    for phase, length in enumerate(config.schedule):
        if phase < completed:
            continue
        phase_cfg = trainer.TrainConfig.from_dict(
            {**config.to_dict(), "schedule": [length],
             "seed": _phase_seed(args.seed, phase)})
        hist = trainer.train_end_to_end(arch, dataset, phase_cfg)
        history.append({"phase": phase, "length": length,
                        "train": hist["train"], "val": hist["val"],
                        "probe": hist["probe"]})
        trainer.save_checkpoint(
            state_path, arch.named_parameters(),
            meta={"architecture": arch.kind, "task": dataset.task.name,
                  "stage": "training", "seed": args.seed,
                  "completed_phases": phase + 1, "history": history,
                  "config": config.to_dict()})
        print(f"phase {phase} (length {length}): "
              f"train {hist['train'][0]:.5f} -> {hist['train'][-1]:.5f}, "
              f"val {hist['val'][-1]:.5f}")

    final_path = out / "trained.dfck"
    trainer.save_checkpoint(
        final_path, arch.named_parameters(),
        meta={"architecture": arch.kind, "task": dataset.task.name,
              "stage": "trained", "seed": args.seed, "history": history,
              "config": config.to_dict()})
    log_path = out / "loss_log.json"
    log_path.write_text(json.dumps(history, indent=2) + "\n")
    update_manifest(out, [state_path, final_path, log_path])
    print(f"wrote {final_path}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _evaluated_report(ckpt_path, dataset, seed):
    arch, _ = _build_from_checkpoint(ckpt_path)
    arch.config.n_particles = EVAL_PARTICLES
    return trainer.evaluate(arch, dataset, seed=seed)


def _comparison_rows(reports) -> str:
    lines = ["label,position_rmse_cm,angle_mae_deg,visible_rmse_cm,"
             "blackout_rmse_cm"]
    for label, rep in reports:
        def cell(v):
            return "" if v is None else f"{v:.6f}"
        lines.append(",".join([label, cell(rep.position_rmse_cm),
                               cell(rep.angle_mae_deg),
                               cell(rep.visible_rmse_cm),
                               cell(rep.blackout_rmse_cm)]))
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    dataset = _load_dataset(args.data)
    out = _ensure_out(args.out)
    labelled = []
    for ckpt_path in [args.ckpt] + (args.compare or []):
        report = _evaluated_report(ckpt_path, dataset, args.seed)
        label = f"{report.architecture}:{Path(ckpt_path).stem}"
        labelled.append((label, report))
    if args.baselines:
        labelled.append(("static", trainer.static_report(dataset)))
        arch, _ = _build_from_checkpoint(args.ckpt)
        if hasattr(arch, "dynamics"):
            labelled.append(
                ("dead-reckoning",
                 trainer.dead_reckoning_report(arch.dynamics, dataset,
                                               seed=args.seed)))

    written = []
    for label, report in labelled:
        stem = label.replace(":", "_").replace("/", "_")
        txt = out / f"eval_{stem}.txt"
        txt.write_text(trainer.report_table(report))
        csv_path = out / f"eval_{stem}.csv"
        csv_path.write_text(trainer.report_csv(report))
        written += [txt, csv_path]
    print(trainer.report_table(labelled[0][1]))
    if len(labelled) > 1:
        cmp_path = out / "comparison.csv"
        cmp_path.write_text(_comparison_rows(labelled))
        written.append(cmp_path)
        print(_comparison_rows(labelled))
    update_manifest(out, written)
    return 0


# ---------------------------------------------------------------------------
# trace


def _beta_series(arch_kind, header, rows, state_dim):
    """Mean modality weights per step from trace rows."""
    arr = np.asarray(rows, dtype=np.float64)
    b1 = header.index([h for h in header if h.startswith("beta1")][0])
    if arch_kind == "crossmodal-ekf":
        image = arr[:, b1:b1 + state_dim].mean(axis=1)
        touch = arr[:, b1 + state_dim:b1 + 2 * state_dim].mean(axis=1)
    else:
        image = arr[:, b1]
        touch = arr[:, b1 + 1]
    return image, touch


def cmd_trace(args) -> int:
    dataset = _load_dataset(args.data)
    arch, _ = _build_from_checkpoint(args.ckpt)
    if arch.kind not in ("crossmodal-ekf", "crossmodal-pf"):
        raise ValueError(
            f"weight tracing inspects learned modality weights, which only "
            f"crossmodal architectures have; this checkpoint is "
            f"{arch.kind!r}. Train a crossmodal-ekf or crossmodal-pf "
            f"model to use this command.")
    arch.config.n_particles = EVAL_PARTICLES
    if not 0 <= args.traj < len(dataset.trajectories):
        raise ValueError(f"trajectory index {args.traj} outside dataset "
                         f"of {len(dataset.trajectories)}")
    traj = dataset.trajectories[args.traj]
    task = dataset.task
    out = _ensure_out(args.out)

    rng = np.random.default_rng(args.seed)
    header, rows = trace_weights(arch, traj, rng)
    trace_path = out / f"trace_{args.traj}.csv"
    write_trace_csv(trace_path, header, rows)

    image_w, touch_w = _beta_series(arch.kind, header, rows, task.state_dim)
    steps = np.arange(traj.n_steps)
    beta_path = out / f"trace_{args.traj}_weights.svg"
    svgplot.line_plot(
        beta_path, steps,
        {"image weight": image_w, "force/proprio weight": touch_w},
        title=f"{arch.kind} modality weights, trajectory {args.traj}",
        xlabel="step", ylabel="mean weight",
        shade=traj.contacts > 0.5, shade_label="contact")

    # likelihood heatmap around ground truth at a visible mid-run frame
    t_star = traj.n_steps // 2
    while t_star < traj.n_steps and traj.blackouts[t_star]:
        t_star += 1
    if t_star == traj.n_steps:
        t_star = int(np.argmin(traj.blackouts))
    center = task.normalize_state(traj.states[t_star])
    obs = traj.observation(t_star)
    if arch.kind == "crossmodal-pf":
        offsets, grid = likelihood_grid(arch.measure1, obs, center)
    else:
        offsets, grid = sensor_likelihood_grid(arch.sensor1, obs, center)
    heat_path = out / f"trace_{args.traj}_likelihood.svg"
    svgplot.heatmap(
        heat_path, grid,
        extent=(offsets[0], offsets[-1], offsets[0], offsets[-1]),
        title=f"image log-likelihood, step {t_star} "
              f"(offsets from ground truth)",
        xlabel=f"{task.state_names[0]} offset (normalized)",
        ylabel=f"{task.state_names[1]} offset (normalized)",
        mark=(0.0, 0.0))

    update_manifest(out, [trace_path, beta_path, heat_path])
    print(f"wrote {trace_path} ({len(rows)} rows), {beta_path.name}, "
          f"{heat_path.name}")
    return 0


# ---------------------------------------------------------------------------
# sweep


def _sweep_datasets(config: ExperimentConfig, out: Path) -> dict:
    """Per-blackout train/test dataset files; physics shared across levels."""
    paths = {}
    for level in SWEEP_BLACKOUTS:
        tag = f"{int(round(level * 100)):02d}"
        train_path = out / f"data_train_p{tag}.dfds"
        test_path = out / f"data_test_p{tag}.dfds"
        if not train_path.exists():
            ds = simenv.generate_dataset(config.task, config.n_traj,
                                         config.n_steps, level, config.seed)
            simenv.write_dataset(train_path, ds)
        if not test_path.exists():
            ds = simenv.generate_dataset(config.task, config.n_test,
                                         config.n_steps, level,
                                         config.seed + 1)
            simenv.write_dataset(test_path, ds)
        paths[level] = (train_path, test_path)
    return paths


def _run_sweep_cell(cell) -> dict:
    """One architecture x blackout cell: pretrain, train, eval."""
    (arch_kind, level, train_path, test_path, cell_dir,
     config_dict, seed) = cell
    config = trainer.TrainConfig.from_dict(config_dict)
    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    dataset = simenv.read_dataset(train_path)
    arch = build_architecture(arch_kind, dataset.task,
                              np.random.default_rng(seed))
    _pretrain_into(arch, dataset, config, "all")
    history = []
    for phase, length in enumerate(config.schedule):
        phase_cfg = trainer.TrainConfig.from_dict(
            {**config.to_dict(), "schedule": [length],
             "seed": _phase_seed(seed, phase)})
        hist = trainer.train_end_to_end(arch, dataset, phase_cfg)
        history.append({"phase": phase, "length": length,
                        "train": hist["train"], "val": hist["val"],
                        "probe": hist["probe"]})
    ckpt_path = cell_dir / "trained.dfck"
    trainer.save_checkpoint(
        ckpt_path, arch.named_parameters(),
        meta={"architecture": arch_kind, "task": dataset.task.name,
              "stage": "trained", "seed": seed, "history": history,
              "config": config.to_dict()})
    (cell_dir / "loss_log.json").write_text(
        json.dumps(history, indent=2) + "\n")

    test_ds = simenv.read_dataset(test_path)
    arch.config.n_particles = EVAL_PARTICLES
    report = trainer.evaluate(arch, test_ds, seed=seed)
    (cell_dir / "report.csv").write_text(trainer.report_csv(report))
    (cell_dir / "report.txt").write_text(trainer.report_table(report))
    return {"architecture": arch_kind, "blackout": level,
            "position_rmse_cm": report.position_rmse_cm,
            "angle_mae_deg": report.angle_mae_deg,
            "visible_rmse_cm": report.visible_rmse_cm,
            "blackout_rmse_cm": report.blackout_rmse_cm}


def cmd_sweep(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    out = _ensure_out(args.out)
    data_paths = _sweep_datasets(config, out)

    cells = []
    for arch_kind in ARCHITECTURE_KINDS:
        for level in SWEEP_BLACKOUTS:
            tag = f"{int(round(level * 100)):02d}"
            train_path, test_path = data_paths[level]
            cells.append((arch_kind, level, str(train_path), str(test_path),
                          str(out / f"{arch_kind}_p{tag}"),
                          config.train.to_dict(), config.seed))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_sweep_cell, cells))
    else:
        results = [_run_sweep_cell(cell) for cell in cells]

    lines = ["architecture,blackout,position_rmse_cm,angle_mae_deg,"
             "visible_rmse_cm,blackout_rmse_cm"]
    for row in results:
        def cell(v):
            return "" if v is None else f"{v:.6f}"
        lines.append(",".join([row["architecture"], f"{row['blackout']:g}",
                               cell(row["position_rmse_cm"]),
                               cell(row["angle_mae_deg"]),
                               cell(row["visible_rmse_cm"]),
                               cell(row["blackout_rmse_cm"])]))
        print(lines[-1])
    sweep_path = out / "sweep.csv"
    sweep_path.write_text("\n".join(lines) + "\n")
    artifacts = [sweep_path]
    for _, level, _, _, cell_dir, _, _ in cells:
        for name in ("trained.dfck", "loss_log.json", "report.csv",
                     "report.txt"):
            artifacts.append(Path(cell_dir) / name)
    artifacts += [p for pair in data_paths.values() for p in pair]
    update_manifest(out, artifacts)
    print(f"wrote {sweep_path}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def _train_config_from(args) -> trainer.TrainConfig:
    if getattr(args, "config", None):
        return ExperimentConfig.from_file(args.config).train
    return trainer.TrainConfig()


def build_parser() -> _Parser:
    parser = _Parser(prog="filterfusion",
                     description="differentiable multimodal state "
                                 "estimation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a trajectory dataset")
    p.add_argument("--task", choices=tuple(TASKS), required=True)
    p.add_argument("--traj", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--blackout", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="pretrain dynamics and sensors")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", choices=ARCHITECTURE_KINDS, required=True)
    p.add_argument("--stage", choices=("dynamics", "measurement", "all"),
                   default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="end-to-end training")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", choices=ARCHITECTURE_KINDS, required=True)
    p.add_argument("--init", help="start from this checkpoint "
                                  "(e.g. pretrained.dfck)")
    p.add_argument("--resume", action="store_true",
                   help="continue from train_state.dfck in --out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--compare", nargs="*",
                   help="additional checkpoints for a side-by-side table")
    p.add_argument("--baselines", action="store_true",
                   help="include static and dead-reckoning baselines")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", help="trace modality weights and "
                                     "likelihood maps")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--traj", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("sweep", help="run every architecture at every "
                                     "blackout level")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, trainer.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        dc.reset_tape()


if __name__ == "__main__":
    sys.exit(main())
