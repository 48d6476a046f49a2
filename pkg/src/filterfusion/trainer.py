"""Training pipeline: dynamics curriculum, measurement pretraining,
truncated BPTT over growing subsequences, metrics, and checkpoints.

All learning happens on normalized states (positions over the workspace
half-width, angles over pi/2); reports convert back to centimeters and
degrees. Losses are mean squared error with angle dimensions wrapped
before differencing.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .filters import noisy_initial_state
from .models import MeasurementModel, VirtualSensor
from .task import modality_inputs, stack_modality_inputs

PRETRAIN_HORIZONS = (1, 4, 8, 16)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    schedule: tuple = (2, 4, 8, 16)
    pretrain_horizons: tuple = PRETRAIN_HORIZONS
    pretrain_steps: int = 200
    measurement_steps: int = 2000
    measurement_sigma: float = 0.1
    epochs: int = 4
    steps_per_epoch: int = 25
    patience: int = 10
    n_particles: int = 30
    seed: int = 0
    loss: str = "mse"

    def __post_init__(self):
        self.schedule = tuple(int(x) for x in self.schedule)
        self.pretrain_horizons = tuple(int(x) for x in self.pretrain_horizons)
        if self.pretrain_horizons != PRETRAIN_HORIZONS:
            raise ValueError(f"pretrain horizons must be "
                             f"{PRETRAIN_HORIZONS}, got "
                             f"{self.pretrain_horizons}")
        if any(b < a for a, b in zip(self.schedule, self.schedule[1:])):
            raise ValueError(f"schedule must be non-decreasing, got "
                             f"{self.schedule}")
        if not self.schedule:
            raise ValueError("schedule must not be empty")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss kind {self.loss!r}")
        if self.batch_size < 1 or self.n_particles < 1:
            raise ValueError("batch size and particle count must be >= 1")
        if self.learning_rate < 0.0:
            raise ValueError("learning rate must be non-negative")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["schedule"] = list(self.schedule)
        out["pretrain_horizons"] = list(self.pretrain_horizons)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient goes non-finite; parameters are
    rolled back to the last good optimizer step before raising."""

    def __init__(self, stage: str, step: int, detail: str = ""):
        self.stage = stage
        self.step = step
        msg = f"{stage} diverged at step {step}"
        super().__init__(msg if not detail else f"{msg}: {detail}")


def split_dataset(dataset, n_test: int):
    """Deterministic tail split into (train, test) datasets."""
    from .simenv import Dataset
    if not 0 < n_test < len(dataset.trajectories):
        raise ValueError(f"cannot hold out {n_test} of "
                         f"{len(dataset.trajectories)} trajectories")
    cut = len(dataset.trajectories) - n_test
    return (Dataset(task=dataset.task,
                    trajectories=dataset.trajectories[:cut]),
            Dataset(task=dataset.task,
                    trajectories=dataset.trajectories[cut:]))


def _wrapped_error(task, pred: dc.Tensor, target: np.ndarray) -> dc.Tensor:
    """pred - target with angle dimensions wrapped; the wrap shift is a
    constant, so the gradient is the identity almost everywhere."""
    diff = dc.sub(pred, dc.Tensor(np.asarray(target, dtype=np.float64)))
    if task.angle_dims:
        shift = diff.data - task.wrap_difference(diff.data)
        if np.any(shift):
            diff = dc.sub(diff, dc.Tensor(shift))
    return diff


def _mse(task, pred: dc.Tensor, target: np.ndarray) -> dc.Tensor:
    err = _wrapped_error(task, pred, target)
    return dc.mul(dc.tsum(dc.mul(err, err)), dc.Tensor(1.0 / err.data.size))


def _snapshot(params: dict) -> dict:
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params: dict, saved: dict) -> None:
    for k, p in params.items():
        p.data[...] = saved[k]


# ---------------------------------------------------------------------------
# Dynamics pretraining


def pretrain_dynamics(dynamics, dataset, config: TrainConfig):
    """Curriculum over open-loop prediction horizons 1 -> 4 -> 8 -> 16.

    Each phase minimizes the mean squared error of multi-step open-loop
    rollouts against ground truth, averaged over all steps of the
    horizon. Returns one loss curve per phase.
    """
    task = dataset.task
    rng = np.random.default_rng(config.seed)
    params = dynamics.named_parameters()
    opt = dc.AdamState(params, lr=config.learning_rate)
    norm = [task.normalize_state(t.states) for t in dataset.trajectories]
    shortest = min(t.n_steps for t in dataset.trajectories)
    horizon_max = max(config.pretrain_horizons)
    if shortest <= horizon_max:
        raise ValueError(f"trajectories of {shortest} steps are too short "
                         f"for a {horizon_max}-step prediction horizon")
    curves = []
    for horizon in config.pretrain_horizons:
        curve = []
        for step in range(config.pretrain_steps):
            dc.reset_tape()
            dc.zero_grad(params.values())
            idx = rng.integers(len(norm), size=config.batch_size)
            starts = np.array([
                rng.integers(0, norm[i].shape[0] - horizon) for i in idx])
            x = dc.Tensor(np.stack([norm[i][t0]
                                    for i, t0 in zip(idx, starts)]))
            loss = None
            for k in range(1, horizon + 1):
                u = np.stack([dataset.trajectories[i].controls[t0 + k]
                              for i, t0 in zip(idx, starts)])
                x = dynamics.step(x, u)
                target = np.stack([norm[i][t0 + k]
                                   for i, t0 in zip(idx, starts)])
                term = _mse(task, x, target)
                loss = term if loss is None else dc.add(loss, term)
            loss = dc.mul(loss, dc.Tensor(1.0 / horizon))
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"dynamics pretraining "
                                       f"(horizon {horizon})", step)
            dc.backward(loss)
            try:
                opt.step()
            except FloatingPointError as exc:
                raise TrainingDiverged(f"dynamics pretraining "
                                       f"(horizon {horizon})", step,
                                       str(exc)) from exc
            curve.append(float(loss.data))
        curves.append(curve)
    dc.reset_tape()
    return curves


# ---------------------------------------------------------------------------
# Measurement / virtual-sensor pretraining


def _sample_frames(rng, trajectories, count):
    idx = rng.integers(len(trajectories), size=count)
    return [(trajectories[i], int(rng.integers(trajectories[i].n_steps)))
            for i in idx]


def _pretrain_sensor(sensor, dataset, config, rng):
    """MSE regression of the normalized ground-truth state; the covariance
    head stays frozen (it is trained exclusively end to end)."""
    task = dataset.task
    frozen = set(sensor.cov_parameter_names())
    params = {k: v for k, v in sensor.named_parameters().items()
              if k not in frozen}
    opt = dc.AdamState(params, lr=config.learning_rate)
    curve = []
    for step in range(config.measurement_steps):
        dc.reset_tape()
        dc.zero_grad(params.values())
        frames = _sample_frames(rng, dataset.trajectories,
                                config.batch_size)
        inputs = stack_modality_inputs(
            [traj.observation(t) for traj, t in frames])
        target = np.stack([task.normalize_state(traj.states[t])
                           for traj, t in frames])
        z, _ = sensor.sense(inputs)
        loss = _mse(task, z, target)
        if not np.isfinite(loss.data):
            raise TrainingDiverged("sensor pretraining", step)
        dc.backward(loss)
        try:
            opt.step()
        except FloatingPointError as exc:
            raise TrainingDiverged("sensor pretraining", step,
                                   str(exc)) from exc
        curve.append(float(loss.data))
    return curve


def gaussian_loglik_target(perturbations: np.ndarray,
                           sigma: float) -> np.ndarray:
    """Log density of N(0, sigma^2 I) at the given offsets, per row."""
    n = perturbations.shape[-1]
    sq = np.sum(perturbations ** 2, axis=-1)
    return -0.5 * sq / sigma ** 2 - 0.5 * n * np.log(2.0 * np.pi * sigma ** 2)


def _perturbations(rng, count, dim, sigma):
    """Offsets up to three sigma: half Gaussian-scale so the density peak
    is well sampled, half uniform so the rim of the bowl is too."""
    gauss = np.clip(sigma * rng.standard_normal((count // 2, dim)),
                    -3.0 * sigma, 3.0 * sigma)
    wide = rng.uniform(-3.0 * sigma, 3.0 * sigma,
                       size=(count - count // 2, dim))
    return np.concatenate([gauss, wide])


def _pretrain_measurement_model(measure, dataset, config, rng):
    """Regress the log density of a Gaussian centered at ground truth,
    evaluated at states perturbed by up to three sigma.

    Each step batches several frames (one observation row per perturbed
    state), so the encoder gradient averages across scenes rather than
    overfitting one frame at a time."""
    task = dataset.task
    sigma = config.measurement_sigma
    params = measure.named_parameters()
    opt = dc.AdamState(params, lr=config.learning_rate)
    n_frames = 8
    n_perturb = 4 * config.batch_size
    per_frame = max(1, n_perturb // n_frames)
    curve = []
    for step in range(config.measurement_steps):
        dc.reset_tape()
        dc.zero_grad(params.values())
        frames = _sample_frames(rng, dataset.trajectories, n_frames)
        obs_rows = []
        state_rows = []
        targets = []
        for traj, t in frames:
            eps = _perturbations(rng, per_frame, task.state_dim, sigma)
            state_rows.append(task.normalize_state(traj.states[t]) + eps)
            targets.append(gaussian_loglik_target(eps, sigma))
            obs_rows.extend([traj.observation(t)] * per_frame)
        inputs = stack_modality_inputs(obs_rows)
        states = dc.Tensor(np.concatenate(state_rows))
        target = np.concatenate(targets)
        ll = measure.loglik(inputs, states)
        err = dc.sub(ll, dc.Tensor(target))
        loss = dc.mul(dc.tsum(dc.mul(err, err)),
                      dc.Tensor(1.0 / target.size))
        if not np.isfinite(loss.data):
            raise TrainingDiverged("measurement pretraining", step)
        dc.backward(loss)
        try:
            opt.step()
        except FloatingPointError as exc:
            raise TrainingDiverged("measurement pretraining", step,
                                   str(exc)) from exc
        curve.append(float(loss.data))
    return curve


def pretrain_measurement(arch, dataset, config: TrainConfig) -> dict:
    """Pretrain every virtual sensor and measurement model an architecture
    owns; dynamics, weight models, and covariance heads are untouched."""
    rng = np.random.default_rng(config.seed)
    curves = {}
    for name, model in arch._models.items():
        if isinstance(model, VirtualSensor):
            curves[name] = _pretrain_sensor(model, dataset, config, rng)
        elif isinstance(model, MeasurementModel):
            curves[name] = _pretrain_measurement_model(model, dataset,
                                                       config, rng)
    dc.reset_tape()
    return curves


# ---------------------------------------------------------------------------
# End-to-end training


def subsequence_loss(arch, traj, t0: int, length: int,
                     rng: np.random.Generator) -> dc.Tensor:
    """Filtering loss over one window: mean wrapped MSE of the belief mean
    against normalized ground truth, starting from ground truth plus noise.
    """
    task = arch.task
    norm = task.normalize_state(traj.states[t0:t0 + length + 1])
    state = arch.init_state(noisy_initial_state(norm[0], rng), rng)
    total = None
    for k in range(1, length + 1):
        t = t0 + k
        state, out = arch.step(state, traj.observation(t),
                               traj.controls[t], rng=rng)
        term = _mse(task, arch.estimate(out), norm[k])
        total = term if total is None else dc.add(total, term)
    return dc.mul(total, dc.Tensor(1.0 / length))


def _validation_loss(arch, trajectories, length, config) -> float:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 9973]))
    total = 0.0
    count = 0
    with dc.no_grad():
        for traj in trajectories:
            t0 = int(rng.integers(0, traj.n_steps - length))
            total += float(subsequence_loss(arch, traj, t0, length,
                                            rng).data)
            count += 1
    return total / max(count, 1)


def train_end_to_end(arch, dataset, config: TrainConfig,
                     val_fraction: float = 0.1) -> dict:
    """Truncated BPTT over the subsequence-length schedule.

    Beliefs restart from ground truth plus noise at every window start, so
    gradients never cross window boundaries. Early stopping watches a
    held-out validation slice with the configured patience; divergence
    rolls parameters back to the last good step and raises.
    """
    task = dataset.task
    if task.name != arch.task.name:
        raise ValueError(f"architecture is for task {arch.task.name!r}, "
                         f"dataset is {task.name!r}")
    arch.config.n_particles = config.n_particles
    rng = np.random.default_rng(config.seed)
    trajs = dataset.trajectories
    shortest = min(t.n_steps for t in trajs)
    if shortest <= max(config.schedule):
        raise ValueError(f"trajectories of {shortest} steps are too short "
                         f"for {max(config.schedule)}-step subsequences")
    n_val = min(max(1, int(round(len(trajs) * val_fraction))),
                len(trajs) - 1) if len(trajs) > 1 else 0
    train = trajs[:len(trajs) - n_val] if n_val else trajs
    val = trajs[len(trajs) - n_val:] if n_val else trajs

    params = arch.named_parameters()
    opt = dc.AdamState(params, lr=config.learning_rate)
    # "probe" re-measures a fixed window set at the final schedule length
    # every epoch, so entries are comparable across phases.
    history = {"length": [], "train": [], "val": [], "probe": []}
    probe_trajs = train[:min(len(train), 8)]
    probe_length = config.schedule[-1]
    best_val = np.inf
    patience_left = config.patience
    last_good = _snapshot(params)
    step_count = 0
    stopped = False
    history["probe"].append(
        _validation_loss(arch, probe_trajs, probe_length, config))

    for length in config.schedule:
        if stopped:
            break
        for _epoch in range(config.epochs):
            epoch_losses = []
            for _ in range(config.steps_per_epoch):
                dc.reset_tape()
                dc.zero_grad(params.values())
                total = None
                for _ in range(config.batch_size):
                    traj = train[int(rng.integers(len(train)))]
                    t0 = int(rng.integers(0, traj.n_steps - length))
                    loss = subsequence_loss(arch, traj, t0, length, rng)
                    total = loss if total is None else dc.add(total, loss)
                if not np.isfinite(total.data):
                    _restore(params, last_good)
                    raise TrainingDiverged(
                        f"end-to-end (length {length})", step_count)
                dc.backward(total)
                try:
                    opt.step(scale=1.0 / config.batch_size)
                except FloatingPointError as exc:
                    _restore(params, last_good)
                    raise TrainingDiverged(
                        f"end-to-end (length {length})", step_count,
                        str(exc)) from exc
                last_good = _snapshot(params)
                step_count += 1
                epoch_losses.append(float(total.data) / config.batch_size)
            val_loss = _validation_loss(arch, val, length, config)
            history["length"].append(length)
            history["train"].append(float(np.mean(epoch_losses)))
            history["val"].append(val_loss)
            history["probe"].append(
                _validation_loss(arch, probe_trajs, probe_length, config))
            if val_loss < best_val - 1e-12:
                best_val = val_loss
                patience_left = config.patience
            else:
                patience_left -= 1
                if patience_left <= 0:
                    stopped = True
                    break
    dc.reset_tape()
    return history


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class TrajectoryMetrics:
    index: int
    position_rmse_cm: float
    angle_mae_deg: float | None
    blackout_fraction: float
    visible_rmse_cm: float | None
    blackout_rmse_cm: float | None


@dataclass
class EvalReport:
    task: str
    architecture: str
    seed: int | None
    per_trajectory: list = field(default_factory=list)
    position_rmse_cm: float = float("nan")
    angle_mae_deg: float | None = None
    visible_rmse_cm: float | None = None
    blackout_rmse_cm: float | None = None


def _position_rmse_cm(task, estimates, states, mask=None):
    pos = [d for d in range(task.state_dim) if d not in task.angle_dims]
    err = estimates[:, pos] - states[:, pos]
    if mask is not None:
        err = err[mask]
        if err.size == 0:
            return None
    return float(np.sqrt(np.mean(np.sum(err ** 2, axis=1))) * 100.0)


def _angle_mae_deg(task, estimates, states):
    if not task.angle_dims:
        return None
    diff_norm = (estimates - states) / task.scales
    wrapped = task.wrap_difference(diff_norm) * task.scales
    return float(np.mean(np.abs(wrapped[:, list(task.angle_dims)]))
                 * 180.0 / np.pi)


def _mean_or_none(values):
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def report_from_estimates(dataset, estimates, architecture: str,
                          seed: int | None = None) -> EvalReport:
    """Build an EvalReport from per-trajectory physical-unit estimates.

    Aggregates are plain means of the per-trajectory values; the blackout
    breakdown masks frames by the dataset's blackout flags.
    """
    task = dataset.task
    report = EvalReport(task=task.name, architecture=architecture,
                        seed=seed)
    for i, (traj, est) in enumerate(zip(dataset.trajectories, estimates)):
        est = np.asarray(est, dtype=np.float64)
        if est.shape != traj.states.shape:
            raise ValueError(f"estimate shape {est.shape} != states "
                             f"{traj.states.shape}")
        flags = traj.blackouts.astype(bool)
        report.per_trajectory.append(TrajectoryMetrics(
            index=i,
            position_rmse_cm=_position_rmse_cm(task, est, traj.states),
            angle_mae_deg=_angle_mae_deg(task, est, traj.states),
            blackout_fraction=float(flags.mean()),
            visible_rmse_cm=_position_rmse_cm(task, est, traj.states,
                                              mask=~flags),
            blackout_rmse_cm=_position_rmse_cm(task, est, traj.states,
                                               mask=flags)))
    per = report.per_trajectory
    report.position_rmse_cm = float(np.mean(
        [m.position_rmse_cm for m in per]))
    report.angle_mae_deg = _mean_or_none([m.angle_mae_deg for m in per])
    report.visible_rmse_cm = _mean_or_none([m.visible_rmse_cm for m in per])
    report.blackout_rmse_cm = _mean_or_none(
        [m.blackout_rmse_cm for m in per])
    return report


def evaluate(arch, dataset, seed: int = 0) -> EvalReport:
    """Full-length filtering over every trajectory from a noisy initial
    belief; deterministic per seed (one spawned stream per trajectory)."""
    task = dataset.task
    if task.name != arch.task.name:
        raise ValueError(f"architecture is for task {arch.task.name!r}, "
                         f"dataset is {task.name!r}")
    root = np.random.SeedSequence(seed)
    estimates = []
    with dc.no_grad():
        for traj, child in zip(dataset.trajectories,
                               root.spawn(len(dataset.trajectories))):
            rng = np.random.default_rng(child)
            norm = task.normalize_state(traj.states)
            center = noisy_initial_state(norm[0], rng)
            state = arch.init_state(center, rng)
            est = np.zeros_like(norm)
            est[0] = center  # report the belief we actually start from
            for t in range(1, traj.n_steps):
                state, out = arch.step(state, traj.observation(t),
                                       traj.controls[t], rng=rng)
                est[t] = arch.estimate(out).data
            estimates.append(task.denormalize_state(est))
    return report_from_estimates(dataset, estimates, arch.kind, seed=seed)


def static_report(dataset) -> EvalReport:
    """Baseline that reports the true initial state forever."""
    estimates = [np.tile(traj.states[0], (traj.n_steps, 1))
                 for traj in dataset.trajectories]
    return report_from_estimates(dataset, estimates, "static")


def dead_reckoning_report(dynamics, dataset, seed: int = 0) -> EvalReport:
    """Open-loop rollout of the learned dynamics from a noisy start; no
    observations, so this bounds what filtering must beat."""
    task = dataset.task
    root = np.random.SeedSequence(seed)
    estimates = []
    with dc.no_grad():
        for traj, child in zip(dataset.trajectories,
                               root.spawn(len(dataset.trajectories))):
            rng = np.random.default_rng(child)
            norm = task.normalize_state(traj.states)
            est = np.zeros_like(norm)
            x = dc.Tensor(noisy_initial_state(norm[0], rng))
            est[0] = x.data
            for t in range(1, traj.n_steps):
                x = dynamics.step(x, traj.controls[t])
                est[t] = x.data
            estimates.append(task.denormalize_state(est))
    return report_from_estimates(dataset, estimates, "dead-reckoning",
                                 seed=seed)


def _fmt(value, width=10):
    if value is None:
        return " " * (width - 1) + "-"
    return f"{value:>{width}.3f}"


def report_table(report: EvalReport) -> str:
    """Human-readable fixed-width table, one row per trajectory."""
    lines = [f"task={report.task} architecture={report.architecture} "
             f"seed={report.seed}",
             f"{'traj':>6} {'pos_rmse_cm':>12} {'angle_mae_deg':>14} "
             f"{'blackout':>9} {'rmse_vis':>10} {'rmse_blk':>10}"]
    for m in report.per_trajectory:
        lines.append(f"{m.index:>6d} {_fmt(m.position_rmse_cm, 12)} "
                     f"{_fmt(m.angle_mae_deg, 14)} "
                     f"{m.blackout_fraction:>9.3f} "
                     f"{_fmt(m.visible_rmse_cm)} "
                     f"{_fmt(m.blackout_rmse_cm)}")
    lines.append(f"{'mean':>6} {_fmt(report.position_rmse_cm, 12)} "
                 f"{_fmt(report.angle_mae_deg, 14)} "
                 f"{'':>9} {_fmt(report.visible_rmse_cm)} "
                 f"{_fmt(report.blackout_rmse_cm)}")
    return "\n".join(lines) + "\n"


def report_csv(report: EvalReport) -> str:
    """Comma-separated export with an aggregate row labelled ``mean``."""
    def cell(v):
        return "" if v is None else repr(float(v))

    rows = ["traj,position_rmse_cm,angle_mae_deg,blackout_fraction,"
            "visible_rmse_cm,blackout_rmse_cm"]
    for m in report.per_trajectory:
        rows.append(",".join([str(m.index), cell(m.position_rmse_cm),
                              cell(m.angle_mae_deg),
                              cell(m.blackout_fraction),
                              cell(m.visible_rmse_cm),
                              cell(m.blackout_rmse_cm)]))
    rows.append(",".join(["mean", cell(report.position_rmse_cm),
                          cell(report.angle_mae_deg), "",
                          cell(report.visible_rmse_cm),
                          cell(report.blackout_rmse_cm)]))
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# Checkpoints (DFCK)

CKPT_MAGIC = b"DFCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQ")


def config_hash(config) -> str:
    data = config.to_dict() if isinstance(config, TrainConfig) else config
    canon = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class Checkpoint:
    tensors: dict
    meta: dict
    adam: dict | None = None


def save_checkpoint(path, params: dict, meta: dict | None = None,
                    optimizer: dc.AdamState | None = None) -> None:
    """Named-tensor archive; float64 little-endian, bit-exact round trip."""
    meta = dict(meta or {})
    if "config" in meta and "config_hash" not in meta:
        meta["config_hash"] = config_hash(meta["config"])
    arrays = {name: np.asarray(getattr(p, "data", p), dtype=np.float64)
              for name, p in params.items()}
    opt_arrays = {}
    if optimizer is not None:
        meta["adam_t"] = optimizer.t
        for name in params:
            opt_arrays[f"m.{name}"] = optimizer.m[name]
            opt_arrays[f"v.{name}"] = optimizer.v[name]
    index = {"meta": meta,
             "tensors": [[k, list(v.shape)] for k, v in arrays.items()],
             "opt_tensors": [[k, list(v.shape)]
                             for k, v in opt_arrays.items()]}
    blob = json.dumps(index, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
        for v in opt_arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read(_CKPT_HEADER.size)
        if len(raw) != _CKPT_HEADER.size:
            raise ValueError("truncated checkpoint header")
        magic, version, blob_len = _CKPT_HEADER.unpack(raw)
        if magic != CKPT_MAGIC:
            raise ValueError(f"bad magic {magic!r}; not a DFCK file")
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        index = json.loads(fh.read(blob_len).decode())

        def read_block(shape):
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError("truncated checkpoint tensor block")
            arr = np.frombuffer(buf, dtype="<f8").astype(np.float64)
            return arr.reshape(shape) if shape else arr.reshape(())

        tensors = {name: read_block(shape)
                   for name, shape in index["tensors"]}
        opt_tensors = {name: read_block(shape)
                       for name, shape in index["opt_tensors"]}
        if fh.read(1):
            raise ValueError("trailing bytes after checkpoint tensors")
    meta = index["meta"]
    adam = None
    if "adam_t" in meta:
        adam = {"t": int(meta["adam_t"]),
                "m": {k[2:]: v for k, v in opt_tensors.items()
                      if k.startswith("m.")},
                "v": {k[2:]: v for k, v in opt_tensors.items()
                      if k.startswith("v.")}}
    return Checkpoint(tensors=tensors, meta=meta, adam=adam)


def apply_checkpoint(arch, ckpt: Checkpoint,
                     optimizer: dc.AdamState | None = None) -> None:
    """Restore parameters (and optionally Adam state) in place."""
    params = arch.named_parameters()
    missing = sorted(set(params) - set(ckpt.tensors))
    unexpected = sorted(set(ckpt.tensors) - set(params))
    if missing or unexpected:
        raise ValueError(f"checkpoint does not match architecture; "
                         f"missing {missing}, unexpected {unexpected}")
    for name, p in params.items():
        stored = ckpt.tensors[name]
        if stored.shape != p.data.shape:
            raise ValueError(f"shape mismatch for {name}: checkpoint "
                             f"{stored.shape} vs model {p.data.shape}")
        p.data[...] = stored
    if optimizer is not None:
        if ckpt.adam is None:
            raise ValueError("checkpoint has no optimizer state")
        optimizer.t = ckpt.adam["t"]
        for name in params:
            optimizer.m[name][...] = ckpt.adam["m"][name]
            optimizer.v[name][...] = ckpt.adam["v"][name]
