"""Multimodal fusion architectures composed from the filters and models.

Two modality groups are fused throughout: M1 = image, M2 = force plus
proprioception. Feature fusion merges encoded features before a single
filter; unimodal fusion combines two independent per-modality filters;
crossmodal fusion arbitrates between them with learned weights computed
from the full multimodal observation.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .filters import (
    EXACT_JITTERS, GaussianBelief, LstmFilter, ParticleBelief,
    TRAIN_PARTICLES, belief_mean, ekf_predict, ekf_update,
    init_gaussian_belief, init_particle_belief, noisy_initial_state,
    pf_predict, pf_resample, pf_update,
)
from .models import CrossmodalWeightModel, DynamicsModel, MeasurementModel, VirtualSensor
from .task import MultimodalObservation, TaskSpec, modality_inputs

ARCHITECTURE_KINDS = (
    "feature-ekf", "feature-pf", "unimodal-ekf", "crossmodal-ekf",
    "unimodal-pf", "crossmodal-pf", "lstm-baseline",
)

# Fixed modality split: the image against the contact-local senses.
MODALITY_SPLIT = (("image",), ("force", "proprio"))


@dataclass
class FilterConfig:
    """Runtime knobs that do not change the learned parameters."""

    n_particles: int = TRAIN_PARTICLES
    ess_threshold: float = 0.5
    resample_detach: bool = True
    resample_every_step: bool = False
    feedback: bool = False


@dataclass
class PairBelief:
    """The two per-modality-group EKF beliefs carried side by side."""

    m1: GaussianBelief
    m2: GaussianBelief


@dataclass
class StepOutput:
    """Per-step fusion record: the reported belief plus interpretables."""

    fused: object
    per_modality: tuple | None = None
    betas: tuple | None = None


# ---------------------------------------------------------------------------
# Fusion algebra


def poe_fuse(b1: GaussianBelief, b2: GaussianBelief) -> GaussianBelief:
    """Product of two Gaussian experts via precision-weighted combination."""
    n = b1.mu.shape[0]
    eye = dc.eye(n)
    p1 = dc.spd_solve(b1.sigma, eye, jitters=EXACT_JITTERS)
    p2 = dc.spd_solve(b2.sigma, eye, jitters=EXACT_JITTERS)
    y = dc.add(dc.matmul(p1, b1.mu), dc.matmul(p2, b2.mu))
    prec = dc.mul(dc.Tensor(0.5), dc.add(dc.add(p1, p2),
                                         dc.transpose(dc.add(p1, p2))))
    sigma = dc.spd_solve(prec, eye, jitters=EXACT_JITTERS)
    sigma = dc.mul(dc.Tensor(0.5), dc.add(sigma, dc.transpose(sigma)))
    mu = dc.matmul(sigma, y)
    return GaussianBelief(mu=mu, sigma=sigma)


def crossmodal_ekf_fuse(b1: GaussianBelief, b2: GaussianBelief,
                        beta1: dc.Tensor, beta2: dc.Tensor) -> GaussianBelief:
    """Elementwise beta-weighted average of two Gaussian beliefs.

    Means combine per dimension; covariances combine elementwise through
    the rank-one weight matrices outer(beta, beta). The quotient form is
    not guaranteed positive definite for adversarial inputs, so a detached
    minimal ridge is added only when definiteness actually fails, leaving
    the healthy path bit-exact.
    """
    mu = dc.div(dc.add(dc.mul(beta1, b1.mu), dc.mul(beta2, b2.mu)),
                dc.add(beta1, beta2))
    bb1 = dc.outer(beta1, beta1)
    bb2 = dc.outer(beta2, beta2)
    sigma = dc.div(dc.add(dc.mul(bb1, b1.sigma), dc.mul(bb2, b2.sigma)),
                   dc.add(bb1, bb2))
    min_eig = float(np.linalg.eigvalsh(sigma.data).min())
    if min_eig <= 0.0:
        ridge = -min_eig + 1e-9
        sigma = dc.add(sigma, dc.Tensor(ridge * np.eye(sigma.shape[0])))
    return GaussianBelief(mu=mu, sigma=sigma)


def pf_mixture_loglik(betas, logliks) -> dc.Tensor:
    """Per-particle log of the beta-weighted mixture of likelihoods.

    Components whose beta is exactly zero are dropped structurally, so the
    switching limit beta=(1, 0) reproduces the surviving component bit for
    bit. The shared max is detached, keeping the tape first-order.
    """
    kept = [(b, ll) for b, ll in zip(betas, logliks)
            if not np.all(np.asarray(b.data if isinstance(b, dc.Tensor) else b)
                          == 0.0)]
    if not kept:
        raise ValueError("all mixture weights are zero")
    if len(kept) == 1:
        b, ll = kept[0]
        b_val = np.asarray(b.data if isinstance(b, dc.Tensor) else b)
        if np.all(b_val == 1.0):
            return ll
    m = np.maximum.reduce(
        [np.asarray(ll.data, dtype=np.float64) for _, ll in kept])
    m = np.where(np.isfinite(m), m, 0.0)
    mt = dc.Tensor(m)
    total = None
    for b, ll in kept:
        bt = b if isinstance(b, dc.Tensor) else dc.Tensor(float(b))
        term = dc.mul(bt, dc.exp(dc.sub(ll, mt)))
        total = term if total is None else dc.add(total, term)
    return dc.add(dc.log(total), mt)


# ---------------------------------------------------------------------------
# Architectures


class _ArchitectureBase:
    kind = None

    def __init__(self, task: TaskSpec, config: FilterConfig | None):
        self.task = task
        self.config = config if config is not None else FilterConfig()
        self._models = {}

    def _register(self, name, model):
        self._models[name] = model
        return model

    def named_parameters(self) -> dict:
        params = {}
        for model in self._models.values():
            params.update(model.named_parameters())
        return params

    def cov_parameter_names(self) -> tuple:
        names = []
        for model in self._models.values():
            getter = getattr(model, "cov_parameter_names", None)
            if getter is not None:
                names.extend(getter())
        return tuple(names)

    def estimate(self, output: StepOutput) -> dc.Tensor:
        return belief_mean(output.fused)


class FeatureEkf(_ArchitectureBase):
    """One multimodal virtual sensor driving a single EKF."""

    kind = "feature-ekf"

    def __init__(self, task, rng, config=None, width=32, feature_dim=32):
        super().__init__(task, config)
        self.dynamics = self._register(
            "dynamics", DynamicsModel(task, rng, width=width))
        self.sensor = self._register(
            "sensor", VirtualSensor(task, ("image", "force", "proprio"), rng,
                                    width=width, feature_dim=feature_dim,
                                    prefix="sensor"))

    def init_state(self, center, rng=None):
        return init_gaussian_belief(center)

    def step(self, state, obs: MultimodalObservation, u, rng=None,
             subset=None):
        belief = ekf_predict(state, self.dynamics, u)
        z, r_diag = self.sensor.sense(modality_inputs(obs), subset=subset)
        belief = ekf_update(belief, z, r_diag)
        return belief, StepOutput(fused=belief)


class FeaturePf(_ArchitectureBase):
    """One multimodal measurement model driving a single particle filter."""

    kind = "feature-pf"

    def __init__(self, task, rng, config=None, width=32, feature_dim=32):
        super().__init__(task, config)
        self.dynamics = self._register(
            "dynamics", DynamicsModel(task, rng, width=width))
        self.measure = self._register(
            "measure", MeasurementModel(task, ("image", "force", "proprio"),
                                        rng, width=width,
                                        feature_dim=feature_dim,
                                        prefix="measure"))

    def init_state(self, center, rng=None):
        return init_particle_belief(center, self.config.n_particles, rng)

    def _noise_scale(self):
        return np.sqrt(np.diag(self.dynamics.q_matrix().data))

    def step(self, state, obs: MultimodalObservation, u, rng=None,
             subset=None):
        belief = pf_predict(state, self.dynamics, u, self._noise_scale(), rng)
        logliks = self.measure.loglik(modality_inputs(obs), belief.states,
                                      subset=subset)
        belief = pf_update(belief, logliks)
        belief = pf_resample(belief, rng,
                             ess_threshold=self.config.ess_threshold,
                             detach=self.config.resample_detach,
                             every_step=self.config.resample_every_step)
        return belief, StepOutput(fused=belief)


class _PairEkfBase(_ArchitectureBase):
    """Two per-modality-group EKFs over a shared dynamics model."""

    def __init__(self, task, rng, config=None, width=32, feature_dim=32):
        super().__init__(task, config)
        self.dynamics = self._register(
            "dynamics", DynamicsModel(task, rng, width=width))
        self.sensor1 = self._register(
            "sensor1", VirtualSensor(task, MODALITY_SPLIT[0], rng,
                                     width=width, feature_dim=feature_dim,
                                     prefix="sensor.m1"))
        self.sensor2 = self._register(
            "sensor2", VirtualSensor(task, MODALITY_SPLIT[1], rng,
                                     width=width, feature_dim=feature_dim,
                                     prefix="sensor.m2"))

    def init_state(self, center, rng=None):
        return PairBelief(m1=init_gaussian_belief(center),
                          m2=init_gaussian_belief(center))

    def _advance_pair(self, state: PairBelief, obs, u):
        inputs = modality_inputs(obs)
        updated = []
        for belief, sensor in ((state.m1, self.sensor1),
                               (state.m2, self.sensor2)):
            belief = ekf_predict(belief, self.dynamics, u)
            z, r_diag = sensor.sense(inputs)
            updated.append(ekf_update(belief, z, r_diag))
        return updated[0], updated[1]


class UnimodalEkf(_PairEkfBase):
    """Product-of-experts fusion of the two unimodal EKF posteriors."""

    kind = "unimodal-ekf"

    def step(self, state, obs: MultimodalObservation, u, rng=None):
        m1, m2 = self._advance_pair(state, obs, u)
        fused = poe_fuse(m1, m2)
        if self.config.feedback:
            state = PairBelief(m1=fused, m2=fused)
        else:
            state = PairBelief(m1=m1, m2=m2)
        return state, StepOutput(fused=fused, per_modality=(m1, m2))


class CrossmodalEkf(_PairEkfBase):
    """Learned per-dimension weighting between the two unimodal EKFs."""

    kind = "crossmodal-ekf"

    def __init__(self, task, rng, config=None, width=32, feature_dim=32):
        super().__init__(task, rng, config=config, width=width,
                         feature_dim=feature_dim)
        self.weights = self._register(
            "weights", CrossmodalWeightModel(task, "ekf", rng, width=width,
                                             feature_dim=feature_dim,
                                             prefix="weights"))

    def step(self, state, obs: MultimodalObservation, u, rng=None):
        m1, m2 = self._advance_pair(state, obs, u)
        beta1, beta2 = self.weights.weights(modality_inputs(obs))
        fused = crossmodal_ekf_fuse(m1, m2, beta1, beta2)
        if self.config.feedback:
            state = PairBelief(m1=fused, m2=fused)
        else:
            state = PairBelief(m1=m1, m2=m2)
        return state, StepOutput(fused=fused, per_modality=(m1, m2),
                                 betas=(beta1, beta2))


class _PairPfBase(_ArchitectureBase):
    """Single particle cloud scored by two unimodal measurement models."""

    def __init__(self, task, rng, config=None, width=32, feature_dim=32):
        super().__init__(task, config)
        self.dynamics = self._register(
            "dynamics", DynamicsModel(task, rng, width=width))
        self.measure1 = self._register(
            "measure1", MeasurementModel(task, MODALITY_SPLIT[0], rng,
                                         width=width, feature_dim=feature_dim,
                                         prefix="measure.m1"))
        self.measure2 = self._register(
            "measure2", MeasurementModel(task, MODALITY_SPLIT[1], rng,
                                         width=width, feature_dim=feature_dim,
                                         prefix="measure.m2"))

    def init_state(self, center, rng=None):
        return init_particle_belief(center, self.config.n_particles, rng)

    def _noise_scale(self):
        return np.sqrt(np.diag(self.dynamics.q_matrix().data))

    def _betas(self, inputs):
        raise NotImplementedError

    def step(self, state, obs: MultimodalObservation, u, rng=None):
        inputs = modality_inputs(obs)
        belief = pf_predict(state, self.dynamics, u, self._noise_scale(), rng)
        ll1 = self.measure1.loglik(inputs, belief.states)
        ll2 = self.measure2.loglik(inputs, belief.states)
        betas = self._betas(inputs)
        per_modality = tuple(
            _single_model_mean(belief, ll) for ll in (ll1, ll2))
        mixed = pf_mixture_loglik(betas, (ll1, ll2))
        belief = pf_update(belief, mixed)
        belief = pf_resample(belief, rng,
                             ess_threshold=self.config.ess_threshold,
                             detach=self.config.resample_detach,
                             every_step=self.config.resample_every_step)
        return belief, StepOutput(fused=belief, per_modality=per_modality,
                                  betas=betas)


def _single_model_mean(belief: ParticleBelief, loglik: dc.Tensor) -> np.ndarray:
    """Cloud mean as if only one measurement model had scored it (detached)."""
    logw = belief.log_weights.data + loglik.data
    peak = logw.max()
    if not np.isfinite(peak):
        return belief.states.data.mean(axis=0)
    w = np.exp(logw - peak)
    return (w / w.sum()) @ belief.states.data


class UnimodalPf(_PairPfBase):
    """Unweighted mixture of the two unimodal measurement likelihoods."""

    kind = "unimodal-pf"

    def _betas(self, inputs):
        return (dc.Tensor(1.0), dc.Tensor(1.0))


class CrossmodalPf(_PairPfBase):
    """Learned scalar mixture weights over the two measurement models."""

    kind = "crossmodal-pf"

    def __init__(self, task, rng, config=None, width=32, feature_dim=32):
        super().__init__(task, rng, config=config, width=width,
                         feature_dim=feature_dim)
        self.weights = self._register(
            "weights", CrossmodalWeightModel(task, "pf", rng, width=width,
                                             feature_dim=feature_dim,
                                             prefix="weights"))

    def _betas(self, inputs):
        return self.weights.weights(inputs)


class LstmBaseline(_ArchitectureBase):
    """Stacked-LSTM point estimator wrapped in the architecture interface."""

    kind = "lstm-baseline"

    def __init__(self, task, rng, config=None, width=32, feature_dim=32):
        super().__init__(task, config)
        self.estimator = self._register(
            "estimator", LstmFilter(task, rng, width=width,
                                    feature_dim=feature_dim))

    def init_state(self, center, rng=None):
        return self.estimator.init_state()

    def step(self, state, obs: MultimodalObservation, u, rng=None):
        state, _ = self.estimator.step(state, modality_inputs(obs), u)
        return state, StepOutput(fused=state)


_ARCHITECTURES = {
    cls.kind: cls
    for cls in (FeatureEkf, FeaturePf, UnimodalEkf, CrossmodalEkf,
                UnimodalPf, CrossmodalPf, LstmBaseline)
}


def build_architecture(kind: str, task: TaskSpec, rng: np.random.Generator,
                       config: FilterConfig | None = None,
                       width: int = 32, feature_dim: int = 32):
    if kind not in _ARCHITECTURES:
        raise ValueError(f"unknown architecture kind {kind!r}; "
                         f"expected one of {ARCHITECTURE_KINDS}")
    return _ARCHITECTURES[kind](task, rng, config=config, width=width,
                                feature_dim=feature_dim)


# ---------------------------------------------------------------------------
# Interpretability traces


def _obs_at(traj, t) -> MultimodalObservation:
    return MultimodalObservation(
        image=traj.images[t], force=traj.forces[t], contact=traj.contacts[t],
        proprio=traj.proprios[t], blackout=float(traj.blackouts[t]))


def trace_weights(arch, traj, rng: np.random.Generator):
    """Stream a trajectory through a crossmodal architecture, recording
    the weights and estimates at every step.

    Returns (header, rows) ready for CSV export.
    """
    if arch.kind not in ("crossmodal-ekf", "crossmodal-pf"):
        raise ValueError(
            f"weight tracing needs a crossmodal architecture, got {arch.kind!r}")
    task = arch.task
    names = task.state_names
    header = ["t"]
    header += [f"gt_{s}" for s in names]
    header += [f"fused_{s}" for s in names]
    header += [f"m1_{s}" for s in names]
    header += [f"m2_{s}" for s in names]
    if arch.kind == "crossmodal-ekf":
        header += [f"beta1_{s}" for s in names]
        header += [f"beta2_{s}" for s in names]
    else:
        header += ["beta1", "beta2"]
    header += ["contact", "blackout"]

    n_steps = traj.states.shape[0]
    norm = task.normalize_state(traj.states)
    state = arch.init_state(noisy_initial_state(norm[0], rng), rng=rng)
    rows = []
    with dc.no_grad():
        for t in range(n_steps):
            obs = _obs_at(traj, t)
            try:
                state, out = arch.step(state, obs, traj.controls[t], rng=rng)
            except RuntimeError as exc:
                raise RuntimeError(f"step {t}: {exc}") from exc
            fused = belief_mean(out.fused).data
            if arch.kind == "crossmodal-ekf":
                m1 = out.per_modality[0].mu.data
                m2 = out.per_modality[1].mu.data
            else:
                m1, m2 = out.per_modality
            row = [t]
            row += list(np.asarray(traj.states[t], dtype=np.float64))
            row += list(task.denormalize_state(fused))
            row += list(task.denormalize_state(m1))
            row += list(task.denormalize_state(m2))
            row += list(np.atleast_1d(out.betas[0].data))
            row += list(np.atleast_1d(out.betas[1].data))
            row += [float(traj.contacts[t]), float(traj.blackouts[t])]
            rows.append(row)
    dc.reset_tape()
    return header, rows


def write_trace_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _offset_states(center_state, half_extent, cells, dims):
    center_state = np.asarray(center_state, dtype=np.float64)
    offsets = np.linspace(-half_extent, half_extent, cells)
    states = np.tile(center_state, (cells * cells, 1))
    ii, jj = np.meshgrid(offsets, offsets, indexing="ij")
    states[:, dims[0]] += ii.ravel()
    states[:, dims[1]] += jj.ravel()
    return offsets, states


def likelihood_grid(measure: MeasurementModel, obs: MultimodalObservation,
                    center_state: np.ndarray, half_extent: float = 0.2,
                    cells: int = 41, dims=(0, 1)) -> tuple:
    """Measurement log-likelihood over a 2D grid of state offsets.

    The grid spans +-half_extent around ``center_state`` along the two
    ``dims``; remaining state dimensions stay at the center value. Returns
    (offsets, grid) with grid[i, j] at offset (offsets[i], offsets[j]).
    """
    offsets, states = _offset_states(center_state, half_extent, cells, dims)
    with dc.no_grad():
        ll = measure.loglik(modality_inputs(obs), dc.Tensor(states))
    dc.reset_tape()
    return offsets, ll.data.reshape(cells, cells)


def sensor_likelihood_grid(sensor, obs: MultimodalObservation,
                           center_state: np.ndarray,
                           half_extent: float = 0.2, cells: int = 41,
                           dims=(0, 1)) -> tuple:
    """Gaussian log-likelihood implied by a virtual sensor's (z, R).

    A virtual sensor observes the state directly, so its implicit
    measurement density at a hypothesized state x is N(z; x, R); this is
    the EKF-family counterpart of ``likelihood_grid``.
    """
    offsets, states = _offset_states(center_state, half_extent, cells, dims)
    with dc.no_grad():
        z, r_diag = sensor.sense(modality_inputs(obs))
    dc.reset_tape()
    z = z.data
    r = r_diag.data
    sq = np.sum((states - z) ** 2 / r, axis=1)
    log_norm = np.sum(np.log(2.0 * np.pi * r))
    ll = -0.5 * (sq + log_norm)
    return offsets, ll.reshape(cells, cells)
