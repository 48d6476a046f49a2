"""Recursive state estimators: differentiable EKF, particle filter, LSTM baseline.

All three consume the learnable components from ``models`` and carry their
belief forward one control/observation pair at a time, so a trajectory can
be processed as a stream (the belief is the only inter-step state).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .models import _control_tensor
from .nets import (
    LstmCellSpec, MlpSpec, init_encoder_set, init_lstm, init_mlp,
    lstm_step, make_encoder_set, mlp_forward, encode_observation,
)
from .task import ALL_MODALITIES, TaskSpec

# Particle budgets: 30 keeps truncated-BPTT training tractable; evaluation
# runs a larger cloud for a tighter posterior estimate.
TRAIN_PARTICLES = 30
EVAL_PARTICLES = 100

# Initial belief spread around the (noisy) first state, normalized units.
INIT_STATE_NOISE = 0.2
INIT_COV = 0.04

# Raw-first jitter ladder: exact algebra when the innovation covariance is
# well conditioned, escalating ridges only on an actual Cholesky failure.
EXACT_JITTERS = (0.0, 1e-9, 1e-6)


@dataclass
class GaussianBelief:
    """Mean/covariance belief; sigma is kept symmetric by construction."""

    mu: dc.Tensor
    sigma: dc.Tensor


@dataclass
class ParticleBelief:
    """Weighted particle cloud; log_weights normalized to logsumexp = 0."""

    states: dc.Tensor
    log_weights: dc.Tensor

    @property
    def n_particles(self) -> int:
        return self.states.shape[0]


@dataclass
class LstmEstimatorState:
    """Carried hidden/cell pairs for two stacked cells plus the last estimate."""

    h1: dc.Tensor
    c1: dc.Tensor
    h2: dc.Tensor
    c2: dc.Tensor
    estimate: dc.Tensor | None = None


def _symmetrize(sigma: dc.Tensor) -> dc.Tensor:
    return dc.mul(dc.add(sigma, dc.transpose(sigma)), dc.Tensor(0.5))


def noisy_initial_state(x0: np.ndarray, rng: np.random.Generator,
                        noise: float = INIT_STATE_NOISE) -> np.ndarray:
    """Perturbed first state shared by all filters on a trajectory."""
    x0 = np.asarray(x0, dtype=np.float64)
    return x0 + noise * rng.standard_normal(x0.shape)


def init_gaussian_belief(center: np.ndarray,
                         cov: float = INIT_COV) -> GaussianBelief:
    center = np.asarray(center, dtype=np.float64)
    return GaussianBelief(mu=dc.Tensor(center.copy()),
                          sigma=dc.Tensor(cov * np.eye(center.shape[0])))


def init_particle_belief(center: np.ndarray, n_particles: int,
                         rng: np.random.Generator,
                         cov: float = INIT_COV) -> ParticleBelief:
    """Particles sampled from the Gaussian initial belief."""
    if n_particles < 1:
        raise ValueError("need at least one particle")
    center = np.asarray(center, dtype=np.float64)
    states = center + np.sqrt(cov) * rng.standard_normal(
        (n_particles, center.shape[0]))
    logw = np.full(n_particles, -np.log(n_particles))
    return ParticleBelief(states=dc.Tensor(states),
                          log_weights=dc.Tensor(logw))


# ---------------------------------------------------------------------------
# Extended Kalman filter


def ekf_predict(belief: GaussianBelief, dynamics, u) -> GaussianBelief:
    """Propagate mean through the dynamics and covariance through its Jacobian."""
    mu_hat, a = dynamics.step_with_jacobian(belief.mu, u)
    sigma_hat = dc.add(dc.matmul(dc.matmul(a, belief.sigma), dc.transpose(a)),
                       dynamics.q_matrix())
    return GaussianBelief(mu=mu_hat, sigma=_symmetrize(sigma_hat))


def ekf_update(belief: GaussianBelief, z: dc.Tensor, r_diag: dc.Tensor,
               h: np.ndarray | None = None) -> GaussianBelief:
    """Condition the belief on a state-space measurement with diagonal noise.

    ``h`` selects measured dimensions (defaults to identity). The gain is
    computed through a Cholesky solve of the innovation covariance, raw
    first so a well-conditioned update stays exact.
    """
    n = belief.mu.shape[0]
    if h is None:
        h = np.eye(n)
    h = np.asarray(h, dtype=np.float64)
    if z.shape != (h.shape[0],):
        raise ValueError(f"measurement dim {z.shape} != rows of H {h.shape[0]}")
    ht = dc.Tensor(h)
    h_sigma = dc.matmul(ht, belief.sigma)
    s = dc.add(dc.matmul(h_sigma, dc.transpose(ht)), dc.diag(r_diag))
    s = _symmetrize(s)
    # K = Sigma H^T S^-1, computed transposed so the solve has S on the left.
    kt = dc.spd_solve(s, h_sigma, jitters=EXACT_JITTERS)
    k = dc.transpose(kt)
    innovation = dc.sub(z, dc.matmul(ht, belief.mu))
    mu = dc.add(belief.mu, dc.matmul(k, innovation))
    eye_kh = dc.sub(dc.eye(n), dc.matmul(k, ht))
    sigma = _symmetrize(dc.matmul(eye_kh, belief.sigma))
    return GaussianBelief(mu=mu, sigma=sigma)


# ---------------------------------------------------------------------------
# Particle filter


def pf_predict(belief: ParticleBelief, dynamics, u, noise_scale,
               rng: np.random.Generator) -> ParticleBelief:
    """Advance every particle through the dynamics plus state-space noise."""
    moved = dynamics.step(belief.states, u)
    noise_scale = np.asarray(noise_scale, dtype=np.float64)
    eps = rng.standard_normal(moved.shape) * noise_scale
    return ParticleBelief(states=dc.add(moved, dc.Tensor(eps)),
                          log_weights=belief.log_weights)


def pf_update(belief: ParticleBelief, logliks: dc.Tensor) -> ParticleBelief:
    """Fold per-particle measurement log-likelihoods into the weights."""
    if logliks.shape != (belief.n_particles,):
        raise ValueError("need one log-likelihood per particle")
    logw = dc.add(belief.log_weights, logliks)
    norm = dc.logsumexp(logw)
    if not np.isfinite(norm.data):
        raise RuntimeError(
            "particle depletion: all measurement likelihoods vanished")
    return ParticleBelief(states=belief.states,
                          log_weights=dc.sub(logw, norm))


def effective_sample_size(log_weights: np.ndarray) -> float:
    logw = np.asarray(log_weights, dtype=np.float64)
    w = np.exp(logw - logw.max())
    w = w / w.sum()
    return float(1.0 / np.sum(w * w))


def pf_resample(belief: ParticleBelief, rng: np.random.Generator,
                ess_threshold: float = 0.5, detach: bool = True,
                every_step: bool = False) -> ParticleBelief:
    """Systematic resampling when ESS drops below ``ess_threshold * P``.

    By default the resampled states are detached, cutting gradient flow at
    the resampling boundary; ``detach=False`` keeps the gather on the tape.
    Output weights are uniform either way.
    """
    p = belief.n_particles
    if not every_step:
        if effective_sample_size(belief.log_weights.data) >= ess_threshold * p:
            return belief
    w = np.exp(belief.log_weights.data - belief.log_weights.data.max())
    w = w / w.sum()
    positions = (rng.random() + np.arange(p)) / p
    idx = np.minimum(np.searchsorted(np.cumsum(w), positions), p - 1)
    if detach:
        states = dc.Tensor(belief.states.data[idx].copy())
    else:
        states = dc.gather_rows(belief.states, idx)
    logw = dc.Tensor(np.full(p, -np.log(p)))
    return ParticleBelief(states=states, log_weights=logw)


# ---------------------------------------------------------------------------
# LSTM baseline


class LstmFilter:
    """Stateful point estimator: encoders -> trunk -> two LSTM cells -> head.

    There is no explicit predict/update split; the carried cell state is
    the only memory. The head ends in an affine layer so the estimate is
    unconstrained.
    """

    def __init__(self, task: TaskSpec, rng: np.random.Generator,
                 width: int = 32, feature_dim: int = 32, hidden: int = 64,
                 prefix: str = "lstm"):
        self.task = task
        self.prefix = prefix
        self.hidden = hidden
        self.encset = make_encoder_set(ALL_MODALITIES, width=width,
                                       feature_dim=feature_dim,
                                       include_control=True,
                                       control_dim=task.control_dim)
        self.cell1 = LstmCellSpec(feature_dim, hidden)
        self.cell2 = LstmCellSpec(hidden, hidden)
        self.head_spec = MlpSpec((hidden, width, task.state_dim))
        self.params = {}
        self.params.update(init_encoder_set(self.encset, rng, prefix))
        self.params.update(init_lstm(self.cell1, rng, f"{prefix}.cell1"))
        self.params.update(init_lstm(self.cell2, rng, f"{prefix}.cell2"))
        self.params.update(init_mlp(self.head_spec, rng, f"{prefix}.head"))

    def named_parameters(self) -> dict:
        return dict(self.params)

    def init_state(self) -> LstmEstimatorState:
        z = lambda: dc.Tensor(np.zeros(self.hidden))
        return LstmEstimatorState(h1=z(), c1=z(), h2=z(), c2=z())

    def step(self, state: LstmEstimatorState, inputs: dict, u):
        """One streaming step: returns (state', point estimate)."""
        feat = encode_observation(self.encset, self.params, self.prefix,
                                  inputs, control=_control_tensor(u))
        h1, c1 = lstm_step(self.cell1, self.params, f"{self.prefix}.cell1",
                           feat, state.h1, state.c1)
        h2, c2 = lstm_step(self.cell2, self.params, f"{self.prefix}.cell2",
                           h1, state.h2, state.c2)
        xhat = mlp_forward(self.head_spec, self.params, f"{self.prefix}.head",
                           h2)
        new_state = LstmEstimatorState(h1=h1, c1=c1, h2=h2, c2=c2,
                                       estimate=xhat)
        return new_state, xhat


# ---------------------------------------------------------------------------


def belief_mean(belief) -> dc.Tensor:
    """Point estimate of any belief kind."""
    if isinstance(belief, GaussianBelief):
        return belief.mu
    if isinstance(belief, ParticleBelief):
        w = dc.exp(belief.log_weights)
        return dc.matmul(w, belief.states)
    if isinstance(belief, LstmEstimatorState):
        if belief.estimate is None:
            raise ValueError("LSTM estimator has not produced an estimate yet")
        return belief.estimate
    raise TypeError(f"unknown belief type {type(belief).__name__}")
