"""Learnable filter components: dynamics, virtual sensors, measurement and weight models."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .nets import (
    MlpSpec, encode_observation, init_encoder_set, init_mlp, make_encoder_set,
    mlp_forward,
)
from .task import SPEED_CAP, TaskSpec

Q_FLOOR = 1e-8
R_FLOOR = 1e-8
BETA_EPS = 1e-6


def _control_tensor(u) -> dc.Tensor:
    """Controls are normalized by the commanded-speed cap before entering nets."""
    if isinstance(u, dc.Tensor):
        return dc.mul(u, dc.Tensor(1.0 / SPEED_CAP))
    return dc.Tensor(np.asarray(u, dtype=np.float64) / SPEED_CAP)


class DynamicsModel:
    """Gated residual state-transition model with a learned process noise.

    The next-state mean is x + f1(x, u) * sigmoid(f2(x, u)): one head for
    the update direction, one scalar gate for its magnitude. Q is a
    constant learned diagonal.
    """

    def __init__(self, task: TaskSpec, rng: np.random.Generator,
                 width: int = 32, prefix: str = "dynamics"):
        self.task = task
        self.prefix = prefix
        in_width = task.state_dim + task.control_dim
        self.f1_spec = MlpSpec((in_width, width, width, task.state_dim),
                               residual=True)
        self.f2_spec = MlpSpec((in_width, width, width, 1), residual=True)
        self.params = {}
        self.params.update(init_mlp(self.f1_spec, rng, f"{prefix}.f1"))
        self.params.update(init_mlp(self.f2_spec, rng, f"{prefix}.f2"))
        self.params[f"{prefix}.q_raw"] = dc.Tensor(
            np.full(task.state_dim, -6.0), requires_grad=True)

    def named_parameters(self) -> dict:
        return dict(self.params)

    def _heads(self, x: dc.Tensor, u, tangent=None):
        un = _control_tensor(u)
        if x.ndim == 2 and un.ndim == 1:
            un = dc.outer(dc.ones(x.shape[0]), un)
        inp = dc.concat([x, un], axis=-1)
        if tangent is None:
            f1 = mlp_forward(self.f1_spec, self.params, f"{self.prefix}.f1", inp)
            f2 = mlp_forward(self.f2_spec, self.params, f"{self.prefix}.f2", inp)
            return f1, f2, None, None
        f1, t1 = mlp_forward(self.f1_spec, self.params, f"{self.prefix}.f1",
                             inp, tangent=tangent)
        f2, t2 = mlp_forward(self.f2_spec, self.params, f"{self.prefix}.f2",
                             inp, tangent=tangent)
        return f1, f2, t1, t2

    def step(self, x: dc.Tensor, u) -> dc.Tensor:
        """Next-state mean; accepts a single state (n,) or a batch (B, n)."""
        if x.shape[-1] != self.task.state_dim:
            raise ValueError(f"state dim {x.shape[-1]} != {self.task.state_dim}")
        f1, f2, _, _ = self._heads(x, u)
        gate = dc.sigmoid(f2)
        if x.ndim == 2:
            gate = dc.matmul(gate, dc.ones((1, self.task.state_dim)))
        return dc.add(x, dc.mul(f1, gate))

    def step_with_jacobian(self, x: dc.Tensor, u):
        """Next-state mean and the state Jacobian A, both differentiable.

        A is assembled from tangent rows pushed through the heads, so the
        tape sees only first-order ops and A participates in training
        gradients like any other forward quantity.
        """
        n = self.task.state_dim
        if x.shape != (n,):
            raise ValueError("jacobian path expects a single state vector")
        t0 = np.zeros((n, n + self.task.control_dim))
        t0[:, :n] = np.eye(n)
        f1, f2, t1, t2 = self._heads(x, u, tangent=dc.Tensor(t0))
        gate = dc.sigmoid(f2)
        dgate = dc.mul(gate, dc.sub(dc.Tensor(1.0), gate))
        x_next = dc.add(x, dc.mul(f1, gate))
        grad_f2 = dc.mul(dc.reshape(t2, (n,)), dgate)
        a = dc.add(dc.add(dc.eye(n), dc.mul(dc.transpose(t1), gate)),
                   dc.outer(f1, grad_f2))
        return x_next, a

    def jacobian(self, x: np.ndarray, u) -> np.ndarray:
        """Exact state Jacobian via one reverse-mode pass per state dimension."""
        n = self.task.state_dim
        xt = dc.Tensor(np.asarray(x, dtype=np.float64).copy(), requires_grad=True)
        y = self.step(xt, u)
        return np.stack([dc.gradients(y[j], [xt])[0] for j in range(n)])

    def q_matrix(self) -> dc.Tensor:
        q = dc.softplus(self.params[f"{self.prefix}.q_raw"])
        return dc.add(dc.diag(q), dc.mul(dc.Tensor(Q_FLOOR),
                                         dc.eye(self.task.state_dim)))


class VirtualSensor:
    """Discriminative sensor: observation -> state-space measurement and R.

    The covariance head is zero-initialized, so every R diagonal starts at
    softplus(0) = ln 2; its parameters are meant to be trained only end to
    end (``cov_parameter_names`` lets the trainer exclude them earlier).
    """

    def __init__(self, task: TaskSpec, modalities, rng: np.random.Generator,
                 width: int = 32, feature_dim: int = 32, prefix: str = "sensor"):
        self.task = task
        self.prefix = prefix
        self.modalities = tuple(modalities)
        self.encset = make_encoder_set(self.modalities, width=width,
                                       feature_dim=feature_dim)
        self.state_spec = MlpSpec((feature_dim, task.state_dim))
        self.cov_spec = MlpSpec((feature_dim, task.state_dim))
        self.params = {}
        self.params.update(init_encoder_set(self.encset, rng, prefix))
        self.params.update(init_mlp(self.state_spec, rng, f"{prefix}.state"))
        self.params.update(init_mlp(self.cov_spec, rng, f"{prefix}.cov",
                                    zero=True))

    def named_parameters(self) -> dict:
        return dict(self.params)

    def cov_parameter_names(self) -> tuple:
        return tuple(k for k in self.params if k.startswith(f"{self.prefix}.cov."))

    def sense(self, inputs: dict, subset=None):
        """Returns (z, r_diag); both (n,) for one frame or (B, n) batched."""
        feat = encode_observation(self.encset, self.params, self.prefix,
                                  inputs, subset=subset)
        z = mlp_forward(self.state_spec, self.params, f"{self.prefix}.state", feat)
        pre = mlp_forward(self.cov_spec, self.params, f"{self.prefix}.cov", feat)
        r_diag = dc.add(dc.softplus(pre), dc.Tensor(R_FLOOR))
        return z, r_diag


class MeasurementModel:
    """Per-particle observation log-likelihood, conditioned on encoded data."""

    def __init__(self, task: TaskSpec, modalities, rng: np.random.Generator,
                 width: int = 32, feature_dim: int = 32, prefix: str = "meas"):
        self.task = task
        self.prefix = prefix
        self.modalities = tuple(modalities)
        self.encset = make_encoder_set(self.modalities, width=width,
                                       feature_dim=feature_dim)
        self.embed_spec = MlpSpec((task.state_dim, width, feature_dim),
                                  residual=True)
        # head also sees the squared embedding difference so a Gaussian
        # bowl around the perceived state is linearly representable
        self.head_spec = MlpSpec((3 * feature_dim, width, 1), residual=True)
        self.params = {}
        self.params.update(init_encoder_set(self.encset, rng, prefix))
        self.params.update(init_mlp(self.embed_spec, rng, f"{prefix}.embed"))
        self.params.update(init_mlp(self.head_spec, rng, f"{prefix}.head"))

    def named_parameters(self) -> dict:
        return dict(self.params)

    def loglik(self, inputs: dict, particles: dc.Tensor, subset=None) -> dc.Tensor:
        """Log-likelihood per particle row.

        ``inputs`` may hold one frame (vectors) shared by all particles, or
        one row per particle for batched pretraining.
        """
        if particles.ndim != 2 or particles.shape[1] != self.task.state_dim:
            raise ValueError(f"particles must be (P, {self.task.state_dim}), "
                             f"got {particles.shape}")
        n_rows = particles.shape[0]
        feat = encode_observation(self.encset, self.params, self.prefix,
                                  inputs, subset=subset)
        if feat.ndim == 1:
            feat = dc.outer(dc.ones(n_rows), feat)
        elif feat.shape[0] != n_rows:
            raise ValueError("one observation row per particle required")
        embedded = mlp_forward(self.embed_spec, self.params,
                               f"{self.prefix}.embed", particles)
        diff = dc.sub(embedded, feat)
        joint = dc.concat([embedded, feat, dc.mul(diff, diff)], axis=-1)
        out = mlp_forward(self.head_spec, self.params, f"{self.prefix}.head",
                          joint)
        return dc.reshape(out, (n_rows,))


class CrossmodalWeightModel:
    """Maps the full multimodal observation to modality weights.

    EKF variant: per-state-dimension positive vectors via softplus + eps.
    PF variant: a positive scalar pair summing to one via softmax. Both
    heads start at zero, so the initial weights are exactly balanced.
    """

    def __init__(self, task: TaskSpec, variant: str, rng: np.random.Generator,
                 width: int = 32, feature_dim: int = 32, prefix: str = "weights"):
        if variant not in ("ekf", "pf"):
            raise ValueError(f"unknown weight-model variant {variant!r}")
        self.task = task
        self.variant = variant
        self.prefix = prefix
        self.encset = make_encoder_set(("image", "force", "proprio"),
                                       width=width, feature_dim=feature_dim)
        out_width = 2 * task.state_dim if variant == "ekf" else 2
        self.head_spec = MlpSpec((feature_dim, out_width))
        self.params = {}
        self.params.update(init_encoder_set(self.encset, rng, prefix))
        self.params.update(init_mlp(self.head_spec, rng, f"{prefix}.head",
                                    zero=True))

    def named_parameters(self) -> dict:
        return dict(self.params)

    def weights(self, inputs: dict):
        """(beta_m1, beta_m2) for one frame."""
        feat = encode_observation(self.encset, self.params, self.prefix, inputs)
        pre = mlp_forward(self.head_spec, self.params, f"{self.prefix}.head",
                          feat)
        if self.variant == "ekf":
            n = self.task.state_dim
            beta = dc.add(dc.softplus(pre), dc.Tensor(BETA_EPS))
            return beta[:n], beta[n:]
        sm = dc.softmax(pre, axis=-1)
        return sm[0:1], sm[1:2]
