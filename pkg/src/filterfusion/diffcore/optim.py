"""Adam optimizer over named parameter tensors."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamState:
    """Per-parameter first/second moments with bias-corrected updates.

    Parameters are a name -> Tensor mapping; names are used to surface
    non-finite gradients. A step with any non-finite gradient is rejected
    before touching any parameter.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, scale: float = 1.0) -> None:
        """Apply one Adam update using each parameter's ``.grad``.

        ``scale`` multiplies gradients first (e.g. 1/batch for grads
        accumulated over a batch). Parameters with no gradient are skipped.
        """
        grads = {}
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
            grads[name] = g
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = self.params[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Moments and step count as named arrays, for checkpointing."""
        out: dict[str, np.ndarray] = {"__adam__.t": np.array([float(self.t)])}
        for name in self.params:
            out[f"__adam__.m.{name}"] = self.m[name]
            out[f"__adam__.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["__adam__.t"][0])
        for name in self.params:
            self.m[name] = arrays[f"__adam__.m.{name}"].copy()
            self.v[name] = arrays[f"__adam__.v.{name}"].copy()
