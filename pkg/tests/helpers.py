"""Shared numerical oracles for the test suite."""
from __future__ import annotations

import numpy as np

from filterfusion import diffcore as dc


def finite_diff(fn, arrays, eps=1e-5):
    """Central finite differences of a scalar fn w.r.t. a list of arrays.

    ``fn`` takes numpy arrays and returns a float; this is the independent
    oracle the reverse-mode gradients are checked against.
    """
    grads = []
    for k, base in enumerate(arrays):
        base = np.asarray(base, dtype=np.float64)
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(*arrays)
            flat[i] = orig - eps
            lo = fn(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(1e-8, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / denom


def check_gradients(build, arrays, eps=1e-5, tol=1e-6):
    """Compare reverse-mode gradients of ``build`` against finite differences.

    ``build`` maps diffcore Tensors to a scalar Tensor. Returns the worst
    relative error across all inputs.
    """
    leaves = [dc.Tensor(np.asarray(a, dtype=np.float64).copy(), requires_grad=True)
              for a in arrays]
    out = build(*leaves)
    dc.backward(out)

    def as_scalar(*arrs):
        consts = [dc.Tensor(a) for a in arrs]
        return float(build(*consts).data)

    fd = finite_diff(as_scalar, [l.data for l in leaves], eps=eps)
    worst = 0.0
    for leaf, g in zip(leaves, fd):
        worst = max(worst, rel_err(leaf.grad, g))
    assert worst < tol, f"gradient mismatch: relative error {worst:.3e} >= {tol}"
    return worst


def random_spd(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T) + n * 0.5 * np.eye(n)


class ReferenceKalman:
    """Textbook linear Kalman filter, written directly in numpy.

    Independent of the diffcore path: uses explicit matrix inverses.
    """

    def __init__(self, A, Q, H, R):
        self.A, self.Q, self.H, self.R = A, Q, H, R

    def predict(self, mu, sigma, u=None, B=None):
        mu_p = self.A @ mu
        if u is not None and B is not None:
            mu_p = mu_p + B @ u
        sigma_p = self.A @ sigma @ self.A.T + self.Q
        return mu_p, sigma_p

    def update(self, mu_p, sigma_p, z):
        H, R = self.H, self.R
        S = H @ sigma_p @ H.T + R
        K = sigma_p @ H.T @ np.linalg.inv(S)
        mu = mu_p + K @ (z - H @ mu_p)
        sigma = (np.eye(len(mu)) - K @ H) @ sigma_p
        return mu, sigma


def op_gradient_cases(rng):
    """Gradient-check cases covering every differentiable op kind.

    Each case is (name, build, arrays): ``build`` maps Tensors to a scalar
    Tensor; ``arrays`` are the numpy inputs. Outputs are scalarized with a
    fixed random weighting so every output entry is exercised. SPD and
    triangular inputs are built inside the function from unconstrained
    arrays so the finite-difference oracle stays valid.
    """
    def away_from_zero(shape, margin=0.1):
        x = rng.uniform(margin, 1.0, size=shape)
        return x * rng.choice([-1.0, 1.0], size=shape)

    def weighted(build_out, *arrays, wshape=None):
        consts = [dc.Tensor(a) for a in arrays]
        wshape = build_out(*consts).shape if wshape is None else wshape
        w = rng.standard_normal(wshape)

        def build(*ts):
            return dc.tsum(dc.mul(build_out(*ts), dc.Tensor(w)))
        return build

    cases = []
    b, n, m = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 5))

    x = rng.standard_normal((b, n))
    y = rng.standard_normal((b, n))
    v = rng.standard_normal(n)
    for name, fn in [("add", dc.add), ("sub", dc.sub), ("mul", dc.mul)]:
        cases.append((name, weighted(fn, x, y), [x, y]))
        cases.append((name + "_batchcast", weighted(fn, x, v), [x, v]))
    ypos = np.abs(y) + 0.5
    cases.append(("div", weighted(dc.div, x, ypos), [x, ypos]))
    cases.append(("neg", weighted(dc.neg, x), [x]))
    cases.append(("pow", weighted(lambda t: t ** 3.0, np.abs(x) + 0.2), [np.abs(x) + 0.2]))

    a2 = rng.standard_normal((b, n))
    b2 = rng.standard_normal((n, m))
    v1 = rng.standard_normal(n)
    cases.append(("matmul_22", weighted(dc.matmul, a2, b2), [a2, b2]))
    cases.append(("matmul_21", weighted(dc.matmul, a2, v1), [a2, v1]))
    cases.append(("matmul_12", weighted(dc.matmul, v1, b2), [v1, b2]))
    cases.append(("matmul_11", weighted(dc.matmul, v1, v1 + 1.0), [v1, v1 + 1.0]))

    cases.append(("transpose", weighted(dc.transpose, a2), [a2]))
    cases.append(("reshape", weighted(lambda t: dc.reshape(t, (n, b)), a2), [a2]))
    cases.append(("concat", weighted(lambda p, q: dc.concat([p, q], axis=1), x, y), [x, y]))
    cases.append(("slice", weighted(lambda t: t[1:, : max(1, n - 1)], x), [x]))
    idx = rng.integers(0, b, size=b + 2)
    cases.append(("gather_rows", weighted(lambda t: dc.gather_rows(t, idx), x), [x]))

    cases.append(("sum_all", lambda t: dc.tsum(t), [x]))
    cases.append(("sum_axis", weighted(lambda t: dc.tsum(t, axis=0), x), [x]))
    cases.append(("mean_all", lambda t: dc.tmean(t), [x]))
    cases.append(("mean_axis", weighted(lambda t: dc.tmean(t, axis=1), x), [x]))

    xa = away_from_zero((b, n))
    cases.append(("relu", weighted(dc.relu, xa), [xa]))
    for name, fn in [("sigmoid", dc.sigmoid), ("tanh", dc.tanh),
                     ("exp", dc.exp), ("softplus", dc.softplus)]:
        cases.append((name, weighted(fn, x), [x]))
    xpos = np.abs(x) + 0.3
    cases.append(("log", weighted(dc.log, xpos), [xpos]))
    cases.append(("softmax", weighted(lambda t: dc.softmax(t, axis=-1), x), [x]))
    cases.append(("logsumexp_axis", weighted(lambda t: dc.logsumexp(t, axis=1), x), [x]))
    cases.append(("logsumexp_all", lambda t: dc.logsumexp(t), [x]))

    u1 = rng.standard_normal(n)
    u2 = rng.standard_normal(m)
    cases.append(("outer", weighted(dc.outer, u1, u2), [u1, u2]))
    cases.append(("diag", weighted(dc.diag, v1), [v1]))
    cases.append(("diagonal", weighted(dc.diagonal, rng.standard_normal((n, n))),
                  [rng.standard_normal((n, n))]))

    def spd_from(t):
        return dc.add(dc.matmul(t, dc.transpose(t)),
                      dc.mul(dc.Tensor(0.5 * n), dc.eye(n)))

    xs = rng.standard_normal((n, n))
    cases.append(("cholesky", weighted(lambda t: dc.cholesky(spd_from(t)), xs), [xs]))

    tril_mask = np.tril(np.ones((n, n)))
    rhs = rng.standard_normal((n, m))
    rv = rng.standard_normal(n)

    def lower_from(t):
        return dc.add(dc.mul(t, dc.Tensor(tril_mask)), dc.mul(dc.Tensor(1.5), dc.eye(n)))

    cases.append(("solve_triangular",
                  weighted(lambda t, r: dc.solve_triangular(lower_from(t), r), xs, rhs),
                  [xs, rhs]))
    cases.append(("solve_triangular_trans",
                  weighted(lambda t, r: dc.solve_triangular(lower_from(t), r, trans=True),
                           xs, rv),
                  [xs, rv]))
    cases.append(("spd_solve",
                  weighted(lambda t, r: dc.spd_solve(spd_from(t), r), xs, rhs),
                  [xs, rhs]))

    mu = rng.standard_normal(n)
    var = np.abs(rng.standard_normal(n)) + 0.3
    xb = rng.standard_normal((b, n))
    cases.append(("gaussian_logpdf_diag",
                  weighted(dc.gaussian_logpdf_diag, xb, mu, var), [xb, mu, var]))
    cases.append(("gaussian_logpdf_full",
                  weighted(lambda p, q, t: dc.gaussian_logpdf_full(p, q, spd_from(t)),
                           xb, mu, xs),
                  [xb, mu, xs]))
    return cases


class LinearDynamicsAdapter:
    """Known linear system x' = M x (+ N u) exposing the dynamics interface.

    Substituted into the filters to compare them against closed-form
    Kalman results.
    """

    def __init__(self, m, q, n_ctrl=None):
        self.m = np.asarray(m, dtype=np.float64)
        self.q = np.asarray(q, dtype=np.float64)
        self.n_ctrl = None if n_ctrl is None else np.asarray(n_ctrl, np.float64)

    def step(self, x, u=None):
        mt = dc.Tensor(self.m.T)
        out = dc.matmul(x, mt) if x.ndim == 2 else dc.matmul(dc.Tensor(self.m), x)
        if self.n_ctrl is not None and u is not None:
            drive = self.n_ctrl @ np.asarray(u, dtype=np.float64)
            out = dc.add(out, dc.Tensor(drive))
        return out

    def step_with_jacobian(self, x, u=None):
        return self.step(x, u), dc.Tensor(self.m.copy())

    def jacobian(self, x, u=None):
        return self.m.copy()

    def q_matrix(self):
        return dc.Tensor(self.q.copy())
