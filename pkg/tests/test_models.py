"""Tests for the learnable dynamics, sensor, measurement, and weight models."""
import numpy as np
import pytest

from filterfusion import diffcore as dc
from filterfusion.models import (
    BETA_EPS, CrossmodalWeightModel, DynamicsModel, MeasurementModel,
    R_FLOOR, VirtualSensor,
)
from filterfusion.task import DOOR_TASK, FORCE_PROPRIO, PUSH_TASK

from helpers import check_gradients, finite_diff, rel_err


def _zero_head(params, prefix, spec):
    last = spec.n_layers - 1
    params[f"{prefix}.w{last}"].data[...] = 0.0
    params[f"{prefix}.b{last}"].data[...] = 0.0


def _small_inputs(rng, batch=None):
    shape = (batch,) if batch else ()
    return {
        "image": rng.random(shape + (1024,)),
        "force": rng.standard_normal(shape + (4,)),
        "proprio": rng.standard_normal(shape + (2,)),
    }


# ---------------------------------------------------------------------------
# dynamics


def test_dynamics_zero_update_head_is_identity():
    model = DynamicsModel(PUSH_TASK, np.random.default_rng(0))
    _zero_head(model.params, "dynamics.f1", model.f1_spec)
    x = np.array([0.3, -0.4])
    out = model.step(dc.Tensor(x), np.array([0.05, 0.0]))
    assert np.array_equal(out.data, x)


def test_dynamics_closed_gate_is_identity():
    model = DynamicsModel(PUSH_TASK, np.random.default_rng(1))
    _zero_head(model.params, "dynamics.f2", model.f2_spec)
    model.params["dynamics.f2.b2"].data[...] = -1000.0
    x = np.array([0.1, 0.2])
    out = model.step(dc.Tensor(x), np.array([0.0, 0.1]))
    assert np.array_equal(out.data, x)


def test_dynamics_batched_step_matches_rows():
    rng = np.random.default_rng(2)
    model = DynamicsModel(DOOR_TASK, rng)
    xs = rng.standard_normal((5, 3)) * 0.3
    us = rng.standard_normal((5, 2)) * 0.05
    batched = model.step(dc.Tensor(xs), us).data
    rows = [model.step(dc.Tensor(x), u).data for x, u in zip(xs, us)]
    assert np.allclose(batched, np.stack(rows), atol=1e-14)


def test_dynamics_jacobian_matches_finite_differences_many_models():
    count = 0
    for model_seed in range(20):
        rng = np.random.default_rng(model_seed)
        task = PUSH_TASK if model_seed % 2 == 0 else DOOR_TASK
        model = DynamicsModel(task, rng, width=16)
        for _ in range(5):
            x = rng.standard_normal(task.state_dim) * 0.4
            u = rng.standard_normal(task.control_dim) * 0.05
            a_rev = model.jacobian(x, u)
            dc.reset_tape()

            def f(xv):
                with dc.no_grad():
                    return model.step(dc.Tensor(xv), u).data

            fd = np.stack([finite_diff(lambda xv: float(f(xv)[j]), [x.copy()])[0]
                           for j in range(task.state_dim)])
            assert rel_err(a_rev, fd) < 1e-6
            count += 1
    assert count == 100


def test_tangent_jacobian_equals_reverse_mode_jacobian():
    rng = np.random.default_rng(3)
    for task in (PUSH_TASK, DOOR_TASK):
        model = DynamicsModel(task, rng)
        for _ in range(10):
            x = rng.standard_normal(task.state_dim) * 0.4
            u = rng.standard_normal(task.control_dim) * 0.05
            with dc.no_grad():
                x_next, a_tan = model.step_with_jacobian(dc.Tensor(x), u)
                plain = model.step(dc.Tensor(x), u)
            a_rev = model.jacobian(x, u)
            dc.reset_tape()
            assert np.array_equal(x_next.data, plain.data)
            assert rel_err(a_tan.data, a_rev) < 1e-12


def test_zero_update_head_gives_identity_jacobian():
    model = DynamicsModel(PUSH_TASK, np.random.default_rng(4))
    _zero_head(model.params, "dynamics.f1", model.f1_spec)
    _, a = model.step_with_jacobian(dc.Tensor(np.array([0.2, 0.1])),
                                    np.zeros(2))
    assert np.array_equal(a.data, np.eye(2))


def test_jacobian_assembly_is_differentiable_in_parameters():
    rng = np.random.default_rng(5)
    model = DynamicsModel(PUSH_TASK, rng, width=8)
    names = sorted(model.params)
    x = rng.standard_normal(2) * 0.3
    u = rng.standard_normal(2) * 0.05
    wa = rng.standard_normal((2, 2))
    wx = rng.standard_normal(2)

    def build(*ts):
        p = dict(zip(names, ts))
        model.params = p
        x_next, a = model.step_with_jacobian(dc.Tensor(x), u)
        return dc.add(dc.tsum(dc.mul(a, dc.Tensor(wa))),
                      dc.tsum(dc.mul(x_next, dc.Tensor(wx))))

    original = {n: model.params[n] for n in names}
    try:
        check_gradients(build, [original[n].data for n in names], tol=1e-6)
    finally:
        model.params = original


def test_q_matrix_is_spd_for_extreme_raw_values():
    model = DynamicsModel(PUSH_TASK, np.random.default_rng(6))
    for raw in (-100.0, -6.0, 0.0, 50.0):
        model.params["dynamics.q_raw"].data[...] = raw
        q = model.q_matrix().data
        np.linalg.cholesky(q)
        assert np.array_equal(q, q.T)


def test_dynamics_step_rejects_wrong_state_dim():
    model = DynamicsModel(PUSH_TASK, np.random.default_rng(7))
    with pytest.raises(ValueError, match="state dim"):
        model.step(dc.Tensor(np.zeros(3)), np.zeros(2))


# ---------------------------------------------------------------------------
# virtual sensor


def test_virtual_sensor_initial_covariance_is_log_two():
    rng = np.random.default_rng(8)
    sensor = VirtualSensor(PUSH_TASK, ("image",), rng)
    z, r = sensor.sense(_small_inputs(rng))
    assert z.data.shape == (2,)
    want = np.log(2.0) + R_FLOOR
    assert np.max(np.abs(r.data - want)) < 1e-15


def test_virtual_sensor_finite_on_blackout():
    rng = np.random.default_rng(9)
    sensor = VirtualSensor(PUSH_TASK, ("image",), rng)
    inputs = _small_inputs(rng)
    inputs["image"] = np.zeros(1024)
    z, r = sensor.sense(inputs)
    assert np.all(np.isfinite(z.data)) and np.all(r.data > 0)


def test_virtual_sensor_batch_equivariance():
    rng = np.random.default_rng(10)
    sensor = VirtualSensor(DOOR_TASK, FORCE_PROPRIO, rng)
    inputs = _small_inputs(rng, batch=6)
    z, r = sensor.sense(inputs)
    perm = rng.permutation(6)
    z2, r2 = sensor.sense({m: v[perm] for m, v in inputs.items()})
    # BLAS batches rows through different blocking, so allow a few ulps
    assert np.allclose(z2.data, z.data[perm], rtol=1e-12, atol=1e-13)
    assert np.allclose(r2.data, r.data[perm], rtol=1e-12, atol=1e-13)


def test_virtual_sensor_cov_parameter_names():
    rng = np.random.default_rng(11)
    sensor = VirtualSensor(PUSH_TASK, ("image",), rng, prefix="m1")
    names = sensor.cov_parameter_names()
    assert names == ("m1.cov.w0", "m1.cov.b0")
    assert set(names) < set(sensor.named_parameters())


def test_virtual_sensor_gradients_match_finite_differences():
    rng = np.random.default_rng(12)
    sensor = VirtualSensor(PUSH_TASK, FORCE_PROPRIO, rng, width=8,
                           feature_dim=8)
    names = sorted(sensor.params)
    inputs = _small_inputs(rng)
    wz = rng.standard_normal(2)
    wr = rng.standard_normal(2)

    def build(*ts):
        sensor.params = dict(zip(names, ts))
        z, r = sensor.sense(inputs)
        return dc.add(dc.tsum(dc.mul(z, dc.Tensor(wz))),
                      dc.tsum(dc.mul(r, dc.Tensor(wr))))

    original = {n: sensor.params[n] for n in names}
    try:
        check_gradients(build, [original[n].data for n in names], tol=1e-6)
    finally:
        sensor.params = original


# ---------------------------------------------------------------------------
# measurement model


def test_measurement_identical_particles_identical_logliks():
    rng = np.random.default_rng(13)
    model = MeasurementModel(PUSH_TASK, ("image",), rng)
    particles = np.tile(rng.standard_normal(2), (7, 1))
    ll = model.loglik(_small_inputs(rng), dc.Tensor(particles)).data
    assert ll.shape == (7,)
    # identical rows agree to BLAS blocking noise
    assert np.allclose(ll, ll[0], rtol=1e-12, atol=1e-13)
    assert np.all(np.isfinite(ll))


def test_measurement_loglik_gradient_wrt_particles():
    rng = np.random.default_rng(14)
    model = MeasurementModel(PUSH_TASK, FORCE_PROPRIO, rng, width=8,
                             feature_dim=8)
    inputs = _small_inputs(rng)
    particles = rng.standard_normal((5, 2)) * 0.4
    w = rng.standard_normal(5)

    def build(p):
        return dc.tsum(dc.mul(model.loglik(inputs, p), dc.Tensor(w)))

    check_gradients(build, [particles], tol=1e-6)


def test_measurement_batched_observations_match_single_rows():
    rng = np.random.default_rng(15)
    model = MeasurementModel(PUSH_TASK, FORCE_PROPRIO, rng)
    inputs = _small_inputs(rng, batch=4)
    particles = rng.standard_normal((4, 2)) * 0.3
    batched = model.loglik(inputs, dc.Tensor(particles)).data
    singles = [model.loglik({m: v[i] for m, v in inputs.items()},
                            dc.Tensor(particles[i:i + 1])).data[0]
               for i in range(4)]
    assert np.allclose(batched, singles, atol=1e-14)


def test_measurement_rejects_bad_particle_shape():
    rng = np.random.default_rng(16)
    model = MeasurementModel(PUSH_TASK, ("image",), rng)
    with pytest.raises(ValueError, match="particles"):
        model.loglik(_small_inputs(rng), dc.Tensor(np.zeros(2)))


# ---------------------------------------------------------------------------
# crossmodal weight model


def test_pf_weights_sum_to_one_and_start_balanced():
    rng = np.random.default_rng(17)
    model = CrossmodalWeightModel(PUSH_TASK, "pf", rng)
    b1, b2 = model.weights(_small_inputs(rng))
    assert b1.data.shape == (1,) and b2.data.shape == (1,)
    assert abs(float(b1.data[0] + b2.data[0]) - 1.0) < 1e-15
    # zero-initialized head: exactly even split regardless of the input
    assert b1.data[0] == 0.5 and b2.data[0] == 0.5


def test_pf_weights_sum_to_one_after_head_perturbation():
    rng = np.random.default_rng(18)
    model = CrossmodalWeightModel(PUSH_TASK, "pf", rng)
    model.params["weights.head.w0"].data[...] = rng.standard_normal(
        model.params["weights.head.w0"].shape)
    b1, b2 = model.weights(_small_inputs(rng))
    assert abs(float(b1.data[0] + b2.data[0]) - 1.0) < 1e-15
    assert b1.data[0] > 0 and b2.data[0] > 0


def test_ekf_weights_positive_and_balanced_at_init():
    rng = np.random.default_rng(19)
    model = CrossmodalWeightModel(DOOR_TASK, "ekf", rng)
    b1, b2 = model.weights(_small_inputs(rng))
    assert b1.data.shape == (3,) and b2.data.shape == (3,)
    assert np.all(b1.data > 0) and np.all(b2.data > 0)
    want = np.log(2.0) + BETA_EPS
    assert np.allclose(b1.data, want, atol=1e-15)
    assert np.array_equal(b1.data, b2.data)


def test_weight_model_rejects_unknown_variant():
    with pytest.raises(ValueError, match="variant"):
        CrossmodalWeightModel(PUSH_TASK, "mixture", np.random.default_rng(0))


def test_weight_model_gradients_flow_to_head():
    rng = np.random.default_rng(20)
    model = CrossmodalWeightModel(PUSH_TASK, "pf", rng, width=8, feature_dim=8)
    inputs = _small_inputs(rng)
    names = ("weights.head.w0", "weights.head.b0")

    def build(w, b):
        model.params["weights.head.w0"] = w
        model.params["weights.head.b0"] = b
        b1, _ = model.weights(inputs)
        return dc.tsum(b1)

    original = {n: model.params[n] for n in names}
    try:
        check_gradients(build, [original[n].data for n in names], tol=1e-6)
    finally:
        model.params.update(original)
