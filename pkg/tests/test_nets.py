"""Tests for MLP, LSTM, and modality encoder building blocks."""
import numpy as np
import pytest

from filterfusion import diffcore as dc
from filterfusion.nets import (
    LstmCellSpec, MlpSpec, count_parameters, encode_observation, init_lstm,
    init_mlp, lstm_step, make_encoder_set, init_encoder_set, mlp_forward,
)
from filterfusion.task import ALL_MODALITIES, MODALITY_WIDTHS

from helpers import check_gradients, finite_diff, rel_err


def test_mlp_spec_rejects_empty_stack():
    with pytest.raises(ValueError, match="at least one layer"):
        MlpSpec(widths=(4,))


def test_mlp_spec_rejects_unknown_output_activation():
    with pytest.raises(ValueError, match="output activation"):
        MlpSpec(widths=(4, 4), out_activation="swish")


def test_identity_linear_layer_passes_input_through():
    spec = MlpSpec(widths=(2, 2))
    params = init_mlp(spec, np.random.default_rng(0), "m")
    params["m.w0"].data[...] = np.eye(2)
    params["m.b0"].data[...] = 0.0
    out = mlp_forward(spec, params, "m", dc.Tensor(np.array([1.0, 2.0])))
    assert np.array_equal(out.data, [1.0, 2.0])


def test_zero_weights_relu_gives_zero_vector():
    spec = MlpSpec(widths=(3, 8, 4))
    params = init_mlp(spec, np.random.default_rng(0), "m", zero=True)
    out = mlp_forward(spec, params, "m", dc.Tensor(np.array([2.0, -1.0, 0.5])))
    assert np.array_equal(out.data, np.zeros(4))


def test_mlp_input_width_mismatch():
    spec = MlpSpec(widths=(3, 4))
    params = init_mlp(spec, np.random.default_rng(0), "m")
    with pytest.raises(ValueError, match="width"):
        mlp_forward(spec, params, "m", dc.Tensor(np.zeros(5)))


@pytest.mark.parametrize("residual", [False, True])
@pytest.mark.parametrize("out_act", ["identity", "softplus", "sigmoid"])
def test_mlp_gradients_match_finite_differences(residual, out_act):
    rng = np.random.default_rng(3)
    spec = MlpSpec(widths=(5, 8, 8, 3), residual=residual, out_activation=out_act)
    params = init_mlp(spec, rng, "m")
    names = sorted(params)
    x = rng.standard_normal(5)
    w = rng.standard_normal(3)

    def build(*ts):
        p = dict(zip(names, ts))
        out = mlp_forward(spec, p, "m", dc.Tensor(x))
        return dc.tsum(dc.mul(out, dc.Tensor(w)))

    check_gradients(build, [params[n].data for n in names], tol=1e-6)


def test_residual_skip_changes_output_and_matches_manual_composition():
    rng = np.random.default_rng(4)
    spec_skip = MlpSpec(widths=(4, 4, 4, 2), residual=True)
    spec_plain = MlpSpec(widths=(4, 4, 4, 2), residual=False)
    params = init_mlp(spec_plain, rng, "m")
    x = rng.standard_normal(4)
    plain = mlp_forward(spec_plain, params, "m", dc.Tensor(x)).data
    skip = mlp_forward(spec_skip, params, "m", dc.Tensor(x)).data
    assert not np.allclose(plain, skip)

    h = x
    for layer in range(2):
        pre = h @ params[f"m.w{layer}"].data + params[f"m.b{layer}"].data
        h = np.maximum(pre, 0.0) + h
    want = h @ params["m.w2"].data + params["m.b2"].data
    assert np.allclose(skip, want, atol=1e-12)


def test_mlp_batch_matches_per_row():
    rng = np.random.default_rng(5)
    spec = MlpSpec(widths=(6, 8, 2), residual=False)
    params = init_mlp(spec, rng, "m")
    xs = rng.standard_normal((4, 6))
    batched = mlp_forward(spec, params, "m", dc.Tensor(xs)).data
    rows = [mlp_forward(spec, params, "m", dc.Tensor(x)).data for x in xs]
    assert np.allclose(batched, np.stack(rows), atol=1e-15)


@pytest.mark.parametrize("residual", [False, True])
def test_tangent_rows_equal_jacobian(residual):
    rng = np.random.default_rng(6)
    spec = MlpSpec(widths=(4, 6, 6, 3), residual=residual,
                   out_activation="sigmoid")
    params = init_mlp(spec, rng, "m")
    x = rng.standard_normal(4)
    out, tan = mlp_forward(spec, params, "m", dc.Tensor(x),
                           tangent=dc.eye(4))

    def f(xv):
        return mlp_forward(spec, params, "m", dc.Tensor(xv)).data

    fd_rows = []
    for j in range(3):
        g = finite_diff(lambda xv: float(f(xv)[j]), [x.copy()])[0]
        fd_rows.append(g)
    jac_fd = np.stack(fd_rows)          # (out, in)
    assert rel_err(tan.data.T, jac_fd) < 1e-6

    xt = dc.Tensor(x.copy(), requires_grad=True)
    yt = mlp_forward(spec, params, "m", xt)
    rev = np.stack([dc.gradients(yt[j], [xt])[0] for j in range(3)])
    assert rel_err(tan.data.T, rev) < 1e-12


def test_tangent_path_is_differentiable_in_parameters():
    rng = np.random.default_rng(7)
    spec = MlpSpec(widths=(3, 5, 3), residual=False)
    params = init_mlp(spec, rng, "m")
    names = sorted(params)
    x = rng.standard_normal(3)
    w = rng.standard_normal((3, 3))

    def build(*ts):
        p = dict(zip(names, ts))
        _, tan = mlp_forward(spec, p, "m", dc.Tensor(x), tangent=dc.eye(3))
        return dc.tsum(dc.mul(tan, dc.Tensor(w)))

    check_gradients(build, [params[n].data for n in names], tol=1e-6)


def test_lstm_zero_params_zero_state_gives_zero_hidden():
    cell = LstmCellSpec(input_width=3, hidden_width=4)
    params = {k: dc.Tensor(np.zeros_like(v.data))
              for k, v in init_lstm(cell, np.random.default_rng(0), "c").items()}
    h, c = lstm_step(cell, params, "c", dc.Tensor(np.ones(3)),
                     dc.Tensor(np.zeros(4)), dc.Tensor(np.zeros(4)))
    assert np.array_equal(h.data, np.zeros(4))
    assert np.array_equal(c.data, np.zeros(4))


def test_lstm_high_forget_bias_preserves_cellstate():
    cell = LstmCellSpec(input_width=3, hidden_width=4)
    params = {k: dc.Tensor(np.zeros_like(v.data))
              for k, v in init_lstm(cell, np.random.default_rng(0), "c").items()}
    params["c.bf"].data[...] = 10.0
    c0 = np.array([0.5, -0.75, 1.0, 0.25])
    _, c1 = lstm_step(cell, params, "c", dc.Tensor(np.zeros(3)),
                      dc.Tensor(np.zeros(4)), dc.Tensor(c0))
    assert np.max(np.abs(c1.data - c0)) < 1e-4


def test_lstm_forget_bias_initialized_to_one():
    cell = LstmCellSpec(input_width=3, hidden_width=4)
    params = init_lstm(cell, np.random.default_rng(0), "c")
    assert np.array_equal(params["c.bf"].data, np.ones(4))
    assert np.array_equal(params["c.bi"].data, np.zeros(4))


def test_lstm_gradient_through_sixteen_steps():
    rng = np.random.default_rng(8)
    cell = LstmCellSpec(input_width=3, hidden_width=4)
    params = init_lstm(cell, rng, "c")
    names = sorted(params)
    xs = rng.standard_normal((16, 3)) * 0.5

    def build(*ts):
        p = dict(zip(names, ts))
        h = dc.zeros(4)
        c = dc.zeros(4)
        for t in range(16):
            h, c = lstm_step(cell, p, "c", dc.Tensor(xs[t]), h, c)
        return dc.tsum(h)

    check_gradients(build, [params[n].data for n in names], tol=1e-6)


def _random_inputs(rng, batch=None):
    shape = (batch,) if batch else ()
    return {
        "image": rng.random(shape + (MODALITY_WIDTHS["image"],)),
        "force": rng.standard_normal(shape + (4,)),
        "proprio": rng.standard_normal(shape + (2,)),
    }


def test_encoder_subset_output_ignores_unselected_modalities():
    rng = np.random.default_rng(9)
    encset = make_encoder_set(ALL_MODALITIES)
    params = init_encoder_set(encset, rng, "e")
    inputs = _random_inputs(rng)
    out1 = encode_observation(encset, params, "e", inputs,
                              subset=("image",)).data
    inputs2 = dict(inputs, force=rng.standard_normal(4),
                   proprio=rng.standard_normal(2))
    out2 = encode_observation(encset, params, "e", inputs2,
                              subset=("image",)).data
    assert np.array_equal(out1, out2)


def test_encoder_full_mask_equals_manual_composition():
    rng = np.random.default_rng(10)
    encset = make_encoder_set(ALL_MODALITIES)
    params = init_encoder_set(encset, rng, "e")
    inputs = _random_inputs(rng)
    got = encode_observation(encset, params, "e", inputs).data
    feats = [mlp_forward(encset.encoders[m], params, f"e.enc.{m}",
                         dc.Tensor(inputs[m])) for m in ALL_MODALITIES]
    want = mlp_forward(encset.trunk, params, "e.trunk",
                       dc.concat(feats, axis=-1)).data
    assert np.array_equal(got, want)


def test_encoder_empty_mask_rejected():
    rng = np.random.default_rng(11)
    encset = make_encoder_set(("image",))
    params = init_encoder_set(encset, rng, "e")
    with pytest.raises(ValueError, match="empty"):
        encode_observation(encset, params, "e", _random_inputs(rng), subset=())


def test_encoder_unconfigured_modality_rejected():
    rng = np.random.default_rng(12)
    encset = make_encoder_set(("image",))
    params = init_encoder_set(encset, rng, "e")
    with pytest.raises(ValueError, match="not configured"):
        encode_observation(encset, params, "e", _random_inputs(rng),
                           subset=("force",))


def test_encoder_blacked_out_image_is_finite():
    rng = np.random.default_rng(13)
    encset = make_encoder_set(ALL_MODALITIES)
    params = init_encoder_set(encset, rng, "e")
    inputs = _random_inputs(rng)
    inputs["image"] = np.zeros(MODALITY_WIDTHS["image"])
    out = encode_observation(encset, params, "e", inputs).data
    assert np.all(np.isfinite(out))


def test_encoder_batch_equivariance():
    rng = np.random.default_rng(14)
    encset = make_encoder_set(ALL_MODALITIES)
    params = init_encoder_set(encset, rng, "e")
    inputs = _random_inputs(rng, batch=5)
    out = encode_observation(encset, params, "e", inputs).data
    perm = rng.permutation(5)
    permuted = {m: v[perm] for m, v in inputs.items()}
    out_p = encode_observation(encset, params, "e", permuted).data
    # BLAS batches rows through different blocking, so allow a few ulps
    assert np.allclose(out_p, out[perm], rtol=1e-12, atol=1e-13)


def test_control_encoder_requires_control_input():
    rng = np.random.default_rng(15)
    encset = make_encoder_set(ALL_MODALITIES, include_control=True)
    params = init_encoder_set(encset, rng, "e")
    inputs = _random_inputs(rng)
    with pytest.raises(ValueError, match="control"):
        encode_observation(encset, params, "e", inputs)
    out = encode_observation(encset, params, "e", inputs,
                             control=np.array([0.3, -0.2]))
    assert out.data.shape == (encset.feature_dim,)


def test_count_parameters_matches_manual_sum():
    rng = np.random.default_rng(16)
    spec = MlpSpec(widths=(4, 8, 2))
    params = init_mlp(spec, rng, "m")
    assert count_parameters(params) == 4 * 8 + 8 + 8 * 2 + 2
