"""MLP encoders, shared trunks, and LSTM cells on top of the autodiff core."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .task import ALL_MODALITIES, MODALITY_WIDTHS

OUT_ACTIVATIONS = ("identity", "softplus", "sigmoid", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    """Fully-connected stack: widths = (input, hidden..., output)."""

    widths: tuple
    activation: str = "relu"
    residual: bool = False
    out_activation: str = "identity"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("MlpSpec needs at least one layer")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.out_activation not in OUT_ACTIVATIONS:
            raise ValueError(f"unsupported output activation "
                             f"{self.out_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def skip_at(self, layer: int) -> bool:
        """Residual skips connect equal-width hidden layers only."""
        return (self.residual and layer < self.n_layers - 1
                and self.widths[layer] == self.widths[layer + 1])


def init_mlp(spec: MlpSpec, rng: np.random.Generator, prefix: str,
             zero: bool = False) -> dict:
    """He-uniform hidden layers, Xavier-uniform output layer, zero biases."""
    params = {}
    for layer in range(spec.n_layers):
        fan_in, fan_out = spec.widths[layer], spec.widths[layer + 1]
        if zero:
            w = np.zeros((fan_in, fan_out))
        elif layer < spec.n_layers - 1:
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"{prefix}.w{layer}"] = dc.Tensor(w, requires_grad=True)
        params[f"{prefix}.b{layer}"] = dc.Tensor(np.zeros(fan_out),
                                                 requires_grad=True)
    return params


def _out_activation(kind: str, pre: dc.Tensor, need_derivative: bool):
    if kind == "identity":
        return pre, None
    if kind == "softplus":
        out = dc.softplus(pre)
        return out, dc.sigmoid(pre) if need_derivative else None
    if kind == "sigmoid":
        out = dc.sigmoid(pre)
        dact = dc.mul(out, dc.sub(dc.Tensor(1.0), out)) if need_derivative else None
        return out, dact
    out = dc.tanh(pre)
    dact = dc.sub(dc.Tensor(1.0), dc.mul(out, out)) if need_derivative else None
    return out, dact


def mlp_forward(spec: MlpSpec, params: dict, prefix: str, x: dc.Tensor,
                tangent: dc.Tensor = None):
    """Run the MLP; optionally propagate directional-derivative rows.

    ``tangent`` is a (k, input_width) matrix whose rows are pushed through
    the same layers, yielding rows of the transposed input Jacobian. The
    tangent path uses only first-order ops, so the result stays
    differentiable (the tape records no derivatives of derivatives).
    Tangent propagation requires a 1-D ``x``.
    """
    if x.shape[-1] != spec.widths[0]:
        raise ValueError(f"input width {x.shape[-1]} != spec width "
                         f"{spec.widths[0]}")
    if tangent is not None and x.ndim != 1:
        raise ValueError("tangent propagation supports vector inputs only")
    h, t = x, tangent
    for layer in range(spec.n_layers):
        w = params[f"{prefix}.w{layer}"]
        b = params[f"{prefix}.b{layer}"]
        pre = dc.add(dc.matmul(h, w), b)
        if t is not None:
            t = dc.matmul(t, w)
        if layer < spec.n_layers - 1:
            act = dc.relu(pre)
            if t is not None:
                t = dc.mul(t, dc.relu_mask(pre))
            if spec.skip_at(layer):
                act = dc.add(act, h)
                if t is not None:
                    t = dc.add(t, tangent if layer == 0 else t_prev)
            h = act
        else:
            h, dact = _out_activation(spec.out_activation, pre, t is not None)
            if t is not None and dact is not None:
                t = dc.mul(t, dact)
        t_prev = t
    return (h, t) if tangent is not None else h


@dataclass(frozen=True)
class LstmCellSpec:
    input_width: int
    hidden_width: int


GATES = ("i", "f", "g", "o")


def init_lstm(cell: LstmCellSpec, rng: np.random.Generator, prefix: str) -> dict:
    """Xavier-uniform gate weights; forget-gate bias starts at 1.0."""
    params = {}
    for gate in GATES:
        for name, shape in ((f"w{gate}", (cell.input_width, cell.hidden_width)),
                            (f"u{gate}", (cell.hidden_width, cell.hidden_width))):
            limit = np.sqrt(6.0 / sum(shape))
            params[f"{prefix}.{name}"] = dc.Tensor(
                rng.uniform(-limit, limit, size=shape), requires_grad=True)
        bias = np.full(cell.hidden_width, 1.0 if gate == "f" else 0.0)
        params[f"{prefix}.b{gate}"] = dc.Tensor(bias, requires_grad=True)
    return params


def lstm_step(cell: LstmCellSpec, params: dict, prefix: str, x: dc.Tensor,
              hidden: dc.Tensor, cellstate: dc.Tensor):
    """Standard LSTM recurrence; sigmoid gates, tanh candidate."""
    if x.shape[-1] != cell.input_width:
        raise ValueError(f"lstm input width {x.shape[-1]} != "
                         f"{cell.input_width}")
    if hidden.shape != cellstate.shape or hidden.shape[-1] != cell.hidden_width:
        raise ValueError("lstm state shapes do not match the cell spec")

    def gate(g):
        return dc.add(dc.add(dc.matmul(x, params[f"{prefix}.w{g}"]),
                             dc.matmul(hidden, params[f"{prefix}.u{g}"])),
                      params[f"{prefix}.b{g}"])

    i = dc.sigmoid(gate("i"))
    f = dc.sigmoid(gate("f"))
    g = dc.tanh(gate("g"))
    o = dc.sigmoid(gate("o"))
    c_next = dc.add(dc.mul(f, cellstate), dc.mul(i, g))
    h_next = dc.mul(o, dc.tanh(c_next))
    return h_next, c_next


@dataclass(frozen=True)
class ModalityEncoderSet:
    """Per-modality encoders feeding a shared trunk.

    The trunk input width is the sum of the configured encoder outputs
    (control included when ``include_control`` is set); masked-out
    modalities contribute zero features so the trunk width is static.
    """

    modalities: tuple
    encoders: dict = field(hash=False)
    trunk: MlpSpec
    feature_dim: int
    include_control: bool = False

    def __post_init__(self):
        if not self.modalities:
            raise ValueError("encoder set needs at least one modality")
        outs = {spec.widths[-1] for spec in self.encoders.values()}
        if outs != {self.feature_dim}:
            raise ValueError("encoder output widths must all equal feature_dim")
        if self.trunk.widths[0] != self.feature_dim * len(self.encoders):
            raise ValueError("trunk input width must equal the concatenated "
                             "encoder outputs")


def make_encoder_set(modalities, width: int = 32, feature_dim: int = 32,
                     include_control: bool = False, control_dim: int = 2,
                     residual: bool = True) -> ModalityEncoderSet:
    modalities = tuple(modalities)
    for m in modalities:
        if m not in ALL_MODALITIES:
            raise ValueError(f"unknown modality {m!r}")
    encoders = {}
    for m in modalities:
        encoders[m] = MlpSpec((MODALITY_WIDTHS[m], width, width, feature_dim),
                              residual=residual)
    if include_control:
        encoders["control"] = MlpSpec((control_dim, width, width, feature_dim),
                                      residual=residual)
    trunk = MlpSpec((feature_dim * len(encoders), width, width, feature_dim),
                    residual=residual)
    return ModalityEncoderSet(modalities=modalities, encoders=encoders,
                              trunk=trunk, feature_dim=feature_dim,
                              include_control=include_control)


def init_encoder_set(encset: ModalityEncoderSet, rng: np.random.Generator,
                     prefix: str) -> dict:
    params = {}
    for name, spec in encset.encoders.items():
        params.update(init_mlp(spec, rng, f"{prefix}.enc.{name}"))
    params.update(init_mlp(encset.trunk, rng, f"{prefix}.trunk"))
    return params


def _as_tensor(v) -> dc.Tensor:
    return v if isinstance(v, dc.Tensor) else dc.Tensor(np.asarray(v, dtype=np.float64))


def encode_observation(encset: ModalityEncoderSet, params: dict, prefix: str,
                       inputs: dict, subset=None, control=None) -> dc.Tensor:
    """Encode selected modalities and pass them through the shared trunk.

    ``inputs`` maps modality name to a (d,) or (B, d) array/Tensor.
    ``subset`` restricts which configured encoders run; the rest contribute
    zeros, so the output is structurally independent of their inputs.
    """
    subset = encset.modalities if subset is None else tuple(subset)
    if not subset:
        raise ValueError("modality mask is empty")
    for m in subset:
        if m not in encset.modalities:
            raise ValueError(f"modality {m!r} not configured on this encoder set")

    feats = []
    batch_shape = None
    for m in subset:
        x = _as_tensor(inputs[m])
        batch_shape = x.shape[:-1]
        feats.append((m, mlp_forward(encset.encoders[m], params,
                                     f"{prefix}.enc.{m}", x)))
    if encset.include_control:
        if control is None:
            raise ValueError("this encoder set expects a control input")
        feats.append(("control", mlp_forward(encset.encoders["control"], params,
                                             f"{prefix}.enc.control",
                                             _as_tensor(control))))
    by_name = dict(feats)
    ordered = []
    for name in list(encset.modalities) + (["control"] if encset.include_control else []):
        if name in by_name:
            ordered.append(by_name[name])
        else:
            ordered.append(dc.zeros(batch_shape + (encset.feature_dim,)))
    merged = dc.concat(ordered, axis=-1)
    return mlp_forward(encset.trunk, params, f"{prefix}.trunk", merged)


def count_parameters(params: dict) -> int:
    return sum(int(np.prod(t.shape)) if t.shape else 1 for t in params.values())
