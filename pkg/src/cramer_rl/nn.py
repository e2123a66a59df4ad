"""Minimal dense feedforward networks with reverse-mode gradients.

Parameters live in one flat float64 vector per network (weights row-major,
then biases, layer by layer), which keeps Adam and Polyak updates trivial and
makes finite-difference checks over all coordinates easy.  Hidden layers are
ReLU (subgradient 0 at the kink), the output layer is affine.

`adam_step` and `polyak_update` mutate their arguments in place and bump the
parameter version counter; a `Tape` created before such an update refuses to
run `backward` afterwards (StaleTapeError) since its stored views would no
longer match the forward pass.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


class StaleTapeError(RuntimeError):
    """The parameters were updated after the forward pass that built this tape."""


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple  # (input, hidden..., output)
    hidden_activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 3:
            raise ValueError("need at least one hidden layer")
        if any(n < 1 for n in sizes):
            raise ValueError("layer sizes must be >= 1")
        if self.hidden_activation != "relu":
            raise ValueError(f"unsupported activation {self.hidden_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_params(self) -> int:
        return sum(
            (fan_in + 1) * fan_out
            for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:])
        )


class ParameterVector:
    """Flat parameter storage plus per-layer (weight, bias) views."""

    __slots__ = ("values", "spec", "version", "_views")

    def __init__(self, spec: MlpSpec, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (spec.n_params,):
            raise ValueError(f"expected {spec.n_params} parameters, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("parameters must be finite")
        self.values = values
        self.spec = spec
        self.version = 0
        self._views = self._build_views()

    @classmethod
    def _unchecked(cls, spec: MlpSpec, values: np.ndarray) -> "ParameterVector":
        # gradient buffers from backward(); skips the finiteness scan
        self = cls.__new__(cls)
        self.values = values
        self.spec = spec
        self.version = 0
        self._views = self._build_views()
        return self

    def _build_views(self):
        views = []
        offset = 0
        sizes = self.spec.layer_sizes
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = self.values[offset : offset + fan_in * fan_out].reshape(fan_out, fan_in)
            offset += fan_in * fan_out
            b = self.values[offset : offset + fan_out]
            offset += fan_out
            views.append((w, b))
        return views

    def layer(self, i):
        """(weight view (fan_out, fan_in), bias view (fan_out,)) of layer i."""
        return self._views[i]

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.spec, self.values.copy())

    def bump_version(self):
        self.version += 1

    def __len__(self):
        return self.values.size


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParameterVector:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    chunks = []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ParameterVector(spec, np.concatenate(chunks))


def zeros_like_params(spec: MlpSpec) -> ParameterVector:
    return ParameterVector(spec, np.zeros(spec.n_params))


class Tape:
    """Forward-pass residue consumed by `backward`."""

    __slots__ = ("spec", "params", "params_version", "inputs", "pre_acts", "squeeze")

    def __init__(self, spec, params, params_version, inputs, pre_acts, squeeze):
        self.spec = spec
        self.params = params
        self.params_version = params_version
        self.inputs = inputs
        self.pre_acts = pre_acts
        self.squeeze = squeeze


def forward(spec: MlpSpec, params: ParameterVector, x):
    """Affine-ReLU composition.  Accepts a vector or an (n, d) batch.

    Returns (output, tape); the tape retains the per-layer pre-activations
    needed by `backward`.
    """
    if params.spec is not spec and params.spec != spec:
        raise ValueError("parameter vector does not match the network spec")
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.layer_sizes[0]:
        raise ValueError(f"input dimension {x.shape} does not match spec")
    if not np.isfinite(x).all():
        raise ValueError("non-finite network input")
    inputs, pre_acts = [], []
    h = x
    n_layers = spec.n_layers
    for i in range(n_layers):
        w, b = params._views[i]
        inputs.append(h)
        z = h @ w.T + b
        pre_acts.append(z)
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
    tape = Tape(spec, params, params.version, inputs, pre_acts, squeeze)
    return (h[0] if squeeze else h), tape


def forward_only(spec: MlpSpec, params: ParameterVector, x):
    """Inference pass without tape bookkeeping (action selection, evaluation)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    h = x
    n_layers = spec.n_layers
    for i in range(n_layers):
        w, b = params._views[i]
        h = h @ w.T + b
        if i < n_layers - 1:
            np.maximum(h, 0.0, out=h)
    return h[0] if squeeze else h


def backward(tape: Tape, output_gradient):
    """Exact reverse-mode gradients for a prior `forward` call.

    Returns (param_gradient: ParameterVector, input_gradient) with the input
    gradient matching the shape passed to `forward`.  Batched calls accumulate
    parameter gradients over the batch in a fixed order.
    """
    if tape.params.version != tape.params_version:
        raise StaleTapeError("parameters were updated after this tape's forward pass")
    g = np.asarray(output_gradient, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    if g.shape != tape.pre_acts[-1].shape:
        raise ValueError("output gradient shape mismatch")
    grad = ParameterVector._unchecked(tape.spec, np.zeros(tape.spec.n_params))
    n_layers = tape.spec.n_layers
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            g = g * (tape.pre_acts[i] > 0.0)
        gw, gb = grad._views[i]
        gw[:] = g.T @ tape.inputs[i]
        np.sum(g, axis=0, out=gb)
        w, _ = tape.params._views[i]
        g = g @ w
    return grad, (g[0] if tape.squeeze else g)


def backward_input_only(tape: Tape, output_gradient):
    """Input gradient of a prior forward pass, skipping parameter gradients."""
    if tape.params.version != tape.params_version:
        raise StaleTapeError("parameters were updated after this tape's forward pass")
    g = np.asarray(output_gradient, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    n_layers = tape.spec.n_layers
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            g = g * (tape.pre_acts[i] > 0.0)
        g = g @ tape.params._views[i][0]
    return g[0] if tape.squeeze else g


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParameterVector, lr: float = 3e-4) -> "AdamState":
        n = len(params)
        return cls(m=np.zeros(n), v=np.zeros(n), lr=lr)


def adam_step(
    state: AdamState,
    params: ParameterVector,
    gradient: ParameterVector,
    maximize: bool = False,
):
    """One bias-corrected Adam update, in place.  Returns (params, state)."""
    g = gradient.values if isinstance(gradient, ParameterVector) else np.asarray(gradient)
    if g.shape != params.values.shape or state.m.shape != params.values.shape:
        raise ValueError("gradient/state length mismatch")
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient")
    if maximize:
        g = -g
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * np.square(g)
    # params -= lr * m_hat / (sqrt(v_hat) + eps) with bias-corrected moments
    denom = np.sqrt(state.v)
    denom /= math.sqrt(1.0 - state.beta2**state.t)
    denom += state.eps
    update = state.m / denom
    update *= state.lr / (1.0 - state.beta1**state.t)
    params.values -= update
    params.bump_version()
    return params, state


def polyak_update(
    target_params: ParameterVector, online_params: ParameterVector, tau: float
) -> ParameterVector:
    """target <- tau * online + (1 - tau) * target, in place."""
    if len(target_params) != len(online_params):
        raise ValueError("parameter length mismatch")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    target_params.values *= 1.0 - tau
    target_params.values += tau * online_params.values
    target_params.bump_version()
    return target_params


# --- checkpoint serialization ---------------------------------------------------
# JSON keeps exact float64 round-trips (shortest-repr decimal encoding).


def spec_to_json(spec: MlpSpec) -> dict:
    return {"layer_sizes": list(spec.layer_sizes), "hidden_activation": spec.hidden_activation}


def spec_from_json(doc: dict) -> MlpSpec:
    return MlpSpec(tuple(doc["layer_sizes"]), doc["hidden_activation"])


def params_to_json(params: ParameterVector) -> list:
    return params.values.tolist()


def params_from_json(spec: MlpSpec, doc) -> ParameterVector:
    return ParameterVector(spec, np.asarray(doc, dtype=np.float64))


def adam_to_json(state: AdamState) -> dict:
    return {
        "m": state.m.tolist(),
        "v": state.v.tolist(),
        "t": state.t,
        "lr": state.lr,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps": state.eps,
    }


def adam_from_json(doc: dict) -> AdamState:
    return AdamState(
        m=np.asarray(doc["m"], dtype=np.float64),
        v=np.asarray(doc["v"], dtype=np.float64),
        t=int(doc["t"]),
        lr=float(doc["lr"]),
        beta1=float(doc["beta1"]),
        beta2=float(doc["beta2"]),
        eps=float(doc["eps"]),
    )


def roundtrip_exact(values: np.ndarray) -> bool:
    """True when JSON-encoding the array reproduces it bit for bit."""
    back = np.asarray(json.loads(json.dumps(values.tolist())), dtype=np.float64)
    return np.array_equal(back, values)
