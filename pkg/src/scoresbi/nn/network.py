"""Residual MLP with hand-written reverse-mode gradients and forward-mode JVPs.

Architecture: an input projection with activation, followed by (depth - 1)
residual blocks h <- h + dropout(mish(W h + b)), and a linear output head.
Time/conditioning inputs enter by concatenation to the first layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NetworkSpec",
    "ParameterBundle",
    "NumericError",
    "InputError",
    "ConfigurationError",
    "build_network",
    "forward",
    "forward_backward",
    "MLP",
    "mish",
    "dmish",
]


class ConfigurationError(ValueError):
    pass


class InputError(ValueError):
    pass


class NumericError(FloatingPointError):
    """Non-finite value during training; carries the offending layer index."""

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    condition_dim: int = 0
    output_dim: int = 1
    depth: int = 5
    width: int = 256
    activation: str = "mish"
    dropout_rate: float = 0.0
    residual: bool = True
    init: str = "he_normal"
    dtype: str = "f64"

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ConfigurationError("depth and width must be >= 1")
        if self.input_dim < 1 or self.output_dim < 1 or self.condition_dim < 0:
            raise ConfigurationError("bad dimensions")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigurationError("dropout_rate must be in [0, 1)")
        if self.activation != "mish":
            raise ConfigurationError(f"unsupported activation {self.activation!r}")
        if self.init != "he_normal":
            raise ConfigurationError(f"unsupported init {self.init!r}")
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {list(_DTYPES)}")


@dataclass
class ParameterBundle:
    """Ordered, named real-valued arrays holding all network weights."""

    arrays: dict = field(default_factory=dict)
    dtype: str = "f64"

    def copy(self):
        return ParameterBundle({k: v.copy() for k, v in self.arrays.items()},
                               self.dtype)

    def zeros_like(self):
        return ParameterBundle({k: np.zeros_like(v) for k, v in self.arrays.items()},
                               self.dtype)

    def size(self):
        return sum(v.size for v in self.arrays.values())

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def __getitem__(self, key):
        return self.arrays[key]

    def __setitem__(self, key, value):
        self.arrays[key] = value

    def keys(self):
        return self.arrays.keys()

    def items(self):
        return self.arrays.items()


def mish(x):
    sp = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)
    return x * np.tanh(sp)


def dmish(x):
    sp = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)
    t = np.tanh(sp)
    sig = np.empty_like(x)
    pos = x >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    sig[~pos] = e / (1.0 + e)
    return t + x * (1.0 - t * t) * sig


def build_network(spec: NetworkSpec, seed) -> ParameterBundle:
    """He-normal weights, zero biases; deterministic given seed."""
    rng = np.random.default_rng(seed)
    dt = _DTYPES[spec.dtype]
    params = ParameterBundle(dtype=spec.dtype)
    fan_in = spec.input_dim + spec.condition_dim
    dims = [(fan_in, spec.width)]
    dims += [(spec.width, spec.width)] * (spec.depth - 1)
    for i, (n_in, n_out) in enumerate(dims):
        params[f"layer{i}/W"] = (rng.standard_normal((n_in, n_out))
                                 * math.sqrt(2.0 / n_in)).astype(dt)
        params[f"layer{i}/b"] = np.zeros(n_out, dtype=dt)
    params["out/W"] = (rng.standard_normal((spec.width, spec.output_dim))
                       * math.sqrt(2.0 / spec.width)).astype(dt)
    params["out/b"] = np.zeros(spec.output_dim, dtype=dt)
    return params


class MLP:
    """Stateless evaluator for a NetworkSpec; parameters travel separately."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec

    def init(self, seed) -> ParameterBundle:
        return build_network(self.spec, seed)

    def _concat(self, inputs, condition):
        dt = _DTYPES[self.spec.dtype]
        inputs = np.atleast_2d(np.asarray(inputs, dtype=dt))
        if inputs.shape[1] != self.spec.input_dim:
            raise InputError(
                f"inputs have {inputs.shape[1]} features, expected {self.spec.input_dim}")
        if self.spec.condition_dim:
            if condition is None:
                raise InputError("condition required but missing")
            condition = np.atleast_2d(np.asarray(condition, dtype=dt))
            if condition.shape[0] == 1 and inputs.shape[0] > 1:
                condition = np.broadcast_to(condition,
                                            (inputs.shape[0], condition.shape[1]))
            if condition.shape[1] != self.spec.condition_dim:
                raise InputError(
                    f"condition has {condition.shape[1]} features, "
                    f"expected {self.spec.condition_dim}")
            return np.concatenate([inputs, condition], axis=1)
        return inputs

    def _dropout_masks(self, n_rows, rng):
        spec = self.spec
        if rng is None or spec.dropout_rate == 0.0:
            return None
        keep = 1.0 - spec.dropout_rate
        return [
            (rng.random((n_rows, spec.width)) < keep).astype(_DTYPES[spec.dtype]) / keep
            for _ in range(spec.depth)
        ]

    def forward(self, params, inputs, condition=None, dropout_rng=None,
                return_cache=False):
        """Evaluate the network; dropout active only when a rng is supplied."""
        spec = self.spec
        x = self._concat(inputs, condition)
        masks = self._dropout_masks(x.shape[0], dropout_rng)
        cache = {"x": x, "pre": [], "h": [], "masks": masks}
        h = None
        for i in range(spec.depth):
            inp = x if i == 0 else h
            z = inp @ params[f"layer{i}/W"] + params[f"layer{i}/b"]
            a = mish(z)
            if masks is not None:
                a = a * masks[i]
            h_new = a if (i == 0 or not spec.residual) else h + a
            cache["pre"].append(z)
            cache["h"].append(inp)
            h = h_new
        y = h @ params["out/W"] + params["out/b"]
        cache["h_last"] = h
        return (y, cache) if return_cache else y

    def backward(self, params, cache, dy, want_input_grad=False):
        """Reverse-mode pass; dy is dLoss/doutput of shape [B, output_dim]."""
        spec = self.spec
        grads = ParameterBundle(dtype=spec.dtype)
        grads["out/W"] = cache["h_last"].T @ dy
        grads["out/b"] = dy.sum(axis=0)
        dh = dy @ params["out/W"].T
        masks = cache["masks"]
        for i in range(spec.depth - 1, -1, -1):
            da = dh if (i == 0 or not spec.residual) else dh.copy()
            if masks is not None:
                da = da * masks[i]
            dz = da * dmish(cache["pre"][i])
            grads[f"layer{i}/W"] = cache["h"][i].T @ dz
            grads[f"layer{i}/b"] = dz.sum(axis=0)
            dinp = dz @ params[f"layer{i}/W"].T
            if i == 0 or not spec.residual:
                dh = dinp
            else:
                dh = dh + dinp
        grads.arrays = {k: grads.arrays[k] for k in params.keys()}
        if want_input_grad:
            dx = dh[:, : spec.input_dim]
            dcond = dh[:, spec.input_dim:] if spec.condition_dim else None
            return grads, dx, dcond
        return grads

    def jvp(self, params, inputs, condition=None, tangent=None):
        """Forward-mode product (y, J_inputs @ tangent); inference mode only.

        The tangent applies to `inputs`; the condition block is held fixed.
        """
        spec = self.spec
        x = self._concat(inputs, condition)
        dt = _DTYPES[spec.dtype]
        u = np.zeros_like(x)
        u[:, : spec.input_dim] = np.asarray(tangent, dtype=dt)
        h, uh = None, None
        for i in range(spec.depth):
            inp, uinp = (x, u) if i == 0 else (h, uh)
            W = params[f"layer{i}/W"]
            z = inp @ W + params[f"layer{i}/b"]
            uz = uinp @ W
            a = mish(z)
            ua = dmish(z) * uz
            if i == 0 or not spec.residual:
                h, uh = a, ua
            else:
                h, uh = h + a, uh + ua
        y = h @ params["out/W"] + params["out/b"]
        uy = uh @ params["out/W"]
        return y, uy


def forward(spec: NetworkSpec, params, inputs, condition=None, dropout_rng=None):
    return MLP(spec).forward(params, inputs, condition, dropout_rng=dropout_rng)


def forward_backward(spec: NetworkSpec, params, inputs, condition, loss_head,
                     dropout_rng=None, want_input_grad=False):
    """Compute (loss, grads) where loss_head(pred) -> (loss, dloss_dpred).

    Raises NumericError (with the first offending layer index) when the loss
    is non-finite.
    """
    net = MLP(spec)
    y, cache = net.forward(params, inputs, condition, dropout_rng=dropout_rng,
                           return_cache=True)
    loss, dy = loss_head(y)
    if not np.isfinite(loss):
        for i, z in enumerate(cache["pre"]):
            if not np.all(np.isfinite(z)):
                raise NumericError(f"non-finite activations in layer {i}", i)
        raise NumericError("non-finite loss with finite activations",
                           spec.depth)
    out = net.backward(params, cache, np.asarray(dy, dtype=y.dtype),
                       want_input_grad=want_input_grad)
    if want_input_grad:
        grads, dx, dcond = out
        return float(loss), grads, dx, dcond
    return float(loss), out
