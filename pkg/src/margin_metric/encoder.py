"""Toy two-domain encoder with conditional squeeze-excitation gating.

Hidden layer ``l`` computes ``h = relu(W_l a + b_l)`` and rescales it by a
gate that sees the layer's own activations and the sample's domain bit::

    z = relu(Sq_l h + sq_l)                 # squeeze to r channels
    g = sigmoid(Ex_l [z, domain] + ex_l)    # excite back to C channels
    a' = h * g

The last layer is affine with no activation and produces the embedding.
An optional fixed per-feature standardisation ``(x - shift) / scale`` is
applied to the raw inputs first; it is fitted once, never trained.
Parameters live in a flat dict of named arrays so the optimiser can treat
them uniformly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class GateParams:
    squeeze_w: np.ndarray   # r x C
    squeeze_b: np.ndarray   # r
    excite_w: np.ndarray    # C x (r + 1); last column reads the domain bit
    excite_b: np.ndarray    # C


@dataclass
class EncoderParams:
    layer_dims: list
    squeeze_ratio: int
    arrays: dict
    seed: int | None = None
    version: int = 0
    meta: dict = field(default_factory=dict)
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    def fit_standardizer(self, inputs) -> None:
        """Standardise raw inputs to zero mean and unit variance per feature."""
        x = np.asarray(inputs, dtype=np.float64)
        sd = x.std(axis=0)
        self.input_shift = x.mean(axis=0)
        self.input_scale = np.where(sd > 0, sd, 1.0)

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def gated_layers(self) -> range:
        return range(self.n_layers - 1)

    def gate(self, layer: int) -> GateParams:
        a = self.arrays
        return GateParams(a[f"sq_w{layer}"], a[f"sq_b{layer}"], a[f"ex_w{layer}"], a[f"ex_b{layer}"])

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            list(self.layer_dims),
            self.squeeze_ratio,
            {k: v.copy() for k, v in self.arrays.items()},
            self.seed,
            self.version,
            dict(self.meta),
            None if self.input_shift is None else self.input_shift.copy(),
            None if self.input_scale is None else self.input_scale.copy(),
        )

    def touch(self) -> None:
        """Mark the parameters as modified; traces from earlier forwards go stale."""
        self.version += 1

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "squeeze_ratio": self.squeeze_ratio,
            "seed": self.seed,
            "meta": self.meta,
            "input_shift": None if self.input_shift is None else self.input_shift.tolist(),
            "input_scale": None if self.input_scale is None else self.input_scale.tolist(),
            "arrays": {
                k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.arrays.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderParams":
        arrays = {
            k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["arrays"].items()
        }
        params = cls(list(d["layer_dims"]), int(d["squeeze_ratio"]), arrays, d.get("seed"), 0, d.get("meta", {}))
        if d.get("input_shift") is not None:
            params.input_shift = np.asarray(d["input_shift"], dtype=np.float64)
            params.input_scale = np.asarray(d["input_scale"], dtype=np.float64)
        _validate(params)
        return params


def squeeze_dim(channels: int, ratio: int) -> int:
    return max(1, channels // ratio)


def _validate(params: EncoderParams) -> None:
    dims = params.layer_dims
    a = params.arrays
    for l in range(params.n_layers):
        if a[f"w{l}"].shape != (dims[l + 1], dims[l]) or a[f"b{l}"].shape != (dims[l + 1],):
            raise ValueError(f"layer {l} parameters do not chain with dims {dims}")
    for l in params.gated_layers:
        c = dims[l + 1]
        g = params.gate(l)
        r = g.squeeze_w.shape[0]
        if g.squeeze_w.shape != (r, c) or g.excite_w.shape != (c, r + 1) or g.excite_b.shape != (c,):
            raise ValueError(f"gate {l} parameters do not match {c} channels")
    for k, v in a.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"parameter {k} has non-finite entries")


def init_params(layer_dims, squeeze_ratio: int = 4, seed: int = 0) -> EncoderParams:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases, deterministic in ``seed``."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"need at least an input and an output width, got {layer_dims}")
    if squeeze_ratio < 1:
        raise ValueError("squeeze_ratio must be >= 1")
    rng = np.random.default_rng(seed)
    arrays = {}
    for l in range(len(dims) - 1):
        fan_in, fan_out = dims[l], dims[l + 1]
        arrays[f"w{l}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        arrays[f"b{l}"] = np.zeros(fan_out)
        if l < len(dims) - 2:
            r = squeeze_dim(fan_out, squeeze_ratio)
            if r >= fan_out:
                raise ValueError(f"squeeze width {r} must be below the {fan_out} gated channels")
            arrays[f"sq_w{l}"] = rng.normal(0.0, np.sqrt(2.0 / fan_out), size=(r, fan_out))
            arrays[f"sq_b{l}"] = np.zeros(r)
            arrays[f"ex_w{l}"] = rng.normal(0.0, np.sqrt(2.0 / (r + 1)), size=(fan_out, r + 1))
            arrays[f"ex_b{l}"] = np.zeros(fan_out)
    return EncoderParams(dims, int(squeeze_ratio), arrays, seed)


def cse_gate(features, domain, gate: GateParams):
    """Gate a batch (or a single vector) of channel activations by its domain.

    Returns ``(gated, g)`` where ``g`` lies strictly inside (0, 1).
    """
    h = np.asarray(features, dtype=np.float64)
    single = h.ndim == 1
    h = np.atleast_2d(h)
    dom = np.broadcast_to(np.asarray(domain, dtype=np.float64), (h.shape[0],))
    if h.shape[1] != gate.squeeze_w.shape[1]:
        raise ValueError(f"gate expects {gate.squeeze_w.shape[1]} channels, got {h.shape[1]}")
    z = np.maximum(h @ gate.squeeze_w.T + gate.squeeze_b, 0.0)
    g = _sigmoid(np.column_stack([z, dom]) @ gate.excite_w.T + gate.excite_b)
    out = h * g
    return (out[0], g[0]) if single else (out, g)


@dataclass
class ForwardTrace:
    params: EncoderParams
    version: int
    inputs: np.ndarray
    domains: np.ndarray
    layer_inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    hidden: list = field(default_factory=list)
    squeeze_pre: list = field(default_factory=list)
    squeeze_in: list = field(default_factory=list)
    gates: list = field(default_factory=list)
    output: np.ndarray | None = None


def forward(params: EncoderParams, inputs, domains):
    """Embed a batch. Returns ``(embeddings, trace)``."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.layer_dims[0]:
        raise ValueError(f"expected inputs of width {params.layer_dims[0]}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs contain non-finite entries")
    dom = np.asarray(domains, dtype=np.float64).reshape(-1)
    if dom.shape[0] != x.shape[0]:
        raise ValueError("one domain tag per input row is required")
    a = params.arrays
    trace = ForwardTrace(params, params.version, x, dom)
    act = x
    if params.input_shift is not None:
        act = (x - params.input_shift) / params.input_scale
    for l in params.gated_layers:
        trace.layer_inputs.append(act)
        pre = act @ a[f"w{l}"].T + a[f"b{l}"]
        h = np.maximum(pre, 0.0)
        sq_pre = h @ a[f"sq_w{l}"].T + a[f"sq_b{l}"]
        z_ext = np.column_stack([np.maximum(sq_pre, 0.0), dom])
        g = _sigmoid(z_ext @ a[f"ex_w{l}"].T + a[f"ex_b{l}"])
        trace.pre.append(pre)
        trace.hidden.append(h)
        trace.squeeze_pre.append(sq_pre)
        trace.squeeze_in.append(z_ext)
        trace.gates.append(g)
        act = h * g
    last = params.n_layers - 1
    trace.layer_inputs.append(act)
    out = act @ a[f"w{last}"].T + a[f"b{last}"]
    trace.output = out
    return out, trace


def backward(trace: ForwardTrace, grad_embeddings):
    """Reverse-mode gradients. Returns ``(param_grads, input_grads)``.

    The domain bit is data and receives no gradient.
    """
    params = trace.params
    if trace.version != params.version:
        raise ValueError("stale trace: parameters changed since the forward pass")
    grad = np.asarray(grad_embeddings, dtype=np.float64)
    if grad.shape != trace.output.shape:
        raise ValueError(f"upstream gradient shape {grad.shape} does not match output {trace.output.shape}")
    a = params.arrays
    grads = {}
    last = params.n_layers - 1
    grads[f"w{last}"] = grad.T @ trace.layer_inputs[last]
    grads[f"b{last}"] = grad.sum(axis=0)
    d_act = grad @ a[f"w{last}"]
    for l in reversed(params.gated_layers):
        h, g = trace.hidden[l], trace.gates[l]
        d_h = d_act * g
        d_ex = d_act * h * g * (1.0 - g)
        grads[f"ex_w{l}"] = d_ex.T @ trace.squeeze_in[l]
        grads[f"ex_b{l}"] = d_ex.sum(axis=0)
        r = a[f"sq_w{l}"].shape[0]
        d_sq = (d_ex @ a[f"ex_w{l}"][:, :r]) * (trace.squeeze_pre[l] > 0)
        grads[f"sq_w{l}"] = d_sq.T @ h
        grads[f"sq_b{l}"] = d_sq.sum(axis=0)
        d_h += d_sq @ a[f"sq_w{l}"]
        d_pre = d_h * (trace.pre[l] > 0)
        grads[f"w{l}"] = d_pre.T @ trace.layer_inputs[l]
        grads[f"b{l}"] = d_pre.sum(axis=0)
        d_act = d_pre @ a[f"w{l}"]
    if params.input_scale is not None:
        d_act = d_act / params.input_scale
    return grads, d_act


def activation_pattern(trace: ForwardTrace) -> tuple:
    """Signs of every ReLU pre-activation; used to skip kinks in gradient checks."""
    return tuple((p > 0).tobytes() for p in trace.pre + trace.squeeze_pre)


def save_model(path, params: EncoderParams, extra: dict | None = None) -> None:
    doc = {"encoder": params.to_dict()}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> tuple[EncoderParams, dict]:
    doc = json.loads(Path(path).read_text())
    params = EncoderParams.from_dict(doc.pop("encoder"))
    return params, doc
