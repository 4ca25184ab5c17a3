# *******************************************************************************
# Copyright (c) 2025 Contributors to the Eclipse Foundation
#
# See the NOTICE file(s) distributed with this work for additional
# information regarding copyright ownership.
#
# This program and the accompanying materials are made available under the
# terms of the Apache License Version 2.0 which is available at
# https://www.apache.org/licenses/LICENSE-2.0
#
# SPDX-License-Identifier: Apache-2.0
# *******************************************************************************
"""
Numeric core of the sequence classifiers.

Two architectures share an embedding and a dense head:

- ``lstm``: stacked LSTM layers, read out at the last time step.
- ``transformer``: sinusoidal positions, optional projection to the layer
  width, post-norm encoder layers with two-head self-attention that ignores
  padded keys, then a mean over non-padded positions.

The head is dropout, a ReLU dense layer and a single sigmoid unit. Gradients
are computed by hand-written reverse passes; ``gradient_check`` compares them
against finite differences.

Parameters are plain ``dict[str, np.ndarray]`` keyed by layer and weight name,
for example ``lstm0.kernel`` or ``enc1.wq``.
"""

import logging
import math
from collections.abc import Collection, Mapping
from dataclasses import asdict, dataclass, field
from typing import Any, Literal

import numpy as np
from scipy.special import expit

from habitlens.errors import (
    ConfigError,
    GradientCheckError,
    InvalidSpecError,
    NumericalError,
    TrainingError,
    VocabularyError,
)

logger = logging.getLogger(__name__)

Parameters = dict[str, np.ndarray]
Mode = Literal["train", "eval"]

PAD = 0
HEADS = 2
LN_EPS = 1e-5
EMBEDDING_INIT = 0.05
PROB_CLIP = 1e-7

HEAD_PREFIXES = ("dense.", "out.")
_LAYER_KERNELS = frozenset({"kernel", "recurrent", "wq", "wk", "wv", "wo", "w1", "w2"})

# Hyperparameter ranges the search spaces draw from.
SEARCH_RANGES = {
    "embed_dim": (5, 50),
    "num_layers": (1, 3),
    "layer_units": (4, 64),
    "dense_units": (4, 64),
    "dropout_top": (0.2, 0.5),
    "recurrent_or_attention_dropout": (0.2, 0.5),
    "l1_layer": (1e-5, 1e-3),
    "l2_layer": (1e-4, 1e-2),
    "l1_dense": (1e-5, 1e-3),
    "l2_dense": (1e-4, 1e-2),
}


@dataclass(frozen=True)
class ModelSpec:
    """
    Architecture description.

    Parameters
    ----------
    kind : str
        ``"lstm"`` or ``"transformer"``.
    embed_dim : int
        Embedding width.
    num_layers : int
        Number of LSTM or encoder layers.
    layer_units : int
        Width of every sequence layer. Must be even for transformers.
    dense_units : int
        Width of the ReLU dense layer of the head.
    dropout_top : float
        Dropout rate applied to the sequence representation.
    recurrent_or_attention_dropout : float
        Recurrent-state dropout (LSTM) or attention-probability dropout
        (transformer).
    l1_layer, l2_layer : float
        Penalties on the sequence-layer kernels.
    l1_dense, l2_dense : float
        Penalties on the dense kernel.
    vocab_size : int
        Number of input codes ``V``.
    seq_len : int
        Window length ``L``.
    heads : int
        Attention heads; fixed at 2.
    """

    kind: Literal["lstm", "transformer"]
    embed_dim: int
    num_layers: int
    layer_units: int
    dense_units: int
    dropout_top: float
    recurrent_or_attention_dropout: float
    l1_layer: float
    l2_layer: float
    l1_dense: float
    l2_dense: float
    vocab_size: int
    seq_len: int
    heads: int = HEADS

    def validate(self) -> "ModelSpec":
        if self.kind not in ("lstm", "transformer"):
            raise InvalidSpecError(f"unknown model kind '{self.kind}'")
        for name in ("embed_dim", "num_layers", "layer_units", "dense_units", "vocab_size", "seq_len"):
            if getattr(self, name) < 1:
                raise InvalidSpecError(f"{name} must be positive, got {getattr(self, name)}")
        if self.vocab_size < 2:
            raise InvalidSpecError("vocab_size must hold at least the padding and unknown codes")
        for name in ("dropout_top", "recurrent_or_attention_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InvalidSpecError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        for name in ("l1_layer", "l2_layer", "l1_dense", "l2_dense"):
            if getattr(self, name) < 0.0:
                raise InvalidSpecError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.kind == "transformer":
            if self.heads != HEADS:
                raise InvalidSpecError(f"transformer heads are fixed at {HEADS}")
            if self.layer_units % self.heads:
                raise InvalidSpecError(f"layer_units must be divisible by {self.heads}, got {self.layer_units}")
        return self

    def validate_search_ranges(self) -> "ModelSpec":
        """
        Check every searched hyperparameter against ``SEARCH_RANGES``.
        """
        self.validate()
        for name, (low, high) in SEARCH_RANGES.items():
            value = getattr(self, name)
            if not low - 1e-12 <= value <= high + 1e-12:
                raise InvalidSpecError(f"{name}={value} outside [{low}, {high}]")
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "ModelSpec":
        try:
            return cls(**values).validate()
        except TypeError as e:
            raise InvalidSpecError(f"malformed model spec: {e}") from e


def is_head_key(name: str) -> bool:
    return name.startswith(HEAD_PREFIXES)


def head_keys(params: Mapping[str, np.ndarray]) -> list[str]:
    return [k for k in params if is_head_key(k)]


def trunk_keys(params: Mapping[str, np.ndarray]) -> list[str]:
    return [k for k in params if not is_head_key(k)]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, ...]) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_head(spec: ModelSpec, rng: np.random.Generator) -> Parameters:
    u, h = spec.layer_units, spec.dense_units
    return {
        "dense.kernel": _glorot(rng, u, h, (u, h)),
        "dense.bias": np.zeros(h),
        "out.kernel": _glorot(rng, h, 1, (h,)),
        "out.bias": np.zeros(1),
    }


def init_model(spec: ModelSpec, seed: int, dtype: np.dtype = np.float32) -> Parameters:
    """
    Initialize parameters deterministically from ``seed``.

    The embedding is uniform in ``[-0.05, 0.05]``, kernels are Glorot-uniform,
    biases are zero except the LSTM forget gate (1.0), and layer-norm gains
    are one.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    d, u = spec.embed_dim, spec.layer_units
    params: Parameters = {"embedding": rng.uniform(-EMBEDDING_INIT, EMBEDDING_INIT, size=(spec.vocab_size, d))}

    if spec.kind == "lstm":
        d_in = d
        for k in range(spec.num_layers):
            bias = np.zeros(4 * u)
            bias[u : 2 * u] = 1.0
            params[f"lstm{k}.kernel"] = _glorot(rng, d_in, 4 * u, (d_in, 4 * u))
            params[f"lstm{k}.recurrent"] = _glorot(rng, u, 4 * u, (u, 4 * u))
            params[f"lstm{k}.bias"] = bias
            d_in = u
    else:
        if d != u:
            params["proj.kernel"] = _glorot(rng, d, u, (d, u))
            params["proj.bias"] = np.zeros(u)
        for k in range(spec.num_layers):
            p = f"enc{k}"
            for w in ("wq", "wk", "wv", "wo"):
                params[f"{p}.{w}"] = _glorot(rng, u, u, (u, u))
                params[f"{p}.b{w[1]}"] = np.zeros(u)
            params[f"{p}.ln1_gamma"] = np.ones(u)
            params[f"{p}.ln1_beta"] = np.zeros(u)
            params[f"{p}.w1"] = _glorot(rng, u, 2 * u, (u, 2 * u))
            params[f"{p}.b1"] = np.zeros(2 * u)
            params[f"{p}.w2"] = _glorot(rng, 2 * u, u, (2 * u, u))
            params[f"{p}.b2"] = np.zeros(u)
            params[f"{p}.ln2_gamma"] = np.ones(u)
            params[f"{p}.ln2_beta"] = np.zeros(u)

    params.update(init_head(spec, rng))
    return {k: v.astype(dtype) for k, v in params.items()}


def cast_params(params: Mapping[str, np.ndarray], dtype: np.dtype) -> Parameters:
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def positional_encoding(seq_len: int, dim: int) -> np.ndarray:
    positions = np.arange(seq_len)[:, None]
    i = np.arange(dim)[None, :]
    angles = positions / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angles), np.cos(angles))


def _check_finite(values: np.ndarray, layer: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(layer)


def _check_codes(inputs: np.ndarray, vocab_size: int) -> None:
    if inputs.size and (inputs.min() < 0 or inputs.max() >= vocab_size):
        raise VocabularyError(f"input codes must lie in [0, {vocab_size}), got [{inputs.min()}, {inputs.max()}]")


def _dropout_mask(rng: np.random.Generator | None, shape: tuple[int, ...], rate: float, dtype) -> np.ndarray | None:
    if rate <= 0.0:
        return None
    if rng is None:
        raise TrainingError("train mode needs a random generator for dropout masks")
    return ((rng.random(shape) >= rate) / (1.0 - rate)).astype(dtype)


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


# LSTM


def _lstm_forward(x, kernel, recurrent, bias, drop_mask):
    batch, steps, _ = x.shape
    units = recurrent.shape[0]
    h = np.zeros((batch, units), dtype=x.dtype)
    c = np.zeros_like(h)
    xw = x @ kernel + bias
    outputs = np.empty((batch, steps, units), dtype=x.dtype)
    steps_cache = []
    for t in range(steps):
        h_in = h if drop_mask is None else h * drop_mask
        z = xw[:, t] + h_in @ recurrent
        i = expit(z[:, :units])
        f = expit(z[:, units : 2 * units])
        g = np.tanh(z[:, 2 * units : 3 * units])
        o = expit(z[:, 3 * units :])
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        outputs[:, t] = h
        steps_cache.append((h_in, c_prev, i, f, g, o, tc))
    return outputs, (x, kernel, recurrent, drop_mask, steps_cache)


def _lstm_backward(d_out, cache):
    x, kernel, recurrent, drop_mask, steps_cache = cache
    batch, steps, units = d_out.shape
    d_recurrent = np.zeros_like(recurrent)
    dz_all = np.empty((batch, steps, 4 * units), dtype=d_out.dtype)
    dh_next = np.zeros((batch, units), dtype=d_out.dtype)
    dc_next = np.zeros_like(dh_next)
    for t in reversed(range(steps)):
        h_in, c_prev, i, f, g, o, tc = steps_cache[t]
        dh = d_out[:, t] + dh_next
        do = dh * tc
        dc = dh * o * (1 - tc * tc) + dc_next
        dz = np.concatenate(
            [dc * g * i * (1 - i), dc * c_prev * f * (1 - f), dc * i * (1 - g * g), do * o * (1 - o)],
            axis=1,
        )
        dc_next = dc * f
        dz_all[:, t] = dz
        d_recurrent += h_in.T @ dz
        dh_in = dz @ recurrent.T
        dh_next = dh_in if drop_mask is None else dh_in * drop_mask
    d_kernel = _flat(x).T @ _flat(dz_all)
    d_bias = dz_all.sum(axis=(0, 1))
    dx = dz_all @ kernel.T
    return dx, d_kernel, d_recurrent, d_bias


# Transformer


def _layer_norm(y, gamma, beta):
    centered = y - y.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = centered * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def _layer_norm_backward(d_out, cache):
    xhat, inv, gamma = cache
    n = xhat.shape[-1]
    d_gamma = (d_out * xhat).sum(axis=(0, 1))
    d_beta = d_out.sum(axis=(0, 1))
    dxhat = d_out * gamma
    dy = (inv / n) * (
        n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dy, d_gamma, d_beta


def _split_heads(x, heads):
    batch, steps, units = x.shape
    return x.reshape(batch, steps, heads, units // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    batch, heads, steps, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch, steps, heads * dh)


def _masked_softmax(scores, key_valid):
    masked = np.where(key_valid, scores, -np.inf)
    row_max = masked.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(key_valid, np.exp(np.where(key_valid, scores - row_max, 0.0)), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    # Rows without any valid key attend to nothing.
    return (e / np.where(denom > 0, denom, 1.0)).astype(scores.dtype)


def _encoder_forward(x, p, valid, heads, drop_mask):
    dh = x.shape[-1] // heads
    scale = 1.0 / math.sqrt(dh)
    qh = _split_heads(x @ p["wq"] + p["bq"], heads)
    kh = _split_heads(x @ p["wk"] + p["bk"], heads)
    vh = _split_heads(x @ p["wv"] + p["bv"], heads)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    attn = _masked_softmax(scores, valid[:, None, None, :])
    attn_d = attn if drop_mask is None else attn * drop_mask
    ctx = _merge_heads(attn_d @ vh)
    x1, ln1 = _layer_norm(x + ctx @ p["wo"] + p["bo"], p["ln1_gamma"], p["ln1_beta"])
    pre = x1 @ p["w1"] + p["b1"]
    act = np.maximum(pre, 0)
    x2, ln2 = _layer_norm(x1 + act @ p["w2"] + p["b2"], p["ln2_gamma"], p["ln2_beta"])
    cache = (x, qh, kh, vh, attn, attn_d, drop_mask, ctx, x1, ln1, pre, act, ln2, scale)
    return x2, cache


def _encoder_backward(d_out, p, cache):
    x, qh, kh, vh, attn, attn_d, drop_mask, ctx, x1, ln1, pre, act, ln2, scale = cache
    heads = qh.shape[1]
    g = {}
    dy2, g["ln2_gamma"], g["ln2_beta"] = _layer_norm_backward(d_out, ln2)
    g["w2"] = _flat(act).T @ _flat(dy2)
    g["b2"] = dy2.sum(axis=(0, 1))
    d_pre = (dy2 @ p["w2"].T) * (pre > 0)
    g["w1"] = _flat(x1).T @ _flat(d_pre)
    g["b1"] = d_pre.sum(axis=(0, 1))
    dx1 = dy2 + d_pre @ p["w1"].T

    dy1, g["ln1_gamma"], g["ln1_beta"] = _layer_norm_backward(dx1, ln1)
    g["wo"] = _flat(ctx).T @ _flat(dy1)
    g["bo"] = dy1.sum(axis=(0, 1))
    d_ctx = _split_heads(dy1 @ p["wo"].T, heads)
    d_attn_d = d_ctx @ vh.transpose(0, 1, 3, 2)
    d_vh = attn_d.transpose(0, 1, 3, 2) @ d_ctx
    d_attn = d_attn_d if drop_mask is None else d_attn_d * drop_mask
    d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True)) * scale
    d_qh = d_scores @ kh
    d_kh = d_scores.transpose(0, 1, 3, 2) @ qh

    dx = dy1
    for name, d_proj in (("q", d_qh), ("k", d_kh), ("v", d_vh)):
        merged = _merge_heads(d_proj)
        g[f"w{name}"] = _flat(x).T @ _flat(merged)
        g[f"b{name}"] = merged.sum(axis=(0, 1))
        dx = dx + merged @ p[f"w{name}"].T
    return dx, g


def _layer_params(params: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix) + 1 :]: v for k, v in params.items() if k.startswith(prefix + ".")}


# Head


def _head_forward(params, features, drop_mask):
    feat_d = features if drop_mask is None else features * drop_mask
    pre = feat_d @ params["dense.kernel"] + params["dense.bias"]
    hidden = np.maximum(pre, 0)
    logits = hidden @ params["out.kernel"] + params["out.bias"][0]
    return logits, (feat_d, pre, hidden, drop_mask)


def _head_backward(params, d_logits, cache):
    feat_d, pre, hidden, drop_mask = cache
    g = {
        "out.kernel": hidden.T @ d_logits,
        "out.bias": np.array([d_logits.sum()], dtype=d_logits.dtype),
    }
    d_pre = np.outer(d_logits, params["out.kernel"]) * (pre > 0)
    g["dense.kernel"] = feat_d.T @ d_pre
    g["dense.bias"] = d_pre.sum(axis=0)
    d_feat = d_pre @ params["dense.kernel"].T
    if drop_mask is not None:
        d_feat = d_feat * drop_mask
    return d_feat, g


@dataclass
class _Trace:
    inputs: np.ndarray
    trunk: list = field(default_factory=list)
    proj_input: np.ndarray | None = None
    pool: tuple | None = None
    head: tuple | None = None

    def relu_pattern(self) -> bytes:
        patterns = [self.head[1] > 0]
        for kind, cache in self.trunk:
            if kind == "enc":
                patterns.append(cache[10] > 0)
        return b"".join(np.packbits(p).tobytes() for p in patterns)


def _trunk_forward(params, spec: ModelSpec, inputs: np.ndarray, train: bool, rng, trace: _Trace) -> np.ndarray:
    dtype = params["embedding"].dtype
    batch = inputs.shape[0]
    x = params["embedding"][inputs]
    rate = spec.recurrent_or_attention_dropout if train else 0.0

    if spec.kind == "lstm":
        for k in range(spec.num_layers):
            mask = _dropout_mask(rng, (batch, spec.layer_units), rate, dtype)
            x, cache = _lstm_forward(
                x, params[f"lstm{k}.kernel"], params[f"lstm{k}.recurrent"], params[f"lstm{k}.bias"], mask
            )
            _check_finite(x, f"lstm{k}")
            trace.trunk.append(("lstm", cache))
        return x[:, -1]

    x = x + positional_encoding(inputs.shape[1], spec.embed_dim).astype(dtype)
    if "proj.kernel" in params:
        trace.proj_input = x
        x = x @ params["proj.kernel"] + params["proj.bias"]
    valid = inputs != PAD
    for k in range(spec.num_layers):
        mask = _dropout_mask(rng, (batch, spec.heads, inputs.shape[1], inputs.shape[1]), rate, dtype)
        x, cache = _encoder_forward(x, _layer_params(params, f"enc{k}"), valid, spec.heads, mask)
        _check_finite(x, f"enc{k}")
        trace.trunk.append(("enc", cache))
    weights = valid.astype(dtype)[:, :, None]
    count = np.maximum(valid.sum(axis=1), 1).astype(dtype)[:, None]
    trace.pool = (weights, count)
    return (x * weights).sum(axis=1) / count


def _trunk_backward(params, spec: ModelSpec, d_features: np.ndarray, trace: _Trace) -> Parameters:
    grads: Parameters = {}
    if spec.kind == "lstm":
        top = trace.trunk[-1][1][0]
        d_x = np.zeros((top.shape[0], top.shape[1], spec.layer_units), dtype=d_features.dtype)
        d_x[:, -1] = d_features
        for k in reversed(range(spec.num_layers)):
            d_x, dk, dr, db = _lstm_backward(d_x, trace.trunk[k][1])
            grads[f"lstm{k}.kernel"], grads[f"lstm{k}.recurrent"], grads[f"lstm{k}.bias"] = dk, dr, db
    else:
        weights, count = trace.pool
        d_x = weights * (d_features / count)[:, None, :]
        for k in reversed(range(spec.num_layers)):
            d_x, g = _encoder_backward(d_x, _layer_params(params, f"enc{k}"), trace.trunk[k][1])
            grads.update({f"enc{k}.{name}": value for name, value in g.items()})
        if trace.proj_input is not None:
            grads["proj.kernel"] = _flat(trace.proj_input).T @ _flat(d_x)
            grads["proj.bias"] = d_x.sum(axis=(0, 1))
            d_x = d_x @ params["proj.kernel"].T

    d_embedding = np.zeros_like(params["embedding"])
    np.add.at(d_embedding, trace.inputs.ravel(), _flat(d_x))
    grads["embedding"] = d_embedding
    return grads


def _forward(params, spec: ModelSpec, inputs, mode: Mode, rng) -> tuple[np.ndarray, _Trace]:
    inputs = np.asarray(inputs)
    _check_codes(inputs, spec.vocab_size)
    train = mode == "train"
    trace = _Trace(inputs)
    features = _trunk_forward(params, spec, inputs, train, rng, trace)
    mask = _dropout_mask(rng, features.shape, spec.dropout_top, features.dtype) if train else None
    logits, trace.head = _head_forward(params, features, mask)
    _check_finite(logits, "output")
    return logits, trace


def _probabilities(logits: np.ndarray) -> np.ndarray:
    return np.clip(expit(logits.astype(np.float64)), PROB_CLIP, 1.0 - PROB_CLIP)


def model_forward(
    params: Mapping[str, np.ndarray],
    spec: ModelSpec,
    inputs: np.ndarray,
    mode: Mode = "eval",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """
    Probability that the next app is social, one value per input row.

    Parameters
    ----------
    params : Parameters
        Model weights.
    spec : ModelSpec
        Architecture.
    inputs : np.ndarray
        ``(B, L)`` integer codes.
    mode : str
        ``"train"`` applies inverted dropout and needs ``rng``.
    rng : np.random.Generator | None
        Source of dropout masks.
    """
    logits, _ = _forward(params, spec, inputs, mode, rng)
    return _probabilities(logits)


def trunk_features(params: Mapping[str, np.ndarray], spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    """
    Eval-mode sequence representation fed to the head.
    """
    inputs = np.asarray(inputs)
    _check_codes(inputs, spec.vocab_size)
    return _trunk_forward(params, spec, inputs, False, None, _Trace(inputs))


def head_probabilities(params: Mapping[str, np.ndarray], features: np.ndarray) -> np.ndarray:
    logits, _ = _head_forward(params, features, None)
    return _probabilities(logits)


def _kernel_group(name: str) -> str | None:
    if name == "dense.kernel":
        return "dense"
    prefix, _, weight = name.partition(".")
    if prefix.startswith(("lstm", "enc", "proj")) and weight in _LAYER_KERNELS:
        return "layer"
    return None


def regularization(params: Mapping[str, np.ndarray], spec: ModelSpec) -> tuple[float, Parameters]:
    """
    L1/L2 penalty over layer and dense kernels, with its gradient.
    """
    penalty = 0.0
    grads: Parameters = {}
    coefficients = {"layer": (spec.l1_layer, spec.l2_layer), "dense": (spec.l1_dense, spec.l2_dense)}
    for name, value in params.items():
        group = _kernel_group(name)
        if group is None:
            continue
        l1, l2 = coefficients[group]
        penalty += l1 * float(np.abs(value).sum()) + l2 * float((value * value).sum())
        grads[name] = (l1 * np.sign(value) + 2.0 * l2 * value).astype(value.dtype)
    return penalty, grads


def _bce_with_logits(logits, labels, weights):
    labels = labels.astype(logits.dtype)
    batch = len(labels)
    per_example = np.logaddexp(0, logits) - labels * logits
    loss = float((weights * per_example).sum() / batch)
    d_logits = (weights * (expit(logits) - labels) / batch).astype(logits.dtype)
    return loss, d_logits


def _example_weights(weights, labels, dtype) -> np.ndarray:
    if weights is None:
        return np.ones(len(labels), dtype=dtype)
    return np.asarray(weights, dtype=dtype)


def loss_and_gradients(
    params: Mapping[str, np.ndarray],
    spec: ModelSpec,
    inputs: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray | None = None,
    mode: Mode = "train",
    rng: np.random.Generator | None = None,
    regularize: bool = True,
) -> tuple[float, Parameters]:
    """
    Weighted mean binary cross-entropy plus kernel penalties, and exact gradients.

    Parameters
    ----------
    params : Parameters
        Model weights.
    spec : ModelSpec
        Architecture and penalty coefficients.
    inputs : np.ndarray
        ``(B, L)`` integer codes.
    labels : np.ndarray
        ``(B,)`` binary targets.
    weights : np.ndarray | None
        Per-example loss weights; unweighted if ``None``.
    mode : str
        ``"train"`` or ``"eval"``.
    rng : np.random.Generator | None
        Source of dropout masks in train mode.
    regularize : bool
        Add the L1/L2 kernel penalties.
    """
    if len(labels) == 0:
        raise TrainingError("empty batch")
    logits, trace = _forward(params, spec, inputs, mode, rng)
    loss, d_logits = _bce_with_logits(logits, np.asarray(labels), _example_weights(weights, labels, logits.dtype))
    d_features, grads = _head_backward(params, d_logits, trace.head)
    grads.update(_trunk_backward(params, spec, d_features, trace))
    if regularize:
        penalty, reg_grads = regularization(params, spec)
        loss += penalty
        for name, g in reg_grads.items():
            grads[name] = grads[name] + g
    for name, g in grads.items():
        _check_finite(g, name)
    return loss, grads


def head_loss_and_gradients(
    params: Mapping[str, np.ndarray],
    spec: ModelSpec,
    features: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray | None = None,
    mode: Mode = "train",
    rng: np.random.Generator | None = None,
    regularize: bool = True,
) -> tuple[float, Parameters]:
    """
    Loss and head-only gradients over precomputed trunk features.
    """
    if len(labels) == 0:
        raise TrainingError("empty batch")
    mask = _dropout_mask(rng, features.shape, spec.dropout_top, features.dtype) if mode == "train" else None
    logits, cache = _head_forward(params, features, mask)
    _check_finite(logits, "output")
    loss, d_logits = _bce_with_logits(logits, np.asarray(labels), _example_weights(weights, labels, logits.dtype))
    _, grads = _head_backward(params, d_logits, cache)
    if regularize:
        l1, l2 = spec.l1_dense, spec.l2_dense
        kernel = params["dense.kernel"]
        loss += l1 * float(np.abs(kernel).sum()) + l2 * float((kernel * kernel).sum())
        grads["dense.kernel"] = grads["dense.kernel"] + (l1 * np.sign(kernel) + 2.0 * l2 * kernel).astype(kernel.dtype)
    return loss, grads


def data_loss(
    params: Mapping[str, np.ndarray],
    spec: ModelSpec,
    inputs: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray | None = None,
) -> float:
    """
    Eval-mode weighted mean binary cross-entropy without penalties.
    """
    logits, _ = _forward(params, spec, inputs, "eval", None)
    loss, _ = _bce_with_logits(logits, np.asarray(labels), _example_weights(weights, labels, logits.dtype))
    return loss


@dataclass
class OptimizerState:
    """
    Adam moments per parameter and the step counter.
    """

    m: Parameters
    v: Parameters
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: Mapping[str, np.ndarray], keys: Collection[str] | None = None) -> OptimizerState:
    keys = list(params) if keys is None else list(keys)
    return OptimizerState(
        m={k: np.zeros_like(params[k]) for k in keys},
        v={k: np.zeros_like(params[k]) for k in keys},
    )


def adam_step(
    state: OptimizerState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
) -> tuple[OptimizerState, Parameters]:
    """
    One bias-corrected Adam update.

    Only parameters tracked by ``state`` are updated; the others are returned
    unchanged. Inputs are not modified.
    """
    step = state.step + 1
    bc1 = 1.0 - state.beta1**step
    bc2 = 1.0 - state.beta2**step
    new_m, new_v = {}, {}
    new_params = dict(params)
    for name in state.m:
        g = grads[name]
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        value = params[name]
        new_params[name] = (value - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(value.dtype)
        new_m[name] = m.astype(value.dtype)
        new_v[name] = v.astype(value.dtype)
    return OptimizerState(new_m, new_v, step, state.beta1, state.beta2, state.eps), new_params


def _perturbed(params: Parameters, name: str, index: int, delta: float) -> Parameters:
    shifted = dict(params)
    value = params[name].copy()
    value.flat[index] += delta
    shifted[name] = value
    return shifted


STENCILS = {
    "central": ((-1, 1), (-1.0, 1.0), 2.0),
    "five_point": ((-2, -1, 1, 2), (1.0, -8.0, 8.0, -1.0), 12.0),
}


def gradient_check(
    spec: ModelSpec,
    seed: int,
    batch_size: int = 8,
    n_coords: int = 100,
    keys: Collection[str] | None = None,
    h: float = 1e-4,
    params: Parameters | None = None,
    stencil: Literal["central", "five_point"] = "central",
) -> float:
    """
    Maximum relative error between analytic and finite-difference gradients.

    Runs in double precision, eval mode, on a random batch with random class
    weights. Coordinates whose ReLU activation pattern or L1 sign changes inside
    the stencil are replaced by other coordinates. When the selected parameters
    hold fewer than ``n_coords`` usable coordinates, all usable ones are checked.

    Parameters
    ----------
    spec : ModelSpec
        Small architecture to check.
    seed : int
        Seeds the weights, batch and coordinate sample.
    batch_size : int
        Rows in the random batch.
    n_coords : int
        Number of sampled coordinates.
    keys : Collection[str] | None
        Restrict sampling to these parameters (e.g. the head).
    h : float
        Finite-difference step.
    params : Parameters | None
        Weights to check instead of a random initialization.
    stencil : str
        ``"central"`` (two evaluations) or ``"five_point"``.

    Raises
    ------
    GradientCheckError
        If not a single coordinate was compared.
    """
    if n_coords < 1:
        raise ConfigError(f"n_coords must be positive, got {n_coords}")
    if stencil not in STENCILS:
        raise ConfigError(f"unknown stencil '{stencil}', expected one of {sorted(STENCILS)}")
    steps, coefficients, denominator = STENCILS[stencil]
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_model(spec, seed, dtype=np.float64)
        # Non-zero biases exercise every gradient path.
        for name in params:
            if _kernel_group(name) is None and name != "embedding" and "gamma" not in name:
                params[name] = params[name] + rng.normal(0.0, 0.1, size=params[name].shape)
    params = cast_params(params, np.float64)
    names = [k for k in params if keys is None or k in keys]
    if not names:
        raise GradientCheckError(f"no parameters selected by {sorted(keys or [])}")
    inputs = rng.integers(0, spec.vocab_size, size=(batch_size, spec.seq_len))
    labels = rng.integers(0, 2, size=batch_size)
    weights = np.where(labels == 1, 1.6, 0.7)

    def evaluate(p: Parameters) -> tuple[float, bytes]:
        logits, trace = _forward(p, spec, inputs, "eval", None)
        loss, _ = _bce_with_logits(logits, labels, weights)
        return loss + regularization(p, spec)[0], trace.relu_pattern()

    _, analytic = loss_and_gradients(params, spec, inputs, labels, weights, mode="eval")
    _, base_pattern = evaluate(params)

    sizes = np.array([params[k].size for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    l1 = {"layer": spec.l1_layer, "dense": spec.l1_dense}
    reach = max(abs(s) for s in steps) * h
    worst, accepted = 0.0, 0
    for flat in rng.permutation(int(offsets[-1])):
        if accepted == n_coords:
            break
        slot = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, index = names[slot], int(flat - offsets[slot])
        group = _kernel_group(name)
        if group is not None and l1[group] > 0 and abs(params[name].flat[index]) < 1.5 * reach:
            continue
        values = []
        for step in steps:
            value, pattern = evaluate(_perturbed(params, name, index, step * h))
            if pattern != base_pattern:
                break
            values.append(value)
        else:
            numeric = float(np.dot(coefficients, values)) / (denominator * h)
            a = float(analytic[name].flat[index])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
            accepted += 1
    if accepted == 0:
        raise GradientCheckError("every sampled coordinate sits on a ReLU or L1 kink")
    logger.debug("gradient check", extra={"id": "gradient_check", "coords": accepted, "max_rel_error": worst})
    return worst
