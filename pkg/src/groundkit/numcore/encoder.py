"""Post-norm self-attention encoder built on the autodiff kernel.

One layer is: multi-head self-attention, residual, layer norm, position-wise
feed-forward (GELU), residual, layer norm.  ``encode`` keeps the hidden state
after every layer so downstream losses can read intermediate layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import (
    NumericError,
    Tensor,
    add,
    concat_cols,
    gelu,
    layer_norm,
    matmul,
    scale,
    slice_cols,
    softmax,
    transpose,
)

INIT_STD = 0.02
LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int
    n_heads: int
    n_layers: int
    d_ff: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")


def init_encoder_params(config: EncoderConfig,
                        rng: np.random.Generator,
                        prefix: str = "enc",
                        dtype=np.float32) -> dict[str, Tensor]:
    """Seeded initialization: normal(0, 0.02) weights, zero biases, unit LN gain."""
    d, f = config.d_model, config.d_ff
    params: dict[str, Tensor] = {}

    def w(name, shape):
        params[name] = Tensor(rng.normal(0.0, INIT_STD, shape).astype(dtype))

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape, dtype=dtype))

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape, dtype=dtype))

    for i in range(config.n_layers):
        p = f"{prefix}.layer{i}"
        for mat in ("wq", "wk", "wv", "wo"):
            w(f"{p}.attn.{mat}", (d, d))
        # no key bias: softmax is invariant to a per-row shift, so a key
        # bias is a dead parameter (and breaks finite-difference checks)
        for vec in ("bq", "bv", "bo"):
            zeros(f"{p}.attn.{vec}", (d,))
        ones(f"{p}.ln1.gain", (d,))
        zeros(f"{p}.ln1.bias", (d,))
        w(f"{p}.ffn.w1", (d, f))
        zeros(f"{p}.ffn.b1", (f,))
        w(f"{p}.ffn.w2", (f, d))
        zeros(f"{p}.ffn.b2", (d,))
        ones(f"{p}.ln2.gain", (d,))
        zeros(f"{p}.ln2.bias", (d,))
    return params


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def attention_layer(x: Tensor, params: Mapping[str, Tensor], prefix: str,
                    n_heads: int) -> Tensor:
    length, d = x.data.shape
    if d % n_heads != 0:
        raise NumericError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    inv_sqrt = 1.0 / math.sqrt(dh)

    q = linear(x, params[f"{prefix}.attn.wq"], params[f"{prefix}.attn.bq"])
    k = linear(x, params[f"{prefix}.attn.wk"])
    v = linear(x, params[f"{prefix}.attn.wv"], params[f"{prefix}.attn.bv"])

    heads = []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = slice_cols(q, lo, hi)
        kh = slice_cols(k, lo, hi)
        vh = slice_cols(v, lo, hi)
        scores = scale(matmul(qh, transpose(kh)), inv_sqrt)
        attn = softmax(scores, axis=-1)
        heads.append(matmul(attn, vh))
    merged = concat_cols(heads) if n_heads > 1 else heads[0]
    attn_out = linear(merged, params[f"{prefix}.attn.wo"], params[f"{prefix}.attn.bo"])

    h1 = layer_norm(add(x, attn_out),
                    params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"], eps=LN_EPS)
    ff = linear(gelu(linear(h1, params[f"{prefix}.ffn.w1"], params[f"{prefix}.ffn.b1"])),
                params[f"{prefix}.ffn.w2"], params[f"{prefix}.ffn.b2"])
    return layer_norm(add(h1, ff),
                      params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"], eps=LN_EPS)


def encode(x: Tensor, config: EncoderConfig, params: Mapping[str, Tensor],
           prefix: str = "enc") -> list[Tensor]:
    """Run all layers; returns the hidden state after each one.

    ``hidden[-1]`` is the final output; counting layers from the last,
    layer ``l`` (1-based) is ``hidden[-l]``.
    """
    if x.data.ndim != 2 or x.data.shape[1] != config.d_model:
        raise NumericError(f"encoder input shape {x.data.shape} does not match "
                           f"d_model {config.d_model}")
    hidden: list[Tensor] = []
    h = x
    for i in range(config.n_layers):
        h = attention_layer(h, params, f"{prefix}.layer{i}", config.n_heads)
        hidden.append(h)
    return hidden


def layer_from_last(hidden: list[Tensor], l: int) -> Tensor:
    """Hidden state of the l-th layer counted from the last (l=1 is final)."""
    if not 1 <= l <= len(hidden):
        raise NumericError(f"layer-from-last index {l} outside 1..{len(hidden)}")
    return hidden[len(hidden) - l]
