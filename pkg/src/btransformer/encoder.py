"""Stacked transformer encoder: multi-head self-attention, Add&Norm, position-wise FFN.

Inputs are ``[T, d]`` or batched ``[B, T, d]`` with a boolean mask of shape
``[T]`` / ``[B, T]`` marking real (non-padding) tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import (
    Tensor,
    add,
    dropout,
    layer_norm,
    matmul,
    relu,
    reshape,
    softmax,
    transpose,
)

LN_EPS = 1e-5
MASK_FILL = -1e30


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class EncoderLayerParams:
    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    num_heads: int

    def __post_init__(self):
        d = self.Wq.shape[0]
        if d % self.num_heads:
            raise ContractError(f"d={d} is not divisible by num_heads={self.num_heads}")
        for name in ("Wq", "Wk", "Wv", "Wo"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        d_ff = self.W1.shape[1]
        expected = {"W1": (d, d_ff), "b1": (d_ff,), "W2": (d_ff, d), "b2": (d,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} must have shape {shape}, got {getattr(self, name).shape}")

    @property
    def d(self) -> int:
        return self.Wq.shape[0]

    @property
    def d_ff(self) -> int:
        return self.W1.shape[1]

    @classmethod
    def init(cls, d: int, num_heads: int, d_ff: int, rng: np.random.Generator) -> "EncoderLayerParams":
        def w(fi, fo):
            return Tensor(xavier_uniform(rng, fi, fo), requires_grad=True)

        def const(n, v):
            return Tensor(np.full(n, v), requires_grad=True)

        return cls(
            Wq=w(d, d), Wk=w(d, d), Wv=w(d, d), Wo=w(d, d),
            W1=w(d, d_ff), b1=const(d_ff, 0.0), W2=w(d_ff, d), b2=const(d, 0.0),
            ln1_gamma=const(d, 1.0), ln1_beta=const(d, 0.0),
            ln2_gamma=const(d, 1.0), ln2_beta=const(d, 0.0),
            num_heads=num_heads,
        )

    def parameters(self) -> Dict[str, Tensor]:
        names = ("Wq", "Wk", "Wv", "Wo", "W1", "b1", "W2", "b2",
                 "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta")
        return {n: getattr(self, n) for n in names}


@dataclass
class EncoderStack:
    layers: List[EncoderLayerParams]
    positional: Tensor
    dropout: float = 0.1

    def __post_init__(self):
        if not self.layers:
            raise ContractError("an encoder stack needs at least one layer")

    @property
    def max_seq_len(self) -> int:
        return self.positional.shape[0]

    @classmethod
    def init(
        cls, d: int, num_layers: int, num_heads: int, d_ff: int, max_seq_len: int,
        dropout_rate: float, rng: np.random.Generator,
    ) -> "EncoderStack":
        layers = [EncoderLayerParams.init(d, num_heads, d_ff, rng) for _ in range(num_layers)]
        positional = Tensor(rng.uniform(-0.05, 0.05, size=(max_seq_len, d)), requires_grad=True)
        return cls(layers=layers, positional=positional, dropout=dropout_rate)

    def parameters(self) -> Dict[str, Tensor]:
        params = {"encoder.positional": self.positional}
        for i, layer in enumerate(self.layers):
            for name, t in layer.parameters().items():
                params[f"encoder.layer{i}.{name}"] = t
        return params


def _check_mask(mask, T: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != T:
        raise ShapeError(f"mask length {mask.shape[-1]} does not match sequence length {T}")
    if not mask.any(axis=-1).all():
        raise ContractError("mask must mark at least one real token per sequence")
    return mask


def attention_weights(Z: Tensor, params: EncoderLayerParams, mask) -> Tensor:
    """Post-softmax attention probabilities, shape ``[..., heads, T, T]``."""
    return _attention(Z, params, mask)[1]


def _attention(Z: Tensor, params: EncoderLayerParams, mask):
    *lead, T, d = Z.shape
    mask = _check_mask(mask, T)
    h = params.num_heads
    dk = d // h

    def heads(x: Tensor) -> Tensor:
        # [..., T, d] -> [..., h, T, dk]
        x = reshape(x, (*lead, T, h, dk))
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return transpose(x, axes)

    Q = heads(matmul(Z, params.Wq))
    K = heads(matmul(Z, params.Wk))
    V = heads(matmul(Z, params.Wv))
    scores = matmul(Q, transpose(K)) / math.sqrt(dk)
    # padding keys get a huge negative score; broadcast over heads and query rows
    fill = np.where(mask, 0.0, MASK_FILL)[..., None, None, :]
    weights = softmax(add(scores, fill), axis=-1)
    ctx = matmul(weights, V)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    ctx = reshape(transpose(ctx, axes), (*lead, T, d))
    return ctx, weights


def multi_head_attention(Z: Tensor, params: EncoderLayerParams, mask) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated and projected by Wo."""
    ctx, _ = _attention(Z, params, mask)
    return matmul(ctx, params.Wo)


def add_norm(x: Tensor, sub: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    if x.shape != sub.shape:
        raise ShapeError(f"add_norm: residual {x.shape} and sublayer {sub.shape} differ")
    return layer_norm(add(x, sub), gamma, beta, LN_EPS)


def ffn(U: Tensor, params: EncoderLayerParams) -> Tensor:
    hidden = relu(add(matmul(U, params.W1), params.b1))
    return add(matmul(hidden, params.W2), params.b2)


def encoder_layer(
    Z: Tensor,
    params: EncoderLayerParams,
    mask,
    training: bool = False,
    p: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    A = dropout(multi_head_attention(Z, params, mask), p, training, rng)
    U = add_norm(Z, A, params.ln1_gamma, params.ln1_beta)
    F = dropout(ffn(U, params), p, training, rng)
    return add_norm(U, F, params.ln2_gamma, params.ln2_beta)


def encode(
    H: Tensor,
    stack: EncoderStack,
    mask,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Add positional rows ``[0, T)`` to ``H`` and run every layer in order."""
    T = H.shape[-2]
    if T > stack.max_seq_len:
        raise ContractError(f"sequence length {T} exceeds max_seq_len {stack.max_seq_len}")
    Z = add(H, stack.positional[:T])
    for layer in stack.layers:
        Z = encoder_layer(Z, layer, mask, training, stack.dropout, rng)
    return Z
