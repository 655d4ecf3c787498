"""Attention layers: scaled dot-product, multi-head, the latent-query stem and the trunk.

All layers accept an optional leading batch axis.  Learned stem queries are
unbatched (m, d_model) and broadcast against batched keys/values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .nn import FeedForward, LayerNorm, Linear, Module, param
from .numcore import DeterministicRng, Tensor, as_tensor, matmul, reshape, scale, softmax, swapaxes


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 64
    n_heads: int = 4

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0:
            raise ConfigError("d_model and n_heads must be positive", ["d_model", "n_heads"])
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}", ["d_model", "n_heads"])

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    d_v = d_k


@dataclass(frozen=True)
class StemConfig:
    m: int = 16
    d_model: int = 64
    n_heads: int = 4
    ffn_hidden: int = 128

    def __post_init__(self):
        bad = [f for f in ("m", "d_model", "n_heads", "ffn_hidden") if getattr(self, f) < 1]
        if bad:
            raise ConfigError(f"stem fields must be >= 1: {bad}", bad)
        AttentionConfig(self.d_model, self.n_heads)


@dataclass(frozen=True)
class TrunkConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    ffn_hidden: int = 128

    def __post_init__(self):
        bad = [f for f in ("n_layers", "d_model", "n_heads", "ffn_hidden") if getattr(self, f) < 1]
        if bad:
            raise ConfigError(f"trunk fields must be >= 1: {bad}", bad)
        AttentionConfig(self.d_model, self.n_heads)


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise ShapeError(f"attention operands need ndim >= 2, got q{q.shape} k{k.shape} v{v.shape}")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape} does not match key width {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key rows {k.shape} do not match value rows {v.shape}")


def attention_weights(q, k) -> Tensor:
    """softmax(q kᵀ / sqrt(d_k)), rows sum to one."""
    q, k = as_tensor(q), as_tensor(k)
    scores = matmul(q, swapaxes(k, -1, -2))
    return softmax(scale(scores, 1.0 / math.sqrt(q.shape[-1])), axis=-1)


def scaled_dot_attention(q, k, v) -> Tensor:
    """attn(K, V, Q) = softmax(Q Kᵀ / sqrt(d_k)) V for (…, N_q, d_k), (…, N_k, d_k), (…, N_k, d_v)."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_qkv(q, k, v)
    return matmul(attention_weights(q, k), v)


class MultiHeadAttention(Module):
    """Per-head projections, per-head attention, concatenation, output projection.

    Heads take contiguous d_k-wide slices of the projected width.
    """

    def __init__(self, config: AttentionConfig, rng: DeterministicRng):
        self.config = config
        d = config.d_model
        self.q_proj = Linear(d, d, rng.substream("q"))
        self.k_proj = Linear(d, d, rng.substream("k"))
        self.v_proj = Linear(d, d, rng.substream("v"))
        self.out_proj = Linear(d, d, rng.substream("out"))

    def _split(self, x: Tensor) -> Tensor:
        h, dk = self.config.n_heads, self.config.d_k
        return swapaxes(reshape(x, x.shape[:-1] + (h, dk)), -3, -2)

    def _merge(self, x: Tensor) -> Tensor:
        x = swapaxes(x, -3, -2)
        return reshape(x, x.shape[:-2] + (self.config.d_model,))

    def __call__(self, q_in, k_in, v_in) -> Tensor:
        q_in, k_in, v_in = as_tensor(q_in), as_tensor(k_in), as_tensor(v_in)
        d = self.config.d_model
        for name, t in (("query", q_in), ("key", k_in), ("value", v_in)):
            if t.shape[-1] != d:
                raise ContractError(f"{name} input width {t.shape[-1]} != d_model {d}")
        q = self._split(self.q_proj(q_in))
        k = self._split(self.k_proj(k_in))
        v = self._split(self.v_proj(v_in))
        return self.out_proj(self._merge(scaled_dot_attention(q, k, v)))


class Stem(Module):
    """m learned queries cross-attend over n input tokens: (…, n, d) -> (…, m, d).

    One pre-norm cross-attention layer with a residual on the queries, then
    one pre-norm feed-forward layer with a residual.  No positional terms are
    added to the keys, so the output does not depend on input token order.
    """

    def __init__(self, config: StemConfig, rng: DeterministicRng):
        self.config = config
        d = config.d_model
        self.queries = param(rng.substream("queries").normal(0.0, 1.0, size=(config.m, d)))
        self.norm_q = LayerNorm(d)
        self.norm_kv = LayerNorm(d)
        self.attn = MultiHeadAttention(AttentionConfig(d, config.n_heads), rng.substream("attn"))
        self.norm_ff = LayerNorm(d)
        self.ff = FeedForward(d, config.ffn_hidden, rng.substream("ff"))

    def __call__(self, tokens) -> Tensor:
        tokens = as_tensor(tokens)
        if tokens.ndim < 2 or tokens.shape[-2] == 0:
            raise ContractError(f"stem needs at least one input token, got shape {tokens.shape}")
        kv = self.norm_kv(tokens)
        h = self.queries + self.attn(self.norm_q(self.queries), kv, kv)
        return h + self.ff(self.norm_ff(h))


def stem_forward(stem: Stem, tokens) -> Tensor:
    return stem(tokens)


class TrunkBlock(Module):
    def __init__(self, config: TrunkConfig, rng: DeterministicRng):
        d = config.d_model
        self.norm_attn = LayerNorm(d)
        self.attn = MultiHeadAttention(AttentionConfig(d, config.n_heads), rng.substream("attn"))
        self.norm_ff = LayerNorm(d)
        self.ff = FeedForward(d, config.ffn_hidden, rng.substream("ff"))

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm_attn(x)
        x = x + self.attn(h, h, h)
        return x + self.ff(self.norm_ff(x))


class Trunk(Module):
    """Stack of pre-norm self-attention blocks; shape preserving."""

    def __init__(self, config: TrunkConfig, rng: DeterministicRng):
        self.config = config
        self.blocks = [TrunkBlock(config, rng.substream(("block", i))) for i in range(config.n_layers)]

    def __call__(self, tokens) -> Tensor:
        x = as_tensor(tokens)
        if x.ndim < 2 or x.shape[-2] == 0:
            raise ContractError(f"trunk needs at least one token, got shape {x.shape}")
        for block in self.blocks:
            x = block(x)
        return x


def trunk_forward(trunk: Trunk, tokens) -> Tensor:
    return trunk(tokens)


# ---------------------------------------------------------------------------
# analytic cost model
# ---------------------------------------------------------------------------
#
# Counts are multiply-adds performed by matrix products (one per inner-product
# term); elementwise work (softmax, norms, activations, residual adds) is not
# counted.  With d = d_model, f = ffn_hidden, m = stem queries:
#
#   stem(n)                 = 2·m·d² (query + output projections)
#                           + 2·n·d² (key + value projections)
#                           + 2·m·n·d (scores + weighted sum)
#                           + 2·m·d·f (feed-forward)
#   full_self_attention(n)  = 4·n·d² (q, k, v, output projections) + 2·n²·d
#   trunk(T)                = n_layers · (4·T·d² + 2·T²·d + 2·T·d·f)
#   model(n)                = encoder convs + volume MLP + 3·stem(n)
#                           + trunk(3m + 1) + head

COMPONENTS = ("stem", "full_self_attention", "trunk", "model")


def stem_flops(n: int, d_model: int, m: int, ffn_hidden: int) -> int:
    d = d_model
    return 2 * m * d * d + 2 * n * d * d + 2 * m * n * d + 2 * m * d * ffn_hidden


def full_attention_flops(n: int, d_model: int) -> int:
    return 4 * n * d_model * d_model + 2 * n * n * d_model


def trunk_flops(t: int, d_model: int, ffn_hidden: int, n_layers: int) -> int:
    d = d_model
    return n_layers * (4 * t * d * d + 2 * t * t * d + 2 * t * d * ffn_hidden)


def flop_count(component: str, n: int, *, d_model: int = 64, m: int = 16, ffn_hidden: int = 128,
               n_layers: int = 2, model_config=None) -> int:
    """Closed-form multiply-add count for ``component`` at ``n`` input tokens."""
    if component not in COMPONENTS:
        raise ContractError(f"unknown component {component!r}; expected one of {COMPONENTS}")
    if n < 1:
        raise ContractError(f"token count must be >= 1, got {n}")
    if component == "stem":
        return stem_flops(n, d_model, m, ffn_hidden)
    if component == "full_self_attention":
        return full_attention_flops(n, d_model)
    if component == "trunk":
        return trunk_flops(n, d_model, ffn_hidden, n_layers)
    from .model import ModelConfig, model_flops

    return model_flops(model_config or ModelConfig(), tokens_per_view=n)


def full_self_attention_reference(x: np.ndarray, n_heads: int, weights: dict[str, np.ndarray]) -> np.ndarray:
    """Plain numpy multi-head self-attention over all n tokens (the O(n²) baseline).

    Heads are evaluated one at a time to bound the n×n score buffer.
    """
    n, d = x.shape
    dk = d // n_heads
    q, k, v = x @ weights["q"], x @ weights["k"], x @ weights["v"]
    out = np.empty_like(q)
    for h in range(n_heads):
        sl = slice(h * dk, (h + 1) * dk)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dk)
        s -= s.max(axis=1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=1, keepdims=True)
        out[:, sl] = s @ v[:, sl]
    return out @ weights["o"]
