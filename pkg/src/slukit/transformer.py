"""Encoder/decoder transformer blocks: multi-head attention, position-wise
feed-forward, sinusoidal positions, causal and padding masks.

Post-norm residual wiring (the original layout: sublayer, add, layer norm).
All forward passes run per utterance on 2-D (time, dim) tensors; batching
is the trainer's concern, so no padding ever enters attention here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor
from .errors import ConfigError, DimensionError, InputError, ValidationError


@dataclass
class ModelConfig:
    n_enc_layers: int = 2
    n_dec_layers: int = 0
    n_heads: int = 2
    d_k: int = 32
    d_v: int = 32
    d_model: int = 64
    d_inner: int = 128
    vocab_size: int = 64
    intent_count: int = 8
    input_dim: int = 320
    max_positions: int = 512
    dropout: float = 0.0
    dtype: type = np.float32
    # diagnostic switch: drop the encoder's position signal so time-axis
    # invariances (max-pool duplication etc.) can be checked in isolation
    use_positions: bool = True

    def __post_init__(self):
        for name in ("n_heads", "d_k", "d_v", "d_model", "d_inner", "input_dim", "max_positions"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_enc_layers < 0 or self.n_dec_layers < 0:
            raise ConfigError("layer counts must be nonnegative")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must cover the reserved ids (PAD/BOS/EOS/MASK)")
        if self.intent_count < 1:
            raise ConfigError("intent_count must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


class AttentionMask:
    """Boolean (len_q, len_k) matrix; True marks an attendable key."""

    def __init__(self, matrix: np.ndarray):
        m = np.asarray(matrix, dtype=bool)
        if m.ndim != 2:
            raise DimensionError(f"attention mask must be 2-D, got shape {m.shape}")
        self.matrix = m

    @classmethod
    def full(cls, len_q: int, len_k: int) -> "AttentionMask":
        return cls(np.ones((len_q, len_k), dtype=bool))

    @classmethod
    def causal(cls, length: int) -> "AttentionMask":
        return cls(np.tril(np.ones((length, length), dtype=bool)))

    @classmethod
    def padding(cls, len_q: int, len_k: int, valid_k: int) -> "AttentionMask":
        if not 0 < valid_k <= len_k:
            raise ValidationError(f"valid_k {valid_k} out of range for key length {len_k}")
        m = np.zeros((len_q, len_k), dtype=bool)
        m[:, :valid_k] = True
        return cls(m)


def sinusoidal_positions(length: int, d_model: int, max_positions: int = 512,
                         dtype=np.float32) -> Tensor:
    """Interleaved sin/cos table: column 2k is sin(pos/10000^(2k/d)),
    column 2k+1 the matching cos. Row 0 is [0, 1, 0, 1, ...]."""
    if length > max_positions:
        raise ConfigError(f"sequence length {length} exceeds max_positions {max_positions}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    k = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, k / d_model)
    table = np.zeros((length, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : (d_model // 2)]) if d_model % 2 else np.cos(angle)
    return Tensor(table.astype(dtype))


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, dtype=np.float32):
        self.w = ad.glorot_uniform(rng, (d_in, d_out), d_in, d_out, dtype=dtype)
        self.b = ad.zeros_param((d_out,), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32):
        self.gain = ad.ones_param((d,), dtype=dtype)
        self.bias = ad.zeros_param((d,), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    def __init__(self, rng, cfg: ModelConfig):
        d, h, dk, dv = cfg.d_model, cfg.n_heads, cfg.d_k, cfg.d_v
        self.wq = Linear(rng, d, h * dk, cfg.dtype)
        self.wk = Linear(rng, d, h * dk, cfg.dtype)
        self.wv = Linear(rng, d, h * dv, cfg.dtype)
        self.wo = Linear(rng, h * dv, d, cfg.dtype)
        self._heads, self._dk, self._dv = h, dk, dv
        self._last_weights = None  # (h, len_q, len_k), inspection only

    def _split(self, x: Tensor, per_head: int) -> Tensor:
        t = x.shape[0]
        return ad.transpose(ad.reshape(x, (t, self._heads, per_head)), (1, 0, 2))

    def forward(self, q: Tensor, k: Tensor, v: Tensor,
                mask: AttentionMask | None = None) -> Tensor:
        len_q, len_k = q.shape[0], k.shape[0]
        if mask is not None and mask.matrix.shape != (len_q, len_k):
            raise DimensionError(
                f"mask shape {mask.matrix.shape} does not cover ({len_q}, {len_k})"
            )
        qh = self._split(self.wq.forward(q), self._dk)
        kh = self._split(self.wk.forward(k), self._dk)
        vh = self._split(self.wv.forward(v), self._dv)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(self._dk))
        mat = None if mask is None else mask.matrix[None, :, :]
        weights = ad.softmax(scores, axis=-1, mask=mat)
        self._last_weights = weights.data
        ctx = ad.matmul(weights, vh)
        merged = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (len_q, self._heads * self._dv))
        return self.wo.forward(merged)


class FeedForward(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.lin1 = Linear(rng, cfg.d_model, cfg.d_inner, cfg.dtype)
        self.lin2 = Linear(rng, cfg.d_inner, cfg.d_model, cfg.dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.lin2.forward(ad.relu(self.lin1.forward(x)))


def _maybe_dropout(x: Tensor, p: float, rng) -> Tensor:
    if p > 0.0 and rng is not None:
        return ad.dropout(x, p, rng)
    return x


class EncoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.self_attn = MultiHeadAttention(rng, cfg)
        self.norm1 = LayerNorm(cfg.d_model, cfg.dtype)
        self.ffn = FeedForward(rng, cfg)
        self.norm2 = LayerNorm(cfg.d_model, cfg.dtype)
        self._p = cfg.dropout

    def forward(self, x: Tensor, mask: AttentionMask | None, rng=None) -> Tensor:
        a = _maybe_dropout(self.self_attn.forward(x, x, x, mask), self._p, rng)
        x = self.norm1.forward(ad.add(x, a))
        f = _maybe_dropout(self.ffn.forward(x), self._p, rng)
        return self.norm2.forward(ad.add(x, f))


class DecoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.self_attn = MultiHeadAttention(rng, cfg)
        self.norm1 = LayerNorm(cfg.d_model, cfg.dtype)
        self.cross_attn = MultiHeadAttention(rng, cfg)
        self.norm2 = LayerNorm(cfg.d_model, cfg.dtype)
        self.ffn = FeedForward(rng, cfg)
        self.norm3 = LayerNorm(cfg.d_model, cfg.dtype)
        self._p = cfg.dropout

    def forward(self, x: Tensor, enc_out: Tensor, causal: AttentionMask, rng=None) -> Tensor:
        a = _maybe_dropout(self.self_attn.forward(x, x, x, causal), self._p, rng)
        x = self.norm1.forward(ad.add(x, a))
        c = _maybe_dropout(self.cross_attn.forward(x, enc_out, enc_out, None), self._p, rng)
        x = self.norm2.forward(ad.add(x, c))
        f = _maybe_dropout(self.ffn.forward(x), self._p, rng)
        return self.norm3.forward(ad.add(x, f))


class Encoder(Module):
    """Input projection (feature dim -> d_model), positions, then
    n_enc_layers of self-attention + FFN. Length-preserving."""

    def __init__(self, rng, cfg: ModelConfig):
        self.in_proj = Linear(rng, cfg.input_dim, cfg.d_model, cfg.dtype)
        self.layers = [EncoderLayer(rng, cfg) for _ in range(cfg.n_enc_layers)]
        self._cfg = cfg

    def forward(self, x: Tensor, rng=None) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self._cfg.input_dim:
            raise DimensionError(
                f"encoder input must be (T, {self._cfg.input_dim}), got {x.shape}"
            )
        if x.shape[0] < 1:
            raise InputError("encoder input has no frames")
        cfg = self._cfg
        h = self.in_proj.forward(x)
        if cfg.use_positions:
            pos = sinusoidal_positions(x.shape[0], cfg.d_model, cfg.max_positions, cfg.dtype)
            h = ad.add(h, pos)
        h = _maybe_dropout(h, cfg.dropout, rng)
        for layer in self.layers:
            h = layer.forward(h, None, rng)
        return h


class Decoder(Module):
    """Token embedding + positions, causal self-attention layers with
    cross-attention over the encoder output, then a linear to vocab logits."""

    def __init__(self, rng, cfg: ModelConfig):
        self.embed = ad.glorot_uniform(
            rng, (cfg.vocab_size, cfg.d_model), cfg.vocab_size, cfg.d_model, dtype=cfg.dtype
        )
        self.layers = [DecoderLayer(rng, cfg) for _ in range(cfg.n_dec_layers)]
        self.out_proj = Linear(rng, cfg.d_model, cfg.vocab_size, cfg.dtype)
        self._cfg = cfg

    def hidden(self, tokens: np.ndarray, enc_out: Tensor, rng=None) -> Tensor:
        """Final decoder hidden states, (len(tokens), d_model)."""
        cfg = self._cfg
        tokens = np.asarray(tokens)
        emb = ad.embedding_lookup(self.embed, tokens)
        pos = sinusoidal_positions(tokens.shape[0], cfg.d_model, cfg.max_positions, cfg.dtype)
        h = _maybe_dropout(ad.add(emb, pos), cfg.dropout, rng)
        causal = AttentionMask.causal(tokens.shape[0])
        for layer in self.layers:
            h = layer.forward(h, enc_out, causal, rng)
        return h

    def forward(self, tokens: np.ndarray, enc_out: Tensor, rng=None) -> Tensor:
        return self.out_proj.forward(self.hidden(tokens, enc_out, rng))
