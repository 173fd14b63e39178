"""Pre-norm Transformer encoder/decoder blocks on top of the autodiff engine.

All activations are batched as ``[B, T, d_model]``. Masks are additive float
arrays (0 or -inf) broadcast against attention scores of shape
``[B, heads, Tq, Tk]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterator, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class ConfigError(ValueError):
    """Invalid or incompatible model/training configuration."""


class LengthError(ValueError):
    """Sequence longer than the positional table."""


@dataclass
class ModelConfig:
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    n_bottom_blocks: int = 2
    n_top_blocks: int = 1
    vocab_size: int = 64
    dropout: float = 0.1
    max_len: int = 64
    precision: int = 32
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be a positive multiple of n_heads={self.n_heads}")
        if self.n_bottom_blocks < 1 or self.n_top_blocks < 1:
            raise ConfigError("need at least one bottom block and one top block")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout={self.dropout} outside [0, 1)")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.vocab_size < 5 or self.max_len < 1 or self.d_ff < 1:
            raise ConfigError("vocab_size, max_len and d_ff are too small")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# forward context (train/eval + counter-based dropout streams)


class Context:
    """Carries train/eval mode and hands out per-op dropout generators.

    Each dropout site gets its own generator seeded from
    (seed, step, op counter), so a step's masks do not depend on how many
    random numbers earlier steps consumed.
    """

    def __init__(self, training: bool = False, p: float = 0.0, seed: int = 0, step: int = 0):
        self.training = training and p > 0.0
        self.p = p
        self.seed = seed
        self.step = step
        self._op = 0

    def dropout(self, x: Tensor) -> Tensor:
        if not self.training:
            return x
        self._op += 1
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.step, self._op])))
        return ad.dropout(x, self.p, rng, training=True)


EVAL = Context(training=False)


# --------------------------------------------------------------------------
# masks


def padding_mask(pad: np.ndarray, dtype) -> np.ndarray:
    """[B, S] bool (True = pad) -> additive [B, 1, 1, S]."""
    m = np.where(pad, -np.inf, 0.0).astype(dtype)
    return m[:, None, None, :]


def causal_mask(T: int, dtype) -> np.ndarray:
    """Additive [1, 1, T, T]; position t sees positions <= t."""
    m = np.triu(np.full((T, T), -np.inf), k=1).astype(dtype)
    return m[None, None]


# --------------------------------------------------------------------------
# init helpers


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class Module:
    """Anything owning Parameters; subclasses list them in ``_params`` / ``_children``."""

    def named_parameters(self) -> Iterator[Parameter]:
        for p in getattr(self, "_params", ()):
            yield p
        for child in getattr(self, "_children", ()):
            yield from child.named_parameters()

    def parameters(self) -> List[Parameter]:
        return list(self.named_parameters())

    def param_dict(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.named_parameters()}

    def set_trainable(self, flag: bool) -> None:
        for p in self.named_parameters():
            p.trainable = flag


class LayerNorm(Module):
    def __init__(self, name: str, d: int, dtype, eps: float = 1e-5):
        self.gain = Parameter(f"{name}.gain", np.ones(d, dtype=dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(d, dtype=dtype))
        self.eps = eps
        self._params = (self.gain, self.bias)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """softmax(q k^T / sqrt(d_k) + mask) v over the last two axes."""
    d_k = q.shape[-1]
    if k.shape[-1] != d_k or k.shape[-2] != v.shape[-2]:
        raise ad.DimensionError(f"attention shape mismatch: Q{q.shape} K{k.shape} V{v.shape}")
    scores = ad.matmul(ad.mul(q, 1.0 / math.sqrt(d_k)), ad.transpose(k, _swap_last(k.ndim)))
    if mask is not None:
        scores = ad.add(scores, Tensor(mask))
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


class MultiHeadAttention(Module):
    def __init__(self, name: str, cfg: ModelConfig, rng: np.random.Generator):
        d, dt = cfg.d_model, cfg.dtype
        self.n_heads = cfg.n_heads
        self.wq = Parameter(f"{name}.wq", xavier(rng, d, d, dt))
        self.wk = Parameter(f"{name}.wk", xavier(rng, d, d, dt))
        self.wv = Parameter(f"{name}.wv", xavier(rng, d, d, dt))
        self.wo = Parameter(f"{name}.wo", xavier(rng, d, d, dt))
        self._params = (self.wq, self.wk, self.wv, self.wo)

    def _split(self, x: Tensor) -> Tensor:
        B, T, d = x.shape
        return ad.transpose(ad.reshape(x, (B, T, self.n_heads, d // self.n_heads)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, memory: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        B, T, d = query.shape
        q = self._split(ad.matmul(query, self.wq))
        k = self._split(ad.matmul(memory, self.wk))
        v = self._split(ad.matmul(memory, self.wv))
        heads = scaled_dot_attention(q, k, v, mask)
        merged = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (B, T, d))
        return ad.matmul(merged, self.wo)


class FeedForward(Module):
    def __init__(self, name: str, cfg: ModelConfig, rng: np.random.Generator):
        d, f, dt = cfg.d_model, cfg.d_ff, cfg.dtype
        self.w1 = Parameter(f"{name}.w1", xavier(rng, d, f, dt))
        self.b1 = Parameter(f"{name}.b1", np.zeros(f, dtype=dt))
        self.w2 = Parameter(f"{name}.w2", xavier(rng, f, d, dt))
        self.b2 = Parameter(f"{name}.b2", np.zeros(d, dtype=dt))
        self._params = (self.w1, self.b1, self.w2, self.b2)

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(x, self.w1), self.b1))
        return ad.add(ad.matmul(h, self.w2), self.b2)


class EncoderBlock(Module):
    def __init__(self, name: str, cfg: ModelConfig, rng: np.random.Generator):
        self.ln_attn = LayerNorm(f"{name}.ln_attn", cfg.d_model, cfg.dtype, cfg.ln_eps)
        self.self_attn = MultiHeadAttention(f"{name}.self_attn", cfg, rng)
        self.ln_ffn = LayerNorm(f"{name}.ln_ffn", cfg.d_model, cfg.dtype, cfg.ln_eps)
        self.ffn = FeedForward(f"{name}.ffn", cfg, rng)
        self._children = (self.ln_attn, self.self_attn, self.ln_ffn, self.ffn)

    def output_projections(self) -> List[Parameter]:
        return [self.self_attn.wo, self.ffn.w2, self.ffn.b2]

    def __call__(self, x: Tensor, src_mask: Optional[np.ndarray], ctx: Context = EVAL) -> Tensor:
        h = self.ln_attn(x)
        x = ad.add(x, ctx.dropout(self.self_attn(h, h, src_mask)))
        return ad.add(x, ctx.dropout(self.ffn(self.ln_ffn(x))))


class DecoderBlock(Module):
    def __init__(self, name: str, cfg: ModelConfig, rng: np.random.Generator):
        self.ln_self = LayerNorm(f"{name}.ln_self", cfg.d_model, cfg.dtype, cfg.ln_eps)
        self.self_attn = MultiHeadAttention(f"{name}.self_attn", cfg, rng)
        self.ln_cross = LayerNorm(f"{name}.ln_cross", cfg.d_model, cfg.dtype, cfg.ln_eps)
        self.cross_attn = MultiHeadAttention(f"{name}.cross_attn", cfg, rng)
        self.ln_ffn = LayerNorm(f"{name}.ln_ffn", cfg.d_model, cfg.dtype, cfg.ln_eps)
        self.ffn = FeedForward(f"{name}.ffn", cfg, rng)
        self._children = (self.ln_self, self.self_attn, self.ln_cross, self.cross_attn, self.ln_ffn, self.ffn)

    def output_projections(self) -> List[Parameter]:
        return [self.self_attn.wo, self.cross_attn.wo, self.ffn.w2, self.ffn.b2]

    def __call__(
        self,
        y: Tensor,
        memory: Tensor,
        self_mask: np.ndarray,
        mem_mask: Optional[np.ndarray],
        ctx: Context = EVAL,
    ) -> Tensor:
        h = self.ln_self(y)
        y = ad.add(y, ctx.dropout(self.self_attn(h, h, self_mask)))
        y = ad.add(y, ctx.dropout(self.cross_attn(self.ln_cross(y), memory, mem_mask)))
        return ad.add(y, ctx.dropout(self.ffn(self.ln_ffn(y))))


class EncoderStack(Module):
    """``n`` encoder blocks followed by a final layer norm."""

    def __init__(self, name: str, n: int, cfg: ModelConfig, rng: np.random.Generator):
        self.blocks = [EncoderBlock(f"{name}.{i}", cfg, rng) for i in range(n)]
        self.norm = LayerNorm(f"{name}.norm", cfg.d_model, cfg.dtype, cfg.ln_eps)
        self._children = (*self.blocks, self.norm)

    def __call__(self, x: Tensor, src_mask, ctx: Context = EVAL) -> Tensor:
        for block in self.blocks:
            x = block(x, src_mask, ctx)
        return self.norm(x)


class DecoderStack(Module):
    def __init__(self, name: str, n: int, cfg: ModelConfig, rng: np.random.Generator):
        self.blocks = [DecoderBlock(f"{name}.{i}", cfg, rng) for i in range(n)]
        self.norm = LayerNorm(f"{name}.norm", cfg.d_model, cfg.dtype, cfg.ln_eps)
        self._children = (*self.blocks, self.norm)

    def __call__(self, y: Tensor, memory: Tensor, self_mask, mem_mask, ctx: Context = EVAL) -> Tensor:
        for block in self.blocks:
            y = block(y, memory, self_mask, mem_mask, ctx)
        return self.norm(y)


def sinusoid_table(max_len: int, d: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    table = np.zeros((max_len, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table.astype(dtype)


class Embedder(Module):
    """Shared source/target embedding, scaled by sqrt(d_model), plus sinusoids."""

    def __init__(self, name: str, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.weight = Parameter(f"{name}.weight", (rng.standard_normal((cfg.vocab_size, d)) * d**-0.5).astype(cfg.dtype))
        self.scale = math.sqrt(d)
        self.positions = sinusoid_table(cfg.max_len, d, cfg.dtype)
        self._params = (self.weight,)

    def __call__(self, ids: np.ndarray, ctx: Context = EVAL) -> Tensor:
        ids = np.atleast_2d(np.asarray(ids))
        T = ids.shape[1]
        if T > self.positions.shape[0]:
            raise LengthError(f"sequence length {T} exceeds max_len {self.positions.shape[0]}")
        x = ad.add(ad.mul(ad.embedding_lookup(self.weight, ids), self.scale), Tensor(self.positions[:T]))
        return ctx.dropout(x)


def zero_output_projections(blocks) -> None:
    for block in blocks:
        for p in block.output_projections():
            p.data[...] = 0.0
