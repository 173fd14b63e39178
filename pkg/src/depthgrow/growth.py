"""Depth growing: a frozen shallow encoder-decoder plus a trainable top module.

The shallow (bottom) model computes

    h1 = enc1(x)
    s1 = dec1(y, attending to h1)

and the top module, stacked on it with cross-module residuals, computes

    h2 = enc2(x + h1)
    s2 = dec2(y + s1, attending to h2)

where ``x`` and ``y`` are the embedded (scaled + positional) source and
target sequences. Both ``s1`` and ``s2`` go through one shared output
projection to produce the shallow and deep logits.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .checkpoint import Checkpoint, CheckpointError, require
from .data import PAD
from .transformer import (
    EVAL,
    ConfigError,
    Context,
    DecoderStack,
    Embedder,
    EncoderStack,
    Module,
    ModelConfig,
    causal_mask,
    padding_mask,
    xavier,
    zero_output_projections,
)


@dataclass
class HiddenStates:
    h1: Optional[Tensor] = None
    h2: Optional[Tensor] = None
    s1: Optional[Tensor] = None
    s2: Optional[Tensor] = None


def param_hash(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def _masks(src: np.ndarray, T: int, dtype):
    return padding_mask(np.asarray(src) == PAD, dtype), causal_mask(T, dtype)


class ShallowModel(Module):
    """The stage-1 model: embeddings, enc1, dec1 and the output projection."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, n_blocks: Optional[int] = None):
        self.cfg = cfg
        n = cfg.n_bottom_blocks if n_blocks is None else n_blocks
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.embed = Embedder("embed", cfg, rng)
        self.enc = EncoderStack("bottom.enc", n, cfg, rng)
        self.dec = DecoderStack("bottom.dec", n, cfg, rng)
        self.out_proj = Parameter("out_proj.weight", xavier(rng, cfg.d_model, cfg.vocab_size, cfg.dtype))
        self._children = (self.embed, self.enc, self.dec)
        self._params = (self.out_proj,)

    def encode(self, src: np.ndarray, ctx: Context = EVAL) -> Tensor:
        src_mask, _ = _masks(src, 1, self.cfg.dtype)
        return self.enc(self.embed(src, ctx), src_mask, ctx)

    def decode(self, tgt_in: np.ndarray, h1: Tensor, src: np.ndarray, ctx: Context = EVAL) -> Tuple[Tensor, Tensor]:
        tgt_in = np.atleast_2d(tgt_in)
        src_mask, self_mask = _masks(src, tgt_in.shape[1], self.cfg.dtype)
        s1 = self.dec(self.embed(tgt_in, ctx), h1, self_mask, src_mask, ctx)
        return s1, ad.matmul(s1, self.out_proj)

    def forward(self, src: np.ndarray, tgt_in: np.ndarray, ctx: Context = EVAL) -> Tensor:
        src = np.atleast_2d(src)
        return self.decode(tgt_in, self.encode(src, ctx), src, ctx)[1]

    def load_arrays(self, arrays: Dict[str, np.ndarray], strict: bool = True) -> None:
        load_into(self, arrays, strict)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: Optional[ModelConfig] = None) -> "ShallowModel":
        cfg = cfg or ModelConfig.from_dict(ckpt.model_config)
        n = ckpt.extra.get("n_blocks", cfg.n_bottom_blocks)
        model = cls(cfg, seed=0, n_blocks=n)
        model.load_arrays(ckpt.params())
        return model

    def to_checkpoint(self, stage: int = 1, step: int = 0, extra: Optional[dict] = None) -> Checkpoint:
        extra = dict(extra or {})
        extra["kind"] = "shallow"
        extra["n_blocks"] = len(self.enc.blocks)
        return model_checkpoint(self, stage, step, extra)


def load_into(model: Module, arrays: Dict[str, np.ndarray], strict: bool = True) -> None:
    params = model.param_dict()
    if strict:
        require(Checkpoint({}, 0, 0, arrays), params)
    for name, p in params.items():
        if name not in arrays:
            continue
        arr = arrays[name]
        if arr.shape != p.shape:
            raise ConfigError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data[...] = arr.astype(p.dtype)


def model_checkpoint(model: Module, stage: int, step: int, extra: dict) -> Checkpoint:
    params = model.parameters()
    return Checkpoint(
        model_config=model.cfg.to_dict(),
        stage=stage,
        step=step,
        tensors={p.name: p.data.copy() for p in params},
        trainable={p.name: p.trainable for p in params},
        groups={p.name: "param" for p in params},
        extra=extra,
    )


class GrownModel(Module):
    """A shallow model grown by ``M`` encoder and decoder blocks on top."""

    def __init__(self, cfg: ModelConfig, bottom: ShallowModel, top_seed: int = 0, zero_init: bool = True):
        self.cfg = cfg
        self.bottom = bottom
        rng = np.random.default_rng(np.random.SeedSequence([top_seed, 2]))
        self.enc2 = EncoderStack("top.enc", cfg.n_top_blocks, cfg, rng)
        self.dec2 = DecoderStack("top.dec", cfg.n_top_blocks, cfg, rng)
        if zero_init:
            zero_output_projections(self.enc2.blocks + self.dec2.blocks)
        self._children = (bottom, self.enc2, self.dec2)
        self.reference_hashes: Dict[str, str] = {}

    # shared pieces
    @property
    def embed(self) -> Embedder:
        return self.bottom.embed

    @property
    def out_proj(self) -> Parameter:
        return self.bottom.out_proj

    @property
    def enc1(self) -> EncoderStack:
        return self.bottom.enc

    @property
    def dec1(self) -> DecoderStack:
        return self.bottom.dec

    def top_parameters(self) -> List[Parameter]:
        return self.enc2.parameters() + self.dec2.parameters()

    def frozen_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if not p.trainable]

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def freeze_bottom(self, train_projection: bool = False) -> None:
        """Freeze embeddings, enc1, dec1 (and the projection unless asked not to)."""
        self.bottom.set_trainable(False)
        if train_projection:
            self.out_proj.trainable = True
        for p in self.top_parameters():
            p.trainable = True
        self.record_reference()

    def record_reference(self) -> None:
        self.reference_hashes = {p.name: param_hash(p.data) for p in self.frozen_parameters()}

    # the composition
    def encode(self, src: np.ndarray, ctx: Context = EVAL) -> HiddenStates:
        src = np.atleast_2d(src)
        src_mask, _ = _masks(src, 1, self.cfg.dtype)
        bottom_ctx = ctx if self.bottom_trainable() else EVAL
        x = self.embed(src, bottom_ctx)
        h1 = self.enc1(x, src_mask, bottom_ctx)
        h2 = self.enc2(ctx.dropout(ad.add(x, h1)), src_mask, ctx)
        return HiddenStates(h1=h1, h2=h2)

    def decode_shallow(
        self, tgt_in: np.ndarray, h1: Tensor, src: np.ndarray, ctx: Context = EVAL
    ) -> Tuple[Tensor, Tensor]:
        bottom_ctx = ctx if self.bottom_trainable() else EVAL
        return self.bottom.decode(tgt_in, h1, np.atleast_2d(src), bottom_ctx)

    def decode_deep(
        self, tgt_in: np.ndarray, s1: Tensor, h2: Tensor, src: np.ndarray, ctx: Context = EVAL
    ) -> Tuple[Tensor, Tensor]:
        tgt_in = np.atleast_2d(tgt_in)
        src = np.atleast_2d(src)
        if s1.shape[:2] != tgt_in.shape:
            raise ad.ContractError(f"s1 shape {s1.shape} does not match target prefix {tgt_in.shape}")
        if h2.shape[1] != src.shape[1]:
            raise ad.ContractError(f"h2 length {h2.shape[1]} does not match source length {src.shape[1]}")
        src_mask, self_mask = _masks(src, tgt_in.shape[1], self.cfg.dtype)
        bottom_ctx = ctx if self.bottom_trainable() else EVAL
        y = self.embed(tgt_in, bottom_ctx)
        s2 = self.dec2(ctx.dropout(ad.add(y, s1)), h2, self_mask, src_mask, ctx)
        return s2, ad.matmul(s2, self.out_proj)

    def hidden_states(self, src: np.ndarray, tgt_in: np.ndarray, ctx: Context = EVAL) -> Tuple[HiddenStates, Tensor, Tensor]:
        hs = self.encode(src, ctx)
        hs.s1, logits_s = self.decode_shallow(tgt_in, hs.h1, src, ctx)
        hs.s2, logits_d = self.decode_deep(tgt_in, hs.s1, hs.h2, src, ctx)
        return hs, logits_s, logits_d

    def forward_netS(self, src: np.ndarray, tgt_in: np.ndarray, ctx: Context = EVAL) -> Tensor:
        src = np.atleast_2d(src)
        h1 = self.bottom.encode(src, ctx if self.bottom_trainable() else EVAL)
        return self.decode_shallow(tgt_in, h1, src, ctx)[1]

    def forward_netD(self, src: np.ndarray, tgt_in: np.ndarray, ctx: Context = EVAL) -> Tensor:
        return self.hidden_states(src, tgt_in, ctx)[2]

    def bottom_trainable(self) -> bool:
        # gradient-check runs unfreeze everything; normal stage 2 keeps the bottom in eval mode
        return any(p.trainable for p in self.bottom.enc.parameters())

    # persistence
    def to_checkpoint(self, stage: int = 2, step: int = 0, extra: Optional[dict] = None) -> Checkpoint:
        extra = dict(extra or {})
        extra["kind"] = "grown"
        extra["n_blocks"] = len(self.enc1.blocks)
        extra["frozen_reference"] = dict(sorted(self.reference_hashes.items()))
        return model_checkpoint(self, stage, step, extra)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "GrownModel":
        if ckpt.extra.get("kind") != "grown":
            raise CheckpointError("not a grown-model checkpoint (run grow first)")
        cfg = ModelConfig.from_dict(ckpt.model_config)
        bottom = ShallowModel(cfg, seed=0, n_blocks=ckpt.extra.get("n_blocks", cfg.n_bottom_blocks))
        model = cls(cfg, bottom, top_seed=0, zero_init=False)
        load_into(model, ckpt.params())
        for p in model.parameters():
            p.trainable = ckpt.trainable.get(p.name, True)
        model.reference_hashes = dict(ckpt.extra.get("frozen_reference", {}))
        return model


def grow(
    shallow: Checkpoint,
    n_top_blocks: int,
    init_seed: int = 0,
    cfg: Optional[ModelConfig] = None,
    train_projection: bool = False,
) -> GrownModel:
    """Load a stage-1 checkpoint verbatim, freeze it and stack a fresh top module."""
    base = ModelConfig.from_dict(shallow.model_config)
    if cfg is None:
        cfg = base
    for key in ("d_model", "vocab_size", "d_ff", "n_heads", "max_len"):
        if getattr(cfg, key) != getattr(base, key):
            raise ConfigError(f"incompatible {key}: checkpoint has {getattr(base, key)}, requested {getattr(cfg, key)}")
    cfg = ModelConfig.from_dict({**cfg.to_dict(), "n_top_blocks": n_top_blocks})
    n = shallow.extra.get("n_blocks", base.n_bottom_blocks)
    cfg.n_bottom_blocks = n
    bottom = ShallowModel(cfg, seed=0, n_blocks=n)
    bottom.load_arrays(shallow.params())
    model = GrownModel(cfg, bottom, top_seed=init_seed)
    model.freeze_bottom(train_projection=train_projection)
    return model


def grow_direct(shallow: Checkpoint, extra_blocks: int, init_seed: int = 0) -> ShallowModel:
    """Direct stacking baseline: append fresh blocks to enc1/dec1, everything trainable."""
    cfg = ModelConfig.from_dict(shallow.model_config)
    n = shallow.extra.get("n_blocks", cfg.n_bottom_blocks)
    require(shallow, ShallowModel(cfg, seed=0, n_blocks=n).param_dict())
    fresh = ShallowModel(cfg, seed=init_seed, n_blocks=n + extra_blocks)
    load_into(fresh, shallow.params(), strict=False)
    return fresh


@dataclass
class FreezeReport:
    frozen: List[str]
    trainable: List[str]
    violations: List[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.violations


def freeze_audit(model: GrownModel) -> FreezeReport:
    """Names of frozen / trainable parameters and any frozen one whose bytes changed."""
    frozen = sorted(p.name for p in model.frozen_parameters())
    trainable = sorted(p.name for p in model.trainable_parameters())
    params = model.param_dict()
    violations = []
    for name, ref in sorted(model.reference_hashes.items()):
        p = params.get(name)
        if p is None or p.trainable or param_hash(p.data) != ref:
            violations.append(name)
    for name in frozen:
        if name not in model.reference_hashes:
            violations.append(name)
    return FreezeReport(frozen, trainable, sorted(set(violations)))
