"""Finite-difference verification of the grown model's analytic gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .data import PAD
from .growth import GrownModel, ShallowModel
from .transformer import ModelConfig

FAMILIES = (
    "embedding",
    "output_projection",
    "attn1",
    "attn2",
    "self_attn",
    "ffn",
    "layer_norm",
)


def family_of(name: str) -> str:
    if name.startswith("embed."):
        return "embedding"
    if name.startswith("out_proj."):
        return "output_projection"
    if ".cross_attn." in name:
        return "attn1" if name.startswith("bottom.") else "attn2"
    if ".self_attn." in name:
        return "self_attn"
    if ".ffn." in name:
        return "ffn"
    if name.endswith(".gain") or name.endswith(".bias"):
        return "layer_norm"
    raise ValueError(f"unclassified parameter {name}")


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_model=8, d_ff=16, n_heads=2, n_bottom_blocks=1, n_top_blocks=1,
                vocab_size=12, dropout=0.0, max_len=16, precision=64)
    base.update(kw)
    return ModelConfig(**base)


def random_grown_model(cfg: ModelConfig, seed: int = 0, scale: float = 0.5) -> GrownModel:
    """A grown model with every parameter random (no zero-initialised projections)."""
    rng = np.random.default_rng(seed)
    model = GrownModel(cfg, ShallowModel(cfg, seed=seed), top_seed=seed + 1, zero_init=False)
    for p in model.parameters():
        if p.name.endswith(".gain"):
            p.data[...] = 1.0 + 0.2 * rng.standard_normal(p.shape)
        else:
            p.data[...] = scale * rng.standard_normal(p.shape)
    return model


def random_batch(cfg: ModelConfig, rng: np.random.Generator, B: int = 2, S: int = 5, T: int = 4):
    src = rng.integers(4, cfg.vocab_size, size=(B, S))
    tgt_in = rng.integers(4, cfg.vocab_size, size=(B, T))
    tgt_in[:, 0] = 1
    tgt_out = rng.integers(4, cfg.vocab_size, size=(B, T))
    # one padded position on each side exercises the masks
    src[-1, -1] = PAD
    tgt_out[-1, -1] = PAD
    return src, tgt_in, tgt_out


@dataclass
class GradcheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradcheckReport:
    entries: List[GradcheckEntry] = field(default_factory=list)
    tolerance: float = 1e-3
    seconds: float = 0.0

    @property
    def worst(self) -> Optional[GradcheckEntry]:
        return max(self.entries, key=lambda e: e.rel_error, default=None)

    @property
    def passed(self) -> bool:
        return bool(self.entries) and self.worst.rel_error < self.tolerance

    @property
    def families(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for e in self.entries:
            out[family_of(e.name)] = out.get(family_of(e.name), 0) + 1
        return out


def run_gradcheck(
    n_params: int = 60,
    seed: int = 0,
    cfg: Optional[ModelConfig] = None,
    h: float = 1e-5,
    tolerance: float = 1e-3,
    label_smoothing: float = 0.1,
) -> GradcheckReport:
    """Compare backprop gradients with central differences on sampled entries.

    The loss sums the deep and shallow cross-entropies so that every
    parameter family has a path to it. Sampling cycles through the families
    so each one is covered.
    """
    t0 = time.perf_counter()
    cfg = cfg or tiny_config()
    if cfg.precision != 64:
        raise ad.ContractError("gradient checks need 64-bit precision")
    cfg.dropout = 0.0
    rng = np.random.default_rng(seed)
    model = random_grown_model(cfg, seed)
    model.set_trainable(True)
    src, tgt_in, tgt_out = random_batch(cfg, rng)

    def loss_tensor():
        _, ls, ld = model.hidden_states(src, tgt_in)
        return ad.add(
            ad.cross_entropy(ld, tgt_out, label_smoothing, PAD),
            ad.cross_entropy(ls, tgt_out, label_smoothing, PAD),
        )

    def loss_value() -> float:
        with ad.no_grad():
            return loss_tensor().item()

    for p in model.parameters():
        p.grad = None
    loss_tensor().backward()

    by_family: Dict[str, list] = {f: [] for f in FAMILIES}
    for p in model.parameters():
        by_family[family_of(p.name)].append(p)
    used_rows = np.unique(np.concatenate([src.ravel(), tgt_in.ravel()]))

    report = GradcheckReport(tolerance=tolerance)
    for k in range(n_params):
        fam = FAMILIES[k % len(FAMILIES)]
        p = by_family[fam][rng.integers(len(by_family[fam]))]
        if fam == "embedding":
            idx = (int(rng.choice(used_rows)), int(rng.integers(p.shape[1])))
        else:
            idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = float(p.grad[idx]) if p.grad is not None else 0.0
        numeric = ad.numerical_grad(loss_value, p.data, idx, h)
        report.entries.append(GradcheckEntry(p.name, idx, analytic, numeric, ad.relative_error(analytic, numeric)))
    report.seconds = time.perf_counter() - t0
    return report
