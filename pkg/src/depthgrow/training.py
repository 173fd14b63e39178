"""Two-stage training: stage 1 trains the shallow model, stage 2 only the top module."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .checkpoint import Checkpoint
from .data import PAD, Batch, batch_stream, make_batches
from .growth import GrownModel, ShallowModel, freeze_audit
from .transformer import ConfigError, Context, ModelConfig

log = logging.getLogger(__name__)

LOG_HEADER = ["step", "stage", "lr", "train_loss", "valid_loss", "valid_acc"]


class FreezeViolation(RuntimeError):
    """A frozen parameter changed during stage-2 training."""


@dataclass
class TrainConfig:
    stage: int = 1
    max_steps: int = 3000
    batch_tokens: int = 1024
    warmup_steps: int = 400
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    label_smoothing: float = 0.1
    dropout: Optional[float] = None  # None -> model config value
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 100
    train_projection: bool = False

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.max_steps < 0 or self.batch_tokens < 1:
            raise ConfigError("max_steps must be >= 0 and batch_tokens >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step: int, d_model: int, warmup: int) -> float:
    """Inverse square root decay after a linear warmup."""
    if step < 1:
        raise ad.ContractError(f"lr_schedule is defined for step >= 1, got {step}")
    return d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


class Adam:
    """Adam with bias correction over an explicit list of trainable parameters."""

    def __init__(self, params: Sequence[Parameter], betas=(0.9, 0.98), eps: float = 1e-9):
        self.params = [p for p in params if p.trainable]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise ad.NumericError(f"non-finite gradient in {p.name} at step {self.t}")
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in self.params:
            if not p.trainable:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * update).astype(p.dtype, copy=False)

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: Dict[str, np.ndarray], t: int) -> None:
        for p in self.params:
            self.m[p.name] = tensors[f"adam.m.{p.name}"].astype(p.dtype)
            self.v[p.name] = tensors[f"adam.v.{p.name}"].astype(p.dtype)
        self.t = t


# --------------------------------------------------------------------------
# evaluation


def evaluate(forward: Callable, batches: Iterable[Batch]) -> Tuple[float, float]:
    """Token-level NLL (no smoothing) and accuracy over the given batches."""
    nll, correct, count = 0.0, 0, 0
    with ad.no_grad():
        for b in batches:
            logits = forward(b.src, b.tgt_in).data
            n = b.n_tokens
            nll += ad.cross_entropy(ad.Tensor(logits), b.tgt_out, 0.0, PAD).item() * n
            keep = b.tgt_out != PAD
            correct += int((logits.argmax(-1)[keep] == b.tgt_out[keep]).sum())
            count += n
    if count == 0:
        return float("nan"), float("nan")
    return nll / count, correct / count


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: List[dict]
    seconds: float


class CsvLog:
    def __init__(self, path: Optional[Path], append: bool = False):
        self.path = Path(path) if path else None
        if self.path and not (append and self.path.exists()):
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(LOG_HEADER)

    def write(self, row: dict) -> None:
        if not self.path:
            return
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row[k]) for k in LOG_HEADER])


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if np.isnan(x) else f"{x:.6g}"
    return str(x)


def _run(
    model,
    params: List[Parameter],
    loss_fn: Callable[[Batch, Context], ad.Tensor],
    eval_fn: Callable,
    train_data,
    valid_batches: Optional[List[Batch]],
    cfg: TrainConfig,
    dropout: float,
    make_checkpoint: Callable[[int, Adam], Checkpoint],
    out_dir: Optional[Path],
    log_path: Optional[Path],
    start_step: int = 0,
    optimizer: Optional[Adam] = None,
    on_checkpoint: Optional[Callable[[int], None]] = None,
) -> TrainResult:
    t0 = time.perf_counter()
    opt = optimizer or Adam(params, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    stream = batch_stream(train_data, cfg.batch_tokens, seed=cfg.seed)
    for _ in range(start_step):
        next(stream)
    logger = CsvLog(log_path, append=start_step > 0)
    history: List[dict] = []
    window: List[float] = []
    d_model = model.cfg.d_model
    lr = float("nan")
    for step in range(start_step + 1, cfg.max_steps + 1):
        batch = next(stream)
        ctx = Context(training=True, p=dropout, seed=cfg.seed, step=step)
        opt.zero_grad()
        loss = loss_fn(batch, ctx)
        value = loss.item()
        if not np.isfinite(value):
            raise ad.NumericError(f"training loss is {value} at step {step}")
        loss.backward()
        lr = cfg.lr_scale * lr_schedule(step, d_model, cfg.warmup_steps)
        opt.step(lr)
        window.append(value)
        last = step == cfg.max_steps
        if step % cfg.log_every == 0 or last:
            vloss, vacc = eval_fn(valid_batches) if valid_batches else (float("nan"), float("nan"))
            row = {
                "step": step,
                "stage": cfg.stage,
                "lr": lr,
                "train_loss": float(np.mean(window)),
                "valid_loss": vloss,
                "valid_acc": vacc,
            }
            window = []
            history.append(row)
            logger.write(row)
            log.info("stage %d step %d lr %.3g loss %.4f valid %.4f acc %.4f", cfg.stage, step, lr, row["train_loss"], vloss, vacc)
        if out_dir and (step % cfg.checkpoint_every == 0 or last):
            if on_checkpoint:
                on_checkpoint(step)
            make_checkpoint(step, opt).save(out_dir / f"stage{cfg.stage}_step{step:06d}.dgnm")
    if on_checkpoint:
        on_checkpoint(cfg.max_steps)
    ckpt = make_checkpoint(max(cfg.max_steps, start_step), opt)
    if out_dir:
        ckpt.save(out_dir / f"stage{cfg.stage}_last.dgnm")
    return TrainResult(ckpt, history, time.perf_counter() - t0)


def _with_optimizer(ckpt: Checkpoint, opt: Adam) -> Checkpoint:
    for name, arr in opt.state_tensors().items():
        ckpt.tensors[name] = arr.copy()
        ckpt.trainable[name] = False
        ckpt.groups[name] = "optim"
    ckpt.extra["adam_t"] = opt.t
    return ckpt


def _restore_optimizer(opt: Adam, ckpt: Checkpoint) -> None:
    if "adam_t" in ckpt.extra:
        opt.load_state(ckpt.tensors, ckpt.extra["adam_t"])


def train_stage1(
    model_cfg: ModelConfig,
    train_data,
    train_cfg: TrainConfig,
    valid_data=None,
    out_dir=None,
    log_path=None,
    resume: Optional[Checkpoint] = None,
    extra: Optional[dict] = None,
    model: Optional[ShallowModel] = None,
) -> TrainResult:
    """Train the shallow model end to end.

    ``train_data``/``valid_data`` are encoded (src ids, tgt ids) pairs.
    Passing ``model`` trains that model instead of a fresh one (used for the
    direct-stacking baselines).
    """
    if model is None:
        model = ShallowModel.from_checkpoint(resume) if resume else ShallowModel(model_cfg, seed=train_cfg.seed)
    dropout = model_cfg.dropout if train_cfg.dropout is None else train_cfg.dropout
    valid = make_batches(valid_data, train_cfg.batch_tokens, shuffle=False) if valid_data else None
    opt = Adam(model.parameters(), (train_cfg.beta1, train_cfg.beta2), train_cfg.adam_eps)
    start = 0
    if resume:
        _restore_optimizer(opt, resume)
        start = resume.step

    def loss_fn(b: Batch, ctx: Context):
        return ad.cross_entropy(model.forward(b.src, b.tgt_in, ctx), b.tgt_out, train_cfg.label_smoothing, PAD)

    def eval_fn(batches):
        return evaluate(model.forward, batches)

    def make_ckpt(step, o):
        return _with_optimizer(model.to_checkpoint(stage=1, step=step, extra=extra), o)

    return _run(
        model, model.parameters(), loss_fn, eval_fn, train_data, valid, train_cfg, dropout,
        make_ckpt, Path(out_dir) if out_dir else None, Path(log_path) if log_path else None,
        start_step=start, optimizer=opt,
    )


def train_stage2(
    grown: GrownModel,
    train_data,
    train_cfg: TrainConfig,
    valid_data=None,
    out_dir=None,
    log_path=None,
    resume: Optional[Checkpoint] = None,
    extra: Optional[dict] = None,
) -> TrainResult:
    """Optimise only the trainable (top-module) parameters against the deep loss."""
    dropout = grown.cfg.dropout if train_cfg.dropout is None else train_cfg.dropout
    valid = make_batches(valid_data, train_cfg.batch_tokens, shuffle=False) if valid_data else None
    opt = Adam(grown.trainable_parameters(), (train_cfg.beta1, train_cfg.beta2), train_cfg.adam_eps)
    start = 0
    if resume:
        _restore_optimizer(opt, resume)
        start = resume.step

    def loss_fn(b: Batch, ctx: Context):
        return ad.cross_entropy(grown.forward_netD(b.src, b.tgt_in, ctx), b.tgt_out, train_cfg.label_smoothing, PAD)

    def eval_fn(batches):
        return evaluate(grown.forward_netD, batches)

    def audit(step):
        report = freeze_audit(grown)
        if not report.clean:
            raise FreezeViolation(f"frozen parameters changed by step {step}: {report.violations}")

    def make_ckpt(step, o):
        return _with_optimizer(grown.to_checkpoint(stage=2, step=step, extra=extra), o)

    return _run(
        grown, grown.trainable_parameters(), loss_fn, eval_fn, train_data, valid, train_cfg, dropout,
        make_ckpt, Path(out_dir) if out_dir else None, Path(log_path) if log_path else None,
        start_step=start, optimizer=opt, on_checkpoint=audit,
    )
