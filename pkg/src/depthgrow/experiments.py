"""Data preparation shared by the CLI, plus the desk-scale depth sweeps."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

from .checkpoint import Checkpoint
from .config import RunConfig
from .data import (
    DataError,
    SyntheticTaskSpec,
    Vocab,
    build_vocab,
    detokenize,
    encode_pairs,
    gen_synthetic,
    load_parallel_corpus,
    make_batches,
)
from .decoding import ShallowView, DeepView, decode_corpus, rerank_corpus, strip
from .growth import ShallowModel, grow, grow_direct
from .metrics import corpus_bleu
from .training import TrainConfig, evaluate, train_stage1, train_stage2

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    vocab: Vocab
    train: list  # encoded pairs
    valid: list
    test: list
    test_refs: List[List[str]]


def task_spec(cfg: RunConfig, seed_offset: int = 0) -> SyntheticTaskSpec:
    d = cfg.data
    return SyntheticTaskSpec(d.task, cfg.model.vocab_size, d.min_len, d.max_len, d.p_noise, d.seed + seed_offset)


def prepare_data(cfg: RunConfig, vocab: Optional[Vocab] = None) -> Dataset:
    """Synthetic splits come from distinct seeds; corpus splits from files."""
    d = cfg.data
    if d.task:
        vocab = vocab or Vocab.for_synthetic(cfg.model.vocab_size)
        train = gen_synthetic(task_spec(cfg, 0), d.n_train)
        valid = gen_synthetic(task_spec(cfg, 1_000_003), d.n_valid)
        test = gen_synthetic(task_spec(cfg, 2_000_003), d.n_test)
    else:
        if not (d.train_src and d.train_tgt):
            raise DataError("data.task is null but data.train_src/train_tgt are not set")
        train = load_parallel_corpus(d.train_src, d.train_tgt, d.tokenizer)
        valid = load_parallel_corpus(d.valid_src, d.valid_tgt, d.tokenizer) if d.valid_src else []
        test = valid
        dropped = sum(1 for s, _ in train if not s)
        if dropped:
            log.warning("dropping %d training pairs with an empty source", dropped)
            train = [p for p in train if p[0]]
        if vocab is None:
            vocab = build_vocab((t for pair in train for t in pair), cfg.model.vocab_size - 4, d.min_freq)
    if len(vocab) > cfg.model.vocab_size:
        raise DataError(f"vocabulary has {len(vocab)} entries but model.vocab_size is {cfg.model.vocab_size}")
    too_long = max((max(len(s), len(t) + 1) for s, t in train), default=0)
    if too_long > cfg.model.max_len:
        raise DataError(f"training sequence of length {too_long} exceeds model.max_len={cfg.model.max_len}")
    return Dataset(vocab, encode_pairs(train, vocab), encode_pairs(valid, vocab), encode_pairs(test, vocab), [t for _, t in test])


def bleu_of(hyps_ids: Sequence[Sequence[int]], refs: Sequence[Sequence[str]], vocab: Vocab) -> float:
    return corpus_bleu([vocab.decode(strip(h)) for h in hyps_ids], list(refs))


def _eval_row(method: str, depth: int, model, view, data: Dataset, cfg: RunConfig, n_eval: int, seconds: float, forward=None):
    valid = make_batches(data.valid, cfg.train.batch_tokens, shuffle=False)
    vloss, vacc = evaluate(forward or model.forward, valid)
    srcs = [s for s, _ in data.test[:n_eval]]
    hyps = [h.tokens for h in decode_corpus(view, srcs, beam=1)]
    return {
        "method": method,
        "depth": depth,
        "valid_loss": round(vloss, 6),
        "valid_acc": round(vacc, 6),
        "bleu": round(bleu_of(hyps, data.test_refs[:n_eval], data.vocab), 4),
        "train_seconds": round(seconds, 2),
    }


SWEEP_HEADER = ["method", "depth", "valid_loss", "valid_acc", "bleu", "train_seconds"]


def sweep_depth(cfg: RunConfig, depths: Sequence[int], n_eval: int = 100) -> List[dict]:
    """Direct-stacked models of each depth trained from scratch with one budget."""
    data = prepare_data(cfg)
    rows = []
    for depth in depths:
        model = ShallowModel(cfg.model, seed=cfg.train.seed, n_blocks=depth)
        res = train_stage1(cfg.model, data.train, cfg.train, model=model)
        rows.append(_eval_row("ds-scratch", depth, model, ShallowView(model), data, cfg, n_eval, res.seconds))
        log.info("depth %d: %s", depth, rows[-1])
    return rows


def sweep_grow(cfg: RunConfig, n_eval: int = 100) -> List[dict]:
    """Shallow baseline vs direct stacking (scratch / grown) vs the grown model."""
    data = prepare_data(cfg)
    N, M = cfg.model.n_bottom_blocks, cfg.model.n_top_blocks
    rows = []
    shallow = ShallowModel(cfg.model, seed=cfg.train.seed)
    res = train_stage1(cfg.model, data.train, cfg.train, model=shallow)
    base_ckpt: Checkpoint = res.checkpoint
    rows.append(_eval_row("baseline", N, shallow, ShallowView(shallow), data, cfg, n_eval, res.seconds))

    deep = ShallowModel(cfg.model, seed=cfg.train.seed, n_blocks=N + M)
    res = train_stage1(cfg.model, data.train, cfg.train, model=deep)
    rows.append(_eval_row("ds-scratch", N + M, deep, ShallowView(deep), data, cfg, n_eval, res.seconds))

    stacked = grow_direct(base_ckpt, M, init_seed=cfg.train.seed + 1)
    res = train_stage1(cfg.model, data.train, cfg.train, model=stacked)
    rows.append(_eval_row("ds-grow", N + M, stacked, ShallowView(stacked), data, cfg, n_eval, res.seconds))

    grown = grow(base_ckpt, M, init_seed=cfg.train.seed + 1)
    res = train_stage2(grown, data.train, TrainConfig.from_dict({**cfg.train.to_dict(), "stage": 2}))
    rows.append(_eval_row("grown-netD", N + M, grown, DeepView(grown), data, cfg, n_eval, res.seconds, grown.forward_netD))
    t0 = time.perf_counter()
    picks = rerank_corpus(grown, [s for s, _ in data.test[:n_eval]], beam=cfg.decode.beam, cfg=cfg.decode.rerank())
    row = dict(rows[-1], method="grown-rerank", train_seconds=round(res.seconds, 2))
    row["bleu"] = round(bleu_of([c.tokens for c in picks], data.test_refs[:n_eval], data.vocab), 4)
    log.info("rerank decode took %.1fs", time.perf_counter() - t0)
    rows.append(row)
    return rows


def write_csv(rows: List[dict], path, header=SWEEP_HEADER) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def hypotheses_to_lines(ids: Sequence[Sequence[int]], vocab: Vocab, mode: str) -> List[str]:
    return [detokenize(vocab.decode(strip(h)), mode) for h in ids]


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
