"""``depthgrow`` command line: train -> grow -> train-top -> decode -> eval-bleu.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure
(NaN, failed gradcheck), 5 freeze-audit violation.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import autodiff as ad
from .checkpoint import Checkpoint, CheckpointError
from .config import RunConfig, load_config
from .data import DataError, Vocab, detokenize, tokenize
from .decoding import (
    DeepView,
    EnsembleView,
    ShallowView,
    beam_search,
    rerank_decode,
    score_sequences,
    strip,
)
from .experiments import ensure_dir, prepare_data, sweep_depth, sweep_grow, write_csv
from .growth import GrownModel, ShallowModel, freeze_audit, grow
from .metrics import corpus_stats
from .training import FreezeViolation, TrainConfig, train_stage1, train_stage2
from .transformer import ConfigError, LengthError

log = logging.getLogger("depthgrow")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_FREEZE = 0, 2, 3, 4, 5


class NumericFailure(RuntimeError):
    pass


def _deterministic(enabled: bool):
    if not enabled:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def _refuse_clobber(paths, overwrite: bool) -> None:
    if overwrite:
        return
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing:
        raise FileExistsError(f"refusing to overwrite {', '.join(existing)} (pass --overwrite)")


def _config(args) -> RunConfig:
    return load_config(
        getattr(args, "config", None),
        getattr(args, "set", None) or [],
        getattr(args, "seed", None),
        getattr(args, "deterministic", None),
    )


def _vocab_extra(vocab: Vocab, cfg: RunConfig) -> dict:
    return {"vocab": vocab.itos[4:], "tokenizer": cfg.data.tokenizer}


def _ckpt_vocab(ckpt: Checkpoint) -> Vocab:
    if "vocab" not in ckpt.extra:
        raise CheckpointError("checkpoint carries no vocabulary")
    return Vocab(ckpt.extra["vocab"])


def load_model(ckpt: Checkpoint):
    if ckpt.extra.get("kind") == "grown":
        return GrownModel.from_checkpoint(ckpt)
    return ShallowModel.from_checkpoint(ckpt)


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _config(args)
    out = ensure_dir(args.out)
    last = out / "stage1_last.dgnm"
    resume = Checkpoint.load(args.resume) if args.resume else None
    if resume is None:
        _refuse_clobber([last, out / "train_log.csv"], args.overwrite)
    train_cfg = TrainConfig.from_dict({**cfg.train.to_dict(), "stage": 1})
    vocab = _ckpt_vocab(resume) if resume else None
    data = prepare_data(cfg, vocab)
    (out / "config.yaml").write_text(cfg.dump(), encoding="utf-8")
    data.vocab.save(out / "vocab.txt")
    with _deterministic(cfg.deterministic):
        res = train_stage1(
            cfg.model, data.train, train_cfg, valid_data=data.valid, out_dir=out,
            log_path=out / "train_log.csv", resume=resume, extra=_vocab_extra(data.vocab, cfg),
        )
    print(f"stage 1 done: step {res.checkpoint.step}, {res.seconds:.1f}s -> {last}")
    return EXIT_OK


def cmd_grow(args) -> int:
    _refuse_clobber([args.out], args.overwrite)
    shallow = Checkpoint.load(args.checkpoint)
    if shallow.extra.get("kind") != "shallow":
        raise CheckpointError(f"{args.checkpoint} is not a stage-1 (shallow) checkpoint")
    requested = _config(args).model if (args.config or args.set) else None
    seed = args.seed if args.seed is not None else 0
    model = grow(shallow, args.top_blocks, init_seed=seed, cfg=requested, train_projection=args.train_projection)
    keep = {k: v for k, v in shallow.extra.items() if k in ("vocab", "tokenizer")}
    model.to_checkpoint(stage=2, step=0, extra=keep).save(args.out)
    report = freeze_audit(model)
    print(f"grown model: {len(report.frozen)} frozen, {len(report.trainable)} trainable tensors -> {args.out}")
    return EXIT_OK


def cmd_train_top(args) -> int:
    cfg = _config(args)
    out = ensure_dir(args.out)
    source = Checkpoint.load(args.resume or args.checkpoint)
    grown = GrownModel.from_checkpoint(source)
    if not args.resume:
        _refuse_clobber([out / "stage2_last.dgnm", out / "train_top_log.csv"], args.overwrite)
    if freeze_audit(grown).violations:
        raise FreezeViolation(f"{args.checkpoint} fails the freeze audit before training")
    train_cfg = TrainConfig.from_dict({**cfg.train.to_dict(), "stage": 2})
    data = prepare_data(cfg, _ckpt_vocab(source))
    (out / "config.yaml").write_text(cfg.dump(), encoding="utf-8")
    keep = {k: v for k, v in source.extra.items() if k in ("vocab", "tokenizer")}
    with _deterministic(cfg.deterministic):
        res = train_stage2(
            grown, data.train, train_cfg, valid_data=data.valid, out_dir=out,
            log_path=out / "train_top_log.csv", resume=source if args.resume else None, extra=keep,
        )
    report = freeze_audit(grown)
    (out / "freeze_audit.json").write_text(
        json.dumps({"frozen": report.frozen, "trainable": report.trainable, "violations": report.violations}, indent=1)
    )
    if not report.clean:
        raise FreezeViolation(f"frozen parameters changed: {report.violations}")
    print(f"stage 2 done: step {res.checkpoint.step}, {res.seconds:.1f}s, freeze audit clean")
    return EXIT_OK


def _read_sources(path, vocab: Vocab, mode: str) -> List[List[int]]:
    lines = Path(path).read_bytes().decode("utf-8").replace("\r\n", "\n").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [vocab.encode(tokenize(line, mode)) for line in lines]


def _write_lines(path, lines) -> None:
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def cmd_decode(args) -> int:
    cfg = _config(args)
    sidecar = args.sidecar or (args.out + ".tsv" if args.mode == "rerank" else None)
    _refuse_clobber([p for p in (args.out, sidecar) if p], args.overwrite)
    ckpt = Checkpoint.load(args.checkpoint)
    model = load_model(ckpt)
    vocab, mode = _ckpt_vocab(ckpt), ckpt.extra.get("tokenizer", "whitespace")
    sources = _read_sources(args.input, vocab, mode)
    beam = args.beam if args.beam is not None else cfg.decode.beam
    max_len = args.max_len or cfg.decode.max_len
    if args.mode != "shallow" and not isinstance(model, GrownModel):
        raise ConfigError(f"--mode {args.mode} needs a grown checkpoint")
    hyps, rows = [], []
    with _deterministic(cfg.deterministic):
        for i, src in enumerate(sources):
            if not src:
                hyps.append([])
                rows.append(f"{i}\tnan\tnan\tnan\tnone")
                continue
            if args.mode == "rerank":
                best, _ = rerank_decode(ShallowView(model), DeepView(model), src, beam, max_len, cfg.decode.rerank())
                hyps.append(best.tokens)
                rows.append(f"{i}\t{best.score_s:.6f}\t{best.score_d:.6f}\t{best.rerank:.6f}\t{best.source}")
            else:
                view = ShallowView(model) if args.mode == "shallow" else DeepView(model)
                hyps.append(beam_search(view, src, beam, max_len, cfg.decode.length_penalty)[0].tokens)
    _write_lines(args.out, [detokenize(vocab.decode(strip(h)), mode) for h in hyps])
    if sidecar and args.mode == "rerank":
        _write_lines(sidecar, ["line_id\tnetS_score\tnetD_score\trerank_score\tsource"] + rows)
    print(f"decoded {len(sources)} lines ({args.mode}, beam {beam}) -> {args.out}")
    return EXIT_OK


def cmd_ensemble_decode(args) -> int:
    cfg = _config(args)
    sidecar = args.sidecar or args.out + ".tsv"
    _refuse_clobber([args.out, sidecar], args.overwrite)
    ckpts = [Checkpoint.load(p) for p in (args.checkpoint_a, args.checkpoint_b)]
    vocab, mode = _ckpt_vocab(ckpts[0]), ckpts[0].extra.get("tokenizer", "whitespace")
    if _ckpt_vocab(ckpts[1]) != vocab:
        raise ConfigError("ensemble members use different vocabularies")
    views = []
    for c in ckpts:
        m = load_model(c)
        views.append(DeepView(m) if isinstance(m, GrownModel) else ShallowView(m))
    ens = EnsembleView(*views)
    beam = args.beam if args.beam is not None else cfg.decode.beam
    hyps, rows = [], ["line_id\tmodel_a_score\tmodel_b_score\tensemble_score"]
    with _deterministic(cfg.deterministic):
        for i, src in enumerate(_read_sources(args.input, vocab, mode)):
            if not src:
                hyps.append([])
                rows.append(f"{i}\tnan\tnan\tnan")
                continue
            best = beam_search(ens, src, beam, args.max_len or cfg.decode.max_len)[0]
            a, b = (score_sequences(v, src, [best.tokens])[0] for v in views)
            hyps.append(best.tokens)
            rows.append(f"{i}\t{a:.6f}\t{b:.6f}\t{best.logprob:.6f}")
    _write_lines(args.out, [detokenize(vocab.decode(strip(h)), mode) for h in hyps])
    _write_lines(sidecar, rows)
    print(f"ensemble-decoded {len(hyps)} lines -> {args.out}")
    return EXIT_OK


def cmd_eval_bleu(args) -> int:
    def read(p):
        lines = Path(p).read_bytes().decode("utf-8").replace("\r\n", "\n").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return [line.split() for line in lines]

    hyps, refs = read(args.hyp), read(args.ref)
    if len(hyps) != len(refs):
        raise DataError(f"{args.hyp} has {len(hyps)} lines but {args.ref} has {len(refs)}")
    print(corpus_stats(hyps, refs).format())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck, tiny_config

    overrides = {}
    if args.config or args.set:
        m = _config(args).model
        overrides = {k: getattr(m, k) for k in ("d_model", "d_ff", "n_heads", "n_bottom_blocks", "n_top_blocks")}
    seed = args.seed if args.seed is not None else 0
    report = run_gradcheck(args.n_params, seed, tiny_config(**overrides), tolerance=args.tolerance)
    for e in report.entries:
        log.debug("%s%s analytic=%.6e numeric=%.6e rel=%.2e", e.name, e.index, e.analytic, e.numeric, e.rel_error)
    w = report.worst
    print(f"checked {len(report.entries)} entries over families {report.families} in {report.seconds:.2f}s")
    print(f"worst: {w.name}{list(w.index)} analytic={w.analytic:.6e} numeric={w.numeric:.6e} rel_err={w.rel_error:.3e}")
    print("PASS" if report.passed else f"FAIL (tolerance {report.tolerance:g})")
    if not report.passed:
        raise NumericFailure("gradient check failed")
    return EXIT_OK


def cmd_sweep_depth(args) -> int:
    cfg = _config(args)
    _refuse_clobber([args.out], args.overwrite)
    with _deterministic(cfg.deterministic):
        if args.grow:
            rows = sweep_grow(cfg, n_eval=args.n_eval)
        else:
            depths = [int(d) for d in args.depths.split(",") if d.strip()]
            if not depths or min(depths) < 1:
                raise ConfigError("--depths needs positive integers, e.g. 2,4,6")
            rows = sweep_depth(cfg, depths, n_eval=args.n_eval)
    write_csv(rows, args.out)
    print(f"wrote {len(rows)} rows -> {args.out}")
    return EXIT_OK


def cmd_audit(args) -> int:
    model = GrownModel.from_checkpoint(Checkpoint.load(args.checkpoint))
    report = freeze_audit(model)
    print(f"frozen={len(report.frozen)} trainable={len(report.trainable)} violations={report.violations}")
    if not report.clean:
        raise FreezeViolation(f"violations: {report.violations}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthgrow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML run configuration")
            p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--seed", type=int, default=None, help="overrides config seed and DEPTHGROW_SEED")
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
        if config:
            p.add_argument(
                "--deterministic", action=argparse.BooleanOptionalAction, default=None,
                help="single-threaded BLAS for bit-reproducible numbers (default on)",
            )

    p = sub.add_parser("train", help="stage 1: train the shallow model")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="continue from a stage-1 checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grow", help="freeze a stage-1 checkpoint and stack a top module")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--top-blocks", "-M", type=int, default=1)
    p.add_argument("--train-projection", action="store_true", help="let stage 2 update the shared projection")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grow)

    p = sub.add_parser("train-top", help="stage 2: train only the top module")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="continue from a stage-2 checkpoint")
    p.set_defaults(func=cmd_train_top)

    p = sub.add_parser("decode", help="beam decode with the shallow, deep or reranked network")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("shallow", "deep", "rerank"), default="rerank")
    p.add_argument("--beam", type=int, default=None, help="default 5")
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--sidecar", help="TSV of per-line scores (rerank mode; default OUT.tsv)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("ensemble-decode", help="average-logprob ensemble of two checkpoints")
    common(p)
    p.add_argument("checkpoint_a")
    p.add_argument("checkpoint_b")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--sidecar")
    p.set_defaults(func=cmd_ensemble_decode)

    p = sub.add_parser("eval-bleu", help="tokenized case-sensitive corpus BLEU")
    p.add_argument("hyp")
    p.add_argument("ref")
    p.set_defaults(func=cmd_eval_bleu)

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny 64-bit grown model")
    common(p)
    p.add_argument("--n-params", type=int, default=70)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-depth", help="train direct-stacked models of several depths")
    common(p)
    p.add_argument("--depths", default="2,4,6")
    p.add_argument("--grow", action="store_true", help="compare baseline, DS-scratch, DS-grow and the grown model")
    p.add_argument("--n-eval", type=int, default=100)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_sweep_depth)

    p = sub.add_parser("audit", help="freeze audit of a grown checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, FileExistsError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, LengthError, FileNotFoundError, UnicodeDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ad.NumericError, NumericFailure) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FreezeViolation as exc:
        print(f"freeze audit violation: {exc}", file=sys.stderr)
        return EXIT_FREEZE


if __name__ == "__main__":
    sys.exit(main())
