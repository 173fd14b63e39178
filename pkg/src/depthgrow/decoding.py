"""Greedy / beam search over a model view, and deep-shallow pooled reranking.

A *view* turns a source sentence into a decoding state and scores batches of
equal-length prefixes::

    state = view.start(src_ids)
    logp = view.logprobs(state, prefixes)   # [k, t, V] log-probabilities

Views exist for the shallow path, the deep path, a two-model ensemble, and
arbitrary callables (handy for hand-built toy distributions).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .data import BOS, EOS, PAD
from .growth import GrownModel

Tokens = Tuple[int, ...]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64) - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class ShallowView:
    """The bottom encoder/decoder alone (works on shallow or grown models)."""

    name = "netS"

    def __init__(self, model):
        self.model = model.bottom if isinstance(model, GrownModel) else model
        self.vocab_size = self.model.cfg.vocab_size
        self.max_positions = self.model.cfg.max_len

    def start(self, src: np.ndarray):
        src = np.asarray(src, dtype=np.int64)[None, :]
        with ad.no_grad():
            return src, self.model.encode(src)

    def logprobs(self, state, prefixes: np.ndarray) -> np.ndarray:
        src, h1 = state
        with ad.no_grad():
            _, logits = self.model.decode(prefixes, h1, src)
        return _log_softmax(logits.data)


class DeepView:
    """The full grown network (both modules, shared projection)."""

    name = "netD"

    def __init__(self, model: GrownModel):
        self.model = model
        self.vocab_size = model.cfg.vocab_size
        self.max_positions = model.cfg.max_len

    def start(self, src: np.ndarray):
        src = np.asarray(src, dtype=np.int64)[None, :]
        with ad.no_grad():
            return src, self.model.encode(src)

    def logprobs(self, state, prefixes: np.ndarray) -> np.ndarray:
        src, hs = state
        with ad.no_grad():
            s1, _ = self.model.decode_shallow(prefixes, hs.h1, src)
            _, logits = self.model.decode_deep(prefixes, s1, hs.h2, src)
        return _log_softmax(logits.data)


class EnsembleView:
    """Per-step average of two views' log-probabilities (not renormalised)."""

    name = "ensemble"

    def __init__(self, a, b):
        if a.vocab_size != b.vocab_size:
            raise ValueError("ensemble members disagree on vocabulary size")
        self.a, self.b = a, b
        self.vocab_size = a.vocab_size
        caps = [v.max_positions for v in (a, b) if getattr(v, "max_positions", None)]
        self.max_positions = min(caps) if caps else None

    def start(self, src):
        return self.a.start(src), self.b.start(src)

    def logprobs(self, state, prefixes):
        return 0.5 * (self.a.logprobs(state[0], prefixes) + self.b.logprobs(state[1], prefixes))


class FunctionView:
    """Wraps ``fn(src, prefix_tuple) -> logits[V]`` as a view."""

    name = "fn"

    def __init__(self, fn: Callable[[Sequence[int], Tokens], np.ndarray], vocab_size: int):
        self.fn = fn
        self.vocab_size = vocab_size

    def start(self, src):
        return tuple(int(t) for t in src)

    def logprobs(self, state, prefixes):
        prefixes = np.atleast_2d(prefixes)
        k, T = prefixes.shape
        out = np.empty((k, T, self.vocab_size))
        for i in range(k):
            for t in range(T):
                out[i, t] = _log_softmax(np.asarray(self.fn(state, tuple(int(x) for x in prefixes[i, : t + 1])), dtype=np.float64))
        return out


def view_for(model, mode: str):
    if mode == "shallow":
        return ShallowView(model)
    if mode == "deep":
        if not isinstance(model, GrownModel):
            raise ValueError("deep decoding needs a grown model")
        return DeepView(model)
    raise ValueError(f"unknown view {mode!r}")


# --------------------------------------------------------------------------
# search


@dataclass
class BeamHypothesis:
    tokens: Tokens  # BOS ... (EOS)
    logprob: float
    finished: bool = True

    @property
    def length(self) -> int:
        return len(self.tokens) - 1


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 8


def _resolve_max_len(view, src_len: int, max_len: Optional[int]) -> int:
    # the last decoder input holds BOS plus max_len - 1 tokens, so the
    # positional table bounds the number of generated tokens
    n = max_len or default_max_len(src_len)
    cap = getattr(view, "max_positions", None)
    return min(n, cap) if cap else n


def _check_src(src) -> np.ndarray:
    src = np.asarray(src, dtype=np.int64).reshape(-1)
    if src.size == 0:
        raise ad.ContractError("cannot decode an empty source")
    return src


def greedy_decode(view, src, max_len: Optional[int] = None, bos: int = BOS, eos: int = EOS, banned=(PAD, BOS)) -> BeamHypothesis:
    src = _check_src(src)
    max_len = _resolve_max_len(view, len(src), max_len)
    state = view.start(src)
    tokens = [bos]
    total = 0.0
    for _ in range(max_len):
        lp = view.logprobs(state, np.asarray([tokens]))[0, -1].copy()
        lp[list(banned)] = -np.inf
        tok = int(np.argmax(lp))
        total += float(lp[tok])
        tokens.append(tok)
        if tok == eos:
            break
    return BeamHypothesis(tuple(tokens), total, True)


def _rank_key(h: BeamHypothesis, length_penalty: float) -> float:
    if length_penalty == 0.0:
        return h.logprob
    return h.logprob / (h.length**length_penalty)


def beam_search(
    view,
    src,
    beam: int = 5,
    max_len: Optional[int] = None,
    length_penalty: float = 0.0,
    bos: int = BOS,
    eos: int = EOS,
    banned=(PAD, BOS),
) -> List[BeamHypothesis]:
    """Up to ``beam`` finished hypotheses, best first.

    Hypotheses reaching ``max_len`` generated tokens without EOS are kept as
    finished (truncated). Without a length penalty the search stops once
    ``beam`` hypotheses are finished and no live prefix can still beat the
    worst of them.
    """
    if beam < 1:
        raise ad.ContractError("beam must be >= 1")
    src = _check_src(src)
    max_len = _resolve_max_len(view, len(src), max_len)
    state = view.start(src)
    alive = [BeamHypothesis((bos,), 0.0, False)]
    finished: List[BeamHypothesis] = []
    V = view.vocab_size
    for t in range(1, max_len + 1):
        prefixes = np.asarray([h.tokens for h in alive], dtype=np.int64)
        lp = view.logprobs(state, prefixes)[:, -1, :].copy()
        lp[:, list(banned)] = -np.inf
        scores = np.asarray([h.logprob for h in alive])[:, None] + lp
        flat = scores.reshape(-1)
        order = np.argsort(-flat, kind="stable")
        next_alive: List[BeamHypothesis] = []
        for rank, idx in enumerate(order):
            score = float(flat[idx])
            if score == -np.inf:
                break
            if rank >= beam and len(next_alive) >= beam:
                break
            i, tok = divmod(int(idx), V)
            seq = alive[i].tokens + (tok,)
            if tok == eos or t == max_len:
                if rank < beam:
                    finished.append(BeamHypothesis(seq, score, True))
            elif len(next_alive) < beam:
                next_alive.append(BeamHypothesis(seq, score, False))
        alive = next_alive
        if not alive:
            break
        if len(finished) >= beam:
            if length_penalty != 0.0:
                break
            kth = sorted((h.logprob for h in finished), reverse=True)[beam - 1]
            if max(h.logprob for h in alive) <= kth:
                break
    finished.sort(key=lambda h: (-_rank_key(h, length_penalty), h.tokens))
    return finished[:beam]


def score_sequences(view, src, sequences: Sequence[Tokens]) -> np.ndarray:
    """Teacher-forced total log-probability of each BOS-prefixed sequence."""
    src = _check_src(src)
    state = view.start(src)
    lengths = [len(s) for s in sequences]
    T = max(lengths)
    inp = np.full((len(sequences), T - 1), PAD, dtype=np.int64)
    out = np.full((len(sequences), T - 1), PAD, dtype=np.int64)
    for i, s in enumerate(sequences):
        inp[i, : len(s) - 1] = s[:-1]
        out[i, : len(s) - 1] = s[1:]
    lp = view.logprobs(state, inp)
    totals = np.zeros(len(sequences))
    for i, n in enumerate(lengths):
        totals[i] = lp[i, np.arange(n - 1), out[i, : n - 1]].sum()
    return totals


def score_sequence(view, src, tokens: Tokens) -> float:
    return float(score_sequences(view, src, [tuple(tokens)])[0])


# --------------------------------------------------------------------------
# deep-shallow reranking


@dataclass
class Candidate:
    tokens: Tokens
    source: str  # netS | netD | both
    score_s: float = float("nan")
    score_d: float = float("nan")
    rerank: float = float("nan")


@dataclass
class RerankPool:
    candidates: List[Candidate] = field(default_factory=list)

    def add(self, tokens: Tokens, provenance: str) -> None:
        for c in self.candidates:
            if c.tokens == tokens:
                if c.source != provenance:
                    c.source = "both"
                return
        self.candidates.append(Candidate(tokens, provenance))


@dataclass
class RerankConfig:
    weight_s: float = 0.5
    weight_d: float = 0.5
    normalize: bool = True


def rerank_score(score_s: float, score_d: float, length: int, cfg: RerankConfig = RerankConfig()) -> float:
    if cfg.normalize:
        score_s, score_d = score_s / length, score_d / length
    return cfg.weight_s * score_s + cfg.weight_d * score_d


def select(pool: RerankPool, cfg: RerankConfig = RerankConfig()) -> Candidate:
    """Highest rerank score; ties go to the higher deep score, then the smaller sequence."""
    if not pool.candidates:
        raise ad.ContractError("empty rerank pool")
    for c in pool.candidates:
        c.rerank = rerank_score(c.score_s, c.score_d, len(c.tokens) - 1, cfg)
    return min(pool.candidates, key=lambda c: (-c.rerank, -c.score_d, c.tokens))


def rerank_decode(
    view_s,
    view_d,
    src,
    beam: int = 5,
    max_len: Optional[int] = None,
    cfg: RerankConfig = RerankConfig(),
) -> Tuple[Candidate, RerankPool]:
    pool = RerankPool()
    for view, tag in ((view_s, "netS"), (view_d, "netD")):
        for h in beam_search(view, src, beam, max_len):
            pool.add(h.tokens, tag)
    seqs = [c.tokens for c in pool.candidates]
    for c, s, d in zip(pool.candidates, score_sequences(view_s, src, seqs), score_sequences(view_d, src, seqs)):
        c.score_s, c.score_d = float(s), float(d)
    return select(pool, cfg), pool


def deep_shallow_decode(
    model: GrownModel, src, beam: int = 5, max_len: Optional[int] = None, cfg: RerankConfig = RerankConfig()
) -> Tokens:
    best, _ = rerank_decode(ShallowView(model), DeepView(model), src, beam, max_len, cfg)
    return best.tokens


def strip(tokens: Sequence[int]) -> List[int]:
    """Drop BOS and everything from EOS on."""
    out = []
    for t in tokens[1:] if tokens and tokens[0] == BOS else tokens:
        if t == EOS:
            break
        out.append(int(t))
    return out


def decode_corpus(
    view, sources: Sequence[Sequence[int]], beam: int = 5, max_len: Optional[int] = None
) -> List[BeamHypothesis]:
    return [beam_search(view, src, beam, max_len)[0] for src in sources]


def rerank_corpus(
    model: GrownModel, sources: Sequence[Sequence[int]], beam: int = 5, max_len: Optional[int] = None,
    cfg: RerankConfig = RerankConfig(),
) -> List[Candidate]:
    vs, vd = ShallowView(model), DeepView(model)
    return [rerank_decode(vs, vd, src, beam, max_len, cfg)[0] for src in sources]
