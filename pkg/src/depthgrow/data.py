"""Vocabulary, tokenization, synthetic tasks and token-count batching."""

from __future__ import annotations

import collections
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")

Pair = Tuple[List[str], List[str]]


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class Vocab:
    """Token <-> id bijection with the four reserved ids first."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: List[str] = list(SPECIALS)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok in self.stoi:
                raise DataError(f"duplicate vocabulary entry {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip_specials: bool = True) -> List[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_specials and i in (PAD, BOS):
                continue
            if strip_specials and i == EOS:
                break
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:4]) != SPECIALS:
            raise DataError(f"{path}: vocab file must start with {SPECIALS}")
        return cls(lines[4:])

    @classmethod
    def for_synthetic(cls, vocab_size: int) -> "Vocab":
        """Vocab whose content tokens are the strings 'w4' .. 'w{V-1}'."""
        return cls(f"w{i}" for i in range(len(SPECIALS), vocab_size))


def tokenize(line: str, mode: str = "whitespace") -> List[str]:
    if mode == "whitespace":
        return line.split()
    if mode == "char":
        return list(line)
    raise ValueError(f"unknown tokenizer mode {mode!r}")


def detokenize(tokens: Sequence[str], mode: str = "whitespace") -> str:
    if mode == "whitespace":
        return " ".join(tokens)
    if mode == "char":
        return "".join(tokens)
    raise ValueError(f"unknown tokenizer mode {mode!r}")


def build_vocab(corpus: Iterable[Sequence[str]], max_size: Optional[int] = None, min_freq: int = 1) -> Vocab:
    """Frequency-ranked vocab, ties broken lexicographically.

    ``max_size`` counts content tokens only (the reserved ids come on top).
    """
    counts = collections.Counter(t for sent in corpus for t in sent if t not in SPECIALS)
    ranked = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[:max_size]
    return Vocab(ranked)


def load_parallel_corpus(src_path, tgt_path, mode: str = "whitespace") -> List[Pair]:
    def read(path):
        raw = Path(path).read_bytes().decode("utf-8")
        raw = raw.replace("\r\n", "\n")
        lines = raw.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return lines

    src, tgt = read(src_path), read(tgt_path)
    if len(src) != len(tgt):
        raise DataError(f"line count mismatch: {src_path} has {len(src)}, {tgt_path} has {len(tgt)}")
    return [(tokenize(s, mode), tokenize(t, mode)) for s, t in zip(src, tgt)]


# --------------------------------------------------------------------------
# synthetic tasks

TASKS = ("copy", "reverse", "sort", "noisy-copy")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str = "copy"
    vocab_size: int = 16
    min_len: int = 1
    max_len: int = 10
    p_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task {self.kind!r}; expected one of {TASKS}")
        if self.vocab_size < len(SPECIALS) + 2:
            raise ValueError("synthetic tasks need at least two content tokens")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if not 0.0 <= self.p_noise < 1.0:
            raise ValueError("p_noise must lie in [0, 1)")


def gen_synthetic(spec: SyntheticTaskSpec, n: int) -> List[Pair]:
    """``n`` (source, target) token pairs, bit-reproducible for a given task and seed.

    noisy-copy replaces each target token, with probability ``p_noise``, by a
    different content token drawn uniformly.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, TASKS.index(spec.kind)]))
    lo, hi = len(SPECIALS), spec.vocab_size
    pairs = []
    for _ in range(n):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        src = rng.integers(lo, hi, size=length)
        if spec.kind == "reverse":
            tgt = src[::-1].copy()
        elif spec.kind == "sort":
            tgt = np.sort(src)
        else:
            tgt = src.copy()
        if spec.kind == "noisy-copy":
            hit = rng.random(length) < spec.p_noise
            # shift by 1..(n_content-1) so the replacement always differs
            shift = rng.integers(1, hi - lo, size=length)
            tgt = np.where(hit, lo + (tgt - lo + shift) % (hi - lo), tgt)
        pairs.append(([f"w{i}" for i in src], [f"w{i}" for i in tgt]))
    return pairs


# --------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    src: np.ndarray  # [B, S]
    tgt_in: np.ndarray  # [B, T], BOS-prefixed
    tgt_out: np.ndarray  # [B, T], EOS-suffixed
    index: np.ndarray  # row -> position in the original pair list

    @property
    def src_pad(self) -> np.ndarray:
        return self.src == PAD

    @property
    def tgt_pad(self) -> np.ndarray:
        return self.tgt_out == PAD

    @property
    def n_tokens(self) -> int:
        return int((self.tgt_out != PAD).sum())


def encode_pairs(pairs: Sequence[Pair], vocab: Vocab) -> List[Tuple[List[int], List[int]]]:
    return [(vocab.encode(s), vocab.encode(t)) for s, t in pairs]


def collate(encoded: Sequence[Tuple[Sequence[int], Sequence[int]]], index: Sequence[int]) -> Batch:
    B = len(index)
    S = max(max(len(encoded[i][0]) for i in index), 1)
    T = max(len(encoded[i][1]) for i in index) + 1
    src = np.full((B, S), PAD, dtype=np.int64)
    tin = np.full((B, T), PAD, dtype=np.int64)
    tout = np.full((B, T), PAD, dtype=np.int64)
    for row, i in enumerate(index):
        s, t = encoded[i]
        src[row, : len(s)] = s
        tin[row, 0] = BOS
        tin[row, 1 : len(t) + 1] = t
        tout[row, : len(t)] = t
        tout[row, len(t)] = EOS
    return Batch(src, tin, tout, np.asarray(index, dtype=np.int64))


def make_batches(
    encoded: Sequence[Tuple[Sequence[int], Sequence[int]]],
    batch_tokens: int,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
    bucket_width: int = 8,
) -> List[Batch]:
    """One epoch of length-bucketed batches holding at most ~batch_tokens tokens.

    Token cost of a batch is rows * max(padded src len, padded tgt len).
    Every pair lands in exactly one batch.
    """
    if not encoded:
        return []
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0xBA7C]))
    order = rng.permutation(len(encoded)) if shuffle else np.arange(len(encoded))
    buckets: dict = collections.defaultdict(list)
    for i in order:
        s, t = encoded[i]
        width = max(len(s), len(t) + 1)
        buckets[(width - 1) // bucket_width].append(int(i))
    batches = []
    for key in sorted(buckets):
        members = buckets[key]
        members.sort(key=lambda i: max(len(encoded[i][0]), len(encoded[i][1]) + 1))
        cur: List[int] = []
        cur_w = 0
        for i in members:
            w = max(len(encoded[i][0]), len(encoded[i][1]) + 1)
            if cur and (len(cur) + 1) * max(cur_w, w) > batch_tokens:
                batches.append(collate(encoded, cur))
                cur, cur_w = [], 0
            cur.append(i)
            cur_w = max(cur_w, w)
        if cur:
            batches.append(collate(encoded, cur))
    if shuffle:
        batches = [batches[j] for j in rng.permutation(len(batches))]
    return batches


def batch_stream(encoded, batch_tokens: int, seed: int = 0) -> Iterator[Batch]:
    """Endless deterministic stream, cycling epochs."""
    epoch = 0
    while True:
        batches = make_batches(encoded, batch_tokens, seed=seed, epoch=epoch)
        if not batches:
            raise DataError("no training data")
        yield from batches
        epoch += 1
