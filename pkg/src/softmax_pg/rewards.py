"""Sequence rewards: ROUGE-n / ROUGE-L F1, the mean ROUGE-1/2/3 main reward,
per-step reward increments and the DUP / EOS auxiliary terms.

Sequences are plain sequences of integer token ids.  The EOS id is a control
symbol: it never enters an n-gram profile, but it does receive the auxiliary
terms.  Pass ``eos_id=None`` for vocabularies without an end symbol (the
fixed-length enumeration spaces used by the oracle).
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np

PAD_ID = 0
EOS_ID = 1
UNK_ID = 2
MAX_ORDER = 3


@dataclass(frozen=True)
class RewardConfig:
    """Bang-bang weight magnitude, drop probability and auxiliary switches."""

    W: float = 10000.0
    p_drop: float = 0.4
    use_dup: bool = True
    use_eos: bool = True
    eos_id: Optional[int] = EOS_ID

    def __post_init__(self):
        if not self.W > 0:
            raise ValueError(f"W must be positive, got {self.W}")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError(f"p_drop must lie in [0, 1], got {self.p_drop}")


def content(tokens: Iterable[int], eos_id: Optional[int] = EOS_ID) -> tuple:
    if eos_id is None:
        return tuple(int(t) for t in tokens)
    return tuple(int(t) for t in tokens if t != eos_id)


def validate_sequence(tokens, vocab_size: int, t_max: Optional[int] = None,
                      eos_id: Optional[int] = EOS_ID) -> None:
    """Raise ValueError unless ``tokens`` is a well-formed sequence."""
    tokens = list(tokens)
    for tok in tokens:
        if not 0 <= tok < vocab_size:
            raise ValueError(f"token {tok} outside vocabulary of size {vocab_size}")
    if t_max is not None and len(tokens) > t_max:
        raise ValueError(f"sequence length {len(tokens)} exceeds T_max={t_max}")
    if eos_id is not None and eos_id in tokens[:-1]:
        raise ValueError("EOS may only appear as the final token")


def is_terminated(tokens: Sequence[int], eos_id: Optional[int] = EOS_ID) -> bool:
    return eos_id is not None and len(tokens) > 0 and tokens[-1] == eos_id


class NGramProfile:
    """Multisets of 1..3-grams of a token sequence."""

    __slots__ = ("counts", "length")

    def __init__(self, counts, length):
        self.counts = counts
        self.length = length

    @classmethod
    def from_tokens(cls, tokens: Sequence[int], max_order: int = MAX_ORDER):
        tokens = tuple(tokens)
        counts = tuple(
            Counter(tokens[i:i + n] for i in range(len(tokens) - n + 1))
            for n in range(1, max_order + 1)
        )
        return cls(counts, len(tokens))

    def total(self, n: int) -> int:
        return max(0, self.length - n + 1)


def _f1(overlap: int, n_cand: int, n_ref: int) -> float:
    # 2PR/(P+R) with P = o/n_cand, R = o/n_ref
    if n_cand <= 0 or n_ref <= 0 or overlap == 0:
        return 0.0
    return 2.0 * overlap / (n_cand + n_ref)


def _clipped_overlap(a: Counter, b: Counter) -> int:
    if len(a) > len(b):
        a, b = b, a
    return sum(min(c, b[g]) for g, c in a.items() if g in b)


def _reward_from_stats(overlaps, len_z: int, len_y: int) -> float:
    return _reward_cached(tuple(overlaps), len_z, len_y)


@lru_cache(maxsize=65536)
def _reward_cached(overlaps: tuple, len_z: int, len_y: int) -> float:
    total = 0.0
    for n in range(1, MAX_ORDER + 1):
        total += _f1(overlaps[n - 1], len_z - n + 1, len_y - n + 1)
    return total / MAX_ORDER


def rouge_n_f1(z, y, n: int, eos_id: Optional[int] = EOS_ID) -> float:
    """F1 of the clipped n-gram overlap; 0 if either side has no n-grams."""
    if n < 1:
        raise ValueError("n must be >= 1")
    zc, yc = content(z, eos_id), content(y, eos_id)
    pz = NGramProfile.from_tokens(zc, n)
    py = NGramProfile.from_tokens(yc, n)
    ov = _clipped_overlap(pz.counts[n - 1], py.counts[n - 1])
    return _f1(ov, pz.total(n), py.total(n))


def main_reward(z, y, eos_id: Optional[int] = EOS_ID) -> float:
    """Unweighted mean of ROUGE-1, ROUGE-2 and ROUGE-3 F1."""
    yc = content(y, eos_id)
    if not yc:
        raise ValueError("reference sequence is empty")
    zc = content(z, eos_id)
    pz = NGramProfile.from_tokens(zc)
    py = NGramProfile.from_tokens(yc)
    overlaps = [_clipped_overlap(pz.counts[i], py.counts[i]) for i in range(MAX_ORDER)]
    return _reward_from_stats(overlaps, len(zc), len(yc))


def lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for ta in a:
        cur = [0]
        for j, tb in enumerate(b):
            cur.append(prev[j] + 1 if ta == tb else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_f1(z, y, eos_id: Optional[int] = EOS_ID) -> float:
    """LCS-based F1.  Reporting only: never used as a training reward."""
    yc = content(y, eos_id)
    if not yc:
        raise ValueError("reference sequence is empty")
    zc = content(z, eos_id)
    return _f1(lcs_length(zc, yc), len(zc), len(yc))


def dup_term(prefix: Sequence[int], token: int) -> int:
    """-1 when ``token`` repeats the immediately preceding token."""
    return -1 if len(prefix) > 0 and prefix[-1] == token else 0


def eos_term(token: int, t: int, ref_len: int, eos_id: Optional[int] = EOS_ID) -> int:
    """-1 when EOS is emitted at 1-based position ``t`` < ``ref_len``."""
    if t < 1:
        raise ValueError("t is 1-based")
    return -1 if eos_id is not None and token == eos_id and t < ref_len else 0


def _combine(w: float, delta: float, dup: int, eos: int) -> float:
    return w * (delta + dup + eos)


def test_time_increment(prefix: Sequence[int], token: int, config: RewardConfig) -> float:
    if not config.use_dup:
        return 0.0
    return config.W * dup_term(prefix, token)


test_time_increment.__test__ = False  # keep pytest from collecting it


@dataclass
class IncrementRow:
    """Reward increments for every candidate next token of a fixed prefix.

    Tokens missing from ``per_token`` all share ``default_value``.
    """

    prefix_len: int
    per_token: dict = field(default_factory=dict)
    default_value: float = 0.0
    includes_aux: bool = False

    def value(self, token: int) -> float:
        return self.per_token.get(token, self.default_value)

    def dense(self, vocab_size: int) -> np.ndarray:
        row = np.full(vocab_size, self.default_value, dtype=np.float64)
        for tok, val in self.per_token.items():
            row[tok] = val
        return row


class RewardTracker:
    """Incrementally maintained reward statistics of a growing prefix.

    ``remaining[n-1][g]`` is how many more times the n-gram ``g`` can match
    the reference before clipping, and ``available`` holds the reference words
    whose unigram can still match.  Appending a token is O(1); an increment
    row costs O(number of word types in the reference).
    """

    def __init__(self, y: Sequence[int], eos_id: Optional[int] = EOS_ID):
        self.eos_id = eos_id
        self.ref_len = len(y)
        ref = content(y, eos_id)
        if not ref:
            raise ValueError("reference sequence is empty")
        self.ref, self.ref_types, self.successors = _reference_tables(ref)
        self.remaining = tuple(dict(c) for c in self.ref.counts)
        self.available = set(self.ref_types)
        self.prefix: list = []
        self.overlaps = [0] * MAX_ORDER
        self.value = 0.0
        self.finished = False

    def _gaining(self, n: int) -> set:
        """Tokens whose order-n gram (n >= 2) after the prefix would still add overlap."""
        prefix, L = self.prefix, len(self.prefix)
        if L < n - 1:
            return set()
        ctx = tuple(prefix[L - n + 1:])
        rem = self.remaining[n - 1]
        return {v for v in self.successors[n - 1].get(ctx, ()) if rem[ctx + (v,)] > 0}

    def append(self, token: int) -> None:
        token = int(token)
        if self.finished:
            raise ValueError("cannot extend a terminated prefix")
        if token == self.eos_id:
            self.finished = True
            return
        prefix, L = self.prefix, len(self.prefix)
        for n in range(1, min(L + 1, MAX_ORDER) + 1):
            g = tuple(prefix[L - n + 1:]) + (token,)
            rem = self.remaining[n - 1]
            if rem.get(g, 0) > 0:
                rem[g] -= 1
                self.overlaps[n - 1] += 1
                if n == 1 and rem[g] == 0:
                    self.available.discard(token)
        prefix.append(token)
        self.value = _reward_from_stats(self.overlaps, len(prefix), self.ref.length)

    def increment_row(self, config: RewardConfig, w: float) -> IncrementRow:
        aux = config.use_dup or config.use_eos
        L = len(self.prefix)
        if w == 0:
            return IncrementRow(L, {}, 0.0, aux)
        base = self.value
        t = L + 1
        n_ref = self.ref.length
        o1, o2, o3 = self.overlaps
        # all rewards below use the arithmetic of _combine(w, delta, dup, eos)
        default = w * (_reward_cached((o1, o2, o3), t, n_ref) - base + 0 + 0)
        g1, g2, g3 = self.available, self._gaining(2), self._gaining(3)
        deltas = {}

        def delta_of(v):
            gains = (v in g1, v in g2, v in g3)
            d = deltas.get(gains)
            if d is None:
                new = (o1 + gains[0], o2 + gains[1], o3 + gains[2])
                d = deltas[gains] = _reward_cached(new, t, n_ref) - base
            return d

        # a word that gains at no order has exactly the default increment, so
        # only gaining words, EOS and the previous word need an entry; words
        # gaining only a unigram all share one value
        row = {}
        if g1:
            d1 = deltas[(True, False, False)] = _reward_cached((o1 + 1, o2, o3), t, n_ref) - base
            row = dict.fromkeys(g1, w * (d1 + 0 + 0))
        if g2 or g3:
            for v in g2 | g3:
                row[v] = w * (delta_of(v) + 0 + 0)
        if self.eos_id is not None:
            row[self.eos_id] = w * (base - base + 0 + (-1 if config.use_eos and t < self.ref_len else 0))
        if config.use_dup and L > 0:
            last = self.prefix[-1]
            row[last] = w * (delta_of(last) + -1 + 0)
        return IncrementRow(L, row, default, aux)


@lru_cache(maxsize=4096)
def _reference_tables(ref: tuple):
    """Profile, sorted word types and successor index of a reference.

    Shared between trackers and never mutated; successors[n-1][context] lists
    the tokens that complete a reference n-gram.
    """
    profile = NGramProfile.from_tokens(ref)
    types = tuple(sorted({g[0] for g in profile.counts[0]}))
    successors = tuple({} if n == 1 else _successor_index(profile.counts[n - 1])
                       for n in range(1, MAX_ORDER + 1))
    return profile, types, successors


def _successor_index(counts) -> dict:
    index = {}
    for g in counts:
        index.setdefault(g[:-1], []).append(g[-1])
    return index


def increment_row(prefix: Sequence[int], y: Sequence[int], t: int,
                  config: RewardConfig, w_t: float) -> IncrementRow:
    """Increment row for candidate position ``t`` (1-based) after ``prefix``."""
    if len(prefix) != t - 1:
        raise ValueError(f"prefix length {len(prefix)} does not match t={t}")
    tracker = RewardTracker(y, config.eos_id)
    for tok in prefix:
        if tok == config.eos_id:
            raise ValueError("prefix must be EOS-free")
        tracker.append(tok)
    return tracker.increment_row(config, w_t)


def naive_increment(prefix: Sequence[int], token: int, y: Sequence[int],
                    config: RewardConfig, w_t: float) -> float:
    """Per-token recomputation from scratch; the reference for ``IncrementRow``."""
    if w_t == 0:
        return 0.0
    eos_id = config.eos_id
    prefix = list(prefix)
    delta = main_reward(prefix + [token], y, eos_id) - main_reward(prefix, y, eos_id)
    dup = dup_term(prefix, token) if config.use_dup else 0
    eos = eos_term(token, len(prefix) + 1, len(y), eos_id) if config.use_eos else 0
    return _combine(w_t, delta, dup, eos)


def prefix_rewards(z: Sequence[int], y: Sequence[int], eos_id: Optional[int] = EOS_ID) -> np.ndarray:
    """R(z_{1:t} | y) for t = 0..|z| via incremental updates."""
    tracker = RewardTracker(y, eos_id)
    out = [0.0]
    for tok in z:
        tracker.append(tok)
        out.append(tracker.value)
        if tracker.finished:
            break
    return np.asarray(out)


def has_unique_increment_argmax(y: Sequence[int], config: RewardConfig, vocab_size: int) -> bool:
    """True when following ``y`` with every weight at W always picks the strict
    increment argmax, i.e. bang-bang sampling with p_drop = 0 must return ``y``."""
    tracker = RewardTracker(y, config.eos_id)
    for tok in y:
        row = tracker.increment_row(config, config.W).dense(vocab_size)
        best = row[tok]
        if np.sum(row >= best) != 1:
            return False
        tracker.append(tok)
    return True
