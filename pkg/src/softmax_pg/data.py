"""Vocabularies, synthetic transduction tasks and TSV corpora."""
from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .rewards import EOS_ID, PAD_ID, UNK_ID

log = logging.getLogger(__name__)

RESERVED = ("<pad>", "</s>", "<unk>")
TASK_KINDS = ("copy", "reverse", "cipher")
MAX_INPUT_LEN = 30
MAX_TARGET_LEN = 15


class DataError(ValueError):
    """Malformed corpus or dataset directory."""


class Vocab:
    """Token strings <-> ids with pad/EOS/unk fixed at ids 0/1/2."""

    pad_id, eos_id, unk_id = PAD_ID, EOS_ID, UNK_ID

    def __init__(self, tokens=()):
        self.id_to_token = list(RESERVED)
        self.token_to_id = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.token_to_id:
            self.token_to_id[token] = len(self.id_to_token)
            self.id_to_token.append(token)
        return self.token_to_id[token]

    def __len__(self):
        return len(self.id_to_token)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.id_to_token == other.id_to_token

    def encode(self, tokens) -> tuple:
        return tuple(self.token_to_id.get(t, UNK_ID) for t in tokens)

    def decode(self, ids) -> list:
        return [self.id_to_token[i] for i in ids]

    @classmethod
    def build(cls, token_lists, max_size: Optional[int] = None) -> "Vocab":
        """Most frequent tokens first (ties broken alphabetically), capped at
        ``max_size`` entries including the reserved ones."""
        counts = Counter(t for toks in token_lists for t in toks if t not in RESERVED)
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        if max_size is not None:
            ranked = ranked[:max(0, max_size - len(RESERVED))]
        return cls(ranked)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.id_to_token), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:3]) != RESERVED:
            raise DataError(f"{path}: first three entries must be {RESERVED}")
        return cls(lines[3:])


@dataclass(frozen=True)
class Example:
    x: tuple
    y: tuple

    def key(self) -> str:
        return hashlib.sha1(repr((self.x, self.y)).encode()).hexdigest()


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    vocab_size: int = 20
    min_len: int = 4
    max_len: int = 8
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200
    seed: int = 0
    distinct: bool = True
    t_max: int = 15

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4 (three ids are reserved)")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.max_len + 1 > self.t_max:
            raise ValueError("targets (max_len + EOS) must fit in t_max")
        if self.distinct and self.max_len > self.vocab_size - len(RESERVED):
            raise ValueError("not enough content tokens for distinct-token inputs")


@dataclass
class Dataset:
    vocab: Vocab
    splits: dict = field(default_factory=dict)
    spec: Optional[TaskSpec] = None

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.vocab == other.vocab
                and self.splits == other.splits)


def task_vocab(vocab_size: int) -> Vocab:
    return Vocab([f"w{i}" for i in range(len(RESERVED), vocab_size)])


def cipher_permutation(spec: TaskSpec) -> np.ndarray:
    """Fixed permutation of the content ids; reserved ids map to themselves."""
    rng = np.random.default_rng([spec.seed, 1])
    perm = np.arange(spec.vocab_size)
    perm[len(RESERVED):] = rng.permutation(np.arange(len(RESERVED), spec.vocab_size))
    return perm


def transform(kind: str, x, perm=None) -> tuple:
    if kind == "copy":
        body = tuple(x)
    elif kind == "reverse":
        body = tuple(reversed(x))
    elif kind == "cipher":
        body = tuple(int(perm[t]) for t in x)
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    return body + (EOS_ID,)


def generate_task(spec: TaskSpec) -> Dataset:
    """Reproducible train/valid/test splits, disjoint by example content."""
    rng = np.random.default_rng([spec.seed, 0])
    perm = cipher_permutation(spec) if spec.kind == "cipher" else None
    content_ids = np.arange(len(RESERVED), spec.vocab_size)
    sizes = {"train": spec.n_train, "valid": spec.n_valid, "test": spec.n_test}
    seen = set()
    splits = {}
    for name, n in sizes.items():
        out = []
        attempts = 0
        while len(out) < n:
            attempts += 1
            if attempts > 100 * n + 1000:
                raise ValueError("task space too small for the requested split sizes")
            L = int(rng.integers(spec.min_len, spec.max_len + 1))
            x = tuple(int(t) for t in rng.choice(content_ids, size=L, replace=not spec.distinct))
            if x in seen:
                continue
            seen.add(x)
            out.append(Example(x, transform(spec.kind, x, perm)))
        splits[name] = out
    return Dataset(task_vocab(spec.vocab_size), splits, spec)


def parse_tsv(path, vocab: Optional[Vocab] = None, max_vocab: Optional[int] = None,
              max_input_len: int = MAX_INPUT_LEN, max_target_len: int = MAX_TARGET_LEN):
    """Read one ``input<TAB>target`` example per line.

    Builds a frequency-ranked vocabulary when ``vocab`` is None.  Returns
    ``(examples, vocab, n_skipped)``; empty targets are skipped and counted.
    """
    raw = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected exactly one tab, found {len(parts) - 1}")
            src, tgt = parts[0].split(), parts[1].split()
            if not tgt:
                skipped += 1
                continue
            if not src:
                raise DataError(f"{path}:{lineno}: empty input")
            raw.append((src[:max_input_len], tgt[:max_target_len]))
    if skipped:
        log.warning("%s: skipped %d examples with empty targets", path, skipped)
    if vocab is None:
        vocab = Vocab.build([s for s, _ in raw] + [t for _, t in raw], max_vocab)
    examples = [Example(vocab.encode(s), vocab.encode(t) + (EOS_ID,)) for s, t in raw]
    return examples, vocab, skipped


def load_tsv_corpus(path, vocab: Optional[Vocab] = None, max_vocab: Optional[int] = None,
                    max_input_len: int = MAX_INPUT_LEN, max_target_len: int = MAX_TARGET_LEN):
    examples, vocab, _ = parse_tsv(path, vocab, max_vocab, max_input_len, max_target_len)
    return Dataset(vocab, {"train": examples})


def write_tsv(path, examples, vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            y = ex.y[:-1] if ex.y and ex.y[-1] == EOS_ID else ex.y
            fh.write(" ".join(vocab.decode(ex.x)) + "\t" + " ".join(vocab.decode(y)) + "\n")


def save_dataset(dataset: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dataset.vocab.save(d / "vocab.txt")
    for name, examples in dataset.splits.items():
        write_tsv(d / f"{name}.tsv", examples, dataset.vocab)
    if dataset.spec is not None:
        (d / "task.json").write_text(json.dumps(asdict(dataset.spec), indent=2, sort_keys=True) + "\n")


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    if not (d / "vocab.txt").exists():
        raise DataError(f"{d}: no vocab.txt")
    vocab = Vocab.load(d / "vocab.txt")
    splits = {}
    for name in ("train", "valid", "test"):
        if (d / f"{name}.tsv").exists():
            splits[name] = parse_tsv(d / f"{name}.tsv", vocab, max_input_len=10**9,
                                     max_target_len=10**9)[0]
    spec = None
    if (d / "task.json").exists():
        spec = TaskSpec(**json.loads((d / "task.json").read_text()))
    return Dataset(vocab, splits, spec)


def corpus_stats(examples, vocab_size: Optional[int] = None) -> dict:
    n = len(examples)
    x_lens = Counter(len(ex.x) for ex in examples)
    y_lens = Counter(len(ex.y) for ex in examples)
    used = {t for ex in examples for t in ex.x + ex.y}
    content_used = {t for t in used if t >= len(RESERVED)}
    stats = {
        "n_examples": n,
        "input_tokens": sum(len(ex.x) for ex in examples),
        "target_tokens": sum(len(ex.y) for ex in examples),
        "input_length_hist": dict(sorted(x_lens.items())),
        "target_length_hist": dict(sorted(y_lens.items())),
        "mean_target_length": (sum(len(ex.y) for ex in examples) / n) if n else 0.0,
        "unk_tokens": sum((ex.x + ex.y).count(UNK_ID) for ex in examples),
    }
    if vocab_size is not None:
        n_content = vocab_size - len(RESERVED)
        stats["vocab_coverage"] = len(content_used) / n_content if n_content > 0 else 0.0
    return stats
