"""Target samplers for the four training regimes, plus greedy decoding.

The bang-bang sampler follows the per-step recipe: draw mu ~ U[0, 1]; if
mu >= p_drop the step weight is W and the token is drawn from
softmax(log p + increments), otherwise the weight is 0 and the token is drawn
from the model row.  Sampling stops at EOS or at the model's T_max.
"""
from __future__ import annotations

import itertools
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .rewards import (EOS_ID, IncrementRow, RewardConfig, RewardTracker, content,
                      main_reward)

MODEL_DRAWN = "model"
REWARD_TILTED = "reward"


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for (master seed, epoch, example index, ...)."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _draw(probs: np.ndarray, rng) -> int:
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(probs) - 1)


def _draw_rows(logrows: np.ndarray, rng) -> np.ndarray:
    """One inverse-CDF draw per row of a (B, V) matrix of log-probabilities."""
    cdf = np.cumsum(np.exp(logrows), axis=1)
    u = rng.random(len(logrows)) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, logrows.shape[1] - 1)


def _log_normalize_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def sample_bang_bang(T: int, p_drop: float, rng, W: float = 10000.0) -> np.ndarray:
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must lie in [0, 1], got {p_drop}")
    mu = rng.random(T)
    return np.where(mu >= p_drop, float(W), 0.0)


def spg_step_distribution(logprob_row: np.ndarray, inc_row) -> np.ndarray:
    """softmax(log p(v | prefix, x) + increment(v)) over the vocabulary."""
    if isinstance(inc_row, IncrementRow):
        inc_row = inc_row.dense(len(logprob_row))
    return softmax(np.asarray(logprob_row) + inc_row)


@dataclass
class SampleOutcome:
    z: tuple
    w: np.ndarray
    provenance: tuple
    log_q_tilde: float
    reward: float = 0.0


def sample_spg_batch(model, params, xs, ys, config: RewardConfig, rng,
                     weights: Optional[np.ndarray] = None, trace=None) -> list:
    """Bang-bang SPG targets for a batch of (x, y) pairs.

    ``weights`` (B x T_max) fixes the step weights instead of drawing them;
    the oracle uses it to condition on a given weight vector.  Each outcome's
    ``reward`` is R(z | y).  A ``trace`` from ``model.new_trace()`` records the
    model's forward pass for reuse by ``model.accumulate``.
    """
    B, V = len(xs), model.vocab_size
    for y in ys:
        if not content(y, config.eos_id):
            raise ValueError("reference sequence is empty")
        if len(y) > model.t_max:
            raise ValueError(f"T_max={model.t_max} shorter than reference length {len(y)}")
    if trace is None:
        state = model.encode_batch(xs, params)
    else:
        state = model.encode_batch(xs, params, trace)
    ys = [tuple(y) for y in ys]
    trackers = [RewardTracker(y, config.eos_id) for y in ys]
    # oracle batches repeat one reference many times; cache rows by (y, prefix, w)
    rows = {} if len(set(ys)) < B else None
    zs = [[] for _ in range(B)]
    ws = [[] for _ in range(B)]
    logq = np.zeros(B)
    prev = np.full(B, model.start_token)
    active = np.arange(B)
    for t in range(model.t_max):
        if len(active) == 0:
            break
        logp, state = model.step_batch(state, prev, params)
        if weights is not None:
            w = np.asarray([float(weights[b][t]) for b in active])
        else:
            w = np.where(rng.random(len(active)) >= config.p_drop, float(config.W), 0.0)
        inc = np.zeros((len(active), V))
        ii, vv, xx = [], [], []
        for j in np.flatnonzero(w):
            b = active[j]
            if rows is None:
                row = trackers[b].increment_row(config, w[j])
                inc[j] = row.default_value
                ii.extend([j] * len(row.per_token))
                vv.extend(row.per_token)
                xx.extend(row.per_token.values())
                continue
            key = (ys[b], tuple(zs[b]), w[j])
            dense = rows.get(key)
            if dense is None:
                dense = rows[key] = trackers[b].increment_row(config, w[j]).dense(V)
            inc[j] = dense
        if ii:
            inc[ii, vv] = xx
        logrows = _log_normalize_rows(logp[active] + inc)
        toks = _draw_rows(logrows, rng)
        logq[active] += logrows[np.arange(len(active)), toks]
        still = []
        for j, b in enumerate(active):
            tok = int(toks[j])
            zs[b].append(tok)
            ws[b].append(w[j])
            trackers[b].append(tok)
            prev[b] = tok
            if tok != config.eos_id:
                still.append(b)
        active = np.asarray(still, dtype=np.int64)
    return [SampleOutcome(tuple(zs[b]), np.asarray(ws[b]),
                          tuple(REWARD_TILTED if v else MODEL_DRAWN for v in ws[b]),
                          float(logq[b]), trackers[b].value)
            for b in range(B)]


def sample_spg_target(x, y, model, params, config: RewardConfig, rng) -> SampleOutcome:
    return sample_spg_batch(model, params, [x], [y], config, rng)[0]


def sample_pg_batch(model, params, xs, rng, eos_id: Optional[int] = EOS_ID) -> list:
    """Ancestral samples from the model until EOS or T_max."""
    B = len(xs)
    state = model.encode_batch(xs, params)
    zs = [[] for _ in range(B)]
    prev = np.full(B, model.start_token)
    active = np.arange(B)
    for t in range(model.t_max):
        if len(active) == 0:
            break
        logp, state = model.step_batch(state, prev, params)
        toks = _draw_rows(logp[active], rng)
        still = []
        for j, b in enumerate(active):
            tok = int(toks[j])
            zs[b].append(tok)
            prev[b] = tok
            if tok != eos_id:
                still.append(b)
        active = np.asarray(still, dtype=np.int64)
    return [tuple(z) for z in zs]


def sample_pg_target(x, model, params, rng, eos_id: Optional[int] = EOS_ID) -> tuple:
    return sample_pg_batch(model, params, [x], rng, eos_id)[0]


def mle_target(y) -> tuple:
    return tuple(y)


def greedy_decode_batch(model, params, xs, config: Optional[RewardConfig] = None) -> list:
    """Argmax decoding of log p + W * DUP per step (no DUP if config is None or
    has ``use_dup`` off)."""
    eos_id = config.eos_id if config is not None else EOS_ID
    use_dup = config is not None and config.use_dup
    B = len(xs)
    state = model.encode_batch(xs, params)
    zs = [[] for _ in range(B)]
    prev = np.full(B, model.start_token)
    done = np.zeros(B, dtype=bool)
    rows = np.arange(B)
    for t in range(model.t_max):
        if done.all():
            break
        logp, state = model.step_batch(state, prev, params)
        if use_dup and t > 0:
            logp = logp.copy()
            logp[rows, prev] -= config.W
        tok = logp.argmax(axis=1)
        for b in np.flatnonzero(~done):
            zs[b].append(int(tok[b]))
            if tok[b] == eos_id:
                done[b] = True
        prev = tok
    return [tuple(z) for z in zs]


def greedy_decode(x, model, params, config: Optional[RewardConfig] = None) -> tuple:
    return greedy_decode_batch(model, params, [x], config)[0]


@dataclass(frozen=True)
class RamlConfig:
    tau: float = 0.85
    max_edits: int = 2
    exact_threshold: int = 20000
    n_probes: int = 32

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")


class RamlSampler:
    """Samples z ~ exp(R(z|y)/tau) over sequences of the reference's length.

    When ``len(tokens) ** |y|`` is within ``exact_threshold`` the distribution
    is enumerated exactly.  Otherwise an edit count m is drawn with probability
    proportional to exp(Rbar_m / tau), where Rbar_m is the mean reward of
    ``n_probes`` random m-substitution neighbours, and m distinct positions are
    substituted uniformly (an approximation).  An EOS-terminated reference keeps
    its EOS.  Per-reference tables are cached.
    """

    def __init__(self, config: RamlConfig, tokens, eos_id: Optional[int] = EOS_ID, seed: int = 0):
        self.config = config
        self.tokens = np.asarray(sorted(tokens), dtype=np.int64)
        self.eos_id = eos_id
        self.seed = seed
        self._exact = {}
        self._edit = {}

    def is_exact(self, y) -> bool:
        L = len(content(y, self.eos_id))
        return len(self.tokens) ** L <= self.config.exact_threshold

    def exact_distribution(self, y):
        """(list of sequences in lexicographic order, probabilities)."""
        y = tuple(y)
        if y not in self._exact:
            body = content(y, self.eos_id)
            tail = (self.eos_id,) if self.eos_id is not None and y and y[-1] == self.eos_id else ()
            seqs = [tuple(int(v) for v in s) + tail
                    for s in itertools.product(self.tokens, repeat=len(body))]
            r = np.array([main_reward(s, y, self.eos_id) for s in seqs])
            self._exact[y] = (seqs, softmax(r / self.config.tau))
        return self._exact[y]

    def _substitute(self, body, m, rng):
        out = list(body)
        for pos in rng.choice(len(body), size=m, replace=False):
            choices = self.tokens[self.tokens != out[pos]]
            out[pos] = int(choices[rng.integers(len(choices))])
        return out

    def edit_distribution(self, y) -> np.ndarray:
        y = tuple(y)
        if y not in self._edit:
            body = content(y, self.eos_id)
            probe_rng = derive_rng(self.seed, zlib.crc32(np.asarray(y, np.int64).tobytes()))
            means = [1.0]
            for m in range(1, min(self.config.max_edits, len(body)) + 1):
                vals = [main_reward(self._substitute(body, m, probe_rng), y, self.eos_id)
                        for _ in range(self.config.n_probes)]
                means.append(float(np.mean(vals)))
            self._edit[y] = softmax(np.asarray(means) / self.config.tau)
        return self._edit[y]

    def sample(self, y, rng) -> tuple:
        y = tuple(y)
        if not content(y, self.eos_id):
            raise ValueError("reference sequence is empty")
        if self.is_exact(y):
            seqs, probs = self.exact_distribution(y)
            return seqs[_draw(probs, rng)]
        body = content(y, self.eos_id)
        m = _draw(self.edit_distribution(y), rng)
        out = self._substitute(body, m, rng)
        if len(body) != len(y):
            out.append(self.eos_id)
        return tuple(out)


def sample_raml_target(y, raml_config: RamlConfig, rng, tokens,
                       eos_id: Optional[int] = EOS_ID) -> tuple:
    return RamlSampler(raml_config, tokens, eos_id).sample(y, rng)
