"""Brute-force enumeration over every fixed-length sequence of a tiny
vocabulary: exact values, distributions and gradients, and the verification
suite that checks the samplers and estimators against them.

Enumeration spaces carry no EOS, so every per-step distribution has full
support and the proposal factorises over all T positions.  Exact gradients
are restricted to the tabular backend.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .model import GradientBuffer, TabularModel, flatten
from .rewards import RewardConfig, RewardTracker, main_reward
from .samplers import softmax

DEFAULT_BUDGET = 10**6


class BudgetExceeded(ValueError):
    pass


@dataclass(frozen=True)
class EnumerationSpace:
    V: int
    T: int
    budget: int = DEFAULT_BUDGET

    def __post_init__(self):
        if self.V ** self.T > self.budget:
            raise BudgetExceeded(f"V^T = {self.V}^{self.T} exceeds budget {self.budget}")

    @property
    def size(self) -> int:
        return self.V ** self.T

    def sequences(self) -> list:
        return list(itertools.product(range(self.V), repeat=self.T))

    def index(self, z) -> int:
        i = 0
        for tok in z:
            i = i * self.V + int(tok)
        return i


@dataclass
class ExactDistribution:
    space: EnumerationSpace
    probs: np.ndarray
    log_normalizer: float = 0.0

    def __post_init__(self):
        if self.probs.shape != (self.space.size,):
            raise ValueError("probability vector does not match the space")


def _check_space(model, space):
    if model.vocab_size != space.V:
        raise ValueError("model vocabulary does not match the enumeration space")
    if model.t_max < space.T:
        raise ValueError("model T_max shorter than the enumeration length")


def _logsumexp(a):
    m = np.max(a)
    return float(m + np.log(np.sum(np.exp(a - m))))


def sequence_log_probs(model, x, params, space: EnumerationSpace) -> np.ndarray:
    """log p(z | x) for every z in lexicographic order."""
    _check_space(model, space)
    out = np.zeros(space.size)
    state0 = model.encode(x, params)

    def walk(state, prev, depth, idx, acc):
        if depth == space.T:
            out[idx] = acc
            return
        row, new = model.step(state, prev, params)
        for v in range(space.V):
            walk(new, v, depth + 1, idx * space.V + v, acc + row[v])

    walk(state0, model.start_token, 0, 0, 0.0)
    return out


def rewards_over_space(y, space: EnumerationSpace, reward_fn: Optional[Callable] = None) -> np.ndarray:
    reward_fn = reward_fn or (lambda z, ref: main_reward(z, ref, None))
    return np.array([reward_fn(z, y) for z in space.sequences()])


def exact_p_theta(x, params, model, space) -> ExactDistribution:
    return ExactDistribution(space, np.exp(sequence_log_probs(model, x, params, space)))


def exact_softmax_value(x, y, params, model, space, reward_fn=None) -> float:
    """log sum_z p(z | x) exp(R(z | y)), in log space."""
    return _logsumexp(sequence_log_probs(model, x, params, space) + rewards_over_space(y, space, reward_fn))


def exact_pg_value(x, y, params, model, space, reward_fn=None) -> float:
    """E_p[R(z | y)]."""
    p = np.exp(sequence_log_probs(model, x, params, space))
    return float(p @ rewards_over_space(y, space, reward_fn))


def exact_q_theta(x, y, params, model, space, reward_fn=None) -> ExactDistribution:
    scores = sequence_log_probs(model, x, params, space) + rewards_over_space(y, space, reward_fn)
    logz = _logsumexp(scores)
    return ExactDistribution(space, np.exp(scores - logz), logz)


def _tilted_walk(model, x, y, w, params, space, config: RewardConfig, visit):
    """Depth-first traversal of the factorised proposal; ``visit`` gets
    (index, z, log q~(z), per-step tilted rows) at every leaf."""
    _check_space(model, space)
    if len(w) < space.T:
        raise ValueError("weight vector shorter than T")

    def walk(state, prev, tracker_prefix, depth, idx, acc, steps):
        if depth == space.T:
            visit(idx, tracker_prefix, acc, steps)
            return
        row, new = model.step(state, prev, params)
        tracker = RewardTracker(y, config.eos_id)
        for tok in tracker_prefix:
            tracker.append(tok)
        inc = tracker.increment_row(config, float(w[depth])).dense(space.V)
        shifted = row + inc
        shifted = shifted - shifted.max()
        logq = shifted - np.log(np.exp(shifted).sum())
        for v in range(space.V):
            walk(new, v, tracker_prefix + (v,), depth + 1, idx * space.V + v,
                 acc + logq[v], steps + [(prev, row)])

    walk(model.encode(x, params), model.start_token, (), 0, 0, 0.0, [])


def exact_q_tilde(x, y, w, params, model, space, config: RewardConfig) -> ExactDistribution:
    """Product of per-step normalised rows softmax(log p + w_t * increment)."""
    logq = np.zeros(space.size)

    def visit(idx, z, acc, steps):
        logq[idx] = acc

    _tilted_walk(model, x, y, w, params, space, config, visit)
    return ExactDistribution(space, np.exp(logq))


def _step_grad(model, x, z, t, params):
    """Flat d/dtheta log p(z_t | x, z_<t) (tabular backend)."""
    buf = GradientBuffer.zeros_like(params)
    mask = np.zeros(len(z), bool)
    mask[t] = True
    model.accumulate_masked_loglik_grad(x, z, mask, 1.0, params, buf)
    return buf.flat()


def per_step_contributions(x, y, w, params, model, space, config: RewardConfig,
                           reward_weighting: bool = False) -> np.ndarray:
    """Array (T, n_params): row t is sum_z q~(z) [R(z)] d/dtheta log p(z_t | x, z_<t)."""
    if not isinstance(model, TabularModel):
        raise TypeError("exact gradients need the tabular backend")
    n = flatten(params).size
    out = np.zeros((space.T, n))
    q = exact_q_tilde(x, y, w, params, model, space, config).probs
    for z in space.sequences():
        weight = q[space.index(z)]
        if reward_weighting:
            weight *= main_reward(z, y, config.eos_id)
        if weight == 0.0:
            continue
        for t in range(space.T):
            out[t] += weight * _step_grad(model, x, z, t, params)
    return out


def exact_spg_gradient(x, y, w, params, model, space, config: RewardConfig,
                       reward_weighting: bool = False, tol: float = 1e-10) -> np.ndarray:
    """Loss gradient -sum_z q~(z) d log p(z | x) for a fixed weight vector.

    Computes the full sum over steps and the form restricted to steps with
    w_t != 0 and returns the restricted one.  Without reward weighting the two
    must agree to ``tol`` (zero-weight steps contribute nothing in
    expectation); with it they need not, since R(z | y) depends on the tokens
    drawn after a zero-weight step.
    """
    contrib = per_step_contributions(x, y, w, params, model, space, config, reward_weighting)
    full = -contrib.sum(axis=0)
    nonzero = np.asarray(w[:space.T]) != 0
    restricted = -contrib[nonzero].sum(axis=0)
    gap = float(np.max(np.abs(full - restricted))) if full.size else 0.0
    if not reward_weighting and gap > tol:
        raise AssertionError(f"full and restricted SPG gradients differ by {gap}")
    return restricted


def exact_bbspg_gradient(x, y, params, model, space, config: RewardConfig,
                         reward_weighting: bool = False) -> np.ndarray:
    """Expectation over w ~ p(w) of the restricted SPG loss gradient."""
    total = np.zeros(flatten(params).size)
    p = config.p_drop
    for bits in itertools.product((0, 1), repeat=space.T):
        pw = float(np.prod([(1 - p) if b else p for b in bits]))
        if pw == 0.0:
            continue
        w = np.array([config.W if b else 0.0 for b in bits])
        total += pw * exact_spg_gradient(x, y, w, params, model, space, config, reward_weighting)
    return total


def _expected_loglik_grad(model, x, params, space, weights) -> np.ndarray:
    total = np.zeros(flatten(params).size)
    for z, wz in zip(space.sequences(), weights):
        if wz == 0.0:
            continue
        buf = GradientBuffer.zeros_like(params)
        model.accumulate_masked_loglik_grad(x, z, np.ones(len(z), bool), 1.0, params, buf)
        total += wz * buf.flat()
    return total


def exact_pg_gradient(x, y, params, model, space, reward_fn=None) -> np.ndarray:
    """-sum_z p(z | x) R(z | y) d log p(z | x)."""
    p = np.exp(sequence_log_probs(model, x, params, space))
    return -_expected_loglik_grad(model, x, params, space, p * rewards_over_space(y, space, reward_fn))


def exact_raml_distribution(y, tau: float, space: EnumerationSpace, reward_fn=None) -> ExactDistribution:
    """exp(R(z | y) / tau) normalised over the space."""
    if len(y) != space.T:
        raise ValueError("reference length must equal T")
    r = rewards_over_space(y, space, reward_fn) / tau
    logz = _logsumexp(r)
    return ExactDistribution(space, softmax(r), logz)


def exact_raml_gradient(x, y, tau, params, model, space, reward_fn=None) -> np.ndarray:
    """-sum_z r_R(z | y) d log p(z | x)."""
    r = exact_raml_distribution(y, tau, space, reward_fn).probs
    return -_expected_loglik_grad(model, x, params, space, r)


def empirical_distribution(samples, space: EnumerationSpace) -> np.ndarray:
    counts = np.zeros(space.size)
    for z in samples:
        if len(z) != space.T:
            raise ValueError(f"sample {z} has length {len(z)}, space expects {space.T}")
        counts[space.index(z)] += 1
    return counts / max(1, len(samples))


def total_variation(p_hat, exact) -> float:
    """Half the L1 distance; both arguments in the same enumeration order."""
    q = exact.probs if isinstance(exact, ExactDistribution) else np.asarray(exact)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if p_hat.shape != q.shape:
        raise ValueError("distributions live on different spaces")
    return 0.5 * float(np.abs(p_hat - q).sum())


# ---------------------------------------------------------------------------
# verification suite


@dataclass
class CheckRecord:
    name: str
    value: float
    tolerance: Optional[float]
    passed: bool
    note: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def format_report(records) -> str:
    lines = []
    for r in records:
        tol = "report-only" if r.tolerance is None else f"tol={r.tolerance:.3g}"
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status} {r.name}: value={r.value:.6g} {tol}" + (f" ({r.note})" if r.note else ""))
    return "\n".join(lines)


def random_instance(rng, V: int, T: int, n_contexts: int = 1, scale: float = 1.0):
    model = TabularModel(V, T, n_contexts)
    params = model.init_params(rng, scale)
    x = tuple(int(t) for t in rng.integers(0, V, size=2))
    y = tuple(int(t) for t in rng.integers(0, V, size=T))
    return model, params, x, y


def lemma1_max_abs(rng, V: int, T: int, n_trials: int, W: float = 10000.0) -> float:
    """Largest |coordinate| of any zero-weight step's enumerated contribution."""
    space = EnumerationSpace(V, T)
    config = RewardConfig(W=W, p_drop=0.5, use_dup=True, use_eos=False, eos_id=None)
    worst = 0.0
    for _ in range(n_trials):
        model, params, x, y = random_instance(rng, V, T)
        w = np.where(rng.random(T) < 0.5, W, 0.0)
        if np.all(w != 0):
            w[rng.integers(T)] = 0.0
        contrib = per_step_contributions(x, y, w, params, model, space, config)
        for t in np.flatnonzero(w == 0):
            worst = max(worst, float(np.max(np.abs(contrib[t]))))
    return worst


def run_suite(V: int = 4, T: int = 3, samples: int = 200000, seed: int = 1,
              w_all_zero: bool = False) -> list:
    """Lemma 1, proposal fidelity, gradient unbiasedness, Jensen, telescoping."""
    from .data import Example
    from .estimators import EstimatorConfig, grad_bbspg, grad_pg, grad_raml
    from .samplers import RamlConfig, RamlSampler, sample_pg_batch, sample_spg_batch

    rng = np.random.default_rng(seed)
    space = EnumerationSpace(V, T)
    records = []

    records.append(CheckRecord("lemma1_zero_weight_steps", lemma1_max_abs(rng, V, T, 100), 1e-10, False))
    records[-1].passed = records[-1].value < 1e-10

    model, params, x, y = random_instance(rng, V, T)
    p_drop = 1.0 if w_all_zero else 0.4
    config = RewardConfig(W=10000.0, p_drop=p_drop, use_dup=True, use_eos=False, eos_id=None)

    if w_all_zero:
        w = np.zeros(T)
        g = exact_spg_gradient(x, y, w, params, model, space, config)
        val = float(np.max(np.abs(g)))
        records.append(CheckRecord("zero_weights_exact_gradient", val, 1e-10, val < 1e-10))

    # proposal fidelity for one fixed w per setting
    for W_, pd in ((1.0, p_drop), (10000.0, p_drop)):
        cfg = RewardConfig(W=W_, p_drop=pd, use_dup=True, use_eos=False, eos_id=None)
        outs = sample_spg_batch(model, params, [x] * samples, [y] * samples, cfg, rng)
        emp = empirical_distribution([o.z for o in outs], space)
        # mixture over w of the exact proposal
        exact = np.zeros(space.size)
        for bits in itertools.product((0, 1), repeat=T):
            pw = float(np.prod([(1 - pd) if b else pd for b in bits]))
            if pw:
                wv = np.array([W_ if b else 0.0 for b in bits])
                exact += pw * exact_q_tilde(x, y, wv, params, model, space, cfg).probs
        tv = total_variation(emp, exact)
        records.append(CheckRecord(f"proposal_tv_W{W_:g}_pdrop{pd:g}", tv, 0.02, tv < 0.02))

    # gradient unbiasedness: z-scores of batch means against the exact gradient
    ex = Example(x, y)
    est = EstimatorConfig("spg", reward=config, reward_weighting=False)
    raml_cfg = RamlConfig(tau=0.85)
    raml = RamlSampler(raml_cfg, range(V), None)
    estimators = {
        "bbspg": (lambda n, r: _mean_grad(grad_bbspg, params, model, [ex] * n, est, r),
                  exact_bbspg_gradient(x, y, params, model, space, config)),
        "pg": (lambda n, r: _mean_grad(grad_pg, params, model, [ex] * n, r, eos_id=None),
               exact_pg_gradient(x, y, params, model, space)),
        "raml": (lambda n, r: _mean_grad(grad_raml, params, model, [ex] * n, raml, r),
                 exact_raml_gradient(x, y, raml_cfg.tau, params, model, space)),
    }
    for name, (fn, exact_g) in estimators.items():
        z, mean = unbiasedness_z(fn, exact_g, samples, rng)
        records.append(CheckRecord(f"{name}_gradient_unbiased_max_z", z, 5.0, z <= 5.0,
                                   "max over coords of |mean - exact| / standard error"))
        rel = relative_coordinate_error(mean, exact_g)
        records.append(CheckRecord(f"{name}_gradient_rel_err", rel, None, True,
                                   "max |mean - exact| / max(0.02|exact|, 1e-4); report only"))

    # reduction: all-zero weights give the model distribution
    cfg0 = RewardConfig(W=10000.0, p_drop=1.0, use_dup=True, use_eos=False, eos_id=None)
    spg0 = empirical_distribution([o.z for o in sample_spg_batch(model, params, [x] * samples,
                                                                 [y] * samples, cfg0, rng)], space)
    pg = empirical_distribution(sample_pg_batch(model, params, [x] * samples, rng, None), space)
    tv = total_variation(spg0, pg)
    records.append(CheckRecord("zero_weight_spg_vs_pg_tv", tv, 0.02, tv < 0.02))

    # Jensen and telescoping on random instances
    worst = np.inf
    for _ in range(100):
        m, p, xx, yy = random_instance(rng, V, T)
        gap = exact_softmax_value(xx, yy, p, m, space) - exact_pg_value(xx, yy, p, m, space)
        worst = min(worst, gap)
    records.append(CheckRecord("jensen_softmax_minus_pg_value", worst, -1e-12, worst >= -1e-12))

    worst = 0.0
    for _ in range(1000):
        yy = tuple(int(t) for t in rng.integers(0, V, size=T))
        z = tuple(int(t) for t in rng.integers(0, V, size=int(rng.integers(0, 2 * T + 1))))
        tr = RewardTracker(yy, None)
        acc = 0.0
        prev = 0.0
        for tok in z:
            tr.append(tok)
            acc += tr.value - prev
            prev = tr.value
        worst = max(worst, abs(acc - main_reward(z, yy, None)))
    records.append(CheckRecord("telescoping_increments", worst, 1e-12, worst <= 1e-12))

    # approximation gap between factorised and global proposal: reported only
    w_full = np.full(T, 1.0)
    qt = exact_q_tilde(x, y, w_full, params, model, space, RewardConfig(W=1.0, use_eos=False, eos_id=None))
    qg = exact_q_theta(x, y, params, model, space)
    records.append(CheckRecord("tv_q_tilde_vs_q_theta_W1", total_variation(qt.probs, qg), None, True,
                               "approximation gap, not bounded"))
    return records


def _mean_grad(estimator, params, model, examples, *args, **kwargs) -> np.ndarray:
    buf = GradientBuffer.zeros_like(params)
    estimator(model, params, examples, *args, buffer=buf, **kwargs)
    return buf.flat() / buf.count


def unbiasedness_z(estimate_fn, exact, samples: int, rng, n_batches: int = 20):
    """Split ``samples`` draws into batches; return (max |z|, overall mean).

    ``estimate_fn(n, rng)`` gives the mean gradient over n draws.  A
    coordinate with zero spread across batches scores 0 if it matches the
    exact value and inf otherwise.
    """
    per = max(1, samples // n_batches)
    means = np.array([estimate_fn(per, rng) for _ in range(n_batches)])
    mean = means.mean(axis=0)
    se = means.std(axis=0, ddof=1) / np.sqrt(n_batches)
    diff = np.abs(mean - np.asarray(exact))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff <= 1e-12, 0.0, np.inf))
    return float(np.max(z)), mean


def relative_coordinate_error(estimate, exact, rel: float = 0.02, abs_floor: float = 1e-4) -> float:
    """max_i |estimate_i - exact_i| / max(rel * |exact_i|, abs_floor); <= 1 passes."""
    estimate, exact = np.asarray(estimate), np.asarray(exact)
    return float(np.max(np.abs(estimate - exact) / np.maximum(rel * np.abs(exact), abs_floor)))
