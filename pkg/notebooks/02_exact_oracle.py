"""Exact enumeration on a tiny tabular model: the factorised proposal, the
zero-weight identity and the three stochastic gradients.

Run with ``python3 notebooks/02_exact_oracle.py``; about a minute.
"""
import numpy as np

from softmax_pg.data import Example
from softmax_pg.estimators import EstimatorConfig, grad_bbspg, grad_pg, grad_raml
from softmax_pg.model import GradientBuffer
from softmax_pg.oracle import (EnumerationSpace, exact_bbspg_gradient, exact_p_theta,
                               exact_pg_gradient, exact_pg_value, exact_q_theta, exact_q_tilde,
                               exact_raml_gradient, exact_softmax_value, per_step_contributions,
                               random_instance, total_variation, unbiasedness_z)
from softmax_pg.rewards import RewardConfig
from softmax_pg.samplers import RamlConfig, RamlSampler

np.set_printoptions(precision=4, suppress=True)
rng = np.random.default_rng(0)
V, T = 4, 3
space = EnumerationSpace(V, T)
model, params, x, y = random_instance(rng, V, T)
cfg = RewardConfig(W=10000.0, p_drop=0.4, use_eos=False, eos_id=None)
print("reference", y)

# how far the per-step proposal sits from the globally normalised one
p = exact_p_theta(x, params, model, space).probs
q = exact_q_theta(x, y, params, model, space).probs
for W in (0.1, 1.0, 10.0):
    qt = exact_q_tilde(x, y, np.full(T, W), params, model, space, RewardConfig(W=W, use_eos=False, eos_id=None))
    print(f"W={W:5}: TV(q~, q) = {total_variation(qt.probs, q):.4f}   TV(q~, p) = {total_variation(qt.probs, p):.4f}")

# softmax value against expected reward
print("log E[exp R] =", exact_softmax_value(x, y, params, model, space),
      " E[R] =", exact_pg_value(x, y, params, model, space))

# zero-weight steps: the enumerated contribution vanishes, weighted ones do not
w = np.array([10000.0, 0.0, 10000.0])
contrib = per_step_contributions(x, y, w, params, model, space, cfg)
print("max |contribution| per step with w =", w, np.abs(contrib).max(axis=1))

# each estimator's mean against its exact gradient, in standard errors
ex = Example(x, y)
est = EstimatorConfig("spg", reward=cfg, reward_weighting=False)
raml = RamlSampler(RamlConfig(tau=0.85), range(V), None)


def mean_of(fn):
    def run(n, r):
        buf = GradientBuffer.zeros_like(params)
        fn(n, r, buf)
        return buf.flat() / buf.count
    return run


cases = {
    "bbspg": (mean_of(lambda n, r, b: grad_bbspg(model, params, [ex] * n, est, r, b)),
              exact_bbspg_gradient(x, y, params, model, space, cfg)),
    "pg": (mean_of(lambda n, r, b: grad_pg(model, params, [ex] * n, r, b, eos_id=None)),
           exact_pg_gradient(x, y, params, model, space)),
    "raml": (mean_of(lambda n, r, b: grad_raml(model, params, [ex] * n, raml, r, b)),
             exact_raml_gradient(x, y, 0.85, params, model, space)),
}
for name, (fn, exact) in cases.items():
    z, mean = unbiasedness_z(fn, exact, 100000, rng)
    print(f"{name:6} max z = {z:.2f}   max |mean - exact| = {np.abs(mean - exact).max():.2e}"
          f"   |exact| = {np.linalg.norm(exact):.3f}")
