"""Stochastic loss gradients for MLE, RAML, naive PG and bang-bang SPG.

Each estimator takes a batch of examples, draws its targets and adds the
*loss* gradient (sum over examples) to a ``GradientBuffer`` through the
model's masked log-likelihood accumulator.  ``buffer.count`` grows by the
number of examples so the trainer can average.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .rewards import EOS_ID, RewardConfig, main_reward
from .samplers import (RamlConfig, RamlSampler, mle_target, sample_pg_batch,
                       sample_spg_batch)

REGIMES = ("mle", "raml", "pg", "spg")


@dataclass(frozen=True)
class EstimatorConfig:
    regime: str = "spg"
    J: int = 1
    reward: RewardConfig = field(default_factory=RewardConfig)
    raml: RamlConfig = field(default_factory=RamlConfig)
    reward_weighting: bool = True

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.J < 1:
            raise ValueError("J must be >= 1")


@dataclass
class ExampleGradReport:
    targets: list
    weights: list
    masked_steps: int
    total_steps: int
    loss_proxy: float


def _accumulate(model, params, xs, zs, masks, weights, buffer, n_examples, trace=None):
    if trace is None:
        ll = model.accumulate(xs, zs, masks, weights, params, buffer)
    else:
        ll = model.accumulate(xs, zs, masks, weights, params, buffer, trace=trace)
    buffer.count += n_examples
    return ll


def grad_mle(model, params, examples, buffer) -> list:
    """Loss gradient of -log p(y | x)."""
    xs = [ex.x for ex in examples]
    zs = [mle_target(ex.y) for ex in examples]
    masks = [np.ones(len(z), bool) for z in zs]
    ll = _accumulate(model, params, xs, zs, masks, [-1.0] * len(zs), buffer, len(examples))
    return [ExampleGradReport([z], [-1.0], len(z), len(z), -float(l)) for z, l in zip(zs, ll)]


def grad_raml(model, params, examples, sampler: RamlSampler, rng, buffer, J: int = 1) -> list:
    """-(1/J) sum_j d log p(z_j | x) with z_j drawn from the reward distribution."""
    xs, zs = [], []
    for ex in examples:
        for _ in range(J):
            xs.append(ex.x)
            zs.append(sampler.sample(ex.y, rng))
    masks = [np.ones(len(z), bool) for z in zs]
    ll = _accumulate(model, params, xs, zs, masks, [-1.0 / J] * len(zs), buffer, len(examples))
    return [ExampleGradReport(zs[i * J:(i + 1) * J], [-1.0 / J] * J,
                              sum(len(z) for z in zs[i * J:(i + 1) * J]),
                              sum(len(z) for z in zs[i * J:(i + 1) * J]),
                              -float(np.mean(ll[i * J:(i + 1) * J])))
            for i in range(len(examples))]


def grad_pg(model, params, examples, rng, buffer, J: int = 1,
            reward_fn: Optional[Callable] = None, eos_id=EOS_ID) -> list:
    """-(1/J) sum_j R(z_j | y) d log p(z_j | x) with z_j ~ p(. | x); no baseline."""
    reward_fn = reward_fn or (lambda z, y: main_reward(z, y, eos_id))
    xs = [ex.x for ex in examples for _ in range(J)]
    zs = sample_pg_batch(model, params, xs, rng, eos_id)
    rewards = [reward_fn(z, examples[i // J].y) for i, z in enumerate(zs)]
    weights = [-r / J for r in rewards]
    keep = [i for i, w in enumerate(weights) if w != 0.0]
    ll = np.zeros(len(zs))
    if keep:
        ll[keep] = model.accumulate([xs[i] for i in keep], [zs[i] for i in keep],
                                    [np.ones(len(zs[i]), bool) for i in keep],
                                    [weights[i] for i in keep], params, buffer)
    buffer.count += len(examples)
    reports = []
    for i in range(len(examples)):
        sl = slice(i * J, (i + 1) * J)
        n = sum(len(z) for z in zs[sl])
        reports.append(ExampleGradReport(zs[sl], weights[sl], n, n,
                                         -float(np.mean(np.asarray(rewards[sl]) * ll[sl]))))
    return reports


def grad_bbspg(model, params, examples, config: EstimatorConfig, rng, buffer) -> list:
    """-(1/J) sum_j sum_{t: w_t != 0} d log p(z_t | x, z_<t) with (z, w) drawn by
    the bang-bang sampler.  With ``reward_weighting`` each target's term is
    scaled by R(z | y)."""
    J = config.J
    xs = [ex.x for ex in examples for _ in range(J)]
    ys = [ex.y for ex in examples for _ in range(J)]
    # the sampler feeds its own draws back, so its forward pass is reused
    trace = model.new_trace()
    outs = sample_spg_batch(model, params, xs, ys, config.reward, rng, trace=trace)
    zs = [o.z for o in outs]
    masks = [o.w != 0 for o in outs]
    if config.reward_weighting:
        scale = [min(1.0, max(0.0, o.reward)) for o in outs]
    else:
        scale = [1.0] * len(zs)
    weights = [-s / J for s in scale]
    ll = _accumulate(model, params, xs, zs, masks, weights, buffer, len(examples), trace)
    reports = []
    for i in range(len(examples)):
        sl = slice(i * J, (i + 1) * J)
        reports.append(ExampleGradReport(
            zs[sl], weights[sl],
            int(sum(m.sum() for m in masks[sl])),
            sum(len(z) for z in zs[sl]),
            -float(np.mean(ll[sl]))))
    return reports


def estimate(model, params, examples, config: EstimatorConfig, rng, buffer,
             raml_sampler: Optional[RamlSampler] = None) -> list:
    """Dispatch to the estimator named by ``config.regime``."""
    if config.regime == "mle":
        return grad_mle(model, params, examples, buffer)
    if config.regime == "raml":
        if raml_sampler is None:
            raise ValueError("RAML needs a RamlSampler")
        return grad_raml(model, params, examples, raml_sampler, rng, buffer, config.J)
    if config.regime == "pg":
        return grad_pg(model, params, examples, rng, buffer, config.J, eos_id=config.reward.eos_id)
    return grad_bbspg(model, params, examples, config, rng, buffer)
