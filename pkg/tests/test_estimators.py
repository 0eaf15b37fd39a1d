import numpy as np
import pytest

from softmax_pg.data import Example
from softmax_pg.estimators import (EstimatorConfig, estimate, grad_bbspg, grad_mle, grad_pg,
                                   grad_raml)
from softmax_pg.model import GradientBuffer, TabularModel
from softmax_pg.oracle import (EnumerationSpace, exact_bbspg_gradient, exact_pg_gradient,
                               exact_raml_gradient, unbiasedness_z)
from softmax_pg.rewards import EOS_ID, RewardConfig, main_reward
from softmax_pg.samplers import RamlConfig, RamlSampler

NO_EOS = dict(use_eos=False, eos_id=None)


def tabular(V, T, scale=1.0, seed=0):
    m = TabularModel(V, T)
    return m, m.init_params(np.random.default_rng(seed), scale)


def mean_grad(fn, n, rng, params):
    buf = GradientBuffer.zeros_like(params)
    fn(n, rng, buf)
    return buf.flat() / buf.count


class TestMle:
    def test_equals_weighted_accumulate(self):
        m, p = tabular(6, 4)
        ex = Example((2,), (3, 4, EOS_ID))
        a = GradientBuffer.zeros_like(p)
        grad_mle(m, p, [ex], a)
        b = GradientBuffer.zeros_like(p)
        m.accumulate_masked_loglik_grad(ex.x, ex.y, np.ones(3, bool), -1.0, p, b)
        assert np.array_equal(a.flat(), b.flat()) and a.count == 1

    def test_uniform_model_gradient(self):
        V = 5
        m, p = tabular(V, 3, 0.0)
        buf = GradientBuffer.zeros_like(p)
        grad_mle(m, p, [Example((0,), (3, 4, EOS_ID))], buf)
        g = buf.grads["logits"][0]
        for prev, tok in ((m.start_token, 3), (3, 4), (4, EOS_ID)):
            assert g[prev, tok] == pytest.approx(1 / V - 1, abs=1e-15)


class TestRaml:
    def test_tiny_tau_matches_mle(self):
        m, p = tabular(3, 2)
        ex = Example((0,), (1, 2))
        sampler = RamlSampler(RamlConfig(tau=1e-6), range(3), None)
        a, b = GradientBuffer.zeros_like(p), GradientBuffer.zeros_like(p)
        grad_raml(m, p, [ex] * 20, sampler, np.random.default_rng(0), a)
        grad_mle(m, p, [ex] * 20, b)
        np.testing.assert_allclose(a.flat(), b.flat(), atol=1e-12)

    def test_j_targets_reported(self):
        m, p = tabular(3, 2)
        sampler = RamlSampler(RamlConfig(), range(3), None)
        buf = GradientBuffer.zeros_like(p)
        reports = grad_raml(m, p, [Example((0,), (1, 2))], sampler, np.random.default_rng(0), buf, J=4)
        assert len(reports[0].targets) == 4 and buf.count == 1

    def test_unbiased_on_enumerable_instance(self):
        V, T = 3, 2
        m, p = tabular(V, T, seed=1)
        ex = Example((0,), (1, 2))
        sampler = RamlSampler(RamlConfig(tau=0.85), range(V), None)
        exact = exact_raml_gradient(ex.x, ex.y, 0.85, p, m, EnumerationSpace(V, T))
        fn = lambda n, r: mean_grad(lambda k, rr, b: grad_raml(m, p, [ex] * k, sampler, rr, b), n, r, p)
        z, _ = unbiasedness_z(fn, exact, 40000, np.random.default_rng(2))
        assert z < 5


class TestPg:
    def test_zero_reward_leaves_buffer(self):
        m, p = tabular(4, 3)
        buf = GradientBuffer.zeros_like(p)
        grad_pg(m, p, [Example((0,), (1, 2, 3))] * 10, np.random.default_rng(0), buf,
                reward_fn=lambda z, y: 0.0, eos_id=None)
        assert not np.any(buf.flat()) and buf.count == 10

    def test_unbiased_on_enumerable_instance(self):
        V, T = 3, 2
        m, p = tabular(V, T, seed=3)
        ex = Example((0,), (1, 2))
        exact = exact_pg_gradient(ex.x, ex.y, p, m, EnumerationSpace(V, T))
        fn = lambda n, r: mean_grad(lambda k, rr, b: grad_pg(m, p, [ex] * k, rr, b, eos_id=None), n, r, p)
        z, _ = unbiasedness_z(fn, exact, 40000, np.random.default_rng(4))
        assert z < 5

    def test_single_sample_variance_exceeds_spg(self):
        # PG has no baseline; SPG's targets sit near y so its terms agree more
        V, T = 4, 3
        m, p = tabular(V, T, seed=5)
        ex = Example((0,), (1, 2, 3))
        cfg = EstimatorConfig("spg", reward=RewardConfig(p_drop=0.4, **NO_EOS), reward_weighting=False)

        def per_draw(fn, n, seed):
            rng = np.random.default_rng(seed)
            out = []
            for _ in range(n):
                buf = GradientBuffer.zeros_like(p)
                fn(rng, buf)
                out.append(buf.flat())
            return np.array(out)

        pg = per_draw(lambda r, b: grad_pg(m, p, [ex], r, b, eos_id=None), 10**4, 6)
        spg = per_draw(lambda r, b: grad_bbspg(m, p, [ex], cfg, r, b), 10**4, 7)
        pg_var, spg_var = pg.var(axis=0).sum(), spg.var(axis=0).sum()
        # relative to the squared mean gradient, PG is far noisier
        pg_rel = pg_var / np.sum(pg.mean(axis=0) ** 2)
        spg_rel = spg_var / np.sum(spg.mean(axis=0) ** 2)
        print(f"PG/SPG relative variance factor: {pg_rel / spg_rel:.2f}")
        assert pg_rel > spg_rel


class TestBbspg:
    def test_all_dropped_leaves_buffer(self):
        m, p = tabular(6, 4)
        cfg = EstimatorConfig("spg", reward=RewardConfig(p_drop=1.0))
        buf = GradientBuffer.zeros_like(p)
        reports = grad_bbspg(m, p, [Example((0,), (3, 4, EOS_ID))] * 50, cfg, np.random.default_rng(0), buf)
        assert not np.any(buf.flat())
        assert all(r.masked_steps == 0 for r in reports)

    def test_p_drop_zero_matches_mle(self):
        m, p = tabular(8, 4)
        ex = Example((0,), (5, EOS_ID))
        for weighting in (True, False):
            cfg = EstimatorConfig("spg", reward=RewardConfig(p_drop=0.0), reward_weighting=weighting)
            a, b = GradientBuffer.zeros_like(p), GradientBuffer.zeros_like(p)
            grad_bbspg(m, p, [ex] * 5, cfg, np.random.default_rng(1), a)
            grad_mle(m, p, [ex] * 5, b)
            scale = main_reward(ex.y, ex.y) if weighting else 1.0  # 1/3 for a one-word y
            np.testing.assert_allclose(a.flat(), scale * b.flat(), atol=1e-13)

    def test_only_weighted_steps_touch_gradient(self):
        m, p = tabular(6, 5)
        seen = []
        original = m.accumulate

        def spy(xs, zs, masks, weights, params, buffer, **kw):
            seen.extend(masks)
            return original(xs, zs, masks, weights, params, buffer, **kw)

        m.accumulate = spy
        cfg = EstimatorConfig("spg", reward=RewardConfig(p_drop=0.5))
        reports = grad_bbspg(m, p, [Example((0,), (3, 4, 5, EOS_ID))] * 100, cfg,
                             np.random.default_rng(2), GradientBuffer.zeros_like(p))
        from softmax_pg.samplers import sample_spg_batch
        replay = sample_spg_batch(m, p, [(0,)] * 100, [(3, 4, 5, EOS_ID)] * 100, cfg.reward,
                                  np.random.default_rng(2))
        for mask, o in zip(seen, replay):
            assert np.array_equal(mask, o.w != 0)
        assert sum(r.masked_steps for r in reports) == sum(int(m_.sum()) for m_ in seen)

    def test_unbiased_on_enumerable_instance(self):
        V, T = 4, 3
        m, p = tabular(V, T, seed=8)
        ex = Example((0,), (1, 3, 2))
        rc = RewardConfig(p_drop=0.4, **NO_EOS)
        for weighting in (False, True):
            cfg = EstimatorConfig("spg", reward=rc, reward_weighting=weighting)
            exact = exact_bbspg_gradient(ex.x, ex.y, p, m, EnumerationSpace(V, T), rc, weighting)
            fn = lambda n, r: mean_grad(lambda k, rr, b: grad_bbspg(m, p, [ex] * k, cfg, rr, b), n, r, p)
            z, _ = unbiasedness_z(fn, exact, 40000, np.random.default_rng(9))
            assert z < 5


class TestDispatch:
    def test_regimes(self):
        m, p = tabular(6, 4)
        exs = [Example((0,), (3, 4, EOS_ID))] * 3
        sampler = RamlSampler(RamlConfig(), range(3, 6))
        for regime in ("mle", "raml", "pg", "spg"):
            buf = GradientBuffer.zeros_like(p)
            reports = estimate(m, p, exs, EstimatorConfig(regime), np.random.default_rng(0), buf, sampler)
            assert len(reports) == 3 and buf.count == 3

    def test_raml_needs_sampler(self):
        m, p = tabular(6, 4)
        with pytest.raises(ValueError):
            estimate(m, p, [Example((0,), (3, EOS_ID))], EstimatorConfig("raml"),
                     np.random.default_rng(0), GradientBuffer.zeros_like(p))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EstimatorConfig("reinforce")
        with pytest.raises(ValueError):
            EstimatorConfig("pg", J=0)
