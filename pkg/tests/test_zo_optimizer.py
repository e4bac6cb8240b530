import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zoft.errors import DivergenceError, InvalidScaleError
from zoft.paramspace import (
    BlockPartition,
    NoiseSeed,
    ParamVector,
    PerturbScales,
    sample_block_noise,
)
from zoft.testbeds import QuadraticTask, make_rank_family
from zoft import pertnn
from zoft.zo_optimizer import (
    LossPair,
    OptState,
    ZOConfig,
    apply_estimate,
    normalize_scales,
    run_finetune,
    spsa_estimate,
    step,
    step_features,
)


def partition():
    return BlockPartition([("a", 3), ("b", 5)])


def quadratic():
    rng = np.random.default_rng(1)
    return QuadraticTask(partition(), eigs=rng.uniform(0.2, 2.0, 8),
                         theta_star=rng.normal(size=8))


class TestNormalizeScales:
    def test_budget_is_dimension(self):
        p = partition()
        raw = PerturbScales(np.array([0.3, 7.0]), p)
        out = normalize_scales(raw)
        assert out.budget() == pytest.approx(p.total, rel=1e-15)

    def test_ratios_preserved(self):
        p = partition()
        raw = PerturbScales(np.array([0.3, 7.0]), p)
        out = normalize_scales(raw)
        assert out.stds[1] / out.stds[0] == pytest.approx(7.0 / 0.3, rel=1e-12)

    def test_unit_scales_fixed_point(self):
        out = normalize_scales(PerturbScales.unit(partition()))
        assert np.allclose(out.stds, 1.0, rtol=1e-15)

    def test_rejects_nonpositive(self):
        with pytest.raises(InvalidScaleError):
            normalize_scales(
                PerturbScales(np.array([1.0, 0.0]), partition(), allow_zero=True)
            )

    @given(s1=st.floats(1e-3, 1e3), s2=st.floats(1e-3, 1e3))
    @settings(max_examples=100, deadline=None)
    def test_budget_property(self, s1, s2):
        p = partition()
        out = normalize_scales(PerturbScales(np.array([s1, s2]), p))
        assert out.budget() == pytest.approx(p.total, rel=1e-12)


class TestSPSAEstimate:
    def test_coefficient_exact_on_quadratic(self):
        # central differences are exact for quadratics: c = u . grad
        task = quadratic()
        theta = ParamVector(task.init_theta(0), partition())
        sc = PerturbScales(np.array([0.5, 1.5]), partition())
        seed = NoiseSeed(9, stream=3)
        g = task.grad(theta.values.copy())
        est, pair = spsa_estimate(theta, sc, seed, 1e-3, lambda v: task.loss(v))
        u = sample_block_noise(partition(), sc, seed)
        assert est.coeff == pytest.approx(float(u @ g), rel=1e-8)
        assert pair.plus != pair.minus

    def test_theta_restored(self):
        task = quadratic()
        start = task.init_theta(0)
        theta = ParamVector(start.copy(), partition())
        spsa_estimate(theta, PerturbScales.unit(partition()), NoiseSeed(1), 1e-3,
                      lambda v: task.loss(v))
        assert np.allclose(theta.values, start, rtol=1e-12, atol=0)

    def test_estimator_mean_is_preconditioned_gradient(self):
        # E[c u] = diag(per-coordinate variance) . grad
        task = quadratic()
        theta = ParamVector(task.init_theta(3), partition())
        sc = PerturbScales(np.array([2.0, 0.5]), partition())
        g = task.grad(theta.values.copy())
        n = 20_000
        acc = np.zeros(8)
        sq = np.zeros(8)
        for k in range(n):
            seed = NoiseSeed(0, stream=k)
            est, _ = spsa_estimate(theta, sc, seed, 1e-3, lambda v: task.loss(v))
            ghat = est.coeff * sample_block_noise(partition(), sc, seed)
            acc += ghat
            sq += ghat**2
        mean = acc / n
        se = np.sqrt((sq / n - mean**2) / n)
        expected = sc.per_coordinate() ** 2 * g
        assert np.all(np.abs(mean - expected) < 4 * se)


class TestApplyEstimate:
    def test_regenerates_the_same_direction(self):
        task = quadratic()
        theta = ParamVector(task.init_theta(0), partition())
        sc = PerturbScales(np.array([1.0, 2.0]), partition())
        seed = NoiseSeed(4, stream=1)
        est, _ = spsa_estimate(theta, sc, seed, 1e-3, lambda v: task.loss(v))
        before = theta.values.copy()
        apply_estimate(theta, est, 0.1)
        u = sample_block_noise(partition(), sc, seed)
        assert np.allclose(theta.values, before - 0.1 * est.coeff * u,
                           rtol=1e-12, atol=1e-15)


class TestStep:
    def test_mezo_uses_unit_scales(self):
        task = quadratic()
        theta = ParamVector(task.init_theta(0), partition())
        rec = step(theta, OptState(), 0, ZOConfig(0.05, 1, mode="mezo", seed=0),
                   task.loss)
        assert np.all(rec.scales == 1.0)

    def test_budget_invariant_every_step(self):
        task = quadratic()
        theta = ParamVector(task.init_theta(0), partition())
        state = OptState()
        net = pertnn.init(partition(), hidden=8, seed=NoiseSeed(2))
        config = ZOConfig(0.05, 1, mode="finetuner", seed=0)
        d = partition().total
        for t in range(30):
            rec = step(theta, state, t, config, task.loss, net)
            budget = float(partition().sizes @ rec.scales**2)
            assert budget == pytest.approx(d, rel=1e-12)

    def test_finetuner_requires_network(self):
        task = quadratic()
        theta = ParamVector(task.init_theta(0), partition())
        with pytest.raises(ValueError):
            step(theta, OptState(), 0, ZOConfig(0.05, 1, mode="finetuner", seed=0),
                 task.loss)

    def test_records_pre_update_loss_and_time(self):
        task = quadratic()
        theta = ParamVector(task.init_theta(0), partition())
        state = OptState()
        config = ZOConfig(0.05, 2, mode="mezo", seed=0)
        l0 = task.loss(theta.values.copy())
        rec1 = step(theta, state, 0, config, task.loss)
        rec2 = step(theta, state, 0, config, task.loss)
        assert rec1.t == 1 and rec2.t == 2
        assert rec1.loss == pytest.approx(l0)

    def test_step_features_layout(self):
        theta = ParamVector(np.arange(8.0), partition())
        f = step_features(theta, LossPair(2.0, 1.0), np.array([0.5, 0.25]))
        assert f.shape == (2, 5)
        assert np.all(f[:, 0] == 2.0) and np.all(f[:, 1] == 1.0)
        assert f[0, 2] == 0.5 and f[1, 2] == 0.25
        assert f[0, 3] == pytest.approx(np.mean(np.arange(3.0)))
        assert f[1, 4] == pytest.approx(np.var(np.arange(3.0, 8.0)))


class TestRunFinetune:
    def test_loss_decreases_on_easy_quadratic(self):
        task = make_rank_family([4, 4], [4.0, 4.0], [1.0, 1.0], seed=0)
        records = run_finetune(task, ZOConfig(0.1, 300, mode="mezo", seed=0))
        assert len(records) == 300
        tail = np.mean([r.loss for r in records[-30:]])
        assert tail < 0.2 * records[0].loss

    def test_deterministic(self):
        task = quadratic()
        a = run_finetune(task, ZOConfig(0.05, 50, mode="mezo", seed=7))
        b = run_finetune(task, ZOConfig(0.05, 50, mode="mezo", seed=7))
        assert [r.loss for r in a] == [r.loss for r in b]

    def test_seed_changes_trajectory(self):
        task = quadratic()
        a = run_finetune(task, ZOConfig(0.05, 20, mode="mezo", seed=7))
        b = run_finetune(task, ZOConfig(0.05, 20, mode="mezo", seed=8))
        assert [r.loss for r in a] != [r.loss for r in b]

    def test_divergence_guard(self):
        task = make_rank_family([4, 4], [4.0, 4.0], [5.0, 5.0], seed=0)
        with pytest.raises(DivergenceError):
            run_finetune(task, ZOConfig(5.0, 500, mode="mezo", seed=0))

    def test_finetuner_runs_with_fresh_network(self):
        task = quadratic()
        net = pertnn.init(partition(), hidden=8, seed=NoiseSeed(0))
        records = run_finetune(task, ZOConfig(0.05, 40, mode="finetuner", seed=0), net)
        assert len(records) == 40
        assert all(np.all(np.isfinite(r.scales)) for r in records)


class TestZOConfigValidation:
    @pytest.mark.parametrize("kwargs", [
        dict(learning_rate=-1.0, steps=1),
        dict(learning_rate=0.1, steps=-1),
        dict(learning_rate=0.1, steps=1, epsilon=0.0),
        dict(learning_rate=0.1, steps=1, batch_size=0),
        dict(learning_rate=0.1, steps=1, mode="adam"),
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            ZOConfig(**kwargs)
