import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zoft.bounds import (
    BoundInputs,
    blockwise_bound,
    expected_decrease,
    mezo_bound,
    optimal_scales,
    rank_coefficient,
    verify_bound,
)
from zoft.errors import BoundViolationError, DegenerateBoundError
from zoft.paramspace import BlockPartition, PerturbScales
from zoft.testbeds import QuadraticTask, make_rank_family


def identity_task(d):
    p = BlockPartition([("all", d)])
    return QuadraticTask(p, eigs=np.ones(d), theta_star=np.zeros(d))


class TestRankCoefficient:
    def test_hand_values(self):
        # (d*r + d - 2)/(d + 2) + 1
        assert rank_coefficient(4, 1.0) == pytest.approx(2.0)
        assert rank_coefficient(2, 2.0) == pytest.approx(2.0)
        assert rank_coefficient(10, 5.0) == pytest.approx(58.0 / 12.0 + 1.0)

    @given(d=st.integers(1, 500), r=st.floats(1.0, 100.0))
    @settings(max_examples=100, deadline=None)
    def test_equals_fourth_moment_form(self, d, r):
        # algebraic identity with d (r + 2) / (d + 2)
        assert rank_coefficient(d, r) == pytest.approx(d * (r + 2.0) / (d + 2.0),
                                                       rel=1e-12)

    def test_monotone_in_rank(self):
        assert rank_coefficient(16, 8.0) > rank_coefficient(16, 2.0)


class TestBoundInputs:
    def test_from_task_reads_structure(self):
        task = make_rank_family([3, 5], [1.0, 4.0], [2.0, 1.0], seed=0)
        theta = task.init_theta(0)
        inp = BoundInputs.from_task(task, theta, eta=0.1)
        assert inp.dim == 8
        assert list(inp.block_sizes) == [3, 5]
        assert np.allclose(inp.ranks, [1.0, 4.0])
        assert inp.smoothness == 2.0
        assert np.allclose(inp.grad_sqnorms, task.block_grad_sqnorms(theta))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            BoundInputs(eta=0.1, smoothness=1.0, block_sizes=[2, 2],
                        ranks=[1.0], grad_sqnorms=[1.0, 1.0])

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            BoundInputs(eta=-0.1, smoothness=1.0, block_sizes=[2],
                        ranks=[1.0], grad_sqnorms=[1.0])
        with pytest.raises(ValueError):
            BoundInputs(eta=0.1, smoothness=1.0, block_sizes=[2],
                        ranks=[1.0], grad_sqnorms=[-1.0])


class TestBoundOrdering:
    def inputs(self, seed=0, tau=0.0):
        task = make_rank_family([4, 8, 6], [1.0, 5.0, 3.0], [1.5, 1.0, 0.7], seed=seed)
        theta = task.init_theta(seed)
        inp = BoundInputs.from_task(task, theta, eta=0.05)
        inp.noise_trace = tau
        return inp

    def test_uniform_rank_reduces_to_mezo(self):
        # equal ranks, unit scales, no noise: the block sum telescopes
        task = make_rank_family([4, 6], [3.0, 3.0], [1.0, 1.0], seed=1)
        theta = task.init_theta(0)
        inp = BoundInputs.from_task(task, theta, eta=0.05)
        assert blockwise_bound(inp) == pytest.approx(mezo_bound(inp), rel=1e-12)

    def test_blockwise_never_above_mezo_at_unit_scales(self):
        for seed in range(5):
            inp = self.inputs(seed=seed)
            assert blockwise_bound(inp) <= mezo_bound(inp) + 1e-12

    def test_eta_zero_is_zero(self):
        inp = self.inputs()
        inp.eta = 0.0
        assert mezo_bound(inp) == 0.0
        assert blockwise_bound(inp) == 0.0

    def test_noise_inflates_quadratic_term(self):
        quiet = self.inputs(tau=0.0)
        noisy = self.inputs(tau=5.0)
        assert blockwise_bound(noisy) > blockwise_bound(quiet)


class TestOptimalScales:
    def test_symmetric_blocks_give_unit_scales(self):
        inp = BoundInputs(eta=0.1, smoothness=1.0, block_sizes=[3, 3],
                          ranks=[2.0, 2.0], grad_sqnorms=[1.0, 1.0])
        opt = optimal_scales(inp)
        assert np.allclose(opt.stds, 1.0, rtol=1e-10)

    def test_budget_pinned(self):
        task = make_rank_family([4, 8, 6], [1.0, 5.0, 3.0], [1.5, 1.0, 0.7], seed=2)
        inp = BoundInputs.from_task(task, task.init_theta(0), eta=0.05)
        opt = optimal_scales(inp)
        assert opt.budget() == pytest.approx(inp.dim, rel=1e-12)

    def test_shifts_variance_toward_high_gradient_block(self):
        inp = BoundInputs(eta=0.05, smoothness=1.0, block_sizes=[4, 4],
                          ranks=[2.0, 2.0], grad_sqnorms=[4.0, 0.5])
        opt = optimal_scales(inp)
        assert opt.stds[0] > 1.0 > opt.stds[1]

    def test_beats_exhaustive_grid(self):
        # one free variance on two blocks; scan it and compare bound values
        inp = BoundInputs(eta=0.08, smoothness=1.3, block_sizes=[3, 5],
                          ranks=[1.0, 4.0], grad_sqnorms=[2.0, 0.7],
                          noise_trace=0.5)
        d = float(inp.dim)
        best = np.inf
        for v0 in np.linspace(1e-6, d / 3.0 - 1e-6, 20001):
            v1 = (d - 3.0 * v0) / 5.0
            val = blockwise_bound(inp, np.sqrt([v0, v1]))
            best = min(best, val)
        achieved = blockwise_bound(inp, optimal_scales(inp))
        assert achieved <= best + 1e-10
        assert achieved == pytest.approx(best, rel=1e-6)

    def test_kkt_stationarity(self):
        inp = BoundInputs(eta=0.05, smoothness=2.0, block_sizes=[4, 8, 6],
                          ranks=[1.0, 5.0, 3.0], grad_sqnorms=[3.0, 1.0, 0.2])
        opt = optimal_scales(inp)
        v = opt.stds**2
        from zoft.bounds import _bound_coeffs
        a, b = _bound_coeffs(inp)
        # active blocks share one multiplier mu = (a_j - 2 b_j v_j) / d_j
        mus = [(a[j] - 2.0 * b[j] * v[j]) / inp.block_sizes[j]
               for j in range(3) if v[j] > 0]
        assert max(mus) - min(mus) <= 1e-10 * max(1.0, abs(max(mus)))

    def test_zero_gradient_block_gets_zero_variance(self):
        inp = BoundInputs(eta=0.1, smoothness=1.0, block_sizes=[4, 4],
                          ranks=[2.0, 2.0], grad_sqnorms=[1.0, 0.0])
        opt = optimal_scales(inp)
        assert opt.stds[1] == 0.0
        assert opt.budget() == pytest.approx(8.0, rel=1e-12)

    def test_degenerate_inputs_rejected(self):
        inp = BoundInputs(eta=0.1, smoothness=0.0, block_sizes=[4],
                          ranks=[2.0], grad_sqnorms=[1.0])
        with pytest.raises(DegenerateBoundError):
            optimal_scales(inp)


class TestExpectedDecrease:
    def test_closed_form_identity_hessian_gaussian(self):
        # H = I, |g|^2 = 1, unit scales: -eta + eta^2 (d + 2) / 2
        d = 6
        task = identity_task(d)
        theta = np.zeros(d)
        theta[0] = 1.0
        sc = PerturbScales.unit(task.partition)
        for eta in (0.01, 0.1):
            got, se = expected_decrease(task, theta, sc, eta, scheme="joint",
                                        law="gaussian")
            assert se is None
            assert got == pytest.approx(-eta + 0.5 * eta**2 * (d + 2), rel=1e-12)

    def test_closed_form_identity_hessian_sphere(self):
        # the sphere law shrinks the quadratic term by d / (d + 2)
        d = 6
        task = identity_task(d)
        theta = np.zeros(d)
        theta[0] = 1.0
        sc = PerturbScales.unit(task.partition)
        eta = 0.1
        got, _ = expected_decrease(task, theta, sc, eta, scheme="joint", law="sphere")
        assert got == pytest.approx(-eta + 0.5 * eta**2 * d, rel=1e-12)

    def test_single_block_schemes_agree(self):
        d = 5
        task = identity_task(d)
        theta = np.linspace(-1, 1, d)
        sc = PerturbScales(np.array([1.3]), task.partition)
        a, _ = expected_decrease(task, theta, sc, 0.05, scheme="blockwise")
        b, _ = expected_decrease(task, theta, sc, 0.05, scheme="joint")
        assert a == pytest.approx(b, rel=1e-12)

    @pytest.mark.parametrize("law", ["gaussian", "sphere"])
    @pytest.mark.parametrize("scheme", ["blockwise", "joint"])
    def test_monte_carlo_matches_closed_form(self, law, scheme):
        task = make_rank_family([3, 5], [1.0, 4.0], [1.2, 0.8], seed=3)
        theta = task.init_theta(1)
        sc = PerturbScales(np.array([0.7, 1.2]), task.partition)
        sc = PerturbScales(sc.stds * np.sqrt(task.partition.total / sc.budget()),
                           task.partition)
        closed, _ = expected_decrease(task, theta, sc, 0.05, scheme=scheme, law=law)
        mc, se = expected_decrease(task, theta, sc, 0.05, scheme=scheme, law=law,
                                   mode="monte_carlo", n=60_000, seed=4)
        assert abs(mc - closed) <= 4.0 * se

    def test_small_eta_limit_is_linear_term(self):
        task = make_rank_family([4, 4], [2.0, 3.0], [1.0, 1.0], seed=0)
        theta = task.init_theta(0)
        sc = PerturbScales.unit(task.partition)
        eta = 1e-8
        got, _ = expected_decrease(task, theta, sc, eta, scheme="joint")
        g = task.grad(theta)
        assert got == pytest.approx(-eta * float(g @ g), rel=1e-6)

    def test_rejects_stochastic_task(self):
        p = BlockPartition([("a", 3)])
        task = QuadraticTask(p, eigs=np.ones(3), theta_star=np.zeros(3),
                             noise_tau=1.0)
        with pytest.raises(ValueError):
            expected_decrease(task, np.ones(3), PerturbScales.unit(p), 0.1)

    def test_rejects_unknown_options(self):
        task = identity_task(3)
        sc = PerturbScales.unit(task.partition)
        with pytest.raises(ValueError):
            expected_decrease(task, np.ones(3), sc, 0.1, scheme="diagonal")
        with pytest.raises(ValueError):
            expected_decrease(task, np.ones(3), sc, 0.1, law="cauchy")
        with pytest.raises(ValueError):
            expected_decrease(task, np.ones(3), sc, 0.1, mode="quadrature")


class TestVerifyBound:
    def test_passes_on_heterogeneous_ranks(self):
        task = make_rank_family([8, 24], [2.0, 16.0], [1.0, 1.0], seed=0)
        theta = task.init_theta(0)
        report = verify_bound(task, theta, PerturbScales.unit(task.partition),
                              eta=0.03, n=60_000)
        assert report.ok, report.violations
        assert report.blockwise_optimal <= report.blockwise_unit + 1e-12
        assert report.blockwise_unit <= report.mezo_bound + 1e-12
        assert report.mc_mean <= report.blockwise_given + 4 * report.mc_stderr

    def test_gaussian_law_exceeds_bound_on_small_blocks(self):
        # the heavier gaussian fourth moment breaks the sphere-law bound
        task = make_rank_family([4, 4], [1.0, 4.0], [1.0, 1.0], seed=0)
        theta = task.init_theta(0)
        sc = PerturbScales.unit(task.partition)
        gaussian = verify_bound(task, theta, sc, eta=0.1, law="gaussian", n=200_000)
        sphere = verify_bound(task, theta, sc, eta=0.1, law="sphere", n=200_000)
        assert not gaussian.ok
        assert any("exceeds blockwise bound" in v for v in gaussian.violations)
        assert sphere.ok, sphere.violations

    def test_raise_on_violation(self):
        task = make_rank_family([4, 4], [1.0, 4.0], [1.0, 1.0], seed=0)
        theta = task.init_theta(0)
        sc = PerturbScales.unit(task.partition)
        with pytest.raises(BoundViolationError):
            verify_bound(task, theta, sc, eta=0.1, law="gaussian", n=200_000,
                         raise_on_violation=True)

    def test_eta_zero_report(self):
        task = make_rank_family([3, 5], [1.0, 4.0], [1.0, 1.0], seed=0)
        theta = task.init_theta(0)
        report = verify_bound(task, theta, PerturbScales.unit(task.partition),
                              eta=0.0, n=10_000)
        assert report.ok
        assert report.mezo_bound == 0.0
        assert np.all(report.optimal_stds == 1.0)

    def test_report_is_deterministic(self):
        task = make_rank_family([3, 5], [2.0, 3.0], [1.0, 1.0], seed=0)
        theta = task.init_theta(0)
        sc = PerturbScales.unit(task.partition)
        a = verify_bound(task, theta, sc, eta=0.02, n=20_000, seed=9)
        b = verify_bound(task, theta, sc, eta=0.02, n=20_000, seed=9)
        assert a.mc_mean == b.mc_mean and a.mc_stderr == b.mc_stderr
