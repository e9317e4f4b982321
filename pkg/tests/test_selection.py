import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mixsmooth import (
    Dataset,
    FitResult,
    GroupingFactor,
    KernelSpec,
    ModelSpec,
    OptimizationError,
    ScoreConfig,
    ScoreUndefinedError,
    SmoothParams,
    SplineFamily,
    Truth,
    build_design,
    eta_matrix_dense,
    loss_l1,
    loss_l2,
    loss_l3,
    optimize,
    optimize_objective,
    risk_r1,
    risk_r2,
    score_u,
    score_v,
    sigma_hat,
    smoothing_matrix_dense,
    solve_fit,
)
from mixsmooth.selection import SearchBox, evaluate_grid, make_scorer, pick_best
from mixsmooth.solver import NormalEquations

from conftest import grouped_instance, jittered_x


def synthetic_fit(n, rss, tr_a, tr_a2=0.0):
    z = np.zeros(n)
    return FitResult(c_hat=z, b_hat=np.zeros(0), eta_hat=z, y_hat=z,
                     residuals=z, tr_a=tr_a, tr_a2=tr_a2, rss=rss,
                     params=SmoothParams(0.0), n=n)


class TestScores:
    def test_v_perfect_fit_is_zero(self):
        assert score_v(synthetic_fit(10, 0.0, 2.0)) == 0.0

    def test_v_direct_substitution(self):
        fit = synthetic_fit(2, 0.5, 1.0)
        assert score_v(fit, 1.0) == pytest.approx(1.0, rel=1e-15)
        assert score_v(fit, 1.4) == pytest.approx(2.7777777777777777, rel=1e-12)

    def test_v_denominator_failure(self):
        with pytest.raises(ScoreUndefinedError):
            score_v(synthetic_fit(10, 1.0, 10.0))
        with pytest.raises(ScoreUndefinedError):
            score_v(synthetic_fit(10, 1.0, 8.0), alpha=1.4)

    def test_u_values(self):
        assert score_u(synthetic_fit(5, 0.0, 0.0), 0.25) == 0.0
        fit = synthetic_fit(100, 25.0, 10.0)
        assert score_u(fit, 0.25, 1.0) == pytest.approx(0.30, rel=1e-14)
        assert score_u(fit, 0.25, 1.4) == pytest.approx(0.32, rel=1e-14)

    def test_u_needs_positive_variance(self):
        with pytest.raises(ValueError):
            score_u(synthetic_fit(5, 1.0, 1.0), 0.0)

    def test_sigma_hat(self):
        assert sigma_hat(synthetic_fit(10, 0.0, 3.0)) == 0.0
        assert sigma_hat(synthetic_fit(100, 24.0, 4.0)) == pytest.approx(0.25)
        with pytest.raises(ScoreUndefinedError):
            sigma_hat(synthetic_fit(10, 1.0, 10.0))

    def test_v_scale_equivariance_in_value(self):
        fit1 = synthetic_fit(50, 2.0, 5.0)
        fit9 = synthetic_fit(50, 9 * 2.0, 5.0)  # y scaled by 3 scales rss by 9
        assert score_v(fit9) == pytest.approx(9 * score_v(fit1), rel=1e-14)


def make_truth_instance(seed=0, n=24, g=3):
    rng = np.random.default_rng(seed)
    x = jittered_x(rng, n)
    assign = np.concatenate([np.arange(1, g + 1), rng.integers(1, g + 1, n - g)])
    rng.shuffle(assign)
    spec = ModelSpec(KernelSpec(), (GroupingFactor("g", tuple(assign)),))
    Z = (assign[:, None] == np.arange(1, g + 1)[None, :]).astype(float)
    b = rng.normal(0, 0.5, g)
    eta = 3 * np.sin(2 * np.pi * x)
    y = eta + Z @ b + rng.normal(0, 0.5, n)
    dm = build_design(spec, Dataset(y=y, x=x))
    truth = Truth(eta=eta, b=b, sigma2=0.25, b_var=np.full(g, 0.25),
                  real_mask=(True,))
    return dm, y, truth


class TestLosses:
    def test_l1_exact_fit_zero(self):
        dm, y, truth = make_truth_instance()
        fit = solve_fit(dm, y, SmoothParams(-2.0, (0.0,)))
        fit.y_hat = truth.eta + dm.Z @ truth.b
        assert loss_l1(fit, truth, dm) <= 1e-30

    def test_l1_direct_value(self):
        dm, y, truth = make_truth_instance()
        fit = solve_fit(dm, y, SmoothParams(-2.0, (0.0,)))
        fit.y_hat = truth.eta + dm.Z @ truth.b
        fit.y_hat = fit.y_hat + np.concatenate([[0.1, -0.1], np.zeros(dm.n - 2)])
        assert loss_l1(fit, truth, dm) == pytest.approx(0.02 / dm.n, rel=1e-12)

    def test_l1_equals_dense_hat_path(self):
        dm, y, truth = make_truth_instance(3)
        sp = SmoothParams(-1.5, (0.4,))
        fit = solve_fit(dm, y, sp)
        A = smoothing_matrix_dense(dm, sp)
        direct = np.mean((A @ y - truth.eta - dm.Z @ truth.b) ** 2)
        assert loss_l1(fit, truth, dm) == pytest.approx(direct, rel=1e-9)

    def test_l2_zero_cases(self):
        dm, y, truth = make_truth_instance()
        fit = solve_fit(dm, y, SmoothParams(-2.0, (0.0,)))
        fit.eta_hat = truth.eta.copy()
        assert loss_l2(fit, truth, dm) == 0.0
        # a discrepancy inside the random-effect column space is invisible
        fit.eta_hat = truth.eta + dm.Z @ np.array([1.0, -2.0, 0.5])
        assert loss_l2(fit, truth, dm) == pytest.approx(0.0, abs=1e-25)

    def test_l2_matches_explicit_projection(self):
        dm, y, truth = make_truth_instance(5)
        fit = solve_fit(dm, y, SmoothParams(-1.0, (0.2,)))
        P = np.eye(dm.n) - dm.Z @ np.linalg.pinv(dm.Z.T @ dm.Z) @ dm.Z.T
        d = fit.eta_hat - truth.eta
        assert loss_l2(fit, truth, dm) == pytest.approx(d @ P @ d / dm.n, rel=1e-9)

    def test_l3_reduces_to_l1_and_l2(self):
        dm, y, truth = make_truth_instance(7)
        fit = solve_fit(dm, y, SmoothParams(-1.2, (0.1,)))
        all_real = Truth(truth.eta, truth.b, truth.sigma2, truth.b_var, (True,))
        all_latent = Truth(truth.eta, truth.b, truth.sigma2, truth.b_var, (False,))
        assert abs(loss_l3(fit, all_real, dm) - loss_l1(fit, truth, dm)) <= 1e-12
        assert abs(loss_l3(fit, all_latent, dm) - loss_l2(fit, truth, dm)) <= 1e-12

    def test_l3_mixture_matches_explicit_projection(self):
        rng = np.random.default_rng(9)
        n = 24
        x = jittered_x(rng, n)
        subj = tuple(np.repeat([1, 2, 3, 4], n // 4))
        clus = tuple(np.repeat([1, 2], n // 2))
        spec = ModelSpec(KernelSpec(), (GroupingFactor("s", subj),
                                        GroupingFactor("c", clus)))
        b = rng.normal(0, 0.5, 6)
        eta = 3 * np.sin(2 * np.pi * x)
        dm = build_design(spec, Dataset(y=eta, x=x))
        y = eta + dm.Z @ b + rng.normal(0, 0.5, n)
        dm = build_design(spec, Dataset(y=y, x=x))
        truth = Truth(eta, b, 0.25, np.full(6, 0.25), (True, False))
        fit = solve_fit(dm, y, SmoothParams(-1.5, (0.0, 0.0)))
        z1, z2 = dm.Z[:, :4], dm.Z[:, 4:]
        v = fit.eta_hat + z1 @ fit.b_hat[:4] - truth.eta - z1 @ b[:4]
        P = np.eye(n) - z2 @ np.linalg.pinv(z2.T @ z2) @ z2.T
        assert loss_l3(fit, truth, dm) == pytest.approx(v @ P @ v / n, rel=1e-9)

    def test_truth_length_validation(self):
        dm, y, truth = make_truth_instance()
        fit = solve_fit(dm, y, SmoothParams(-2.0, (0.0,)))
        bad = Truth(truth.eta[:-1], truth.b, 0.25, truth.b_var, (True,))
        with pytest.raises(ValueError):
            loss_l1(fit, bad, dm)


class TestRisks:
    def test_r1_projection_limit(self, rng):
        # flat truth, no random effects, huge lambda: only the projection
        # variance term sigma2/n * m survives
        n = 30
        x = jittered_x(rng, n)
        dm = build_design(ModelSpec(KernelSpec()), Dataset(y=np.zeros(n), x=x))
        truth = Truth(np.zeros(n), np.zeros(0), 0.25, np.zeros(0), ())
        val = risk_r1(dm, SmoothParams(8.0), truth)
        assert val == pytest.approx(0.25 * dm.m / n, rel=1e-6)

    def test_r1_sigma_term_matches_trace(self, rng):
        dm, y, sp = grouped_instance(rng)
        truth = Truth(np.zeros(dm.n), np.zeros(dm.p), 0.25, np.zeros(dm.p),
                      (True,))
        fit = solve_fit(dm, y, sp)
        assert risk_r1(dm, sp, truth) == pytest.approx(
            0.25 * fit.tr_a2 / dm.n, rel=1e-9)

    def test_r1_matches_monte_carlo(self):
        dm, y, truth = make_truth_instance(21, n=30)
        sp = SmoothParams(-2.0, (0.0,))
        A = smoothing_matrix_dense(dm, sp)
        rng = np.random.default_rng(77)
        draws = 1200
        losses = np.empty(draws)
        for k in range(draws):
            b = rng.normal(0, np.sqrt(truth.b_var))
            eps = rng.normal(0, 0.5, dm.n)
            yk = truth.eta + dm.Z @ b + eps
            losses[k] = np.mean((A @ yk - truth.eta - dm.Z @ b) ** 2)
        se = losses.std(ddof=1) / math.sqrt(draws)
        assert abs(losses.mean() - risk_r1(dm, sp, truth)) <= 3 * se

    def test_r2_without_random_effects_mirrors_r1(self, rng):
        n = 25
        x = jittered_x(rng, n)
        dm = build_design(ModelSpec(KernelSpec()), Dataset(y=np.zeros(n), x=x))
        eta = 3 * np.sin(2 * np.pi * x)
        truth = Truth(eta, np.zeros(0), 0.25, np.zeros(0), ())
        sp = SmoothParams(-1.0)
        assert risk_r2(dm, sp, truth) == pytest.approx(risk_r1(dm, sp, truth),
                                                       rel=1e-9)

    def test_r1_dominates_r2(self, rng):
        for _ in range(5):
            dm, y, sp = grouped_instance(rng)
            truth = Truth(3 * np.sin(2 * np.pi * dm.data.x), np.zeros(dm.p),
                          0.25, np.full(dm.p, 0.25), (True,))
            assert risk_r1(dm, sp, truth) >= risk_r2(dm, sp, truth) - 1e-9

    def test_size_cap(self):
        rng = np.random.default_rng(1)
        x = jittered_x(rng, 2100)
        dm = build_design(
            ModelSpec(KernelSpec(), basis=__import__("mixsmooth").SubsetBasis(20, 0)),
            Dataset(y=np.zeros(2100), x=x))
        truth = Truth(np.zeros(2100), np.zeros(0), 1.0, np.zeros(0), ())
        with pytest.raises(ValueError, match="cap"):
            risk_r1(dm, SmoothParams(0.0), truth)


class TestOptimize:
    def test_linear_target(self, rng):
        x = jittered_x(rng, 30)
        y = 1.0 + 0.5 * x
        dm = build_design(ModelSpec(KernelSpec()), Dataset(y=y, x=x))
        params, fit, score = optimize(dm, y, ScoreConfig("gcv"))
        assert fit.rss <= 1e-8 * (y @ y)

    def test_grid_dominance(self):
        dm, y, truth = make_truth_instance(13)
        ne = NormalEquations(dm, y)
        scorer = make_scorer(ScoreConfig("gcv"))
        entries = evaluate_grid(ne)
        grid_best = min(
            s for s in (_safe(scorer, f) for _, f in entries) if s is not None)
        _, _, score = optimize(dm, y, ScoreConfig("gcv"))
        assert score <= grid_best + 1e-12

    def test_oracle_mode_dominates_v_selection(self):
        dm, y, truth = make_truth_instance(17)
        _, fit_v, _ = optimize(dm, y, ScoreConfig("gcv"))
        objective = lambda f: loss_l1(f, truth, dm)  # noqa: E731
        _, fit_o, loss_o = optimize_objective(dm, y, objective)
        assert loss_o <= objective(fit_v) + 1e-6

    def test_argmin_scale_invariance(self):
        dm, y, truth = make_truth_instance(23)
        p1, _, s1 = optimize(dm, y, ScoreConfig("gcv"))
        p3, _, s3 = optimize(dm, 3.0 * y, ScoreConfig("gcv"))
        assert s3 == pytest.approx(9.0 * s1, rel=1e-3)
        assert p3.log10_lambda == pytest.approx(p1.log10_lambda, abs=0.05)

    def test_deterministic(self):
        dm, y, truth = make_truth_instance(29)
        cfg = ScoreConfig("gcv", alpha=1.4)
        a = optimize(dm, y, cfg)
        b = optimize(dm, y, cfg)
        assert a[0] == b[0]
        assert a[2] == b[2]

    def test_all_grid_points_undefined(self):
        # alpha so large that n - alpha*trA < 0 everywhere
        dm, y, truth = make_truth_instance(31, n=12)
        with pytest.raises(OptimizationError):
            optimize(dm, y, ScoreConfig("gcv", alpha=7.0),
                     SearchBox(log10_lambda=(-8.0, -8.0)))

    def test_tie_break_prefers_largest_lambda(self, rng):
        x = jittered_x(rng, 30)
        y = 1.0 + 0.5 * x  # every lambda fits exactly, score ~ 0
        dm = build_design(ModelSpec(KernelSpec()), Dataset(y=y, x=x))
        ne = NormalEquations(dm, y)
        sp, _, _ = pick_best(evaluate_grid(ne), make_scorer(ScoreConfig("gcv")))
        assert sp.log10_lambda == 2.0


class TestConfigValidation:
    def test_alpha_below_one(self):
        with pytest.raises(ValueError):
            ScoreConfig("gcv", alpha=0.9)

    def test_unbiased_needs_sigma2(self):
        with pytest.raises(ValueError):
            ScoreConfig("unbiased_risk")

    def test_unknown_criterion(self):
        with pytest.raises(ValueError):
            ScoreConfig("aic")


def _safe(scorer, fit):
    if fit is None:
        return None
    try:
        return scorer(fit)
    except ScoreUndefinedError:
        return None


class TestThetaFamilies:
    def _exp_instance(self, seed, theta_true):
        from mixsmooth import GroupingFactor, exp_transform

        rng = np.random.default_rng(seed)
        n = 30
        x = jittered_x(rng, n)
        assign = tuple(np.concatenate([[1, 2], rng.integers(1, 3, n - 2)]))
        # a decaying target favors a positive warp rate
        y = 2.0 * np.exp(-3.0 * x) + rng.normal(0, 0.05, n)
        spec = ModelSpec(
            KernelSpec(SplineFamily.EXPONENTIAL, domain_upper=1.0,
                       theta=theta_true),
            (GroupingFactor("g", assign),))
        dm = build_design(spec, Dataset(y=y, x=x))
        return dm, y

    def test_exponential_family_optimize_is_deterministic(self):
        dm, y = self._exp_instance(41, 0.5)
        a = optimize(dm, y, ScoreConfig("gcv", alpha=1.4))
        b = optimize(dm, y, ScoreConfig("gcv", alpha=1.4))
        assert a[0] == b[0] and a[2] == b[2]
        # the returned fit carries the kernel weights actually used
        assert a[1].params.kernel_theta == a[0].kernel_theta

    def test_zero_rate_candidate_selected_for_linear_target(self, rng):
        # a linear target is in the unpenalized space of the plain cubic
        # family, so the exact zero-rate branch should win (ties prefer it)
        x = jittered_x(rng, 30)
        y = 1.0 + 2.0 * x
        spec = ModelSpec(KernelSpec(SplineFamily.EXPONENTIAL, domain_upper=1.0,
                                    theta=0.3))
        dm = build_design(spec, Dataset(y=y, x=x))
        params, fit, _ = optimize(dm, y, ScoreConfig("gcv"))
        assert fit.rss <= 1e-6 * (y @ y)

    def test_anova_interaction_weight_search(self):
        rng = np.random.default_rng(55)
        n, t = 32, 2
        x = jittered_x(rng, n)
        tau = np.tile([1, 2], n // 2)
        subj = 1 + (np.arange(n) % 8)
        # parallel curves: no smooth interaction in truth
        y = np.sin(2 * np.pi * x) + 0.8 * (tau == 2) + rng.normal(0, 0.2, n)
        spec = ModelSpec(
            KernelSpec(SplineFamily.ANOVA, domain_upper=1.0, theta1=1.0,
                       theta12=1.0, levels=t),
            (GroupingFactor("subject", tuple(subj)),))
        dm = build_design(spec, Dataset(y=y, x=x, tau=tau))
        params, fit, score = optimize(dm, y, ScoreConfig("gcv", alpha=1.4))
        assert len(params.kernel_theta) == 2
        assert params.kernel_theta[0] == 1.0  # average-curve weight pinned
        assert np.isfinite(score)


@given(st.floats(1e-6, 1e3), st.floats(0.1, 40.0), st.integers(50, 500))
def test_property_score_v_scales_quadratically(rss, tr_a, n):
    if tr_a >= n:
        return
    fit1 = synthetic_fit(n, rss, tr_a)
    fit4 = synthetic_fit(n, 4.0 * rss, tr_a)
    assert score_v(fit4) == pytest.approx(4.0 * score_v(fit1), rel=1e-12)


@given(st.floats(0.0, 1e3), st.floats(0.0, 40.0), st.floats(0.01, 10.0),
       st.floats(1.0, 2.0))
def test_property_score_u_linear_in_trace(rss, tr_a, sigma2, alpha):
    fit = synthetic_fit(100, rss, tr_a)
    expected = rss / 100 + 2 * sigma2 * alpha * tr_a / 100
    assert score_u(fit, sigma2, alpha) == pytest.approx(expected, rel=1e-12)


class TestAdditiveAnovaOptimize:
    def test_additive_spec_optimizes_without_interaction_branch(self):
        rng = np.random.default_rng(0)
        n, t = 24, 2
        x = np.linspace(0.02, 0.98, n)
        tau = np.tile([1, 2], n // 2)
        subj = 1 + (np.arange(n) % 6)
        y = np.sin(2 * np.pi * x) + 0.5 * (tau == 2) + rng.normal(0, 0.2, n)
        spec = ModelSpec(
            KernelSpec(SplineFamily.ANOVA, levels=t, additive=True),
            (GroupingFactor("s", tuple(subj)),))
        dm = build_design(spec, Dataset(y=y, x=x, tau=tau))
        params, fit, score = optimize(dm, y, ScoreConfig("gcv"))
        assert params.kernel_theta == (1.0, 0.0)
        assert np.isfinite(score)
        assert fit.n == n
