import numpy as np
import pytest
import scipy.optimize

from bire.errors import ContractViolation
from bire.model import complete_data_log_likelihood, initial_theta
from bire.mstep import (RIDGE, VARIANCE_FLOOR, enforce_ordered_variances,
                        factor_permutation, fit_f_logistic,
                        fit_prior_regression, permute_factors, run_mstep)
from bire.types import (Dataset, Hyperparams, LatentState, SufficientStats,
                        make_dataset)


def random_dataset(seed, M=12, N=9, r=2, n=60, p_u=3, p_v=2, p_e=2):
    rng = np.random.default_rng(seed)
    return make_dataset(
        user_idx=rng.integers(0, M, n),
        item_idx=rng.integers(0, N, n),
        y=rng.integers(0, 2, n),
        M=M, N=N,
        x_event=rng.normal(size=(n, p_e)),
        user_features=rng.normal(size=(M, p_u)),
        item_features=rng.normal(size=(N, p_v)),
    )


def stats_from_state(state, sum_var=0.0):
    r = state.r
    return SufficientStats(
        mean_alpha=state.alpha, mean_beta=state.beta,
        mean_U=state.U, mean_V=state.V,
        sum_var_alpha=sum_var, sum_var_beta=sum_var,
        sum_var_U=sum_var * max(r, 1), sum_var_V=sum_var * max(r, 1),
        per_coord_var_U=np.full(r, sum_var), L=10)


class TestFitPriorRegression:

    def test_exact_fit_floors_variance(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(20, 3))
        w_true = np.array([0.5, -1.0, 2.0])
        weights, sigma2 = fit_prior_regression(X @ w_true, X, 0.0, 20, 1)
        assert np.allclose(weights, w_true, atol=1e-5)
        assert sigma2 == VARIANCE_FLOOR

    def test_intercept_only_mean_fit(self):
        X = np.ones((3, 1))
        weights, sigma2 = fit_prior_regression(np.array([1.0, 2.0, 3.0]),
                                               X, 0.0, 3, 1)
        assert weights[0] == pytest.approx(2.0, abs=1e-5)
        # RSS = 2 flows straight into the variance: (0 + 2) / 3
        assert sigma2 == pytest.approx(2.0 / 3.0, abs=1e-5)

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(50, 5))
        y = rng.normal(size=50)
        weights, _ = fit_prior_regression(y, X, 0.0, 50, 1)
        oracle = np.linalg.inv(X.T @ X + RIDGE * np.eye(5)) @ (X.T @ y)
        assert np.allclose(weights, oracle, atol=1e-8)

    def test_matrix_targets_match_columnwise_fits(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(40, 4))
        T = rng.normal(size=(40, 3))
        W, _ = fit_prior_regression(T, X, 0.0, 40, 3)
        assert W.shape == (3, 4)
        for k in range(3):
            wk, _ = fit_prior_regression(T[:, k], X, 0.0, 40, 1)
            assert np.allclose(W[k], wk, atol=1e-12)

    def test_pooled_variance_divides_by_count_times_dims(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(30, 2))
        T = rng.normal(size=(30, 4))
        W, sigma2 = fit_prior_regression(T, X, 5.0, 30, 4)
        rss = ((T - X @ W.T) ** 2).sum()
        assert sigma2 == pytest.approx((5.0 + rss) / 120.0, rel=1e-12)

    def test_per_coordinate_variance_divides_by_count(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(25, 2))
        T = rng.normal(size=(25, 3))
        sv = np.array([1.0, 2.0, 3.0])
        W, sigma2 = fit_prior_regression(T, X, sv, 25, 3)
        rss = ((T - X @ W.T) ** 2).sum(axis=0)
        assert sigma2.shape == (3,)
        assert np.allclose(sigma2, (sv + rss) / 25.0, rtol=1e-12)

    def test_empty_targets_rejected(self):
        with pytest.raises(ContractViolation):
            fit_prior_regression(np.zeros(0), np.zeros((0, 1)), 0.0, 0, 1)

    def test_mismatched_rows_rejected(self):
        with pytest.raises(ContractViolation):
            fit_prior_regression(np.zeros(3), np.zeros((4, 1)), 0.0, 3, 1)

    def test_bad_sum_var_length_rejected(self):
        with pytest.raises(ContractViolation):
            fit_prior_regression(np.zeros((5, 2)), np.ones((5, 1)),
                                 np.zeros(3), 5, 2)


class TestFitFLogistic:

    def test_balanced_intercept_is_zero(self):
        data = make_dataset([0, 0, 1, 1], [0, 1, 0, 1], [0, 1, 0, 1],
                            M=2, N=2, x_event=np.ones((4, 1)))
        w, converged = fit_f_logistic(data, np.zeros(4))
        assert converged
        assert abs(w[0]) < 1e-8

    def test_separating_offsets_pin_weights_at_zero(self):
        rng = np.random.default_rng(5)
        y = rng.integers(0, 2, 50)
        data = make_dataset(np.zeros(50, dtype=int), np.arange(50) % 7, y,
                            M=1, N=7, x_event=rng.normal(size=(50, 2)))
        offsets = (2.0 * y - 1.0) * 40.0
        w, converged = fit_f_logistic(data, offsets)
        assert converged
        assert np.all(np.abs(w) < 1e-6)

    def test_gradient_vanishes_at_solution(self):
        rng = np.random.default_rng(6)
        n = 100
        X = rng.normal(size=(n, 3))
        w_true = np.array([1.0, -0.5, 0.3])
        y = (rng.random(n) < 1.0 / (1.0 + np.exp(-X @ w_true))).astype(int)
        data = make_dataset(np.zeros(n, dtype=int), np.arange(n) % 11, y,
                            M=1, N=11, x_event=X)
        off = rng.normal(0.0, 0.5, n)
        w, converged = fit_f_logistic(data, off)
        assert converged
        mu = 1.0 / (1.0 + np.exp(-(X @ w + off)))
        grad = X.T @ (y - mu) - RIDGE * w
        assert np.linalg.norm(grad) < 1e-6

    def test_matches_direct_optimizer(self):
        rng = np.random.default_rng(7)
        n = 80
        X = rng.normal(size=(n, 2))
        y = rng.integers(0, 2, n)
        data = make_dataset(np.zeros(n, dtype=int), np.arange(n) % 5, y,
                            M=1, N=5, x_event=X)
        off = rng.normal(size=n)

        def neg_penalized(w):
            eta = X @ w + off
            return (np.logaddexp(0.0, (1.0 - 2.0 * y) * eta).sum()
                    + 0.5 * RIDGE * w @ w)

        w, _ = fit_f_logistic(data, off)
        ref = scipy.optimize.minimize(neg_penalized, np.zeros(2),
                                      method="BFGS",
                                      options={"gtol": 1e-10}).x
        assert np.allclose(w, ref, atol=1e-6)

    def test_deterministic(self):
        data = random_dataset(8)
        off = np.random.default_rng(9).normal(size=data.n_obs)
        w1, c1 = fit_f_logistic(data, off)
        w2, c2 = fit_f_logistic(data, off)
        assert np.array_equal(w1, w2) and c1 == c2

    def test_nonfinite_offsets_rejected(self):
        data = random_dataset(10)
        off = np.zeros(data.n_obs)
        off[0] = np.nan
        with pytest.raises(ContractViolation):
            fit_f_logistic(data, off)

    def test_wrong_length_offsets_rejected(self):
        data = random_dataset(11)
        with pytest.raises(ContractViolation):
            fit_f_logistic(data, np.zeros(data.n_obs + 1))


def prior_mean_state(theta, data):
    return LatentState(
        alpha=data.user_features @ theta.g_w,
        beta=data.item_features @ theta.h_w,
        U=data.user_features @ theta.G_w.T,
        V=data.item_features @ theta.H_w.T)


class TestRunMstep:

    def make_theta(self, data, r=2, seed=12, ordered=False):
        rng = np.random.default_rng(seed)
        s2u = np.array([1.5, 0.5])[:r] if ordered else 0.7
        return Hyperparams(
            f_w=rng.normal(size=data.p_e) * 0.3,
            g_w=rng.normal(size=data.p_u) * 0.5,
            h_w=rng.normal(size=data.p_v) * 0.5,
            G_w=rng.normal(size=(r, data.p_u)) * 0.4,
            H_w=rng.normal(size=(r, data.p_v)) * 0.4,
            sigma2_alpha=0.8, sigma2_beta=0.9,
            sigma2_u=s2u, sigma2_v=1.1, r=r)

    def test_prior_fixed_point(self):
        data = random_dataset(13, M=60, N=50, n=300)
        theta = self.make_theta(data)
        stats = stats_from_state(prior_mean_state(theta, data))
        new = run_mstep(stats, data, "var", theta)
        assert np.allclose(new.g_w, theta.g_w, atol=1e-6)
        assert np.allclose(new.h_w, theta.h_w, atol=1e-6)
        assert np.allclose(new.G_w, theta.G_w, atol=1e-6)
        assert np.allclose(new.H_w, theta.H_w, atol=1e-6)
        assert new.sigma2_alpha == VARIANCE_FLOOR
        assert new.sigma2_beta == VARIANCE_FLOOR
        assert new.sigma2_u == VARIANCE_FLOOR
        assert new.sigma2_v == VARIANCE_FLOOR

    def test_noiseless_weight_recovery(self):
        data = random_dataset(14, M=300, N=250, n=500)
        theta = self.make_theta(data, seed=15)
        stats = stats_from_state(prior_mean_state(theta, data))
        new = run_mstep(stats, data, "ars", theta)
        assert np.allclose(new.g_w, theta.g_w, atol=1e-8)
        assert np.allclose(new.G_w, theta.G_w, atol=1e-8)
        assert np.allclose(new.H_w, theta.H_w, atol=1e-8)

    def test_rerun_is_idempotent(self):
        data = random_dataset(16)
        theta = self.make_theta(data)
        rng = np.random.default_rng(17)
        state = LatentState(rng.normal(size=data.M), rng.normal(size=data.N),
                            rng.normal(size=(data.M, 2)),
                            rng.normal(size=(data.N, 2)))
        stats = stats_from_state(state, sum_var=2.0)
        t1 = run_mstep(stats, data, "var", theta)
        t2 = run_mstep(stats, data, "var", t1)
        for name in ("f_w", "g_w", "h_w", "G_w", "H_w"):
            assert np.array_equal(getattr(t1, name), getattr(t2, name))
        assert t1.sigma2_alpha == t2.sigma2_alpha
        assert t1.sigma2_u == t2.sigma2_u

    def test_variances_strictly_positive(self):
        data = random_dataset(18)
        theta = self.make_theta(data)
        stats = stats_from_state(prior_mean_state(theta, data))
        for mode in ("var", "ars", "arsid"):
            th = self.make_theta(data, ordered=(mode == "arsid"))
            new = run_mstep(stats, data, mode, th)
            assert new.sigma2_alpha >= VARIANCE_FLOOR
            assert new.sigma2_beta >= VARIANCE_FLOOR
            assert np.all(new.sigma2_u_vector() >= VARIANCE_FLOOR)
            assert new.sigma2_v >= VARIANCE_FLOOR

    def test_arsid_mode_shape_and_pinned_v(self):
        data = random_dataset(19)
        theta = self.make_theta(data, ordered=True)
        rng = np.random.default_rng(20)
        state = LatentState(rng.normal(size=data.M), rng.normal(size=data.N),
                            rng.normal(size=(data.M, 2)),
                            np.abs(rng.normal(size=(data.N, 2))))
        stats = stats_from_state(state, sum_var=1.0)
        new = run_mstep(stats, data, "arsid", theta)
        assert new.ordered_diag
        assert new.sigma2_u.shape == (2,)
        assert new.sigma2_v == 1.0
        # per-coordinate update: (per_coord_var + RSS_k) / M
        W = new.G_w
        rss = ((state.U - data.user_features @ W.T) ** 2).sum(axis=0)
        assert np.allclose(new.sigma2_u, (stats.per_coord_var_U + rss) / data.M,
                           rtol=1e-10)

    def test_surrogate_objective_does_not_decrease(self):
        for seed in range(4):
            data = random_dataset(21 + seed, M=25, N=20, n=200)
            rng = np.random.default_rng(40 + seed)
            state = LatentState(rng.normal(size=data.M),
                                rng.normal(size=data.N),
                                rng.normal(size=(data.M, 2)),
                                rng.normal(size=(data.N, 2)))
            stats = stats_from_state(state, sum_var=0.5)
            for theta_old in (initial_theta(data, 2),
                              self.make_theta(data, seed=60 + seed)):
                theta_new = run_mstep(stats, data, "var", theta_old)
                before = complete_data_log_likelihood(theta_old, state, data)
                after = complete_data_log_likelihood(theta_new, state, data)
                assert after >= before - 1e-8

    def test_unknown_mode_rejected(self):
        data = random_dataset(26)
        theta = self.make_theta(data)
        stats = stats_from_state(prior_mean_state(theta, data))
        with pytest.raises(ContractViolation):
            run_mstep(stats, data, "gibbs", theta)

    def test_mismatched_stats_rejected(self):
        data = random_dataset(27)
        other = random_dataset(28, M=30, N=25)
        theta = self.make_theta(data)
        stats = stats_from_state(prior_mean_state(theta, data))
        with pytest.raises(ContractViolation):
            run_mstep(stats, other, "var", theta)


class TestEnforceOrderedVariances:

    def make_pair(self, sigma2_u, seed=29, M=8, N=6, p=2):
        r = len(sigma2_u)
        rng = np.random.default_rng(seed)
        theta = Hyperparams(
            f_w=np.array([0.1]), g_w=rng.normal(size=p),
            h_w=rng.normal(size=p),
            G_w=rng.normal(size=(r, p)), H_w=rng.normal(size=(r, p)),
            sigma2_alpha=0.5, sigma2_beta=0.5,
            sigma2_u=np.asarray(sigma2_u, dtype=float), sigma2_v=1.0, r=r)
        state = LatentState(rng.normal(size=M), rng.normal(size=N),
                            rng.normal(size=(M, r)),
                            np.abs(rng.normal(size=(N, r))))
        return theta, state

    def test_sorted_input_untouched(self):
        theta, state = self.make_pair([3.0, 1.0])
        t2, s2 = enforce_ordered_variances(theta, state)
        assert t2 is theta and s2 is state

    def test_swap_example(self):
        theta, state = self.make_pair([1.0, 3.0])
        t2, s2 = enforce_ordered_variances(theta, state)
        assert np.array_equal(t2.sigma2_u, [3.0, 1.0])
        assert np.array_equal(t2.G_w, theta.G_w[[1, 0]])
        assert np.array_equal(t2.H_w, theta.H_w[[1, 0]])
        assert np.array_equal(s2.U, state.U[:, [1, 0]])
        assert np.array_equal(s2.V, state.V[:, [1, 0]])

    def test_log_likelihood_invariant(self):
        data = random_dataset(30, M=8, N=6, p_u=2, p_v=2, p_e=1)
        theta, state = self.make_pair([0.4, 2.0, 1.1], seed=31)
        t2, s2 = enforce_ordered_variances(theta, state)
        before = complete_data_log_likelihood(theta, state, data)
        after = complete_data_log_likelihood(t2, s2, data)
        assert after == pytest.approx(before, abs=1e-10)

    def test_applying_twice_equals_once(self):
        theta, state = self.make_pair([0.4, 2.0, 1.1], seed=32)
        t1, s1 = enforce_ordered_variances(theta, state)
        t2, s2 = enforce_ordered_variances(t1, s1)
        assert np.array_equal(t1.sigma2_u, t2.sigma2_u)
        assert np.array_equal(t1.G_w, t2.G_w)
        assert np.array_equal(s1.U, s2.U)
        assert np.array_equal(s1.V, s2.V)

    def test_ties_keep_stable_order(self):
        assert np.array_equal(factor_permutation([2.0, 2.0, 1.0]), [0, 1, 2])

    def test_scalar_variance_passes_through(self):
        data = random_dataset(33)
        rng = np.random.default_rng(34)
        theta = Hyperparams(
            f_w=np.zeros(data.p_e), g_w=np.zeros(data.p_u),
            h_w=np.zeros(data.p_v), G_w=np.zeros((2, data.p_u)),
            H_w=np.zeros((2, data.p_v)), sigma2_alpha=1.0, sigma2_beta=1.0,
            sigma2_u=0.5, sigma2_v=1.0, r=2)
        state = LatentState(rng.normal(size=data.M), rng.normal(size=data.N),
                            rng.normal(size=(data.M, 2)),
                            rng.normal(size=(data.N, 2)))
        t2, s2 = enforce_ordered_variances(theta, state)
        assert t2 is theta and s2 is state

    def test_permute_factors_round_trip(self):
        theta, state = self.make_pair([0.4, 2.0, 1.1], seed=35)
        perm = factor_permutation(theta.sigma2_u)
        inv = np.argsort(perm)
        t2, s2 = permute_factors(*permute_factors(theta, state, perm), inv)
        assert np.allclose(t2.sigma2_u, theta.sigma2_u)
        assert np.allclose(t2.G_w, theta.G_w)
        assert np.allclose(s2.U, state.U)
