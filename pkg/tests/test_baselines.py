import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bire.baselines import (FeatOnlyConfig, FeatOnlyModel, SgdModel,
                            category_profile, feat_only_objective,
                            fit_feat_only, fit_feat_only_partitioned, fit_sgd,
                            observation_gradients, observation_loss, sgd_loss)
from bire.errors import ContractViolation, DivergenceError
from bire.model import generate_synthetic
from bire.parallel import PartitionPlan, partition_dataset
from bire.types import make_dataset


def pack(model):
    return np.concatenate([model.f_w, model.g_w, model.h_w,
                           model.G_w.ravel(), model.H_w.ravel()])


def logistic_data(seed=3, M=15, N=8, events=4):
    truth = generate_synthetic(M=M, N=N, r=1, p_u=2, p_v=2,
                               events_per_user=events, theta_spec=None,
                               seed=seed)
    return truth.dataset


class TestFitFeatOnly:

    def test_intercept_only_recovers_base_rate(self):
        rng = np.random.default_rng(0)
        n = 40
        y = np.r_[np.ones(n // 2), np.zeros(n // 2)]
        data = make_dataset(rng.integers(0, 6, n), rng.integers(0, 4, n), y,
                            6, 4, x_event=np.ones((n, 1)),
                            user_features=np.zeros((6, 1)),
                            item_features=np.zeros((4, 1)))
        model = fit_feat_only(data, r=0)
        assert model.converged
        assert np.allclose(model.predict(data), 0.5, atol=1e-6)

    def test_intercept_only_uneven_rate(self):
        rng = np.random.default_rng(1)
        n = 60
        y = np.r_[np.ones(15), np.zeros(45)]
        data = make_dataset(rng.integers(0, 5, n), rng.integers(0, 3, n), y,
                            5, 3, x_event=np.ones((n, 1)),
                            user_features=np.zeros((5, 1)),
                            item_features=np.zeros((3, 1)))
        model = fit_feat_only(data, r=0)
        assert np.allclose(model.predict(data), 0.25, atol=1e-5)

    def test_objective_gradient_matches_finite_differences(self):
        data = logistic_data(seed=7)
        rng = np.random.default_rng(4)
        w = rng.normal(0.0, 0.5, data.p_e + data.p_u + data.p_v
                       + 2 * (data.p_u + data.p_v))
        _, grad = feat_only_objective(w, data, 2, 1e-4)
        h = 1e-6
        fd = np.zeros_like(w)
        for k in range(w.size):
            wp, wm = w.copy(), w.copy()
            wp[k] += h
            wm[k] -= h
            fd[k] = (feat_only_objective(wp, data, 2, 1e-4)[0]
                     - feat_only_objective(wm, data, 2, 1e-4)[0]) / (2 * h)
        assert np.max(np.abs(fd - grad)) < 1e-7

    def test_gradient_at_returned_weights(self):
        # independent check that the fitted point is a stationary point
        # of the true objective, not just of the coded gradient
        data = logistic_data(seed=3)
        assert data.n_obs >= 50
        model = fit_feat_only(data, r=1)
        w = pack(model)
        _, grad = feat_only_objective(w, data, 1, 1e-6)
        h = 1e-6
        fd = np.zeros_like(w)
        for k in range(w.size):
            wp, wm = w.copy(), w.copy()
            wp[k] += h
            wm[k] -= h
            fd[k] = (feat_only_objective(wp, data, 1, 1e-6)[0]
                     - feat_only_objective(wm, data, 1, 1e-6)[0]) / (2 * h)
        assert np.max(np.abs(fd - grad)) < 1e-5

    def test_r_zero_drops_interaction(self):
        data = logistic_data()
        model = fit_feat_only(data, r=0)
        assert model.G_w.shape == (0, data.p_u)
        assert model.H_w.shape == (0, data.p_v)

    def test_equal_covariate_users_predict_identically(self):
        base = logistic_data(seed=9, M=10, N=5, events=3)
        uf = base.user_features.copy()
        uf[1] = uf[0]
        data = make_dataset(base.user_idx, base.item_idx, base.y,
                            base.M, base.N, x_event=base.x_event,
                            user_features=uf,
                            item_features=base.item_features)
        model = fit_feat_only(data, r=2)
        xe = np.tile(base.x_event[0], (2, 1))
        probe = make_dataset([0, 1], [2, 2], [0, 0], base.M, base.N,
                             x_event=xe, user_features=uf,
                             item_features=base.item_features)
        p = model.predict(probe)
        assert p[0] == p[1]

    def test_deterministic(self):
        data = logistic_data(seed=5)
        a = fit_feat_only(data, r=2)
        b = fit_feat_only(data, r=2)
        assert np.array_equal(pack(a), pack(b))

    def test_best_iterate_on_tiny_budget(self):
        data = logistic_data(seed=5)
        config = FeatOnlyConfig(max_iter=1)
        model = fit_feat_only(data, 1, config)
        assert not model.converged
        assert np.isfinite(pack(model)).all()
        w0 = np.zeros(pack(model).size)
        loose, _ = feat_only_objective(w0, data, 1, config.penalty)
        tight, _ = feat_only_objective(pack(model), data, 1, config.penalty)
        assert tight <= loose

    def test_fit_lowers_loss_versus_zero_weights(self):
        data = logistic_data(seed=11)
        model = fit_feat_only(data, r=1)
        zero = np.zeros(pack(model).size)
        v0, _ = feat_only_objective(zero, data, 1, 1e-6)
        v1, _ = feat_only_objective(pack(model), data, 1, 1e-6)
        assert v1 < v0

    def test_rejects_bad_arguments(self):
        data = logistic_data()
        with pytest.raises(ContractViolation):
            fit_feat_only(data, r=-1)
        with pytest.raises(ContractViolation):
            FeatOnlyConfig(penalty=-1.0)
        with pytest.raises(ContractViolation):
            FeatOnlyConfig(max_iter=0)

    def test_partitioned_fit_averages_shard_weights(self):
        data = logistic_data(seed=13, M=30, N=10, events=6)
        plan = PartitionPlan(seed=1, m=2)
        combined = fit_feat_only_partitioned(data, plan, r=1)
        shards = [s for s in partition_dataset(data, plan) if s.dataset.n_obs]
        fits = [fit_feat_only(s.dataset, r=1) for s in shards]
        expect = np.mean([pack(m) for m in fits], axis=0)
        assert np.allclose(pack(combined), expect, atol=0, rtol=0)
        assert np.isfinite(combined.predict(data)).all()


class TestFitSgd:

    def reference_init(self, data, r, seed):
        rng = np.random.default_rng(seed)
        return SgdModel(alpha=rng.normal(0.0, 0.1, data.M),
                        beta=rng.normal(0.0, 0.1, data.N),
                        u=rng.normal(0.0, 0.1, (data.M, r)),
                        v=rng.normal(0.0, 0.1, (data.N, r)),
                        U=rng.normal(0.0, 0.1, (r, data.p_u)),
                        V=rng.normal(0.0, 0.1, (r, data.p_v)))

    def test_observation_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        r, p_u, p_v = 2, 2, 3
        for y in (0.0, 1.0):
            args = [float(rng.normal()), float(rng.normal()),
                    rng.normal(size=r), rng.normal(size=r),
                    rng.normal(size=(r, p_u)), rng.normal(size=(r, p_v)),
                    rng.normal(size=p_u), rng.normal(size=p_v), y, 0.01]
            grads = observation_gradients(*args)
            h = 1e-6
            for slot in range(6):
                g = np.atleast_1d(np.asarray(grads[slot], dtype=float))
                base = np.atleast_1d(np.asarray(args[slot],
                                                dtype=float)).copy()
                fd = np.zeros(base.size)
                for k in range(base.size):
                    for sign, store in ((1, 0), (-1, 1)):
                        pert = base.ravel().copy()
                        pert[k] += sign * h
                        trial = list(args)
                        trial[slot] = (
                            pert.reshape(np.shape(args[slot]))
                            if np.ndim(args[slot]) else float(pert[0]))
                        val = observation_loss(*trial)
                        fd[k] += sign * val / (2 * h)
                assert np.max(np.abs(fd - g.ravel())) < 1e-5

    def test_zero_passes_returns_initialization(self):
        data = logistic_data(seed=21)
        model = fit_sgd(data, r=2, lam=0.01, learning_rate=0.01,
                        passes=0, seed=17)
        ref = self.reference_init(data, 2, 17)
        assert np.array_equal(model.alpha, ref.alpha)
        assert np.array_equal(model.u, ref.u)
        assert np.array_equal(model.V, ref.V)

    def test_large_penalty_shrinks_factors(self):
        data = logistic_data(seed=22)
        init = fit_sgd(data, r=2, passes=0, seed=3)
        fitted = fit_sgd(data, r=2, lam=1e3, learning_rate=1e-4,
                         passes=3, seed=3)
        assert np.linalg.norm(fitted.u) < np.linalg.norm(init.u)
        assert np.linalg.norm(fitted.v) < np.linalg.norm(init.v)

    def test_deterministic_given_seed(self):
        data = logistic_data(seed=23)
        a = fit_sgd(data, r=2, lam=1e-4, learning_rate=0.01, passes=2, seed=5)
        b = fit_sgd(data, r=2, lam=1e-4, learning_rate=0.01, passes=2, seed=5)
        c = fit_sgd(data, r=2, lam=1e-4, learning_rate=0.01, passes=2, seed=6)
        assert np.array_equal(a.u, b.u) and np.array_equal(a.V, b.V)
        assert not np.array_equal(a.u, c.u)

    def test_divergence_raises_with_step_name(self):
        # one user-item pair with flipping labels and an absurd rate
        # feeds back until the parameters overflow
        n = 200
        y = np.arange(n) % 2
        data = make_dataset(np.zeros(n, dtype=int), np.zeros(n, dtype=int),
                            y, 1, 1, x_event=np.ones((n, 1)),
                            user_features=np.ones((1, 1)),
                            item_features=np.ones((1, 1)))
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergenceError, match="pass 1"):
                fit_sgd(data, r=1, lam=0.0, learning_rate=1e6,
                        passes=1, seed=0)

    def test_training_reduces_loss(self):
        data = logistic_data(seed=24, M=20, N=8, events=6)
        init = fit_sgd(data, r=2, passes=0, seed=9)
        fitted = fit_sgd(data, r=2, lam=1e-5, learning_rate=0.05,
                         passes=10, seed=9)
        assert sgd_loss(fitted, data, 1e-5) < sgd_loss(init, data, 1e-5)

    def test_stable_grid_stays_finite(self):
        data = logistic_data(seed=25, M=20, N=8, events=4)
        for lam in (0.0, 1e-6, 1e-5, 1e-4, 1e-3):
            for rate in (1e-5, 1e-4, 1e-3, 1e-2, 1e-1):
                model = fit_sgd(data, r=2, lam=lam, learning_rate=rate,
                                passes=2, seed=1)
                assert np.isfinite(sgd_loss(model, data, lam))

    def test_rejects_bad_arguments(self):
        data = logistic_data()
        with pytest.raises(ContractViolation):
            fit_sgd(data, r=0)
        with pytest.raises(ContractViolation):
            fit_sgd(data, r=1, lam=-0.1)
        with pytest.raises(ContractViolation):
            fit_sgd(data, r=1, learning_rate=0.0)
        with pytest.raises(ContractViolation):
            fit_sgd(data, r=1, passes=-1)


class TestCategoryProfile:

    def test_no_data_gives_zero(self):
        assert category_profile(0, 0, 0.5, a=10.0) == 0.0
        assert category_profile(0, 0, 0.5, a=1.0) == 0.0

    def test_global_rate_gives_zero(self):
        for a in (1.0, 5.0, 10.0, 20.0):
            assert category_profile(50, 5, 0.1, a=a) == pytest.approx(0.0)

    def test_worked_value(self):
        out = category_profile(100, 20, 0.1, a=10.0)
        assert out == pytest.approx(np.log(30.0 / 20.0), rel=1e-12)
        assert out == pytest.approx(0.405465, abs=1e-6)

    def test_broadcasts_over_categories(self):
        views = np.array([[10.0, 0.0], [100.0, 50.0]])
        clicks = np.array([[2.0, 0.0], [20.0, 1.0]])
        gamma = np.array([0.1, 0.05])
        out = category_profile(views, clicks, gamma, a=10.0)
        assert out.shape == (2, 2)
        assert out[0, 1] == 0.0
        assert out[1, 0] == pytest.approx(np.log(30.0 / 20.0))

    @settings(max_examples=200, deadline=None)
    @given(v=st.floats(0.0, 1e4), c=st.floats(0.0, 1e4),
           gamma=st.floats(0.01, 10.0), a=st.floats(0.1, 100.0),
           bump=st.floats(1.0, 1e3))
    def test_monotone_in_counts(self, v, c, gamma, a, bump):
        base = category_profile(v, c, gamma, a=a)
        assert category_profile(v, c + bump, gamma, a=a) > base
        assert category_profile(v + bump, c, gamma, a=a) < base

    def test_rejects_bad_arguments(self):
        with pytest.raises(ContractViolation):
            category_profile(1, 1, 0.5, a=0.0)
        with pytest.raises(ContractViolation):
            category_profile(-1, 1, 0.5)
        with pytest.raises(ContractViolation):
            category_profile(1, -1, 0.5)
        with pytest.raises(ContractViolation):
            category_profile(1, 1, 0.0)
