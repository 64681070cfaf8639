"""M-step: separate regressions for the prior weights and variances, plus
an offset logistic refit of the fixed effect.

Each prior block (g, sigma2_alpha), (h, sigma2_beta), (G, sigma2_u),
(H, sigma2_v) is an independent least-squares problem on the posterior
means, with the summed posterior variances entering only the sigma^2
update. The fixed-effect weights come from a logistic regression whose
offset is the posterior-mean random part of the score.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ContractViolation
from .types import Dataset, Hyperparams, LatentState, SufficientStats

RIDGE = 1e-6
VARIANCE_FLOOR = 1e-6
IRLS_MAX_ITER = 100
IRLS_TOL = 1e-8


def _ridge_solve(X: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Normal-equations solve of min ||T - X w||^2 + RIDGE ||w||^2 per column."""
    A = X.T @ X + RIDGE * np.eye(X.shape[1])
    return np.linalg.solve(A, X.T @ T)


def fit_prior_regression(targets, features, sum_var, count: int, dims: int):
    """Least-squares fit of posterior means on unit features.

    ``targets`` is the (count,) mean vector or (count, dims) mean matrix,
    ``sum_var`` the matching summed posterior variance: a scalar total, or
    a (dims,) vector to request the per-coordinate variance of the ordered
    diagonal prior.

    Returns ``(weights, sigma2)``. Weights are (p,) for vector targets and
    (dims, p) rows-per-dimension otherwise. A scalar ``sum_var`` yields the
    pooled variance (sum_var + RSS) / (count * dims); a vector yields
    (sum_var[k] + RSS_k) / count per coordinate. Both are floored at 1e-6.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.size == 0:
        raise ContractViolation("empty regression targets")
    if count < 1:
        raise ContractViolation("count must be at least 1")
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != count:
        raise ContractViolation("feature matrix must have one row per target")
    vector_target = t.ndim == 1
    T = t.reshape(count, dims)
    W = _ridge_solve(X, T)
    rss = ((T - X @ W) ** 2).sum(axis=0)

    sv = np.asarray(sum_var, dtype=np.float64)
    if sv.ndim == 0:
        sigma2 = max(float((float(sv) + rss.sum()) / (count * dims)),
                     VARIANCE_FLOOR)
    else:
        if sv.shape != (dims,):
            raise ContractViolation("per-coordinate sum_var must have length dims")
        sigma2 = np.maximum((sv + rss) / count, VARIANCE_FLOOR)
    weights = W[:, 0] if vector_target else W.T
    return weights, sigma2


def _penalized_loglik(X, y, offsets, w) -> float:
    eta = X @ w + offsets
    ll = -np.logaddexp(0.0, (1.0 - 2.0 * y) * eta).sum()
    return float(ll - 0.5 * RIDGE * (w @ w))


def fit_f_logistic(dataset: Dataset, offsets) -> tuple[np.ndarray, bool]:
    """Logistic regression of the labels on the event covariates with a
    fixed per-observation offset.

    Newton / IRLS with an L2 ridge; stops when the step max-norm falls
    under 1e-8. Returns ``(weights, converged)``; when the iteration cap
    is hit the best iterate seen (by penalized log-likelihood) comes back
    with ``converged=False``.
    """
    off = np.asarray(offsets, dtype=np.float64)
    y = dataset.y.astype(np.float64)
    if off.shape != y.shape:
        raise ContractViolation("offsets must have one entry per observation")
    if not np.all(np.isfinite(off)):
        raise ContractViolation("offsets must be finite")
    X = dataset.x_event
    p = X.shape[1]
    eye = np.eye(p)

    w = np.zeros(p)
    best_w, best_ll = w, _penalized_loglik(X, y, off, w)
    for _ in range(IRLS_MAX_ITER):
        mu = expit(X @ w + off)
        grad = X.T @ (y - mu) - RIDGE * w
        H = (X * (mu * (1.0 - mu))[:, None]).T @ X + RIDGE * eye
        step = np.linalg.solve(H, grad)
        w = w + step
        ll = _penalized_loglik(X, y, off, w)
        if ll > best_ll:
            best_w, best_ll = w, ll
        if np.max(np.abs(step)) < IRLS_TOL:
            return w, True
    return best_w, False


def run_mstep(stats: SufficientStats, dataset: Dataset, mode: str,
              theta: Hyperparams) -> Hyperparams:
    """All five regressions from one set of sufficient statistics.

    ``mode`` selects the prior family: "var" and "ars" share the pooled
    scalar sigma2_u and refit sigma2_v; "arsid" produces the per-coordinate
    sigma2_u vector (sorted separately) and pins sigma2_v at 1.
    """
    if mode not in ("var", "ars", "arsid"):
        raise ContractViolation(f"unknown M-step mode {mode!r}")
    M, N, r = dataset.M, dataset.N, theta.r
    if stats.mean_alpha.shape[0] != M or stats.mean_beta.shape[0] != N:
        raise ContractViolation("stats do not match the dataset")
    if stats.mean_U.shape != (M, r) or stats.mean_V.shape != (N, r):
        raise ContractViolation("stats factor shapes do not match theta.r")

    g_w, s2_alpha = fit_prior_regression(
        stats.mean_alpha, dataset.user_features, stats.sum_var_alpha, M, 1)
    h_w, s2_beta = fit_prior_regression(
        stats.mean_beta, dataset.item_features, stats.sum_var_beta, N, 1)

    if r:
        if mode == "arsid":
            G_w, s2_u = fit_prior_regression(
                stats.mean_U, dataset.user_features, stats.per_coord_var_U,
                M, r)
            H_w, _ = fit_prior_regression(
                stats.mean_V, dataset.item_features, stats.sum_var_V, N, r)
            s2_v = 1.0
        else:
            G_w, s2_u = fit_prior_regression(
                stats.mean_U, dataset.user_features, stats.sum_var_U, M, r)
            H_w, s2_v = fit_prior_regression(
                stats.mean_V, dataset.item_features, stats.sum_var_V, N, r)
    else:
        G_w = np.zeros((0, dataset.p_u))
        H_w = np.zeros((0, dataset.p_v))
        s2_u = theta.sigma2_u
        s2_v = theta.sigma2_v

    delta_hat = stats.mean_state()
    offsets = delta_hat.alpha[dataset.user_idx] + delta_hat.beta[dataset.item_idx]
    if r:
        offsets = offsets + np.einsum(
            "nk,nk->n", delta_hat.U[dataset.user_idx],
            delta_hat.V[dataset.item_idx])
    f_w, _ = fit_f_logistic(dataset, offsets)

    return Hyperparams(f_w=f_w, g_w=g_w, h_w=h_w, G_w=G_w, H_w=H_w,
                       sigma2_alpha=s2_alpha, sigma2_beta=s2_beta,
                       sigma2_u=s2_u, sigma2_v=s2_v, r=r)


def factor_permutation(sigma2_u) -> np.ndarray:
    """Stable ordering of factor coordinates by descending variance."""
    return np.argsort(-np.asarray(sigma2_u, dtype=np.float64), kind="stable")


def permute_factors(theta: Hyperparams, state: LatentState,
                    perm: np.ndarray) -> tuple[Hyperparams, LatentState]:
    """Apply one coordinate permutation jointly to the factor prior and the
    sampled factors, leaving the model distribution unchanged."""
    new_theta = Hyperparams(
        f_w=theta.f_w.copy(), g_w=theta.g_w.copy(), h_w=theta.h_w.copy(),
        G_w=theta.G_w[perm].copy(), H_w=theta.H_w[perm].copy(),
        sigma2_alpha=theta.sigma2_alpha, sigma2_beta=theta.sigma2_beta,
        sigma2_u=theta.sigma2_u_vector()[perm].copy(),
        sigma2_v=theta.sigma2_v, r=theta.r)
    new_state = LatentState(
        alpha=state.alpha.copy(), beta=state.beta.copy(),
        U=state.U[:, perm].copy(), V=state.V[:, perm].copy())
    return new_theta, new_state


def enforce_ordered_variances(theta: Hyperparams,
                              state: LatentState) -> tuple[Hyperparams, LatentState]:
    """Re-sort factor coordinates so sigma2_u1 >= ... >= sigma2_ur.

    The diagonal of the factor prior, the rows of G and H, and the columns
    of U and V move together, so the likelihood is untouched. A scalar
    variance has nothing to sort and passes through unchanged.
    """
    if not theta.ordered_diag or theta.r == 0:
        return theta, state
    perm = factor_permutation(theta.sigma2_u)
    if np.array_equal(perm, np.arange(theta.r)):
        return theta, state
    return permute_factors(theta, state, perm)
