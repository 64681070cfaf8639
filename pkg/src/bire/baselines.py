"""Comparison fitters.

Three reference points for judging the random effects model: a
covariate-only logistic regression with a bilinear interaction
(fit by nonlinear conjugate gradient), a stochastic gradient
factorizer with cold-start coefficient matrices, and a helper that
turns per-category view/click counts into preference covariates.
"""

import dataclasses
import warnings

import numpy as np
import scipy.optimize
import scipy.special

from .errors import ContractViolation, DivergenceError
from .parallel import PartitionPlan, partition_dataset
from .types import Dataset


@dataclasses.dataclass(frozen=True)
class FeatOnlyConfig:
    """Conjugate gradient settings for the covariate-only fit."""

    penalty: float = 1e-6
    gtol: float = 1e-6
    max_iter: int = 500
    restart_every: int = 50
    seed: int = 0
    init_scale: float = 0.1

    def __post_init__(self):
        if self.penalty < 0:
            raise ContractViolation("penalty must be nonnegative")
        if self.max_iter < 1 or self.restart_every < 1:
            raise ContractViolation("iteration limits must be positive")


@dataclasses.dataclass
class FeatOnlyModel:
    """Weights of the covariate-only model.

    Scores are f(x_event) + g(x_user) + h(x_item) plus the bilinear
    interaction (G x_user)'(H x_item).  No per-user or per-item state:
    two users with identical covariates always score identically.
    """

    f_w: np.ndarray
    g_w: np.ndarray
    h_w: np.ndarray
    G_w: np.ndarray  # (r, p_u)
    H_w: np.ndarray  # (r, p_v)
    converged: bool = True

    def scores(self, dataset: Dataset) -> np.ndarray:
        xu = dataset.user_features[dataset.user_idx]
        xv = dataset.item_features[dataset.item_idx]
        s = dataset.x_event @ self.f_w + xu @ self.g_w + xv @ self.h_w
        if self.G_w.shape[0]:
            s = s + np.einsum("nk,nk->n", xu @ self.G_w.T, xv @ self.H_w.T)
        return s

    def predict(self, dataset: Dataset) -> np.ndarray:
        return scipy.special.expit(self.scores(dataset))


def _feat_unpack(w, p_e, p_u, p_v, r):
    f_w = w[:p_e]
    g_w = w[p_e:p_e + p_u]
    h_w = w[p_e + p_u:p_e + p_u + p_v]
    rest = w[p_e + p_u + p_v:]
    G_w = rest[:r * p_u].reshape(r, p_u)
    H_w = rest[r * p_u:].reshape(r, p_v)
    return f_w, g_w, h_w, G_w, H_w


def feat_only_objective(w, dataset, r, penalty):
    """Penalized logistic loss and its gradient in the packed weights.

    Exposed so the gradient can be checked against finite differences
    of the value.
    """
    p_e, p_u, p_v = dataset.p_e, dataset.p_u, dataset.p_v
    f_w, g_w, h_w, G_w, H_w = _feat_unpack(w, p_e, p_u, p_v, r)
    xu = dataset.user_features[dataset.user_idx]
    xv = dataset.item_features[dataset.item_idx]
    s = dataset.x_event @ f_w + xu @ g_w + xv @ h_w
    if r:
        au = xu @ G_w.T
        bv = xv @ H_w.T
        s = s + np.einsum("nk,nk->n", au, bv)
    t = 2.0 * dataset.y - 1.0
    value = float(np.sum(np.logaddexp(0.0, -t * s))) \
        + 0.5 * penalty * float(w @ w)
    resid = scipy.special.expit(s) - dataset.y
    parts = [dataset.x_event.T @ resid, xu.T @ resid, xv.T @ resid]
    if r:
        parts.append(((bv * resid[:, None]).T @ xu).ravel())
        parts.append(((au * resid[:, None]).T @ xv).ravel())
    else:
        parts.append(np.zeros(0))
        parts.append(np.zeros(0))
    grad = np.concatenate(parts) + penalty * w
    return value, grad


def _wolfe_step(fun, w, direction, grad, value):
    with warnings.catch_warnings():
        # a failed search is handled by the caller, not worth a warning
        warnings.simplefilter("ignore")
        out = scipy.optimize.line_search(
            lambda x: fun(x)[0], lambda x: fun(x)[1], w, direction,
            gfk=grad, old_fval=value, c2=0.4)
    return out[0]


def _pr_cg(fun, w0, gtol, max_iter, restart_every):
    # Polak-Ribiere with a periodic steepest-descent restart; tracks the
    # best iterate so the caller never gets a worse point than w0.
    w = w0.copy()
    value, grad = fun(w)
    best_w, best_value = w.copy(), value
    direction = -grad
    for it in range(max_iter):
        if np.max(np.abs(grad)) <= gtol:
            return w, True
        step = _wolfe_step(fun, w, direction, grad, value)
        if step is None and np.any(direction != -grad):
            direction = -grad  # stale direction, retry straight downhill
            step = _wolfe_step(fun, w, direction, grad, value)
        if step is None:
            break
        w = w + step * direction
        new_value, new_grad = fun(w)
        if new_value < best_value:
            best_value, best_w = new_value, w.copy()
        if (it + 1) % restart_every == 0:
            beta = 0.0
        else:
            beta = max(0.0, float(new_grad @ (new_grad - grad))
                       / float(grad @ grad))
        direction = -new_grad + beta * direction
        value, grad = new_value, new_grad
    if np.max(np.abs(grad)) <= gtol:
        return w, True
    return best_w, False


def fit_feat_only(dataset: Dataset, r: int = 1,
                  config: FeatOnlyConfig | None = None) -> FeatOnlyModel:
    """Fit the covariate-only logistic model.

    r = 0 drops the bilinear term.  On non-convergence the best iterate
    is returned with converged=False rather than raising.
    """
    if r < 0:
        raise ContractViolation("r must be nonnegative")
    if dataset.n_obs == 0:
        raise ContractViolation("empty dataset")
    config = config or FeatOnlyConfig()
    p_e, p_u, p_v = dataset.p_e, dataset.p_u, dataset.p_v
    w0 = np.zeros(p_e + p_u + p_v + r * (p_u + p_v))
    if r:
        # zero bilinear blocks are a stationary point, so break symmetry
        rng = np.random.default_rng(config.seed)
        w0[p_e + p_u + p_v:] = rng.normal(
            0.0, config.init_scale, r * (p_u + p_v))
    w, converged = _pr_cg(
        lambda x: feat_only_objective(x, dataset, r, config.penalty),
        w0, config.gtol, config.max_iter, config.restart_every)
    f_w, g_w, h_w, G_w, H_w = _feat_unpack(w, p_e, p_u, p_v, r)
    return FeatOnlyModel(f_w.copy(), g_w.copy(), h_w.copy(),
                         G_w.copy(), H_w.copy(), converged)


def fit_feat_only_partitioned(dataset: Dataset, plan: PartitionPlan,
                              r: int = 1,
                              config: FeatOnlyConfig | None = None
                              ) -> FeatOnlyModel:
    """Fit per partition and average the weights; no ensemble pass."""
    fits = [fit_feat_only(shard.dataset, r, config)
            for shard in partition_dataset(dataset, plan)
            if shard.dataset.n_obs]
    return FeatOnlyModel(
        f_w=np.mean([m.f_w for m in fits], axis=0),
        g_w=np.mean([m.g_w for m in fits], axis=0),
        h_w=np.mean([m.h_w for m in fits], axis=0),
        G_w=np.mean([m.G_w for m in fits], axis=0),
        H_w=np.mean([m.H_w for m in fits], axis=0),
        converged=all(m.converged for m in fits))


@dataclasses.dataclass
class SgdModel:
    """State of the stochastic gradient factorizer.

    Each user carries a scalar bias alpha broadcast into the latent
    space, a free vector u, and a cold-start projection U of the
    covariates; items mirror this.  The score is the inner product of
    the two assembled vectors.
    """

    alpha: np.ndarray  # (M,)
    beta: np.ndarray   # (N,)
    u: np.ndarray      # (M, r)
    v: np.ndarray      # (N, r)
    U: np.ndarray      # (r, p_u)
    V: np.ndarray      # (r, p_v)

    @property
    def r(self) -> int:
        return self.u.shape[1]

    def user_vectors(self, dataset: Dataset) -> np.ndarray:
        return self.alpha[:, None] + self.u + dataset.user_features @ self.U.T

    def item_vectors(self, dataset: Dataset) -> np.ndarray:
        return self.beta[:, None] + self.v + dataset.item_features @ self.V.T

    def scores(self, dataset: Dataset) -> np.ndarray:
        a = self.user_vectors(dataset)[dataset.user_idx]
        b = self.item_vectors(dataset)[dataset.item_idx]
        return np.einsum("nk,nk->n", a, b)

    def predict(self, dataset: Dataset) -> np.ndarray:
        return scipy.special.expit(self.scores(dataset))


def observation_loss(alpha_i, beta_j, u_i, v_j, U, V, x_i, x_j, y, lam):
    """Loss contribution of one observation, penalties included.

    The per-step gradient in fit_sgd is the exact gradient of this
    quantity; biases are unpenalized, matching the objective.
    """
    a = alpha_i + u_i + U @ x_i
    b = beta_j + v_j + V @ x_j
    s = float(a @ b)
    loss = y * np.logaddexp(0.0, -s) + (1.0 - y) * np.logaddexp(0.0, s)
    loss += lam * (u_i @ u_i + v_j @ v_j
                   + np.sum(U * U) + np.sum(V * V))
    return float(loss)


def observation_gradients(alpha_i, beta_j, u_i, v_j, U, V, x_i, x_j, y, lam):
    """Gradients of observation_loss in the order of its arguments."""
    a = alpha_i + u_i + U @ x_i
    b = beta_j + v_j + V @ x_j
    e = scipy.special.expit(float(a @ b)) - y
    return (e * float(np.sum(b)),
            e * float(np.sum(a)),
            e * b + 2.0 * lam * u_i,
            e * a + 2.0 * lam * v_j,
            e * np.outer(b, x_i) + 2.0 * lam * U,
            e * np.outer(a, x_j) + 2.0 * lam * V)


def fit_sgd(dataset: Dataset, r: int = 1, lam: float = 0.0,
            learning_rate: float = 0.01, passes: int = 1,
            seed: int = 0) -> SgdModel:
    """Fit the factorizer by per-observation gradient steps.

    Observations are reshuffled every pass; the whole procedure is
    deterministic given the seed.  A non-finite parameter or score
    raises DivergenceError naming the offending step.
    """
    if r < 1:
        raise ContractViolation("r must be at least 1")
    if lam < 0:
        raise ContractViolation("lam must be nonnegative")
    if learning_rate <= 0:
        raise ContractViolation("learning_rate must be positive")
    if passes < 0:
        raise ContractViolation("passes must be nonnegative")
    rng = np.random.default_rng(seed)
    model = SgdModel(
        alpha=rng.normal(0.0, 0.1, dataset.M),
        beta=rng.normal(0.0, 0.1, dataset.N),
        u=rng.normal(0.0, 0.1, (dataset.M, r)),
        v=rng.normal(0.0, 0.1, (dataset.N, r)),
        U=rng.normal(0.0, 0.1, (r, dataset.p_u)),
        V=rng.normal(0.0, 0.1, (r, dataset.p_v)))
    eta = learning_rate
    for p in range(passes):
        for t in rng.permutation(dataset.n_obs):
            i = dataset.user_idx[t]
            j = dataset.item_idx[t]
            grads = observation_gradients(
                model.alpha[i], model.beta[j], model.u[i], model.v[j],
                model.U, model.V, dataset.user_features[i],
                dataset.item_features[j], float(dataset.y[t]), lam)
            model.alpha[i] -= eta * grads[0]
            model.beta[j] -= eta * grads[1]
            model.u[i] -= eta * grads[2]
            model.v[j] -= eta * grads[3]
            model.U -= eta * grads[4]
            model.V -= eta * grads[5]
            if not (np.isfinite(model.alpha[i]) and np.isfinite(model.beta[j])
                    and np.isfinite(model.u[i]).all()
                    and np.isfinite(model.v[j]).all()
                    and np.isfinite(model.U).all()
                    and np.isfinite(model.V).all()):
                raise DivergenceError(
                    f"pass {p + 1}, observation {int(t)}: "
                    "parameters are not finite")
        epoch_loss = sgd_loss(model, dataset, lam)
        if not np.isfinite(epoch_loss):
            raise DivergenceError(f"pass {p + 1}: loss is not finite")
    return model


def sgd_loss(model: SgdModel, dataset: Dataset, lam: float) -> float:
    """Full objective: logistic loss plus the four ridge penalties."""
    s = model.scores(dataset)
    y = dataset.y
    loss = float(np.sum(y * np.logaddexp(0.0, -s)
                        + (1.0 - y) * np.logaddexp(0.0, s)))
    loss += lam * float(np.sum(model.u ** 2) + np.sum(model.v ** 2)
                        + np.sum(model.U ** 2) + np.sum(model.V ** 2))
    return loss


def category_profile(views, clicks, gamma, a: float = 10.0):
    """Preference covariate from view and click counts.

    Treats clicks as Poisson with rate views * gamma * lam and a
    Gamma(a, a) prior on lam; returns log of the posterior mean,
    log((clicks + a) / (views * gamma + a)).  Zero counts give exactly
    0, and a user clicking at the global rate gives 0 for any a.
    """
    views = np.asarray(views, dtype=np.float64)
    clicks = np.asarray(clicks, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if a <= 0:
        raise ContractViolation("a must be positive")
    if np.any(views < 0) or np.any(clicks < 0):
        raise ContractViolation("counts must be nonnegative")
    if np.any(gamma <= 0):
        raise ContractViolation("global rates must be positive")
    return np.log((clicks + a) / (views * gamma + a))
