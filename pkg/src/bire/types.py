"""Core data containers for the bilinear random effects model.

Observations are stored column-wise (index arrays plus a label vector)
so that Gibbs sweeps and likelihood evaluations vectorize; the
record-oriented :class:`Observation` view exists for inspection and
small-scale tests.  User/item identifiers are dense internal indices;
the mapping back to external ids lives with the I/O layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class Observation:
    """One binary interaction: user ``user`` saw item ``item`` and responded ``y``."""

    user: int
    item: int
    y: int
    x_event: np.ndarray  # event covariates, intercept included

    def __post_init__(self):
        if self.y not in (0, 1):
            raise ContractViolation(f"label must be 0 or 1, got {self.y!r}")


def _group_indices(idx: np.ndarray, count: int) -> list[np.ndarray]:
    """Index lists grouped by ``idx`` value, preserving observation order."""
    order = np.argsort(idx, kind="stable")
    bounds = np.searchsorted(idx[order], np.arange(count + 1))
    return [order[bounds[k]:bounds[k + 1]] for k in range(count)]


@dataclass
class Dataset:
    """A binary-response dataset with user/item covariates.

    Parameters
    ----------
    user_idx, item_idx : int arrays, one entry per observation
        Dense indices into the user/item axes.
    y : {0,1} array
    x_event : (n_obs, p_e) array
        Event covariates; column 0 is always the intercept.
    user_features : (M, p_u) array
        Covariates x_i; column 0 is always the intercept.
    item_features : (N, p_v) array
        Covariates x_j; column 0 is always the intercept.
    """

    user_idx: np.ndarray
    item_idx: np.ndarray
    y: np.ndarray
    x_event: np.ndarray
    user_features: np.ndarray
    item_features: np.ndarray
    user_ids: list | None = None  # external ids, position = dense index
    item_ids: list | None = None

    def __post_init__(self):
        self.user_idx = np.asarray(self.user_idx, dtype=np.int64)
        self.item_idx = np.asarray(self.item_idx, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.x_event = np.atleast_2d(np.asarray(self.x_event, dtype=np.float64))
        self.user_features = np.atleast_2d(np.asarray(self.user_features, dtype=np.float64))
        self.item_features = np.atleast_2d(np.asarray(self.item_features, dtype=np.float64))
        n = self.user_idx.shape[0]
        if not (self.item_idx.shape[0] == self.y.shape[0] == n):
            raise ContractViolation("observation arrays must have equal length")
        if n and self.x_event.shape[0] != n:
            raise ContractViolation("x_event must have one row per observation")
        if self.x_event.shape[0] == 0:
            self.x_event = np.ones((n, max(1, self.x_event.shape[1] or 1)))
        if np.any((self.y != 0) & (self.y != 1)):
            raise ContractViolation("labels must lie in {0,1}")
        if n:
            if self.user_idx.min() < 0 or self.user_idx.max() >= self.M:
                raise ContractViolation("user index out of range")
            if self.item_idx.min() < 0 or self.item_idx.max() >= self.N:
                raise ContractViolation("item index out of range")
        if self.user_features.shape[1] < 1 or self.item_features.shape[1] < 1:
            raise ContractViolation("feature matrices need at least the intercept column")
        self._by_user = None
        self._by_item = None

    # -- dimensions -------------------------------------------------------

    @property
    def n_obs(self) -> int:
        return int(self.user_idx.shape[0])

    @property
    def M(self) -> int:
        return int(self.user_features.shape[0])

    @property
    def N(self) -> int:
        return int(self.item_features.shape[0])

    @property
    def p_u(self) -> int:
        return int(self.user_features.shape[1])

    @property
    def p_v(self) -> int:
        return int(self.item_features.shape[1])

    @property
    def p_e(self) -> int:
        return int(self.x_event.shape[1])

    # -- record views -----------------------------------------------------

    @property
    def observations(self) -> list[Observation]:
        return [self.obs(k) for k in range(self.n_obs)]

    def obs(self, k: int) -> Observation:
        return Observation(int(self.user_idx[k]), int(self.item_idx[k]),
                           int(self.y[k]), self.x_event[k])

    # -- per-user / per-item groupings ------------------------------------

    @property
    def J_i(self) -> list[np.ndarray]:
        """Observation indices of each user, ``J_i[i]`` for user ``i``."""
        if self._by_user is None:
            self._by_user = _group_indices(self.user_idx, self.M)
        return self._by_user

    @property
    def I_j(self) -> list[np.ndarray]:
        """Observation indices of each item, ``I_j[j]`` for item ``j``."""
        if self._by_item is None:
            self._by_item = _group_indices(self.item_idx, self.N)
        return self._by_item


def _as_sigma_u(value, r: int):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return float(arr)
    if arr.shape != (r,):
        raise ContractViolation(f"sigma2_u vector must have length r={r}")
    return arr


@dataclass
class Hyperparams:
    """Prior parameters: regression weights plus random-effect variances.

    ``sigma2_u`` is a scalar for the isotropic factor prior, or a
    non-increasing length-``r`` vector for the ordered diagonal prior used
    by the identifiability-constrained sampler (where ``sigma2_v`` is
    pinned to 1).
    """

    f_w: np.ndarray
    g_w: np.ndarray
    h_w: np.ndarray
    G_w: np.ndarray
    H_w: np.ndarray
    sigma2_alpha: float = 1.0
    sigma2_beta: float = 1.0
    sigma2_u: float | np.ndarray = 1.0
    sigma2_v: float = 1.0
    r: int = field(default=0)

    def __post_init__(self):
        self.f_w = np.asarray(self.f_w, dtype=np.float64).ravel()
        self.g_w = np.asarray(self.g_w, dtype=np.float64).ravel()
        self.h_w = np.asarray(self.h_w, dtype=np.float64).ravel()
        self.G_w = np.atleast_2d(np.asarray(self.G_w, dtype=np.float64))
        self.H_w = np.atleast_2d(np.asarray(self.H_w, dtype=np.float64))
        if not self.r:
            self.r = int(self.G_w.shape[0]) if self.G_w.size else 0
        if self.G_w.size and self.G_w.shape[0] != self.r:
            raise ContractViolation("G_w must have r rows")
        if self.H_w.size and self.H_w.shape[0] != self.r:
            raise ContractViolation("H_w must have r rows")
        self.sigma2_u = _as_sigma_u(self.sigma2_u, self.r)
        for name in ("sigma2_alpha", "sigma2_beta", "sigma2_v"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        if np.any(np.asarray(self.sigma2_u) <= 0):
            raise ContractViolation("sigma2_u must be positive")

    @property
    def ordered_diag(self) -> bool:
        """True when the factor prior uses the ordered diagonal covariance."""
        return isinstance(self.sigma2_u, np.ndarray)

    def sigma2_u_vector(self) -> np.ndarray:
        """Factor prior variances as a length-r vector (broadcast if scalar)."""
        if self.ordered_diag:
            return self.sigma2_u
        return np.full(self.r, float(self.sigma2_u))

    def copy(self) -> "Hyperparams":
        return Hyperparams(
            self.f_w.copy(), self.g_w.copy(), self.h_w.copy(),
            self.G_w.copy(), self.H_w.copy(),
            float(self.sigma2_alpha), float(self.sigma2_beta),
            self.sigma2_u.copy() if self.ordered_diag else float(self.sigma2_u),
            float(self.sigma2_v), self.r,
        )


@dataclass
class LatentState:
    """Random effects: per-user bias/factors and per-item popularity/factors."""

    alpha: np.ndarray
    beta: np.ndarray
    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64).ravel()
        self.beta = np.asarray(self.beta, dtype=np.float64).ravel()
        self.U = np.atleast_2d(np.asarray(self.U, dtype=np.float64))
        self.V = np.atleast_2d(np.asarray(self.V, dtype=np.float64))
        if self.U.shape[0] != self.alpha.shape[0]:
            raise ContractViolation("U must have one row per user")
        if self.V.shape[0] != self.beta.shape[0]:
            raise ContractViolation("V must have one row per item")
        if self.U.shape[1] != self.V.shape[1]:
            raise ContractViolation("U and V must agree on factor dimension")

    @property
    def r(self) -> int:
        return int(self.U.shape[1])

    def copy(self) -> "LatentState":
        return LatentState(self.alpha.copy(), self.beta.copy(), self.U.copy(), self.V.copy())


@dataclass
class SufficientStats:
    """E-step output: posterior means plus summed posterior variances.

    ``per_coord_var_U[k]`` is the variance sum of factor coordinate ``k``
    across users, required by the per-dimension variance update of the
    ordered diagonal prior.
    """

    mean_alpha: np.ndarray
    mean_beta: np.ndarray
    mean_U: np.ndarray
    mean_V: np.ndarray
    sum_var_alpha: float
    sum_var_beta: float
    sum_var_U: float
    sum_var_V: float
    per_coord_var_U: np.ndarray
    L: int

    def __post_init__(self):
        if self.L < 1:
            raise ContractViolation("L must be at least 1")
        for name in ("sum_var_alpha", "sum_var_beta", "sum_var_U", "sum_var_V"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be non-negative")

    def mean_state(self) -> LatentState:
        return LatentState(self.mean_alpha.copy(), self.mean_beta.copy(),
                           self.mean_U.copy(), self.mean_V.copy())


@dataclass
class SyntheticTruth:
    """A generated dataset bundled with the parameters that produced it."""

    theta: Hyperparams
    delta: LatentState
    dataset: Dataset


def intercept_features(count: int, extra: np.ndarray | None = None) -> np.ndarray:
    """Feature matrix with a leading all-ones intercept column."""
    ones = np.ones((count, 1))
    if extra is None or np.size(extra) == 0:
        return ones
    extra = np.atleast_2d(np.asarray(extra, dtype=np.float64))
    if extra.shape[0] != count:
        raise ContractViolation("extra feature rows must match count")
    return np.hstack([ones, extra])


def make_dataset(user_idx: Sequence[int], item_idx: Sequence[int], y: Sequence[int],
                 M: int, N: int,
                 x_event: np.ndarray | None = None,
                 user_features: np.ndarray | None = None,
                 item_features: np.ndarray | None = None) -> Dataset:
    """Assemble a :class:`Dataset`, defaulting covariates to intercept-only."""
    n = len(user_idx)
    if x_event is None:
        x_event = np.ones((n, 1))
    if user_features is None:
        user_features = np.ones((M, 1))
    if item_features is None:
        item_features = np.ones((N, 1))
    return Dataset(np.asarray(user_idx), np.asarray(item_idx), np.asarray(y),
                   x_event, user_features, item_features)
