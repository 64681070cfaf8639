"""Monte Carlo EM driver for one data partition.

Alternates the Gibbs E-step with the regression M-step on a fixed sample
schedule. Sample sizes ramp up across iterations: early iterations only
need rough moment estimates, late ones need low Monte Carlo noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BireError, ContractViolation
from .gibbs import EStepConfig, XiTable, run_estep
from .model import complete_data_log_likelihood, initial_state, initial_theta
from .mstep import factor_permutation, permute_factors, run_mstep
from .types import Dataset, Hyperparams, LatentState

RAMP_LEVELS = (10, 50, 200)


@dataclass(frozen=True)
class FitSchedule:
    """Iteration plan: how many EM rounds and how many Gibbs sweeps each."""

    num_iters: int
    sample_vector: tuple[int, ...]
    burn_in: int = 2
    method: str = "var"
    do_mstep: bool = True
    rng_seed: int | None = None

    def __post_init__(self):
        if self.num_iters < 0:
            raise ContractViolation("num_iters must be non-negative")
        if len(self.sample_vector) != self.num_iters:
            raise ContractViolation(
                "sample_vector must have one entry per iteration")
        if any(L < 1 for L in self.sample_vector):
            raise ContractViolation("every sample count must be at least 1")
        if self.method not in ("var", "ars", "arsid"):
            raise ContractViolation(f"unknown method {self.method!r}")

    @classmethod
    def ramp(cls, num_iters: int = 30, method: str = "var",
             do_mstep: bool = True, rng_seed: int | None = None,
             burn_in: int = 2) -> "FitSchedule":
        """Default three-stage plan: thirds at L = 10, 50, 200 sweeps."""
        third = num_iters // 3
        counts = (third, third, num_iters - 2 * third)
        vector = tuple(L for L, c in zip(RAMP_LEVELS, counts)
                       for _ in range(c))
        return cls(num_iters=num_iters, sample_vector=vector,
                   burn_in=burn_in, method=method, do_mstep=do_mstep,
                   rng_seed=rng_seed)


@dataclass(frozen=True)
class TraceEntry:
    """One EM iteration's progress record."""

    iteration: int
    L: int
    loglik: float
    sigma2_alpha: float
    sigma2_beta: float
    sigma2_u: tuple[float, ...]
    sigma2_v: float


def _sigma2_u_tuple(theta: Hyperparams) -> tuple[float, ...]:
    return tuple(float(v) for v in np.atleast_1d(theta.sigma2_u))


def fit_single_partition(dataset: Dataset,
                         init: tuple[Hyperparams, LatentState] | None,
                         schedule: FitSchedule,
                         r: int = 1):
    """Run the EM loop on one dataset.

    ``init`` supplies (theta, chain state); when absent, weights start at
    zero, variances at one, and latent effects at N(0, 0.01) draws. ``r``
    only matters for that fresh start. Returns the final theta, the last
    E-step's posterior-mean state, and the per-iteration trace.
    """
    rng = np.random.default_rng(schedule.rng_seed)
    if init is None:
        theta = initial_theta(dataset, r,
                              ordered_diag=(schedule.method == "arsid"))
        state = initial_state(dataset, r, rng)
        if schedule.method == "arsid":
            state = LatentState(state.alpha, state.beta, state.U,
                                np.abs(state.V))
    else:
        theta, state = init
        theta = theta.copy()
        state = state.copy()
    _check_dimensions(theta, state, dataset)

    delta_hat = state
    trace: list[TraceEntry] = []
    xi: XiTable | None = None
    for t in range(schedule.num_iters):
        try:
            config = EStepConfig(method=schedule.method,
                                 L=schedule.sample_vector[t],
                                 burn_in=schedule.burn_in)
            stats, state, xi = run_estep(state, theta, dataset, config,
                                         rng=rng, xi=xi)
            delta_hat = stats.mean_state()
            if schedule.do_mstep:
                theta = run_mstep(stats, dataset, schedule.method, theta)
                if schedule.method == "arsid":
                    perm = factor_permutation(theta.sigma2_u)
                    if not np.array_equal(perm, np.arange(theta.r)):
                        _, delta_hat = permute_factors(theta, delta_hat, perm)
                        theta, state = permute_factors(theta, state, perm)
            loglik = complete_data_log_likelihood(theta, delta_hat, dataset)
        except BireError as err:
            err.args = (f"iteration {t + 1}: {err}",)
            raise
        trace.append(TraceEntry(
            iteration=t + 1, L=schedule.sample_vector[t], loglik=loglik,
            sigma2_alpha=float(theta.sigma2_alpha),
            sigma2_beta=float(theta.sigma2_beta),
            sigma2_u=_sigma2_u_tuple(theta),
            sigma2_v=float(theta.sigma2_v)))
    return theta, delta_hat, trace


def _check_dimensions(theta: Hyperparams, state: LatentState,
                      dataset: Dataset) -> None:
    if state.alpha.shape[0] != dataset.M or state.beta.shape[0] != dataset.N:
        raise ContractViolation("initial state does not match the dataset")
    if state.r != theta.r:
        raise ContractViolation("initial state rank does not match theta")
    if theta.g_w.shape[0] != dataset.p_u or theta.h_w.shape[0] != dataset.p_v:
        raise ContractViolation("theta feature weights do not match dataset")
    if theta.f_w.shape[0] != dataset.p_e:
        raise ContractViolation("theta event weights do not match dataset")
