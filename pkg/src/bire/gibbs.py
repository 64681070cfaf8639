"""Gibbs-sampling E-step: variational and ARS flavours.

Both flavours sweep the random effects in the order alpha, beta, U, V.
The variational path replaces each binary label with a Gaussian
pseudo-response (Jaakkola-Jordan bound), making every conditional a
closed-form Gaussian; the ARS path samples the exact logistic-model
conditionals with adaptive rejection sampling.  The ARSID variant is
the ARS path plus identifiability constraints: item factors are
truncated positive and not centered.

Within one sweep the units of a block (all users, or all items) are
conditionally independent given the rest, so each block is drawn as a
batch: closed-form vectorized draws for VAR, and a lockstep batched
ARS (all still-active units share an envelope point count, and every
rejection round adds one point per active unit) for ARS.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ars as ars_lib
from .ars import (
    HullSegments,
    build_hull,
    chord_slopes,
    eval_lower,
    hull_log_masses,
    hull_total_log_mass,
    slopes_straddle,
)
from .errors import ContractViolation, ModeNotStraddled, RejectionLimitError
from .types import Dataset, Hyperparams, LatentState, SufficientStats

# xi = 0 is a removable singularity of the variational bound, but
# downstream divisions need a floor
XI_FLOOR = 1e-6
# positivity truncation for item factors under ARSID; kept off the open
# boundary so hull slopes stay finite
ARSID_LOWER_BOUND = 1e-8

METHODS = ("var", "ars", "arsid")


@dataclass
class XiTable:
    """Per-observation variational parameters xi_ij > 0."""

    xi: np.ndarray

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=np.float64).ravel()
        if np.any(self.xi <= 0) or not np.all(np.isfinite(self.xi)):
            raise ContractViolation("xi values must be positive and finite")


@dataclass
class PseudoResponse:
    """Gaussian pseudo-data (r_ij, sigma2_ij) standing in for binary labels."""

    r: np.ndarray
    sigma2: np.ndarray


@dataclass
class EStepConfig:
    """E-step settings; ARSID forces v-truncation on and v-centering off."""

    method: str = "var"
    L: int = 100
    burn_in: int = 2
    center_v: bool = True
    rng_seed: int | None = None

    def __post_init__(self):
        self.method = str(self.method).lower()
        if self.method not in METHODS:
            raise ContractViolation(f"method must be one of {METHODS}")
        if self.L < 1:
            raise ContractViolation("L must be at least 1")
        if self.burn_in < 0:
            raise ContractViolation("burn_in must be non-negative")
        if self.method == "arsid":
            self.center_v = False


# ---------------------------------------------------------------------------
# Variational pseudo-response transform.
# ---------------------------------------------------------------------------


def var_lambda(xi):
    """lambda(xi) = tanh(xi/2) / (4 xi), continuously extended to 1/8 at 0."""
    arr = np.asarray(xi, dtype=np.float64)
    if np.any(arr < 0):
        raise ContractViolation("xi must be non-negative")
    safe = np.maximum(arr, 1e-300)
    out = np.where(arr > 1e-8, np.tanh(safe / 2.0) / (4.0 * safe), 0.125)
    return float(out) if np.ndim(xi) == 0 else out


def var_pseudo(y, xi) -> PseudoResponse:
    """Pseudo response r = (2y-1)/(4 lambda), variance 1/(2 lambda)."""
    lam = var_lambda(xi)
    y_arr = np.asarray(y, dtype=np.float64)
    return PseudoResponse(r=(2.0 * y_arr - 1.0) / (4.0 * lam),
                          sigma2=1.0 / (2.0 * np.asarray(lam)))


def var_update_xi(s_samples) -> XiTable:
    """New xi from retained samples of the score: xi = sqrt(mean of s^2).

    ``s_samples`` has one row per retained sweep.  All-zero columns get
    the floor value instead of a degenerate zero.
    """
    arr = np.atleast_2d(np.asarray(s_samples, dtype=np.float64))
    return xi_from_mean_square(np.mean(arr * arr, axis=0))


def xi_from_mean_square(mean_s2: np.ndarray) -> XiTable:
    return XiTable(np.maximum(np.sqrt(mean_s2), XI_FLOOR))


# ---------------------------------------------------------------------------
# Reference per-unit conditionals (the batched sweeps must agree with these).
# ---------------------------------------------------------------------------


def _unit_rows(dataset: Dataset, kind: str, index: int) -> np.ndarray:
    return dataset.J_i[index] if kind in ("alpha", "u") else dataset.I_j[index]


def var_conditional(kind: str, index: int, state: LatentState, theta: Hyperparams,
                    dataset: Dataset, pseudo: PseudoResponse, coord: int | None = None):
    """Gaussian conditional of one random effect under the pseudo data.

    For ``alpha``/``beta`` returns scalars (mean, variance).  For ``u``/``v``
    with ``coord=None`` returns the block conditional (mean vector,
    covariance matrix); with a coordinate index, the scalar conditional
    of that single entry holding the others fixed.
    """
    rows = _unit_rows(dataset, kind, index)
    f_x = dataset.x_event[rows] @ theta.f_w
    items = dataset.item_idx[rows]
    users = dataset.user_idx[rows]
    prec_obs = 1.0 / pseudo.sigma2[rows]
    r_obs = pseudo.r[rows]
    uv = np.einsum("nk,nk->n", state.U[users], state.V[items]) if state.r else 0.0

    if kind == "alpha":
        o = r_obs - f_x - state.beta[items] - uv
        prior_mean = float(dataset.user_features[index] @ theta.g_w)
        prior_var = theta.sigma2_alpha
    elif kind == "beta":
        o = r_obs - f_x - state.alpha[users] - uv
        prior_mean = float(dataset.item_features[index] @ theta.h_w)
        prior_var = theta.sigma2_beta
    elif kind in ("u", "v"):
        o = r_obs - f_x - state.alpha[users] - state.beta[items]
        if kind == "u":
            design = state.V[items]
            prior_mean_vec = theta.G_w @ dataset.user_features[index]
            prior_prec_vec = 1.0 / theta.sigma2_u_vector()
            own = state.U[index]
        else:
            design = state.U[users]
            prior_mean_vec = theta.H_w @ dataset.item_features[index]
            prior_prec_vec = np.full(theta.r, 1.0 / theta.sigma2_v)
            own = state.V[index]
        if coord is None:
            A = np.diag(prior_prec_vec) + (design.T * prec_obs) @ design
            b = prior_mean_vec * prior_prec_vec + design.T @ (o * prec_obs)
            try:
                cov = np.linalg.inv(A)
            except np.linalg.LinAlgError as exc:
                raise ContractViolation(f"singular factor conditional: {exc}") from exc
            if not np.all(np.isfinite(cov)):
                raise ContractViolation("factor conditional covariance is not finite")
            return cov @ b, cov
        partial = design @ own - design[:, coord] * own[coord]
        o_k = o - partial
        d_k = design[:, coord]
        prec = prior_prec_vec[coord] + float(d_k * prec_obs @ d_k)
        rhs = prior_mean_vec[coord] * prior_prec_vec[coord] + float(d_k * prec_obs @ o_k)
        return rhs / prec, 1.0 / prec
    else:
        raise ContractViolation(f"unknown effect kind {kind!r}")

    prec = 1.0 / prior_var + float(prec_obs.sum())
    rhs = prior_mean / prior_var + float(o @ prec_obs)
    return rhs / prec, 1.0 / prec


def ars_conditional_logdensity(kind: str, index: int, coord: int | None,
                               value: float, state: LatentState,
                               theta: Hyperparams, dataset: Dataset) -> float:
    """Exact conditional log density (up to a constant) of one coordinate.

    Sum of the logistic log-likelihood over the unit's observations with
    ``value`` substituted in, plus its Gaussian log-prior term.
    """
    rows = _unit_rows(dataset, kind, index)
    f_x = dataset.x_event[rows] @ theta.f_w
    items = dataset.item_idx[rows]
    users = dataset.user_idx[rows]
    uv = np.einsum("nk,nk->n", state.U[users], state.V[items]) if state.r else 0.0

    if kind == "alpha":
        s = f_x + value + state.beta[items] + uv
        prior_mean = float(dataset.user_features[index] @ theta.g_w)
        prior_var = theta.sigma2_alpha
    elif kind == "beta":
        s = f_x + state.alpha[users] + value + uv
        prior_mean = float(dataset.item_features[index] @ theta.h_w)
        prior_var = theta.sigma2_beta
    elif kind == "u":
        partial = uv - state.U[index, coord] * state.V[items, coord]
        s = f_x + value * state.V[items, coord] + state.alpha[users] + state.beta[items] + partial
        prior_mean = float((theta.G_w @ dataset.user_features[index])[coord])
        prior_var = float(theta.sigma2_u_vector()[coord])
    elif kind == "v":
        partial = uv - state.U[users, coord] * state.V[index, coord]
        s = f_x + value * state.U[users, coord] + state.alpha[users] + state.beta[items] + partial
        prior_mean = float((theta.H_w @ dataset.item_features[index])[coord])
        prior_var = theta.sigma2_v
    else:
        raise ContractViolation(f"unknown effect kind {kind!r}")

    sign = 1.0 - 2.0 * dataset.y[rows]
    ll = float(-np.logaddexp(0.0, sign * s).sum()) if rows.size else 0.0
    return ll - 0.5 * (value - prior_mean) ** 2 / prior_var


# ---------------------------------------------------------------------------
# Sweep context: per-E-step precomputation.
# ---------------------------------------------------------------------------


def _ragged_indices(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenation of ranges [starts[k], starts[k]+counts[k])."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    shift = np.concatenate(([0], np.cumsum(counts)[:-1]))
    return np.arange(total, dtype=np.int64) + np.repeat(starts - shift, counts)


@dataclass
class SweepContext:
    """Precomputed structures reused by every sweep of one E-step."""

    f_x: np.ndarray
    sign: np.ndarray             # 1 - 2y per observation
    user_order: np.ndarray       # observation indices sorted by user
    user_starts: np.ndarray
    user_counts: np.ndarray
    item_order: np.ndarray
    item_starts: np.ndarray
    item_counts: np.ndarray
    g_x: np.ndarray              # prior means g(x_i)
    h_x: np.ndarray
    G_x: np.ndarray              # prior means of user factors, (M, r)
    H_x: np.ndarray
    pseudo: PseudoResponse | None = None
    warm: dict = field(default_factory=dict)

    @classmethod
    def build(cls, dataset: Dataset, theta: Hyperparams,
              config: EStepConfig, xi: XiTable | None) -> "SweepContext":
        u_order = np.argsort(dataset.user_idx, kind="stable")
        u_sorted = dataset.user_idx[u_order]
        u_starts = np.searchsorted(u_sorted, np.arange(dataset.M))
        u_ends = np.searchsorted(u_sorted, np.arange(dataset.M) + 1)
        i_order = np.argsort(dataset.item_idx, kind="stable")
        i_sorted = dataset.item_idx[i_order]
        i_starts = np.searchsorted(i_sorted, np.arange(dataset.N))
        i_ends = np.searchsorted(i_sorted, np.arange(dataset.N) + 1)
        pseudo = None
        if config.method == "var":
            table = xi if xi is not None else XiTable(np.ones(dataset.n_obs))
            pseudo = var_pseudo(dataset.y, table.xi)
        return cls(
            f_x=dataset.x_event @ theta.f_w,
            sign=1.0 - 2.0 * dataset.y,
            user_order=u_order, user_starts=u_starts, user_counts=u_ends - u_starts,
            item_order=i_order, item_starts=i_starts, item_counts=i_ends - i_starts,
            g_x=dataset.user_features @ theta.g_w,
            h_x=dataset.item_features @ theta.h_w,
            G_x=dataset.user_features @ theta.G_w.T,
            H_x=dataset.item_features @ theta.H_w.T,
            pseudo=pseudo,
        )


# ---------------------------------------------------------------------------
# Lockstep batched ARS.
# ---------------------------------------------------------------------------


# Warm starts carry these hull percentiles to the next sweep.  Five
# points (not three) because a 3-point extended-chord hull overshoots
# badly between abscissae: measured acceptance is ~1/3 versus ~0.8 here.
WARM_QUANTILES = np.array([0.05, 0.25, 0.5, 0.75, 0.95])
N_WARM = WARM_QUANTILES.size


def _invert_matrix(seg: HullSegments, log_masses: np.ndarray,
                   W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hull CDF inversion for a (B, Q) matrix of uniforms at once.

    Same branch arithmetic as the single-draw inversion, but the segment
    probabilities are computed once per row however many quantiles are
    requested.  Returns (x, hull value at x), both (B, Q).
    """
    B, S = log_masses.shape
    log_total = hull_total_log_mass(log_masses)
    probs = np.exp(log_masses - log_total[:, None])
    cum = np.cumsum(probs, axis=1)
    idx = np.minimum((cum[:, :, None] < W[:, None, :]).sum(axis=1), S - 1)
    before = np.where(idx > 0,
                      np.take_along_axis(cum, np.maximum(idx - 1, 0), axis=1), 0.0)
    p_seg = np.maximum(np.take_along_axis(probs, idx, axis=1), 1e-300)
    t = np.minimum(np.maximum((W - before) / p_seg, 1e-300), 1.0 - 1e-16)

    rows = np.arange(B)[:, None]
    m = seg.slope[rows, idx]
    a = seg.lo[rows, idx]
    b = seg.hi[rows, idx]
    left_tail = np.isneginf(a)
    right_tail = np.isposinf(b)
    finite = ~left_tail & ~right_tail
    near_linear = finite & (np.abs(m) < ars_lib.SLOPE_EPS)

    x = np.empty_like(t)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        d = np.where(finite, m * (b - a), 0.0)
        big = finite & (d > 30.0)
        gen = finite & ~near_linear & ~big
        x = np.where(near_linear, a + t * (b - a), x)
        x = np.where(gen, a + np.log1p(t * np.expm1(d)) / m, x)
        x = np.where(big, b + np.log1p(-(1.0 - t) * (1.0 - np.exp(-d))) / m, x)
        x = np.where(left_tail, b + np.log(t) / m, x)
        x = np.where(right_tail, a + np.log1p(-t) / m, x)
    x = np.minimum(np.maximum(x, a), b)
    upper = seg.ah[rows, idx] + m * (x - seg.ax[rows, idx])
    return x, upper


def _hull_percentiles(seg: HullSegments, log_masses: np.ndarray) -> np.ndarray:
    """(B, len(WARM_QUANTILES)) hull percentiles per row, one inversion."""
    B = log_masses.shape[0]
    x, _ = _invert_matrix(seg, log_masses,
                          np.broadcast_to(WARM_QUANTILES, (B, N_WARM)))
    return x


def _row_insert(arr: np.ndarray, pos: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Insert one value per row at the given positions, keeping sort order."""
    B, K = arr.shape
    cols = np.arange(K + 1)[None, :]
    src = np.clip(cols - (cols > pos[:, None]), 0, K - 1)
    out = np.take_along_axis(arr, src, axis=1)
    out[np.arange(B), pos] = values
    return out


def batched_ars_draw(evaluate, B: int, prior_mean: np.ndarray, prior_sd: np.ndarray,
                     warm_points: np.ndarray | None, rng: np.random.Generator,
                     lower_bound: float | None = None, label: str = "",
                     max_rejections: int = ars_lib.MAX_REJECTIONS,
                     point_budget: int = ars_lib.POINT_BUDGET):
    """One exact ARS draw per unit, all units advanced in lockstep.

    ``evaluate(values, units)`` returns each listed unit's conditional
    log density at its value.  Returns (draws, warm percentile points
    for the next call, total rejections).
    """
    truncated = lower_bound is not None
    prior_sd = np.broadcast_to(np.asarray(prior_sd, dtype=np.float64), (B,))
    prior_mean = np.asarray(prior_mean, dtype=np.float64)
    units = np.arange(B)

    # -- initial abscissae: warm percentiles where valid, else prior-based
    spread = 2.0 * prior_sd.copy()
    xs = np.empty((B, N_WARM))
    if warm_points is not None and warm_points.shape == (B, N_WARM):
        xs[:] = warm_points
        ok = np.all(np.isfinite(xs), axis=1) \
            & np.all(xs[:, 1:] > xs[:, :-1], axis=1)
        if truncated:
            ok &= xs[:, 0] > lower_bound
        bad = ~ok
    else:
        bad = np.ones(B, dtype=bool)
    if bad.any():
        xs[bad] = _prior_points(prior_mean[bad], spread[bad], lower_bound)
    hs = evaluate(xs.ravel(), np.repeat(units, N_WARM)).reshape(B, N_WARM)
    if not np.all(np.isfinite(hs)):
        raise ContractViolation(f"{label}: conditional log density not finite")

    # -- widen rows whose chords do not straddle the mode
    for _ in range(ars_lib.WIDEN_LIMIT):
        m = chord_slopes(xs, hs)
        bad = ~slopes_straddle(m, truncated)
        if not bad.any():
            break
        spread[bad] *= 2.0
        xs[bad] = _prior_points(prior_mean[bad], spread[bad], lower_bound)
        hs[bad] = evaluate(xs[bad].ravel(),
                           np.repeat(units[bad], N_WARM)).reshape(-1, N_WARM)
        if not np.all(np.isfinite(hs[bad])):
            raise ContractViolation(f"{label}: conditional log density not finite")
    else:
        bad_units = units[bad]
        err = ModeNotStraddled((float(m[bad][0, 0]), float(m[bad][0, -1])))
        err.args = (f"{label}: units {bad_units[:5].tolist()}: {err.args[0]}",)
        raise err

    draws = np.empty(B)
    warm_out = np.empty((B, N_WARM))
    rejections = np.zeros(B, dtype=np.int64)
    active = units
    total_rejections = 0

    while active.size:
        seg = build_hull(xs, hs, lower_bound)
        log_m = hull_log_masses(seg)
        # one inversion covers the sampled point and the warm-out quantiles
        W = np.empty((active.size, 1 + N_WARM))
        W[:, 0] = np.maximum(rng.random(active.size), 1e-300)
        W[:, 1:] = WARM_QUANTILES
        X, UP = _invert_matrix(seg, log_m, W)
        x_star = X[:, 0]
        up = UP[:, 0]
        z = np.maximum(rng.random(active.size), 1e-300)
        log_z = np.log(z)
        low = eval_lower(xs, hs, x_star)
        accept = log_z <= low - up
        need = ~accept
        h_star = np.full(active.size, -np.inf)
        if need.any():
            h_star[need] = evaluate(x_star[need], active[need])
            if not np.all(np.isfinite(h_star[need])):
                raise ContractViolation(f"{label}: conditional log density not finite")
            accept[need] = log_z[need] <= h_star[need] - up[need]

        if accept.any():
            acc_units = active[accept]
            draws[acc_units] = x_star[accept]
            warm_out[acc_units] = X[accept, 1:]

        reject = ~accept
        if not reject.any():
            break
        rej_units = active[reject]
        rejections[rej_units] += 1
        total_rejections += int(reject.sum())
        if rejections[rej_units].max() > max_rejections:
            worst = rej_units[np.argmax(rejections[rej_units])]
            raise RejectionLimitError(
                f"{label}: unit {worst} exceeded {max_rejections} rejections; "
                "target may not be log-concave")

        xs = xs[reject]
        hs = hs[reject]
        x_r = x_star[reject]
        h_r = h_star[reject]
        active = rej_units
        if xs.shape[1] >= point_budget:
            continue
        # exact float collisions with an existing abscissa cannot be
        # inserted; finish those rows with the scalar sampler
        dup = np.any(xs == x_r[:, None], axis=1)
        if dup.any():
            for row in np.flatnonzero(dup):
                unit = int(active[row])
                env = ars_lib.Envelope(xs[row], hs[row], lower_bound,
                                       mass_offset=float(hs[row].max()))
                d, extra, env = ars_lib.sample(
                    env, lambda v, u=unit: float(evaluate(np.array([v]), np.array([u]))[0]),
                    rng, max_rejections=max_rejections - int(rejections[unit]),
                    point_budget=point_budget)
                draws[unit] = d
                warm_out[unit] = _hull_percentiles(env._seg,
                                                   env.log_seg_masses[None, :])[0]
                total_rejections += extra
            keep = ~dup
            xs, hs, x_r, h_r, active = xs[keep], hs[keep], x_r[keep], h_r[keep], active[keep]
            if not active.size:
                break
        pos = (xs < x_r[:, None]).sum(axis=1)
        xs = _row_insert(xs, pos, x_r)
        hs = _row_insert(hs, pos, h_r)
        # rows whose refined hull lost integrability (numeric noise in a
        # barely-concave target) revert to the previous points
        m_new = chord_slopes(xs, hs)
        ok = slopes_straddle(m_new, truncated)
        if not ok.all():
            # safe fallback: finish those rows with the scalar sampler,
            # starting from the pre-insertion points
            for row in np.flatnonzero(~ok):
                unit = int(active[row])
                old_xs = np.delete(xs[row], pos[row])
                old_hs = np.delete(hs[row], pos[row])
                env = ars_lib.Envelope(old_xs, old_hs, lower_bound,
                                       mass_offset=float(old_hs.max()))
                d, extra, env = ars_lib.sample(
                    env, lambda v, u=unit: float(evaluate(np.array([v]), np.array([u]))[0]),
                    rng, max_rejections=max_rejections - int(rejections[unit]),
                    point_budget=point_budget)
                draws[unit] = d
                warm_out[unit] = _hull_percentiles(env._seg,
                                                   env.log_seg_masses[None, :])[0]
                total_rejections += extra
            keep = ok
            xs, hs, active = xs[keep], hs[keep], active[keep]

    return draws, warm_out, total_rejections


def _prior_points(mean: np.ndarray, spread: np.ndarray,
                  lower_bound: float | None) -> np.ndarray:
    if lower_bound is None:
        offsets = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
        return mean[:, None] + spread[:, None] * offsets
    right = np.maximum(mean + spread, lower_bound + spread)
    fracs = np.array([0.125, 0.25, 0.5, 0.75, 1.0])
    return lower_bound + fracs * (right - lower_bound)[:, None]


# ---------------------------------------------------------------------------
# Block draws.
# ---------------------------------------------------------------------------


def _make_evaluator(off_sorted, design_sorted, sign_sorted, starts, counts,
                    prior_mean, prior_var):
    """Conditional log density evaluator over sorted per-unit observations."""

    def evaluate(values, unit_ids):
        st = starts[unit_ids]
        ct = counts[unit_ids]
        sums = np.zeros(unit_ids.size)
        if ct.sum():
            rows = _ragged_indices(st, ct)
            rep = np.repeat(np.arange(unit_ids.size), ct)
            s = off_sorted[rows] + design_sorted[rows] * values[rep]
            ll = -np.logaddexp(0.0, sign_sorted[rows] * s)
            sums = np.bincount(rep, weights=ll, minlength=unit_ids.size)
        return sums - 0.5 * (values - prior_mean[unit_ids]) ** 2 / prior_var[unit_ids]

    return evaluate


def _var_block_scalar(o_obs, prec_obs, unit_idx, B, prior_mean, prior_var, rng):
    """Vectorized draw of all alpha-like effects from Gaussian conditionals."""
    prec = 1.0 / prior_var + np.bincount(unit_idx, weights=prec_obs, minlength=B)
    rhs = prior_mean / prior_var + np.bincount(unit_idx, weights=o_obs * prec_obs,
                                               minlength=B)
    var = 1.0 / prec
    mean = var * rhs
    return mean + np.sqrt(var) * rng.standard_normal(B), mean, var


def _var_block_factor(o_obs, prec_obs, unit_idx, design_obs, B, prior_mean_mat,
                      prior_prec_vec, rng):
    """Vectorized block draw of all user (or item) factor vectors."""
    r = design_obs.shape[1]
    A = np.zeros((B, r, r))
    for k in range(r):
        for l in range(k, r):
            w = design_obs[:, k] * design_obs[:, l] * prec_obs
            A[:, k, l] = np.bincount(unit_idx, weights=w, minlength=B)
            if l != k:
                A[:, l, k] = A[:, k, l]
    A[:, np.arange(r), np.arange(r)] += prior_prec_vec
    b = prior_mean_mat * prior_prec_vec
    for k in range(r):
        b[:, k] += np.bincount(unit_idx, weights=o_obs * design_obs[:, k] * prec_obs,
                               minlength=B)
    mean = np.linalg.solve(A, b[..., None])[..., 0]
    L = np.linalg.cholesky(A)
    z = rng.standard_normal((B, r))
    noise = np.linalg.solve(np.transpose(L, (0, 2, 1)), z[..., None])[..., 0]
    return mean + noise


def _uv_obs(state: LatentState, dataset: Dataset) -> np.ndarray:
    if state.r == 0:
        return np.zeros(dataset.n_obs)
    return np.einsum("nk,nk->n", state.U[dataset.user_idx], state.V[dataset.item_idx])


def _var_sweep(state: LatentState, theta: Hyperparams, dataset: Dataset,
               ctx: SweepContext, rng: np.random.Generator) -> None:
    ui, ii = dataset.user_idx, dataset.item_idx
    r_ps = ctx.pseudo.r
    prec_obs = 1.0 / ctx.pseudo.sigma2
    uv = _uv_obs(state, dataset)

    o = r_ps - ctx.f_x - state.beta[ii] - uv
    state.alpha, _, _ = _var_block_scalar(o, prec_obs, ui, dataset.M, ctx.g_x,
                                          theta.sigma2_alpha, rng)
    o = r_ps - ctx.f_x - state.alpha[ui] - uv
    state.beta, _, _ = _var_block_scalar(o, prec_obs, ii, dataset.N, ctx.h_x,
                                         theta.sigma2_beta, rng)
    if state.r:
        o = r_ps - ctx.f_x - state.alpha[ui] - state.beta[ii]
        state.U = _var_block_factor(o, prec_obs, ui, state.V[ii], dataset.M,
                                    ctx.G_x.copy(), 1.0 / theta.sigma2_u_vector(), rng)
        state.V = _var_block_factor(o, prec_obs, ii, state.U[ui], dataset.N,
                                    ctx.H_x.copy(), 1.0 / theta.sigma2_v, rng)


def _ars_sweep(state: LatentState, theta: Hyperparams, dataset: Dataset,
               ctx: SweepContext, rng: np.random.Generator,
               truncate_v: bool) -> None:
    ui, ii = dataset.user_idx, dataset.item_idx
    ones = np.ones(dataset.n_obs)
    uv = _uv_obs(state, dataset)

    def draw(off_obs, design_obs, order, starts, counts, B, prior_mean, prior_var,
             warm_key, lower_bound, label):
        evaluate = _make_evaluator(off_obs[order], design_obs[order],
                                   ctx.sign[order], starts, counts,
                                   prior_mean, np.broadcast_to(prior_var, (B,)))
        values, warm, _ = batched_ars_draw(
            evaluate, B, prior_mean, np.sqrt(prior_var),
            ctx.warm.get(warm_key), rng, lower_bound, label)
        ctx.warm[warm_key] = warm
        return values

    off = ctx.f_x + state.beta[ii] + uv
    state.alpha = draw(off, ones, ctx.user_order, ctx.user_starts, ctx.user_counts,
                       dataset.M, ctx.g_x, theta.sigma2_alpha, ("alpha",), None,
                       "alpha draw")
    off = ctx.f_x + state.alpha[ui] + uv
    state.beta = draw(off, ones, ctx.item_order, ctx.item_starts, ctx.item_counts,
                      dataset.N, ctx.h_x, theta.sigma2_beta, ("beta",), None,
                      "beta draw")
    sigma2_u = theta.sigma2_u_vector()
    base = ctx.f_x + state.alpha[ui] + state.beta[ii]
    for k in range(state.r):
        off = base + uv - state.U[ui, k] * state.V[ii, k]
        new_uk = draw(off, state.V[ii, k], ctx.user_order, ctx.user_starts,
                      ctx.user_counts, dataset.M, ctx.G_x[:, k], float(sigma2_u[k]),
                      ("u", k), None, f"u[:, {k}] draw")
        uv = uv + (new_uk[ui] - state.U[ui, k]) * state.V[ii, k]
        state.U[:, k] = new_uk
    v_bound = ARSID_LOWER_BOUND if truncate_v else None
    for k in range(state.r):
        off = base + uv - state.U[ui, k] * state.V[ii, k]
        new_vk = draw(off, state.U[ui, k], ctx.item_order, ctx.item_starts,
                      ctx.item_counts, dataset.N, ctx.H_x[:, k], theta.sigma2_v,
                      ("v", k), v_bound, f"v[:, {k}] draw")
        uv = uv + (new_vk[ii] - state.V[ii, k]) * state.U[ui, k]
        state.V[:, k] = new_vk


def gibbs_sweep(state: LatentState, theta: Hyperparams, dataset: Dataset,
                ctx: SweepContext, rng: np.random.Generator,
                config: EStepConfig) -> LatentState:
    """One full pass over alpha, beta, U, V, in that order (in place)."""
    if config.method == "var":
        _var_sweep(state, theta, dataset, ctx, rng)
    else:
        _ars_sweep(state, theta, dataset, ctx, rng,
                   truncate_v=config.method == "arsid")
    return state


# ---------------------------------------------------------------------------
# Centering and the E-step driver.
# ---------------------------------------------------------------------------


def center(obj, center_v: bool = True):
    """Subtract across-unit means from the effects (identifiability).

    alpha and each column of U lose their across-user means; beta and
    each column of V their across-item means.  Under ARSID (``center_v``
    False) V is left alone so positivity survives.  Returns a new object
    of the same type.
    """
    if isinstance(obj, SufficientStats):
        stats = SufficientStats(
            mean_alpha=obj.mean_alpha - obj.mean_alpha.mean(),
            mean_beta=obj.mean_beta - obj.mean_beta.mean(),
            mean_U=obj.mean_U - obj.mean_U.mean(axis=0, keepdims=True),
            mean_V=obj.mean_V - obj.mean_V.mean(axis=0, keepdims=True)
            if center_v else obj.mean_V.copy(),
            sum_var_alpha=obj.sum_var_alpha, sum_var_beta=obj.sum_var_beta,
            sum_var_U=obj.sum_var_U, sum_var_V=obj.sum_var_V,
            per_coord_var_U=obj.per_coord_var_U, L=obj.L)
        return stats
    if isinstance(obj, LatentState):
        return LatentState(
            alpha=obj.alpha - obj.alpha.mean(),
            beta=obj.beta - obj.beta.mean(),
            U=obj.U - obj.U.mean(axis=0, keepdims=True) if obj.r else obj.U.copy(),
            V=obj.V - obj.V.mean(axis=0, keepdims=True)
            if (center_v and obj.r) else obj.V.copy())
    raise ContractViolation(f"cannot center object of type {type(obj)!r}")


def run_estep(state: LatentState, theta: Hyperparams, dataset: Dataset,
              config: EStepConfig, rng: np.random.Generator | None = None,
              xi: XiTable | None = None):
    """Burn-in plus L retained sweeps; returns (stats, final state, xi').

    Sufficient statistics are per-coordinate means and variances over the
    retained sweeps (population variances, so L=1 gives zeros), with
    centering applied to the accumulated means only; the chain state is
    left uncentered.  The VAR path also returns the next iteration's xi
    table (root mean square of the sampled scores); other methods return
    ``None`` for it.
    """
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    ctx = SweepContext.build(dataset, theta, config, xi)
    state = state.copy()
    M, N, r = dataset.M, dataset.N, state.r
    L = config.L

    sum_a = np.zeros(M)
    sq_a = np.zeros(M)
    sum_b = np.zeros(N)
    sq_b = np.zeros(N)
    sum_U = np.zeros((M, r))
    sq_U = np.zeros((M, r))
    sum_V = np.zeros((N, r))
    sq_V = np.zeros((N, r))
    sum_s2 = np.zeros(dataset.n_obs)

    for t in range(config.burn_in + L):
        gibbs_sweep(state, theta, dataset, ctx, rng, config)
        if t < config.burn_in:
            continue
        sum_a += state.alpha
        sq_a += state.alpha ** 2
        sum_b += state.beta
        sq_b += state.beta ** 2
        if r:
            sum_U += state.U
            sq_U += state.U ** 2
            sum_V += state.V
            sq_V += state.V ** 2
        s = ctx.f_x + state.alpha[dataset.user_idx] + state.beta[dataset.item_idx] \
            + _uv_obs(state, dataset)
        sum_s2 += s * s

    def moments(total, total_sq):
        mean = total / L
        var = np.maximum(total_sq / L - mean ** 2, 0.0)
        return mean, var

    mean_a, var_a = moments(sum_a, sq_a)
    mean_b, var_b = moments(sum_b, sq_b)
    mean_U, var_U = moments(sum_U, sq_U)
    mean_V, var_V = moments(sum_V, sq_V)
    stats = SufficientStats(
        mean_alpha=mean_a, mean_beta=mean_b, mean_U=mean_U, mean_V=mean_V,
        sum_var_alpha=float(var_a.sum()), sum_var_beta=float(var_b.sum()),
        sum_var_U=float(var_U.sum()), sum_var_V=float(var_V.sum()),
        per_coord_var_U=var_U.sum(axis=0), L=L)
    stats = center(stats, center_v=config.center_v)

    xi_out = xi_from_mean_square(sum_s2 / L) if config.method == "var" else None
    return stats, state, xi_out
