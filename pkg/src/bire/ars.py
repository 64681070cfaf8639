"""Derivative-free adaptive rejection sampling for log-concave densities.

Exact sampling from an arbitrary univariate log-concave density given
only the ability to evaluate log p(x) up to a constant.  Chords between
evaluated points form a piecewise-linear lower hull; extending each
chord beyond its bracket to the intersection with its neighbour forms
the upper hull.  Samples are drawn from the exponentiated upper hull by
inverse CDF; every rejected draw adds an evaluated point, which tightens
both hulls, so the acceptance rate climbs toward one.  An optional
``lower_bound`` truncates the support from below.

All mass arithmetic is in log space: Gibbs conditionals arrive
unnormalized with arbitrary additive offsets.

The hull geometry is written over batches of envelopes (one row per
envelope, all with the same point count) so the blocked Gibbs sampler
can run thousands of independent ARS draws in lockstep; the public
single-envelope API wraps the batch kernels with one row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractViolation, ModeNotStraddled, RejectionLimitError


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise logsumexp without scipy's dispatch overhead (hot path)."""
    m = np.max(a, axis=-1)
    finite = np.isfinite(m)
    safe = np.where(finite, m, 0.0)
    with np.errstate(divide="ignore"):
        out = safe + np.log(np.sum(np.exp(a - safe[..., None]), axis=-1))
    return np.where(finite, out, m)

# Below this, segment integration/inversion switches to the linear limit
# to dodge cancellation in (exp(m*b) - exp(m*a)) / m.
SLOPE_EPS = 1e-12
# One draw may consume at most this many rejections before we conclude
# the target is not log-concave.
MAX_REJECTIONS = 1000
# An envelope stops refining past this many abscissae.
POINT_BUDGET = 50
# Initial-point search widens geometrically at most this many times.
WIDEN_LIMIT = 40


@dataclass(frozen=True)
class LogDensity:
    """Univariate log density, known up to an additive constant.

    ``eval`` must be log-concave on the support; violations surface as
    envelope errors or rejection-limit errors during sampling.
    """

    eval: Callable[[float], float]


def _as_callable(density) -> Callable[[float], float]:
    return density.eval if hasattr(density, "eval") else density


# ---------------------------------------------------------------------------
# Batch hull geometry.  Arrays are (B, K) points or (B, S) segments with
# S = 2K - 2: left tail, first interval, two pieces per interior interval
# (split where the two chord extensions cross), last interval, right tail.
# ---------------------------------------------------------------------------


@dataclass
class HullSegments:
    """Per-segment line pieces: value = ah + slope * (x - ax) on [lo, hi]."""

    slope: np.ndarray
    ax: np.ndarray
    ah: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


def chord_slopes(xs: np.ndarray, hs: np.ndarray) -> np.ndarray:
    return np.diff(hs, axis=-1) / np.diff(xs, axis=-1)


def build_hull(xs: np.ndarray, hs: np.ndarray,
               lower_bound: float | None = None) -> HullSegments:
    """Upper-hull segments for each row of (sorted) abscissae.

    On interval [x_i, x_{i+1}] the hull is the lower of the two chords
    adjacent to the interval, each extended across it; the pieces swap
    at the crossing point z_i.  The boundary intervals and tails have a
    single candidate chord each.
    """
    B, K = xs.shape
    if K < 3:
        raise ContractViolation("hull needs at least 3 points")
    m = chord_slopes(xs, hs)
    S = 2 * K - 2
    slope = np.empty((B, S))
    ax = np.empty((B, S))
    ah = np.empty((B, S))
    lo = np.empty((B, S))
    hi = np.empty((B, S))

    lb = -np.inf if lower_bound is None else float(lower_bound)
    slope[:, 0] = m[:, 0]
    ax[:, 0] = xs[:, 0]
    ah[:, 0] = hs[:, 0]
    lo[:, 0] = lb
    hi[:, 0] = xs[:, 0]

    slope[:, 1] = m[:, 1]
    ax[:, 1] = xs[:, 1]
    ah[:, 1] = hs[:, 1]
    lo[:, 1] = xs[:, 0]
    hi[:, 1] = xs[:, 1]

    if K > 3:
        # all interior intervals i = 1..K-3 at once
        m_left = m[:, 0:K - 3]
        m_right = m[:, 2:K - 1]
        x_i = xs[:, 1:K - 2]
        x_i1 = xs[:, 2:K - 1]
        h_i = hs[:, 1:K - 2]
        h_i1 = hs[:, 2:K - 1]
        denom = m_left - m_right
        num = h_i1 - h_i + m_left * x_i - m_right * x_i1
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(np.abs(denom) > SLOPE_EPS, num / denom, x_i)
        z = np.minimum(np.maximum(z, x_i), x_i1)
        a_cols = slice(2, S - 2, 2)
        b_cols = slice(3, S - 2, 2)
        slope[:, a_cols] = m_left
        ax[:, a_cols] = x_i
        ah[:, a_cols] = h_i
        lo[:, a_cols] = x_i
        hi[:, a_cols] = z
        slope[:, b_cols] = m_right
        ax[:, b_cols] = x_i1
        ah[:, b_cols] = h_i1
        lo[:, b_cols] = z
        hi[:, b_cols] = x_i1

    slope[:, S - 2] = m[:, K - 3]
    ax[:, S - 2] = xs[:, K - 2]
    ah[:, S - 2] = hs[:, K - 2]
    lo[:, S - 2] = xs[:, K - 2]
    hi[:, S - 2] = xs[:, K - 1]

    slope[:, S - 1] = m[:, K - 2]
    ax[:, S - 1] = xs[:, K - 1]
    ah[:, S - 1] = hs[:, K - 1]
    lo[:, S - 1] = xs[:, K - 1]
    hi[:, S - 1] = np.inf
    return HullSegments(slope, ax, ah, lo, hi)


def hull_log_masses(seg: HullSegments) -> np.ndarray:
    """log of the integral of exp(hull) over each segment.

    The generic formula ah + max(a', b') + log(-expm1(-|m| w)) - log|m|
    (a', b' the endpoint values relative to the anchor) covers infinite
    tails too, where expm1(-inf) = -1.  Near-zero slopes on finite
    segments use the linear limit instead.
    """
    m, ax, ah, lo, hi = seg.slope, seg.ax, seg.ah, seg.lo, seg.hi
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        width = hi - lo
        absm = np.abs(m)
        a_rel = m * (lo - ax)
        b_rel = m * (hi - ax)
        peak = np.maximum(a_rel, b_rel)
        generic = ah + peak + np.log(-np.expm1(-absm * width)) - np.log(absm)
        mid = 0.5 * (lo + hi)
        linear = ah + m * (mid - ax) + np.log(width)
        out = np.where((absm < SLOPE_EPS) & np.isfinite(width), linear, generic)
    return out


def hull_total_log_mass(log_masses: np.ndarray) -> np.ndarray:
    return _logsumexp_rows(log_masses)


def invert_hull(seg: HullSegments, log_masses: np.ndarray,
                w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map uniforms ``w`` in (0,1) through the hull CDF, one per row.

    Returns the abscissae, the segment index each landed in, and the
    hull value there (from the generating segment, so acceptance ratios
    use exactly the density the point was drawn from).
    """
    B, S = log_masses.shape
    log_total = hull_total_log_mass(log_masses)
    probs = np.exp(log_masses - log_total[:, None])
    cum = np.cumsum(probs, axis=1)
    idx = np.minimum((cum < w[:, None]).sum(axis=1), S - 1)
    rows = np.arange(B)
    before = np.where(idx > 0, cum[rows, np.maximum(idx - 1, 0)], 0.0)
    p_seg = np.maximum(probs[rows, idx], 1e-300)
    t = np.minimum(np.maximum((w - before) / p_seg, 1e-300), 1.0 - 1e-16)

    m = seg.slope[rows, idx]
    a = seg.lo[rows, idx]
    b = seg.hi[rows, idx]
    left_tail = np.isneginf(a)
    right_tail = np.isposinf(b)
    finite = ~left_tail & ~right_tail
    near_linear = finite & (np.abs(m) < SLOPE_EPS)

    x = np.empty(B)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        d = np.where(finite, m * (b - a), 0.0)
        big = finite & (d > 30.0)
        gen = finite & ~near_linear & ~big

        x = np.where(near_linear, a + t * (b - a), x)
        x = np.where(gen, a + np.log1p(t * np.expm1(d)) / m, x)
        x = np.where(big, b + np.log1p(-(1.0 - t) * (1.0 - np.exp(-d))) / m, x)
        x = np.where(left_tail, b + np.log(t) / m, x)
        x = np.where(right_tail, a + np.log1p(-t) / m, x)
    x = np.minimum(np.maximum(x, seg.lo[rows, idx]), seg.hi[rows, idx])
    upper_at_x = seg.ah[rows, idx] + m * (x - seg.ax[rows, idx])
    return x, idx, upper_at_x


def eval_upper(seg: HullSegments, x: np.ndarray) -> np.ndarray:
    """Hull value at ``x`` (one x per row): min over covering pieces.

    Boundary abscissae belong to two pieces; the min picks the one
    anchored there, so the hull equals log p exactly on every abscissa.
    """
    xc = x[:, None]
    with np.errstate(invalid="ignore"):
        vals = seg.ah + seg.slope * (xc - seg.ax)
    vals = np.where((seg.lo <= xc) & (xc <= seg.hi), vals, np.inf)
    return vals.min(axis=1)


def eval_lower(xs: np.ndarray, hs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Chord hull value at ``x`` (one per row); -inf outside [x_0, x_{K-1}]."""
    B, K = xs.shape
    inside = (x >= xs[:, 0]) & (x <= xs[:, -1])
    pos = np.clip((xs <= x[:, None]).sum(axis=1) - 1, 0, K - 2)
    rows = np.arange(B)
    m = (hs[rows, pos + 1] - hs[rows, pos]) / (xs[rows, pos + 1] - xs[rows, pos])
    val = hs[rows, pos] + m * (x - xs[rows, pos])
    return np.where(inside, val, -np.inf)


def slopes_straddle(m: np.ndarray, truncated: bool) -> np.ndarray:
    """Whether each row's chord slopes admit an integrable hull.

    Untruncated support needs a rising first chord and a falling last
    chord; with a finite left bound only the falling last chord matters.
    """
    ok = m[:, -1] < 0.0
    if not truncated:
        ok = ok & (m[:, 0] > 0.0)
    return ok


# ---------------------------------------------------------------------------
# Single-envelope API.
# ---------------------------------------------------------------------------


class Envelope:
    """Hulls of one log-concave density, refined as points accumulate.

    ``seg_masses`` and ``total_mass`` are reported relative to the
    highest log-density value seen at construction, so they stay finite
    for conditionals with huge additive offsets; ratios are unaffected.
    """

    def __init__(self, xs: np.ndarray, hs: np.ndarray,
                 lower_bound: float | None, mass_offset: float):
        self.xs = xs
        self.hs = hs
        self.lower_bound = lower_bound
        self.mass_offset = mass_offset
        self._seg = build_hull(xs[None, :], hs[None, :], lower_bound)
        self.log_seg_masses = hull_log_masses(self._seg)[0]
        self.log_total_mass = float(_logsumexp_rows(self.log_seg_masses))
        if not np.isfinite(self.log_total_mass):
            raise ContractViolation("hull mass is not finite; check log-concavity")

    # -- public accessors -------------------------------------------------

    @property
    def points(self) -> np.ndarray:
        """(K, 2) array of (x, log p(x)), sorted by x."""
        return np.column_stack([self.xs, self.hs])

    @property
    def upper_segments(self) -> np.ndarray:
        """(S, 4) rows (slope, intercept, lo, hi) with value = slope*x + intercept."""
        s = self._seg
        intercept = s.ah[0] - s.slope[0] * s.ax[0]
        return np.column_stack([s.slope[0], intercept, s.lo[0], s.hi[0]])

    @property
    def lower_segments(self) -> np.ndarray:
        """(K-1, 4) chord rows (slope, intercept, lo, hi)."""
        m = chord_slopes(self.xs, self.hs)
        intercept = self.hs[:-1] - m * self.xs[:-1]
        return np.column_stack([m, intercept, self.xs[:-1], self.xs[1:]])

    @property
    def seg_masses(self) -> np.ndarray:
        return np.exp(self.log_seg_masses - self.mass_offset)

    @property
    def total_mass(self) -> float:
        return float(np.exp(self.log_total_mass - self.mass_offset))

    # -- evaluation -------------------------------------------------------

    def upper(self, x) -> np.ndarray | float:
        x_arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
        s = self._seg
        wide = HullSegments(*(np.broadcast_to(a, (x_arr.size, a.shape[1]))
                              for a in (s.slope, s.ax, s.ah, s.lo, s.hi)))
        out = eval_upper(wide, x_arr)
        return float(out[0]) if np.ndim(x) == 0 else out

    def lower(self, x) -> np.ndarray | float:
        x_arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
        out = eval_lower(np.broadcast_to(self.xs, (x_arr.size, self.xs.size)),
                         np.broadcast_to(self.hs, (x_arr.size, self.hs.size)),
                         x_arr)
        return float(out[0]) if np.ndim(x) == 0 else out

    def with_point(self, x_new: float, h_new: float) -> "Envelope":
        """A refined envelope including (x_new, h_new); self is unchanged."""
        k = int(np.searchsorted(self.xs, x_new))
        xs = np.insert(self.xs, k, x_new)
        hs = np.insert(self.hs, k, h_new)
        return Envelope(xs, hs, self.lower_bound, self.mass_offset)


def build_envelope(density, init_points, lower_bound: float | None = None) -> Envelope:
    """Evaluate the density at ``init_points`` and build hulls.

    ``init_points``: at least 3, strictly increasing, all above
    ``lower_bound`` when set.  The chord slopes must straddle the mode
    (rise then fall); otherwise a retryable ``ModeNotStraddled`` carries
    the offending end slopes so the caller can widen and retry.
    """
    f = _as_callable(density)
    xs = np.asarray(init_points, dtype=np.float64).ravel()
    if xs.size < 3:
        raise ContractViolation("need at least 3 initial points")
    if np.any(np.diff(xs) <= 0):
        raise ContractViolation("initial points must be strictly increasing")
    if lower_bound is not None and xs[0] <= lower_bound:
        raise ContractViolation("initial points must lie above the lower bound")
    hs = np.array([float(f(x)) for x in xs])
    if not np.all(np.isfinite(hs)):
        raise ContractViolation("log density must be finite at every initial point")
    m = chord_slopes(xs, hs)
    if not slopes_straddle(m[None, :], truncated=lower_bound is not None)[0]:
        raise ModeNotStraddled((float(m[0]), float(m[-1])))
    return Envelope(xs, hs, lower_bound, mass_offset=float(hs.max()))


def initial_points(prior_mean: float, spread: float,
                   lower_bound: float | None = None) -> np.ndarray:
    """Three starting abscissae around the prior, respecting truncation."""
    if lower_bound is None:
        return np.array([prior_mean - spread, prior_mean, prior_mean + spread])
    right = max(prior_mean + spread, lower_bound + spread)
    return np.array([lower_bound + 0.25 * (right - lower_bound),
                     lower_bound + 0.5 * (right - lower_bound),
                     right])


def build_envelope_widening(density, prior_mean: float, prior_sd: float,
                            lower_bound: float | None = None) -> Envelope:
    """Build from prior mean +/- 2 sd, doubling the spread until the
    points straddle the mode (at most ``WIDEN_LIMIT`` doublings)."""
    spread = 2.0 * prior_sd
    last_exc = None
    for _ in range(WIDEN_LIMIT + 1):
        try:
            return build_envelope(density, initial_points(prior_mean, spread, lower_bound),
                                  lower_bound)
        except ModeNotStraddled as exc:
            last_exc = exc
            spread *= 2.0
    raise last_exc


def sample_hull(envelope: Envelope, rng: np.random.Generator) -> float:
    """One draw from the normalized exponentiated upper hull."""
    w = rng.random()
    while w == 0.0:
        w = rng.random()
    x, _, _ = invert_hull(envelope._seg, envelope.log_seg_masses[None, :],
                          np.array([w]))
    return float(x[0])


def percentile_warm_start(previous_envelope: Envelope) -> tuple[float, float, float]:
    """5th/50th/95th percentiles of the hull distribution, analytically."""
    seg = previous_envelope._seg
    lm = previous_envelope.log_seg_masses[None, :]
    out = []
    for q in (0.05, 0.5, 0.95):
        x, _, _ = invert_hull(seg, lm, np.array([q]))
        out.append(float(x[0]))
    return tuple(out)


def sample(envelope: Envelope, density, rng: np.random.Generator,
           max_rejections: int = MAX_REJECTIONS,
           point_budget: int = POINT_BUDGET) -> tuple[float, int, Envelope]:
    """One exact draw from the density under the envelope.

    Returns (draw, rejection count before acceptance, refined envelope).
    The squeeze test (hull ratio) runs before any density evaluation;
    each rejected point is added to the envelope while under the point
    budget.  More rejections than ``max_rejections`` aborts: the target
    is probably not log-concave.
    """
    f = _as_callable(density)
    rejections = 0
    env = envelope
    while True:
        w = rng.random()
        while w == 0.0:
            w = rng.random()
        x, _, up = invert_hull(env._seg, env.log_seg_masses[None, :], np.array([w]))
        x_star = float(x[0])
        up = float(up[0])
        z = rng.random()
        log_z = np.log(z) if z > 0.0 else -np.inf
        low = eval_lower(env.xs[None, :], env.hs[None, :], np.array([x_star]))[0]
        if log_z <= low - up:
            return x_star, rejections, env
        h_star = float(f(x_star))
        if not np.isfinite(h_star):
            raise ContractViolation(f"log density not finite at {x_star!r}")
        if log_z <= h_star - up:
            return x_star, rejections, env
        rejections += 1
        if rejections > max_rejections:
            raise RejectionLimitError(
                f"gave up after {rejections} rejections; target may not be log-concave")
        if env.xs.size < point_budget and np.min(np.abs(env.xs - x_star)) > 1e-12:
            k = int(np.searchsorted(env.xs, x_star))
            xs2 = np.insert(env.xs, k, x_star)
            hs2 = np.insert(env.hs, k, h_star)
            m2 = chord_slopes(xs2, hs2)
            # numerically non-concave targets can break integrability;
            # keep the old hull in that case
            if slopes_straddle(m2[None, :], truncated=env.lower_bound is not None)[0]:
                try:
                    env = Envelope(xs2, hs2, env.lower_bound, env.mass_offset)
                except ContractViolation:
                    pass
