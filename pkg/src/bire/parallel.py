"""Partitioned fitting: deterministic sharding, per-shard MCEM in a worker
pool, parameter averaging, and ensemble E-step runs.

The dataflow mirrors a map-reduce pipeline run in one process: a keying
pass assigns every observation to a shard, shards are fitted (or re-sampled)
independently, and the per-shard results are averaged back together. All
randomness is derived from explicit seeds, so the worker count never
changes the output.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BireError, ContractViolation, FitError
from .mcem import FitSchedule, TraceEntry, fit_single_partition
from .mstep import factor_permutation
from .types import Dataset, Hyperparams, LatentState

SPLITMIX_GOLDEN = 0x9E3779B97F4A7C15
SPLITMIX_MIX1 = 0xBF58476D1CE4E5B9
SPLITMIX_MIX2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1

PARTITION_KEYS = ("user", "item", "event")


def get_partition_number(ident: int, seed: int, size: int) -> int:
    """Deterministic shard assignment for one integer id.

    A SplitMix64 stream is seeded with the id, advanced ``seed`` times,
    and the last output is reduced mod ``size``. Fixed here as a
    wire-format constant: any two builds must agree on shard membership.
    """
    if seed < 1:
        raise ContractViolation("partition seed must be at least 1")
    if size < 1:
        raise ContractViolation("partition count must be at least 1")
    state = int(ident) & _MASK
    out = 0
    for _ in range(seed):
        state = (state + SPLITMIX_GOLDEN) & _MASK
        z = state
        z = ((z ^ (z >> 30)) * SPLITMIX_MIX1) & _MASK
        z = ((z ^ (z >> 27)) * SPLITMIX_MIX2) & _MASK
        out = z ^ (z >> 31)
    return out % size


def partition_numbers(ids: np.ndarray, seed: int, size: int) -> np.ndarray:
    """Vectorized :func:`get_partition_number` over an id array."""
    if seed < 1:
        raise ContractViolation("partition seed must be at least 1")
    if size < 1:
        raise ContractViolation("partition count must be at least 1")
    state = np.asarray(ids).astype(np.uint64)
    out = np.zeros_like(state)
    for _ in range(seed):
        state = state + np.uint64(SPLITMIX_GOLDEN)
        z = state ^ (state >> np.uint64(30))
        z = z * np.uint64(SPLITMIX_MIX1)
        z ^= z >> np.uint64(27)
        z = z * np.uint64(SPLITMIX_MIX2)
        out = z ^ (z >> np.uint64(31))
    return (out % np.uint64(size)).astype(np.int64)


@dataclass(frozen=True)
class PartitionPlan:
    """How to split a dataset: seed, shard count, and routing key."""

    seed: int
    m: int
    key: str = "user"

    def __post_init__(self):
        if self.seed < 1:
            raise ContractViolation("plan seed must be at least 1")
        if self.m < 1:
            raise ContractViolation("partition count must be at least 1")
        if self.key not in PARTITION_KEYS:
            raise ContractViolation(f"unknown partition key {self.key!r}")


@dataclass(frozen=True)
class Shard:
    """One partition plus the maps from its local indices to the parent's."""

    dataset: Dataset
    users: np.ndarray
    items: np.ndarray


def _take_labels(labels, rows):
    if labels is None:
        return [int(g) for g in rows]
    return [labels[g] for g in rows]


def partition_dataset(dataset: Dataset, plan: PartitionPlan) -> list[Shard]:
    """Split observations into ``plan.m`` disjoint shards.

    USER keying routes a user's entire history to one shard (items work
    the same under ITEM keying); EVENT keying routes each observation
    independently by its ordinal. Every shard keeps only the feature rows
    it references, with ``users``/``items`` mapping local rows back to
    parent indices. Empty shards are legal and come back with zero rows.
    """
    if plan.key == "user":
        obs_part = partition_numbers(
            np.arange(dataset.M), plan.seed, plan.m)[dataset.user_idx]
    elif plan.key == "item":
        obs_part = partition_numbers(
            np.arange(dataset.N), plan.seed, plan.m)[dataset.item_idx]
    else:
        obs_part = partition_numbers(
            np.arange(dataset.n_obs), plan.seed, plan.m)

    shards = []
    for part in range(plan.m):
        rows = np.nonzero(obs_part == part)[0]
        users = np.unique(dataset.user_idx[rows])
        items = np.unique(dataset.item_idx[rows])
        shard_data = Dataset(
            user_idx=np.searchsorted(users, dataset.user_idx[rows]),
            item_idx=np.searchsorted(items, dataset.item_idx[rows]),
            y=dataset.y[rows],
            x_event=dataset.x_event[rows],
            user_features=dataset.user_features[users],
            item_features=dataset.item_features[items],
            user_ids=_take_labels(dataset.user_ids, users),
            item_ids=_take_labels(dataset.item_ids, items),
        )
        shards.append(Shard(shard_data, users, items))
    return shards


@dataclass(frozen=True)
class PartitionResult:
    """Fit output for one shard, with the maps needed to merge it back."""

    theta: Hyperparams
    delta: LatentState
    trace: list[TraceEntry]
    users: np.ndarray
    items: np.ndarray
    n_obs: int


def _shard_seed(plan: PartitionPlan, schedule: FitSchedule, part: int) -> int:
    base = 0 if schedule.rng_seed is None else schedule.rng_seed
    return int(np.random.SeedSequence((plan.seed, base, part)).generate_state(1)[0])


def _slice_init(init, shard: Shard):
    if init is None:
        return None
    theta, delta = init
    sliced = LatentState(
        alpha=delta.alpha[shard.users].copy(),
        beta=delta.beta[shard.items].copy(),
        U=delta.U[shard.users].copy(),
        V=delta.V[shard.items].copy())
    return theta, sliced


def train_run(dataset: Dataset, plan: PartitionPlan, init,
              schedule: FitSchedule, worker_budget: int | None = None,
              r: int = 1) -> list[PartitionResult | None]:
    """Fit every shard of one partitioning, in parallel.

    ``init`` is an optional global (theta, delta); each shard sees the
    slice of delta matching its own users and items. Each shard's RNG
    seed is derived from (plan seed, schedule seed, partition index), so
    the worker budget has no effect on the result. Empty shards yield
    ``None``. Any shard failure aborts the run with the partition ids.
    """
    shards = partition_dataset(dataset, plan)
    workers = worker_budget if worker_budget else min(plan.m, 4)

    def fit_one(part: int):
        shard = shards[part]
        if shard.dataset.n_obs == 0:
            return None
        shard_schedule = replace(schedule,
                                 rng_seed=_shard_seed(plan, schedule, part))
        theta, delta, trace = fit_single_partition(
            shard.dataset, _slice_init(init, shard), shard_schedule, r=r)
        return PartitionResult(theta=theta, delta=delta, trace=trace,
                               users=shard.users, items=shard.items,
                               n_obs=shard.dataset.n_obs)

    results: list[PartitionResult | None] = [None] * plan.m
    failures = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {part: pool.submit(fit_one, part) for part in range(plan.m)}
        for part in range(plan.m):
            try:
                results[part] = futures[part].result()
            except BireError as err:
                failures.append((part, err))
    if failures:
        ids = [part for part, _ in failures]
        first = failures[0][1]
        raise FitError(f"partitions {ids} failed: {first}")
    return results


def average_theta(models: list[Hyperparams]) -> Hyperparams:
    """Elementwise mean of per-partition hyperparameters.

    With the ordered diagonal prior the averaged variances are re-sorted
    descending and the matching G, H rows move with them (each input is
    already sorted, so this is normally the identity).
    """
    if not models:
        raise ContractViolation("need at least one model to average")
    first = models[0]
    modes = {th.ordered_diag for th in models}
    if len(modes) > 1:
        raise ContractViolation("cannot average mixed prior modes")
    for th in models[1:]:
        if th.r != first.r or th.f_w.shape != first.f_w.shape \
                or th.g_w.shape != first.g_w.shape \
                or th.h_w.shape != first.h_w.shape:
            raise ContractViolation("model dimensions do not agree")

    def mean(attr):
        return np.mean([getattr(th, attr) for th in models], axis=0)

    sigma2_u = mean("sigma2_u")
    G_w = mean("G_w")
    H_w = mean("H_w")
    if first.ordered_diag:
        perm = factor_permutation(sigma2_u)
        sigma2_u = sigma2_u[perm]
        G_w = G_w[perm]
        H_w = H_w[perm]
    else:
        sigma2_u = float(sigma2_u)
    return Hyperparams(
        f_w=mean("f_w"), g_w=mean("g_w"), h_w=mean("h_w"), G_w=G_w, H_w=H_w,
        sigma2_alpha=float(mean("sigma2_alpha")),
        sigma2_beta=float(mean("sigma2_beta")),
        sigma2_u=sigma2_u, sigma2_v=float(mean("sigma2_v")), r=first.r)


def combine_delta(runs: list[list[PartitionResult | None]],
                  M: int, N: int, r: int) -> LatentState:
    """Per-id mean of the random effects over every shard that carries the id.

    Under user keying each user shows up once per run while popular items
    show up in several shards; both just average over their occurrences.
    """
    sum_alpha = np.zeros(M)
    sum_beta = np.zeros(N)
    sum_U = np.zeros((M, r))
    sum_V = np.zeros((N, r))
    count_u = np.zeros(M, dtype=np.int64)
    count_i = np.zeros(N, dtype=np.int64)
    for run in runs:
        for res in run:
            if res is None:
                continue
            sum_alpha[res.users] += res.delta.alpha
            sum_U[res.users] += res.delta.U
            count_u[res.users] += 1
            sum_beta[res.items] += res.delta.beta
            sum_V[res.items] += res.delta.V
            count_i[res.items] += 1
    if np.any(count_u == 0):
        missing = np.nonzero(count_u == 0)[0][:5]
        raise ContractViolation(
            f"users {missing.tolist()} appear in no shard of any run")
    if np.any(count_i == 0):
        missing = np.nonzero(count_i == 0)[0][:5]
        raise ContractViolation(
            f"items {missing.tolist()} appear in no shard of any run")
    return LatentState(
        alpha=sum_alpha / count_u,
        beta=sum_beta / count_i,
        U=sum_U / count_u[:, None],
        V=sum_V / count_i[:, None])


@dataclass(frozen=True)
class EnsembleConfig:
    """Two-stage plan: one full partitioned fit, then n E-step-only runs.

    ``seeds`` holds n+1 distinct partition seeds: the first for the
    training partitioning, the rest one per ensemble run.
    """

    m: int
    n: int
    seeds: tuple[int, ...]
    schedule_full: FitSchedule
    schedule_eonly: FitSchedule
    key: str = "user"
    r: int = 1
    sync_rounds: int = 0

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ContractViolation("m and n must be at least 1")
        if len(self.seeds) != self.n + 1:
            raise ContractViolation("need n + 1 partition seeds")
        if len(set(self.seeds)) != len(self.seeds):
            raise ContractViolation("partition seeds must be distinct")
        if self.schedule_eonly.do_mstep or self.schedule_eonly.num_iters != 1:
            raise ContractViolation(
                "ensemble schedule must be a single E-step-only pass")
        if self.sync_rounds < 0:
            raise ContractViolation("sync_rounds must be non-negative")

    @classmethod
    def standard(cls, m: int, n: int, method: str = "var", r: int = 1,
                 key: str = "user", rng_seed: int | None = None,
                 num_iters: int = 30, ensemble_samples: int = 200,
                 sync_rounds: int = 0) -> "EnsembleConfig":
        """Default ensemble plan: ramped full fit, L=200 E-only passes."""
        return cls(
            m=m, n=n, seeds=tuple(range(1, n + 2)),
            schedule_full=FitSchedule.ramp(num_iters, method,
                                           rng_seed=rng_seed),
            schedule_eonly=FitSchedule(
                num_iters=1, sample_vector=(ensemble_samples,), burn_in=2,
                method=method, do_mstep=False, rng_seed=rng_seed),
            key=key, r=r, sync_rounds=sync_rounds)


@dataclass
class RunReport:
    """What happened in a partitioned fit, for the report renderer."""

    method: str
    m: int
    n: int
    key: str
    seeds: tuple[int, ...]
    partition_sizes: dict[str, list[int]] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    traces: list[list[TraceEntry]] = field(default_factory=list)

    def render(self) -> str:
        lines = [
            f"method: {self.method}",
            f"partitions: {self.m}  ensemble runs: {self.n}  key: {self.key}",
            f"partition seeds: {list(self.seeds)}",
            "",
        ]
        for label, sizes in self.partition_sizes.items():
            lines.append(f"{label} shard sizes: {sizes}")
        lines.append("")
        for label, seconds in self.timings.items():
            lines.append(f"{label}: {seconds:.2f}s")
        return "\n".join(lines) + "\n"


def _stage_label_reraise(err: BireError, label: str):
    err.args = (f"{label}: {err}",)
    raise err


def fit_ensemble(dataset: Dataset, config: EnsembleConfig,
                 worker_budget: int | None = None):
    """Full pipeline: partitioned MCEM, theta averaging, ensemble E-steps.

    Stage 1 fits every shard of the seed-0 partitioning and averages the
    per-shard thetas; stage 2 re-partitions n times with fresh seeds and
    re-samples the random effects under the averaged theta; stage 3
    averages those samples per id. Returns (theta, delta, report).
    """
    report = RunReport(method=config.schedule_full.method, m=config.m,
                       n=config.n, key=config.key, seeds=config.seeds)
    t0 = time.perf_counter()
    plan0 = PartitionPlan(seed=config.seeds[0], m=config.m, key=config.key)
    try:
        stage1 = train_run(dataset, plan0, None, config.schedule_full,
                           worker_budget, r=config.r)
    except BireError as err:
        _stage_label_reraise(err, "stage 1")
    report.partition_sizes["train"] = [
        0 if res is None else res.n_obs for res in stage1]
    report.traces = [[] if res is None else res.trace for res in stage1]

    fitted = [res.theta for res in stage1 if res is not None]
    if not fitted:
        raise FitError("stage 1: every partition was empty")
    theta_hat = average_theta(fitted)
    delta_hat = combine_delta([stage1], dataset.M, dataset.N, config.r)

    for round_idx in range(config.sync_rounds):
        label = f"sync round {round_idx + 1}"
        try:
            stage1 = train_run(dataset, plan0, (theta_hat, delta_hat),
                               config.schedule_full, worker_budget,
                               r=config.r)
        except BireError as err:
            _stage_label_reraise(err, label)
        theta_hat = average_theta(
            [res.theta for res in stage1 if res is not None])
        delta_hat = combine_delta([stage1], dataset.M, dataset.N, config.r)
    report.timings["train"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    ensemble_runs = []
    for k in range(1, config.n + 1):
        plan_k = PartitionPlan(seed=config.seeds[k], m=config.m,
                               key=config.key)
        try:
            run_k = train_run(dataset, plan_k, (theta_hat, delta_hat),
                              config.schedule_eonly, worker_budget,
                              r=config.r)
        except BireError as err:
            _stage_label_reraise(err, f"ensemble run {k}")
        report.partition_sizes[f"ensemble run {k}"] = [
            0 if res is None else res.n_obs for res in run_k]
        ensemble_runs.append(run_k)
    delta_final = combine_delta(ensemble_runs, dataset.M, dataset.N, config.r)
    report.timings["ensemble"] = time.perf_counter() - t1
    report.timings["total"] = time.perf_counter() - t0
    return theta_hat, delta_final, report
