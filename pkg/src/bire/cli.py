"""Command line surface.

Subcommands cover the full workflow: synthesizing or preparing data,
single and partitioned fits, scoring, and the two offline evaluations.
Paths are taken relative to $BIRE_DATA_DIR when it is set.  Exit codes:
0 success, 2 usage, 3 data, 4 numeric or fit failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np
import scipy.special

from . import __version__
from . import report as reports
from .errors import BireError, ContractViolation, DataError
from .eval import auc, replay_score
from .io import (ModelFile, build_dataset, load_features, load_model,
                 load_triples, prepare_movielens, save_model, write_features,
                 write_triples)
from .mcem import RAMP_LEVELS, FitSchedule, fit_single_partition
from .model import default_truth_theta, generate_synthetic, log_odds
from .parallel import EnsembleConfig, fit_ensemble
from .types import Dataset, LatentState

DATA_DIR_VAR = "BIRE_DATA_DIR"

_INT_KEYS = frozenset({"factors", "iters", "samples", "seed", "partitions",
                       "ensemble_runs", "threads", "sync_rounds",
                       "users", "items", "events_per_user"})
_FLOAT_KEYS = frozenset({"intercept"})
_CHOICES = {"method": ("var", "ars", "arsid"),
            "partition_key": ("user", "item", "event"),
            "mode": ("balanced", "imbalanced")}


def _path(p: str | None) -> str | None:
    if p is None:
        return None
    base = os.environ.get(DATA_DIR_VAR)
    if base and not os.path.isabs(p):
        return os.path.join(base, p)
    return p


# -- configuration layering ---------------------------------------------

def _read_config(path) -> dict[str, str]:
    options = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise DataError("expected key=value", path=path, line=lineno)
            options[key.strip().replace("-", "_")] = value.strip()
    return options


def _cast(key: str, value: str):
    if key in _INT_KEYS:
        try:
            return int(value)
        except ValueError:
            raise ContractViolation(
                f"config key {key} needs an integer, got {value!r}") from None
    if key in _FLOAT_KEYS:
        try:
            return float(value)
        except ValueError:
            raise ContractViolation(
                f"config key {key} needs a number, got {value!r}") from None
    if key in _CHOICES and value not in _CHOICES[key]:
        raise ContractViolation(
            f"config key {key} must be one of {_CHOICES[key]}, "
            f"got {value!r}")
    return value


def _settle(args, defaults: dict) -> None:
    """Fill argument values: hard defaults, then config file, then flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        for key, value in _read_config(_path(args.config)).items():
            if key not in defaults:
                raise ContractViolation(f"unknown config key {key!r}")
            merged[key] = _cast(key, value)
    for key in defaults:
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            merged[key] = cli_value
    for key, value in merged.items():
        setattr(args, key, value)


# -- shared pieces ------------------------------------------------------

def _build_schedule(method: str, iters: int, samples: int,
                    seed: int) -> FitSchedule:
    """Ramped schedule: thirds at the standard levels, capped by --samples."""
    if iters < 1:
        raise ContractViolation("--iters must be at least 1")
    if samples < 1:
        raise ContractViolation("--samples must be at least 1")
    levels = [min(level, samples) for level in RAMP_LEVELS[:-1]] + [samples]
    third = iters // 3
    counts = (third, third, iters - 2 * third)
    vector = []
    for level, count in zip(levels, counts):
        vector.extend([level] * count)
    return FitSchedule(num_iters=iters, sample_vector=tuple(vector),
                       method=method, rng_seed=seed)


def _load_dataset(args) -> Dataset:
    triples = load_triples(_path(args.triples))
    user_table = (load_features(_path(args.user_features))
                  if args.user_features else None)
    item_table = (load_features(_path(args.item_features))
                  if args.item_features else None)
    return build_dataset(triples, user_table, item_table)


def _user_effects(model: ModelFile, ident, table):
    k = model.user_index(ident)
    if k is not None:
        return float(model.delta.alpha[k]), model.delta.U[k]
    theta = model.theta
    if table is None:
        if theta.g_w.size != 1:
            raise DataError(f"user {ident!r} is not in the model and no "
                            "user feature file was given for cold start")
        x = np.ones(1)
    else:
        if ident not in table:
            raise DataError(f"user {ident!r} has no feature row")
        x = table.row(ident)
        if x.size != theta.g_w.size:
            raise DataError(f"user features are {x.size} wide, model "
                            f"expects {theta.g_w.size}")
    return float(theta.g_w @ x), theta.G_w @ x


def _item_effects(model: ModelFile, ident, table):
    k = model.item_index(ident)
    if k is not None:
        return float(model.delta.beta[k]), model.delta.V[k]
    theta = model.theta
    if table is None:
        if theta.h_w.size != 1:
            raise DataError(f"item {ident!r} is not in the model and no "
                            "item feature file was given for cold start")
        x = np.ones(1)
    else:
        if ident not in table:
            raise DataError(f"item {ident!r} has no feature row")
        x = table.row(ident)
        if x.size != theta.h_w.size:
            raise DataError(f"item features are {x.size} wide, model "
                            f"expects {theta.h_w.size}")
    return float(theta.h_w @ x), theta.H_w @ x


def _score_dataset(model: ModelFile, data: Dataset, user_table,
                   item_table) -> np.ndarray:
    """Scores for every observation; ids unseen at fit time fall back to
    their regression prior means."""
    if data.p_e != model.theta.f_w.size:
        raise DataError(f"event covariates are {data.p_e} wide, model "
                        f"expects {model.theta.f_w.size}")
    r = model.theta.r
    alpha = np.empty(data.M)
    U = np.empty((data.M, r))
    for i, ident in enumerate(data.user_ids or map(str, range(data.M))):
        alpha[i], U[i] = _user_effects(model, ident, user_table)
    beta = np.empty(data.N)
    V = np.empty((data.N, r))
    for j, ident in enumerate(data.item_ids or map(str, range(data.N))):
        beta[j], V[j] = _item_effects(model, ident, item_table)
    return log_odds(model.theta, LatentState(alpha, beta, U, V), data)


def _require_observations(data: Dataset) -> None:
    if data.n_obs == 0:
        raise DataError("no observations in the triples file")


# -- subcommands --------------------------------------------------------

def cmd_fit(args) -> int:
    data = _load_dataset(args)
    _require_observations(data)
    schedule = _build_schedule(args.method, args.iters, args.samples,
                               args.seed)
    started = time.perf_counter()
    theta, delta, trace = fit_single_partition(data, None, schedule,
                                               r=args.factors)
    elapsed = time.perf_counter() - started
    model = ModelFile(args.method, theta, delta,
                      tuple(data.user_ids), tuple(data.item_ids))
    save_model(model, _path(args.out))
    if args.report_dir:
        summary = reports.render_single_fit(
            args.method, schedule, trace, data.M, data.N, data.n_obs,
            elapsed)
        reports.write_artifacts(_path(args.report_dir), summary,
                                {"fit": trace})
    print(f"fit {data.n_obs} observations (M={data.M}, N={data.N}) "
          f"in {elapsed:.1f}s, final loglik {trace[-1].loglik:.4f}")
    print(f"model written to {_path(args.out)}")
    return 0


def cmd_fit_parallel(args) -> int:
    data = _load_dataset(args)
    _require_observations(data)
    full = _build_schedule(args.method, args.iters, args.samples, args.seed)
    eonly = FitSchedule(num_iters=1, sample_vector=(args.samples,),
                        burn_in=full.burn_in, method=args.method,
                        do_mstep=False, rng_seed=args.seed)
    config = EnsembleConfig(
        m=args.partitions, n=args.ensemble_runs,
        seeds=tuple(range(1, args.ensemble_runs + 2)),
        schedule_full=full, schedule_eonly=eonly, key=args.partition_key,
        r=args.factors, sync_rounds=args.sync_rounds)
    theta, delta, run_report = fit_ensemble(data, config,
                                            worker_budget=args.threads)
    model = ModelFile(args.method, theta, delta,
                      tuple(data.user_ids), tuple(data.item_ids))
    save_model(model, _path(args.out))
    if args.report_dir:
        traces = {f"partition {k}": trace
                  for k, trace in enumerate(run_report.traces)}
        reports.write_artifacts(_path(args.report_dir), run_report.render(),
                                traces)
    total = run_report.timings.get("total", 0.0)
    print(f"partitioned fit (m={args.partitions}, n={args.ensemble_runs}) "
          f"finished in {total:.1f}s")
    print(f"model written to {_path(args.out)}")
    return 0


def _tables(args):
    user_table = (load_features(_path(args.user_features))
                  if args.user_features else None)
    item_table = (load_features(_path(args.item_features))
                  if args.item_features else None)
    return user_table, item_table


def cmd_predict(args) -> int:
    model = load_model(_path(args.model))
    triples = load_triples(_path(args.triples))
    user_table, item_table = _tables(args)
    data = build_dataset(triples, user_table, item_table)
    _require_observations(data)
    scores = _score_dataset(model, data, user_table, item_table)
    probs = scipy.special.expit(scores)
    out = _path(args.out)
    with open(out, "w", encoding="utf-8") as fh:
        for k in range(data.n_obs):
            fh.write("\t".join([
                data.user_ids[data.user_idx[k]],
                data.item_ids[data.item_idx[k]],
                f"{scores[k]:.17g}", f"{probs[k]:.17g}"]) + "\n")
    print(f"wrote {data.n_obs} predictions to {out}")
    return 0


def cmd_eval_auc(args) -> int:
    model = load_model(_path(args.model))
    triples = load_triples(_path(args.triples))
    user_table, item_table = _tables(args)
    data = build_dataset(triples, user_table, item_table)
    _require_observations(data)
    scores = _score_dataset(model, data, user_table, item_table)
    try:
        value = auc(scores, data.y)
    except ContractViolation as err:
        raise DataError(str(err)) from None
    print(f"auc\t{value:.6f}")
    return 0


def _load_replay_events(path):
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DataError("expected user, clicked item, pool",
                                path=path, line=lineno)
            user, clicked, pool_text = parts
            pool = tuple(p for p in pool_text.split(",") if p)
            if not pool:
                raise DataError("empty candidate pool",
                                path=path, line=lineno)
            if clicked not in pool:
                raise DataError(f"clicked item {clicked!r} not in pool",
                                path=path, line=lineno)
            events.append((pool, clicked, user))
    return events


def cmd_replay(args) -> int:
    model = load_model(_path(args.model))
    if model.theta.f_w.size != 1:
        raise DataError("replay needs a model with intercept-only event "
                        "covariates")
    events = _load_replay_events(_path(args.events))
    if not events:
        raise DataError("no replay events")
    user_table, item_table = _tables(args)
    intercept = float(model.theta.f_w[0])

    def predictor(user, items):
        bias_u, factors_u = _user_effects(model, user, user_table)
        scores = np.empty(len(items))
        for k, item in enumerate(items):
            bias_i, factors_i = _item_effects(model, item, item_table)
            scores[k] = (intercept + bias_u + bias_i
                         + float(factors_u @ factors_i))
        return scores

    total, _ = replay_score(predictor, events)
    print(f"matches\t{total}\tevents\t{len(events)}"
          f"\trate\t{total / len(events):.6f}")
    return 0


def cmd_gen_synthetic(args) -> int:
    theta = default_truth_theta(args.factors, args.user_covariates,
                                args.item_covariates)
    theta.f_w[0] = args.intercept
    truth = generate_synthetic(
        M=args.users, N=args.items, r=args.factors,
        p_u=args.user_covariates, p_v=args.item_covariates,
        events_per_user=args.events_per_user, theta_spec=theta,
        seed=args.seed)
    data = truth.dataset
    data.user_ids = [f"u{k}" for k in range(data.M)]
    data.item_ids = [f"i{k}" for k in range(data.N)]
    out_dir = _path(args.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    write_triples(data, os.path.join(out_dir, "triples.tsv"))
    write_features(data.user_ids, data.user_features,
                   os.path.join(out_dir, "user-features.tsv"))
    write_features(data.item_ids, data.item_features,
                   os.path.join(out_dir, "item-features.tsv"))
    with open(os.path.join(out_dir, "truth-alpha.tsv"), "w",
              encoding="utf-8") as fh:
        for k, ident in enumerate(data.user_ids):
            fh.write(f"{ident}\t{truth.delta.alpha[k]:.17g}\n")
    rate = float(np.mean(data.y))
    print(f"wrote {data.n_obs} observations to {out_dir} "
          f"(positive rate {rate:.4f})")
    return 0


def cmd_prepare_movielens(args) -> int:
    train, test = prepare_movielens(_path(args.ratings), args.mode)
    out_dir = _path(args.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    write_triples(train, os.path.join(out_dir, "train.tsv"))
    write_triples(test, os.path.join(out_dir, "test.tsv"))
    print(f"train\t{train.n_obs}\trate\t{float(np.mean(train.y)):.4f}")
    print(f"test\t{test.n_obs}\trate\t{float(np.mean(test.y)):.4f}")
    return 0


# -- parser -------------------------------------------------------------

_FIT_DEFAULTS = {"method": "var", "factors": 1, "iters": 30,
                 "samples": 200, "seed": 0}
_PARALLEL_DEFAULTS = dict(_FIT_DEFAULTS, partitions=1, ensemble_runs=1,
                          partition_key="user", threads=None, sync_rounds=0)
_GEN_DEFAULTS = {"users": 200, "items": 40, "factors": 1,
                 "events_per_user": 20, "seed": 0,
                 "user_covariates": 2, "item_covariates": 2,
                 "intercept": -3.0}


def _add_fit_flags(sp, parallel: bool) -> None:
    sp.add_argument("--triples", required=True, help="training triples file")
    sp.add_argument("--user-features", help="user covariate file")
    sp.add_argument("--item-features", help="item covariate file")
    sp.add_argument("--out", required=True, help="model file to write")
    sp.add_argument("--report-dir",
                    help="directory for report.txt, trace.tsv, trace.png")
    sp.add_argument("--config",
                    help="key=value defaults file; flags take precedence")
    sp.add_argument("--method", choices=_CHOICES["method"],
                    help="E-step sampler (default var)")
    sp.add_argument("--factors", type=int, help="latent factors r")
    sp.add_argument("--iters", type=int, help="EM iterations (default 30)")
    sp.add_argument("--samples", type=int,
                    help="Gibbs samples at the final ramp level "
                         "(default 200)")
    sp.add_argument("--seed", type=int, help="random seed (default 0)")
    if parallel:
        sp.add_argument("--partitions", type=int,
                        help="number of data shards m (default 1)")
        sp.add_argument("--ensemble-runs", type=int,
                        help="ensemble passes n (default 1)")
        sp.add_argument("--partition-key",
                        choices=_CHOICES["partition_key"],
                        help="what the shard hash keys on (default user)")
        sp.add_argument("--threads", type=int,
                        help="worker pool bound; results do not depend "
                             "on it")
        sp.add_argument("--sync-rounds", type=int,
                        help="extra averaged refit rounds (default 0)")


def _add_scoring_flags(sp) -> None:
    sp.add_argument("--model", required=True, help="model file")
    sp.add_argument("--user-features", help="user covariate file for "
                                            "cold-start ids")
    sp.add_argument("--item-features", help="item covariate file for "
                                            "cold-start ids")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bire",
        description="Bilinear random effects models for binary response.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("fit", help="single-partition MCEM fit")
    _add_fit_flags(sp, parallel=False)
    sp.set_defaults(func=cmd_fit, defaults=_FIT_DEFAULTS)

    sp = sub.add_parser("fit-parallel",
                        help="partitioned fit with ensemble averaging")
    _add_fit_flags(sp, parallel=True)
    sp.set_defaults(func=cmd_fit_parallel, defaults=_PARALLEL_DEFAULTS)

    sp = sub.add_parser("predict", help="score triples with a model")
    _add_scoring_flags(sp)
    sp.add_argument("--triples", required=True)
    sp.add_argument("--out", required=True, help="predictions file to write")
    sp.set_defaults(func=cmd_predict, defaults={})

    sp = sub.add_parser("eval-auc", help="AUC of a model on labelled triples")
    _add_scoring_flags(sp)
    sp.add_argument("--triples", required=True)
    sp.set_defaults(func=cmd_eval_auc, defaults={})

    sp = sub.add_parser("replay",
                        help="match rate against logged candidate pools")
    _add_scoring_flags(sp)
    sp.add_argument("--events", required=True,
                    help="events file: user, clicked, comma-joined pool")
    sp.set_defaults(func=cmd_replay, defaults={})

    sp = sub.add_parser("gen-synthetic", help="draw a dataset from the model")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--config")
    sp.add_argument("--users", type=int)
    sp.add_argument("--items", type=int)
    sp.add_argument("--factors", type=int)
    sp.add_argument("--events-per-user", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--user-covariates", type=int)
    sp.add_argument("--item-covariates", type=int)
    sp.add_argument("--intercept", type=float,
                    help="event intercept; lower means rarer positives")
    sp.set_defaults(func=cmd_gen_synthetic, defaults=_GEN_DEFAULTS)

    sp = sub.add_parser("prepare-movielens",
                        help="time-split and binarize a ratings file")
    sp.add_argument("--ratings", required=True)
    sp.add_argument("--mode", required=True, choices=_CHOICES["mode"])
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_prepare_movielens, defaults={})

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _settle(args, args.defaults)
        return args.func(args)
    except ContractViolation as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except DataError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (BireError, np.linalg.LinAlgError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
