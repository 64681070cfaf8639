"""Ranking metrics: AUC and the replay click-match score."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ContractViolation


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative.

    Ties count one half, which is the rank-sum (Mann-Whitney) statistic
    with midranks, so the whole thing is one sort.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ContractViolation("scores and labels must have equal length")
    if not np.all((y == 0) | (y == 1)):
        raise ContractViolation("labels must be 0 or 1")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractViolation("need at least one positive and one negative")
    ranks = rankdata(s)
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def replay_score(predictor: Callable[[int, np.ndarray], np.ndarray],
                 events: Sequence[tuple]) -> tuple[int, np.ndarray]:
    """Count click events where the predictor's top pick is the clicked item.

    Each event is ``(pool, clicked, user)``; the predictor maps
    ``(user, pool)`` to one score per pool entry. Score ties go to the
    earliest pool position, so a run is reproducible. Returns the total
    count and the per-event 0/1 match vector.
    """
    matches = np.zeros(len(events), dtype=np.int64)
    for k, (pool, clicked, user) in enumerate(events):
        items = np.asarray(pool)
        if items.size == 0:
            raise ContractViolation(f"event {k}: empty candidate pool")
        if clicked not in items:
            raise ContractViolation(f"event {k}: clicked item not in pool")
        scores = np.asarray(predictor(user, items), dtype=np.float64)
        if scores.shape != items.shape:
            raise ContractViolation(f"event {k}: predictor returned "
                                    "wrong number of scores")
        picked = items[int(np.argmax(scores))]
        matches[k] = 1 if picked == clicked else 0
    return int(matches.sum()), matches
