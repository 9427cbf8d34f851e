"""Accuracy, weighted accuracy, prediction uncertainty reduction and McNemar."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

BEHAVIORS = ("acceptance", "blame", "positivity", "negativity", "sadness")
EXACT_MCNEMAR_BELOW = 25


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def p(self) -> int:
        return self.tp + self.fn

    @property
    def n(self) -> int:
        return self.tn + self.fp

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> ConfusionCounts:
        t = np.asarray(y_true, dtype=bool)
        p = np.asarray(y_pred, dtype=bool)
        return cls(tp=int(np.sum(t & p)), tn=int(np.sum(~t & ~p)),
                   fp=int(np.sum(~t & p)), fn=int(np.sum(t & ~p)))


def weighted_accuracy(c: ConfusionCounts) -> float:
    """(TP * N/P + TN) / 2N."""
    if c.p == 0 or c.n == 0:
        raise ValueError("weighted accuracy needs both positive and negative examples")
    return (c.tp * c.n / c.p + c.tn) / (2 * c.n)


def accuracy(y_true, y_pred) -> float:
    t = np.asarray(y_true)
    if t.size == 0:
        raise ValueError("no predictions")
    return float(np.mean(t == np.asarray(y_pred)))


def uncertainty(p: float) -> float:
    """Binary entropy in bits, with 0 log 0 = 0."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability {p} outside [0, 1]")
    total = 0.0
    for q in (p, 1.0 - p):
        if q > 0:
            total -= q * math.log2(q)
    return total


def pur(p_m: float, p_n: float) -> float:
    """Prediction uncertainty reduction going from model m to model n."""
    return uncertainty(p_m) - uncertainty(p_n)


def mcnemar(b: int, c: int) -> float:
    """Two-sided McNemar p-value from discordant counts.

    Exact binomial below 25 discordant pairs, continuity-corrected chi-square otherwise.
    """
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be non-negative")
    n = b + c
    if n == 0:
        return 1.0
    if n < EXACT_MCNEMAR_BELOW:
        k = min(b, c)
        tail = sum(math.comb(n, i) for i in range(k + 1)) / 2.0 ** n
        return min(1.0, 2.0 * tail)
    chi2 = (abs(b - c) - 1) ** 2 / n
    return float(stats.chi2.sf(chi2, df=1))


def discordant_counts(y_true, pred_a, pred_b) -> tuple[int, int]:
    """(b, c): a right & b wrong, a wrong & b right."""
    t = np.asarray(y_true)
    ra = np.asarray(pred_a) == t
    rb = np.asarray(pred_b) == t
    return int(np.sum(ra & ~rb)), int(np.sum(~ra & rb))


@dataclass
class Prediction:
    session_id: str
    behavior: int
    label: int
    logit: float
    fold: int

    @property
    def predicted(self) -> int:
        return int(self.logit > 0)


def aggregate_folds(predictions: Iterable[Prediction], n_behaviors: int = len(BEHAVIORS),
                    names: Sequence[str] = BEHAVIORS, expected: Iterable[tuple[str, int]] | None = None) -> dict:
    """Pool test predictions over folds into per-behavior accuracy (percent).

    Behaviors with no prediction are reported as None and left out of the average.
    ``expected`` lists the (session_id, behavior) pairs that must each be
    predicted exactly once.
    """
    seen = set()
    by_beh: dict[int, list[Prediction]] = defaultdict(list)
    for pr in predictions:
        key = (pr.session_id, pr.behavior)
        if key in seen:
            raise ValueError(f"session {pr.session_id} predicted twice for behavior {pr.behavior}")
        seen.add(key)
        by_beh[pr.behavior].append(pr)
    if expected is not None:
        missing = set(expected) - seen
        if missing:
            sid, beh = sorted(missing)[0]
            raise ValueError(f"{len(missing)} expected predictions missing, e.g. session {sid} behavior {beh}")
    table = {}
    wa = {}
    for b in range(n_behaviors):
        rows = by_beh.get(b)
        name = names[b] if b < len(names) else str(b)
        if not rows:
            table[name] = None
            wa[name] = None
            continue
        y = [r.label for r in rows]
        yhat = [r.predicted for r in rows]
        table[name] = 100.0 * accuracy(y, yhat)
        cc = ConfusionCounts.from_predictions(y, yhat)
        wa[name] = 100.0 * weighted_accuracy(cc) if cc.p and cc.n else None
    return {"accuracy": table, "average": average_accuracy(table), "weighted_accuracy": wa,
            "n": {names[b] if b < len(names) else str(b): len(by_beh.get(b, []))
                  for b in range(n_behaviors)}}


def average_accuracy(per_behavior: dict) -> float | None:
    vals = [v for v in per_behavior.values() if v is not None]
    return float(np.mean(vals)) if vals else None
