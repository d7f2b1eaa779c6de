"""Evaluation suite: split protocols, session scoring, test loss, item-level
correlations, retest reliability, SEM, and calibration-by-percentile tables.

Scoring a test session uses all of that session's test responses (a
leave-one-out mode is available behind a flag). Correlations with undefined
variance are reported as missing (None), never NaN.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .irt import ItemParams, bernoulli_log_likelihood, irf_arrays
from .posterior import (ThetaGrid, batch_log_posteriors, item_log_likelihood_table,
                        scores_for_table, _normalize_log_weights)
from .tables import ResponseTable


@dataclass(frozen=True)
class SplitSpec:
    """Train/test split protocol: cold, jump(r), or warm.

    Exactly one of split_date (timestamp boundary, compared as ISO-8601
    strings) or split_fraction (share of time-ordered rows kept before the
    boundary) must be given. pilot_fraction applies to cold/jump.
    """

    mode: str
    split_date: str | None = None
    split_fraction: float | None = None
    r: int = 0
    pilot_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.mode not in ("cold", "jump", "warm"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if (self.split_date is None) == (self.split_fraction is None):
            raise ValueError("exactly one of split_date or split_fraction is required")
        if self.split_fraction is not None and not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must lie in (0, 1)")
        if not 0.0 < self.pilot_fraction < 1.0:
            raise ValueError("pilot_fraction must lie in (0, 1)")
        if self.mode == "jump" and self.r <= 0:
            raise ValueError("jump split requires r > 0")


@dataclass(frozen=True)
class SplitResult:
    train: ResponseTable
    test: ResponseTable
    pilot_items: tuple[str, ...]
    short_pilot_items: tuple[str, ...]  # pilot items with fewer than r post-split rows


def make_split(responses: ResponseTable, spec: SplitSpec,
               rng: np.random.Generator) -> SplitResult:
    """Partition responses chronologically (and by pilot item for cold/jump).

    cold: train = pre-boundary rows of operational items; test = every
    post-boundary row. jump(r): cold train plus the chronologically first r
    post-boundary rows of each pilot item; test = the remainder. warm: a pure
    time split. Pre-boundary rows of pilot items are never used.
    """
    if spec.split_date is not None and responses.timestamps is None:
        raise ValueError("date-based splitting requires a timestamp column")
    order = responses.time_order()
    n = len(responses)
    if spec.split_date is not None:
        ts_sorted = responses.timestamps[order]
        after = ts_sorted >= spec.split_date
    else:
        k = int(round(spec.split_fraction * n))
        after = np.zeros(n, dtype=bool)
        after[k:] = True

    before_rows = order[~after]
    after_rows = order[after]

    if spec.mode == "warm":
        return SplitResult(responses.subset(before_rows), responses.subset(after_rows),
                           (), ())

    items = responses.unique_items()
    n_pilot = int(round(spec.pilot_fraction * len(items)))
    pilot = tuple(sorted(rng.choice(items, size=n_pilot, replace=False).tolist()))
    pilot_set = set(pilot)

    before_items = responses.item_ids[before_rows]
    train_rows = before_rows[~np.isin(before_items, pilot)]

    test_rows = after_rows
    short: tuple[str, ...] = ()
    if spec.mode == "jump":
        after_items = responses.item_ids[after_rows]
        extra = []
        counts: dict[str, int] = {}
        keep = np.ones(len(after_rows), dtype=bool)
        for pos, item in enumerate(after_items):
            item = str(item)
            if item in pilot_set and counts.get(item, 0) < spec.r:
                counts[item] = counts.get(item, 0) + 1
                extra.append(after_rows[pos])
                keep[pos] = False
        short = tuple(sorted(i for i in pilot if counts.get(i, 0) < spec.r))
        train_rows = np.concatenate([train_rows, np.asarray(extra, dtype=np.int64)]) \
            if extra else train_rows
        test_rows = after_rows[keep]

    return SplitResult(responses.subset(np.sort(train_rows)),
                       responses.subset(np.sort(test_rows)), pilot, short)


def score_sessions(test: ResponseTable, bank: Mapping[str, ItemParams],
                   grid: ThetaGrid) -> dict[str, float]:
    """Posterior-mean score per test session under the fitted bank."""
    if len(test) == 0:
        return {}
    ids, means, _ = scores_for_table(test, bank, grid)
    return {str(s): float(m) for s, m in zip(ids, means)}


def _predicted_probs(test: ResponseTable, bank: Mapping[str, ItemParams],
                     scores: Mapping[str, float]) -> np.ndarray:
    theta = np.asarray([scores[str(s)] for s in test.session_ids])
    a = np.asarray([bank[str(i)].a for i in test.item_ids])
    c = np.asarray([bank[str(i)].c for i in test.item_ids])
    d = np.asarray([bank[str(i)].d for i in test.item_ids])
    return irf_arrays(theta, a, c, d)


def test_loss(test: ResponseTable, bank: Mapping[str, ItemParams],
              scores: Mapping[str, float]) -> float:
    """Mean binary cross-entropy of the scored sessions' predicted grades."""
    p = _predicted_probs(test, bank, scores)
    return float(-np.mean(bernoulli_log_likelihood(np.asarray(test.grades, dtype=float), p)))


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    if len(x) < 2 or x.std() == 0 or y.std() == 0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


def _spearman(x: np.ndarray, y: np.ndarray) -> float | None:
    return _pearson(rankdata(x), rankdata(y))  # average ranks on ties


def _correlations_from_probs(test: ResponseTable, p: np.ndarray):
    _, item_codes, _, item_vocab = test.indexed()
    if len(item_vocab) < 3:
        raise ValueError("item-grade correlations need at least 3 items with responses")
    counts = np.bincount(item_codes, minlength=len(item_vocab))
    mean_grade = np.bincount(item_codes, weights=test.grades.astype(float),
                             minlength=len(item_vocab)) / counts
    mean_pred = np.bincount(item_codes, weights=p, minlength=len(item_vocab)) / counts
    return _pearson(mean_grade, mean_pred), _spearman(mean_grade, mean_pred)


def item_grade_correlations(test: ResponseTable, bank: Mapping[str, ItemParams],
                            scores: Mapping[str, float]):
    """Pearson and Spearman correlation of per-item mean grade vs mean prediction."""
    return _correlations_from_probs(test, _predicted_probs(test, bank, scores))


def retest_reliability(scores: Mapping[str, float],
                       repeat_pairs: Sequence[tuple[str, str]]) -> float | None:
    """Pearson correlation between first and second scores of repeat sessions."""
    if len(repeat_pairs) < 3:
        raise ValueError("retest reliability needs at least 3 repeat pairs")
    first, second = [], []
    for sa, sb in repeat_pairs:
        if str(sa) not in scores or str(sb) not in scores:
            raise KeyError(f"repeat pair ({sa!r}, {sb!r}) has an unscored session")
        first.append(scores[str(sa)])
        second.append(scores[str(sb)])
    return _pearson(np.asarray(first), np.asarray(second))


def sem_from_reliability(rr: float, s_x: float) -> float:
    """Standard error of measurement s_x * sqrt(1 - rr)."""
    if not 0.0 <= rr <= 1.0:
        raise ValueError(f"reliability must lie in [0, 1], got {rr}")
    if s_x < 0:
        raise ValueError("score sd must be nonnegative")
    return float(s_x * np.sqrt(1.0 - rr))


@dataclass(frozen=True)
class CalibrationBin:
    bin: int
    mean_grade: float
    mean_pred: float
    count: int


def calibration_table(test: ResponseTable, bank: Mapping[str, ItemParams],
                      scores: Mapping[str, float], n_bins: int = 10) -> list[CalibrationBin]:
    """Mean grade vs mean prediction with sessions grouped into score-percentile bins.

    Sessions are sorted by score (ties broken by id) and divided into
    equal-count bins; each bin aggregates all of its sessions' responses.
    A single bin reproduces the overall means.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    sess_codes, _, sess_vocab, _ = test.indexed()
    theta = np.asarray([scores[str(s)] for s in sess_vocab])
    order = np.lexsort((sess_vocab, theta))
    bin_of_session = np.empty(len(sess_vocab), dtype=np.int64)
    for b, chunk in enumerate(np.array_split(order, n_bins)):
        bin_of_session[chunk] = b
    bin_of_row = bin_of_session[sess_codes]
    p = _predicted_probs(test, bank, scores)
    rows = []
    for b in range(n_bins):
        mask = bin_of_row == b
        cnt = int(mask.sum())
        if cnt == 0:
            rows.append(CalibrationBin(b, float("nan"), float("nan"), 0))
            continue
        rows.append(CalibrationBin(
            b, float(test.grades[mask].mean()), float(p[mask].mean()), cnt))
    return rows


def loo_scores(test: ResponseTable, bank: Mapping[str, ItemParams],
               grid: ThetaGrid) -> np.ndarray:
    """Leave-one-out score per response row: each response's own likelihood is
    removed from its session's posterior before taking the mean."""
    ids, logp, log1mp = item_log_likelihood_table(bank, grid)
    sess_codes, item_codes, _, item_vocab = test.indexed()
    remap = np.searchsorted(ids, item_vocab)
    item_rows = remap[item_codes]
    order = np.lexsort((item_rows, sess_codes))
    sess_sorted = sess_codes[order]
    starts = np.flatnonzero(np.r_[True, sess_sorted[1:] != sess_sorted[:-1]])
    grades_sorted = np.asarray(test.grades)[order]
    items_sorted = item_rows[order]
    log_w = batch_log_posteriors(starts, items_sorted, grades_sorted, logp, log1mp, grid)
    own = np.where(grades_sorted[:, None] == 1, logp[items_sorted], log1mp[items_sorted])
    sess_of_row = np.repeat(np.arange(len(starts)),
                            np.diff(np.r_[starts, len(sess_sorted)]))
    w = _normalize_log_weights(log_w[sess_of_row] - own)
    theta_loo_sorted = w @ grid.points
    out = np.empty(len(test))
    out[order] = theta_loo_sorted
    return out


@dataclass(frozen=True)
class EvalReport:
    test_loss: float
    pearson: float | None
    spearman: float | None
    retest_reliability: float | None
    n_items: int
    n_sessions: int
    n_responses: int

    def __post_init__(self) -> None:
        for name in ("pearson", "spearman", "retest_reliability"):
            v = getattr(self, name)
            if v is not None and not -1.0 - 1e-12 <= v <= 1.0 + 1e-12:
                raise ValueError(f"{name} outside [-1, 1]: {v}")
        if self.test_loss < 0:
            raise ValueError("test loss must be nonnegative")

    def to_json_dict(self) -> dict:
        return {
            "test_loss": self.test_loss,
            "pearson": self.pearson,
            "spearman": self.spearman,
            "retest_reliability": self.retest_reliability,
            "n_items": self.n_items,
            "n_sessions": self.n_sessions,
            "n_responses": self.n_responses,
        }


def evaluate_bank(test: ResponseTable, bank: Mapping[str, ItemParams], grid: ThetaGrid,
                  repeat_pairs: Sequence[tuple[str, str]] | None = None,
                  leave_one_out: bool = False) -> EvalReport:
    """Score the test sessions once and derive loss plus correlations from it."""
    scores = score_sessions(test, bank, grid)
    if leave_one_out:
        theta_rows = loo_scores(test, bank, grid)
        a = np.asarray([bank[str(i)].a for i in test.item_ids])
        c = np.asarray([bank[str(i)].c for i in test.item_ids])
        d = np.asarray([bank[str(i)].d for i in test.item_ids])
        p = irf_arrays(theta_rows, a, c, d)
    else:
        p = _predicted_probs(test, bank, scores)
    loss = float(-np.mean(bernoulli_log_likelihood(test.grades.astype(float), p)))
    pearson, spearman = _correlations_from_probs(test, p)
    rr = None
    if repeat_pairs:
        rr = retest_reliability(scores, repeat_pairs)
    return EvalReport(
        test_loss=loss,
        pearson=pearson,
        spearman=spearman,
        retest_reliability=rr,
        n_items=len(test.unique_items()),
        n_sessions=len(test.unique_sessions()),
        n_responses=len(test),
    )
