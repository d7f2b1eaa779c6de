"""Monte Carlo EM calibration: alternate posterior draws of ability with
classifier training and parametric projection.

Each M-step fits the grade classifier on (theta, item features, item id)
rows, samples its response curves on the theta grid, and projects every
item's curve onto the model family. Each E-step recomputes session
posteriors under the projected bank and draws one ability value per session
(the draw count is configurable but defaults to 1; extra draws replicate the
training rows). The E-step after the final M-step is skipped; stored
posteriors always come from the final bank.

The classifier is retrained from scratch every M-step; warm-starting it
across iterations is a possible speedup that is deliberately not done here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import boost
from .irt import ItemParams, ModelFamily, bernoulli_log_likelihood, irf_arrays
from .posterior import (AbilityPosterior, ThetaGrid, batch_log_posteriors,
                        item_log_likelihood_table, session_rng,
                        _normalize_log_weights)
from .projection import (CurveSample, ProjectionConfig, ProjectionResult,
                         bank_params, project_bank)
from .tables import ResponseTable


def _as_curves(prob_map: Mapping[str, np.ndarray], grid: ThetaGrid) -> dict[str, CurveSample]:
    return {i: CurveSample(grid, p) for i, p in prob_map.items()}


@dataclass(frozen=True)
class McemConfig:
    grid: ThetaGrid
    family: ModelFamily
    iterations: int = 4
    learner: boost.LearnerConfig = field(default_factory=boost.LearnerConfig)
    projection: ProjectionConfig | None = None
    seed: int = 0
    theta_init: Mapping[str, float] | None = None  # None: standardized raw score
    draws_per_session: int = 1
    workers: int = 1

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 1 <= self.draws_per_session <= 64:
            raise ValueError("draws_per_session must be in [1, 64]")
        if self.projection is not None and self.projection.family != self.family:
            raise ValueError("projection config family differs from McemConfig.family")

    def projection_config(self) -> ProjectionConfig:
        return self.projection or ProjectionConfig(family=self.family)


@dataclass(frozen=True)
class IterationTrace:
    iteration: int
    nonparametric_loss: float
    parametric_loss: float


@dataclass
class CalibrationResult:
    bank: dict[str, ItemParams]
    classifier: boost.GradeClassifier
    session_posteriors: dict[str, AbilityPosterior]
    trace: list[IterationTrace]
    cold_start_items: tuple[str, ...]
    projection_report: dict[str, ProjectionResult]
    grid: ThetaGrid


def initialize_theta(responses: ResponseTable,
                     init: Mapping[str, float] | None = None) -> dict[str, float]:
    """Initial abilities: provided scores, else each session's mean grade, standardized.

    Standardization is to mean 0 / population sd 1, then clipped to [-3, 3]
    (all-0 and all-1 sessions land at the clip). Zero variance gives all 0.
    """
    if len(responses) == 0:
        raise ValueError("cannot initialize abilities from an empty response table")
    sess_codes, _, sess_vocab, _ = responses.indexed()
    if init is not None:
        missing = [s for s in sess_vocab if s not in init]
        if missing:
            raise ValueError(f"initial scores missing for sessions: {missing[:5]}")
        values = np.asarray([float(init[s]) for s in sess_vocab])
    else:
        sums = np.bincount(sess_codes, weights=responses.grades.astype(float),
                           minlength=len(sess_vocab))
        counts = np.bincount(sess_codes, minlength=len(sess_vocab))
        values = sums / counts
    sd = values.std()
    if sd == 0:
        z = np.zeros(len(values))
    else:
        z = np.clip((values - values.mean()) / sd, -3.0, 3.0)
    return {str(s): float(v) for s, v in zip(sess_vocab, z)}


def _mean_cross_entropy(grades: np.ndarray, probs: np.ndarray) -> float:
    return float(-np.mean(bernoulli_log_likelihood(grades, probs)))


def calibrate(responses: ResponseTable, features: Mapping[str, Sequence[float]],
              config: McemConfig,
              feature_names: Sequence[str] | None = None,
              trainer: Callable[..., boost.GradeClassifier] | None = None) -> CalibrationResult:
    """Run the full MCEM calibration and return bank, classifier, and posteriors.

    ``trainer`` swaps the grade classifier (same signature as
    boost.fit_arrays); the default is the built-in boosted-tree learner.
    Feature-map items without any training response are excluded from
    training and reported as cold-start items. The trace records, per
    iteration, the classifier's and the projected bank's mean cross-entropy
    on the iteration's training rows.
    """
    if len(responses) == 0:
        raise ValueError("cannot calibrate an empty response table")
    train_fn = trainer or boost.fit_arrays
    sess_codes, item_codes, sess_vocab, item_vocab = responses.indexed()
    missing = [i for i in item_vocab if str(i) not in features]
    if missing:
        raise ValueError(f"features missing for responded items: {missing[:5]}")
    cold_items = tuple(sorted(set(map(str, features.keys())) - set(item_vocab.tolist())))

    feat_dim = np.atleast_1d(np.asarray(features[str(item_vocab[0])], dtype=float)).size
    feat_matrix = np.empty((len(item_vocab), feat_dim))
    for k, item_id in enumerate(item_vocab):
        vec = np.atleast_1d(np.asarray(features[str(item_id)], dtype=float))
        if vec.size != feat_dim:
            raise ValueError(f"item {item_id!r} feature length {vec.size} != {feat_dim}")
        feat_matrix[k] = vec
    train_features = {str(i): feat_matrix[k] for k, i in enumerate(item_vocab)}

    theta_by_session = initialize_theta(responses, config.theta_init)
    theta_sets = [np.asarray([theta_by_session[str(s)] for s in sess_vocab])]

    grades = np.asarray(responses.grades, dtype=float)
    item_ids_per_row = item_vocab[item_codes]
    grid = config.grid
    proj_cfg = config.projection_config()
    seed_root = np.random.SeedSequence(config.seed)
    learner_seeds = [int(s.generate_state(1)[0]) for s in seed_root.spawn(config.iterations)]

    # rows pre-sorted by (session, item) once; reused by every E-step
    order = np.lexsort((item_codes, sess_codes))
    sess_sorted = sess_codes[order]
    starts = np.flatnonzero(np.r_[True, sess_sorted[1:] != sess_sorted[:-1]])
    grades_sorted = grades[order]
    item_codes_sorted = item_codes[order]

    def posteriors_under(bank: Mapping[str, ItemParams]) -> np.ndarray:
        _, logp, log1mp = item_log_likelihood_table(bank, grid)
        log_w = batch_log_posteriors(starts, item_codes_sorted, grades_sorted,
                                     logp, log1mp, grid)
        return _normalize_log_weights(log_w)

    trace: list[IterationTrace] = []
    bank: dict[str, ItemParams] = {}
    proj_results: dict[str, ProjectionResult] = {}
    model: boost.GradeClassifier | None = None

    for it in range(1, config.iterations + 1):
        reps = len(theta_sets)
        m_theta = np.concatenate([tv[sess_codes] for tv in theta_sets])
        m_feats = np.tile(feat_matrix[item_codes], (reps, 1))
        m_ids = np.tile(item_ids_per_row, reps)
        m_grades = np.tile(grades, reps)

        model = train_fn(m_theta, m_feats, m_ids, m_grades,
                         config=config.learner, seed=learner_seeds[it - 1],
                         feature_names=feature_names,
                         validation_groups=np.tile(sess_codes, reps))

        numeric = np.column_stack([m_theta, m_feats])
        np_loss = _mean_cross_entropy(
            m_grades, model.predict_matrix(numeric, model.encode_items(m_ids)))

        curves = _as_curves(boost.predict_curves(model, train_features, grid), grid)
        proj_results = project_bank(curves, proj_cfg, workers=config.workers)
        bank = bank_params(proj_results)

        a = np.asarray([bank[str(i)].a for i in item_vocab])
        c = np.asarray([bank[str(i)].c for i in item_vocab])
        d = np.asarray([bank[str(i)].d for i in item_vocab])
        p_param = irf_arrays(m_theta, np.tile(a[item_codes], reps),
                             np.tile(c[item_codes], reps), np.tile(d[item_codes], reps))
        trace.append(IterationTrace(it, np_loss, _mean_cross_entropy(m_grades, p_param)))

        if it == config.iterations:
            break  # E-step skipped after the final M-step

        weights = posteriors_under(bank)
        cdf = np.cumsum(weights, axis=1)
        cdf[:, -1] = 1.0
        theta_sets = []
        for dr in range(config.draws_per_session):
            u = np.asarray([session_rng(config.seed, str(s), stream=it * 64 + dr).random()
                            for s in sess_vocab])
            idx = np.minimum((cdf <= u[:, None]).sum(axis=1), len(grid) - 1)
            theta_sets.append(grid.points[idx])

    weights = posteriors_under(bank)
    session_posteriors = {
        str(s): AbilityPosterior(grid, weights[k]) for k, s in enumerate(sess_vocab)
    }

    return CalibrationResult(
        bank=bank,
        classifier=model,
        session_posteriors=session_posteriors,
        trace=trace,
        cold_start_items=cold_items,
        projection_report=proj_results,
        grid=grid,
    )


def cold_start_params(result: CalibrationResult, features: Mapping[str, Sequence[float]],
                      grid: ThetaGrid, projection: ProjectionConfig,
                      workers: int = 1) -> dict[str, ItemParams]:
    """Parameters for response-less items: classifier curve + projection per item.

    Ids unseen in training flow through the classifier's unknown-category
    path, so brand-new items are predicted from their features alone.
    """
    if not features:
        return {}
    feats = {str(i): np.atleast_1d(np.asarray(v, dtype=float)) for i, v in features.items()}
    curves = _as_curves(boost.predict_curves(result.classifier, feats, grid), grid)
    results = project_bank(curves, projection, workers=workers)
    return bank_params(results)
