"""Grid-based ability posteriors: construction, updating, sampling, scoring.

The ability prior lives on a regular grid of theta values; a session's
posterior is prior mass times the product of its response likelihoods,
accumulated in log space and renormalized. The posterior mean over the grid
is the reported score.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .irt import ItemParams, bernoulli_log_likelihood, clamp_probability, irf

DEFAULT_MIN_PRIOR_MASS = 0.999


@dataclass(frozen=True)
class NormalPrior:
    """Normal(mean, sd) ability prior."""

    mean: float = 0.0
    sd: float = 1.0

    def __post_init__(self) -> None:
        if self.sd <= 0:
            raise ValueError("prior sd must be positive")

    def pdf(self, x):
        return norm.pdf(x, loc=self.mean, scale=self.sd)

    def mass(self, lo: float, hi: float) -> float:
        return float(norm.cdf(hi, self.mean, self.sd) - norm.cdf(lo, self.mean, self.sd))


@dataclass(frozen=True)
class ThetaGrid:
    """Strictly increasing regular theta grid with normalized prior weights."""

    points: np.ndarray
    prior_weights: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        w = np.asarray(self.prior_weights, dtype=float)
        if pts.ndim != 1 or len(pts) < 3:
            raise ValueError("grid needs at least 3 points")
        steps = np.diff(pts)
        if (steps <= 0).any():
            raise ValueError("grid points must be strictly increasing")
        mean_step = float(steps.mean())
        if np.abs(steps - mean_step).max() > 1e-12 * max(1.0, abs(mean_step)):
            raise ValueError("grid spacing is not uniform")
        if len(w) != len(pts):
            raise ValueError("prior weights length differs from grid length")
        if (w < 0).any():
            raise ValueError("prior weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-8:
            raise ValueError("prior weights must sum to 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "prior_weights", w)
        pts.setflags(write=False)
        w.setflags(write=False)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def step(self) -> float:
        return float(self.points[1] - self.points[0])


def make_grid(lo: float, hi: float, step: float, prior: NormalPrior,
              min_mass: float = DEFAULT_MIN_PRIOR_MASS) -> ThetaGrid:
    """Regular grid on [lo, hi] with prior weights proportional to the prior pdf.

    Rejects grids capturing less than ``min_mass`` of the prior's probability
    mass, so posteriors are never computed on a support that misses the bulk
    of the prior.
    """
    if not lo < hi:
        raise ValueError("grid requires lo < hi")
    if step <= 0:
        raise ValueError("grid step must be positive")
    n_steps = (hi - lo) / step
    if abs(n_steps - round(n_steps)) > 1e-9:
        raise ValueError(f"(hi - lo) / step = {n_steps} is not an integer")
    n_steps = int(round(n_steps))
    covered = prior.mass(lo, hi)
    if covered < min_mass:
        raise ValueError(
            f"grid [{lo}, {hi}] covers {covered:.6f} of the prior mass, "
            f"below the required {min_mass}"
        )
    points = np.linspace(lo, hi, n_steps + 1)
    weights = prior.pdf(points)
    weights = weights / weights.sum()
    return ThetaGrid(points, weights)


def default_grid() -> ThetaGrid:
    """Calibration default: -4..4 step 0.1 under a Normal(0,1) prior."""
    return make_grid(-4.0, 4.0, 0.1, NormalPrior(0.0, 1.0))


@dataclass(frozen=True)
class SessionResponses:
    """One session's graded responses; item ids are distinct within a session."""

    session_id: str
    responses: tuple[tuple[str, int], ...]

    def __post_init__(self) -> None:
        ids = [i for i, _ in self.responses]
        if len(set(ids)) != len(ids):
            raise ValueError(f"session {self.session_id!r} has repeated item ids")
        for item_id, grade in self.responses:
            if grade not in (0, 1):
                raise ValueError(f"grade for item {item_id!r} must be 0 or 1, got {grade!r}")


@dataclass(frozen=True)
class AbilityPosterior:
    """Posterior masses over a grid's points; weights sum to 1."""

    grid: ThetaGrid
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if len(w) != len(self.grid):
            raise ValueError("posterior weight length differs from grid length")
        if (w < 0).any():
            raise ValueError("posterior weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("posterior weights must sum to 1 within 1e-10")
        object.__setattr__(self, "weights", w)
        w.setflags(write=False)


def item_log_likelihood_table(bank: Mapping[str, ItemParams], grid: ThetaGrid):
    """Per-item log p and log (1-p) over the grid, keyed by sorted item id.

    Returns (item_ids, logp, log1mp) with logp/log1mp of shape
    (n_items, n_grid_points). Shared by the per-session and batched paths so
    both accumulate identical addends.
    """
    item_ids = sorted(bank)
    n = len(item_ids)
    logp = np.empty((n, len(grid)))
    log1mp = np.empty((n, len(grid)))
    for k, item_id in enumerate(item_ids):
        p = clamp_probability(irf(grid.points, bank[item_id]))
        logp[k] = np.log(p)
        log1mp[k] = np.log1p(-p)
    return np.asarray(item_ids, dtype=str), logp, log1mp


def _normalize_log_weights(log_w: np.ndarray) -> np.ndarray:
    log_w = log_w - log_w.max(axis=-1, keepdims=True)
    w = np.exp(log_w)
    return w / w.sum(axis=-1, keepdims=True)


def compute_posterior(session: SessionResponses, bank: Mapping[str, ItemParams],
                      grid: ThetaGrid) -> AbilityPosterior:
    """Posterior mass at each grid point: prior times the response likelihoods.

    Accumulates in log space, in canonical (item-id-sorted) order, so the
    result is independent of the order responses were recorded. An empty
    response list returns the prior itself.
    """
    total = np.zeros(len(grid))
    for item_id, grade in sorted(session.responses):
        if item_id not in bank:
            raise KeyError(f"item {item_id!r} is not in the bank")
        p = clamp_probability(irf(grid.points, bank[item_id]))
        total = total + (np.log(p) if grade == 1 else np.log1p(-p))
    log_w = np.log(grid.prior_weights) + total
    return AbilityPosterior(grid, _normalize_log_weights(log_w))


def posterior_mean(post: AbilityPosterior) -> float:
    """Reported score: the posterior expectation of theta on the grid."""
    return float(post.weights @ post.grid.points)


def posterior_sd(post: AbilityPosterior) -> float:
    mean = posterior_mean(post)
    var = float(post.weights @ (post.grid.points - mean) ** 2)
    return float(np.sqrt(max(var, 0.0)))


def sample_theta(post: AbilityPosterior, rng: np.random.Generator, size: int | None = None):
    """Draw grid points with probability equal to their posterior weight.

    Inverse-CDF sampling: one uniform per draw, so a fixed generator state
    yields an identical draw sequence. ``size=None`` returns a scalar.
    """
    cdf = np.cumsum(post.weights)
    cdf[-1] = 1.0
    u = rng.random() if size is None else rng.random(size)
    idx = np.searchsorted(cdf, u, side="right")
    idx = np.minimum(idx, len(cdf) - 1)
    if size is None:
        return float(post.grid.points[idx])
    return post.grid.points[idx]


def session_rng(master_seed: int, session_id: str, stream: int = 0) -> np.random.Generator:
    """Independent generator stream for one session, stable across runs and scheduling."""
    digest = hashlib.sha256(str(session_id).encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), key, int(stream)]))


def batch_log_posteriors(session_starts: np.ndarray, item_codes: np.ndarray,
                         grades: np.ndarray, logp: np.ndarray, log1mp: np.ndarray,
                         grid: ThetaGrid) -> np.ndarray:
    """Unnormalized log posteriors for many sessions at once.

    Rows must be grouped by session (``session_starts`` marks group starts)
    and sorted by item id within each group, matching compute_posterior's
    canonical accumulation order. Returns shape (n_sessions, n_grid).
    """
    ll = np.where(grades[:, None] == 1, logp[item_codes], log1mp[item_codes])
    sums = np.add.reduceat(ll, session_starts, axis=0)
    return np.log(grid.prior_weights)[None, :] + sums


def scores_for_table(table, bank: Mapping[str, ItemParams], grid: ThetaGrid,
                     chunk_sessions: int = 2048):
    """Posterior mean and sd for every session in a response table.

    Returns (session_ids, means, sds) with sessions in sorted-id order.
    Sessions are processed in chunks; results match compute_posterior +
    posterior_mean applied per session.
    """
    ids, logp, log1mp = item_log_likelihood_table(bank, grid)
    sess_codes, item_codes, sess_vocab, item_vocab = table.indexed()
    missing = set(item_vocab) - set(ids.tolist())
    if missing:
        raise KeyError(f"items not in the bank: {sorted(missing)[:5]}")
    # Map the table's item codes onto the bank's sorted-id row numbers.
    remap = np.searchsorted(ids, item_vocab)
    item_rows = remap[item_codes]

    order = np.lexsort((item_rows, sess_codes))
    sess_sorted = sess_codes[order]
    item_sorted = item_rows[order]
    grade_sorted = np.asarray(table.grades)[order]
    starts = np.flatnonzero(np.r_[True, sess_sorted[1:] != sess_sorted[:-1]])

    n_sessions = len(sess_vocab)
    means = np.empty(n_sessions)
    sds = np.empty(n_sessions)
    pts = grid.points
    for c0 in range(0, len(starts), chunk_sessions):
        c1 = min(c0 + chunk_sessions, len(starts))
        row_lo = starts[c0]
        row_hi = starts[c1] if c1 < len(starts) else len(sess_sorted)
        local_starts = starts[c0:c1] - row_lo
        log_w = batch_log_posteriors(local_starts, item_sorted[row_lo:row_hi],
                                     grade_sorted[row_lo:row_hi], logp, log1mp, grid)
        w = _normalize_log_weights(log_w)
        mu = w @ pts
        var = w @ pts**2 - mu**2
        means[c0:c1] = mu
        sds[c0:c1] = np.sqrt(np.maximum(var, 0.0))
    return sess_vocab, means, sds
