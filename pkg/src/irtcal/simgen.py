"""Synthetic 3PL test data: item banks with feature-driven parameters, normal
abilities, uniformly administered responses, and the full experiment grid.

Items carry two uniform features; the difficulty and discrimination surfaces
are oscillatory functions of their difference, plus lognormal/normal random
effects, with a constant 0.25 chance floor:

    x1, x2 ~ U(-10, 10),  z = x1 - x2
    d_mean = 4 sin(z) / |z|
    a_mean = 0.5 cos(0.1 z^2) + 1
    d = d_mean + N(0, sigma_rand),  a = exp(log a_mean + N(0, sigma_rand)),  c = 0.25

Abilities are N(0, theta_sd) with theta_sd read as a standard deviation
(default 2.5). Bank, ability, and response randomness come from independent
sub-streams of the master seed, so regenerating responses under a new seed
leaves the bank untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import boost
from .irt import ItemParams, ModelFamily, irf_arrays
from .mcem import CalibrationResult, McemConfig, calibrate, cold_start_params
from .posterior import NormalPrior, ThetaGrid, make_grid
from .projection import ProjectionConfig
from .tables import ResponseTable

SIM_CHANCE = 0.25


@dataclass(frozen=True)
class SimConfig:
    n_items: int = 100
    n_sessions: int = 2500
    items_per_session: int = 10
    sigma_rand: float = 0.1
    n_oos_items: int = 1000
    n_test_sessions: int = 100_000
    seed: int = 0
    theta_sd: float = 2.5

    def __post_init__(self) -> None:
        if min(self.n_items, self.n_sessions, self.items_per_session) < 1:
            raise ValueError("all counts must be positive")
        if self.items_per_session > self.n_items:
            raise ValueError("items_per_session exceeds n_items")
        if self.theta_sd <= 0 or self.sigma_rand < 0:
            raise ValueError("theta_sd must be positive and sigma_rand nonnegative")


@dataclass(frozen=True)
class SimItems:
    """Ground-truth item bank with its generating quantities."""

    item_ids: tuple[str, ...]
    x1: np.ndarray
    x2: np.ndarray
    z: np.ndarray
    d_mean: np.ndarray
    a_mean: np.ndarray
    a: np.ndarray
    d: np.ndarray
    c: np.ndarray

    def bank(self) -> dict[str, ItemParams]:
        return {i: ItemParams(a=float(self.a[k]), c=float(self.c[k]), d=float(self.d[k]))
                for k, i in enumerate(self.item_ids)}

    def features(self) -> dict[str, np.ndarray]:
        return {i: np.array([self.x1[k], self.x2[k]])
                for k, i in enumerate(self.item_ids)}

    def take(self, indices: Sequence[int]) -> "SimItems":
        idx = np.asarray(indices, dtype=np.int64)
        return SimItems(
            item_ids=tuple(self.item_ids[k] for k in idx),
            x1=self.x1[idx], x2=self.x2[idx], z=self.z[idx],
            d_mean=self.d_mean[idx], a_mean=self.a_mean[idx],
            a=self.a[idx], d=self.d[idx], c=self.c[idx],
        )

    def __len__(self) -> int:
        return len(self.item_ids)


@dataclass(frozen=True)
class SimTruth:
    """Items plus per-session true abilities."""

    items: SimItems
    session_ids: tuple[str, ...]
    thetas: np.ndarray

    def theta_of(self) -> dict[str, float]:
        return {s: float(t) for s, t in zip(self.session_ids, self.thetas)}


def generate_bank(config: SimConfig, rng: np.random.Generator,
                  n_items: int | None = None, id_prefix: str = "i") -> SimItems:
    """Draw item features and parameters; items with |z| < 1e-9 are resampled."""
    n = config.n_items if n_items is None else n_items
    x1 = rng.uniform(-10.0, 10.0, n)
    x2 = rng.uniform(-10.0, 10.0, n)
    z = x1 - x2
    # the difficulty surface jumps at z = 0; resample rather than special-case
    while (bad := np.abs(z) < 1e-9).any():
        x1[bad] = rng.uniform(-10.0, 10.0, bad.sum())
        x2[bad] = rng.uniform(-10.0, 10.0, bad.sum())
        z = x1 - x2
    d_mean = 4.0 * np.sin(z) / np.abs(z)
    a_mean = 0.5 * np.cos(0.1 * z**2) + 1.0
    d = d_mean + rng.normal(0.0, config.sigma_rand, n)
    a = np.exp(np.log(a_mean) + rng.normal(0.0, config.sigma_rand, n))
    c = np.full(n, SIM_CHANCE)
    width = max(4, len(str(n - 1)))
    ids = tuple(f"{id_prefix}{k:0{width}d}" for k in range(n))
    return SimItems(ids, x1, x2, z, d_mean, a_mean, a, d, c)


def generate_sessions(config: SimConfig, rng: np.random.Generator,
                      n_sessions: int | None = None, id_prefix: str = "s"):
    """I.i.d. N(0, theta_sd) abilities; returns (session_ids, thetas)."""
    n = config.n_sessions if n_sessions is None else n_sessions
    thetas = rng.normal(0.0, config.theta_sd, n)
    width = max(5, len(str(n - 1)))
    ids = tuple(f"{id_prefix}{k:0{width}d}" for k in range(n))
    return ids, thetas


def generate_responses(truth: SimTruth, config: SimConfig,
                       rng: np.random.Generator) -> ResponseTable:
    """Administer items_per_session items uniformly without replacement per
    session and grade each by a Bernoulli draw from the true response curve."""
    items = truth.items
    n_items = len(items)
    ips = config.items_per_session
    if ips > n_items:
        raise ValueError("items_per_session exceeds the bank size")
    n_sessions = len(truth.session_ids)
    item_idx = np.empty((n_sessions, ips), dtype=np.int64)
    for s in range(n_sessions):
        item_idx[s] = rng.choice(n_items, size=ips, replace=False)
    theta_rep = np.repeat(truth.thetas, ips)
    flat_idx = item_idx.reshape(-1)
    p = irf_arrays(theta_rep, items.a[flat_idx], items.c[flat_idx], items.d[flat_idx])
    grades = (rng.random(len(p)) < p).astype(np.int8)
    session_col = np.repeat(np.asarray(truth.session_ids, dtype=str), ips)
    item_col = np.asarray(items.item_ids, dtype=str)[flat_idx]
    return ResponseTable(session_col, item_col, grades)


@dataclass(frozen=True)
class SimDataset:
    """A full simulated experiment cell: train/test responses plus all truth."""

    config: SimConfig
    train_items: SimItems
    oos_items: SimItems
    truth: SimTruth                 # training sessions
    test_truth: SimTruth            # held-out sessions
    train: ResponseTable
    warm_test: ResponseTable        # held-out sessions x training items
    cold_test: ResponseTable        # held-out sessions x held-out items

    def features(self) -> dict[str, np.ndarray]:
        out = self.train_items.features()
        out.update(self.oos_items.features())
        return out


def simulate_dataset(config: SimConfig) -> SimDataset:
    """Generate one experiment cell from independent sub-streams of the seed."""
    root = np.random.SeedSequence(config.seed)
    bank_ss, theta_ss, resp_ss, test_theta_ss, warm_ss, cold_ss = root.spawn(6)

    all_items = generate_bank(config, np.random.default_rng(bank_ss),
                              n_items=config.n_items + config.n_oos_items)
    train_items = all_items.take(range(config.n_items))
    oos_items = all_items.take(range(config.n_items, len(all_items)))

    sess_ids, thetas = generate_sessions(config, np.random.default_rng(theta_ss))
    truth = SimTruth(train_items, sess_ids, thetas)
    train = generate_responses(truth, config, np.random.default_rng(resp_ss))

    test_ids, test_thetas = generate_sessions(
        config, np.random.default_rng(test_theta_ss),
        n_sessions=config.n_test_sessions, id_prefix="t")
    test_truth = SimTruth(train_items, test_ids, test_thetas)
    warm_test = generate_responses(test_truth, config, np.random.default_rng(warm_ss))

    if len(oos_items):
        cold_truth = SimTruth(oos_items, test_ids, test_thetas)
        cold_cfg = config if config.items_per_session <= len(oos_items) else replace(
            config, items_per_session=len(oos_items))
        cold_test = generate_responses(cold_truth, cold_cfg, np.random.default_rng(cold_ss))
    else:
        cold_test = ResponseTable.from_rows([])

    return SimDataset(config=config, train_items=train_items, oos_items=oos_items,
                      truth=truth, test_truth=test_truth, train=train,
                      warm_test=warm_test, cold_test=cold_test)
