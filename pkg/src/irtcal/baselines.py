"""Comparison calibrators: non-explanatory marginal-maximum-likelihood EM, and
a ridge-penalized linear explanatory model with a fixed proxy ability.

The MML fitter alternates grid posteriors per session with per-item Newton
ascent on the expected log-likelihood. The linear model writes
log a_i = w_a . x_i + b_a + delta_a_i and d_i = w_d . x_i + b_d + delta_d_i,
holds each session's ability fixed at a proxy value, and minimizes the
penalized negative log-likelihood by full-batch gradient descent with
analytic gradients; both ridge strengths can be chosen by a coarse grid
search on a validation split.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .irt import ItemParams, ModelFamily, bernoulli_log_likelihood, irf_arrays, sigmoid
from .posterior import ThetaGrid, batch_log_posteriors, item_log_likelihood_table, \
    _normalize_log_weights
from .tables import ResponseTable

LAMBDA_GRID = (0.001, 0.01, 0.1, 1.0, 10.0)


# ---------------------------------------------------------------------------
# Non-explanatory MML-EM
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MmlConfig:
    max_em_iters: int = 100
    tol: float = 1e-5              # on the mean marginal negative log-likelihood
    newton_steps: int = 20
    a_bounds: tuple[float, float] = (0.05, 25.0)
    d_margin: float = 2.0          # d bounds: grid range widened by this much


@dataclass
class MmlFit:
    bank: dict[str, ItemParams]
    flagged_items: tuple[str, ...]       # all-0 or all-1 items, fitted at bounds
    marginal_loss_trace: list[float]     # mean marginal NLL per response, per EM iter
    n_iterations: int
    converged: bool


def _logit(x):
    return np.log(x) - np.log1p(-x)


def _item_psi(family: ModelFamily, a: np.ndarray, d: np.ndarray) -> np.ndarray:
    if family.frees_a:
        return np.column_stack([np.log(a), d])
    return d.reshape(-1, 1)


def _psi_item(family: ModelFamily, psi: np.ndarray):
    if family.frees_a:
        return np.exp(psi[:, 0]), psi[:, 1]
    return np.ones(len(psi)), psi[:, 0]


def fit_nonexplanatory(responses: ResponseTable, grid: ThetaGrid,
                       family: ModelFamily, config: MmlConfig | None = None) -> MmlFit:
    """Marginal maximum likelihood for per-item parameters, no features.

    E-step: grid posterior per session. M-step: per-item Newton ascent (with
    step halving) on the posterior-expected log-likelihood. The Normal prior
    anchors location and scale, so no extra identification constraints are
    applied. Free-chance families are rejected as unidentifiable here.
    """
    if family.frees_c:
        raise ValueError("free-chance MML fitting is not supported (unidentifiable)")
    cfg = config or MmlConfig()
    if len(responses) == 0:
        raise ValueError("cannot fit an empty response table")
    sess_codes, item_codes, sess_vocab, item_vocab = responses.indexed()
    grades = np.asarray(responses.grades, dtype=float)
    n_items = len(item_vocab)
    n_sessions = len(sess_vocab)
    c_fixed = family.fixed_c or 0.0

    counts = np.bincount(item_codes, minlength=n_items)
    mean_grade = np.bincount(item_codes, weights=grades, minlength=n_items) / counts
    flagged = tuple(str(item_vocab[k]) for k in np.flatnonzero(
        (mean_grade == 0.0) | (mean_grade == 1.0)))

    # response-curve share above chance, clipped, gives the starting difficulty
    frac = np.clip((mean_grade - c_fixed) / (1.0 - c_fixed), 0.02, 0.98)
    d = -_logit(frac)
    a = np.ones(n_items)
    d_lo = float(grid.points[0]) - cfg.d_margin
    d_hi = float(grid.points[-1]) + cfg.d_margin
    log_a_lo, log_a_hi = np.log(cfg.a_bounds[0]), np.log(cfg.a_bounds[1])

    order = np.lexsort((item_codes, sess_codes))
    sess_sorted = sess_codes[order]
    starts = np.flatnonzero(np.r_[True, sess_sorted[1:] != sess_sorted[:-1]])
    grades_sorted = grades[order]
    items_sorted = item_codes[order]

    # sparse indicators: expected grade counts on the grid come from one matmul
    rows1 = items_sorted[grades_sorted == 1]
    rows0 = items_sorted[grades_sorted == 0]
    sess1 = sess_sorted[grades_sorted == 1]
    sess0 = sess_sorted[grades_sorted == 0]
    ind1 = sp.csr_matrix((np.ones(len(rows1)), (rows1, sess1)),
                         shape=(n_items, n_sessions))
    ind0 = sp.csr_matrix((np.ones(len(rows0)), (rows0, sess0)),
                         shape=(n_items, n_sessions))

    pts = grid.points
    trace: list[float] = []
    converged = False
    for _ in range(cfg.max_em_iters):
        bank = {str(item_vocab[k]): family.constrain(a=float(a[k]), d=float(d[k]))
                for k in range(n_items)}
        _, logp, log1mp = item_log_likelihood_table(bank, grid)
        log_w = batch_log_posteriors(starts, items_sorted, grades_sorted,
                                     logp, log1mp, grid)
        shift = log_w.max(axis=1)
        marginal = shift + np.log(np.exp(log_w - shift[:, None]).sum(axis=1))
        trace.append(float(-marginal.sum() / len(responses)))
        w = _normalize_log_weights(log_w)

        n1 = ind1 @ w   # (n_items, n_grid) expected correct counts
        n0 = ind0 @ w

        psi = _item_psi(family, a, d)
        for k in range(n_items):
            psi[k] = _newton_item(psi[k], n1[k], n0[k], pts, c_fixed, family, cfg,
                                  d_lo, d_hi, log_a_lo, log_a_hi)
        a, d = _psi_item(family, psi)

        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < cfg.tol:
            converged = True
            break

    bank = {str(item_vocab[k]): family.constrain(a=float(a[k]), d=float(d[k]))
            for k in range(n_items)}
    return MmlFit(bank=bank, flagged_items=flagged, marginal_loss_trace=trace,
                  n_iterations=len(trace), converged=converged)


def _newton_item(psi, n1, n0, pts, c, family, cfg, d_lo, d_hi, la_lo, la_hi):
    """Maximize the expected log-likelihood of one item over its free parameters."""

    def unpack(v):
        if family.frees_a:
            return float(np.exp(v[0])), float(v[1])
        return 1.0, float(v[0])

    def objective(v):
        a_k, d_k = unpack(v)
        p = np.clip(c + (1 - c) * sigmoid(a_k * (pts - d_k)), 1e-12, 1 - 1e-12)
        return float(n1 @ np.log(p) + n0 @ np.log1p(-p))

    def clip(v):
        v = v.copy()
        if family.frees_a:
            v[0] = np.clip(v[0], la_lo, la_hi)
            v[1] = np.clip(v[1], d_lo, d_hi)
        else:
            v[0] = np.clip(v[0], d_lo, d_hi)
        return v

    val = objective(psi)
    for _ in range(cfg.newton_steps):
        a_k, d_k = unpack(psi)
        s = sigmoid(a_k * (pts - d_k))
        p = np.clip(c + (1 - c) * s, 1e-12, 1 - 1e-12)
        core = (1 - c) * s * (1 - s)
        cols = []
        if family.frees_a:
            cols.append(core * (pts - d_k) * a_k)
        cols.append(-core * a_k)
        jac = np.column_stack(cols)
        resid_w = n1 / p - n0 / (1 - p)
        grad = jac.T @ resid_w
        total = n1 + n0
        fisher = jac.T @ (jac * (total / (p * (1 - p)))[:, None])
        fisher += 1e-9 * np.eye(len(grad))
        try:
            step = np.linalg.solve(fisher, grad)
        except np.linalg.LinAlgError:
            break
        improved = False
        for _ in range(12):
            cand = clip(psi + step)
            cand_val = objective(cand)
            if cand_val >= val:
                psi, val = cand, cand_val
                improved = True
                break
            step = step / 2.0
        if not improved or float(np.abs(grad).max()) < 1e-9:
            break
    return psi


# ---------------------------------------------------------------------------
# Ridge linear explanatory model with fixed proxy ability
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearFitConfig:
    max_iters: int = 2000
    tol: float = 1e-9              # relative loss change
    init_step: float = 0.05
    search_max_iters: int = 400    # iteration budget during the lambda search
    validation_fraction: float = 0.2
    lambda_grid: tuple[float, ...] = LAMBDA_GRID


@dataclass
class LinearExplanatoryModel:
    feature_names: tuple[str, ...]
    family: ModelFamily
    w_a: np.ndarray
    b_a: float
    w_d: np.ndarray
    b_d: float
    item_ids: tuple[str, ...]
    delta_a: np.ndarray            # per training item offsets on log a
    delta_d: np.ndarray
    lam_coef: float
    lam_effects: float

    def item_params(self, x: np.ndarray, delta_a: float = 0.0,
                    delta_d: float = 0.0) -> ItemParams:
        a = float(np.exp(self.w_a @ x + self.b_a + delta_a))
        d = float(self.w_d @ x + self.b_d + delta_d)
        return self.family.constrain(a=a, d=d)

    def to_json_dict(self) -> dict:
        return {
            "kind": "linear-explanatory",
            "feature_names": list(self.feature_names),
            "family": self.family.spec_string(),
            "w_a": self.w_a.tolist(), "b_a": self.b_a,
            "w_d": self.w_d.tolist(), "b_d": self.b_d,
            "item_ids": list(self.item_ids),
            "delta_a": self.delta_a.tolist(), "delta_d": self.delta_d.tolist(),
            "lam_coef": self.lam_coef, "lam_effects": self.lam_effects,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "LinearExplanatoryModel":
        return cls(
            feature_names=tuple(d["feature_names"]),
            family=ModelFamily.parse(d["family"]),
            w_a=np.asarray(d["w_a"], dtype=float), b_a=float(d["b_a"]),
            w_d=np.asarray(d["w_d"], dtype=float), b_d=float(d["b_d"]),
            item_ids=tuple(d["item_ids"]),
            delta_a=np.asarray(d["delta_a"], dtype=float),
            delta_d=np.asarray(d["delta_d"], dtype=float),
            lam_coef=float(d["lam_coef"]), lam_effects=float(d["lam_effects"]),
        )


class _LinearProblem:
    """Vectorized loss/gradient for the penalized fixed-ability likelihood."""

    def __init__(self, x_items, theta_rows, item_codes, grades, c_fixed,
                 lam_coef, lam_effects, fit_a=True):
        self.x = x_items
        self.theta = theta_rows
        self.items = item_codes
        self.y = grades
        self.c = c_fixed
        self.lc = lam_coef
        self.le = lam_effects
        self.fit_a = fit_a
        self.n_items = len(x_items)
        self.k = x_items.shape[1]

    def unpack(self, v):
        k, m = self.k, self.n_items
        w_a = v[:k]
        b_a = v[k]
        w_d = v[k + 1:2 * k + 1]
        b_d = v[2 * k + 1]
        da = v[2 * k + 2:2 * k + 2 + m]
        dd = v[2 * k + 2 + m:]
        return w_a, b_a, w_d, b_d, da, dd

    def _item_params(self, v):
        w_a, b_a, w_d, b_d, da, dd = self.unpack(v)
        if self.fit_a:
            u = self.x @ w_a + b_a + da      # log a per item
            a = np.exp(np.clip(u, -10.0, 10.0))
        else:
            a = np.ones(self.n_items)
        d = self.x @ w_d + b_d + dd
        return w_a, w_d, da, dd, a, d

    def loss_grad(self, v):
        w_a, w_d, da, dd, a, d = self._item_params(v)
        a_r = a[self.items]
        d_r = d[self.items]
        s = sigmoid(a_r * (self.theta - d_r))
        p = np.clip(self.c + (1 - self.c) * s, 1e-12, 1 - 1e-12)
        nll = -float(self.y @ np.log(p) + (1 - self.y) @ np.log1p(-p))
        penalty = (self.lc * (w_a @ w_a + w_d @ w_d)
                   + self.le * (da @ da + dd @ dd))

        dnll_dp = -(self.y / p - (1 - self.y) / (1 - p))
        core = (1 - self.c) * s * (1 - s)
        g_d_rows = dnll_dp * (-core * a_r)
        g_d = np.bincount(self.items, weights=g_d_rows, minlength=self.n_items)
        if self.fit_a:
            g_u_rows = dnll_dp * core * (self.theta - d_r) * a_r   # d nll / d log a
            g_u = np.bincount(self.items, weights=g_u_rows, minlength=self.n_items)
        else:
            g_u = np.zeros(self.n_items)

        grad = np.concatenate([
            self.x.T @ g_u + 2 * self.lc * w_a,
            [g_u.sum()],
            self.x.T @ g_d + 2 * self.lc * w_d,
            [g_d.sum()],
            g_u + 2 * self.le * da,
            g_d + 2 * self.le * dd,
        ])
        return nll + penalty, grad

    def data_loss(self, v, items, theta, y):
        """Unpenalized mean NLL of arbitrary rows (validation use)."""
        _, _, _, _, a, d = self._item_params(v)
        p = irf_arrays(theta, a[items], np.full(len(items), self.c), d[items])
        return float(-np.mean(bernoulli_log_likelihood(y, p)))


def _gradient_descent(problem: _LinearProblem, v0: np.ndarray, max_iters: int,
                      tol: float, step0: float) -> np.ndarray:
    v = v0
    loss, grad = problem.loss_grad(v)
    step = step0 / max(1.0, float(np.abs(grad).max()))
    for _ in range(max_iters):
        accepted = False
        for _ in range(40):
            cand = v - step * grad
            cand_loss, cand_grad = problem.loss_grad(cand)
            if cand_loss <= loss:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        rel_drop = (loss - cand_loss) / max(abs(loss), 1e-12)
        v, loss, grad = cand, cand_loss, cand_grad
        step *= 1.2
        if rel_drop < tol:
            break
    return v


def fit_linear_explanatory(responses: ResponseTable,
                           features: Mapping[str, Sequence[float]],
                           proxy: Mapping[str, float],
                           family: ModelFamily,
                           lam_coef: float | None = None,
                           lam_effects: float | None = None,
                           config: LinearFitConfig | None = None,
                           feature_names: Sequence[str] | None = None,
                           rng: np.random.Generator | None = None):
    """Fit the linear explanatory model at fixed proxy abilities.

    When either ridge strength is None, both are chosen by a coarse grid
    search on a held-out validation split of the responses (selected by
    validation cross-entropy), then the model is refit on all rows. Returns
    (model, bank) where bank maps training items to their realized
    parameters (offsets included).
    """
    if family.frees_c:
        raise ValueError("free-chance fitting is not supported (unidentifiable)")
    cfg = config or LinearFitConfig()
    rng = rng or np.random.default_rng(0)
    sess_codes, item_codes, sess_vocab, item_vocab = responses.indexed()
    missing = [s for s in sess_vocab if str(s) not in proxy]
    if missing:
        raise ValueError(f"proxy scores missing for sessions: {missing[:5]}")
    missing_items = [i for i in item_vocab if str(i) not in features]
    if missing_items:
        raise ValueError(f"features missing for items: {missing_items[:5]}")

    x_items = np.asarray([np.atleast_1d(np.asarray(features[str(i)], dtype=float))
                          for i in item_vocab])
    theta_rows = np.asarray([proxy[str(s)] for s in sess_vocab])[sess_codes]
    grades = np.asarray(responses.grades, dtype=float)
    c_fixed = family.fixed_c or 0.0
    k = x_items.shape[1]
    names = tuple(feature_names) if feature_names is not None else tuple(
        f"f{j + 1}" for j in range(k))
    if len(names) != k:
        raise ValueError("feature_names length differs from feature dimension")

    size = 2 * k + 2 + 2 * len(item_vocab)
    v0 = np.zeros(size)

    def fit_once(lc, le, rows, iters):
        prob = _LinearProblem(x_items, theta_rows[rows], item_codes[rows],
                              grades[rows], c_fixed, lc, le, fit_a=family.frees_a)
        return prob, _gradient_descent(prob, v0, iters, cfg.tol, cfg.init_step)

    if lam_coef is None or lam_effects is None:
        n = len(responses)
        perm = rng.permutation(n)
        n_val = max(1, int(round(cfg.validation_fraction * n)))
        val_rows = perm[:n_val]
        tr_rows = perm[n_val:]
        best = None
        for lc in (cfg.lambda_grid if lam_coef is None else (lam_coef,)):
            for le in (cfg.lambda_grid if lam_effects is None else (lam_effects,)):
                prob, v = fit_once(lc, le, tr_rows, cfg.search_max_iters)
                val = prob.data_loss(v, item_codes[val_rows], theta_rows[val_rows],
                                     grades[val_rows])
                if best is None or val < best[0]:
                    best = (val, lc, le)
        _, lam_coef, lam_effects = best

    all_rows = np.arange(len(responses))
    prob, v = fit_once(lam_coef, lam_effects, all_rows, cfg.max_iters)
    w_a, b_a, w_d, b_d, da, dd = prob.unpack(v)

    model = LinearExplanatoryModel(
        feature_names=names, family=family,
        w_a=w_a, b_a=float(b_a), w_d=w_d, b_d=float(b_d),
        item_ids=tuple(str(i) for i in item_vocab),
        delta_a=da, delta_d=dd, lam_coef=float(lam_coef), lam_effects=float(lam_effects),
    )
    bank = {str(i): model.item_params(x_items[j], float(da[j]), float(dd[j]))
            for j, i in enumerate(item_vocab)}
    return model, bank


def predict_cold_linear(model: LinearExplanatoryModel,
                        features: Sequence[float]) -> ItemParams:
    """Parameters for an unseen item: the feature terms with zero offsets."""
    x = np.atleast_1d(np.asarray(features, dtype=float))
    if x.size != len(model.feature_names):
        raise ValueError(f"feature length {x.size} != {len(model.feature_names)}")
    return model.item_params(x)
