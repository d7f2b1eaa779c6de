"""Gradient-boosted decision trees for binary grade prediction.

Histogram-based boosting with second-order (Newton) leaf values on the
logistic loss. Features are the ability value, a fixed-length numeric item
feature vector, and the item id as a high-cardinality categorical (standing
in for per-item random effects). Categorical splits order a node's present
categories by their gradient/hessian ratio and scan prefix partitions;
categories absent from the node, including the reserved unknown bucket used
for never-seen item ids, follow the branch with the larger hessian mass.

Training is deterministic given (data, config, seed): the only randomness is
the internal validation split used for cross-entropy early stopping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .irt import sigmoid
from .posterior import ThetaGrid

PRED_EPS = 1e-6  # predictions are reported inside [PRED_EPS, 1 - PRED_EPS]
_LOG_EPS = 1e-12


class SchemaMismatchError(ValueError):
    """Prediction input does not match the schema the model was trained on."""


@dataclass(frozen=True)
class LearnerConfig:
    n_rounds: int = 500
    max_depth: int = 6
    learning_rate: float = 0.1
    validation_fraction: float = 0.2
    early_stopping_patience: int = 20
    l2: float = 1.0
    min_child_hessian: float = 1.0
    min_samples_leaf: int = 1
    max_bins: int = 256
    min_gain: float = 1e-12

    def __post_init__(self) -> None:
        if self.n_rounds < 1 or self.max_depth < 1:
            raise ValueError("n_rounds and max_depth must be >= 1")
        if not 0.0 < self.validation_fraction < 0.5:
            raise ValueError("validation_fraction must be in (0, 0.5)")
        if self.max_bins < 2 or self.max_bins > 65535:
            raise ValueError("max_bins must be in [2, 65535]")


@dataclass(frozen=True)
class FeatureRow:
    """One training/prediction row: ability, item feature vector, item id."""

    theta: float
    item_features: tuple[float, ...]
    item_id: str


@dataclass(frozen=True)
class FeatureSchema:
    feature_names: tuple[str, ...]  # numeric columns: theta first, then item features
    categories: tuple[str, ...]     # training item-id vocabulary, sorted

    @property
    def n_item_features(self) -> int:
        return len(self.feature_names) - 1

    @property
    def unknown_code(self) -> int:
        return len(self.categories)


@dataclass
class _Tree:
    feature: np.ndarray        # -1 leaf, [0, n_numeric) numeric, == n_numeric categorical
    threshold: np.ndarray      # numeric split: value <= threshold goes left
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray          # learning-rate-scaled leaf values
    cat_codes: list            # per node: sorted codes on the non-default side, or None
    default_left: np.ndarray

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "cat_codes": [None if c is None else c.tolist() for c in self.cat_codes],
            "default_left": self.default_left.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "_Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int32),
            threshold=np.asarray(d["threshold"], dtype=float),
            left=np.asarray(d["left"], dtype=np.int32),
            right=np.asarray(d["right"], dtype=np.int32),
            value=np.asarray(d["value"], dtype=float),
            cat_codes=[None if c is None else np.asarray(c, dtype=np.int32)
                       for c in d["cat_codes"]],
            default_left=np.asarray(d["default_left"], dtype=bool),
        )


@dataclass
class GradeClassifier:
    """Trained boosted-tree ensemble plus schema and training metadata."""

    schema: FeatureSchema
    config: LearnerConfig
    base_score: float          # initial log-odds (training-split base rate)
    trees: list
    seed: int | None
    n_rounds_used: int
    validation_loss: float
    constant_validation_loss: float  # validation CE of the base-rate predictor

    # ---- prediction ----

    def predict_matrix(self, numeric: np.ndarray, cat_codes: np.ndarray) -> np.ndarray:
        """Probabilities for pre-encoded rows; clamped to [1e-6, 1 - 1e-6]."""
        raw = np.full(len(numeric), self.base_score)
        n_numeric = numeric.shape[1]
        for tree in self.trees:
            raw += tree.value[_apply_tree(tree, numeric, cat_codes, n_numeric)]
        return np.clip(sigmoid(raw), PRED_EPS, 1.0 - PRED_EPS)

    def encode_items(self, item_ids: Sequence[str]) -> np.ndarray:
        """Map item ids onto training category codes; unseen ids get the unknown bucket."""
        ids = np.asarray([str(i) for i in item_ids], dtype=str)
        vocab = np.asarray(self.schema.categories, dtype=str)
        if len(vocab) == 0:
            return np.full(len(ids), self.schema.unknown_code, dtype=np.int32)
        pos = np.minimum(np.searchsorted(vocab, ids), len(vocab) - 1)
        codes = np.where(vocab[pos] == ids, pos, self.schema.unknown_code)
        return codes.astype(np.int32)

    def to_json_dict(self) -> dict:
        return {
            "kind": "grade-classifier",
            "schema": {"feature_names": list(self.schema.feature_names),
                       "categories": list(self.schema.categories)},
            "config": self.config.__dict__.copy(),
            "base_score": self.base_score,
            "seed": self.seed,
            "n_rounds_used": self.n_rounds_used,
            "validation_loss": self.validation_loss,
            "constant_validation_loss": self.constant_validation_loss,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "GradeClassifier":
        schema = FeatureSchema(tuple(d["schema"]["feature_names"]),
                               tuple(d["schema"]["categories"]))
        return cls(
            schema=schema,
            config=LearnerConfig(**d["config"]),
            base_score=d["base_score"],
            trees=[_Tree.from_dict(t) for t in d["trees"]],
            seed=d["seed"],
            n_rounds_used=d["n_rounds_used"],
            validation_loss=d["validation_loss"],
            constant_validation_loss=d["constant_validation_loss"],
        )


def _stack_rows(rows: Sequence[FeatureRow], n_item_features: int | None = None):
    theta = np.asarray([r.theta for r in rows], dtype=float)
    feats = np.asarray([r.item_features for r in rows], dtype=float)
    if feats.ndim == 1:
        feats = feats.reshape(len(rows), -1)
    if n_item_features is not None and feats.shape[1] != n_item_features:
        raise SchemaMismatchError(
            f"item_features has length {feats.shape[1]}, expected {n_item_features}"
        )
    numeric = np.column_stack([theta, feats]) if feats.size else theta.reshape(-1, 1)
    if not np.isfinite(numeric).all():
        raise ValueError("feature rows contain NaN or infinite values")
    item_ids = [r.item_id for r in rows]
    return numeric, item_ids


def _binary_cross_entropy(y: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, _LOG_EPS, 1.0 - _LOG_EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def _isin_sorted(values: np.ndarray, sorted_codes: np.ndarray) -> np.ndarray:
    if len(sorted_codes) == 0:
        return np.zeros(len(values), dtype=bool)
    pos = np.searchsorted(sorted_codes, values)
    pos = np.minimum(pos, len(sorted_codes) - 1)
    return sorted_codes[pos] == values


def _apply_tree(tree: _Tree, numeric: np.ndarray, cat_codes: np.ndarray,
                n_numeric: int) -> np.ndarray:
    idx = np.zeros(len(numeric), dtype=np.int32)
    while True:
        feat = tree.feature[idx]
        active = np.flatnonzero(feat >= 0)
        if len(active) == 0:
            return idx
        f = feat[active]
        go_left = np.empty(len(active), dtype=bool)
        is_num = f < n_numeric
        num_rows = active[is_num]
        go_left[is_num] = (numeric[num_rows, f[is_num]]
                           <= tree.threshold[idx[num_rows]])
        cat_rows = active[~is_num]
        if len(cat_rows):
            nodes = idx[cat_rows]
            res = np.empty(len(cat_rows), dtype=bool)
            for node in np.unique(nodes):
                sel = nodes == node
                member = _isin_sorted(cat_codes[cat_rows[sel]], tree.cat_codes[node])
                # explicit codes sit on the non-default side
                res[sel] = ~member if tree.default_left[node] else member
            go_left[~is_num] = res
        idx[active] = np.where(go_left, tree.left[idx[active]], tree.right[idx[active]])


# ---- training ----

def _quantile_edges(col: np.ndarray, max_bins: int) -> np.ndarray:
    distinct = np.unique(col)
    if len(distinct) <= max_bins:
        # split between observed values
        return (distinct[:-1] + distinct[1:]) / 2.0 if len(distinct) > 1 else distinct[:0]
    qs = np.quantile(col, np.linspace(0.0, 1.0, max_bins + 1)[1:-1])
    return np.unique(qs)


def _bin_column(col: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.searchsorted(edges, col, side="left").astype(np.uint16)


@dataclass
class _SplitChoice:
    gain: float
    feature: int
    threshold: float = 0.0
    bin_threshold: int = 0
    cat_left: np.ndarray | None = None
    cat_right: np.ndarray | None = None
    default_left: bool = True


def _best_numeric_split(gh: np.ndarray, hh: np.ndarray, ch: np.ndarray,
                        cfg: LearnerConfig, parent_score: float) -> tuple[float, int]:
    """Best (gain, bin threshold) for one node/feature from its histograms."""
    gl = np.cumsum(gh)[:-1]
    hl = np.cumsum(hh)[:-1]
    cl = np.cumsum(ch)[:-1]
    gt, ht, ct = gh.sum(), hh.sum(), ch.sum()
    gr, hr, cr = gt - gl, ht - hl, ct - cl
    ok = ((hl >= cfg.min_child_hessian) & (hr >= cfg.min_child_hessian)
          & (cl >= cfg.min_samples_leaf) & (cr >= cfg.min_samples_leaf))
    if not ok.any():
        return -np.inf, 0
    score = np.where(ok, gl * gl / (hl + cfg.l2) + gr * gr / (hr + cfg.l2), -np.inf)
    t = int(np.argmax(score))
    return float(score[t] - parent_score), t


def _best_categorical_split(gh: np.ndarray, hh: np.ndarray, ch: np.ndarray,
                            cfg: LearnerConfig, parent_score: float):
    """Best prefix split over categories ordered by gradient/hessian ratio.

    Returns (gain, left codes, right codes, default_left); the code lists
    cover only categories present in the node.
    """
    present = np.flatnonzero(ch > 0)
    if len(present) < 2:
        return -np.inf, None, None, True
    ratio = gh[present] / (hh[present] + 1.0)
    order = present[np.argsort(ratio, kind="stable")]
    gl = np.cumsum(gh[order])[:-1]
    hl = np.cumsum(hh[order])[:-1]
    cl = np.cumsum(ch[order])[:-1]
    gt, ht, ct = gh[order].sum(), hh[order].sum(), ch[order].sum()
    gr, hr, cr = gt - gl, ht - hl, ct - cl
    ok = ((hl >= cfg.min_child_hessian) & (hr >= cfg.min_child_hessian)
          & (cl >= cfg.min_samples_leaf) & (cr >= cfg.min_samples_leaf))
    if not ok.any():
        return -np.inf, None, None, True
    score = np.where(ok, gl * gl / (hl + cfg.l2) + gr * gr / (hr + cfg.l2), -np.inf)
    t = int(np.argmax(score))
    left = np.sort(order[:t + 1]).astype(np.int32)
    right = np.sort(order[t + 1:]).astype(np.int32)
    default_left = bool(hl[t] >= hr[t])
    return float(score[t] - parent_score), left, right, default_left


def _grow_tree(binned: np.ndarray, cat: np.ndarray, n_cats: int,
               nbins: np.ndarray, g: np.ndarray, h: np.ndarray,
               cfg: LearnerConfig) -> tuple[_Tree, np.ndarray]:
    """Grow one depth-limited tree; returns the tree and each row's leaf index."""
    n, m = binned.shape
    feature = [np.int32(-1)]
    threshold = [0.0]
    bin_thr = [0]
    left = [np.int32(-1)]
    right = [np.int32(-1)]
    value = [0.0]
    cat_left_sets: list = [None]
    default_left = [True]

    node_of_row = np.zeros(n, dtype=np.int32)
    frontier = [0]
    lam = cfg.l2

    for depth in range(cfg.max_depth):
        if not frontier:
            break
        n_front = len(frontier)
        local = np.full(len(feature), -1, dtype=np.int32)
        local[frontier] = np.arange(n_front)
        loc = local[node_of_row]
        sel = np.flatnonzero(loc >= 0)
        loc_sel = loc[sel]
        g_sel = g[sel]
        h_sel = h[sel]

        # per-feature (node x bin) histograms of gradient, hessian, count
        hists = []
        for j in range(m):
            key = loc_sel.astype(np.int64) * nbins[j] + binned[sel, j]
            size = n_front * int(nbins[j])
            hg = np.bincount(key, weights=g_sel, minlength=size).reshape(n_front, nbins[j])
            hh = np.bincount(key, weights=h_sel, minlength=size).reshape(n_front, nbins[j])
            hc = np.bincount(key, minlength=size).reshape(n_front, nbins[j])
            hists.append((hg, hh, hc))
        ckey = loc_sel.astype(np.int64) * (n_cats + 1) + cat[sel]
        csize = n_front * (n_cats + 1)
        cg = np.bincount(ckey, weights=g_sel, minlength=csize).reshape(n_front, n_cats + 1)
        chh = np.bincount(ckey, weights=h_sel, minlength=csize).reshape(n_front, n_cats + 1)
        cc = np.bincount(ckey, minlength=csize).reshape(n_front, n_cats + 1)

        next_frontier = []
        split_plan = {}
        for pos, node in enumerate(frontier):
            g_tot = float(cg[pos].sum())
            h_tot = float(chh[pos].sum())
            parent_score = g_tot * g_tot / (h_tot + lam)
            best = _SplitChoice(gain=cfg.min_gain, feature=-1)
            for j in range(m):
                hg, hh, hc = hists[j]
                gain, t = _best_numeric_split(hg[pos], hh[pos], hc[pos], cfg, parent_score)
                if gain > best.gain:
                    best = _SplitChoice(gain=gain, feature=j, bin_threshold=t)
            gain, left_set, right_set, dflt = _best_categorical_split(
                cg[pos], chh[pos], cc[pos], cfg, parent_score)
            if gain > best.gain:
                best = _SplitChoice(gain=gain, feature=m, cat_left=left_set,
                                    cat_right=right_set, default_left=dflt)
            if best.feature < 0:
                value[node] = -cfg.learning_rate * g_tot / (h_tot + lam)
                continue
            lid, rid = len(feature), len(feature) + 1
            feature[node] = np.int32(best.feature)
            left[node] = np.int32(lid)
            right[node] = np.int32(rid)
            if best.feature < m:
                bin_thr[node] = best.bin_threshold
            else:
                cat_left_sets[node] = (best.cat_left, best.cat_right)
                default_left[node] = best.default_left
            for _ in range(2):
                feature.append(np.int32(-1))
                threshold.append(0.0)
                bin_thr.append(0)
                left.append(np.int32(-1))
                right.append(np.int32(-1))
                value.append(0.0)
                cat_left_sets.append(None)
                default_left.append(True)
            next_frontier.extend((lid, rid))
            split_plan[node] = best

        for node, best in split_plan.items():
            rows = np.flatnonzero(node_of_row == node)
            if best.feature < m:
                goes_left = binned[rows, best.feature] <= best.bin_threshold
            else:
                goes_left = _isin_sorted(cat[rows], best.cat_left)
            node_of_row[rows] = np.where(goes_left, left[node], right[node])
        frontier = next_frontier

    # any nodes still on the frontier at max depth become leaves
    for node in frontier:
        rows = np.flatnonzero(node_of_row == node)
        g_tot = float(g[rows].sum())
        h_tot = float(h[rows].sum())
        value[node] = -cfg.learning_rate * g_tot / (h_tot + lam)

    tree = _Tree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        value=np.asarray(value, dtype=float),
        cat_codes=[None] * len(feature),
        default_left=np.asarray(default_left, dtype=bool),
    )
    tree._cat_left_sets = cat_left_sets  # filled into cat_codes by the caller
    tree._bin_thr = bin_thr
    return tree, node_of_row


def fit_arrays(theta: np.ndarray, item_features: np.ndarray, item_ids: Sequence[str],
               grades: np.ndarray, config: LearnerConfig | None = None,
               seed: int | np.random.Generator = 0,
               feature_names: Sequence[str] | None = None,
               validation_groups: np.ndarray | None = None) -> GradeClassifier:
    """Columnar training entry point; ``train`` wraps this for FeatureRow input.

    ``validation_groups`` (one label per row, e.g. the session) makes the
    early-stopping split group-wise, so correlated rows never straddle it.
    """
    cfg = config or LearnerConfig()
    if isinstance(seed, np.random.Generator):
        rng, recorded_seed = seed, None
    else:
        rng, recorded_seed = np.random.default_rng(seed), int(seed)

    theta = np.asarray(theta, dtype=float)
    feats = np.asarray(item_features, dtype=float)
    if feats.ndim == 1:
        feats = feats.reshape(len(theta), -1) if feats.size else np.empty((len(theta), 0))
    y = np.asarray(grades, dtype=float)
    n = len(y)
    if len(theta) != n or len(feats) != n or len(item_ids) != n:
        raise ValueError("training columns have mismatched lengths")
    if n < 50:
        raise ValueError(f"need at least 50 training rows, got {n}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("grades must be binary")
    if y.min() == y.max():
        raise ValueError("training grades contain a single class")
    numeric = np.column_stack([theta, feats])
    if not np.isfinite(numeric).all():
        raise ValueError("feature rows contain NaN or infinite values")

    if feature_names is None:
        names = ("theta",) + tuple(f"f{j + 1}" for j in range(feats.shape[1]))
    else:
        if len(feature_names) != feats.shape[1]:
            raise ValueError("feature_names length differs from item feature count")
        names = ("theta",) + tuple(feature_names)
    vocab = tuple(sorted(set(str(i) for i in item_ids)))
    schema = FeatureSchema(feature_names=names, categories=vocab)

    vocab_arr = np.asarray(vocab, dtype=str)
    ids_arr = np.asarray([str(i) for i in item_ids], dtype=str)
    cat = np.searchsorted(vocab_arr, ids_arr).astype(np.int32)
    n_cats = len(vocab)

    # validation split for early stopping: group-wise when groups are given
    # (keeps correlated rows on one side), else stratified by class
    val_mask = np.zeros(n, dtype=bool)
    if validation_groups is not None:
        _, group_codes = np.unique(np.asarray(validation_groups), return_inverse=True)
        groups = np.arange(group_codes.max() + 1)
        rng.shuffle(groups)
        n_val = min(int(round(cfg.validation_fraction * len(groups))), len(groups) - 1)
        val_mask = np.isin(group_codes, groups[:n_val])
        if y[val_mask].size == 0 or y[~val_mask].min() == y[~val_mask].max():
            val_mask[:] = False  # degenerate grouping: fall back to row split
    if not val_mask.any():
        for cls in (0.0, 1.0):
            idx = np.flatnonzero(y == cls)
            rng.shuffle(idx)
            n_val = min(int(round(cfg.validation_fraction * len(idx))), len(idx) - 1)
            val_mask[idx[:n_val]] = True
    tr = np.flatnonzero(~val_mask)
    va = np.flatnonzero(val_mask)

    base_rate = float(np.clip(y[tr].mean(), 1e-6, 1 - 1e-6))
    f0 = float(np.log(base_rate / (1.0 - base_rate)))

    m = numeric.shape[1]
    edges = [_quantile_edges(numeric[tr, j], cfg.max_bins) for j in range(m)]
    binned_tr = np.column_stack([_bin_column(numeric[tr, j], edges[j]) for j in range(m)])
    nbins = np.asarray([len(e) + 1 for e in edges], dtype=np.int64)

    y_tr = y[tr]
    y_va = y[va]
    cat_tr = cat[tr]
    numeric_va = numeric[va]
    cat_va = cat[va]

    raw_tr = np.full(len(tr), f0)
    raw_va = np.full(len(va), f0)
    const_val_loss = _binary_cross_entropy(y_va, sigmoid(raw_va))
    best_loss = const_val_loss
    best_round = -1
    trees: list[_Tree] = []

    for rnd in range(cfg.n_rounds):
        p = sigmoid(raw_tr)
        g = p - y_tr
        h = p * (1.0 - p)
        tree, leaf_of_row = _grow_tree(binned_tr, cat_tr, n_cats, nbins, g, h, cfg)
        # finalize split encodings: real thresholds, and explicit code lists for
        # the non-default side (absent codes, incl. unknown, route by default)
        for node in range(len(tree.feature)):
            f = int(tree.feature[node])
            if f < 0:
                continue
            if f < m:
                tree.threshold[node] = float(edges[f][tree._bin_thr[node]])
            else:
                left_set, right_set = tree._cat_left_sets[node]
                tree.cat_codes[node] = right_set if tree.default_left[node] else left_set
        del tree._cat_left_sets, tree._bin_thr
        raw_tr += tree.value[leaf_of_row]
        raw_va += tree.value[_apply_tree(tree, numeric_va, cat_va, m)]
        trees.append(tree)
        val_loss = _binary_cross_entropy(y_va, sigmoid(raw_va))
        if val_loss < best_loss - 1e-12:
            best_loss = val_loss
            best_round = rnd
        elif rnd - best_round > cfg.early_stopping_patience:
            break

    kept = trees[:best_round + 1]
    return GradeClassifier(
        schema=schema,
        config=cfg,
        base_score=f0,
        trees=kept,
        seed=recorded_seed,
        n_rounds_used=len(kept),
        validation_loss=best_loss,
        constant_validation_loss=const_val_loss,
    )


def train(rows: Sequence[FeatureRow], grades: Sequence[int],
          config: LearnerConfig | None = None,
          seed: int | np.random.Generator = 0,
          feature_names: Sequence[str] | None = None) -> GradeClassifier:
    """Fit the boosted-tree grade classifier on FeatureRow training data."""
    numeric, item_ids = _stack_rows(rows)
    return fit_arrays(numeric[:, 0], numeric[:, 1:], item_ids, np.asarray(grades),
                      config=config, seed=seed, feature_names=feature_names)


def predict(model: GradeClassifier, rows: Sequence[FeatureRow]) -> np.ndarray:
    """Per-row correct-response probabilities; deterministic for a fixed model."""
    numeric, item_ids = _stack_rows(rows, n_item_features=model.schema.n_item_features)
    return model.predict_matrix(numeric, model.encode_items(item_ids))


def predict_curve(model: GradeClassifier, item_features: Sequence[float], item_id: str,
                  grid: ThetaGrid) -> np.ndarray:
    """Predicted correct-response probability at every grid point for one item."""
    curves = predict_curves(model, {str(item_id): np.asarray(item_features, dtype=float)},
                            grid)
    return curves[str(item_id)]


def predict_curves(model: GradeClassifier, features: Mapping[str, np.ndarray],
                   grid: ThetaGrid) -> dict[str, np.ndarray]:
    """Batched predict_curve for many items; one model pass over all rows."""
    item_ids = sorted(features)
    if not item_ids:
        return {}
    k = model.schema.n_item_features
    n_pts = len(grid)
    feats = np.empty((len(item_ids), k))
    for pos, item_id in enumerate(item_ids):
        vec = np.asarray(features[item_id], dtype=float)
        if vec.shape != (k,):
            raise SchemaMismatchError(
                f"item {item_id!r}: item_features has length {vec.size}, expected {k}")
        feats[pos] = vec
    numeric = np.column_stack([
        np.tile(grid.points, len(item_ids)),
        np.repeat(feats, n_pts, axis=0),
    ])
    codes = np.repeat(model.encode_items(item_ids), n_pts)
    probs = model.predict_matrix(numeric, codes)
    return {item_id: probs[pos * n_pts:(pos + 1) * n_pts]
            for pos, item_id in enumerate(item_ids)}
