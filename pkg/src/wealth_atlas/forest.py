"""Random forest regression built from scratch.

Trees are CART regressors grown to purity (``min_leaf=1`` by default) on
bootstrap samples, drawing ``n_feature`` candidate features per node.  The
split minimizing the summed child SSE wins; thresholds are midpoints between
consecutive distinct values and ``x <= threshold`` goes left.

Randomness is keyed, never sequential, so results cannot depend on how work
is scheduled:

* tree ``t`` of a forest uses ``tree_seed = derive_seed(master_seed, t)`` for
  its bootstrap draw (PCG64) and as the key of its root node;
* a node with key ``k`` has children keyed ``mix64(k ^ BRANCH[0])`` (left)
  and ``mix64(k ^ BRANCH[1])`` (right);
* a node's features come from a partial Fisher-Yates shuffle driven by the
  splitmix64 stream ``mix64(k + i * GOLDEN)``, ``i = 1, 2, ...``.

Candidate splits whose SSE is within a relative ``1e-9`` of the node's best
are ties, resolved toward the lower feature index and then the lower
threshold.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .metrics import rmse

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
BRANCH = (0x632BE59BD9B4E019, 0x85157AF5B5A1B3C7)
TIE_RTOL = 1e-9
MODEL_FORMAT = "wealth-atlas-forest"
MODEL_VERSION = 1

_U27 = np.uint64(27)
_U30 = np.uint64(30)
_U31 = np.uint64(31)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(GOLDEN)
_BRANCH_L = np.uint64(BRANCH[0])
_BRANCH_R = np.uint64(BRANCH[1])


class ForestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Keyed random streams (pure-Python reference versions)


def mix64(z: int) -> int:
    """splitmix64 output function."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def child_key(key: int, branch: int) -> int:
    return mix64(key ^ BRANCH[branch])


def draw_features(key: int, n_features: int, n_feature: int) -> list[int]:
    """The ``n_feature`` distinct feature indexes drawn at the node keyed ``key``."""
    perm = list(range(n_features))
    for i in range(n_feature):
        s = mix64(key + (i + 1) * GOLDEN)
        j = i + s % (n_features - i)
        perm[i], perm[j] = perm[j], perm[i]
    return sorted(perm[:n_feature])


def derive_seed(master_seed: int, index: int) -> int:
    """Independent 64-bit seed for stream ``index`` under ``master_seed``."""
    if master_seed < 0 or index < 0:
        raise ForestError("seeds must be non-negative integers")
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# Compiled kernels


@njit(cache=True, nogil=True)
def _mix64(z):
    z = (z ^ (z >> _U30)) * _M1
    z = (z ^ (z >> _U27)) * _M2
    return z ^ (z >> _U31)


@njit(cache=True, nogil=True)
def _draw(key, p, k, perm):
    for i in range(p):
        perm[i] = i
    for i in range(k):
        s = _mix64(key + np.uint64(i + 1) * _GOLDEN)
        j = i + np.int64(s % np.uint64(p - i))
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    return np.sort(perm[:k])


@njit(cache=True, nogil=True)
def _grow(X, y, n_feature, min_leaf, root_key, feat, thr, left, right, value, count):
    n, p = X.shape
    rows = np.arange(n)
    buf = np.empty(n, dtype=np.int64)
    perm = np.empty(p, dtype=np.int64)
    cand_obj = np.empty(n_feature * n, dtype=np.float64)
    cand_thr = np.empty(n_feature * n, dtype=np.float64)
    cand_feat = np.empty(n_feature * n, dtype=np.int64)

    cap = 2 * n + 2
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_parent = np.empty(cap, dtype=np.int64)
    st_side = np.empty(cap, dtype=np.int64)
    st_key = np.empty(cap, dtype=np.uint64)
    top = 0
    st_start[0] = 0
    st_end[0] = n
    st_parent[0] = -1
    st_side[0] = 0
    st_key[0] = root_key
    top = 1
    n_nodes = 0

    while top > 0:
        top -= 1
        start = st_start[top]
        end = st_end[top]
        parent = st_parent[top]
        side = st_side[top]
        key = st_key[top]
        node = n_nodes
        n_nodes += 1
        if parent >= 0:
            if side == 0:
                left[parent] = node
            else:
                right[parent] = node
        m = end - start
        count[node] = m
        feat[node] = -1
        thr[node] = 0.0
        left[node] = -1
        right[node] = -1

        ymin = y[rows[start]]
        ymax = ymin
        total = 0.0
        for i in range(start, end):
            v = y[rows[i]]
            total += v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v

        best = -1
        if m >= 2 * min_leaf and ymax > ymin:
            mean = total / m
            sse_node = 0.0
            for i in range(start, end):
                d = y[rows[i]] - mean
                sse_node += d * d
            drawn = _draw(key, p, n_feature, perm)
            nc = 0
            node_rows = rows[start:end]
            for f in drawn:
                xs = X[node_rows, f]
                order = np.argsort(xs, kind="mergesort")
                sx = xs[order]
                sl = 0.0
                ql = 0.0
                qt = 0.0
                st = 0.0
                for i in range(m):
                    d = y[node_rows[order[i]]] - mean
                    st += d
                    qt += d * d
                for i in range(m - 1):
                    d = y[node_rows[order[i]]] - mean
                    sl += d
                    ql += d * d
                    nl = i + 1
                    nr = m - nl
                    if nl < min_leaf or nr < min_leaf:
                        continue
                    if not sx[i] < sx[i + 1]:
                        continue
                    sr = st - sl
                    obj = (ql - sl * sl / nl) + ((qt - ql) - sr * sr / nr)
                    t = (sx[i] + sx[i + 1]) / 2.0
                    if t >= sx[i + 1]:
                        t = sx[i]
                    cand_obj[nc] = obj
                    cand_thr[nc] = t
                    cand_feat[nc] = f
                    nc += 1
            if nc > 0:
                lo = cand_obj[0]
                for c in range(1, nc):
                    if cand_obj[c] < lo:
                        lo = cand_obj[c]
                limit = lo + TIE_RTOL * sse_node
                for c in range(nc):
                    if cand_obj[c] <= limit:
                        best = c
                        break

        if best < 0:
            leaf_rows = np.sort(rows[start:end])
            s = 0.0
            for r in leaf_rows:
                s += y[r]
            value[node] = s / m
            continue

        f = cand_feat[best]
        t = cand_thr[best]
        feat[node] = f
        thr[node] = t
        value[node] = total / m
        nl = 0
        for i in range(start, end):
            r = rows[i]
            if X[r, f] <= t:
                buf[nl] = r
                nl += 1
        k = nl
        for i in range(start, end):
            r = rows[i]
            if not X[r, f] <= t:
                buf[k] = r
                k += 1
        for i in range(m):
            rows[start + i] = buf[i]
        mid = start + nl
        # right pushed first so the left child is numbered next (preorder)
        st_start[top] = mid
        st_end[top] = end
        st_parent[top] = node
        st_side[top] = 1
        st_key[top] = _mix64(key ^ _BRANCH_R)
        top += 1
        st_start[top] = start
        st_end[top] = mid
        st_parent[top] = node
        st_side[top] = 0
        st_key[top] = _mix64(key ^ _BRANCH_L)
        top += 1
    return n_nodes


@njit(cache=True, nogil=True)
def _apply(feat, thr, left, right, X):
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while feat[node] >= 0:
            if X[i, feat[node]] <= thr[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@njit(cache=True, nogil=True)
def _predict_forest(offsets, feat, thr, left, right, value, X):
    n = X.shape[0]
    n_tree = offsets.shape[0] - 1
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        s = 0.0
        for t in range(n_tree):
            base = offsets[t]
            node = 0
            while feat[base + node] >= 0:
                if X[i, feat[base + node]] <= thr[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            s += value[base + node]
        out[i] = s / n_tree
    return out


# ---------------------------------------------------------------------------
# Trees


@dataclass
class RegressionTree:
    """Flattened preorder tree; leaves have ``feature == -1``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    training_seed: int

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _apply(self.feature, self.threshold, self.left, self.right, X)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_json(self) -> dict:
        return {
            "seed": self.training_seed,
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_samples": self.n_samples.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RegressionTree":
        return cls(
            np.asarray(doc["feature"], dtype=np.int64),
            np.asarray(doc["threshold"], dtype=np.float64),
            np.asarray(doc["left"], dtype=np.int64),
            np.asarray(doc["right"], dtype=np.int64),
            np.asarray(doc["value"], dtype=np.float64),
            np.asarray(doc["n_samples"], dtype=np.int64),
            int(doc["seed"]),
        )

    def same_as(self, other: "RegressionTree") -> bool:
        return all(
            np.array_equal(getattr(self, a), getattr(other, a))
            for a in ("feature", "threshold", "left", "right", "value", "n_samples")
        )


def fit_tree(
    X: np.ndarray, y: np.ndarray, n_feature: int = 1, seed: int = 0, min_leaf: int = 1
) -> RegressionTree:
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ForestError("X must be (n, p) and y (n,)")
    n, p = X.shape
    if n == 0:
        raise ForestError("empty training set")
    if p == 0:
        raise ForestError("no features")
    if not 1 <= n_feature <= p:
        raise ForestError(f"n_feature must be in 1..{p}")
    if min_leaf < 1:
        raise ForestError("min_leaf must be >= 1")
    if np.isnan(X).any():
        raise ForestError("X has missing values; impute before fitting")
    cap = 2 * n
    feat = np.empty(cap, dtype=np.int64)
    thr = np.empty(cap, dtype=np.float64)
    left = np.empty(cap, dtype=np.int64)
    right = np.empty(cap, dtype=np.int64)
    value = np.empty(cap, dtype=np.float64)
    count = np.empty(cap, dtype=np.int64)
    k = _grow(X, y, n_feature, min_leaf, np.uint64(seed & MASK64), feat, thr, left, right, value, count)
    return RegressionTree(
        feat[:k].copy(), thr[:k].copy(), left[:k].copy(), right[:k].copy(),
        value[:k].copy(), count[:k].copy(), int(seed),
    )


# ---------------------------------------------------------------------------
# Forests


@dataclass(frozen=True)
class ForestConfig:
    n_tree: int = 100
    n_feature: int = 1
    min_leaf: int = 1
    master_seed: int = 0
    bootstrap: bool = True

    def validate(self) -> None:
        if self.n_tree < 1:
            raise ForestError("n_tree must be >= 1")
        if self.n_feature < 1:
            raise ForestError("n_feature must be >= 1")
        if self.min_leaf < 1:
            raise ForestError("min_leaf must be >= 1")
        if self.master_seed < 0:
            raise ForestError("master_seed must be non-negative")

    def to_json(self) -> dict:
        return {
            "n_tree": self.n_tree,
            "n_feature": self.n_feature,
            "min_leaf": self.min_leaf,
            "master_seed": self.master_seed,
            "bootstrap": self.bootstrap,
        }


@dataclass
class ForestModel:
    trees: list[RegressionTree]
    config: ForestConfig
    imputation_medians: np.ndarray
    feature_order: tuple[str, ...]
    target_name: str = "composite_index"
    _flat: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def n_tree(self) -> int:
        return len(self.trees)

    @property
    def n_feature(self) -> int:
        return self.config.n_feature

    @property
    def master_seed(self) -> int:
        return self.config.master_seed

    def _flattened(self) -> tuple:
        if self._flat is None:
            sizes = [t.n_nodes for t in self.trees]
            offsets = np.zeros(len(sizes) + 1, dtype=np.int64)
            offsets[1:] = np.cumsum(sizes)
            self._flat = (
                offsets,
                np.concatenate([t.feature for t in self.trees]),
                np.concatenate([t.threshold for t in self.trees]),
                np.concatenate([t.left for t in self.trees]),
                np.concatenate([t.right for t in self.trees]),
                np.concatenate([t.value for t in self.trees]),
            )
        return self._flat

    def impute(self, X: np.ndarray) -> np.ndarray:
        X = np.array(X, dtype=np.float64, copy=True).reshape(-1, len(self.feature_order))
        miss = np.isnan(X)
        if miss.any():
            X[miss] = np.broadcast_to(self.imputation_medians, X.shape)[miss]
        return X

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        Xi = np.ascontiguousarray(self.impute(X))
        return _predict_forest(*self._flattened(), Xi)

    def to_json(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "config": self.config.to_json(),
            "feature_order": list(self.feature_order),
            "imputation_medians": self.imputation_medians.tolist(),
            "target_name": self.target_name,
            "trees": [t.to_json() for t in self.trees],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ForestModel":
        if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
            raise ForestError("not a version-1 forest model file")
        return cls(
            [RegressionTree.from_json(t) for t in doc["trees"]],
            ForestConfig(**doc["config"]),
            np.asarray(doc["imputation_medians"], dtype=np.float64),
            tuple(doc["feature_order"]),
            doc["target_name"],
        )


def imputation_medians(X: np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(X.shape[1])
    for j in range(X.shape[1]):
        col = X[:, j]
        obs = col[~np.isnan(col)]
        if obs.size == 0:
            name = names[j] if names is not None else f"#{j}"
            raise ForestError(f"feature column {name} has no observed values")
        out[j] = np.median(obs)
    return out


def fit_forest(
    X: np.ndarray,
    y: np.ndarray,
    config: ForestConfig = ForestConfig(),
    feature_order: Sequence[str] | None = None,
    target_name: str = "composite_index",
    threads: int = 1,
) -> ForestModel:
    """Fit ``config.n_tree`` bootstrapped trees.

    ``threads`` only changes wall time: every tree's randomness is keyed by
    its index, so the model is identical for any thread count.
    """
    config.validate()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ForestError("X must be (n, p) and y (n,)")
    n, p = X.shape
    if n < 2:
        raise ForestError("need at least 2 training rows")
    if not np.isfinite(y).all():
        raise ForestError("targets must be finite")
    names = tuple(feature_order) if feature_order is not None else tuple(f"x{j}" for j in range(p))
    if len(names) != p:
        raise ForestError("feature_order length does not match X")
    n_feature = min(config.n_feature, p)
    medians = imputation_medians(X, names)
    Xi = X.copy()
    miss = np.isnan(Xi)
    Xi[miss] = np.broadcast_to(medians, Xi.shape)[miss]
    Xi = np.ascontiguousarray(Xi)

    def one(t: int) -> RegressionTree:
        seed = derive_seed(config.master_seed, t)
        if config.bootstrap:
            rng = np.random.Generator(np.random.PCG64(seed))
            rows = np.sort(rng.integers(0, n, n))
            return fit_tree(Xi[rows], y[rows], n_feature, seed, config.min_leaf)
        return fit_tree(Xi, y, n_feature, seed, config.min_leaf)

    if threads > 1 and config.n_tree > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trees = list(pool.map(one, range(config.n_tree)))
    else:
        trees = [one(t) for t in range(config.n_tree)]
    return ForestModel(trees, config, medians, names, target_name)


def predict(model: ForestModel, x: Sequence[float | None]) -> float:
    """Mean tree output for one feature row; ``None``/NaN cells are imputed."""
    row = np.array([math.nan if v is None else v for v in x], dtype=np.float64)
    return float(model.predict_matrix(row[None, :])[0])


def save_model(path: str | Path, model: ForestModel, extra: dict | None = None) -> None:
    doc = model.to_json()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> ForestModel:
    return ForestModel.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Diagnostics


@dataclass(frozen=True)
class Importance:
    mean: np.ndarray
    std: np.ndarray
    baseline: float


def permutation_importance(
    model: ForestModel,
    X: np.ndarray,
    y: np.ndarray,
    metric: Callable[[np.ndarray, np.ndarray], float] = rmse,
    seed: int = 0,
    n_repeats: int = 10,
    greater_is_better: bool = False,
) -> Importance:
    """Metric degradation when each column is shuffled, over ``n_repeats``.

    Degradation is signed so that a useful feature scores positive for both
    losses and scores.  ``std`` is the spread over repeats, the noise bound
    for reading an importance as zero.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0:
        raise ForestError("evaluation set is empty")
    base = metric(model.predict_matrix(X), y)
    sign = -1.0 if greater_is_better else 1.0
    means = np.zeros(X.shape[1])
    stds = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        deltas = []
        for r in range(n_repeats):
            rng = np.random.Generator(np.random.PCG64(derive_seed(seed, j * n_repeats + r)))
            Xp = X.copy()
            Xp[:, j] = Xp[rng.permutation(X.shape[0]), j]
            deltas.append(sign * (metric(model.predict_matrix(Xp), y) - base))
        means[j] = float(np.mean(deltas))
        stds[j] = float(np.std(deltas))
    return Importance(means, stds, base)
