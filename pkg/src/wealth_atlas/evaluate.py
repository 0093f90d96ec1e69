"""K-fold cross-validation of the forest against township labels."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .features import FEATURE_NAMES, TownshipFeatures, feature_matrix
from .forest import ForestConfig, fit_forest
from .labels import SUB_INDEX_NAMES, TownshipLabels
from .metrics import pearson_r, rmse

log = logging.getLogger(__name__)

TARGETS = ("composite_index", *SUB_INDEX_NAMES)


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: dict[str, int]
    k: int
    seed: int

    def members(self, fold: int) -> list[str]:
        return sorted(t for t, f in self.fold_of.items() if f == fold)

    def sizes(self) -> list[int]:
        out = [0] * self.k
        for f in self.fold_of.values():
            out[f] += 1
        return out


def kfold_split(ids: Sequence[str], k: int = 10, seed: int = 0) -> FoldAssignment:
    """Seeded shuffle of the sorted ids, then round-robin into ``k`` folds."""
    if k < 2:
        raise EvalError("k must be at least 2")
    uniq = sorted(set(ids))
    if len(uniq) != len(ids):
        raise EvalError("duplicate township ids")
    if len(uniq) < k:
        raise EvalError(f"{len(uniq)} ids cannot fill {k} folds")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(len(uniq))
    return FoldAssignment({uniq[i]: pos % k for pos, i in enumerate(perm.tolist())}, k, seed)


def fold_seed(master_seed: int, cv_seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([master_seed, cv_seed, fold]).generate_state(1, np.uint64)[0])


@dataclass
class FoldResult:
    fold: int
    n: int
    r: float | None
    rmse: float


@dataclass
class EvalReport:
    target_name: str
    per_fold: list[FoldResult]
    mean_r: float | None
    mean_rmse: float
    pooled_r: float | None
    pooled_rmse: float
    n: int
    config: dict = field(default_factory=dict)
    predictions: dict[str, float] = field(default_factory=dict)

    def to_json(self, with_predictions: bool = False) -> dict:
        doc = {
            "target_name": self.target_name,
            "per_fold": [vars(f) for f in self.per_fold],
            "mean_r": self.mean_r,
            "mean_rmse": self.mean_rmse,
            "pooled_r": self.pooled_r,
            "pooled_rmse": self.pooled_rmse,
            "n": self.n,
            "config": self.config,
        }
        if with_predictions:
            doc["out_of_fold"] = dict(sorted(self.predictions.items()))
        return doc


def labeled_rows(
    features: Sequence[TownshipFeatures], labels: Sequence[TownshipLabels]
) -> tuple[list[TownshipFeatures], list[TownshipLabels]]:
    """Townships with both features and labels, sorted by id."""
    by_id = {f.township_id: f for f in features}
    paired = sorted((lab.township_id, lab) for lab in labels if lab.township_id in by_id)
    return [by_id[t] for t, _ in paired], [lab for _, lab in paired]


def cross_validate(
    features: Sequence[TownshipFeatures],
    labels: Sequence[TownshipLabels],
    target: str = "composite_index",
    config: ForestConfig = ForestConfig(),
    k: int = 10,
    seed: int = 0,
    order: Sequence[str] = FEATURE_NAMES,
    threads: int = 1,
) -> EvalReport:
    """Out-of-fold evaluation; each fold's forest is seeded from (seeds, fold)."""
    if target not in TARGETS:
        raise EvalError(f"unknown target {target!r}")
    feats, labs = labeled_rows(features, labels)
    if len(labs) < k:
        raise EvalError(f"need at least {k} labeled townships with features, got {len(labs)}")
    ids = [lab.township_id for lab in labs]
    X = feature_matrix(feats, order)
    y = np.array([lab.target(target) for lab in labs], dtype=np.float64)
    folds = kfold_split(ids, k, seed)
    fold_idx = np.array([folds.fold_of[t] for t in ids])

    oof = np.full(len(ids), np.nan)
    per_fold = []
    for f in range(k):
        test = fold_idx == f
        cfg = ForestConfig(
            config.n_tree, config.n_feature, config.min_leaf,
            fold_seed(config.master_seed, seed, f), config.bootstrap,
        )
        model = fit_forest(X[~test], y[~test], cfg, order, target, threads=threads)
        pred = model.predict_matrix(X[test])
        oof[test] = pred
        r = pearson_r(pred, y[test]) if test.sum() >= 2 else None
        if r is None:
            log.warning("%s fold %d: correlation undefined (zero variance); excluded from mean_r", target, f)
        per_fold.append(FoldResult(f, int(test.sum()), r, rmse(pred, y[test])))

    rs = [fr.r for fr in per_fold if fr.r is not None]
    return EvalReport(
        target_name=target,
        per_fold=per_fold,
        mean_r=float(np.mean(rs)) if rs else None,
        mean_rmse=float(np.mean([fr.rmse for fr in per_fold])),
        pooled_r=pearson_r(oof, y),
        pooled_rmse=rmse(oof, y),
        n=len(ids),
        config={"forest": config.to_json(), "k": k, "seed": seed, "feature_order": list(order)},
        predictions=dict(zip(ids, oof.tolist())),
    )


def evaluate_targets(
    features: Sequence[TownshipFeatures],
    labels: Sequence[TownshipLabels],
    targets: Sequence[str] = TARGETS,
    **kwargs,
) -> dict[str, EvalReport]:
    return {t: cross_validate(features, labels, t, **kwargs) for t in targets}


def format_table(reports: Mapping[str, EvalReport]) -> str:
    def fmt(v: float | None) -> str:
        return "   n/a" if v is None else f"{v:6.3f}"

    lines = [f"{'target':<26} {'mean_r':>6} {'rmse':>8} {'pooled_r':>8}"]
    for name, rep in reports.items():
        lines.append(f"{name:<26} {fmt(rep.mean_r)} {rep.mean_rmse:8.3f} {fmt(rep.pooled_r):>8}")
    return "\n".join(lines)
