"""Survey-derived wealth labels: township sub-indexes and the PCA composite."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .io import HouseholdRecord, LoadResult, int_at_least, load_table, parse_id, parse_real, write_table
from .linalg import jacobi_eigh
from .metrics import pearson_r

SUB_INDEX_NAMES = (
    "family_income_level",
    "floor_height",
    "building_base_area",
    "house_structure",
    "wall_decorated_rate",
    "flush_toilet_rate",
    "independent_kitchen_rate",
    "bathroom_rate",
    "tap_water_rate",
    "cooling_facility_rate",
    "broadband_rate",
    "car_ownership_rate",
    "electricity_bill",
)

# household attribute feeding each sub-index, same order as SUB_INDEX_NAMES
_HOUSEHOLD_FIELDS = (
    "income_bracket",
    "floors",
    "base_area_m2",
    "structure_class",
    "wall_decorated",
    "flush_toilet",
    "independent_kitchen",
    "bathroom",
    "tap_water",
    "cooling_facility",
    "broadband",
    "owns_car",
    "electricity_bill_yuan",
)

RATE_COLUMNS = frozenset(n for n in SUB_INDEX_NAMES if n.endswith("_rate"))
INCOME_INDEX = SUB_INDEX_NAMES.index("family_income_level")
N_SUB = len(SUB_INDEX_NAMES)


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class SubIndexVector:
    township_id: str
    values: tuple[float, ...]
    n_households: int

    def __getitem__(self, name: str) -> float:
        return self.values[SUB_INDEX_NAMES.index(name)]


@dataclass(frozen=True)
class CompositeModel:
    means: tuple[float, ...]
    standard_deviations: tuple[float, ...]
    loadings: tuple[float, ...]
    explained_variance_ratio: tuple[float, ...]
    eigenvalues: tuple[float, ...]
    components: tuple[tuple[float, ...], ...]  # row k = k-th eigenvector
    sign_anchor: int = INCOME_INDEX
    n_townships: int = 0

    def to_json(self) -> dict:
        return {
            "columns": list(SUB_INDEX_NAMES),
            "means": list(self.means),
            "sds": list(self.standard_deviations),
            "loadings": list(self.loadings),
            "explained_variance_ratio": list(self.explained_variance_ratio),
            "eigenvalues": list(self.eigenvalues),
            "components": [list(c) for c in self.components],
            "sign_anchor": SUB_INDEX_NAMES[self.sign_anchor],
            "n_townships": self.n_townships,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CompositeModel":
        if list(doc["columns"]) != list(SUB_INDEX_NAMES):
            raise LabelError("model.json columns do not match the sub-index order")
        return cls(
            means=tuple(doc["means"]),
            standard_deviations=tuple(doc["sds"]),
            loadings=tuple(doc["loadings"]),
            explained_variance_ratio=tuple(doc["explained_variance_ratio"]),
            eigenvalues=tuple(doc["eigenvalues"]),
            components=tuple(tuple(c) for c in doc["components"]),
            sign_anchor=SUB_INDEX_NAMES.index(doc["sign_anchor"]),
            n_townships=doc["n_townships"],
        )


@dataclass(frozen=True)
class TownshipLabels:
    township_id: str
    sub_indexes: SubIndexVector
    composite_index: float

    def target(self, name: str) -> float:
        if name == "composite_index":
            return self.composite_index
        return self.sub_indexes[name]


def compute_sub_indexes(records: Iterable[HouseholdRecord]) -> list[SubIndexVector]:
    """Per-township arithmetic means of the 13 household answers, sorted by id."""
    sums: dict[str, list[float]] = defaultdict(lambda: [0.0] * N_SUB)
    counts: dict[str, int] = defaultdict(int)
    for r in records:
        acc = sums[r.township_id]
        for i, f in enumerate(_HOUSEHOLD_FIELDS):
            acc[i] += float(getattr(r, f))
        counts[r.township_id] += 1
    out = []
    for tid in sorted(sums):
        n = counts[tid]
        out.append(SubIndexVector(tid, tuple(s / n for s in sums[tid]), n))
    return out


def _matrix(vectors: Sequence[SubIndexVector]) -> np.ndarray:
    return np.array([v.values for v in vectors], dtype=np.float64).reshape(len(vectors), N_SUB)


def fit_composite(vectors: Sequence[SubIndexVector]) -> CompositeModel:
    """Correlation-matrix PCA of the sub-index table; PC1 becomes the index.

    Rows are sorted by township id first so the fit does not depend on input
    order.  The first eigenvector is oriented so that wealth rises with
    family income.
    """
    vectors = sorted(vectors, key=lambda v: v.township_id)
    n = len(vectors)
    if n < N_SUB + 1:
        raise LabelError(f"need at least {N_SUB + 1} townships to fit the composite, got {n}")
    x = _matrix(vectors)
    means = x.mean(axis=0)
    sds = x.std(axis=0, ddof=1)
    for name, sd in zip(SUB_INDEX_NAMES, sds):
        if not sd > 0.0:
            raise LabelError(f"zero-variance column {name}")
    z = (x - means) / sds
    corr = (z.T @ z) / (n - 1)
    eigvals, eigvecs = jacobi_eigh(corr, tol=1e-10)

    comps = eigvecs.T.copy()
    for k in range(N_SUB):
        comps[k] = _orient(comps[k])
    total = float(np.sum(eigvals))
    return CompositeModel(
        means=tuple(means.tolist()),
        standard_deviations=tuple(sds.tolist()),
        loadings=tuple(comps[0].tolist()),
        explained_variance_ratio=tuple((eigvals / total).tolist()),
        eigenvalues=tuple(eigvals.tolist()),
        components=tuple(tuple(c.tolist()) for c in comps),
        n_townships=n,
    )


def _orient(vec: np.ndarray) -> np.ndarray:
    anchor = vec[INCOME_INDEX]
    if anchor == 0.0:
        nz = np.flatnonzero(vec)
        anchor = vec[nz[0]] if nz.size else 1.0
    return -vec if anchor < 0 else vec


def composite_index(model: CompositeModel, vector: SubIndexVector | Sequence[float]) -> float:
    values = vector.values if isinstance(vector, SubIndexVector) else vector
    return math.fsum(
        w * (x - m) / sd
        for w, x, m, sd in zip(model.loadings, values, model.means, model.standard_deviations)
    )


def score_matrix(model: CompositeModel, x: np.ndarray, component: int = 0) -> np.ndarray:
    z = (np.asarray(x, dtype=np.float64) - np.asarray(model.means)) / np.asarray(model.standard_deviations)
    return z @ np.asarray(model.components[component])


def build_labels(model: CompositeModel, vectors: Sequence[SubIndexVector]) -> list[TownshipLabels]:
    return [TownshipLabels(v.township_id, v, composite_index(model, v)) for v in vectors]


def indicator_correlations(
    model: CompositeModel, vectors: Sequence[SubIndexVector]
) -> list[float | None]:
    """Pearson r of each raw sub-index column with the composite index.

    Zero-variance columns yield ``None`` rather than 0.
    """
    if len(vectors) < 3:
        raise LabelError("indicator correlations need at least 3 townships")
    x = _matrix(vectors)
    scores = [composite_index(model, v) for v in vectors]
    return [pearson_r(x[:, j], scores) for j in range(N_SUB)]


# ---------------------------------------------------------------------------
# labels.csv / model.json

LABEL_COLUMNS = ("township_id", "n_households", *SUB_INDEX_NAMES, "composite_index")


def write_labels(path: str | Path, labels: Iterable[TownshipLabels]) -> None:
    write_table(
        path,
        LABEL_COLUMNS,
        (
            [lab.township_id, lab.sub_indexes.n_households, *lab.sub_indexes.values, lab.composite_index]
            for lab in labels
        ),
    )


def load_labels(path: str | Path) -> LoadResult[TownshipLabels]:
    schema = {"township_id": parse_id, "n_households": int_at_least(1)}
    schema.update({c: parse_real for c in SUB_INDEX_NAMES})
    schema["composite_index"] = parse_real

    def build(v: dict) -> TownshipLabels:
        vec = SubIndexVector(v["township_id"], tuple(v[c] for c in SUB_INDEX_NAMES), v["n_households"])
        return TownshipLabels(v["township_id"], vec, v["composite_index"])

    return load_table(path, schema, build, "township_id")


def write_model(path: str | Path, model: CompositeModel, extra: dict | None = None) -> None:
    doc = model.to_json()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def correlation_report(model: CompositeModel, vectors: Sequence[SubIndexVector]) -> dict:
    """Loadings and indicator-index correlations, labelled distinctly."""
    corrs = indicator_correlations(model, vectors)
    return {
        name: {"loading": model.loadings[i], "correlation_with_index": corrs[i]}
        for i, name in enumerate(SUB_INDEX_NAMES)
    }


__all__ = [
    "SUB_INDEX_NAMES",
    "SubIndexVector",
    "CompositeModel",
    "TownshipLabels",
    "LabelError",
    "compute_sub_indexes",
    "fit_composite",
    "composite_index",
    "score_matrix",
    "build_labels",
    "indicator_correlations",
    "correlation_report",
    "write_labels",
    "load_labels",
    "write_model",
]
