"""``wealth-atlas`` command line: one JSON config, one output directory.

Each stage reads its inputs from the config and the artifacts of earlier
stages from the output directory, so ``all`` is exactly the stages run in
order.  ``manifest.json`` records the config echo, the derived seeds and a
sha256 of every artifact present.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import atlas, evaluate, features, forest, io, labels, spatial, synth

log = logging.getLogger("wealth_atlas")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

INPUT_KEYS = ("households", "house_views", "images", "footprints", "townships", "zones", "nightlight", "lines")

STAGE_OUTPUTS = {
    "labels": ("labels.csv", "model.json", "correlations.json", "rejections_labels.json"),
    "features": ("house_stats.csv", "conflicts.log", "features.csv", "rejections_features.json"),
    "evaluate": ("eval_report.json",),
    "train": ("forest.json",),
    "predict": ("atlas.geojson", "atlas.csv", "report.json"),
}
STAGES = tuple(STAGE_OUTPUTS)
STAGE_INPUTS = {
    "labels": ("households",),
    "features": ("house_views", "images", "footprints", "townships"),
    "evaluate": (),
    "train": (),
    "predict": ("townships",),
}


class ConfigError(ValueError):
    """Bad command line or config; exit status 1."""


class DataError(ValueError):
    """Input data failed validation; exit status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    inputs: dict[str, Path]
    raw_inputs: dict[str, str]
    out_dir: Path
    forest: forest.ForestConfig = field(default_factory=forest.ForestConfig)
    cv_k: int = 10
    cv_seed: int = 0
    include_nightlight: bool = False
    sides: dict[str, list[str]] = field(default_factory=dict)
    targets: tuple[str, ...] = evaluate.TARGETS
    bandwidth: float | None = None
    threads: int = 1
    synth: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.cv_k < 2:
            raise ConfigError("cv.k must be >= 2")
        try:
            self.forest.validate()
        except forest.ForestError as exc:
            raise ConfigError(f"forest: {exc}") from None
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        bad = [t for t in self.targets if t not in evaluate.TARGETS]
        if bad:
            raise ConfigError(f"unknown eval targets {bad}")
        if "composite_index" not in self.targets:
            raise ConfigError("eval targets must include composite_index")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ConfigError("bandwidth must be > 0")

    def require(self, stage: str) -> None:
        missing = [k for k in STAGE_INPUTS[stage] if k not in self.inputs]
        if stage == "features" and self.include_nightlight and "nightlight" not in self.inputs:
            missing.append("nightlight")
        if missing:
            raise ConfigError(f"{stage}: config lacks input paths {missing}")

    def echo(self) -> dict:
        """Everything that determines the artifacts; threads and out_dir do not."""
        return {
            "inputs": dict(sorted(self.raw_inputs.items())),
            "forest": self.forest.to_json(),
            "cv": {"k": self.cv_k, "seed": self.cv_seed},
            "features": {"include_nightlight": self.include_nightlight},
            "sides": self.sides,
            "targets": list(self.targets),
            "bandwidth": self.bandwidth,
        }

    def seeds(self) -> dict:
        return {
            "forest_master_seed": self.forest.master_seed,
            "cv_seed": self.cv_seed,
            "fold_forest_seeds": [
                evaluate.fold_seed(self.forest.master_seed, self.cv_seed, f) for f in range(self.cv_k)
            ],
        }


def _int(doc: dict, key: str, default: int) -> int:
    v = doc.get(key, default)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{key} must be an integer")
    return v


def load_config(
    path: str | None, seed: int | None = None, threads: int | None = None, out: str | None = None
) -> RunConfig:
    """Parse the JSON config; paths are relative to the config file; flags win."""
    doc: dict = {}
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {p} not found") from None
        except ValueError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        base = p.resolve().parent
    raw_inputs = doc.get("inputs", {})
    if not isinstance(raw_inputs, dict):
        raise ConfigError("inputs must be an object")
    unknown = sorted(set(raw_inputs) - set(INPUT_KEYS))
    if unknown:
        raise ConfigError(f"unknown inputs {unknown}")
    for k, v in raw_inputs.items():
        if not isinstance(v, str) or not v:
            raise ConfigError(f"inputs.{k} must be a non-empty path")
    fdoc = doc.get("forest", {})
    cvdoc = doc.get("cv", {})
    try:
        fc = forest.ForestConfig(
            n_tree=_int(fdoc, "n_tree", 100),
            n_feature=_int(fdoc, "n_feature", 1),
            min_leaf=_int(fdoc, "min_leaf", 1),
            master_seed=_int(fdoc, "master_seed", 0),
            bootstrap=bool(fdoc.get("bootstrap", True)),
        )
    except AttributeError:
        raise ConfigError("forest must be an object") from None
    cv_seed = _int(cvdoc, "seed", 0)
    if seed is not None:
        fc = replace(fc, master_seed=seed)
        cv_seed = seed
    out_dir = Path(out) if out is not None else base / doc.get("out_dir", "out")
    cfg = RunConfig(
        inputs={k: base / v for k, v in raw_inputs.items()},
        raw_inputs=dict(raw_inputs),
        out_dir=out_dir,
        forest=fc,
        cv_k=_int(cvdoc, "k", 10),
        cv_seed=cv_seed,
        include_nightlight=bool(doc.get("features", {}).get("include_nightlight", False)),
        sides={k: list(v) for k, v in doc.get("sides", {}).items()},
        targets=tuple(doc.get("targets", evaluate.TARGETS)),
        bandwidth=doc.get("bandwidth"),
        threads=threads if threads is not None else _int(doc, "threads", 1),
        synth=dict(doc.get("synth", {})),
    )
    if seed is not None:
        cfg.synth["seed"] = seed
    return cfg


# ---------------------------------------------------------------------------
# Helpers


def _checked(result: io.LoadResult, what: str) -> io.LoadResult:
    if result.header_error:
        raise DataError(f"{what}: {result.header_error}")
    if result.rejections:
        log.warning("%s: %d of %d rows rejected", what, len(result.rejections), result.n_rows)
    return result


def _load(loader: Callable, path: Path, what: str) -> io.LoadResult:
    if not path.is_file():
        raise DataError(f"{what}: input file {path} not found")
    return _checked(loader(path), what)


def _rejections(**results: io.LoadResult) -> dict:
    return {
        name: {"n_rows": r.n_rows, "n_accepted": len(r.records), "rejections": [x.as_dict() for x in r.rejections]}
        for name, r in results.items()
    }


def _dump(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n", encoding="utf-8")


def _artifact(cfg: RunConfig, name: str) -> Path:
    p = cfg.out_dir / name
    if not p.is_file():
        raise DataError(f"required artifact {name} missing from {cfg.out_dir}; run the earlier stage first")
    return p


def _read_labels(cfg: RunConfig) -> list[labels.TownshipLabels]:
    return _checked(labels.load_labels(_artifact(cfg, "labels.csv")), "labels.csv").records


def _read_features(cfg: RunConfig) -> tuple[list[features.TownshipFeatures], tuple[str, ...]]:
    res, has_night = features.load_features(_artifact(cfg, "features.csv"))
    _checked(res, "features.csv")
    if cfg.include_nightlight and not has_night:
        raise DataError("features.csv lacks mean_nightlight but include_nightlight is set")
    return res.records, features.feature_order(cfg.include_nightlight)


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(cfg: RunConfig) -> None:
    names = [n for outs in STAGE_OUTPUTS.values() for n in outs]
    doc = {
        "config": cfg.echo(),
        "seeds": cfg.seeds(),
        "inputs_sha256": {k: sha256(p) for k, p in sorted(cfg.inputs.items()) if p.is_file()},
        "artifacts_sha256": {n: sha256(cfg.out_dir / n) for n in sorted(names) if (cfg.out_dir / n).is_file()},
    }
    _dump(cfg.out_dir / "manifest.json", doc)


# ---------------------------------------------------------------------------
# Stages


def stage_labels(cfg: RunConfig) -> None:
    hh = _load(io.load_households, cfg.inputs["households"], "households")
    vectors = labels.compute_sub_indexes(hh.records)
    model = labels.fit_composite(vectors)
    labs = labels.build_labels(model, vectors)
    out = cfg.out_dir
    labels.write_labels(out / "labels.csv", labs)
    labels.write_model(out / "model.json", model, {"run": cfg.echo()})
    _dump(out / "correlations.json", {"run": cfg.echo(), "sub_indexes": labels.correlation_report(model, vectors)})
    _dump(out / "rejections_labels.json", _rejections(households=hh))


def stage_features(cfg: RunConfig) -> None:
    views = _load(io.load_house_views, cfg.inputs["house_views"], "house_views")
    images = _load(io.load_images, cfg.inputs["images"], "images")
    prints = _load(io.load_footprints, cfg.inputs["footprints"], "footprints")
    bounds = _load(io.load_boundaries, cfg.inputs["townships"], "townships")
    results = {"house_views": views, "images": images, "footprints": prints, "townships": bounds}
    night = None
    if cfg.include_nightlight:
        nl = _load(io.load_nightlight, cfg.inputs["nightlight"], "nightlight")
        results["nightlight"] = nl
        night = dict(nl.records)
    if not bounds.records:
        raise DataError("townships: no valid boundaries")

    index = spatial.build_index(bounds.records)
    assignment = spatial.assign_footprints(index, prints.records)
    stats = spatial.township_house_stats(assignment, prints.records, index.township_ids)
    rows, dropped = features.build_feature_matrix(
        stats,
        features.aggregate_house_features(views.records),
        features.aggregate_image_features(images.records),
        night,
        cfg.include_nightlight,
    )
    out = cfg.out_dir
    spatial.write_house_stats(out / "house_stats.csv", stats)
    spatial.write_conflicts(out / "conflicts.log", assignment)
    features.write_features(out / "features.csv", rows, cfg.include_nightlight)
    rej = _rejections(**results)
    rej["unassigned_footprints"] = assignment.unassigned
    rej["dropped_townships"] = dropped
    _dump(out / "rejections_features.json", rej)


def stage_evaluate(cfg: RunConfig) -> None:
    labs = _read_labels(cfg)
    feats, order = _read_features(cfg)
    reports = {
        t: evaluate.cross_validate(feats, labs, t, cfg.forest, cfg.cv_k, cfg.cv_seed, order, cfg.threads)
        for t in cfg.targets
    }
    doc = {
        "run": cfg.echo(),
        "seeds": cfg.seeds(),
        "targets": {t: r.to_json(with_predictions=(t == "composite_index")) for t, r in reports.items()},
    }
    atlas.dump_json(cfg.out_dir / "eval_report.json", doc)
    print(evaluate.format_table(reports))


def stage_train(cfg: RunConfig) -> None:
    labs = _read_labels(cfg)
    feats, order = _read_features(cfg)
    f, lab = evaluate.labeled_rows(feats, labs)
    if not lab:
        raise DataError("no labeled township has features")
    X = features.feature_matrix(f, order)
    y = np.array([l.composite_index for l in lab], dtype=np.float64)
    model = forest.fit_forest(X, y, cfg.forest, order, "composite_index", threads=cfg.threads)
    forest.save_model(cfg.out_dir / "forest.json", model, {"run": cfg.echo(), "n_train": len(lab)})


def stage_predict(cfg: RunConfig) -> None:
    model = forest.load_model(_artifact(cfg, "forest.json"))
    feats, order = _read_features(cfg)
    if tuple(model.feature_order) != tuple(order):
        raise DataError(f"model feature order {list(model.feature_order)} does not match config {list(order)}")
    bounds = _load(io.load_boundaries, cfg.inputs["townships"], "townships").records
    labs_path = cfg.out_dir / "labels.csv"
    labs = _read_labels(cfg) if labs_path.is_file() else []
    lines = []
    if "lines" in cfg.inputs:
        lines = _load(lambda p: atlas.load_lines(p, cfg.sides), cfg.inputs["lines"], "lines").records
    zones = None
    if "zones" in cfg.inputs:
        zones = dict(_load(io.load_zones, cfg.inputs["zones"], "zones").records)
    result = atlas.predict_national(model, feats, bounds, labs)
    report = atlas.analyze(result, lines, zones, cfg.bandwidth)
    report["run"] = cfg.echo()
    report["seeds"] = cfg.seeds()
    atlas.export(result, bounds, cfg.out_dir, report)


STAGE_FUNCS = {
    "labels": stage_labels,
    "features": stage_features,
    "evaluate": stage_evaluate,
    "train": stage_train,
    "predict": stage_predict,
}


def _cleanup(out_dir: Path, names: Sequence[str]) -> None:
    for n in names:
        (out_dir / n).unlink(missing_ok=True)


def run_stages(cfg: RunConfig, stages: Sequence[str]) -> None:
    for s in stages:
        cfg.require(s)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    for s in stages:
        try:
            STAGE_FUNCS[s](cfg)
        except BaseException as exc:
            # remove every output of the invoked stages so no mixed-generation directory survives
            _cleanup(cfg.out_dir, [n for d in stages for n in STAGE_OUTPUTS[d]] + ["manifest.json"])
            if isinstance(exc, Exception):
                exc.stage = s  # type: ignore[attr-defined]
            raise
        write_manifest(cfg)


def run_synth(cfg: RunConfig) -> None:
    try:
        sc = synth.SynthConfig.from_dict(cfg.synth)
        sc.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth: {exc}") from None
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    fx = synth.generate(sc, cfg.out_dir)
    print(f"wrote {len(fx.paths)} files for {sc.n_townships} townships to {cfg.out_dir}")


# ---------------------------------------------------------------------------
# Entry point

DATA_ERRORS = (DataError, io.FieldError, io.GeometryError, labels.LabelError, evaluate.EvalError, forest.ForestError)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wealth-atlas", description="Township wealth atlas pipeline.")
    p.add_argument("command", choices=(*STAGES, "synth", "all"))
    p.add_argument("--config", help="JSON run config (paths relative to it)")
    p.add_argument("--seed", type=int, help="override forest.master_seed and cv.seed (synth.seed for synth)")
    p.add_argument("--threads", type=int, help="worker threads for forest fitting")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already printed
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    stage = args.command
    try:
        if args.command != "synth" and args.config is None:
            raise ConfigError("--config is required")
        cfg = load_config(args.config, args.seed, args.threads, args.out)
        cfg.validate()
        if args.command == "synth":
            run_synth(cfg)
        else:
            run_stages(cfg, STAGES if args.command == "all" else (args.command,))
    except ConfigError as exc:
        print(f"wealth-atlas: {stage}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"wealth-atlas: {getattr(exc, 'stage', stage)}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        print(f"wealth-atlas: {getattr(exc, 'stage', stage)}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
