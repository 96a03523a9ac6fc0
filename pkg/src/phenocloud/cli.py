"""Command-line interface and batch pipeline.

Exit codes: 0 when everything succeeded, 2 when some inputs or stages
failed, 1 for configuration or usage errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import rate
from .align import AlignConfig, align_cloud
from .errors import ConfigError, InvalidArgument, IoError, PhenoError, SchemaError
from .mask import A_MAX, B_MIN, make_mask, read_image, write_mask_png
from .ply import load_ply, write_ply
from .segment import LabelMap, SegmentationParams, export_cluster, import_labels, segment_pot
from .stemgraph import StemGraphParams, measure_leaf_angles
from .synth import PlantSpec, SceneSpec, gen_plant, gen_scene, gen_seedling_cloud
from .traits import CSV_COLUMNS, TraitConfig, compute_traits, read_feature_table, write_traits_csv

log = logging.getLogger("phenocloud")

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2
SCHEMA_VERSION = 1
CONFIG_ENV = "PHENOCLOUD_CONFIG"
STAGES = ("align", "traits", "angles", "segment")
ANGLE_COLUMNS = ["plant_id", "junction", "z", "angle_deg", "stem_window", "leaf_window", "low_confidence"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# configuration

def _block(cls, data, name, exclude=()):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"'{name}' must be an object")
    known = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {', '.join(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**values)
    except (TypeError, InvalidArgument) as exc:
        raise ConfigError(f"invalid '{name}' block: {exc}") from exc


@dataclass
class PipelineConfig:
    input_dir: str
    output_dir: str
    seed: int = 0
    workers: int = 1
    stages: tuple = ("align", "traits", "angles")
    genotypes: Optional[str] = None  # CSV with plant_id,genotype
    write_clouds: bool = True
    align: AlignConfig = field(default_factory=AlignConfig)
    traits: TraitConfig = field(default_factory=TraitConfig)
    angles: StemGraphParams = field(default_factory=StemGraphParams)
    segment: SegmentationParams = field(default_factory=SegmentationParams)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        out = {
            "schema_version": self.schema_version,
            "input_dir": self.input_dir,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "workers": self.workers,
            "stages": list(self.stages),
            "genotypes": self.genotypes,
            "write_clouds": self.write_clouds,
            "align": {k: v for k, v in asdict(self.align).items() if k != "seed"},
            "traits": asdict(self.traits),
            "angles": asdict(self.angles),
            "segment": self.segment.to_dict(),
        }
        return json.loads(json.dumps(out))

    def param_hash(self) -> str:
        """Hash of everything that affects results (paths and worker count excluded)."""
        d = self.to_dict()
        for key in ("input_dir", "output_dir", "workers"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def parse_config(data: dict, base_dir=".") -> PipelineConfig:
    """Validate a config mapping; relative paths resolve against ``base_dir``."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    top = {"schema_version", "input_dir", "output_dir", "seed", "workers", "stages", "genotypes",
           "write_clouds", "align", "traits", "angles", "segment"}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    for key in ("input_dir", "output_dir"):
        if not isinstance(data.get(key), str):
            raise ConfigError(f"'{key}' is required and must be a string")
    seed, workers = data.get("seed", 0), data.get("workers", 1)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("'seed' must be an integer")
    if not isinstance(workers, int) or isinstance(workers, bool) or workers < 1:
        raise ConfigError("'workers' must be an integer >= 1")
    stages = tuple(data.get("stages", ("align", "traits", "angles")))
    bad = [s for s in stages if s not in STAGES]
    if bad or not stages:
        raise ConfigError(f"stages must be a nonempty subset of {list(STAGES)}")
    base = Path(base_dir)
    resolve = lambda p: None if p is None else str(base / p)
    try:
        segment = SegmentationParams.from_dict(data.get("segment") or {})
    except InvalidArgument as exc:
        raise ConfigError(f"invalid 'segment' block: {exc}") from exc
    return PipelineConfig(
        input_dir=resolve(data["input_dir"]),
        output_dir=resolve(data["output_dir"]),
        seed=seed,
        workers=workers,
        stages=stages,
        genotypes=resolve(data.get("genotypes")),
        write_clouds=bool(data.get("write_clouds", True)),
        align=replace(_block(AlignConfig, data.get("align"), "align", exclude=("seed",)), seed=seed),
        traits=_block(TraitConfig, data.get("traits"), "traits"),
        angles=_block(StemGraphParams, data.get("angles"), "angles"),
        segment=segment,
    )


def load_config(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(data, Path(path).parent)


# batch pipeline

@dataclass
class PlantOutcome:
    plant_id: str
    input: str
    stages: dict
    outputs: dict
    traits_row: Optional[dict]
    angle_rows: list
    timings: dict

    @property
    def ok(self) -> bool:
        return all(s["status"] == "ok" for s in self.stages.values())


def _process_plant(path: str, config: PipelineConfig) -> PlantOutcome:
    """Run the configured stages on one cloud; failures are recorded, never raised."""
    plant_id = Path(path).stem
    out_dir = Path(config.output_dir)
    stages, outputs, timings = {}, {}, {}
    traits_row, angle_rows = None, []
    cloud = None

    def run(name, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
            stages[name] = {"status": "ok"}
            return result
        except (PhenoError, ValueError, np.linalg.LinAlgError) as exc:
            stages[name] = {"status": "error", "error": f"{type(exc).__name__}: {exc}"}
            return None
        finally:
            timings[name] = time.perf_counter() - t0

    cloud = run("load", lambda: load_ply(path))
    if cloud is not None and "align" in config.stages:
        result = run("align", lambda: align_cloud(cloud, config.align))
        cloud = None if result is None else result.cloud
        if result is not None and config.write_clouds:
            rel = f"aligned/{plant_id}.ply"
            write_ply(result.cloud, out_dir / rel)
            with open(out_dir / f"aligned/{plant_id}.json", "w") as fh:
                json.dump(result.sidecar(), fh, indent=2, sort_keys=True)
                fh.write("\n")
            outputs["aligned"] = rel
    for name in ("traits", "angles", "segment"):
        if name not in config.stages:
            continue
        if cloud is None:
            stages[name] = {"status": "skipped", "error": "no cloud"}
            continue
        if name == "traits":
            rec = run(name, lambda: compute_traits(cloud, config.traits, plant_id))
            if rec is not None:
                traits_row = rec.row()
                if rec.flags:
                    stages[name]["flags"] = list(rec.flags)
        elif name == "angles":
            res = run(name, lambda: measure_leaf_angles(cloud, config.angles))
            if res is not None:
                angle_rows = res.rows(plant_id)
                stages[name]["junctions"] = res.junction_count
        else:
            res = run(name, lambda: segment_pot(cloud, config.segment))
            if res is not None:
                stages[name]["clusters"] = len(res.labels.clusters)
                if config.write_clouds:
                    rel = f"segmented/{plant_id}.ply"
                    write_ply(res.labeled_cloud(cloud), out_dir / rel)
                    outputs["segmented"] = rel
    return PlantOutcome(plant_id, Path(path).name, stages, outputs, traits_row, angle_rows, timings)


def read_genotypes(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "plant_id" not in reader.fieldnames or "genotype" not in reader.fieldnames:
            raise ConfigError(f"{path}: needs 'plant_id' and 'genotype' columns")
        for row in reader:
            out[row["plant_id"]] = row["genotype"]
    return out


def genotype_of(plant_id: str, table: dict) -> str:
    """Mapped genotype, else the file-name prefix before the first underscore."""
    return table.get(plant_id, plant_id.split("_", 1)[0])


def _json_num(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return None
    return float(v)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_angles_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANGLE_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in ANGLE_COLUMNS])


def summarize(manifest: dict, traits_rows: list, angle_rows: list) -> dict:
    """JSON summary with per-genotype means of every trait and of the leaf angles."""
    genotype = {p["plant_id"]: p["genotype"] for p in manifest["plants"]}
    groups = {}
    for p in manifest["plants"]:
        groups.setdefault(p["genotype"], {"plants": 0, "ok": 0})
        groups[p["genotype"]]["plants"] += 1
        groups[p["genotype"]]["ok"] += p["status"] == "ok"
    numeric = [c for c in CSV_COLUMNS if c != "plant_id"]
    for g, info in groups.items():
        rows = [r for r in traits_rows if genotype[r["plant_id"]] == g]
        means = {}
        for col in numeric:
            vals = [float(r[col]) for r in rows if r.get(col) not in (None, "") and math.isfinite(float(r[col]))]
            means[col] = _json_num(sum(vals) / len(vals)) if vals else None
        info["trait_means"] = means
        angles = [float(r["angle_deg"]) for r in angle_rows if genotype[r["plant_id"]] == g]
        info["leaf_angles"] = len(angles)
        info["mean_leaf_angle_deg"] = _json_num(sum(angles) / len(angles)) if angles else None
    ok = sum(p["status"] == "ok" for p in manifest["plants"])
    return {
        "plants": len(manifest["plants"]),
        "ok": ok,
        "failed": len(manifest["plants"]) - ok,
        "param_hash": manifest["param_hash"],
        "genotypes": {g: groups[g] for g in sorted(groups)},
    }


def _dump_json(data, path) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def report(run_dir) -> dict:
    """Rebuild report.json of a finished run from its manifest and CSV outputs."""
    run_dir = Path(run_dir)
    try:
        with open(run_dir / "manifest.json") as fh:
            manifest = json.load(fh)
        traits_rows = list(csv.DictReader(open(run_dir / "traits.csv", newline="")))
        angle_rows = list(csv.DictReader(open(run_dir / "angles.csv", newline="")))
    except OSError as exc:
        raise IoError(str(exc)) from exc
    summary = summarize(manifest, traits_rows, angle_rows)
    _dump_json(summary, run_dir / "report.json")
    return summary


def run_pipeline(config: PipelineConfig) -> dict:
    """Process every PLY of the input directory; returns the manifest.

    Outputs in ``output_dir``: traits.csv, angles.csv, manifest.json,
    report.json, timings.json, plus per-plant clouds when enabled.
    """
    in_dir, out_dir = Path(config.input_dir), Path(config.output_dir)
    if not in_dir.is_dir():
        raise ConfigError(f"input_dir {in_dir} is not a directory")
    table = read_genotypes(config.genotypes) if config.genotypes else {}
    inputs = sorted(str(p) for p in in_dir.iterdir() if p.suffix.lower() == ".ply" and p.is_file())
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.write_clouds:
        (out_dir / "aligned").mkdir(exist_ok=True)
        (out_dir / "segmented").mkdir(exist_ok=True)
    if config.workers > 1 and len(inputs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(_process_plant, inputs, [config] * len(inputs)))
    else:
        outcomes = [_process_plant(p, config) for p in inputs]

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "param_hash": config.param_hash(),
        "seed": config.seed,
        "stages": list(config.stages),
        "plants": [
            {
                "plant_id": o.plant_id,
                "input": o.input,
                "genotype": genotype_of(o.plant_id, table),
                "status": "ok" if o.ok else "error",
                "stages": o.stages,
                "outputs": o.outputs,
            }
            for o in outcomes
        ],
    }
    traits_rows = [o.traits_row for o in outcomes if o.traits_row is not None]
    angle_rows = [r for o in outcomes for r in o.angle_rows]
    with open(out_dir / "traits.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in traits_rows:
            w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    write_angles_csv(angle_rows, out_dir / "angles.csv")
    _dump_json(manifest, out_dir / "manifest.json")
    str_rows = [{k: _fmt(v) for k, v in r.items()} for r in traits_rows]
    _dump_json(summarize(manifest, str_rows, angle_rows), out_dir / "report.json")
    _dump_json({o.plant_id: {k: round(v, 6) for k, v in o.timings.items()} for o in outcomes},
               out_dir / "timings.json")
    return manifest


# subcommands

def _floats(text: str, n: Optional[int] = None) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise UsageError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _write_json(data, path) -> None:
    try:
        _dump_json(data, path)
    except OSError as exc:
        raise IoError(str(exc)) from exc


def cmd_mask(args) -> int:
    mask = make_mask(read_image(args.inp), args.b_min, args.a_max)
    write_mask_png(mask, args.out)
    print(json.dumps({"foreground": int(mask.bits.sum()), "pixels": int(mask.bits.size)}))
    return EXIT_OK


def cmd_align(args) -> int:
    config = AlignConfig(
        seed=args.seed,
        distance_threshold=args.dist_thresh,
        table_radius=args.table_radius,
        filter_lower=_floats(args.filter_lower, 3) if args.filter_lower else None,
        filter_upper=_floats(args.filter_upper, 3) if args.filter_upper else None,
        filter_mode=args.filter_mode,
        pot_radius=args.pot_radius,
        pot_top=args.pot_top,
    )
    if (config.filter_lower is None) != (config.filter_upper is None):
        raise UsageError("--filter-lower and --filter-upper go together")
    result = align_cloud(load_ply(args.inp), config)
    write_ply(result.cloud, args.out)
    sidecar = args.sidecar or str(Path(args.out).with_suffix(".json"))
    _write_json(result.sidecar(), sidecar)
    return EXIT_OK


def cmd_traits(args) -> int:
    fractions = _floats(args.fractions, 3)
    config = TraitConfig(alpha=args.alpha, fractions=fractions, ground_cover=not args.no_ground_cover)
    records, failed = [], 0
    for path in args.inp:
        try:
            records.append(compute_traits(load_ply(path), config, Path(path).stem))
        except PhenoError as exc:
            failed += 1
            print(f"error: {path}: {exc}", file=sys.stderr)
    write_traits_csv(records, args.out)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_angles(args) -> int:
    params = StemGraphParams(
        slices=args.slices,
        eps=args.eps,
        min_pts=args.min_pts,
        weights=_floats(args.weights, 4) if args.weights else StemGraphParams().weights,
    )
    result = measure_leaf_angles(load_ply(args.inp), params)
    write_angles_csv(result.rows(Path(args.inp).stem), args.out)
    if args.dump_graph:
        with open(args.dump_graph, "w") as fh:
            fh.write(result.graph_json() + "\n")
    for node in result.undefined:
        log.warning("junction %s: angle undefined", node)
    return EXIT_OK


def cmd_segment(args) -> int:
    params = SegmentationParams()
    if args.params:
        try:
            with open(args.params) as fh:
                params = SegmentationParams.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read {args.params}: {exc}") from exc
        except InvalidArgument as exc:
            raise ConfigError(str(exc)) from exc
    cloud = load_ply(args.inp)
    if args.import_path:
        if cloud.labels is None:
            raise SchemaError(f"{args.inp}: --import needs a cloud with a 'label' property")
        labels = import_labels(args.import_path, LabelMap(cloud.labels))
    else:
        labels = segment_pot(cloud, params).labels
    write_ply(cloud.with_labels(labels.labels.astype(np.int32)), args.out)
    for label, path in args.export_label or []:
        count = export_cluster(cloud, labels, int(label), path)
        log.info("exported %d points of label %s to %s", count, label, path)
    print(json.dumps({"census": {str(k): v for k, v in labels.census.items()}}, sort_keys=True))
    return EXIT_OK


def _load_features(path):
    ids, names, X = read_feature_table(path)
    return ids, names, X


def cmd_rate_fit(args) -> int:
    ids, names, X = _load_features(args.features)
    data = rate.join_ratings(ids, names, X, rate.read_ratings(args.ratings))
    complete = ~np.isnan(data.X).any(axis=0)
    for name in np.array(data.names)[~complete]:
        log.warning("feature %s has missing values; dropped", name)
    data = rate.FeatureMatrix([n for n, c in zip(data.names, complete) if c], data.X[:, complete],
                              data.y, data.ids, data.groups)
    extra = {"params": {"folds": args.folds, "k_max": args.k_max, "p_threshold": args.p_threshold,
                        "seed": args.seed}, "split_seed": args.split_seed}
    train, test = data, None
    if args.split_seed is not None:
        tr, te = rate.stratified_split(data.groups, args.train_per_group, args.test_per_group, args.split_seed)
        train, test = data.rows(tr), data.rows(te)
        extra["train_ids"], extra["test_ids"] = list(train.ids), list(test.ids)
    if args.model == "mlr":
        model = rate.stepwise_mlr(train, args.p_threshold)
    else:
        model = rate.knn_fit_select(train, range(1, args.k_max + 1), args.folds, args.seed)
    if test is not None:
        scores = rate.evaluate(model.predict(test), test.y)
        extra["test_scores"] = {"r2": _json_num(scores.r2), "mae": scores.mae}
    rate.save_model(model, args.out, extra)
    print(json.dumps({"model": model.kind, "features": model.features, **{k: extra[k] for k in extra
                      if k == "test_scores"}}, sort_keys=True))
    return EXIT_OK


def cmd_rate_eval(args) -> int:
    model = rate.load_model(args.model)
    ids, names, X = _load_features(args.features)
    y = np.full(len(ids), np.nan)
    if args.ratings:
        ratings = rate.read_ratings(args.ratings)
        keep = [i for i, pid in enumerate(ids) if pid in ratings]
        ids, X = [ids[i] for i in keep], X[keep]
        y = np.array([ratings[pid][0] for pid in ids])
    pred = model.predict(rate.FeatureMatrix(names, X, y, ids))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["plant_id", "predicted"])
            for pid, v in zip(ids, pred):
                w.writerow([pid, repr(float(v))])
    summary = {"n": len(ids)}
    if args.ratings:
        scores = rate.evaluate(pred, y)
        summary.update(r2=_json_num(scores.r2), mae=scores.mae)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def build_synthetic(spec: dict):
    """Cloud, truth dict and per-point source codes from a synth spec mapping.

    Accepted forms: ``{"plant": {...}}`` for a lone plant,
    ``{"plants": [...], "scene": {...}}`` for a turntable scene (each plant
    may carry an ``xy`` offset), and ``{"seedlings": {"seed", "n_plants",
    "spacing"}}`` for a multi-seedling pot.
    """
    if not isinstance(spec, dict) or len({"plant", "plants", "seedlings"} & set(spec)) != 1:
        raise ConfigError("synth spec needs exactly one of 'plant', 'plants' or 'seedlings'")
    unknown = sorted(set(spec) - {"plant", "plants", "seedlings", "scene"})
    if unknown:
        raise ConfigError(f"unknown synth keys: {', '.join(unknown)}")
    try:
        if "plant" in spec:
            cloud, truth = gen_plant(PlantSpec.from_dict(spec["plant"]))
            info = {"height": truth.height, "radius": truth.radius, "leaf_angles": truth.leaf_angles}
            return cloud, info, truth.part.astype(np.int32)
        if "seedlings" in spec:
            cloud, source, truths = gen_seedling_cloud(**spec["seedlings"])
            info = {"plants": [{"height": t.height, "radius": t.radius, "leaf_angles": t.leaf_angles}
                               for t in truths]}
            return cloud, info, source
        plants = []
        for p in spec["plants"]:
            p = dict(p)
            xy = tuple(p.pop("xy", (0.0, 0.0)))
            plants.append((PlantSpec.from_dict(p), xy))
        cloud, truth = gen_scene(plants, _block(SceneSpec, spec.get("scene"), "scene"))
        return cloud, truth.to_dict(), truth.source
    except (TypeError, KeyError, InvalidArgument) as exc:
        raise ConfigError(f"invalid synth spec: {exc}") from exc


def cmd_synth(args) -> int:
    try:
        with open(args.spec) as fh:
            spec = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {args.spec}: {exc}") from exc
    cloud, info, source = build_synthetic(spec)
    if args.with_source:
        cloud = replace(cloud, extra={"source": source.astype(np.int32)})
    write_ply(cloud, args.out)
    if args.truth:
        _write_json(info, args.truth)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    path = args.config or os.environ.get(CONFIG_ENV)
    if not path:
        raise UsageError(f"pass --config or set {CONFIG_ENV}")
    config = load_config(path)
    changes = {}
    if args.input_dir:
        changes["input_dir"] = args.input_dir
    if args.output_dir:
        changes["output_dir"] = args.output_dir
    if args.workers:
        changes["workers"] = args.workers
    config = replace(config, **changes)
    manifest = run_pipeline(config)
    failed = sum(p["status"] != "ok" for p in manifest["plants"])
    print(json.dumps({"plants": len(manifest["plants"]), "failed": failed}))
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_report(args) -> int:
    summary = report(args.run_dir)
    print(json.dumps({"plants": summary["plants"], "failed": summary["failed"]}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="phenocloud", description="Point-cloud phenotyping of potted plants.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("mask", help="foreground mask of an RGB photograph")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--b-min", type=int, default=B_MIN)
    s.add_argument("--a-max", type=int, default=A_MAX)
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("align", help="center, level, scale and crop a raw cloud")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dist-thresh", type=float, default=None)
    s.add_argument("--table-radius", type=float, default=AlignConfig().table_radius)
    s.add_argument("--filter-lower", default=None, help="r,g,b")
    s.add_argument("--filter-upper", default=None, help="r,g,b")
    s.add_argument("--filter-mode", choices=("all", "any"), default="all")
    s.add_argument("--pot-radius", type=float, default=None)
    s.add_argument("--pot-top", type=float, default=None)
    s.add_argument("--sidecar", default=None, help="JSON path (default: output with .json suffix)")
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("traits", help="height, radius, hull volumes and ground cover")
    s.add_argument("--in", dest="inp", required=True, nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--alpha", type=float, default=TraitConfig().alpha)
    s.add_argument("--fractions", default="1.0,0.6,0.4")
    s.add_argument("--no-ground-cover", action="store_true")
    s.set_defaults(func=cmd_traits)

    s = sub.add_parser("angles", help="leaf angles from the slice graph")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--slices", type=int, default=StemGraphParams().slices)
    s.add_argument("--eps", type=float, default=None)
    s.add_argument("--min-pts", type=int, default=StemGraphParams().min_pts)
    s.add_argument("--weights", default=None, help="alpha,beta,gamma,delta")
    s.add_argument("--dump-graph", default=None)
    s.set_defaults(func=cmd_angles)

    s = sub.add_parser("segment", help="split a multi-seedling pot into plants")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--params", default=None, help="JSON with SegmentationParams fields")
    s.add_argument("--export-label", nargs=2, action="append", metavar=("K", "PATH"))
    s.add_argument("--import", dest="import_path", default=None)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("rate", help="rating models")
    rsub = s.add_subparsers(dest="rate_command", required=True, parser_class=_Parser)
    f = rsub.add_parser("fit")
    f.add_argument("--features", required=True)
    f.add_argument("--ratings", required=True)
    f.add_argument("--model", choices=("mlr", "knn"), required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int, default=0, help="fold assignment seed")
    f.add_argument("--folds", type=int, default=rate.DEFAULT_FOLDS)
    f.add_argument("--k-max", type=int, default=max(rate.DEFAULT_K_GRID))
    f.add_argument("--p-threshold", type=float, default=rate.P_THRESHOLD)
    f.add_argument("--split-seed", type=int, default=None, help="hold out a stratified test set")
    f.add_argument("--train-per-group", type=int, default=8)
    f.add_argument("--test-per-group", type=int, default=2)
    f.set_defaults(func=cmd_rate_fit)
    e = rsub.add_parser("eval")
    e.add_argument("--model", required=True)
    e.add_argument("--features", required=True)
    e.add_argument("--ratings", default=None)
    e.add_argument("--out", default=None, help="predictions CSV")
    e.set_defaults(func=cmd_rate_eval)

    s = sub.add_parser("synth", help="synthetic plant or scene")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--truth", default=None)
    s.add_argument("--with-source", action="store_true", help="store per-point truth as a 'source' property")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pipeline", help="batch run over a directory of clouds")
    s.add_argument("--config", default=None, help=f"JSON config (default: ${CONFIG_ENV})")
    s.add_argument("--input-dir", default=None)
    s.add_argument("--output-dir", default=None)
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("report", help="rebuild report.json of a pipeline run")
    s.add_argument("--run-dir", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PhenoError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
