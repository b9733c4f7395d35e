"""Configuration and stage orchestration: ingest, graph, train, eval, ablate.

Every stage writes its artifacts under the output directory before the next
one starts, so a failed run leaves a consistent prefix on disk.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import errors as E
from .attributes import RegionTargets, build_targets, checkin_counts, landuse_areas, od_matrix, \
    write_matrix_csv
from .evaluation import EvalData, evaluate_embeddings, metapath_ablation, write_ablation_csv, \
    write_clusters_csv
from .graph import GraphConfig, HeterogeneousUrbanGraph, TimeSlotSpec, build_hug, format_table1, \
    table1_statistics, validate_schema
from .io import CityTables, load_tables, table_paths
from .metapath import BUILTIN_METAPATHS, METAPATHS_BY_NAME, MetaPathAdjacency, compose_adjacency, \
    write_adjacency_csv
from .model import ModelConfig
from .synthetic import SyntheticCitySpec, generate_synthetic_city
from .training import LossWeights, TrainingConfig, TrainingResult, train, write_embeddings

log = logging.getLogger(__name__)

STAGES = ("synth", "build-graph", "train", "eval", "ablate")

# exit status per failure class
EXIT_OK, EXIT_CONFIG, EXIT_INGEST, EXIT_DIVERGENCE, EXIT_EVAL = 0, 2, 3, 4, 5


class StageFailure(Exception):
    """A stage error tagged with the stage name and the exit status to report."""

    def __init__(self, stage: str, status: int, cause: BaseException):
        self.stage = stage
        self.status = status
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


INGEST_ERRORS = (E.SchemaViolation, E.MissingFile, E.MalformedTimestamp, E.UnknownRegion,
                 E.EmptyEventTable, E.SchemaMismatch, E.NegativeCount, E.EmptyNeighborSet)


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class EvalConfig:
    enabled: bool = True
    folds: int = 5
    clusters: Optional[int] = None  # default: number of reference districts
    restarts: int = 10
    ablation: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    output_dir: str = "hugat_out"
    data_dir: Optional[str] = None
    paths: Dict[str, str] = field(default_factory=dict)
    synthetic: Optional[SyntheticCitySpec] = None
    graph: GraphConfig = field(default_factory=GraphConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    metapaths: tuple = tuple(mp.name for mp in BUILTIN_METAPATHS)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "data_dir": self.data_dir,
            "paths": dict(sorted(self.paths.items())),
            "synthetic": None if self.synthetic is None else dataclasses.asdict(self.synthetic),
            "graph": {"slots_per_week": self.graph.time_slots.slots_per_week,
                      "hotspot_k": self.graph.hotspot_k, "feature_dim": self.graph.feature_dim},
            "model": {k: v for k, v in dataclasses.asdict(self.model).items() if k != "feature_dim"},
            "training": {"epochs": self.training.epochs, "lr": self.training.lr,
                         "replicates": self.training.replicates,
                         "weights": dataclasses.asdict(self.training.weights)},
            "eval": dataclasses.asdict(self.evaluation),
            "metapaths": list(self.metapaths),
        }
        return d


def _section(raw: dict, name: str, allowed) -> dict:
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise E.ConfigError(f"'{name}' must be an object")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise E.ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    return sec


def _positive(name, value):
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise E.ConfigError(f"{name} must be a positive integer, got {value!r}")
    return value


TOP_KEYS = {"seed", "output_dir", "data_dir", "paths", "synthetic", "graph", "model",
            "training", "eval", "metapaths"}


def parse_config(raw: dict, seed: Optional[int] = None, out: Optional[str] = None) -> PipelineConfig:
    """Validate a JSON-shaped config; ``seed`` and ``out`` override the file's values."""
    if not isinstance(raw, dict):
        raise E.ConfigError("config must be a JSON object")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise E.ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        root = int(raw.get("seed", 0) if seed is None else seed)
        if root < 0:
            raise E.ConfigError("seed must be non-negative")

        g = _section(raw, "graph", {"slots_per_week", "hotspot_k", "feature_dim"})
        hotspot_k = float(g.get("hotspot_k", 0.10))
        if not 0.0 < hotspot_k <= 1.0:
            raise E.ConfigError(f"hotspot_k must lie in (0, 1], got {hotspot_k}")
        graph = GraphConfig(
            time_slots=TimeSlotSpec(_positive("slots_per_week", g.get("slots_per_week", 168))),
            hotspot_k=hotspot_k,
            feature_dim=_positive("feature_dim", g.get("feature_dim", 250)),
            seed=root,
        )

        m = _section(raw, "model", {"heads", "head_dim", "semantic_dim", "out_dim", "slope"})
        model = ModelConfig(
            feature_dim=graph.feature_dim,
            heads=_positive("heads", m.get("heads", 10)),
            head_dim=_positive("head_dim", m.get("head_dim", 13)),
            semantic_dim=_positive("semantic_dim", m.get("semantic_dim", 128)),
            out_dim=_positive("out_dim", m.get("out_dim", 32)),
            slope=float(m.get("slope", 0.2)),
        )

        t = _section(raw, "training", {"epochs", "lr", "replicates", "weights"})
        w = _section(t, "weights", {"alpha", "beta", "gamma"})
        training = TrainingConfig(
            epochs=_positive("epochs", t.get("epochs", 1000)),
            lr=float(t.get("lr", 0.001)),
            seed=root,
            replicates=_positive("replicates", t.get("replicates", 5)),
            weights=LossWeights(float(w.get("alpha", 0.3)), float(w.get("beta", 0.6)),
                                float(w.get("gamma", 0.1))),
        )

        ev = _section(raw, "eval", {f.name for f in dataclasses.fields(EvalConfig)})
        evaluation = EvalConfig(**ev)
        if evaluation.folds < 2 or evaluation.restarts < 1:
            raise E.ConfigError("eval.folds must be >= 2 and eval.restarts >= 1")

        synthetic = None
        if raw.get("synthetic") is not None:
            s = _section(raw, "synthetic", {f.name for f in dataclasses.fields(SyntheticCitySpec)})
            synthetic = SyntheticCitySpec(**{"seed": root, **s})
        paths = raw.get("paths") or {}
        if not isinstance(paths, dict):
            raise E.ConfigError("'paths' must map table names to files")
        data_dir = raw.get("data_dir")
        if synthetic is None and data_dir is None and not paths:
            raise E.ConfigError("config needs 'synthetic', 'data_dir' or 'paths'")

        names = tuple(raw.get("metapaths") or [mp.name for mp in BUILTIN_METAPATHS])
        bad = [n for n in names if n not in METAPATHS_BY_NAME]
        if bad or len(set(names)) != len(names) or not names:
            raise E.ConfigError(f"metapaths must be distinct names from {list(METAPATHS_BY_NAME)}")
    except (TypeError, ValueError, E.InvalidSpec, E.InvalidFraction) as exc:
        raise E.ConfigError(str(exc)) from exc

    return PipelineConfig(
        seed=root,
        output_dir=str(out if out is not None else raw.get("output_dir", "hugat_out")),
        data_dir=data_dir,
        paths={str(k): str(v) for k, v in paths.items()},
        synthetic=synthetic,
        graph=graph,
        model=model,
        training=training,
        evaluation=evaluation,
        metapaths=names,
    )


def load_config(path, seed: Optional[int] = None, out: Optional[str] = None) -> PipelineConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise E.ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(raw, seed, out)


# ---------------------------------------------------------------- stages


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class Prepared:
    tables: CityTables
    graph: HeterogeneousUrbanGraph
    adjacencies: List[MetaPathAdjacency]
    targets: RegionTargets
    labels: Optional[np.ndarray] = None
    coords: Optional[np.ndarray] = None


def stage_synth(cfg: PipelineConfig):
    """Generate the synthetic city and write its tables plus planted labels."""
    if cfg.synthetic is None:
        raise E.ConfigError("stage 'synth' needs a 'synthetic' section")
    city = generate_synthetic_city(cfg.synthetic)
    data = cfg.out / "data"
    city.tables.write(data)
    with (data / "labels.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "community", "x", "y"])
        for i, (lab, xy) in enumerate(zip(city.labels, city.coords)):
            w.writerow([i, int(lab), repr(float(xy[0])), repr(float(xy[1]))])
    return city


def _read_labels(path: Path):
    if not path.exists():
        return None, None
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    labels = np.array([int(r["community"]) for r in rows])
    coords = np.array([[float(r["x"]), float(r["y"])] for r in rows])
    return labels, coords


def ingest(cfg: PipelineConfig):
    """Tables from the synthetic generator (written to ``out/data``) or from the configured CSVs."""
    if cfg.synthetic is not None:
        data = cfg.out / "data"
        if not (data / "regions.csv").exists():
            stage_synth(cfg)
        paths = table_paths(data)
        labels, coords = _read_labels(data / "labels.csv")
    else:
        paths = table_paths(cfg.data_dir) if cfg.data_dir else {}
        paths.update(cfg.paths)
        labels = coords = None
    tables = load_tables(paths)
    for name, count in tables.row_counts().items():
        log.info("ingested %s: %d rows", name, count)
    return tables, labels, coords


def city_inputs(tables: CityTables, graph_cfg: GraphConfig = GraphConfig(),
                metapaths=tuple(mp.name for mp in BUILTIN_METAPATHS)):
    """``(graph, meta-path adjacencies, region targets)`` for a set of input tables."""
    g = build_hug(tables.regions, tables.adjacency, tables.pois, tables.checkins, tables.trips,
                  graph_cfg)
    problems = validate_schema(g)
    if problems:
        raise E.SchemaMismatch("; ".join(str(p) for p in problems[:5]))
    adjs = [compose_adjacency(g, METAPATHS_BY_NAME[n]) for n in metapaths]
    n = g.num_regions
    V = checkin_counts(tables.checkins, tables.pois, n, g.category_names)
    A, _ = landuse_areas(tables.landuse, n)
    return g, adjs, build_targets(od_matrix(tables.trips, n), V, A)


def prepare(cfg: PipelineConfig) -> Prepared:
    tables, labels, coords = ingest(cfg)
    g, adjs, targets = city_inputs(tables, cfg.graph, cfg.metapaths)
    return Prepared(tables, g, adjs, targets, labels, coords)


def graph_summary(p: Prepared) -> dict:
    return {
        "regions": p.graph.num_regions,
        "node_counts": {t.value: p.graph.count(t) for t in p.graph.nodes},
        "edge_counts": {r.value: c for r, c in sorted(p.graph.edge_counts().items(),
                                                        key=lambda kv: kv[0].value)},
        "table1": [list(row) for row in table1_statistics(p.graph)],
        "metapath_density": {a.metapath.name: a.density for a in p.adjacencies},
        "input_rows": p.tables.row_counts(),
    }


def stage_build_graph(cfg: PipelineConfig, p: Prepared) -> dict:
    d = cfg.out / "graph"
    d.mkdir(parents=True, exist_ok=True)
    (d / "table1.txt").write_text(format_table1(p.graph) + "\n", encoding="utf-8")
    for a in p.adjacencies:
        write_adjacency_csv(a, d / f"adjacency_{a.metapath.name}.csv")
    write_matrix_csv(p.targets.s_chk, d / "s_chk.csv", col_prefix="r")
    write_matrix_csv(p.targets.s_land, d / "s_land.csv", col_prefix="r")
    write_matrix_csv(p.targets.od, d / "od.csv", col_prefix="r")
    summary = graph_summary(p)
    _dump_json(summary, d / "graph.json")
    return summary


def stage_train(cfg: PipelineConfig, p: Prepared) -> List[TrainingResult]:
    results = []
    for s in cfg.training.replicate_seeds():
        res = train(p.graph, p.adjacencies, p.targets, cfg.training, cfg.model, seed=s)
        d = cfg.out / "train" / f"seed_{s}"
        d.mkdir(parents=True, exist_ok=True)
        write_embeddings(res.Z, d / "embeddings.csv")
        res.write_history(d / "loss_history.csv")
        res.write_betas(d / "betas.csv", [a.metapath.name for a in p.adjacencies])
        res.params.save(d / "params.json")
        results.append(res)
    return results


def read_embeddings(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise E.MissingFile(f"{path} not found; run the train stage first")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(x) for x in r[1:]] for r in rows])


def eval_data(p: Prepared) -> EvalData:
    data = EvalData.from_tables(p.tables)
    if data.districts is None and p.labels is not None:
        data.districts = p.labels
    return data


def stage_eval(cfg: PipelineConfig, p: Prepared, embeddings: Dict[int, np.ndarray]) -> dict:
    data = eval_data(p)
    ev = cfg.evaluation
    per_seed = {}
    for s, Z in embeddings.items():
        rep = evaluate_embeddings(Z, data, ev.folds, cfg.seed, ev.clusters, ev.restarts)
        d = cfg.out / "eval" / f"seed_{s}"
        d.mkdir(parents=True, exist_ok=True)
        out = rep.as_dict()
        _dump_json(out, d / "report.json")
        if rep.clustering is not None:
            write_clusters_csv(rep.clustering.labels, p.coords, d / "clusters.csv")
        per_seed[str(s)] = out
    return per_seed


def stage_ablate(cfg: PipelineConfig, p: Prepared) -> list:
    ev = cfg.evaluation
    rows = metapath_ablation(p.graph, p.adjacencies, p.targets, eval_data(p), cfg.training,
                             cfg.model, seed=cfg.seed, folds=ev.folds, k=ev.clusters)
    d = cfg.out / "ablation"
    d.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(rows, d / "ablation.csv")
    return [{"metapath_set": r.metapath_set, "mode": r.mode, "crime_r2": r.crime_r2,
             "income_r2": r.income_r2, "flow_r2": r.flow_r2, "nmi": r.nmi} for r in rows]


def _aggregate(per_seed: dict) -> dict:
    """Mean and population std across seeds for every numeric leaf metric."""
    out = {}
    for task in ("crime", "income", "flow", "clustering"):
        keys = ("nmi", "ari") if task == "clustering" else ("mae", "rmse", "r2")
        reps = [r[task] for r in per_seed.values() if r.get(task)]
        if not reps:
            continue
        out[task] = {}
        for k in keys:
            vals = np.array([r[k] for r in reps], dtype=float)
            out[task][k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def _run_guarded(stage: str, fn, *args):
    try:
        return fn(*args)
    except E.ConfigError as exc:
        raise StageFailure(stage, EXIT_CONFIG, exc) from exc
    except E.DivergenceDetected as exc:
        raise StageFailure(stage, EXIT_DIVERGENCE, exc) from exc
    except INGEST_ERRORS as exc:
        status = EXIT_EVAL if stage in ("eval", "ablate") else EXIT_INGEST
        raise StageFailure(stage, status, exc) from exc
    except E.HugatError as exc:
        status = EXIT_EVAL if stage in ("eval", "ablate") else EXIT_INGEST
        raise StageFailure(stage, status, exc) from exc


def run_pipeline(cfg: PipelineConfig, stop_after: Optional[str] = None,
                 start_at: str = "synth", summary_name: str = "summary.json") -> dict:
    """Run stages from ``start_at`` through ``stop_after``; returns the summary written to disk.

    Stages that are skipped but needed as inputs (the graph, embeddings) are
    recomputed in memory or read back from earlier artifacts.
    """
    if stop_after is not None and stop_after not in STAGES:
        raise StageFailure("config", EXIT_CONFIG, E.ConfigError(f"unknown stage {stop_after!r}"))
    last = STAGES.index(stop_after) if stop_after else len(STAGES) - 1
    first = STAGES.index(start_at)
    wanted = [s for s in STAGES[first:last + 1]]
    if "ablate" in wanted and stop_after is None and not cfg.evaluation.ablation:
        wanted.remove("ablate")
    if "eval" in wanted and not cfg.evaluation.enabled and stop_after != "eval":
        wanted.remove("eval")
    cfg.out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"config": cfg.to_dict(), "stages": []}

    if "synth" in wanted and cfg.synthetic is not None:
        _run_guarded("synth", stage_synth, cfg)
        summary["stages"].append("synth")
    p = _run_guarded("ingest", prepare, cfg)
    if "build-graph" in wanted:
        summary["graph"] = _run_guarded("build-graph", stage_build_graph, cfg, p)
        summary["stages"].append("build-graph")
    else:
        summary["graph"] = graph_summary(p)

    embeddings: Dict[int, np.ndarray] = {}
    if "train" in wanted:
        results = _run_guarded("train", stage_train, cfg, p)
        embeddings = {r.seed: r.Z for r in results}
        summary["training"] = {
            str(r.seed): {
                "epochs": len(r.history),
                "loss_first": r.history[0].total,
                "loss_epoch10": r.history[min(9, len(r.history) - 1)].total,
                "loss_last": r.history[-1].total,
                "final_components": {"chk": r.history[-1].chk, "land": r.history[-1].land,
                                     "mob": r.history[-1].mob},
                "beta": {a.metapath.name: float(b) for a, b in zip(p.adjacencies, r.betas[-1])},
            }
            for r in results
        }
        summary["stages"].append("train")
    if "eval" in wanted:
        if not embeddings:
            embeddings = _run_guarded("eval", lambda: {
                s: read_embeddings(cfg.out / "train" / f"seed_{s}" / "embeddings.csv")
                for s in cfg.training.replicate_seeds()})
        per_seed = _run_guarded("eval", stage_eval, cfg, p, embeddings)
        summary["eval"] = {"per_seed": per_seed, "aggregate": _aggregate(per_seed)}
        summary["stages"].append("eval")
    if "ablate" in wanted:
        summary["ablation"] = _run_guarded("ablate", stage_ablate, cfg, p)
        summary["stages"].append("ablate")
    _dump_json(summary, cfg.out / summary_name)
    return summary
