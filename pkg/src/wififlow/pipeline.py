"""Pipeline stages. Each stage reads the previous stage's files from the
output directory and writes only its own files, so any stage can be rerun."""
from __future__ import annotations

import datetime as dt
import json
import logging
import shutil
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import byperson, bytime, bylocation, ingest as ingest_mod, preprocess as prep_mod, store, synthgen
from .cluster import InfeasibleError, sse_curve, sse_violations
from .config import ConfigError, PipelineConfig
from .model import DeploymentRegistry, LocationCategory, RegistryError, building_of, default_registry
from .tables import EntryTable

log = logging.getLogger(__name__)

SENSOR_TRAJS = "sensor_trajectories.jsonl"
INGEST_REPORT = "ingest_report.json"
TRAJS = "trajectories.jsonl"
PREP_REPORT = "preprocess_report.json"
MANIFEST = "manifest.json"
STAGES = ("ingest", "preprocess", "cluster-time", "cluster-person", "cluster-location", "report")


class StageError(RuntimeError):
    pass


class DependencyError(StageError):
    def __init__(self, stage: str, path: Path):
        super().__init__(f"{stage}: required file {path} is missing; run the upstream stage first")
        self.path = path


def _need(stage: str, path: Path) -> Path:
    if not path.exists():
        raise DependencyError(stage, path)
    return path


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def load_registry(cfg: PipelineConfig) -> DeploymentRegistry:
    return DeploymentRegistry.load(Path(cfg.registry)) if cfg.registry else default_registry()


def load_labels(cfg: PipelineConfig, stage: str, required: bool) -> Optional[dict[int, str]]:
    if not cfg.calendar:
        if required:
            raise ConfigError(f"{stage} needs a day-type calendar (--calendar)")
        return None
    return bytime.load_calendar(Path(_need(stage, Path(cfg.calendar))))


def _require_seed(cfg: PipelineConfig, stage: str) -> int:
    if cfg.seed is None:
        raise ConfigError(f"{stage} needs --seed (or seed = ... in the config file)")
    return cfg.seed


def _resolve_buildings(spec: str, registry: DeploymentRegistry) -> list[str]:
    if spec.strip() == "all":
        return registry.buildings
    cats = {c.value: c for c in LocationCategory}
    out: list[str] = []
    for tok in (t.strip() for t in spec.split(",")):
        if not tok:
            continue
        if tok in cats:
            out.extend(b for b in registry.in_category(cats[tok]) if b not in out)
        elif tok in registry:
            if tok not in out:
                out.append(tok)
        else:
            raise RegistryError(f"unknown building or category {tok!r}")
    return out


def _distinct_rows(X: np.ndarray) -> int:
    return len(np.unique(X, axis=0)) if len(X) else 0


# ---- manifest -----------------------------------------------------------------

class Manifest:
    """manifest.json: config hash, seed, and per-stage timings and input checksums."""

    def __init__(self, out: Path, cfg: PipelineConfig):
        self.path = out / MANIFEST
        self.data = {}
        if self.path.exists():
            try:
                self.data = json.loads(self.path.read_text())
            except json.JSONDecodeError:
                self.data = {}
        if self.data.get("config_hash") != cfg.digest():
            self.data = {}
        self.data["config_hash"] = cfg.digest()
        self.data["seed"] = cfg.seed
        self.data["config"] = {k: v for k, v in cfg.as_dict().items() if k not in cfg.RUNTIME_ONLY}
        self.data.setdefault("stages", {})

    def record(self, stage: str, seconds: float, inputs: list[Path], outputs: list[str]) -> None:
        self.data["stages"][stage] = {
            "seconds": round(seconds, 3),
            "inputs": {str(p): store.file_sha256(p) for p in inputs},
            "outputs": sorted(outputs),
        }
        _dump_json(self.path, self.data)


def _timed(stage: str, cfg: PipelineConfig, fn: Callable[[PipelineConfig, Path], tuple[list, list]]) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    log.info("stage %s: start", stage)
    inputs, outputs = fn(cfg, out)
    dt_s = time.perf_counter() - t0
    Manifest(out, cfg).record(stage, dt_s, inputs, outputs)
    log.info("stage %s: done in %.1f s", stage, dt_s)


# ---- stages ---------------------------------------------------------------------

def _ingest(cfg: PipelineConfig, out: Path):
    if not cfg.input:
        raise ConfigError("ingest needs --input")
    src = _need("ingest", Path(cfg.input))
    trajs, rep = ingest_mod.ingest(src, gap=cfg.coalesce_gap, tz_offset=cfg.tz_offset,
                                   pre_coalesced=cfg.pre_coalesced)
    registry = load_registry(cfg)
    unknown = sorted({building_of(e.node) for t in trajs for e in t.entries} - set(registry.buildings))
    if unknown:
        raise RegistryError(f"sensors of unknown buildings: {', '.join(unknown)}")
    store.write_trajectories(out / SENSOR_TRAJS, trajs)
    _dump_json(out / INGEST_REPORT, rep.as_dict())
    log.info("ingest: %d probes -> %d intervals -> %d day trajectories (%d malformed lines skipped)",
             rep.probes, rep.intervals, rep.trajectories, rep.skipped)
    inputs = [src] + ([Path(cfg.registry)] if cfg.registry else [])
    return inputs, [SENSOR_TRAJS, INGEST_REPORT]


def _preprocess(cfg: PipelineConfig, out: Path):
    src = _need("preprocess", out / SENSOR_TRAJS)
    kept, rep = prep_mod.preprocess(store.iter_trajectories(src), merge_threshold=cfg.merge_threshold,
                                    min_span=cfg.min_span, max_stay=cfg.max_stay)
    store.write_trajectories(out / TRAJS, kept)
    _dump_json(out / PREP_REPORT, rep.as_dict())
    log.info("preprocess: kept %d of %d (too short %d, anomalous %d)",
             rep.kept, rep.total, rep.too_short, rep.anomalous)
    return [src], [TRAJS, PREP_REPORT]


def _hours_header(prefix: str = "h") -> list[str]:
    return [f"{prefix}{h}" for h in range(24)]


def _cluster_time(cfg: PipelineConfig, out: Path):
    seed = _require_seed(cfg, "cluster-time")
    src = _need("cluster-time", out / TRAJS)
    labels = load_labels(cfg, "cluster-time", required=True)
    registry = load_registry(cfg)
    buildings = _resolve_buildings(cfg.time_buildings, registry)
    table = EntryTable.from_trajectories(store.read_trajectories(src))
    present = set(table.day.tolist())
    unlabeled = sorted(present - set(labels))
    if unlabeled:
        log.warning("cluster-time: %d data days have no calendar label and are ignored", len(unlabeled))
    days = sorted(labels)
    d = _fresh_dir(out / "time")
    assign_rows = []
    summary = {}
    for b in buildings:
        feats = bytime.hourly_count_features(table, b, days, cfg.tz_offset)
        try:
            asg = bytime.cluster_days(feats, cfg.time_k, seed, cfg.restarts, cfg.threads, cfg.kmeans_init)
        except InfeasibleError as exc:
            log.warning("cluster-time: building %s skipped: %s", b, exc)
            continue
        conf, empty = bytime.day_type_confusion(asg, labels, cfg.time_k)
        cols = [f"c{c + 1}" for c in range(cfg.time_k)]
        store.write_csv(d / f"confusion_{b}.csv", ["day_label", *cols],
                        ([lab, *row] for lab, row in zip(bytime.DAY_LABELS, conf.tolist())))
        store.write_csv(d / f"curves_{b}.csv", ["date", "day_label", "cluster", *_hours_header()],
                        ([f.day.date.isoformat(), labels[f.day.index], int(c), *f.normalized.tolist()]
                         for f, c in zip(feats, asg.clusters)))
        store.write_csv(d / f"counts_{b}.csv", ["date", "day_label", *_hours_header()],
                        ([f.day.date.isoformat(), labels[f.day.index], *f.counts.tolist()] for f in feats))
        for f, c in zip(feats, asg.clusters):
            assign_rows.append((b, f.day.date.isoformat(), labels[f.day.index], int(c)))
        entry = {"sizes": np.bincount(asg.clusters, minlength=cfg.time_k + 1)[1:].tolist(),
                 "sse": asg.result.sse, "empty_labels": empty}
        X = np.array([f.normalized for f in feats])
        kmax = min(cfg.time_elbow_kmax, _distinct_rows(X))
        if kmax >= 1:
            curve = sse_curve(X, range(1, kmax + 1), seed, cfg.restarts, cfg.threads, cfg.kmeans_init)
            store.write_csv(d / f"sse_{b}.csv", ["k", "sse"], curve)
            entry["sse_violations"] = sse_violations(curve)
        summary[b] = entry
    store.write_csv(d / "calendar_assignments.csv", ["building", "date", "day_label", "cluster"], assign_rows)
    _dump_json(d / "summary.json", summary)
    inputs = [src, Path(cfg.calendar)] + ([Path(cfg.registry)] if cfg.registry else [])
    return inputs, sorted(str(p.relative_to(out)) for p in d.iterdir())


FEATURE_COLS = ("hospital", "mall", "institute", "res_day", "res_night")


def _cluster_person(cfg: PipelineConfig, out: Path):
    seed = _require_seed(cfg, "cluster-person")
    src = _need("cluster-person", out / TRAJS)
    labels = load_labels(cfg, "cluster-person", required=False)
    registry = load_registry(cfg)
    trajs = store.read_trajectories(src)
    if len(trajs) < cfg.person_k:
        raise InfeasibleError(f"cluster-person: {len(trajs)} trajectories for k={cfg.person_k}")
    feats = [byperson.person_features(t, registry) for t in trajs]
    pc = byperson.cluster_persons(feats, cfg.person_k, seed, cfg.restarts, cfg.threads,
                                  cfg.silhouette_sample, cfg.kmeans_init)
    d = _fresh_dir(out / "person")
    store.write_csv(d / "person_features.csv", ["device", "date", *FEATURE_COLS],
                    ([f.device, f.day.date.isoformat(), *f.stay.tolist()] for f in feats))
    store.write_csv(d / "person_assignments.csv", ["device", "date", "cluster"],
                    ([f.device, f.day.date.isoformat(), f"CP{c}"] for f, c in zip(feats, pc.labels)))
    store.write_csv(d / "clusters.csv", ["cluster", "size", *(f"{c}_hours" for c in FEATURE_COLS)],
                    ([f"CP{i + 1}", int(pc.sizes[i]), *(pc.centroids[i] / 3600).tolist()] for i in range(pc.k)))
    curve_buildings = _resolve_buildings(cfg.curve_buildings, registry) if cfg.curve_buildings else []
    summary = {"silhouette": pc.silhouette, "sizes": pc.sizes.tolist(), "sse": pc.result.sse, "curves_missing": {}}
    if cfg.person_elbow_kmax >= 1:
        X = np.array([f.stay for f in feats], dtype=float)
        kmax = min(cfg.person_elbow_kmax, _distinct_rows(X))
        curve = sse_curve(X, range(1, kmax + 1), seed, cfg.restarts, cfg.threads, cfg.kmeans_init)
        store.write_csv(d / "sse.csv", ["k", "sse"], curve)
        summary["sse_violations"] = sse_violations(curve)
    for cp in range(1, pc.k + 1):
        members = [t for t, c in zip(trajs, pc.labels) if c == cp]
        tag = f"cp{cp}"
        store.write_csv(d / f"{tag}_edges.csv", ["a", "b", "weight"], byperson.cluster_transition_graph(members))
        hist = byperson.unique_location_histogram(members, max(len(registry), 1))
        store.write_csv(d / f"{tag}_uniques.csv", ["unique_locations", "probability"],
                        ((u + 1, p) for u, p in enumerate(hist.tolist())))
        st, en = byperson.start_end_distributions(members, cfg.tz_offset)
        store.write_csv(d / f"{tag}_startend.csv", ["hour", "start", "end"],
                        ((h, st[h], en[h]) for h in range(24)))
        if labels is not None and curve_buildings:
            curves, missing = byperson.daytype_count_curves(members, curve_buildings, labels, sorted(labels))
            summary["curves_missing"][f"CP{cp}"] = missing
            for g, cv in curves.items():
                store.write_csv(d / f"{tag}_{g}_curves.csv", ["bucket", "avg", "min", "max"],
                                ((h, cv.avg[h], cv.min[h], cv.max[h]) for h in range(24)))
    _dump_json(d / "summary.json", summary)
    inputs = [src] + [Path(p) for p in (cfg.calendar, cfg.registry) if p]
    return inputs, sorted(str(p.relative_to(out)) for p in d.iterdir())


def _write_matrix(path: Path, nodes, M) -> None:
    store.write_csv(path, ["node", *nodes], ([n, *row] for n, row in zip(nodes, np.asarray(M).tolist())))


def _cluster_location(cfg: PipelineConfig, out: Path):
    src = _need("cluster-location", out / TRAJS)
    registry = load_registry(cfg)
    nodes = registry.buildings
    windows = cfg.window_table()
    trajs = store.read_trajectories(src)
    d = _fresh_dir(out / "location")
    edges = {}
    summary = {"windows": [], "patterns": {}}
    for w in windows:
        N = bylocation.transition_counts(trajs, w, nodes, cfg.tz_offset, windows)
        T = bylocation.transition_probability(N)
        lc = bylocation.cluster_locations(T, cut_fraction=cfg.cut_fraction, hac_input=cfg.hac_input)
        dom = bylocation.dominant_directions(N, nodes, cfg.dominant_threshold, w)
        edges[w] = dom
        _write_matrix(d / f"N_{w}.csv", nodes, N)
        _write_matrix(d / f"T_{w}.csv", nodes, T)
        ordered = [nodes[i] for i in lc.order]
        _write_matrix(d / f"T_{w}_reordered.csv", ordered, lc.reordered)
        store.write_csv(d / f"dendrogram_{w}.csv", ["step", "a", "b", "height", "size"],
                        ((i, m.a, m.b, m.height, m.size) for i, m in enumerate(lc.dendrogram.merges)))
        store.write_csv(d / f"clusters_{w}.csv", ["node", "cluster", "leaf_position"],
                        ((nodes[i], int(lc.labels[i]), lc.order.index(i)) for i in range(len(nodes))))
        store.write_csv(d / f"dominant_{w}.csv", ["source", "target", "probability"],
                        ((e.source, e.target, e.probability) for e in dom))
        summary["windows"].append({
            "window": w, "transitions": int(N.sum() - np.trace(N)), "threshold": lc.threshold,
            "clusters": int(lc.labels.max()) + 1 if lc.labels.size else 0,
            "dominant": len(dom), "leaf_order": ordered,
        })
    for b in nodes:
        rep = bylocation.building_flow_report(edges, b, registry)
        (d / f"flow_report_{b}.txt").write_text(rep.to_text())
        summary["patterns"][b] = rep.pattern
    _dump_json(d / "summary.json", summary)
    inputs = [src] + ([Path(cfg.registry)] if cfg.registry else [])
    return inputs, sorted(str(p.relative_to(out)) for p in d.iterdir())


def _report(cfg: PipelineConfig, out: Path):
    paths = {
        "ingest": out / INGEST_REPORT,
        "preprocess": out / PREP_REPORT,
        "time": out / "time" / "summary.json",
        "person": out / "person" / "summary.json",
        "location": out / "location" / "summary.json",
    }
    data = {k: json.loads(_need("report", p).read_text()) for k, p in paths.items()}
    lines = ["# WiFi mobility analysis report", ""]
    ing, pre = data["ingest"], data["preprocess"]
    lines += ["## Data",
              f"lines read: {ing['lines']}, malformed skipped: {ing['skipped']}, probes: {ing['probes']}",
              f"detection intervals: {ing['intervals']}, sensor-level day trajectories: {ing['trajectories']}",
              f"preprocessing kept {pre['kept']} of {pre['total']} "
              f"(span < 5 min: {pre['too_short']}, single stay > 16 h: {pre['anomalous']})", ""]
    lines += ["## Calendar days by building (k-means on normalised hourly counts)"]
    for b, e in data["time"].items():
        note = f", elbow irregular at k={e['sse_violations']}" if e.get("sse_violations") else ""
        lines.append(f"{b}: cluster sizes {e['sizes']}{note}")
    lines.append("")
    per = data["person"]
    sil = "n/a" if per["silhouette"] is None else f"{per['silhouette']:.4f}"
    lines += ["## Trajectory clusters (k-means on stay-time features)",
              f"sizes CP1..CP{len(per['sizes'])}: {per['sizes']}", f"silhouette: {sil}", ""]
    loc = data["location"]
    lines += ["## Building clusters and flows"]
    for e in loc["windows"]:
        lines.append(f"{e['window']}: {e['transitions']} transitions, {e['clusters']} clusters at cut "
                     f"{e['threshold']:.4f}, {e['dominant']} dominant directions; "
                     f"leaf order {' '.join(e['leaf_order'])}")
    pats: dict[str, list] = {}
    for b, p in loc["patterns"].items():
        pats.setdefault(p, []).append(b)
    for p in sorted(pats):
        lines.append(f"{p}: {' '.join(pats[p])}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    return list(paths.values()), ["report.txt"]


STAGE_FUNCS = {
    "ingest": _ingest,
    "preprocess": _preprocess,
    "cluster-time": _cluster_time,
    "cluster-person": _cluster_person,
    "cluster-location": _cluster_location,
    "report": _report,
}


def run_stage(stage: str, cfg: PipelineConfig) -> None:
    if stage in ("cluster-time", "cluster-person"):
        _require_seed(cfg, stage)
    _timed(stage, cfg, STAGE_FUNCS[stage])


def run_all(cfg: PipelineConfig) -> None:
    _require_seed(cfg, "all")
    for stage in STAGES:
        run_stage(stage, cfg)


def run_synth(cfg: PipelineConfig) -> Path:
    """Write a synthetic probe log plus ground truth into ``cfg.out``."""
    seed = _require_seed(cfg, "synth")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    specs = synthgen.load_scenario(Path(cfg.scenario)) if cfg.scenario else synthgen.default_scenario()
    registry = load_registry(cfg)
    t0 = time.perf_counter()
    _, truth = synthgen.generate(
        specs, cfg.devices, cfg.days, seed, out_path=out / "probes.csv", registry=registry,
        start_date=dt.date.fromisoformat(cfg.start_date), ph_days=cfg.ph_day_list(), tz_offset=cfg.tz_offset,
    )
    synthgen.write_ground_truth(out, truth, registry)
    synthgen.save_scenario(out / "scenario.yaml", specs)
    registry.save(out / "registry.csv")
    log.info("synth: %d devices x %d days in %.1f s", cfg.devices, cfg.days, time.perf_counter() - t0)
    return out / "probes.csv"

