"""Run the full protocol for a config: data, training, evaluation, sweeps.

Every unit of work (materializing data, training one net, one measurement)
has a stable key. A unit completed under the same config hash is skipped on
re-invocation, so interrupted runs resume where they stopped.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from invarlab.datasets import (
    NormalizationStats,
    SampleManifest,
    StimulusBank,
    build_manifest,
    compute_norm_stats,
    ingest_external,
)
from invarlab.errors import ConfigError, InsufficientSamplesError, IoError, StageError
from invarlab.evaluation import (
    RESULT_COLUMNS,
    ActivationCache,
    NetworkProbe,
    ResultRow,
    ViewSampler,
    _derive_seed,
    cross_cell_seed,
    invariance_curve,
    run_5afc,
    samediff_accuracy,
)
from invarlab.experiments.config import ExperimentConfig, ModelSpec
from invarlab.models import build_model
from invarlab.stimuli3d import Mesh, load_obj, make_class_objects
from invarlab.training import load_checkpoint, train_samediff, train_supervised
from invarlab.transforms import default_theta_grid

log = logging.getLogger(__name__)

RECORD_FILE = "run_record.json"
RESULTS_FILE = "results.csv"
SWEEP_RECORD_FILE = "sweep_record.json"
SWEEP_RESULTS_FILE = "sweep_results.csv"
RESULT_EXTRA_COLUMNS = ["test_set", "config_hash"]

# cumulative pipeline stages selectable from the command line
STAGES = ("gen-data", "train", "eval", "cross-matrix")
# the cross-matrix stage forces 5AFC on every test kind, so it is opt-in
DEFAULT_STAGES = ("gen-data", "train", "eval")


@dataclass
class RunRecord:
    """Status of every unit of an experiment, persisted as JSON next to its outputs."""

    experiment_id: str
    config_hash: str
    output_dir: str
    units: dict[str, dict[str, Any]] = field(default_factory=dict)
    result_files: list[str] = field(default_factory=list)
    executed: list[str] = field(default_factory=list)

    @property
    def failed(self) -> dict[str, dict[str, Any]]:
        return {k: u for k, u in self.units.items() if u["status"] == "failed"}

    @property
    def ok(self) -> bool:
        return not self.failed

    def checkpoint_paths(self) -> list[str]:
        return sorted(u["paths"][0] for k, u in self.units.items() if u["stage"] == "train" and u["status"] == "done")

    def curve_files(self) -> list[str]:
        return sorted(p for u in self.units.values() if u["stage"] == "curves" and u["status"] == "done"
                      for p in u["paths"][1:])

    def done(self, key: str) -> bool:
        u = self.units.get(key)
        return bool(u) and u["status"] == "done" and all(Path(p).exists() for p in u["paths"])

    def to_dict(self) -> dict[str, Any]:
        return {
            "experiment_id": self.experiment_id,
            "config_hash": self.config_hash,
            "output_dir": self.output_dir,
            "units": self.units,
            "result_files": self.result_files,
            "executed": self.executed,
        }

    def save(self, path: str | os.PathLike | None = None) -> Path:
        path = Path(path or Path(self.output_dir) / RECORD_FILE)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunRecord":
        path = Path(path)
        if path.is_dir():
            path = path / RECORD_FILE
        if not path.is_file():
            raise IoError(f"no run record at {path}")
        d = json.loads(path.read_text())
        return cls(d["experiment_id"], d["config_hash"], d["output_dir"], d.get("units", {}),
                   d.get("result_files", []), d.get("executed", []))


# ---------------------------------------------------------------------------
# units of work


@dataclass
class Unit:
    key: str
    stage: str
    action: Callable[[], list[str]]
    depends: tuple[str, ...] = ()


@dataclass
class DataBundle:
    train: SampleManifest
    novel: SampleManifest | None
    external: SampleManifest | None
    stats: NormalizationStats
    bank: StimulusBank


def _objects(cfg: ExperimentConfig, classes: list[str], n: int) -> list[Mesh]:
    ds = cfg.dataset
    if ds.source == "procedural":
        return make_class_objects(classes, n, seed=ds.seed)
    meshes = []
    for cls_name in classes:
        files = sorted((Path(ds.obj_dir) / cls_name).glob("*.obj"))
        if len(files) < n:
            raise InsufficientSamplesError(f"class {cls_name!r} has {len(files)} meshes, {n} requested")
        meshes.extend(load_obj(f, f"{cls_name}/{f.stem}", cls_name, ds.up_axis) for f in files[:n])
    return meshes


class _Context:
    """Everything the units of one run share: paths, data, trained nets."""

    def __init__(self, cfg: ExperimentConfig, bank: StimulusBank | None):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.hash = cfg.config_hash()
        self.bank = bank or StimulusBank()
        self._data: DataBundle | None = None
        self._nets: dict[tuple[str, str, int], Any] = {}
        self._acts: dict[tuple[str, str, int, str], ActivationCache] = {}

    # paths
    @property
    def data_dir(self) -> Path:
        return self.out / "data"

    def ckpt_dir(self, model: ModelSpec, cond: str, seed: int) -> Path:
        return self.out / "checkpoints" / model.name / cond / f"seed{seed}"

    def rows_path(self, key: str) -> Path:
        return self.out / "rows" / (key.replace("/", "__") + ".csv")

    # data
    def gen_data(self) -> list[str]:
        cfg, ds = self.cfg, self.cfg.dataset
        train_objs = _objects(cfg, ds.train_classes, ds.objects_per_class)
        train = build_manifest(train_objs, "none", 1, ds.seed, "train", cfg.transforms, self.bank, cfg.experiment_id)
        paths = [self.data_dir / "train.jsonl"]
        train.save(paths[0])
        if ds.novel_classes:
            novel_objs = _objects(cfg, ds.novel_classes, ds.novel_objects_per_class)
            novel = build_manifest(novel_objs, "none", 1, ds.seed, "novel_classes", cfg.transforms, self.bank,
                                   cfg.experiment_id)
            paths.append(self.data_dir / "novel.jsonl")
            novel.save(paths[-1])
        if ds.external_dir:
            external = ingest_external(ds.external_dir, ds.external_exclusions)
            paths.append(self.data_dir / "external.jsonl")
            external.save(paths[-1])
        stats = compute_norm_stats(train, ds.norm_subset, np.random.default_rng(ds.seed), self.bank)
        paths.append(self.data_dir / "norm_stats.json")
        stats.save(paths[-1])
        self._data = None
        return [str(p) for p in paths]

    @property
    def data(self) -> DataBundle:
        if self._data is None:
            d = self.data_dir

            def opt(name):
                return SampleManifest.load(d / name) if (d / name).is_file() else None

            self._data = DataBundle(SampleManifest.load(d / "train.jsonl"), opt("novel.jsonl"),
                                    opt("external.jsonl"), NormalizationStats.load(d / "norm_stats.json"), self.bank)
        return self._data

    # training
    def train(self, model: ModelSpec, cond: str, seed: int) -> list[str]:
        data = self.data
        tc = self.cfg.train_config(seed)
        out = self.ckpt_dir(model, cond, seed)
        if model.role == "samediff":
            net = build_model(model.arch, "samediff", seed=seed)
            net, _ = train_samediff(net, data.train, cond, tc, self.bank, data.stats, self.cfg.transforms, out)
        else:
            net = build_model(model.arch, "classifier", len(data.train.classes), seed=seed)
            net, _ = train_supervised(net, data.train, cond, tc, self.bank, data.stats, self.cfg.transforms, out)
        self._nets[(model.name, cond, seed)] = net
        return [str(out / "model.ckpt"), str(out / "meta.json")]

    def net(self, model: ModelSpec, cond: str, seed: int):
        key = (model.name, cond, seed)
        if key not in self._nets:
            self._nets[key], _ = load_checkpoint(self.ckpt_dir(model, cond, seed))
        return self._nets[key]

    def activations(self, model: ModelSpec, cond: str, seed: int, test_set: str) -> ActivationCache:
        key = (model.name, cond, seed, test_set)
        if key not in self._acts:
            probe = NetworkProbe(self.net(model, cond, seed), self.data.stats, self.cfg.eval.probe_layer)
            self._acts[key] = ActivationCache(probe, ViewSampler(self.manifest(test_set), self.bank,
                                                                 self.cfg.transforms))
        return self._acts[key]

    def release(self, model: ModelSpec, cond: str, seed: int) -> None:
        self._nets.pop((model.name, cond, seed), None)
        for k in [k for k in self._acts if k[:3] == (model.name, cond, seed)]:
            del self._acts[k]

    def manifest(self, test_set: str) -> SampleManifest:
        m = self.data.novel if test_set == "novel" else self.data.external
        if m is None:
            raise ConfigError(f"no {test_set} test set configured")
        return m

    # measurements
    def _row(self, row: ResultRow, model: ModelSpec, cond: str, seed: int, test_set: str) -> ResultRow:
        row.experiment_id = self.cfg.experiment_id
        row.model = model.name
        row.seed = seed
        row.train_transform = cond
        row.extra = {**row.extra, "test_set": test_set, "config_hash": self.hash}
        return row

    def _write_rows(self, key: str, rows: list[ResultRow]) -> str:
        path = self.rows_path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_rows_csv(rows, path)
        return str(path)

    def samediff(self, key: str, model: ModelSpec, cond: str, seed: int, test: str) -> list[str]:
        ev = self.cfg.eval
        row = samediff_accuracy(self.net(model, cond, seed), self.manifest("novel"), test, ev.samediff_pairs,
                                rng=np.random.default_rng(_derive_seed(seed, "samediff", test)),
                                bank=self.bank, stats=self.data.stats, ranges=self.cfg.transforms)
        return [self._write_rows(key, [self._row(row, model, cond, seed, "novel")])]

    def five_afc(self, key: str, model: ModelSpec, cond: str, seed: int, test: str, test_set: str) -> list[str]:
        ev = self.cfg.eval
        # trials depend only on (seed, test set, test kind): every net answers the same questions
        trial_seed = cross_cell_seed(_derive_seed(seed, "5afc", test_set), test)
        probe = NetworkProbe(self.net(model, cond, seed), self.data.stats, ev.probe_layer)
        rows = []
        for sim in ev.similarities:
            row = run_5afc(probe, self.manifest(test_set), test, ev.n_trials, sim,
                           np.random.default_rng(trial_seed), self.bank, self.data.stats, self.cfg.transforms)
            rows.append(self._row(row, model, cond, seed, test_set))
        return [self._write_rows(key, rows)]

    def curves(self, key: str, model: ModelSpec, cond: str, seed: int, test: str) -> list[str]:
        ev = self.cfg.eval
        novel = self.manifest("novel")
        fps = [self.bank.footprint(r) for r in novel.first_record().values()]
        grid = default_theta_grid(test, self.cfg.transforms, ev.theta_points, [f for f in fps if f],
                                  ev.translation_side)
        acts = self.activations(model, cond, seed, "novel")
        curve_seed = _derive_seed(seed, "curve", test) % 2**32
        rows, files = [], []
        for sim in ev.similarities:
            curve = invariance_curve(acts, novel, test, grid, ev.R, ev.N, sim, curve_seed)
            path = self.out / "curves" / model.name / cond / f"seed{seed}" / f"{test}_{sim}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            curve.save(path)
            files.append(str(path))
            rows.append(self._row(ResultRow("", "", seed, cond, test, f"mean_adjusted_invariance_{sim}",
                                            curve.mean_adjusted(), ev.R), model, cond, seed, "novel"))
        return [self._write_rows(key, rows)] + files


def _write_rows_csv(rows: Iterable[ResultRow], path: Path, extra_columns: list[str] | None = None) -> None:
    cols = RESULT_COLUMNS + (extra_columns if extra_columns is not None else RESULT_EXTRA_COLUMNS)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            d = r.to_dict() if isinstance(r, ResultRow) else dict(r)
            if isinstance(d["value"], float):
                d["value"] = repr(d["value"])
            w.writerow(d)


def read_rows(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _row_sort_key(cfg_order: dict[str, int], row: dict[str, str]) -> tuple:
    return (row["model"], cfg_order.get(row["train_transform"], 99), row["train_transform"], int(row["seed"]),
            row.get("test_set", ""), cfg_order.get(row["test_transform"], 99), row["test_transform"],
            row["metric_name"])


def plan_units(cfg: ExperimentConfig, ctx: _Context, stages: Iterable[str] = STAGES) -> list[Unit]:
    """All units needed for ``stages``, in execution order (each net's evaluations follow its training)."""
    stages = set(stages)
    unknown = stages - set(STAGES)
    if unknown:
        raise ConfigError(f"unknown stages {sorted(unknown)}")
    ev = cfg.eval
    units = [Unit("gen-data", "gen-data", ctx.gen_data)]
    if stages <= {"gen-data"}:
        return units
    has_novel = bool(cfg.dataset.novel_classes)
    test_sets = (["novel"] if has_novel else []) + (["external"] if cfg.dataset.external_dir else [])
    for model in cfg.models:
        for seed in cfg.seeds:
            for cond in cfg.conditions:
                tkey = f"train/{model.name}/{cond}/seed{seed}"
                units.append(Unit(tkey, "train", lambda m=model, c=cond, s=seed: ctx.train(m, c, s), ("gen-data",)))
                own = cfg.test_kinds if cond == "none" else [cond]
                evaluating = "eval" in stages and has_novel
                if evaluating and ev.samediff and model.role == "samediff":
                    for test in own:
                        key = f"samediff/{model.name}/{cond}/seed{seed}/{test}"
                        units.append(Unit(key, "samediff",
                                          lambda k=key, m=model, c=cond, s=seed, t=test: ctx.samediff(k, m, c, s, t),
                                          (tkey,)))
                afc_mode = "all" if "cross-matrix" in stages else (ev.five_afc if "eval" in stages else "none")
                if afc_mode != "none":
                    tests = cfg.test_kinds if afc_mode == "all" else own
                    for ts in test_sets:
                        for test in tests:
                            key = f"5afc/{model.name}/{cond}/seed{seed}/{ts}/{test}"
                            units.append(Unit(
                                key, "5afc",
                                lambda k=key, m=model, c=cond, s=seed, t=test, x=ts: ctx.five_afc(k, m, c, s, t, x),
                                (tkey,)))
                if evaluating and ev.curves:
                    for test in own:
                        if test == "none":
                            continue
                        key = f"curves/{model.name}/{cond}/seed{seed}/{test}"
                        units.append(Unit(key, "curves",
                                          lambda k=key, m=model, c=cond, s=seed, t=test: ctx.curves(k, m, c, s, t),
                                          (tkey,)))
    return units


def _open_record(cfg: ExperimentConfig) -> RunRecord:
    out = Path(cfg.output_dir)
    path = out / RECORD_FILE
    h = cfg.config_hash()
    if path.is_file():
        rec = RunRecord.load(path)
        if rec.config_hash == h:
            rec.executed = []
            rec.output_dir = str(out)
            return rec
        log.warning("config changed (%s -> %s); earlier units in %s are not reused", rec.config_hash, h, out)
    return RunRecord(cfg.experiment_id, h, str(out))


def dry_run(cfg: ExperimentConfig, stages: Iterable[str] = DEFAULT_STAGES) -> list[tuple[str, str]]:
    """(unit key, "done" | "pending") for every planned unit; nothing is executed."""
    rec = _open_record(cfg)
    ctx = _Context(cfg, StimulusBank())
    return [(u.key, "done" if rec.done(u.key) else "pending") for u in plan_units(cfg, ctx, stages)]


def run_experiment(
    config: ExperimentConfig,
    stages: Iterable[str] = DEFAULT_STAGES,
    bank: StimulusBank | None = None,
) -> RunRecord:
    """Execute (or resume) every unit of ``config`` and assemble ``results.csv``.

    A failing unit is recorded with its stage and error; units that depend on
    it are marked failed too, and everything else still runs.
    """
    out = Path(config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out}: {exc}") from None
    config.save(out / "config.json")
    rec = _open_record(config)
    ctx = _Context(config, bank)
    units = plan_units(config, ctx, stages)
    last_use: dict[str, int] = {}
    for i, u in enumerate(units):
        for d in u.depends:
            last_use[d] = i
    for i, u in enumerate(units):
        if rec.done(u.key):
            continue
        broken = [d for d in u.depends if not rec.done(d)]
        if broken:
            rec.units[u.key] = {"stage": u.stage, "status": "failed", "paths": [],
                                "error": f"dependency failed: {', '.join(broken)}"}
            rec.save()
            continue
        t0 = time.perf_counter()
        try:
            paths = u.action()
        except Exception as exc:  # recorded, reported through the exit status
            log.error("unit %s failed: %s", u.key, exc)
            rec.units[u.key] = {"stage": u.stage, "status": "failed", "paths": [],
                                "error": f"{type(exc).__name__}: {exc}",
                                "traceback": traceback.format_exc(limit=5)}
        else:
            rec.units[u.key] = {"stage": u.stage, "status": "done", "paths": paths,
                                "seconds": round(time.perf_counter() - t0, 3)}
            log.info("unit %s done in %.1fs", u.key, time.perf_counter() - t0)
        rec.executed.append(u.key)
        rec.save()
        # free nets whose remaining evaluations are finished
        if u.stage == "train" or u.depends:
            tkey = u.key if u.stage == "train" else u.depends[0]
            if last_use.get(tkey, i) <= i:
                _, model_name, cond, seed = tkey.split("/")
                for m in config.models:
                    if m.name == model_name:
                        ctx.release(m, cond, int(seed[4:]))
    rec.result_files = [_assemble_results(config, rec)]
    rec.save()
    return rec


def _assemble_results(config: ExperimentConfig, rec: RunRecord) -> str:
    rows = []
    for key, u in rec.units.items():
        if u["status"] == "done" and u["stage"] in ("samediff", "5afc", "curves"):
            rows.extend(read_rows(u["paths"][0]))
    order = {c: i for i, c in enumerate(config.conditions)}
    rows.sort(key=lambda r: _row_sort_key(order, r))
    path = Path(config.output_dir) / RESULTS_FILE
    _write_rows_csv(rows, path)
    return str(path)


def raise_on_failure(rec: RunRecord) -> None:
    if rec.failed:
        key, u = next(iter(sorted(rec.failed.items())))
        raise StageError(u["stage"], f"{len(rec.failed)} unit(s) failed, first {key}: {u['error']}")


# ---------------------------------------------------------------------------
# object-count sweep


def sweep_objects(
    config: ExperimentConfig,
    n_values: list[int] | None = None,
    bank: StimulusBank | None = None,
) -> RunRecord:
    """Repeat training and 5AFC evaluation with ``N`` training objects per class for each ``N``.

    Each N runs as a nested experiment under ``<output_dir>/sweep/n<N>``;
    the combined rows, with an ``n_objects`` column, go to ``sweep_results.csv``.
    """
    n_values = list(config.sweep_n_values if n_values is None else n_values)
    if not n_values:
        raise ConfigError("n_values must be nonempty")
    if any(n < 1 for n in n_values):
        raise ConfigError("object counts must be >= 1")
    out = Path(config.output_dir)
    afc = config.eval.five_afc if config.eval.five_afc != "none" else "diagonal"
    ev = replace(config.eval, samediff=False, curves=False, five_afc=afc)
    rec = RunRecord(config.experiment_id, config.config_hash(), str(out))
    rows = []
    for n in n_values:
        sub = replace(config, dataset=replace(config.dataset, objects_per_class=n), eval=ev,
                      output_dir=str(out / "sweep" / f"n{n}"))
        sub_rec = run_experiment(sub, ("gen-data", "train", "eval"), bank)
        key = f"sweep/n{n}"
        rec.units[key] = {"stage": "sweep", "status": "done" if sub_rec.ok else "failed",
                          "paths": [str(Path(sub.output_dir) / RECORD_FILE)]}
        if not sub_rec.ok:
            rec.units[key]["error"] = f"{len(sub_rec.failed)} nested unit(s) failed"
        rec.executed.extend(f"{key}/{k}" for k in sub_rec.executed)
        for r in read_rows(sub_rec.result_files[0]):
            r["n_objects"] = str(n)
            rows.append(r)
    order = {c: i for i, c in enumerate(config.conditions)}
    rows.sort(key=lambda r: (int(r["n_objects"]),) + _row_sort_key(order, r))
    path = out / SWEEP_RESULTS_FILE
    out.mkdir(parents=True, exist_ok=True)
    _write_rows_csv(rows, path, RESULT_EXTRA_COLUMNS + ["n_objects"])
    rec.result_files = [str(path)]
    rec.save(out / SWEEP_RECORD_FILE)
    return rec
