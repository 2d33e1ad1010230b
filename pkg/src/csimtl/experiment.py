"""Experiment grid runner and report assembly.

An experiment directory holds everything a run produces::

    experiment.cfg            canonical config echo
    data/<scenario>-<n>.csid  generated datasets (n = training-split size)
    checkpoints/cr<a>_<b>/    pretrained.csim, <scenario>.decoder.csim, <scenario>.single.csim
    logs/*.log                per-phase training logs: epoch, mean loss, seconds
    cells.jsonl               one record per finished (strategy, scenario, CR) cell
    report.txt, report.csv    written by :func:`write_report`

Every cell gets its own seed from the global seed and its key, so cells
can run in any order or in parallel and still produce the same numbers.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

from threadpoolctl import threadpool_limits

from .channels import PRESETS, ScenarioDataset, generate_dataset, get_profile, load_dataset, save_dataset
from .config import ExperimentConfig, dump_config, load_config
from .errors import ConfigError, FormatError, IntegrityError
from .models import (
    DECODER,
    ENCODER,
    CheckpointMeta,
    CompressionConfig,
    assemble,
    build_model,
    count_params,
    load_checkpoint,
    reduction,
    save_checkpoint,
    ue_storage,
)
from .training import TrainConfig, cell_seed, combine_datasets, cr_label, evaluate, finetune, pretrain, train_single_task

log = logging.getLogger(__name__)

CELL_STRATEGIES = ("pretrained", "multi-task", "single-task")
CSV_HEADER = ("strategy", "scenario", "cr_num", "cr_den", "nmse_db", "params_ue",
              "train_samples", "seconds", "seed")
MISSING = "MISSING"
THREADS_ENV = "CSI_MTL_THREADS"


@dataclass(frozen=True)
class Cell:
    strategy: str
    scenario: str
    cr: Fraction
    nmse_db: float
    nmse_linear: float
    params_ue: int
    train_samples: int
    seconds: float
    seed: int

    @property
    def key(self):
        return (self.strategy, self.scenario, self.cr)

    def to_json(self) -> str:
        rec = asdict(self)
        rec["cr"] = cr_label(self.cr)
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "Cell":
        rec = json.loads(line)
        rec["cr"] = Fraction(rec["cr"])
        return cls(**rec)


@dataclass(frozen=True)
class Accounting:
    """Storage and training cost of both strategies at one CR."""

    cr: Fraction
    n_scenarios: int
    encoder_params: int
    ue_single: int
    ue_multi: int
    samples_single: int
    samples_multi: int
    seconds_single: float | None
    seconds_multi: float | None

    @property
    def ue_reduction(self) -> Fraction:
        return reduction(self.ue_single, self.ue_multi)

    @property
    def sample_reduction(self) -> Fraction:
        return reduction(self.samples_single, self.samples_multi)

    @property
    def time_reduction(self) -> float | None:
        if not self.seconds_single or self.seconds_multi is None:
            return None
        return 1 - self.seconds_multi / self.seconds_single


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    cells: dict = field(default_factory=dict)  # key -> Cell
    scenarios: tuple = ()  # scenario ids in config order

    @property
    def expected(self) -> list:
        strategies = []
        if "multi-task" in self.config.strategies:
            strategies += ["pretrained", "multi-task"]
        if "single-task" in self.config.strategies:
            strategies.append("single-task")
        return [(s, sc, cr) for cr in self.config.crs for sc in self.scenarios for s in strategies]

    @property
    def missing(self) -> list:
        return [k for k in self.expected if k not in self.cells]

    @property
    def complete(self) -> bool:
        return not self.missing

    def nmse(self, strategy, scenario, cr) -> float:
        return self.cells[(strategy, scenario, Fraction(cr))].nmse_db

    def accounting(self) -> list:
        cfg, n = self.config, len(self.scenarios)
        rows = []
        if n == 0:
            return rows
        for cr in cfg.crs:
            model = build_model(_model_cfg(cfg, cr), architecture=cfg.architecture)
            enc = count_params(model, ENCODER)
            multi = [self.cells.get(("multi-task", sc, cr)) for sc in self.scenarios]
            pre = self.cells.get(("pretrained", self.scenarios[0], cr))
            single = [self.cells.get(("single-task", sc, cr)) for sc in self.scenarios]
            rows.append(Accounting(
                cr=cr,
                n_scenarios=n,
                encoder_params=enc,
                ue_single=ue_storage(enc, n, "single-task"),
                ue_multi=ue_storage(enc, n, "shared-encoder"),
                samples_single=n * cfg.large_train,
                # fine-tune sets are subsets of the small sets: no extra distinct samples
                samples_multi=n * cfg.train,
                seconds_single=sum(c.seconds for c in single) if all(single) else None,
                seconds_multi=(pre.seconds + sum(c.seconds for c in multi))
                if pre and all(multi) else None,
            ))
        return rows

    # ---------------------------------------------------------------- output

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for key in self.expected:
            cell = self.cells.get(key)
            strategy, scenario, cr = key
            if cell is None:
                writer.writerow([strategy, scenario, cr.numerator, cr.denominator,
                                 MISSING, "", "", MISSING, ""])
            else:
                writer.writerow([strategy, scenario, cr.numerator, cr.denominator,
                                 repr(cell.nmse_db), cell.params_ue, cell.train_samples,
                                 f"{cell.seconds:.3f}", cell.seed])
        return buf.getvalue()

    def text(self) -> str:
        out = []
        columns = []
        if "multi-task" in self.config.strategies:
            columns += ["pretrained", "multi-task"]
        if "single-task" in self.config.strategies:
            columns.append("single-task")
        width = max([len(s) for s in self.scenarios] + [8])
        for cr in self.config.crs:
            out.append(f"NMSE (dB), CR = {cr_label(cr)}")
            out.append("  ".join([f"{'scenario':<{width}}"] + [f"{c:>12}" for c in columns]))
            for sc in self.scenarios:
                vals = []
                for c in columns:
                    cell = self.cells.get((c, sc, cr))
                    vals.append(f"{MISSING:>12}" if cell is None else f"{cell.nmse_db:>12.2f}")
                out.append("  ".join([f"{sc:<{width}}"] + vals))
            out.append("")
        for acc in self.accounting():
            out += _complexity_table(acc)
            out.append("")
        if self.missing:
            out.append(f"{len(self.missing)} of {len(self.expected)} cells MISSING")
        return "\n".join(out).rstrip("\n") + "\n"


def _pct(frac) -> str:
    return "n/a" if frac is None else f"{float(frac) * 100:.2f}%"


def _secs(value) -> str:
    return "not run" if value is None else f"{value:.2f}"


def _complexity_table(acc: Accounting) -> list:
    rows = [
        ("UE parameters", f"{acc.ue_single:,}", f"{acc.ue_multi:,}", _pct(acc.ue_reduction)),
        ("training-set size", f"{acc.samples_single:,}", f"{acc.samples_multi:,}",
         _pct(acc.sample_reduction)),
        ("training time (s)", _secs(acc.seconds_single), _secs(acc.seconds_multi),
         _pct(acc.time_reduction)),
    ]
    head = ("", "single-task", "multi-task", "reduction")
    lines = [f"Model complexity and training cost, CR = {cr_label(acc.cr)}, "
             f"{acc.n_scenarios} scenarios"]
    for r in (head,) + tuple(rows):
        lines.append(f"{r[0]:<18}  {r[1]:>12}  {r[2]:>12}  {r[3]:>9}")
    return lines


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


def _model_cfg(cfg: ExperimentConfig, cr) -> CompressionConfig:
    return CompressionConfig(cfg.delay_taps, cfg.antennas, cr)


def _cr_dir(out: Path, cr) -> Path:
    return out / "checkpoints" / f"cr{cr.numerator}_{cr.denominator}"


def _dataset_path(out: Path, scenario: str, n_train: int) -> Path:
    return out / "data" / f"{scenario}-{n_train}.csid"


def _check_dims(ds: ScenarioDataset, cfg: ExperimentConfig, source):
    want = (2, cfg.delay_taps, cfg.antennas)
    if ds.sample_shape != want:
        raise IntegrityError(f"dataset {source} has samples {ds.sample_shape}, config expects {want}")


def _slice(ds: ScenarioDataset, n_train, n_val, n_test, source) -> ScenarioDataset:
    have = ds.counts
    if have["train"] < n_train or have["val"] < n_val or have["test"] < n_test:
        raise ConfigError(f"dataset {source} has counts {have}, config needs "
                          f"train={n_train} val={n_val} test={n_test}")
    return ScenarioDataset(ds.scenario, ds.master_seed, ds.train[:n_train], ds.val[:n_val],
                           ds.test[:n_test])


def prepare_datasets(cfg: ExperimentConfig, out) -> dict:
    """Materialize every dataset the grid needs; returns ``{(scenario, kind): path}``.

    ``kind`` is ``"small"`` (multi-task) or ``"large"`` (single-task).  Presets
    are generated into ``out/data`` unless an identical file already exists.
    """
    out = Path(out)
    paths = {}
    kinds = []
    if "multi-task" in cfg.strategies:
        kinds.append(("small", cfg.train))
    if "single-task" in cfg.strategies:
        kinds.append(("large", cfg.large_train))
    for scenario in cfg.scenarios:
        if scenario not in PRESETS:
            ds = load_dataset(scenario)
            _check_dims(ds, cfg, scenario)
            for kind, n in kinds:
                _slice(ds, n, cfg.val, cfg.test, scenario)
                paths[(ds.scenario, kind)] = Path(scenario)
            continue
        profile = get_profile(scenario).with_dims(cfg.subcarriers, cfg.antennas, cfg.delay_taps)
        for kind, n in kinds:
            path = _dataset_path(out, scenario, n)
            counts = {"train": n, "val": cfg.val, "test": cfg.test}
            if not _matches(path, scenario, cfg, counts):
                path.parent.mkdir(parents=True, exist_ok=True)
                save_dataset(generate_dataset(profile, counts, cfg.seed), path)
            paths[(scenario, kind)] = path
    return paths


def _matches(path: Path, scenario, cfg, counts) -> bool:
    if not path.is_file():
        return False
    try:
        ds = load_dataset(path)
    except FormatError:
        return False
    return (ds.scenario == scenario and ds.master_seed == cfg.seed and ds.counts == counts
            and ds.sample_shape == (2, cfg.delay_taps, cfg.antennas))


def _load(cfg, paths, scenario, kind) -> ScenarioDataset:
    path = paths[(scenario, kind)]
    n = cfg.large_train if kind == "large" else cfg.train
    return _slice(load_dataset(path), n, cfg.val, cfg.test, path)


def scenario_ids(cfg: ExperimentConfig) -> tuple:
    """Scenario ids in config order (dataset files contribute their stored id)."""
    ids = []
    for s in cfg.scenarios:
        ids.append(s if s in PRESETS else load_dataset(s).scenario)
    return tuple(ids)


# --------------------------------------------------------------------------
# grid cells
# --------------------------------------------------------------------------


def _phase(base: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(base.learning_rate, base.batch_size, base.epochs, seed, base.shuffle,
                       base.validate_every)


def _write_log(path: Path, result, header: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {header}", "epoch\tloss\tseconds"]
    lines += [f"{e}\t{loss!r}\t{sec:.3f}" for e, loss, sec in result.log_rows]
    lines += [f"# val epoch {e}: {v!r}" for e, v in sorted(result.val_losses.items())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _pretrain_cell(cfg: ExperimentConfig, out: Path, paths: dict, ids: tuple, cr) -> list:
    label = cr_label(cr)
    data = [_load(cfg, paths, sc, "small") for sc in ids]
    combined = combine_datasets(data, cell_seed(cfg.seed, "combine", label))
    val = None
    if cfg.pretrain.validate_every:
        val = combine_datasets([d.val for d in data], cell_seed(cfg.seed, "combine-val", label)).samples
    seed = cell_seed(cfg.seed, "pretrain", label)
    model = build_model(_model_cfg(cfg, cr), seed=cell_seed(cfg.seed, "init", label),
                        architecture=cfg.architecture)
    result = pretrain(model, combined, _phase(cfg.pretrain, seed), val=val)
    folder = _cr_dir(out, cr)
    folder.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, folder / "pretrained.csim",
                    CheckpointMeta(model.cfg, seed, cfg.pretrain.epochs))
    _write_log(out / "logs" / f"pretrain-cr{cr.numerator}_{cr.denominator}.log", result,
               f"pretrain CR={label} seed={seed} samples={len(combined)}")
    enc = count_params(model, ENCODER)
    cells = []
    for sc, ds in zip(ids, data):
        lin, db = evaluate(result.model, ds.test)
        cells.append(Cell("pretrained", sc, cr, db, lin, ue_storage(enc, len(ids), "shared-encoder"),
                          cfg.train, result.seconds, seed))
    return cells


def _finetune_cell(cfg: ExperimentConfig, out: Path, paths: dict, ids: tuple, cr, scenario) -> list:
    label = cr_label(cr)
    mcfg = _model_cfg(cfg, cr)
    folder = _cr_dir(out, cr)
    general = assemble(mcfg, load_checkpoint(folder / "pretrained.csim"), architecture=cfg.architecture)
    ds = _load(cfg, paths, scenario, "small")
    seed = cell_seed(cfg.seed, "finetune", label, scenario)
    # train'_i is the first k samples of train_i, so it adds no distinct samples
    subset = ds.train[: cfg.finetune_count]
    val = ds.val if cfg.finetune.validate_every else None
    result = finetune(general, subset, _phase(cfg.finetune, seed), val=val)
    save_checkpoint(result.model, folder / f"{scenario}.decoder.csim",
                    CheckpointMeta(mcfg, seed, cfg.finetune.epochs), part=DECODER)
    _write_log(out / "logs" / f"finetune-cr{cr.numerator}_{cr.denominator}-{scenario}.log", result,
               f"finetune CR={label} scenario={scenario} seed={seed} samples={len(subset)}")
    lin, db = evaluate(result.model, ds.test)
    enc = count_params(general, ENCODER)
    return [Cell("multi-task", scenario, cr, db, lin, ue_storage(enc, len(ids), "shared-encoder"),
                 cfg.train, result.seconds, seed)]


def _single_cell(cfg: ExperimentConfig, out: Path, paths: dict, ids: tuple, cr, scenario) -> list:
    label = cr_label(cr)
    ds = _load(cfg, paths, scenario, "large")
    seed = cell_seed(cfg.seed, "single", label, scenario)
    val = ds.val if cfg.single.validate_every else None
    result = train_single_task(_model_cfg(cfg, cr), ds.train, _phase(cfg.single, seed), val=val,
                               init_seed=cell_seed(cfg.seed, "init", label),
                               architecture=cfg.architecture)
    folder = _cr_dir(out, cr)
    folder.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, folder / f"{scenario}.single.csim",
                    CheckpointMeta(result.model.cfg, seed, cfg.single.epochs))
    _write_log(out / "logs" / f"single-cr{cr.numerator}_{cr.denominator}-{scenario}.log", result,
               f"single-task CR={label} scenario={scenario} seed={seed} samples={len(ds.train)}")
    lin, db = evaluate(result.model, ds.test)
    enc = count_params(result.model, ENCODER)
    return [Cell("single-task", scenario, cr, db, lin, ue_storage(enc, len(ids), "single-task"),
                 cfg.large_train, result.seconds, seed)]


_CELLS = {"pretrain": _pretrain_cell, "finetune": _finetune_cell, "single": _single_cell}


def _run_task(task):
    kind, args = task
    with threadpool_limits(limits=1):
        return _CELLS[kind](*args)


def resolve_jobs(jobs: int | None, cfg: ExperimentConfig | None = None) -> int:
    """Worker count: the environment override wins, then ``jobs``, then the config."""
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from None
    else:
        value = jobs if jobs is not None else (cfg.jobs if cfg else 1)
    if value < 1:
        raise ConfigError(f"worker count must be >= 1, got {value}")
    return value


def _execute(tasks: list, jobs: int) -> list:
    if jobs == 1 or len(tasks) <= 1:
        results = [_run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            results = list(pool.map(_run_task, tasks))
    return [cell for group in results for cell in group]


def _record(out: Path, cells: list):
    with open(out / "cells.jsonl", "a", encoding="utf-8") as fh:
        for cell in cells:
            fh.write(cell.to_json() + "\n")


def _start(cfg: ExperimentConfig, out):
    cfg.validate()
    out = Path(cfg.output if out is None else out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.cfg").write_text(dump_config(cfg), encoding="utf-8")
    paths = prepare_datasets(cfg, out)
    return out, paths, scenario_ids(cfg)


def run_phase(cfg: ExperimentConfig, phase: str, out=None, jobs: int | None = None) -> list:
    """Run one phase ("pretrain", "finetune" or "single") over every CR (and scenario)."""
    if phase not in _CELLS:
        raise ConfigError(f"unknown phase {phase!r}")
    needed = "single-task" if phase == "single" else "multi-task"
    if needed not in cfg.strategies:
        raise ConfigError(f"phase {phase!r} needs strategy {needed!r} in the config")
    out, paths, ids = _start(cfg, out)
    if phase == "pretrain":
        tasks = [("pretrain", (cfg, out, paths, ids, cr)) for cr in cfg.crs]
    else:
        if phase == "finetune":
            for cr in cfg.crs:
                if not (_cr_dir(out, cr) / "pretrained.csim").is_file():
                    raise ConfigError(f"no pretrained checkpoint for CR={cr_label(cr)} in {out}; "
                                      "run the pretrain phase first")
        tasks = [(phase, (cfg, out, paths, ids, cr, sc)) for cr in cfg.crs for sc in ids]
    cells = _execute(tasks, resolve_jobs(jobs, cfg))
    _record(out, cells)
    return cells


def run_experiment(cfg: ExperimentConfig, out=None, jobs: int | None = None) -> ExperimentReport:
    """Run the full (strategy x scenario x CR) grid and return its report.

    Unknown scenarios or ratios fail in validation, before any training.
    """
    out, paths, ids = _start(cfg, out)
    jobs = resolve_jobs(jobs, cfg)
    first = []
    if not ids or not cfg.crs:
        report = ExperimentReport(cfg, {}, ids)
        write_report(report, out)
        return report
    if "multi-task" in cfg.strategies:
        first += [("pretrain", (cfg, out, paths, ids, cr)) for cr in cfg.crs]
    if "single-task" in cfg.strategies:
        first += [("single", (cfg, out, paths, ids, cr, sc)) for cr in cfg.crs for sc in ids]
    cells = _execute(first, jobs)
    if "multi-task" in cfg.strategies:
        cells += _execute([("finetune", (cfg, out, paths, ids, cr, sc))
                           for cr in cfg.crs for sc in ids], jobs)
    _record(out, cells)
    report = ExperimentReport(cfg, {c.key: c for c in cells}, ids)
    write_report(report, out)
    return report


# --------------------------------------------------------------------------
# report files
# --------------------------------------------------------------------------


def load_report(directory) -> ExperimentReport:
    """Rebuild the report of an experiment directory from its config and cells."""
    directory = Path(directory)
    cfg_path = directory / "experiment.cfg"
    if not cfg_path.is_file():
        raise ConfigError(f"{directory} is not an experiment directory (no experiment.cfg)")
    cfg = load_config(cfg_path)
    cells = {}
    cells_path = directory / "cells.jsonl"
    if cells_path.is_file():
        for line in cells_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                cell = Cell.from_json(line)
                cells[cell.key] = cell  # later records supersede earlier ones
    try:
        ids = scenario_ids(cfg)
    except (OSError, FormatError):
        ids = tuple(cfg.scenarios)
    return ExperimentReport(cfg, cells, ids)


def write_report(report: ExperimentReport, directory) -> tuple:
    directory = Path(directory)
    txt, csv_path = directory / "report.txt", directory / "report.csv"
    txt.write_text(report.text(), encoding="utf-8")
    csv_path.write_text(report.csv_text(), encoding="utf-8")
    return txt, csv_path


def read_csv(path) -> list:
    """Parse a report CSV back into dict rows, checking the header."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != CSV_HEADER:
            raise FormatError(f"unexpected report header {header}", 0)
        return [dict(zip(CSV_HEADER, row)) for row in reader]
