"""Command line front end: single runs, sweeps and summaries.

Config schema (one JSON object; every key except ``population.source`` is
optional and falls back to the default shown)::

    {
      "population": {
        "num_clients": 50, "num_clusters": 2, "minority_fraction": 0.1,
        "samples_per_client": 100, "deformation": "rotation",
        "majority_range": [25, 50], "minority_range": [0, 25],
        "shadow_pool_size": 3000, "test_size_per_group": 500,
        "synthetic_dim": 20, "synthetic_classes": 4,
        "source": {"images": "path/images-idx3-ubyte.gz", "labels": "path/labels-idx1-ubyte.gz"}
      },
      "model": {"family": "softmax-linear", "hidden_dim": 0},
      "algorithm": "ifca-mir", "rounds": 100, "learning_rate": 0.5,
      "batch_size": 100, "local_steps": 5, "eval_period": 5, "shadow_count": 3,
      "init": "farthest-first", "alpha_policy": "threshold:0:1",
      "threshold_range": [0.5, 0.8], "repeats": 5, "seed": 0,
      "redteam": {"attack_epochs": 60, "attack_batch_size": 64,
                  "attack_learning_rate": 0.2, "attack_l2": 1e-4, "eval_fraction": 0.2}
    }

``source`` is required for image deformations and must be null or absent for
``synthetic-mean-shift``; relative paths resolve against the config file.
``IFCAMIR_OUT_DIR`` and ``IFCAMIR_SEED`` override the output directory and
base seed; command line flags override both.

results.csv columns are ``RESULT_COLUMNS``; wall-clock time lives only in
results.json so that results.csv is byte-reproducible.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import re
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import datagen, fedcore, metrics, numkit, redteam
from .datagen import MAJORITY, MINORITY, AlphaPolicy, PopulationSpec
from .errors import FormatError, InputError

log = logging.getLogger(__name__)

ENV_OUT_DIR = "IFCAMIR_OUT_DIR"
ENV_SEED = "IFCAMIR_SEED"
AXES = ("minority-fraction", "deformation-gap")

RESULT_COLUMNS = (
    "run_id", "seed", "repeat", "algorithm", "axis", "axis_value",
    "acc_overall", "acc_minority", "acc_majority",
    "mia_minority", "mia_majority", "mia_clusters", "cluster_sizes",
    "violations", "dp_diff", "eo_diff", "eodds_diff",
    "rounds_done", "complete",
)
ROUND_COLUMNS = ("run_id", "round", "cluster", "members", "risk", "mean_selected_loss", "clients")
SUMMARY_METRICS = (
    "acc_overall", "acc_minority", "acc_majority", "mia_minority", "mia_majority",
    "violations", "dp_diff", "eo_diff", "eodds_diff",
)


class ConfigError(InputError):
    pass


# -- config ------------------------------------------------------------------


@dataclass(frozen=True)
class SourceFiles:
    images: str
    labels: str


@dataclass(frozen=True)
class PopulationConfig:
    num_clients: int = 50
    num_clusters: int = 2
    minority_fraction: float = 0.1
    samples_per_client: int = 100
    deformation: str = "rotation"
    majority_range: tuple[float, float] = (25.0, 50.0)
    minority_range: tuple[float, float] = (0.0, 25.0)
    shadow_pool_size: int = 3000
    test_size_per_group: int = 500
    synthetic_dim: int = 20
    synthetic_classes: int = 4
    source: SourceFiles | None = None

    def spec(self, seed: int) -> PopulationSpec:
        return PopulationSpec(
            self.num_clients, self.num_clusters, self.minority_fraction, self.samples_per_client,
            self.deformation, self.majority_range, self.minority_range, self.shadow_pool_size,
            seed, self.test_size_per_group, self.synthetic_dim, self.synthetic_classes,
        )


@dataclass(frozen=True)
class ModelConfig:
    family: str = "softmax-linear"
    hidden_dim: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    population: PopulationConfig = field(default_factory=PopulationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    algorithm: str = "ifca-mir"
    rounds: int = 100
    learning_rate: float = 0.5
    batch_size: int = 100
    local_steps: int = 5
    eval_period: int = 5
    shadow_count: int = 3
    init: str = "farthest-first"
    alpha_policy: str = "threshold:0:1"
    threshold_range: tuple[float, float] = (0.5, 0.8)
    repeats: int = 5
    seed: int = 0
    redteam: redteam.RedTeamSettings = field(default_factory=redteam.RedTeamSettings)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def with_population(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, population=dataclasses.replace(self.population, **changes))


def _key_line(text: str, path: Sequence[str]) -> int | None:
    """Line of the last key in ``path``, searching each key after its parent."""
    pos = 0
    for key in path:
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            return None
        pos = m.start()
    return text.count("\n", 0, pos) + 1


class _Reader:
    """Typed field access that reports errors as ``file:line: message``."""

    def __init__(self, text: str, origin: str):
        self.text = text
        self.origin = origin

    def fail(self, path: Sequence[str], message: str) -> ConfigError:
        line = _key_line(self.text, path) if path else None
        where = f"{self.origin}:{line}" if line else self.origin
        name = ".".join(path)
        return ConfigError(f"{where}: {name}: {message}" if name else f"{where}: {message}")

    def section(self, data: dict, path: list[str], known: Iterable[str]) -> dict:
        if not isinstance(data, dict):
            raise self.fail(path, "expected a JSON object")
        for key in data:
            if key not in known:
                raise self.fail(path + [key], "unknown key")
        return data

    def number(self, data: dict, path: list[str], default, *, integer=False, positive=False, minimum=None):
        key = path[-1]
        if key not in data:
            return default
        value = data[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.fail(path, f"expected a number, got {json.dumps(value)}")
        if integer:
            if float(value) != int(value):
                raise self.fail(path, f"expected an integer, got {value}")
            value = int(value)
        elif not math.isfinite(value):
            raise self.fail(path, "must be finite")
        if positive and not value > 0:
            raise self.fail(path, f"must be positive, got {value}")
        if minimum is not None and value < minimum:
            raise self.fail(path, f"must be >= {minimum}, got {value}")
        return value if integer else float(value)

    def text_field(self, data: dict, path: list[str], default: str, choices: Sequence[str] | None = None) -> str:
        key = path[-1]
        if key not in data:
            return default
        value = data[key]
        if not isinstance(value, str):
            raise self.fail(path, f"expected a string, got {json.dumps(value)}")
        if choices is not None and value not in choices:
            raise self.fail(path, f"must be one of {', '.join(choices)}; got {value!r}")
        return value

    def pair(self, data: dict, path: list[str], default: tuple[float, float]) -> tuple[float, float]:
        key = path[-1]
        if key not in data:
            return default
        value = data[key]
        if (
            not isinstance(value, list)
            or len(value) != 2
            or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value)
        ):
            raise self.fail(path, f"expected [low, high], got {json.dumps(value)}")
        lo, hi = float(value[0]), float(value[1])
        if not lo <= hi:
            raise self.fail(path, f"low {lo} exceeds high {hi}")
        return lo, hi


def _resolve(path: str, base: Path | None) -> str:
    p = Path(path).expanduser()
    if not p.is_absolute() and base is not None:
        p = base / p
    return str(p.resolve())


def parse_config(text: str, origin: str = "<config>", base_dir: Path | None = None) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{origin}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    r = _Reader(text, origin)
    top_keys = [f.name for f in dataclasses.fields(ExperimentConfig)]
    r.section(raw, [], top_keys)

    pd = r.section(raw.get("population", {}), ["population"], [f.name for f in dataclasses.fields(PopulationConfig)])
    P = ["population"]
    d = PopulationConfig()
    source = None
    if pd.get("source") is not None:
        sd = r.section(pd["source"], P + ["source"], ["images", "labels"])
        for k in ("images", "labels"):
            if not isinstance(sd.get(k), str):
                raise r.fail(P + ["source", k], "expected a file path string")
        source = SourceFiles(_resolve(sd["images"], base_dir), _resolve(sd["labels"], base_dir))
    population = PopulationConfig(
        num_clients=r.number(pd, P + ["num_clients"], d.num_clients, integer=True, positive=True),
        num_clusters=r.number(pd, P + ["num_clusters"], d.num_clusters, integer=True, positive=True),
        minority_fraction=r.number(pd, P + ["minority_fraction"], d.minority_fraction, positive=True),
        samples_per_client=r.number(pd, P + ["samples_per_client"], d.samples_per_client, integer=True, positive=True),
        deformation=r.text_field(pd, P + ["deformation"], d.deformation, ("rotation", "brightness", "synthetic-mean-shift")),
        majority_range=r.pair(pd, P + ["majority_range"], d.majority_range),
        minority_range=r.pair(pd, P + ["minority_range"], d.minority_range),
        shadow_pool_size=r.number(pd, P + ["shadow_pool_size"], d.shadow_pool_size, integer=True, minimum=2),
        test_size_per_group=r.number(pd, P + ["test_size_per_group"], d.test_size_per_group, integer=True, positive=True),
        synthetic_dim=r.number(pd, P + ["synthetic_dim"], d.synthetic_dim, integer=True, positive=True),
        synthetic_classes=r.number(pd, P + ["synthetic_classes"], d.synthetic_classes, integer=True, minimum=2),
        source=source,
    )
    if not population.minority_fraction < 1:
        raise r.fail(P + ["minority_fraction"], "must lie in (0, 1)")
    if population.num_clusters > population.num_clients:
        raise r.fail(P + ["num_clusters"], "cannot exceed num_clients")
    synthetic = population.deformation == "synthetic-mean-shift"
    if synthetic and source is not None:
        raise r.fail(P + ["source"], "synthetic-mean-shift generates its own data; remove source")
    if not synthetic and source is None:
        raise r.fail(P + ["deformation"], f"{population.deformation} needs population.source")
    if population.deformation == "brightness":
        for k in ("majority_range", "minority_range"):
            if getattr(population, k)[0] <= 0:
                raise r.fail(P + [k], "brightness factors must be positive")

    md = r.section(raw.get("model", {}), ["model"], ["family", "hidden_dim"])
    model = ModelConfig(
        family=r.text_field(md, ["model", "family"], "softmax-linear", ("softmax-linear", "mlp-1hidden")),
        hidden_dim=r.number(md, ["model", "hidden_dim"], 0, integer=True, minimum=0),
    )
    if model.family == "mlp-1hidden" and model.hidden_dim < 1:
        raise r.fail(["model", "hidden_dim"], "mlp-1hidden needs hidden_dim >= 1")

    rd = r.section(raw.get("redteam", {}), ["redteam"], [f.name for f in dataclasses.fields(redteam.RedTeamSettings)])
    rdef = redteam.RedTeamSettings()
    red = redteam.RedTeamSettings(
        attack_epochs=r.number(rd, ["redteam", "attack_epochs"], rdef.attack_epochs, integer=True, positive=True),
        attack_batch_size=r.number(rd, ["redteam", "attack_batch_size"], rdef.attack_batch_size, integer=True, positive=True),
        attack_learning_rate=r.number(rd, ["redteam", "attack_learning_rate"], rdef.attack_learning_rate, positive=True),
        attack_l2=r.number(rd, ["redteam", "attack_l2"], rdef.attack_l2, minimum=0),
        eval_fraction=r.number(rd, ["redteam", "eval_fraction"], rdef.eval_fraction, positive=True),
    )
    if not red.eval_fraction < 1:
        raise r.fail(["redteam", "eval_fraction"], "must lie in (0, 1)")

    e = ExperimentConfig()
    alpha_text = r.text_field(raw, ["alpha_policy"], e.alpha_policy)
    try:
        AlphaPolicy.parse(alpha_text)
    except InputError as exc:
        raise r.fail(["alpha_policy"], str(exc)) from None
    thresholds = r.pair(raw, ["threshold_range"], e.threshold_range)
    if not 0.5 <= thresholds[0] <= thresholds[1] <= 1.0:
        raise r.fail(["threshold_range"], f"{list(thresholds)} must lie within [0.5, 1.0]")
    config = ExperimentConfig(
        population=population,
        model=model,
        algorithm=r.text_field(raw, ["algorithm"], e.algorithm, fedcore.ALGORITHMS),
        rounds=r.number(raw, ["rounds"], e.rounds, integer=True, positive=True),
        learning_rate=r.number(raw, ["learning_rate"], e.learning_rate, positive=True),
        batch_size=r.number(raw, ["batch_size"], e.batch_size, integer=True, positive=True),
        local_steps=r.number(raw, ["local_steps"], e.local_steps, integer=True, positive=True),
        eval_period=r.number(raw, ["eval_period"], e.eval_period, integer=True, positive=True),
        shadow_count=r.number(raw, ["shadow_count"], e.shadow_count, integer=True, positive=True),
        init=r.text_field(raw, ["init"], e.init, fedcore.INITS),
        alpha_policy=alpha_text,
        threshold_range=thresholds,
        repeats=r.number(raw, ["repeats"], e.repeats, integer=True, positive=True),
        seed=r.number(raw, ["seed"], e.seed, integer=True, minimum=0),
        redteam=red,
    )
    if config.batch_size > population.samples_per_client:
        raise r.fail(["batch_size"], f"exceeds population.samples_per_client ({population.samples_per_client})")
    return config


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    return parse_config(text, str(path), path.parent)


def config_json(config: ExperimentConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"


# -- running -----------------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    """One (run, repeat) outcome; metric fields are None when no round completed."""

    run_id: str
    seed: int
    repeat: int
    algorithm: str
    axis: str
    axis_value: float | None
    acc_overall: float | None
    acc_minority: float | None
    acc_majority: float | None
    mia_minority: float | None
    mia_majority: float | None
    mia_clusters: tuple[float | None, ...]
    cluster_sizes: tuple[int, ...]
    violations: int | None
    dp_diff: float | None
    eo_diff: float | None
    eodds_diff: float | None
    rounds_done: int
    complete: bool
    wall_seconds: float

    def csv_record(self) -> list[str]:
        out = []
        for name in RESULT_COLUMNS:
            value = getattr(self, name)
            if name in ("mia_clusters", "cluster_sizes"):
                out.append(";".join(_fmt(v) for v in value))
            else:
                out.append(_fmt(value))
        return out


@dataclass(frozen=True)
class RunOutcome:
    row: ResultRow
    rounds: tuple[tuple[str, ...], ...]
    evaluation: metrics.RunEvaluation | None = field(default=None, compare=False)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.9g}"
    return str(value)


@lru_cache(maxsize=4)
def _load_source(images: str, labels: str) -> datagen.Dataset:
    return datagen.load_idx(images, labels)


def build_population(config: ExperimentConfig, seed: int) -> datagen.Population:
    pc = config.population
    source = None if pc.source is None else _load_source(pc.source.images, pc.source.labels)
    return datagen.synthesize_population(pc.spec(seed), source)


def train_settings(config: ExperimentConfig, population: datagen.Population, seed: int) -> fedcore.TrainSettings:
    spec = numkit.ModelSpec(
        config.model.family, population.input_dim, population.num_classes, config.model.hidden_dim
    )
    return fedcore.TrainSettings(
        spec, config.algorithm, config.rounds, config.learning_rate, config.batch_size,
        config.local_steps, config.eval_period, config.shadow_count, seed, config.init, config.redteam,
    )


def run_id_for(config: ExperimentConfig, seed: int, axis: str = "", axis_value: float | None = None) -> str:
    point = f"-{axis}={_fmt(axis_value)}" if axis else ""
    return f"{config.algorithm}{point}-seed{seed}"


def run_single(
    config: ExperimentConfig,
    repeat: int = 0,
    axis: str = "",
    axis_value: float | None = None,
    max_seconds: float | None = None,
) -> RunOutcome:
    """Train and evaluate one repeat (seed = config.seed + repeat)."""
    started = time.monotonic()
    seed = config.seed + repeat
    population = build_population(config, seed)
    profiles = datagen.assign_client_profiles(
        len(population.clients), AlphaPolicy.parse(config.alpha_policy), config.threshold_range, seed, population.groups
    )
    settings = train_settings(config, population, seed)
    deadline = None if max_seconds is None else started + max_seconds
    run = fedcore.train(
        population.clients, profiles, population.shadow_pool, config.population.num_clusters, settings, deadline
    )
    run_id = run_id_for(config, seed, axis, axis_value)
    rounds = tuple(
        (
            run_id, _fmt(rec.round), _fmt(j), _fmt(rec.member_counts[j]), _fmt(rec.risks[j]),
            _fmt(float(np.mean([l for l, a in zip(rec.selected_loss, rec.assignment) if a == j]))
                 if rec.member_counts[j] else None),
            ";".join(str(c) for c, a in zip(rec.client_ids, rec.assignment) if a == j),
        )
        for rec in run.rounds
        for j in range(run.final.size)
    )
    evaluation = metrics.evaluate_run(population, run, profiles) if run.rounds else None
    common = dict(
        run_id=run_id, seed=seed, repeat=repeat, algorithm=config.algorithm, axis=axis, axis_value=axis_value,
        rounds_done=len(run.rounds), complete=run.completed,
    )
    if evaluation is None:
        row = ResultRow(
            **common, acc_overall=None, acc_minority=None, acc_majority=None, mia_minority=None,
            mia_majority=None, mia_clusters=(), cluster_sizes=(), violations=None, dp_diff=None,
            eo_diff=None, eodds_diff=None, wall_seconds=time.monotonic() - started,
        )
    else:
        ev = evaluation
        row = ResultRow(
            **common,
            acc_overall=ev.accuracy.overall,
            acc_minority=ev.accuracy.get(MINORITY),
            acc_majority=ev.accuracy.get(MAJORITY),
            mia_minority=ev.group_mia.get(MINORITY),
            mia_majority=ev.group_mia.get(MAJORITY),
            mia_clusters=ev.cluster_mia,
            cluster_sizes=ev.cluster_members,
            violations=ev.violations.total,
            dp_diff=ev.fairness.dp_diff,
            eo_diff=ev.fairness.eo_diff,
            eodds_diff=ev.fairness.eodds_diff,
            wall_seconds=time.monotonic() - started,
        )
    log.info("%s done in %.1fs (%d rounds)", run_id, row.wall_seconds, row.rounds_done)
    return RunOutcome(row, rounds, evaluation)


def apply_axis(config: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    """Config for one sweep point; gap ``v`` means ranges [0, v] / [v, 2v] (brightness: [0.5, 0.8] / [v, v + 0.3])."""
    if axis == "minority-fraction":
        if not 0 < value < 1:
            raise InputError(f"minority fraction {value} must lie in (0, 1)")
        return config.with_population(minority_fraction=float(value))
    if axis == "deformation-gap":
        if not value > 0:
            raise InputError(f"deformation gap {value} must be positive")
        if config.population.deformation == "brightness":
            return config.with_population(minority_range=(0.5, 0.8), majority_range=(float(value), float(value) + 0.3))
        return config.with_population(minority_range=(0.0, float(value)), majority_range=(float(value), 2.0 * float(value)))
    raise InputError(f"unknown axis {axis!r}; choose from {', '.join(AXES)}")


@dataclass(frozen=True)
class Job:
    config: ExperimentConfig
    repeat: int
    axis: str = ""
    axis_value: float | None = None


def _execute(job: Job, max_seconds: float | None) -> RunOutcome:
    outcome = run_single(job.config, job.repeat, job.axis, job.axis_value, max_seconds)
    return dataclasses.replace(outcome, evaluation=None)  # keep results picklable and small


def execute_jobs(jobs: Sequence[Job], workers: int = 1, max_seconds: float | None = None) -> list[RunOutcome]:
    """Run jobs, concurrently when ``workers > 1``; output order follows ``jobs``."""
    if workers <= 1 or len(jobs) <= 1:
        return [_execute(j, max_seconds) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_execute, j, max_seconds) for j in jobs]
        return [f.result() for f in futures]


def _sort_key(outcome: RunOutcome):
    r = outcome.row
    return (r.algorithm, r.axis, -math.inf if r.axis_value is None else r.axis_value, r.seed)


# -- output ------------------------------------------------------------------


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def csv_text(header: Sequence[str], records: Iterable[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")  # RFC 4180 line endings and minimal quoting
    w.writerow(header)
    w.writerows(records)
    return buf.getvalue()


def write_results(out_dir: Path, config: ExperimentConfig, outcomes: Sequence[RunOutcome], extra: dict | None = None) -> None:
    outcomes = sorted(outcomes, key=_sort_key)
    write_atomic(out_dir / "results.csv", csv_text(RESULT_COLUMNS, (o.row.csv_record() for o in outcomes)))
    write_atomic(out_dir / "rounds.csv", csv_text(ROUND_COLUMNS, (rec for o in outcomes for rec in o.rounds)))
    payload = {"config": config.to_dict(), **(extra or {}), "rows": [dataclasses.asdict(o.row) for o in outcomes]}
    write_atomic(out_dir / "results.json", json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
    write_atomic(out_dir / "config.echo.json", config_json(config))


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


# -- report ------------------------------------------------------------------


@dataclass(frozen=True)
class SummaryRow:
    algorithm: str
    axis: str
    axis_value: str
    count: int
    stats: dict[str, tuple[float, float]]  # metric -> (mean, sample std)


def read_results(path: Path) -> list[dict[str, str]]:
    try:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            header = tuple(reader.fieldnames or ())
            rows = list(reader)
    except (OSError, csv.Error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: unreadable results file ({exc})") from None
    if header != RESULT_COLUMNS:
        missing = [c for c in RESULT_COLUMNS if c not in header]
        extra = [c for c in header if c not in RESULT_COLUMNS]
        raise FormatError(f"{path}: results schema mismatch (missing {missing or 'none'}, unexpected {extra or 'none'})")
    for i, row in enumerate(rows, start=2):
        if None in row or any(v is None for v in row.values()):
            raise FormatError(f"{path}:{i}: wrong number of fields")
    return rows


def _value(text: str, path: Path, column: str) -> float:
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise FormatError(f"{path}: column {column} holds non-numeric {text!r}") from None


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1) of the finite values; NaN where undefined."""
    finite = np.asarray([v for v in values if math.isfinite(v)], dtype=np.float64)
    if finite.size == 0:
        return math.nan, math.nan
    std = float(finite.std(ddof=1)) if finite.size > 1 else math.nan
    return float(finite.mean()), std


def summarize(results_dir: Path) -> list[SummaryRow]:
    results_dir = Path(results_dir)
    if not results_dir.is_dir():
        raise InputError(f"{results_dir}: not a directory")
    files = sorted(p for p in results_dir.rglob("results*.csv"))
    if not files:
        raise InputError(f"{results_dir}: no results*.csv files found")
    groups: dict[tuple[str, str, str], list[dict[str, float]]] = {}
    for path in files:
        for row in read_results(path):
            if row["complete"] != "1":
                continue
            key = (row["algorithm"], row["axis"], row["axis_value"])
            groups.setdefault(key, []).append({m: _value(row[m], path, m) for m in SUMMARY_METRICS})
    out = []
    for (alg, axis, value), rows in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], _axis_sort(kv[0][2]))):
        stats = {m: mean_std([r[m] for r in rows]) for m in SUMMARY_METRICS}
        out.append(SummaryRow(alg, axis, value, len(rows), stats))
    return out


def _axis_sort(text: str) -> float:
    return -math.inf if text == "" else float(text)


def summary_csv(rows: Sequence[SummaryRow]) -> str:
    header = ["algorithm", "axis", "axis_value", "n"]
    for m in SUMMARY_METRICS:
        header += [f"{m}_mean", f"{m}_std"]
    records = []
    for r in rows:
        rec = [r.algorithm, r.axis, r.axis_value, str(r.count)]
        for m in SUMMARY_METRICS:
            mean, std = r.stats[m]
            rec += [_fmt_nan(mean), _fmt_nan(std)]
        records.append(rec)
    return csv_text(header, records)


def _fmt_nan(x: float) -> str:
    return "" if math.isnan(x) else f"{x:.9g}"


def render_summary(rows: Sequence[SummaryRow]) -> str:
    cols = ("acc_overall", "acc_minority", "acc_majority", "mia_minority", "mia_majority", "violations", "dp_diff", "eo_diff", "eodds_diff")
    lines = ["algorithm  axis                 value     n  " + "  ".join(f"{c:>17}" for c in cols)]
    for r in rows:
        cells = []
        for c in cols:
            mean, std = r.stats[c]
            cells.append(f"{mean:8.4f} ± {std:6.4f}" if not math.isnan(std) else f"{mean:8.4f}         ")
        lines.append(f"{r.algorithm:<10} {r.axis or '-':<20} {r.axis_value or '-':<8} {r.count:>2}  " + "  ".join(f"{c:>17}" for c in cells))
    return "\n".join(lines)


# -- commands ----------------------------------------------------------------


def _out_dir(arg: str | None) -> Path:
    value = arg or os.environ.get(ENV_OUT_DIR)
    if not value:
        raise InputError(f"no output directory: pass --out or set {ENV_OUT_DIR}")
    return Path(value)


def _with_seed_override(config: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    if seed is None and os.environ.get(ENV_SEED):
        try:
            seed = int(os.environ[ENV_SEED])
        except ValueError:
            raise InputError(f"{ENV_SEED} must be an integer, got {os.environ[ENV_SEED]!r}") from None
    if seed is None:
        return config
    if seed < 0:
        raise InputError("seed must be >= 0")
    return config.replace(seed=seed)


def cmd_run(config_path, out_dir, seed=None, max_seconds=None, workers=1) -> int:
    config = _with_seed_override(load_config(config_path), seed)
    out = _out_dir(out_dir)
    jobs = [Job(config, r) for r in range(config.repeats)]
    outcomes = execute_jobs(jobs, workers, max_seconds)
    write_results(out, config, outcomes)
    return 0 if all(o.row.complete for o in outcomes) else 3


def parse_values(text: str) -> list[float]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise InputError("--values needs at least one value")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise InputError(f"--values must be a comma separated list of numbers, got {text!r}") from None


def sweep_jobs(config: ExperimentConfig, axis: str, values: Sequence[float]) -> list[Job]:
    if not values:
        raise InputError("sweep needs at least one value")
    jobs = []
    for value in values:
        point = apply_axis(config, axis, value)
        for algorithm in fedcore.ALGORITHMS:
            variant = point.replace(algorithm=algorithm)
            jobs += [Job(variant, r, axis, float(value)) for r in range(config.repeats)]
    return jobs


def cmd_sweep(config_path, axis, values, out_dir, seed=None, max_seconds=None, workers=1) -> int:
    config = _with_seed_override(load_config(config_path), seed)
    vals = parse_values(values) if isinstance(values, str) else list(values)
    jobs = sweep_jobs(config, axis, vals)
    out = _out_dir(out_dir)
    outcomes = execute_jobs(jobs, workers, max_seconds)
    write_results(out, config, outcomes, {"sweep": {"axis": axis, "values": vals}})
    return 0 if all(o.row.complete for o in outcomes) else 3


def cmd_report(results_dir) -> int:
    rows = summarize(Path(results_dir))
    print(render_summary(rows))
    write_atomic(Path(results_dir) / "summary.csv", summary_csv(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ifcamir", description="Clustered federated learning with MIA-aware cluster choice.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", help=f"output directory (default: ${ENV_OUT_DIR})")
        p.add_argument("--seed", type=int, help=f"base seed override (also ${ENV_SEED})")
        p.add_argument("--max-seconds", type=float, help="per-run wall-clock budget; late runs are marked incomplete")
        p.add_argument("--jobs", type=int, default=1, help="repeats to run concurrently (default 1)")

    common(sub.add_parser("run", help="train every repeat of one config"))
    sw = sub.add_parser("sweep", help="run both algorithms across values of one axis")
    common(sw)
    sw.add_argument("--axis", required=True, choices=AXES)
    sw.add_argument("--values", required=True, help="comma separated axis values")
    rp = sub.add_parser("report", help="summarize results*.csv files under a directory")
    rp.add_argument("--in", dest="results_dir", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed, args.max_seconds, args.jobs)
        if args.command == "sweep":
            return cmd_sweep(args.config, args.axis, args.values, args.out, args.seed, args.max_seconds, args.jobs)
        return cmd_report(args.results_dir)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
