"""Monte Carlo comparison of the three classifiers along one sweep axis.

Every trial draws all of its randomness from streams keyed by
``(seed, grid_index, trial_index, stage)``, so results do not depend on
the order trials run in, on how many run in parallel, or on which other
classifiers are enabled.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, kalman, lstm
from .classifiers import ClassificationError, LrtClassifier, evaluate, lrt_scores
from .em import EmConfig, EmError, fit
from .io import dumps, fmt_float
from .ssm import ModelParams, generate_dataset, make_rng

log = logging.getLogger(__name__)

SWEEPS = ("q_ratio", "r_ratio", "sequence_length", "train_size")
CLASSIFIERS = ("true", "em", "lstm")

# stream indices within a trial
STAGE_TRAIN, STAGE_TEST, STAGE_EM1, STAGE_EM2, STAGE_LSTM = range(5)

# (Q1, Q2, R1, R2) before the sweep value is applied
BASE_NOISE = {
    "q_ratio": (1e-5, 1e-5, 1e-3, 1e-3),
    "r_ratio": (1e-3, 1e-3, 1e-5, 1e-5),
    "sequence_length": (1e-5, 2e-5, 1e-3, 1e-3),
    "train_size": (1e-5, 2e-5, 1e-3, 1e-3),
}


def default_grid(sweep: str) -> list[float]:
    if sweep in ("q_ratio", "r_ratio"):
        return [float(v) for v in np.logspace(0, 4, 10)]
    if sweep == "sequence_length":
        return [10, 21, 45, 95, 200, 423, 894]
    if sweep == "train_size":
        return [20, 50, 126, 316, 794, 2000]
    raise ValueError(f"unknown sweep {sweep!r}; choose from {', '.join(SWEEPS)}")


@dataclass
class ExperimentConfig:
    sweep: str = "q_ratio"
    grid: list[float] | None = None
    T: int = 120
    n_train_per_class: int = 250
    n_test_per_class: int = 250
    n_mc: int = 100
    seed: int = 0
    classifiers: tuple[str, ...] = CLASSIFIERS
    Q1: float | None = None
    Q2: float | None = None
    R1: float | None = None
    R2: float | None = None
    F: float = 1.0
    H: float = 1.0
    mu0: float = 0.0
    Sigma0: float = 1e-4
    em: EmConfig = field(default_factory=EmConfig)
    lstm: lstm.TrainConfig = field(default_factory=lstm.TrainConfig)

    def __post_init__(self):
        if self.sweep not in SWEEPS:
            raise ValueError(f"unknown sweep {self.sweep!r}; choose from {', '.join(SWEEPS)}")
        if self.grid is None:
            self.grid = default_grid(self.sweep)
        self.grid = [float(v) for v in self.grid]
        if not self.grid:
            raise ValueError("grid must not be empty")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError("grid must be strictly increasing")
        if any(not v > 0 for v in self.grid):
            raise ValueError("grid values must be positive")
        if self.sweep == "sequence_length" and any(v != int(v) for v in self.grid):
            raise ValueError("sequence_length grid values must be integers")
        if self.sweep == "train_size" and any(v != int(v) or int(v) % 2 for v in self.grid):
            raise ValueError("train_size grid values must be even integers (equal classes)")
        for name in ("T", "n_train_per_class", "n_test_per_class", "n_mc"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        self.classifiers = tuple(self.classifiers)
        unknown = set(self.classifiers) - set(CLASSIFIERS)
        if unknown or not self.classifiers:
            raise ValueError(f"classifiers must be a non-empty subset of {CLASSIFIERS}, got {self.classifiers}")
        self.classifiers = tuple(c for c in CLASSIFIERS if c in self.classifiers)
        base = BASE_NOISE[self.sweep]
        for name, default in zip(("Q1", "Q2", "R1", "R2"), base):
            if getattr(self, name) is None:
                setattr(self, name, default)
        if isinstance(self.em, dict):
            self.em = EmConfig(**self.em)
        if isinstance(self.lstm, dict):
            self.lstm = lstm.TrainConfig(**self.lstm)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["classifiers"] = list(self.classifiers)
        d["em"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["em"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        d = dict(d)
        for key, kind in (("em", EmConfig), ("lstm", lstm.TrainConfig)):
            if key in d:
                sub = dict(d[key])
                allowed = {f.name for f in fields(kind)}
                bad = set(sub) - allowed
                if bad:
                    raise ValueError(f"unknown [{key}] keys: {', '.join(sorted(bad))}")
                for k, v in sub.items():
                    if isinstance(v, list):
                        sub[k] = tuple(v)
                d[key] = kind(**sub)
        return cls(**d)


@dataclass(frozen=True)
class GridPoint:
    value: float
    params1: ModelParams
    params2: ModelParams
    T: int
    n_train_per_class: int
    n_test_per_class: int


def resolve_point(config: ExperimentConfig, value: float) -> GridPoint:
    """Turn one sweep value into a model pair and dataset sizes."""
    Q1, Q2, R1, R2 = config.Q1, config.Q2, config.R1, config.R2
    T, n_train = config.T, config.n_train_per_class
    if config.sweep == "q_ratio":
        Q2 = Q1 * value
    elif config.sweep == "r_ratio":
        R2 = R1 * value
    elif config.sweep == "sequence_length":
        T = int(value)
    else:
        n_train = int(value) // 2

    def model(Q, R):
        return ModelParams.scalar(F=config.F, H=config.H, Q=Q, R=R, mu0=config.mu0, Sigma0=config.Sigma0)

    return GridPoint(value, model(Q1, R1), model(Q2, R2), T, n_train, config.n_test_per_class)


@dataclass
class TrialResult:
    grid_index: int
    trial_index: int
    accuracy: dict[str, float] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)
    wall_time: dict[str, float] = field(default_factory=dict)


def run_trial(
    point: GridPoint,
    key: tuple[int, int, int],
    classifiers=CLASSIFIERS,
    em_config: EmConfig | None = None,
    lstm_config: lstm.TrainConfig | None = None,
) -> TrialResult:
    """One Monte Carlo run: fresh train and test sets, then each classifier.

    ``key`` is ``(seed, grid_index, trial_index)``.  A failing classifier is
    recorded in ``failures`` under its name, tagged with the stage, and has
    no accuracy; the other classifiers are unaffected.
    """
    em_config = em_config or EmConfig()
    lstm_config = lstm_config or lstm.TrainConfig()
    seed, gi, ti = key
    res = TrialResult(gi, ti)

    t0 = time.perf_counter()
    test = generate_dataset(point.params1, point.params2, point.n_test_per_class, point.T,
                            make_rng(seed, gi, ti, STAGE_TEST))
    train = None
    if "em" in classifiers or "lstm" in classifiers:
        train = generate_dataset(point.params1, point.params2, point.n_train_per_class, point.T,
                                 make_rng(seed, gi, ti, STAGE_TRAIN))
    res.wall_time["data"] = time.perf_counter() - t0

    def lrt(p1, p2, provenance):
        labels, _, _ = lrt_scores(LrtClassifier(p1, p2, provenance), test)
        return evaluate(labels, test.labels)[1]

    for name in classifiers:
        t0 = time.perf_counter()
        stage = f"{name}-classify"
        try:
            if name == "true":
                res.accuracy[name] = lrt(point.params1, point.params2, "true")
            elif name == "em":
                stage = "em-fit"
                fit1 = fit(train.of_class(1), em_config, make_rng(seed, gi, ti, STAGE_EM1))
                fit2 = fit(train.of_class(2), em_config, make_rng(seed, gi, ti, STAGE_EM2))
                stage = "em-classify"
                res.accuracy[name] = lrt(fit1.params, fit2.params, "em-estimated")
            else:
                stage = "lstm-train"
                trained = lstm.train(train, lstm_config, make_rng(seed, gi, ti, STAGE_LSTM))
                stage = "lstm-classify"
                pred = lstm.predict_batch(trained.params, trained.normalizer, test)
                res.accuracy[name] = evaluate(pred, test.labels)[1]
        except (EmError, ClassificationError, kalman.KalmanError, lstm.NumericFault,
                np.linalg.LinAlgError, ValueError) as exc:
            res.failures[name] = f"[{stage}] {type(exc).__name__}: {exc}"
            log.warning("grid %d trial %d: %s failed: %s", gi, ti, name, res.failures[name])
        res.wall_time[name] = time.perf_counter() - t0
    return res


def aggregate(per_run) -> tuple[float, float]:
    """Mean and sample standard deviation (denominator n - 1; 0 for one value)."""
    x = np.asarray(per_run, dtype=float)
    if x.size == 0:
        raise ValueError("cannot aggregate an empty set of runs")
    if np.all(x == x[0]):
        # exact for identical runs, which floating-point summation is not
        return float(x[0]), 0.0
    return float(x.mean()), float(x.std(ddof=1))


@dataclass
class ResultRow:
    value: float
    classifier: str
    accuracies: list[float]  # successful runs, by trial index
    run_indices: list[int]
    n_failed: int
    failures: list[str]
    wall_time: float  # summed over trials, seconds

    @property
    def n_ok(self) -> int:
        return len(self.accuracies)

    @property
    def mean_std(self) -> tuple[float, float]:
        return aggregate(self.accuracies) if self.accuracies else (float("nan"), float("nan"))


@dataclass
class ResultTable:
    config: ExperimentConfig
    rows: list[ResultRow] = field(default_factory=list)
    data_time: float = 0.0

    @property
    def n_failed(self) -> int:
        return sum(r.n_failed for r in self.rows)

    def row(self, value: float, classifier: str) -> ResultRow:
        for r in self.rows:
            if r.value == value and r.classifier == classifier:
                return r
        raise KeyError((value, classifier))

    def means(self, classifier: str) -> np.ndarray:
        return np.array([r.mean_std[0] for r in self.rows if r.classifier == classifier])

    def format(self) -> str:
        lines = [f"{self.config.sweep:>16}  {'classifier':<10} {'mean':>8} {'std':>8} {'ok':>4} {'fail':>4}"]
        for r in self.rows:
            m, s = r.mean_std
            lines.append(f"{r.value:>16.6g}  {r.classifier:<10} {m:8.4f} {s:8.4f} {r.n_ok:4d} {r.n_failed:4d}")
        return "\n".join(lines)


RAW_HEADER = ["sweep_value", "classifier", "run_idx", "accuracy"]
SUMMARY_HEADER = ["sweep_value", "classifier", "acc_mean", "acc_std", "n_ok", "n_failed"]


def _rows_for_point(value: float, results: list[TrialResult], classifiers) -> list[ResultRow]:
    rows = []
    for name in classifiers:
        ok = [(r.trial_index, r.accuracy[name]) for r in results if name in r.accuracy]
        rows.append(ResultRow(
            value, name,
            [a for _, a in ok], [i for i, _ in ok],
            sum(name in r.failures for r in results),
            [f"trial {r.trial_index}: {r.failures[name]}" for r in results if name in r.failures],
            sum(r.wall_time.get(name, 0.0) for r in results),
        ))
    return rows


def _raw_lines(row: ResultRow, n_mc: int) -> list[list[str]]:
    acc = dict(zip(row.run_indices, row.accuracies))
    return [
        [fmt_float(row.value), row.classifier, str(i), fmt_float(acc[i]) if i in acc else ""]
        for i in range(n_mc)
    ]


def _trial_task(args):
    point, key, classifiers, em_config, lstm_config = args
    return run_trial(point, key, classifiers, em_config, lstm_config)


def default_workers() -> int:
    env = os.environ.get("LGSSM_WORKERS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError("LGSSM_WORKERS must be >= 1")
        return n
    return os.cpu_count() or 1


def run_sweep(
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
    workers: int = 1,
) -> ResultTable:
    """Run every grid point of ``config`` and aggregate.

    With ``out_dir``, the manifest is written first, raw rows are appended
    and flushed after each grid point (so an interrupted sweep leaves every
    completed point on disk) and the summary is written at the end.
    """
    table = ResultTable(config)
    manifest: dict = {
        "tool": "lgssm_bench",
        "version": __version__,
        "config": config.as_dict(),
        "seed": config.seed,
        "workers": workers,
        "started": datetime.now(timezone.utc).isoformat(),
        "status": "running",
    }
    raw_fh = writer = None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(dumps(manifest))
        raw_fh = (out / "raw.csv").open("w", newline="")
        writer = csv.writer(raw_fh, lineterminator="\n")
        writer.writerow(RAW_HEADER)
        raw_fh.flush()

    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for gi, value in enumerate(config.grid):
            point = resolve_point(config, value)
            tasks = [
                (point, (config.seed, gi, ti), config.classifiers, config.em, config.lstm)
                for ti in range(config.n_mc)
            ]
            results = list(pool.map(_trial_task, tasks)) if pool else [_trial_task(t) for t in tasks]
            results.sort(key=lambda r: r.trial_index)
            table.data_time += sum(r.wall_time["data"] for r in results)
            rows = _rows_for_point(value, results, config.classifiers)
            table.rows.extend(rows)
            if writer is not None:
                for row in rows:
                    writer.writerows(_raw_lines(row, config.n_mc))
                raw_fh.flush()
            log.info("grid point %d/%d (%s = %g) done", gi + 1, len(config.grid), config.sweep, value)
        manifest["status"] = "complete"
    except BaseException:
        manifest["status"] = "interrupted"
        raise
    finally:
        if pool is not None:
            pool.shutdown(wait=True, cancel_futures=True)
        if raw_fh is not None:
            raw_fh.close()
        if out is not None:
            manifest["finished"] = datetime.now(timezone.utc).isoformat()
            manifest["completed_points"] = len({r.value for r in table.rows})
            manifest["wall_time"] = {
                "data": table.data_time,
                **{c: sum(r.wall_time for r in table.rows if r.classifier == c) for c in config.classifiers},
            }
            manifest["failures"] = [f"{r.value:g}/{r.classifier} {f}" for r in table.rows for f in r.failures]
            (out / "manifest.json").write_text(dumps(manifest))
    if out is not None:
        write_summary(out / "summary.csv", table)
    return table


def write_summary(path, table: ResultTable) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in table.rows:
            m, s = r.mean_std
            w.writerow([fmt_float(r.value), r.classifier, fmt_float(m), fmt_float(s), r.n_ok, r.n_failed])
    return path


def read_raw(path) -> dict[tuple[float, str], list[float]]:
    """Per (sweep value, classifier) accuracies from a raw CSV, failed runs skipped."""
    out: dict[tuple[float, str], list[float]] = {}
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            key = (float(rec["sweep_value"]), rec["classifier"])
            lst = out.setdefault(key, [])
            if rec["accuracy"]:
                lst.append(float(rec["accuracy"]))
    return out
