"""Accuracy aggregation, time breakdowns, sampling-bias statistics, result files."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats


class EvaluationIncomplete(ValueError):
    pass


class BiasTestSetupError(ValueError):
    pass


class AccuracyMatrix:
    """Lower-triangular a[i][j], 1-based: accuracy on task j after task i."""

    def __init__(self, n_tasks: int):
        self.n_tasks = n_tasks
        self._a: dict[tuple[int, int], float] = {}

    def set(self, i: int, j: int, value: float):
        if not 1 <= j <= i <= self.n_tasks:
            raise IndexError(f"a[{i}][{j}] outside the lower triangle of {self.n_tasks} tasks")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self._a[(i, j)] = float(value)

    def get(self, i: int, j: int) -> float:
        try:
            return self._a[(i, j)]
        except KeyError:
            raise EvaluationIncomplete(f"a[{i}][{j}] was never evaluated") from None

    def row(self, i: int) -> list[float]:
        return [self.get(i, j) for j in range(1, i + 1)]

    def row_complete(self, i: int) -> bool:
        return all((i, j) in self._a for j in range(1, i + 1))

    def entries(self) -> list[tuple[int, int, float]]:
        return [(i, j, v) for (i, j), v in sorted(self._a.items())]

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "AccuracyMatrix":
        m = cls(len(rows))
        for i, row in enumerate(rows, 1):
            for j, v in enumerate(row, 1):
                m.set(i, j, v)
        return m


def accuracy_T(matrix: AccuracyMatrix, T: int | None = None) -> float:
    """Mean final accuracy over tasks 1..T using the snapshot after task T."""
    T = matrix.n_tasks if T is None else T
    return float(np.mean(matrix.row(T)))


@dataclass
class BreakdownRecord:
    iteration: int
    worker: int
    load: float = 0.0
    train: float = 0.0
    populate_buffer: float = 0.0
    augment_batch: float = 0.0
    wait: float = 0.0

    COLUMNS = ("load", "train", "populate_buffer", "augment_batch", "wait")

    def durations(self) -> tuple[float, ...]:
        return tuple(getattr(self, c) for c in self.COLUMNS)


def window_means(records: Sequence[BreakdownRecord], window: int = 35) -> list[dict[str, float]]:
    """Mean of each duration column over consecutive windows of ``window`` iterations."""
    out = []
    for start in range(0, len(records), window):
        chunk = records[start : start + window]
        row = {"first_iteration": chunk[0].iteration, "n": len(chunk)}
        for c in BreakdownRecord.COLUMNS:
            row[c] = float(np.mean([getattr(r, c) for r in chunk]))
        out.append(row)
    return out


@dataclass
class BiasReport:
    statistic: float
    p_value: float
    n_cells: int
    draws: int

    def format(self) -> str:
        return (
            f"chi_square: {self.statistic:.6g}\n"
            f"p_value: {self.p_value:.6g}\n"
            f"cells: {self.n_cells}\n"
            f"draws: {self.draws}\n"
        )


def bias_report(
    observed: Sequence[int] | np.ndarray,
    expected: float | Sequence[float] | None = None,
    draws: int | None = None,
    r: int = 1,
) -> BiasReport:
    """Pearson chi-square of per-slot selection counts against uniform.

    ``expected`` defaults to ``r * draws / M`` for every one of the M slots.
    """
    observed = np.asarray(observed, dtype=np.float64).ravel()
    if observed.size == 0:
        raise BiasTestSetupError("no slots to test")
    if expected is None:
        if draws is None:
            raise BiasTestSetupError("give either expected counts or the number of draws")
        expected = r * draws / observed.size
    exp = np.broadcast_to(np.asarray(expected, dtype=np.float64), observed.shape)
    if np.any(exp <= 0):
        raise BiasTestSetupError("expected count of zero for some slot")
    if not np.isclose(exp.sum(), observed.sum(), rtol=1e-9):
        raise BiasTestSetupError(
            f"observed total {observed.sum():g} differs from expected total {exp.sum():g}"
        )
    if np.allclose(observed, exp):
        return BiasReport(0.0, 1.0, observed.size, int(draws or 0))
    stat, p = stats.chisquare(observed, exp)
    return BiasReport(float(stat), float(p), observed.size, int(draws or 0))


@dataclass
class MetricsLog:
    mode: str
    n_workers: int
    n_tasks: int
    top_k: int
    accuracy: AccuracyMatrix
    accuracy_top5: AccuracyMatrix
    breakdown: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    totals: dict = field(default_factory=dict)
    task_times: list = field(default_factory=list)
    replica_digests: list = field(default_factory=list)

    @property
    def invariant_violations(self) -> int:
        return int(sum(self.counters.values()))

    def final_accuracy(self) -> float | None:
        if self.accuracy.row_complete(self.n_tasks):
            return accuracy_T(self.accuracy, self.n_tasks)
        return None


ACCURACY_COLUMNS = ("i", "j", "a_ij", "accuracy_T")
BREAKDOWN_COLUMNS = ("iteration", "worker", "load_ms", "train_ms", "populate_buffer_ms",
                     "augment_batch_ms", "wait_ms")


def accuracy_csv(matrix: AccuracyMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ACCURACY_COLUMNS)
    for i, j, a in matrix.entries():
        acc_i = f"{accuracy_T(matrix, i):.6f}" if matrix.row_complete(i) else ""
        w.writerow([i, j, f"{a:.6f}", acc_i])
    return buf.getvalue()


def breakdown_csv(records: Iterable[BreakdownRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BREAKDOWN_COLUMNS)
    for r in sorted(records, key=lambda r: (r.iteration, r.worker)):
        w.writerow([r.iteration, r.worker] + [f"{d * 1e3:.3f}" for d in r.durations()])
    return buf.getvalue()


def read_breakdown_csv(path: str | Path) -> list[BreakdownRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(BreakdownRecord(
                int(row["iteration"]), int(row["worker"]),
                *(float(row[f"{c}_ms"]) / 1e3 for c in BreakdownRecord.COLUMNS),
            ))
    return out


def summary_text(log: MetricsLog) -> str:
    def fmt(x):
        return "nan" if x is None else f"{x:.6f}"

    top5 = accuracy_T(log.accuracy_top5, log.n_tasks) if log.accuracy_top5.row_complete(log.n_tasks) else None
    waits = [r.wait for r in log.breakdown]
    lines = [
        f"mode: {log.mode}",
        f"workers: {log.n_workers}",
        f"tasks: {log.n_tasks}",
        f"top_k: {log.top_k}",
        f"accuracy_T: {fmt(log.final_accuracy())}",
        f"accuracy_T_top5: {fmt(top5)}",
        f"train_time_s: {log.totals.get('train_time', 0.0):.6f}",
        f"task_epochs: {log.totals.get('task_epochs', 0)}",
        f"mean_wait_ms: {(np.mean(waits) * 1e3 if waits else 0.0):.6f}",
        f"invariant_violations: {log.invariant_violations}",
        "--- counters ---",
        *(f"{k}: {v}" for k, v in sorted(log.counters.items())),
        "--- totals ---",
        *(f"{k}: {v}" for k, v in sorted(log.totals.items())),
        "--- config ---",
        *(f"{k} = {v}" for k, v in log.config.items()),
    ]
    return "\n".join(lines) + "\n"


def export(log: MetricsLog, outdir: str | Path) -> dict[str, Path]:
    outdir = Path(outdir)
    files = {
        "accuracy.csv": accuracy_csv(log.accuracy),
        "breakdown.csv": breakdown_csv(log.breakdown),
        "summary.txt": summary_text(log),
    }
    written = {}
    for name, text in files.items():
        path = outdir / name
        try:
            outdir.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written[name] = path
    return written


def read_summary(path: str | Path) -> Mapping[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines()[:10]:
        k, _, v = line.partition(": ")
        out[k] = v
    return out


def log_to_dict(log: MetricsLog) -> dict:
    return {
        "mode": log.mode,
        "n_workers": log.n_workers,
        "n_tasks": log.n_tasks,
        "top_k": log.top_k,
        "accuracy": log.accuracy.entries(),
        "accuracy_top5": log.accuracy_top5.entries(),
        "breakdown": [[r.iteration, r.worker, *r.durations()] for r in log.breakdown],
        "config": dict(log.config),
        "counters": dict(log.counters),
        "totals": dict(log.totals),
        "task_times": list(log.task_times),
        "replica_digests": list(log.replica_digests),
    }


def log_from_dict(d: Mapping) -> MetricsLog:
    acc, acc5 = AccuracyMatrix(d["n_tasks"]), AccuracyMatrix(d["n_tasks"])
    for i, j, v in d["accuracy"]:
        acc.set(i, j, v)
    for i, j, v in d["accuracy_top5"]:
        acc5.set(i, j, v)
    return MetricsLog(
        mode=d["mode"], n_workers=d["n_workers"], n_tasks=d["n_tasks"], top_k=d["top_k"],
        accuracy=acc, accuracy_top5=acc5,
        breakdown=[BreakdownRecord(int(r[0]), int(r[1]), *r[2:]) for r in d["breakdown"]],
        config=dict(d["config"]), counters=dict(d["counters"]), totals=dict(d["totals"]),
        task_times=list(d["task_times"]), replica_digests=list(d["replica_digests"]),
    )
