"""Wall-clock feature extraction timing on the host CPU."""

from __future__ import annotations

import csv
import io
import os
import platform
import statistics
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .netlib.model import Model, forward_embed

MIN_REPS = 3


def host_descriptor() -> str:
    cpu = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return f"{platform.system()} {platform.release()} | {cpu} | {os.cpu_count()} logical cpus | numpy {np.__version__}"


@contextmanager
def single_core():
    """Pin to one core and one BLAS thread for the measurement window, where supported."""
    from threadpoolctl import threadpool_limits

    previous = None
    if hasattr(os, "sched_getaffinity"):
        previous = os.sched_getaffinity(0)
        try:
            os.sched_setaffinity(0, {min(previous)})
        except OSError:
            previous = None
    try:
        with threadpool_limits(limits=1):
            yield
    finally:
        if previous is not None:
            os.sched_setaffinity(0, previous)


@dataclass
class BenchResult:
    model_name: str
    storage: str
    batch_size: int
    warmup: int
    reps: int
    times_ms: list[float]
    host: str = field(default_factory=host_descriptor)

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.times_ms)

    @property
    def median_ms(self) -> float:
        return statistics.median(self.times_ms)

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.times_ms, 95))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(mean_ms=self.mean_ms, median_ms=self.median_ms, p95_ms=self.p95_ms)
        return d


def time_extraction(
    model: Model,
    batch: np.ndarray,
    warmup: int = 5,
    reps: int = 30,
    model_name: str = "model",
    storage: str = "dense",
) -> BenchResult:
    """Time ``forward_embed`` only; warmup runs are discarded."""
    if reps < MIN_REPS:
        raise ValueError(f"reps must be >= {MIN_REPS}, got {reps}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    mode = model.mode
    model.eval()
    times = []
    try:
        with single_core():
            for _ in range(warmup):
                forward_embed(model, batch)
            for _ in range(reps):
                t0 = time.perf_counter_ns()
                forward_embed(model, batch)
                times.append((time.perf_counter_ns() - t0) / 1e6)
    finally:
        model.mode = mode
    return BenchResult(model_name, storage, int(batch.shape[0]), warmup, reps, times)


@dataclass
class ComparisonRow:
    model_name: str
    storage: str
    mean_ms: float
    median_ms: float
    p95_ms: float
    speedup: float


def compare(results: Sequence[BenchResult]) -> list[ComparisonRow]:
    """Rows sorted by mean time; speedup is relative to the first result (the baseline)."""
    if len(results) < 2:
        raise ValueError("need at least two results to compare")
    base = results[0].mean_ms
    rows = [ComparisonRow(r.model_name, r.storage, r.mean_ms, r.median_ms, r.p95_ms, base / r.mean_ms) for r in results]
    return sorted(rows, key=lambda r: r.mean_ms)


def format_table(rows: Sequence[ComparisonRow]) -> str:
    header = ("model", "storage", "mean_ms", "median_ms", "p95_ms", "speedup")
    body = [(r.model_name, r.storage, f"{r.mean_ms:.3f}", f"{r.median_ms:.3f}", f"{r.p95_ms:.3f}", f"{r.speedup:.2f}x") for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(line, widths)).rstrip() for line in (header, *body)]
    return "\n".join(lines) + "\n"


def to_csv(rows: Sequence[ComparisonRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "storage", "mean_ms", "median_ms", "p95_ms", "speedup"])
    for r in rows:
        writer.writerow([r.model_name, r.storage, r.mean_ms, r.median_ms, r.p95_ms, r.speedup])
    return buf.getvalue()
