"""Statistic streams and their CSV / CDF output."""
from __future__ import annotations

import csv
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class StatRecord:
    stream: str
    time: float
    value: float
    labels: tuple = ()  # sorted (key, value) pairs


@dataclass
class Stats:
    records: dict = field(default_factory=lambda: defaultdict(list))

    def record(self, stream: str, time: float, value: float, **labels) -> None:
        self.records[stream].append(StatRecord(stream, time, float(value),
                                               tuple(sorted((k, str(v)) for k, v in labels.items()))))

    def values(self, stream: str, **labels) -> np.ndarray:
        want = {k: str(v) for k, v in labels.items()}
        return np.array([r.value for r in self.records.get(stream, ())
                         if all(dict(r.labels).get(k) == v for k, v in want.items())])

    def streams(self) -> list[str]:
        return sorted(self.records)

    def write_csv(self, out_dir: Path) -> list[Path]:
        """One ``<stream>.csv`` per stream with columns ``time,value,<labels...>``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for stream in self.streams():
            recs = self.records[stream]
            keys = sorted({k for r in recs for k, _ in r.labels})
            path = out_dir / f"{_safe(stream)}.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["time", "value", *keys])
                for r in recs:
                    lab = dict(r.labels)
                    w.writerow([repr(r.time), repr(r.value), *(lab.get(k, "") for k in keys)])
            paths.append(path)
        return paths

    def write_cdf(self, stream: str, out_dir: Path) -> Path:
        path = Path(out_dir) / f"{_safe(stream)}.cdf.csv"
        values, quantiles = empirical_cdf(self.values(stream))
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["value", "quantile"])
            for v, q in zip(values, quantiles):
                w.writerow([repr(float(v)), repr(float(q))])
        return path


def empirical_cdf(samples) -> tuple[np.ndarray, np.ndarray]:
    """Sorted samples and their empirical quantiles ``i/n``."""
    values = np.sort(np.asarray(samples, dtype=float))
    n = len(values)
    return values, np.arange(1, n + 1) / n if n else np.array([])


def mean_ci(samples, confidence: float = 0.95) -> tuple[float, float]:
    """Mean and half-width of the Student-t confidence interval."""
    from scipy import stats

    x = np.asarray(samples, dtype=float)
    if len(x) < 2:
        return float(x.mean()) if len(x) else float("nan"), float("nan")
    half = stats.t.ppf(0.5 + confidence / 2, len(x) - 1) * x.std(ddof=1) / np.sqrt(len(x))
    return float(x.mean()), float(half)


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)
