"""Bench results: raw samples as CSV, summaries as JSON."""

import csv
import json
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np


@dataclass
class MetricSummary:
    count: int
    mean: float
    median: float
    stdev: float
    sem: float
    min: float
    max: float

    @classmethod
    def of(cls, values: Sequence[float]) -> "MetricSummary":
        arr = np.asarray(values, dtype=float)
        if arr.size == 0:
            nan = float("nan")
            return cls(0, nan, nan, nan, nan, nan, nan)
        stdev = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        return cls(
            count=int(arr.size),
            mean=float(arr.mean()),
            median=float(np.median(arr)),
            stdev=stdev,
            sem=stdev / float(np.sqrt(arr.size)),
            min=float(arr.min()),
            max=float(arr.max()),
        )


def environment_note() -> str:
    return f"{platform.node()} {platform.machine()} {platform.system()} {platform.release()}"


@dataclass
class BenchReport:
    """One scenario run.

    ``samples`` keeps every raw measurement per metric so each summary can be
    recomputed from what was persisted.
    """

    scenario: str
    config: Dict[str, Any]
    samples: Dict[str, List[float]] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)
    declared_n: int = 0
    hardware_dependent: bool = True
    environment: str = field(default_factory=environment_note)
    created_at: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat()
    )

    def add(self, metric: str, value: float) -> None:
        self.samples.setdefault(metric, []).append(float(value))

    def extend(self, metric: str, values: Iterable[float]) -> None:
        self.samples.setdefault(metric, []).extend(float(v) for v in values)

    @property
    def metrics(self) -> Dict[str, MetricSummary]:
        return {name: MetricSummary.of(values) for name, values in self.samples.items()}

    def mean(self, metric: str) -> float:
        return self.metrics[metric].mean

    @property
    def sample_count(self) -> int:
        return max((len(v) for v in self.samples.values()), default=0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scenario": self.scenario,
            "config": self.config,
            "metrics": {name: asdict(summary) for name, summary in self.metrics.items()},
            "sample_count": self.sample_count,
            "declared_n": self.declared_n,
            "hardware_dependent": self.hardware_dependent,
            "environment": self.environment,
            "created_at": self.created_at,
            "extra": self.extra,
        }

    def write_csv(self, path: Path) -> Path:
        """One row per raw sample: scenario, metric, index, value."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=["scenario", "metric", "index", "value"])
            writer.writeheader()
            for metric, values in self.samples.items():
                for i, value in enumerate(values):
                    writer.writerow(
                        {"scenario": self.scenario, "metric": metric, "index": i, "value": value}
                    )
        return path

    def write_json(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, default=str)
        return path

    def save(self, directory: Path) -> List[Path]:
        directory = Path(directory)
        return [
            self.write_csv(directory / f"{self.scenario}.csv"),
            self.write_json(directory / f"{self.scenario}.json"),
        ]


def load_samples_csv(path: Path) -> Dict[str, List[float]]:
    samples: Dict[str, List[float]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            samples.setdefault(row["metric"], []).append(float(row["value"]))
    return samples


def recompute(path: Path) -> Dict[str, MetricSummary]:
    """Summaries straight from a persisted sample file."""
    return {name: MetricSummary.of(values) for name, values in load_samples_csv(path).items()}
