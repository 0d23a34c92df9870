"""Per-round reports, run summaries and the metric functions built on them."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

METRICS_HEADER = ("run_id", "seed", "round", "metric", "subset", "value")

# relative model sizes over ten ResNet18 rounds; reference metadata only
REFERENCE_RESNET18_SIZE_RATIOS = (0.28, 0.56, 0.83, 1.1, 1.3, 1.5, 1.7, 2.0, 2.2, 2.5)


def overall_accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if labels.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float((predictions == labels).mean())


def mean_accuracy(per_round_acc: Sequence[float]) -> float:
    """Mean accuracy over every round except the first."""
    if len(per_round_acc) < 2:
        raise ValueError("mean accuracy needs at least two rounds")
    return float(np.mean(per_round_acc[1:]))


@dataclass
class RoundReport:
    round: int
    seen_classes: int
    accuracy: float
    subset_accuracy: dict[int, float]
    subset_classes: dict[int, int]
    head_accuracy: float
    head_subset_accuracy: dict[int, float]
    param_count: int
    extractor_params: list[int]
    transform_params: int
    head_params: int
    size_ratio: float
    prune: dict | None = None
    losses: dict[str, dict] = field(default_factory=dict)
    epochs: dict[str, int] = field(default_factory=dict)
    probes: dict[str, dict] = field(default_factory=dict)
    memory_size: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RoundReport":
        d = dict(d)
        for key in ("subset_accuracy", "subset_classes", "head_subset_accuracy"):
            d[key] = {int(k): v for k, v in d[key].items()}
        d["probes"] = {
            name: {**p, "subset_accuracy": {int(k): v for k, v in p["subset_accuracy"].items()}}
            for name, p in d.get("probes", {}).items()
        }
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RoundReport":
        return cls.from_dict(json.loads(text))


def subset_accuracy_curves(reports: Sequence[RoundReport]) -> np.ndarray:
    """A[t-1, k-1] = accuracy at round t on the classes introduced at round k (NaN for k > t)."""
    if not reports:
        raise ValueError("no reports")
    T = max(r.round for r in reports)
    A = np.full((T, T), np.nan)
    for r in reports:
        for k, acc in r.subset_accuracy.items():
            A[r.round - 1, k - 1] = acc
    return A


def size_ratio_series(reports: Sequence[RoundReport], base_param_count: int) -> list[float]:
    if base_param_count <= 0:
        raise ValueError("base parameter count must be positive")
    return [r.param_count / base_param_count for r in reports]


@dataclass
class RunSummary:
    """Final ACC and Mean for one configuration over seeds."""

    name: str
    seeds: list[int]
    acc: list[float]
    mean: list[float]
    subset_final: list[dict[int, float]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def acc_mean(self) -> float:
        return float(np.mean(self.acc))

    @property
    def acc_std(self) -> float | None:
        return float(np.std(self.acc, ddof=1)) if len(self.acc) >= 2 else None

    @property
    def mean_mean(self) -> float:
        return float(np.mean(self.mean)) if self.mean else math.nan

    @property
    def mean_std(self) -> float | None:
        return float(np.std(self.mean, ddof=1)) if len(self.mean) >= 2 else None

    def subset_mean(self, k: int) -> float:
        return float(np.mean([s[k] for s in self.subset_final]))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seeds": self.seeds,
            "acc": self.acc,
            "mean": self.mean,
            "acc_mean": self.acc_mean,
            "acc_std": self.acc_std,
            "mean_mean": None if math.isnan(self.mean_mean) else self.mean_mean,
            "mean_std": self.mean_std,
            "subset_final": [{str(k): v for k, v in s.items()} for s in self.subset_final],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunSummary":
        return cls(d["name"], d["seeds"], d["acc"], d["mean"],
                   [{int(k): v for k, v in s.items()} for s in d["subset_final"]], d.get("meta", {}))


def summarize(name: str, runs: dict[int, Sequence[RoundReport]], probe: str | None = None,
              meta: dict | None = None) -> RunSummary:
    """Collapse per-seed report lists into a RunSummary; ``probe`` reads a
    probe's accuracies instead of the intact model's."""
    seeds, acc, mean, subsets = [], [], [], []
    for seed, reports in sorted(runs.items()):
        if probe is None:
            series = [(r.accuracy, r.subset_accuracy) for r in reports]
        else:
            series = [(r.probes[probe]["accuracy"], r.probes[probe]["subset_accuracy"])
                      for r in reports if probe in r.probes]
        seeds.append(seed)
        acc.append(series[-1][0])
        subsets.append(series[-1][1])
        if probe is None and len(series) >= 2:
            mean.append(mean_accuracy([s[0] for s in series]))
    return RunSummary(name, seeds, acc, mean, subsets, dict(meta or {}))


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def metric_rows(run_id: str, seed: int, report: RoundReport) -> Iterable[tuple]:
    t = report.round
    yield run_id, seed, t, "acc_nme", "all", report.accuracy
    for k, v in sorted(report.subset_accuracy.items()):
        yield run_id, seed, t, "acc_nme", f"round_{k}", v
    yield run_id, seed, t, "acc_head", "all", report.head_accuracy
    for k, v in sorted(report.head_subset_accuracy.items()):
        yield run_id, seed, t, "acc_head", f"round_{k}", v
    yield run_id, seed, t, "params", "all", report.param_count
    yield run_id, seed, t, "size_ratio", "all", report.size_ratio
    if report.prune:
        yield run_id, seed, t, "kept_fraction", "current", report.prune["kept_fraction"]
        yield run_id, seed, t, "param_fraction", "current", report.prune["param_fraction"]
    for phase, losses in sorted(report.losses.items()):
        for name, v in sorted(losses.items()):
            yield run_id, seed, t, f"loss_{name}", phase, v
    for name, p in sorted(report.probes.items()):
        yield run_id, seed, t, f"acc_nme@{name}", "all", p["accuracy"]
        for k, v in sorted(p["subset_accuracy"].items()):
            yield run_id, seed, t, f"acc_nme@{name}", f"round_{k}", v


def write_metrics(path, rows: Iterable[tuple]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    with open(path, "w", newline="") as f:
        f.write(buf.getvalue())


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        r = csv.DictReader(f)
        if tuple(r.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected header {r.fieldnames}")
        rows = []
        for row in r:
            row["seed"] = int(row["seed"])
            row["round"] = int(row["round"])
            row["value"] = float(row["value"])
            rows.append(row)
    return rows
