"""Metrics, ablation rows and the scripted ablation suite."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .engine import FULL, PRESETS, InvalidConfig, MethodFlags, TrainConfig, config_dict, run_continual
from .reports import (METRICS_HEADER, REFERENCE_RESNET18_SIZE_RATIOS, RoundReport, RunSummary,
                      mean_accuracy, metric_rows, overall_accuracy, read_metrics,
                      size_ratio_series, subset_accuracy_curves, summarize, write_metrics)
from .stream import SyntheticSpec, TaskStream, make_class_order, make_synthetic, split_rounds

logger = logging.getLogger(__name__)

PROBE_KINDS = ("drop-extractor", "keep-only-extractor")
DEFAULT_ROWS = ("none", "fusion", "fusion+FC", "fusion+FC+mask", "unfrozen",
                "drop-extractor-2", "keep-only-extractor-2", "multi-teacher-single-model")
PROBE_NOTE = ("inference-time probe on the trained full model; fused head re-fit on exemplar "
              "features only, NME uses the kept extractors")


@dataclass(frozen=True)
class AblationRow:
    """A named row: either a training configuration or a probe on the full model."""

    name: str
    flags: MethodFlags = FULL
    probe: str | None = None


def _probe_name(name: str) -> str | None:
    if name == "current-only":
        return name
    kind, _, k = name.rpartition("-")
    if kind in PROBE_KINDS:
        if not k.isdigit() or int(k) < 1:
            raise InvalidConfig(f"probe {name!r} needs a positive extractor index")
        return name
    return None


def parse_row(spec) -> AblationRow:
    """A row from a preset name or a mapping ``{"name": ..., "flags": {...}}``."""
    if isinstance(spec, AblationRow):
        spec.flags.validate()
        return spec
    if isinstance(spec, str):
        if spec in PRESETS:
            return AblationRow(spec, PRESETS[spec])
        if spec == "full":
            return AblationRow(spec, FULL)
        probe = _probe_name(spec)
        if probe is None:
            raise InvalidConfig(f"unknown ablation row {spec!r}")
        return AblationRow(spec, FULL, probe)
    if isinstance(spec, Mapping):
        unknown = set(spec) - {"name", "flags", "probe"}
        if unknown or "name" not in spec:
            raise InvalidConfig(f"bad row spec {dict(spec)!r}")
        flags = dict(spec.get("flags") or {})
        bad = set(flags) - set(MethodFlags.__dataclass_fields__)
        if bad:
            raise InvalidConfig(f"unknown flags {sorted(bad)}")
        probe = spec.get("probe")
        if probe is not None and _probe_name(probe) is None:
            raise InvalidConfig(f"unknown probe {probe!r}")
        row = AblationRow(str(spec["name"]), MethodFlags(**flags).validate(), probe)
        if probe is not None and not row.flags.fusion:
            raise InvalidConfig("extractor probes need a fusion model")
        return row
    raise InvalidConfig(f"cannot interpret row {spec!r}")


@dataclass
class AblationResult:
    summaries: dict[str, RunSummary]
    reports: dict[str, dict[int, list[RoundReport]]]
    stream_checksums: dict[int, str]
    row_checksums: dict[str, dict[int, str]] = field(default_factory=dict)
    seconds: float = 0.0
    meta: dict = field(default_factory=dict)

    def summary_dict(self) -> dict:
        return {
            "rows": {n: s.to_dict() for n, s in self.summaries.items()},
            "row_order": list(self.summaries),
            "stream_checksums": {str(k): v for k, v in self.stream_checksums.items()},
            "row_stream_checksums": {r: {str(k): v for k, v in c.items()}
                                     for r, c in self.row_checksums.items()},
            "meta": self.meta,
        }

    def metric_rows(self):
        for name, by_seed in self.reports.items():
            for seed, reports in sorted(by_seed.items()):
                for r in reports:
                    yield from metric_rows(name, seed, r)


def run_ablation_suite(rows: Sequence, seeds: Sequence[int], stream_for_seed: Callable[[int], TaskStream],
                       config: TrainConfig, budget: int, out_dir=None,
                       on_run: Callable[[str, int, list[RoundReport]], None] | None = None
                       ) -> AblationResult:
    """Train every non-probe row for every seed and summarise.

    Probe rows are evaluated on the runs of their base flags (the full method by
    default); that configuration is trained once per seed and shared. Every row
    of one seed consumes the same stream object, so class orders and data match.
    """
    parsed = [parse_row(r) for r in rows]
    names = [r.name for r in parsed]
    if len(set(names)) != len(names):
        raise InvalidConfig(f"duplicate row names in {names}")
    if not seeds:
        raise InvalidConfig("at least one seed required")

    # one training job per distinct flag set; probes ride along on it
    jobs: dict[MethodFlags, list[str]] = {}
    for r in parsed:
        probes = jobs.setdefault(r.flags, [])
        if r.probe is not None and r.probe not in probes:
            probes.append(r.probe)

    labels = {f: next((r.name for r in parsed if r.flags == f and r.probe is None), "full")
              for f in jobs}
    t0 = time.perf_counter()
    runs: dict[MethodFlags, dict[int, list[RoundReport]]] = {f: {} for f in jobs}
    checksums: dict[int, str] = {}
    row_checksums: dict[str, dict[int, str]] = {}
    for seed in seeds:
        stream = stream_for_seed(seed)
        checksums[seed] = stream.checksum()
        cfg = replace(config, seed=seed)
        for flags, probes in jobs.items():
            label = labels[flags]
            sub = None if out_dir is None else Path(out_dir) / _slug(label) / f"seed_{seed}"
            consumed = stream.checksum()
            if consumed != checksums[seed]:
                raise RuntimeError("stream changed between rows")
            row_checksums.setdefault(label, {})[seed] = consumed
            _, reports = run_continual(stream, cfg, flags, budget, probes, sub)
            runs[flags][seed] = reports
            if on_run is not None:
                on_run(label, seed, reports)
            logger.info("%s seed %d: ACC %.4f", label, seed, reports[-1].accuracy)

    summaries, by_row = {}, {}
    for r in parsed:
        base = runs[r.flags]
        meta = {"flags": vars_flags(r.flags)}
        if r.probe is None:
            summaries[r.name] = summarize(r.name, base, meta=meta)
            by_row[r.name] = base
        else:
            meta.update(probe=r.probe, note=PROBE_NOTE)
            if not all(r.probe in rep[-1].probes for rep in base.values()):
                raise InvalidConfig(f"probe {r.probe!r} is undefined for a {len(base[seeds[0]])}-round run")
            summaries[r.name] = summarize(r.name, base, probe=r.probe, meta=meta)
    return AblationResult(summaries, by_row, checksums, row_checksums, time.perf_counter() - t0,
                          {"config": config_dict(config), "budget": budget, "seeds": list(seeds)})


def vars_flags(flags: MethodFlags) -> dict:
    return {k: getattr(flags, k) for k in MethodFlags.__dataclass_fields__}


def _slug(name: str) -> str:
    return name.replace("+", "_plus_").replace("/", "_")


def pooled_std(a: RunSummary, b: RunSummary) -> float:
    """sqrt of the mean of the two per-row sample variances (0 with one seed)."""
    sa, sb = a.acc_std or 0.0, b.acc_std or 0.0
    return math.sqrt((sa * sa + sb * sb) / 2)


def ordered_within_noise(summaries: Sequence[RunSummary]) -> list[tuple[str, str, bool]]:
    """For each adjacent pair (hi, lo) check mean(hi) >= mean(lo) - pooled std."""
    out = []
    for hi, lo in zip(summaries, summaries[1:]):
        out.append((hi.name, lo.name, hi.acc_mean >= lo.acc_mean - pooled_std(hi, lo)))
    return out


def write_summary(path, result: AblationResult) -> None:
    Path(path).write_text(json.dumps(result.summary_dict(), indent=2, sort_keys=True) + "\n")


def read_summary(path) -> dict[str, RunSummary]:
    d = json.loads(Path(path).read_text())
    return {n: RunSummary.from_dict(s) for n, s in d["rows"].items()}


# -- desk-scale benchmark ---------------------------------------------------------

DESK_SYNTHETIC = SyntheticSpec(num_classes=10, train_per_class=200, test_per_class=50,
                               blob_sigma=1.5, jitter=2.5, pixel_noise=0.5, distractors=3)
DESK_ROUNDS = (2, 2, 2, 2, 2)
DESK_BUDGET = 100
DESK_SEEDS = (0, 1, 2, 3, 4)


def desk_config(**overrides) -> TrainConfig:
    base = dict(max_epochs=40, finetune_epochs=13)
    base.update(overrides)
    return TrainConfig(**base)


def desk_streams(spec: SyntheticSpec = DESK_SYNTHETIC, round_sizes: Sequence[int] = DESK_ROUNDS
                 ) -> Callable[[int], TaskStream]:
    """Seed -> stream over one fixed synthetic dataset with a seed-specific class order."""
    train, test = make_synthetic(spec)

    def build(seed: int) -> TaskStream:
        return split_rounds(make_class_order(spec.num_classes, seed), round_sizes, train, test)

    return build


__all__ = [
    "AblationResult", "AblationRow", "DEFAULT_ROWS", "DESK_BUDGET", "DESK_ROUNDS", "DESK_SEEDS",
    "DESK_SYNTHETIC", "METRICS_HEADER", "REFERENCE_RESNET18_SIZE_RATIOS", "RoundReport", "RunSummary",
    "desk_config", "desk_streams", "mean_accuracy", "metric_rows", "ordered_within_noise",
    "overall_accuracy", "parse_row", "pooled_std", "read_metrics", "read_summary",
    "run_ablation_suite", "size_ratio_series", "subset_accuracy_curves", "summarize",
    "write_metrics", "write_summary",
]
