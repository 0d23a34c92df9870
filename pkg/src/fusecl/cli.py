"""Command-line entry points: run, ablate, plot, inspect."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .engine import InvalidConfig, run_continual
from .evalkit import read_metrics, run_ablation_suite, summarize, write_metrics, write_summary
from .reports import metric_rows

OUT_ENV = "FUSECL_OUT"
PLOT_KINDS = ("accuracy", "forgetting")

class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _load_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seeds([args.seed])
    except FileNotFoundError:
        raise CliError(f"config not found: {args.config}", 2) from None
    except InvalidConfig as e:
        raise CliError(f"invalid config: {e}", 2) from None
    return cfg


def _prepare_dir(root: Path, cfg: RunConfig, kind: str, force: bool) -> Path:
    run_dir = root / f"{kind}-{cfg.name}-{cfg.config_hash()}"
    if run_dir.exists():
        if not force:
            raise CliError(f"{run_dir} exists; pass --force to overwrite")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return run_dir


def _write_manifest(run_dir: Path, cfg: RunConfig, kind: str, streams: dict, extra: dict) -> dict:
    artifacts = sorted(str(p.relative_to(run_dir)) for p in run_dir.rglob("*")
                       if p.is_file() and p != run_dir / "manifest.json")
    manifest = {
        "kind": kind,
        "config_hash": cfg.config_hash(),
        "config": "config.json",
        "seeds": list(cfg.seeds),
        "class_orders": {str(s): list(st.order.permutation) for s, st in streams.items()},
        "stream_checksums": {str(s): st.checksum() for s, st in streams.items()},
        "artifacts": artifacts,
        **extra,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _report_paths(run_dir: Path, seed_dir: Path) -> list[str]:
    return [str(p.relative_to(run_dir)) for p in sorted(seed_dir.glob("round_*/report.json"))]


def cmd_run(args) -> int:
    cfg = _load_config(args)
    print(f"config hash {cfg.config_hash()}")
    run_dir = _prepare_dir(Path(args.out or default_out()), cfg, "run", args.force)
    factory = cfg.stream_factory(Path(args.config).parent)
    run_id = cfg.flags_name or "custom"
    rows, runs, streams, reports_index = [], {}, {}, {}
    for seed in cfg.seeds:
        stream = factory(seed)
        streams[seed] = stream
        seed_dir = run_dir / f"seed_{seed}"
        _, reports = run_continual(stream, replace(cfg.train, seed=seed), cfg.flags, cfg.budget,
                                   cfg.probes, seed_dir)
        runs[seed] = reports
        reports_index[str(seed)] = _report_paths(run_dir, seed_dir)
        for r in reports:
            rows.extend(metric_rows(run_id, seed, r))
        print(f"seed {seed}: ACC {reports[-1].accuracy:.4f}")
    write_metrics(run_dir / "metrics.csv", rows)
    summary = summarize(run_id, runs).to_dict()
    (run_dir / "summary.json").write_text(json.dumps({"rows": {run_id: summary}}, indent=2,
                                                     sort_keys=True) + "\n")
    _write_manifest(run_dir, cfg, "run", streams, {
        "metrics": "metrics.csv", "summary": "summary.json", "reports": reports_index})
    print(run_dir)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    print(f"config hash {cfg.config_hash()}")
    run_dir = _prepare_dir(Path(args.out or default_out()), cfg, "ablate", args.force)
    factory = cfg.stream_factory(Path(args.config).parent)
    streams = {}

    def stream_for(seed):
        streams[seed] = factory(seed)
        return streams[seed]

    try:
        result = run_ablation_suite(cfg.rows, cfg.seeds, stream_for, cfg.train, cfg.budget,
                                    out_dir=run_dir / "rows")
    except InvalidConfig as e:
        raise CliError(f"invalid config: {e}", 2) from None
    write_metrics(run_dir / "metrics.csv", result.metric_rows())
    write_summary(run_dir / "summary.json", result)
    reports = {}
    for seed_dir in sorted((run_dir / "rows").glob("*/seed_*")):
        reports[str(seed_dir.relative_to(run_dir))] = _report_paths(run_dir, seed_dir)
    _write_manifest(run_dir, cfg, "ablate", streams, {
        "metrics": "metrics.csv", "summary": "summary.json", "reports": reports})
    for name, s in result.summaries.items():
        std = "n/a" if s.acc_std is None else f"{s.acc_std:.4f}"
        print(f"{name:30s} ACC {s.acc_mean:.4f} +- {std}")
    print(run_dir)
    return 0


def _seed_means(rows: list[dict], metric: str) -> dict[str, dict[str, dict[int, float]]]:
    """run_id -> subset -> round -> seed-mean value."""
    acc = defaultdict(lambda: defaultdict(lambda: defaultdict(list)))
    for r in rows:
        if r["metric"] == metric:
            acc[r["run_id"]][r["subset"]][r["round"]].append(r["value"])
    return {rid: {sub: {t: float(np.mean(v)) for t, v in sorted(by_t.items())}
                  for sub, by_t in subs.items()} for rid, subs in acc.items()}


def cmd_plot(args) -> int:
    if args.kind not in PLOT_KINDS:
        raise CliError(f"unknown plot kind {args.kind!r}; choose from {', '.join(PLOT_KINDS)}", 2)
    path = Path(args.metrics)
    if path.is_dir():
        path = path / "metrics.csv"
    if not path.exists():
        raise CliError(f"metrics not found: {path}")
    rows = read_metrics(path)
    means = _seed_means(rows, "acc_nme")
    if not means:
        raise CliError(f"{path} holds no accuracy rows")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(args.out) if args.out else path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if args.kind == "accuracy":
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for rid, subs in means.items():
            series = subs["all"]
            ax.plot(list(series), [100 * v for v in series.values()], marker="o", label=rid)
        ax.set_xlabel("round")
        ax.set_ylabel("accuracy (%)")
        ax.legend(fontsize=7)
        target = out_dir / "accuracy.png"
        fig.tight_layout()
        fig.savefig(target)
        plt.close(fig)
        written.append(target)
    else:
        for rid, subs in means.items():
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for sub in sorted((s for s in subs if s != "all"), key=lambda s: int(s.split("_")[1])):
                series = subs[sub]
                ax.plot(list(series), [100 * v for v in series.values()], marker="o",
                        label=f"classes of round {sub.split('_')[1]}")
            ax.set_xlabel("round")
            ax.set_ylabel("accuracy (%)")
            ax.set_title(rid)
            ax.legend(fontsize=7)
            target = out_dir / f"forgetting-{rid.replace('+', '_plus_')}.png"
            fig.tight_layout()
            fig.savefig(target)
            plt.close(fig)
            written.append(target)
    for p in written:
        print(p)
    return 0


def cmd_inspect(args) -> int:
    run_dir = Path(args.path)
    mpath = run_dir / "manifest.json"
    if not mpath.exists():
        raise CliError(f"no manifest in {run_dir}")
    manifest = json.loads(mpath.read_text())
    print(json.dumps({k: v for k, v in manifest.items() if k != "artifacts"}, indent=2, sort_keys=True))
    print(f"{len(manifest.get('artifacts', []))} artifacts")
    for group, paths in sorted(manifest.get("reports", {}).items()):
        for rel in paths:
            rep = json.loads((run_dir / rel).read_text())
            prune = rep.get("prune")
            if prune:
                print(f"{group} round {rep['round']}: kept {prune['kept_per_layer']} of "
                      f"{prune['total_per_layer']}, params {prune['params_after']}/"
                      f"{prune['params_before']} ({prune['param_fraction']:.3f})")
            else:
                print(f"{group} round {rep['round']}: not pruned")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusecl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("run", cmd_run), ("ablate", cmd_ablate)):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
        s.add_argument("--seed", type=int, help="run this seed only")
        s.add_argument("--force", action="store_true", help="overwrite an existing run directory")
        s.set_defaults(func=fn)
    s = sub.add_parser("plot")
    s.add_argument("metrics", help="metrics.csv or a run directory")
    s.add_argument("--kind", default="accuracy")
    s.add_argument("--out")
    s.set_defaults(func=cmd_plot)
    s = sub.add_parser("inspect")
    s.add_argument("path")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
