"""``fedsel`` command-line entry point.

Exit codes: 0 success, 2 bad usage or configuration, 3 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import statistics
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import engine, variance_lab
from .dataset import label_histogram, max_label_share, partition

logger = logging.getLogger("fedsel")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3
SWEEP_COLUMNS = ("combination", "sampling_ratio", "n_clusters", "compression_rate", "scheme", "seed",
                 "rounds_to_target", "final_accuracy", "median_rounds_to_target")


def write_atomic(path, text: str) -> Path:
    """Write ``text`` to a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def bundled_config_text(name: str = "synthetic") -> str:
    return resources.files("fedsel").joinpath("configs").joinpath(f"{name}.toml").read_text(encoding="utf-8")


def _load_config(path) -> cfgmod.ExperimentConfig:
    if path is None:
        return cfgmod.loads(bundled_config_text())
    return cfgmod.load(path)


def worker_count() -> int:
    raw = os.environ.get("FEDSEL_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise cfgmod.ConfigError("FEDSEL_THREADS", f"expected a positive integer, got {raw!r}") from None
    if value < 1:
        raise cfgmod.ConfigError("FEDSEL_THREADS", f"expected a positive integer, got {raw!r}")
    return value


def _run_name(rc: engine.RunConfig) -> str:
    return (f"{rc.scheme}_q{rc.sampling_ratio:g}_H{rc.clusters}_R{rc.compression_rate:g}"
            f"_seed{rc.master_seed}")


def _execute(rc: engine.RunConfig, out_dir: str):
    """Run one configuration and write its CSV and JSON; returns (summary, diverged_round)."""
    train, test = engine.load_data(rc.data, rc.master_seed)
    name = _run_name(rc)
    diverged = None
    try:
        metrics = engine.run(rc, train, test)
    except engine.RunDiverged as exc:
        metrics, diverged = exc.metrics, exc.round_index
        logger.error("%s diverged in round %d", name, exc.round_index)
    summary = engine.run_summary(rc, metrics)
    summary["diverged_round"] = diverged
    write_atomic(Path(out_dir) / f"{name}.csv", engine.metrics_to_csv(metrics))
    write_atomic(Path(out_dir) / f"{name}.json", engine.summary_to_json(summary))
    return summary, diverged


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    rc = cfg.run
    if args.seed is not None:
        rc = replace(rc, master_seed=args.seed)
    if args.scheme is not None:
        rc = replace(rc, scheme=args.scheme)
    out_dir = args.out or cfg.output_dir
    summary, diverged = _execute(rc, out_dir)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_DIVERGED if diverged is not None else EXIT_OK


def _report_csv(report: variance_lab.VarianceReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheme", "variance", "std_err"])
    for name, v in report.variances().items():
        w.writerow([name, repr(v), repr(report.std_errors()[name])])
    return buf.getvalue()


def cmd_variance_lab(args) -> int:
    if args.fixture == "standard":
        pop = variance_lab.standard_fixture(seed=args.fixture_seed if args.fixture_seed is not None else 2024)
    else:
        pop = variance_lab.homogeneous_fixture(seed=args.fixture_seed if args.fixture_seed is not None else 7)
    report = variance_lab.scheme_variance_report(pop, args.m, n_draws=args.draws, seed=args.seed)
    text = _report_csv(report) if args.format == "csv" else json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    return EXIT_OK


def _sweep_task(item):
    combo_index, combo, rc, out_dir = item
    summary, diverged = _execute(rc, out_dir)
    return combo_index, combo, rc, summary, diverged


def _parse_rounds(value):
    if value is None or str(value).endswith("+"):
        return None
    return int(value)


def _median_rounds(values, rounds: int) -> str:
    # not-reached counts as +inf so a majority of misses yields the "T+" sentinel
    as_num = [float("inf") if v is None else v for v in values]
    med = statistics.median(as_num)
    return f"{rounds}+" if med == float("inf") else f"{med:g}"


def sweep_rows(results, rounds_of) -> list[dict]:
    """Reduce per-run summaries to one row per (combination, seed) plus the combination median."""
    by_combo: dict[int, list] = {}
    for combo_index, combo, rc, summary, _ in results:
        by_combo.setdefault(combo_index, []).append((combo, rc, summary))
    rows = []
    for combo_index in sorted(by_combo):
        entries = by_combo[combo_index]
        rtts = [_parse_rounds(s["rounds_to_target"]) for _, _, s in entries]
        median = _median_rounds(rtts, rounds_of(entries[0][1]))
        for combo, rc, summary in entries:
            rows.append({
                "combination": combo_index,
                "sampling_ratio": rc.sampling_ratio,
                "n_clusters": rc.clusters,
                "compression_rate": rc.compression_rate,
                "scheme": rc.scheme,
                "seed": rc.master_seed,
                "rounds_to_target": summary["rounds_to_target"],
                "final_accuracy": summary["final_accuracy"],
                "median_rounds_to_target": median,
            })
    return rows


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    out_dir = args.out or cfg.output_dir
    combos = cfg.combinations()
    items = []
    for i, combo in enumerate(combos):
        for seed in cfg.seeds():
            rc = replace(cfg.run, master_seed=seed, **combo)
            items.append((i, combo, rc, out_dir))
    workers = min(worker_count(), len(items))
    logger.info("sweep: %d runs over %d combinations, %d worker(s)", len(items), len(combos), workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_task, items))
    else:
        results = [_sweep_task(item) for item in items]
    rows = sweep_rows(results, lambda rc: rc.rounds)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    write_atomic(Path(out_dir) / "sweep_summary.csv", buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_DIVERGED if any(r[4] is not None for r in results) else EXIT_OK


def cmd_partition_report(args) -> int:
    cfg = _load_config(args.config)
    rc = cfg.run
    train, _ = engine.load_data(rc.data, rc.master_seed)
    shards = partition(train, rc.partition_spec())
    hist = label_histogram(shards)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["client_id", "n_samples", "weight", "max_label_share"] + [f"label_{c}" for c in range(hist.shape[1])])
    for s, row in zip(shards, hist):
        w.writerow([s.client_id, s.n_samples, repr(s.weight), repr(float(row.max() / row.sum()))] + row.tolist())
    summary = {
        "n_clients": len(shards),
        "strategy": rc.partition,
        "alpha": rc.alpha,
        "mean_max_label_share": float(max_label_share(shards).mean()),
        "min_shard": int(min(s.n_samples for s in shards)),
        "max_shard": int(max(s.n_samples for s in shards)),
        "mean_labels_present": float(np.mean((hist > 0).sum(axis=1))),
    }
    if args.out:
        write_atomic(Path(args.out) / "partition.csv", buf.getvalue())
        write_atomic(Path(args.out) / "partition.json", json.dumps(summary, indent=2, sort_keys=True))
    else:
        sys.stdout.write(buf.getvalue())
    print(json.dumps(summary, sort_keys=True), file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsel", description="Client-selection experiments for federated averaging.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, metavar="{run,variance-lab,sweep,partition-report}")

    r = sub.add_parser("run", help="train one configuration")
    r.add_argument("--config", help="TOML file (default: bundled synthetic config)")
    r.add_argument("--out", help="output directory (default: [output].dir)")
    r.add_argument("--seed", type=int, help="override run.master_seed")
    r.add_argument("--scheme", choices=[s for s in ("random", "importance", "cluster_plain", "cluster_neyman", "hybrid")])
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("variance-lab", help="selection-variance report on a fixture population")
    v.add_argument("--fixture", choices=("standard", "homogeneous"), default="standard")
    v.add_argument("--fixture-seed", type=int)
    v.add_argument("--m", type=int, default=20)
    v.add_argument("--draws", type=int, default=100_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--format", choices=("json", "csv"), default="json")
    v.add_argument("--out", help="write to this file instead of stdout")
    v.set_defaults(func=cmd_variance_lab)

    s = sub.add_parser("sweep", help="grid over q, H, R, scheme and seeds")
    s.add_argument("--config", help="TOML file (default: bundled synthetic config)")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_sweep)

    pr = sub.add_parser("partition-report", help="per-client label histogram of the configured partition")
    pr.add_argument("--config", help="TOML file (default: bundled synthetic config)")
    pr.add_argument("--out", help="output directory (default: CSV to stdout)")
    pr.set_defaults(func=cmd_partition_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        print(f"fedsel: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"fedsel: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
