"""Command-line runner: ``run``, ``compare``, ``sweep`` and ``clean``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

from . import costmodel
from .cluster import make_topology
from .config import ConfigError, build_experiment, load_config, override, parse_strategies
from .datapipe import DEFAULT_THRESHOLD, RecordError, clean, read_records, synth_pairs, write_records
from .trainer import MetricsHistory, train

log = logging.getLogger("gba_sim")

METRICS_HEADER = ["step", "loss", "ag_bytes", "ar_bytes", "peak_rows", "sim_time"]
COMPARE_HEADER = [
    "strategy", "batch_per_worker", "group_size", "accumulation_steps", "final_loss", "eval_loss",
    "i2t_r1", "t2i_r1", "ag_bytes", "ar_bytes", "peak_rows", "sim_time", "time_per_sample",
    "throughput_vs_first", "throughput_vs_prev", "peak_ratio_vs_prev", "measured_peak_ratio",
]
SWEEP_HEADER = [
    "value", "final_loss", "eval_loss", "i2t_r1", "t2i_r1", "ag_bytes", "ar_bytes", "peak_rows",
    "sim_time", "time_per_sample",
]
REPORT_HEADER = ["source", "kept", "dropped_short_text", "dropped_aspect", "rewrite_queue", "total"]
FINAL_WINDOW = 10

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class ExitCode:
    OK = 0
    RUNTIME = 1
    CONFIG = 2


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows([[_fmt(v) for v in row] for row in rows])
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_metrics(path: Path, history: MetricsHistory) -> None:
    _write_csv(path, METRICS_HEADER, [[r.step, r.loss, r.ag_bytes, r.ar_bytes, r.peak_rows, r.sim_time]
                                      for r in history.records])


def final_loss(history: MetricsHistory) -> float:
    """Mean training loss over the last few steps."""
    tail = history.losses[-FINAL_WINDOW:]
    return sum(tail) / len(tail)


def _load(args) -> dict:
    values = load_config(args.config)
    if args.seed is not None:
        values = override(values, "seed", str(args.seed))
    if args.out is not None:
        values = override(values, "out_dir", args.out)
    return values


def _time_per_sample(history: MetricsHistory) -> float:
    return history.ledger.simulated_time / history.samples_seen


def cmd_run(args) -> int:
    exp = build_experiment(_load(args))
    history = train(exp.train, synth_pairs(exp.task))
    write_metrics(exp.out_dir / "metrics.csv", history)
    r = history.retrieval
    print(f"run {exp.train.strategy.label()} steps={exp.train.steps} final_loss={final_loss(history):.6g} "
          f"i2t_R@1={r['i2t_R@1']:.4f} t2i_R@1={r['t2i_R@1']:.4f} MR={r['MR']:.4f} "
          f"ag_bytes={history.ledger.bytes_all_gather} sim_time={history.ledger.simulated_time:.6g}")
    return ExitCode.OK


def cmd_compare(args) -> int:
    values = _load(args)
    strategies = parse_strategies(values["strategies"])
    if len(strategies) < 2:
        raise ConfigError("strategies: compare needs at least two entries")
    samples = {s.samples_per_loss for s in strategies}
    if len(samples) != 1:
        raise ConfigError("strategies: unequal effective samples per step (group_size*batch*k): "
                          + ", ".join(f"{s.label()}={s.samples_per_loss}" for s in strategies))
    exps = [build_experiment(values, s) for s in strategies]
    out_dir = exps[0].out_dir
    data = synth_pairs(exps[0].task)

    rows = []
    prev = None
    first_tps = None
    for i, (exp, s) in enumerate(zip(exps, strategies)):
        history = train(exp.train, data)
        write_metrics(out_dir / f"{i}_{s.kind.value}" / "metrics.csv", history)
        tps = _time_per_sample(history)
        first_tps = first_tps or tps
        peak = history.ledger.peak_resident_rows
        peak_ratio = measured = ""
        tput_prev = ""
        if prev is not None:
            prev_s, prev_peak, prev_tps = prev
            peak_ratio = peak / prev_peak
            tput_prev = prev_tps / tps
            if s.batch_per_worker == prev_s.batch_per_worker and 2 * s.group_size == prev_s.group_size:
                measured = costmodel.MEASURED_PEAK_RATIO
        rows.append([s.kind.value, s.batch_per_worker, s.group_size, s.accumulation_steps, final_loss(history),
                     history.eval_loss, history.retrieval["i2t_R@1"], history.retrieval["t2i_R@1"],
                     history.ledger.bytes_all_gather, history.ledger.bytes_all_reduce, peak,
                     history.ledger.simulated_time, tps, first_tps / tps, tput_prev, peak_ratio, measured])
        prev = (s, peak, tps)
        print(f"compare {s.label()} final_loss={final_loss(history):.6g} time_per_sample={tps:.6g} "
              f"throughput_vs_first={first_tps / tps:.4f} peak_rows={peak}")
    _write_csv(out_dir / "compare.csv", COMPARE_HEADER, rows)
    print("reported speedups over conventional ITC: "
          + ", ".join(f"{x:.2f}x" for x in costmodel.REPORTED_SPEEDUPS)
          + f"; measured peak-memory ratio when halving the group: {costmodel.MEASURED_PEAK_RATIO:.4f} "
          "(model: 0.5000)")
    if exps[0].calibrate:
        topo = make_topology(exps[0].train.world_size, strategies[0].group_size)
        cal = costmodel.calibrate(strategies[0], strategies[1:], topo, exps[0].train.embed_dim,
                                  targets=costmodel.REPORTED_SPEEDUPS[:len(strategies) - 1],
                                  compute_rate=exps[0].train.hardware.compute_rate,
                                  grad_params=_grad_params(exps[0]))
        print(f"calibrated bandwidth={cal.hardware.bandwidth:.6g} latency={cal.hardware.latency:.6g} "
              f"predicted={', '.join(f'{p:.4f}' for p in cal.predicted)} "
              f"residuals={', '.join(f'{r:+.2e}' for r in cal.residuals)}")
    return ExitCode.OK


def _grad_params(exp) -> int:
    d_in, d = exp.task.d_in, exp.train.embed_dim
    n = 2 * d_in * d + 1
    if exp.train.full_objective:
        n += d * d_in + d * d_in * exp.train.vocab
    return n


def cmd_sweep(args) -> int:
    values = _load(args)
    key = values["sweep_key"]
    raw_values = [v.strip() for v in values["sweep_values"].split(",") if v.strip()]
    if not key or not raw_values:
        raise ConfigError("sweep_key/sweep_values: sweep needs a key and at least one value")
    if key in ("sweep_key", "sweep_values", "out_dir", "strategies"):
        raise ConfigError(f"sweep_key: cannot sweep {key}")
    exps = [build_experiment(override(values, key, raw)) for raw in raw_values]
    out_dir = exps[0].out_dir
    rows = []
    for i, (raw, exp) in enumerate(zip(raw_values, exps)):
        history = train(exp.train, synth_pairs(exp.task))
        write_metrics(out_dir / f"sweep_{i}" / "metrics.csv", history)
        rows.append([raw, final_loss(history), history.eval_loss, history.retrieval["i2t_R@1"],
                     history.retrieval["t2i_R@1"], history.ledger.bytes_all_gather,
                     history.ledger.bytes_all_reduce, history.ledger.peak_resident_rows,
                     history.ledger.simulated_time, _time_per_sample(history)])
        print(f"sweep {key}={raw} final_loss={rows[-1][1]:.6g}")
    _write_csv(out_dir / "sweep.csv", SWEEP_HEADER, rows)
    return ExitCode.OK


def cmd_clean(args) -> int:
    threshold = DEFAULT_THRESHOLD if args.threshold is None else args.threshold
    out_dir = Path(args.out or "out")
    try:
        lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise RecordError(f"cannot read {args.input}: {exc}") from exc
    report = clean(read_records(lines), threshold)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "kept.jsonl").write_text(write_records(report.kept), encoding="utf-8")
    (out_dir / "rewrite_queue.jsonl").write_text(write_records(report.rewrite_queue), encoding="utf-8")
    (out_dir / "dropped.jsonl").write_text(
        write_records(report.dropped_short_text + report.dropped_aspect), encoding="utf-8")
    counts = report.counts()
    rows = [["ALL"] + [counts[h] for h in REPORT_HEADER[1:]]]
    for source in sorted(report.per_source):
        tally = report.per_source[source]
        parts = [tally.get(h, 0) for h in REPORT_HEADER[1:-1]]
        rows.append([source] + parts + [sum(parts)])
    _write_csv(out_dir / "report.csv", REPORT_HEADER, rows)
    print("clean " + " ".join(f"{k}={v}" for k, v in counts.items()) + f" threshold={threshold}")
    return ExitCode.OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gba-sim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in (("run", cmd_run), ("compare", cmd_compare), ("sweep", cmd_sweep)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.set_defaults(func=func)
    p = sub.add_parser("clean")
    p.add_argument("input", help="JSON-lines pair records")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threshold", type=float, help=f"similarity threshold (default {DEFAULT_THRESHOLD})")
    p.set_defaults(func=cmd_clean)
    return parser


def _setup_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("GBA_SIM_LOG", "quiet").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return ExitCode.CONFIG if exc.code else ExitCode.OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return ExitCode.CONFIG
    except RecordError as exc:
        print(f"record error: {exc}", file=sys.stderr)
        return ExitCode.RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return ExitCode.RUNTIME


if __name__ == "__main__":
    sys.exit(main())
