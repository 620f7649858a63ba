"""Command-line front end: run one scenario, bench a suite, plot logs, or
collect training pairs from an episode."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .harness import (
    SUITE_SCHEMA,
    EpisodeLog,
    ScenarioInvalidError,
    collect_training_pairs,
    emit_plots,
    experiment_csv,
    experiment_table,
    run_episode,
    run_experiment,
    scenario_from_json,
)


def _load_scenario(path, overrides):
    with open(path) as f:
        doc = json.load(f)
    sc = scenario_from_json(doc, base_dir=Path(path).parent)
    for key in ("seed", "v_max", "prediction", "weight_file", "timeout"):
        value = overrides.get(key)
        if value is not None:
            sc = dataclasses.replace(sc, **{key: value})
    return sc


def _cmd_run(args):
    sc = _load_scenario(args.scenario, vars(args))
    metrics, log = run_episode(sc)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    log.save_csv(outdir / "log.csv")
    status = "success" if metrics.success else ("collision" if metrics.collision else "timeout")
    print(f"{status}: time_to_goal={metrics.time_to_goal:.2f} s "
          f"peak_speed={metrics.peak_speed:.2f} m/s min_clearance={metrics.min_clearance:.2f} m "
          f"replans={metrics.replan_count} distance={metrics.distance:.2f} m")
    print(f"log written to {outdir / 'log.csv'}")
    return 0


def _cmd_bench(args):
    with open(args.suite) as f:
        doc = json.load(f)
    if doc.get("schema") != SUITE_SCHEMA:
        raise ScenarioInvalidError(f"unsupported suite schema {doc.get('schema')!r}")
    base = Path(args.suite).parent
    suite = []
    for entry in doc["scenarios"]:
        reps = int(entry.pop("repetitions", 1))
        sc = scenario_from_json(entry, base_dir=base)
        suite.append((sc, reps))
    rows = run_experiment(suite)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    experiment_csv(rows, outdir / "results.csv")
    table = experiment_table(rows)
    (outdir / "results.txt").write_text(table + "\n")
    print(table)
    return 0


def _cmd_plot(args):
    logs = [EpisodeLog.load_csv(p) for p in args.logs]
    env = None
    if args.environment:
        from .sensor import load_environment

        env = load_environment(args.environment)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    emit_plots(logs, env, out, out.with_suffix(".csv"))
    print(f"wrote {out} and {out.with_suffix('.csv')}")
    return 0


def _cmd_collect(args):
    sc = _load_scenario(args.scenario, vars(args))
    metrics, log = run_episode(sc)
    records = collect_training_pairs(log, sc.environment, args.outdir, stride=args.stride)
    print(f"collected {len(records)} training pairs in {args.outdir}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="prednav", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--v-max", dest="v_max", type=float, default=None)
        sp.add_argument("--prediction", choices=("none", "baseline", "learned"), default=None)
        sp.add_argument("--weights", dest="weight_file", default=None)
        sp.add_argument("--timeout", type=float, default=None)

    run_p = sub.add_parser("run", help="run one scenario")
    run_p.add_argument("--scenario", required=True)
    run_p.add_argument("--outdir", default="out")
    common(run_p)
    run_p.set_defaults(fn=_cmd_run)

    bench_p = sub.add_parser("bench", help="run a suite file")
    bench_p.add_argument("--suite", required=True)
    bench_p.add_argument("--outdir", default="out")
    bench_p.set_defaults(fn=_cmd_bench)

    plot_p = sub.add_parser("plot", help="plot one or more episode logs")
    plot_p.add_argument("logs", nargs="+")
    plot_p.add_argument("--environment", default=None)
    plot_p.add_argument("--out", default="out/trajectories.svg")
    plot_p.set_defaults(fn=_cmd_plot)

    col_p = sub.add_parser("collect", help="generate training pairs from an episode")
    col_p.add_argument("--scenario", required=True)
    col_p.add_argument("--outdir", default="dataset")
    col_p.add_argument("--stride", type=int, default=1)
    common(col_p)
    col_p.set_defaults(fn=_cmd_collect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ScenarioInvalidError as e:
        print(f"invalid scenario: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
