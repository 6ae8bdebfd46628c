"""Command line: ``mecsim run|validate|experiment ...``.

Exit codes: 0 success, 2 usage, 3 parse error, 4 validation error,
5 runtime error, 6 experiment check failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .experiments import SequenceViolation, experiment_bg_validation, experiment_danger_zone
from .scenario import ParseError, ValidationError, bundled, load_scenario, run

EXIT_PARSE, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_CHECK = 3, 4, 5, 6


def _fail(category: str, message: str, code: int) -> int:
    print(f"error[{category}]: {message}", file=sys.stderr)
    return code


def _scenario(name_or_path: str):
    """A file path, or the name of a bundled scenario."""
    try:
        return load_scenario(name_or_path)
    except ParseError:
        path = bundled(name_or_path)
        if "/" not in name_or_path and path.exists():
            return load_scenario(path)
        raise


def cmd_validate(args) -> int:
    cfg = _scenario(args.scenario)
    doc = cfg.doc
    print(f"ok: {cfg.source} (seed {doc['seed']}, mode {doc['mode']}, duration {doc['duration']} s, "
          f"{len(doc['hosts'])} hosts, {len(doc['services'])} services, {len(doc['apps'])} apps, "
          f"{len(doc['ues'])} UEs)")
    return 0


def cmd_run(args) -> int:
    cfg = _scenario(args.scenario).with_overrides(seed=args.seed, mode=args.mode, pace=args.pace,
                                                  duration=args.duration)
    result = run(cfg, args.out)
    m = result.manifest
    print(f"ran {cfg.source}: {m['events']} events, {m['app_events']} app events, "
          f"wall {m['wall_time']:.3f} s, overruns {m['overruns']}")
    if result.out_dir is not None:
        print(f"results in {result.out_dir}")
    return 0


def cmd_bg_validation(args) -> int:
    def progress(i, count, mode, wall):
        if args.verbose:
            print(f"  rep {i + 1}/{args.reps} count {count} {mode}: {wall:.3f} s", file=sys.stderr)
    report = experiment_bg_validation(args.counts, args.reps, seed=args.seed, out_dir=args.out,
                                      progress=progress)
    s = report.summary()
    print(f"mu = {s['mu']:g}/s, {s['reps']} repetitions")
    print(f"{'count':>6} {'KS':>7} {'explicit wall (s)':>22} {'generator wall (s)':>22}")
    for row in s["counts"]:
        print(f"{row['count']:>6} {row['ks']:>7.4f} "
              f"{row['explicit_wall_mean']:>12.4f} ± {row['explicit_wall_ci95']:<7.4f} "
              f"{row['generator_wall_mean']:>12.4f} ± {row['generator_wall_ci95']:<7.4f}")
    print(f"generator slope {s['generator_slope']:.3g} s/app (p = {s['generator_slope_pvalue']:.3f}), "
          f"spread {100 * s['generator_spread']:.1f}%")
    print(f"explicit monotone: {s['explicit_monotone']}; "
          f"explicit/generator at {max(report.counts)}: {s['ratio_at_max']:.2f}")
    if args.json:
        print(json.dumps(s, indent=2))
    return 0


def cmd_danger_zone(args) -> int:
    cfg = _scenario(args.scenario) if args.scenario else None
    report = experiment_danger_zone(args.mode, cfg, args.out, pace=args.pace)
    for line in report.lines():
        print(line)
    extra = f", {report.callbacks} HTTP callbacks" if report.mode == "realtime" else ""
    print(f"{report.notifications} notifications{extra}; steps per UE: {report.steps}")
    if not report.complete:
        return _fail("check", "sequence incomplete", EXIT_CHECK)
    print("sequence complete")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mecsim", description="MEC system simulator and emulation cradle")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario file")
    r.add_argument("scenario", help="scenario file, or the name of a bundled scenario")
    r.add_argument("--seed", type=int)
    r.add_argument("--mode", choices=("sim", "realtime"))
    r.add_argument("--pace", type=float, help="simulated seconds per wall second (realtime)")
    r.add_argument("--duration", type=float, help="override the simulated duration")
    r.add_argument("--out", help="results directory")
    r.set_defaults(fn=cmd_run)

    v = sub.add_parser("validate", help="check a scenario file")
    v.add_argument("scenario")
    v.set_defaults(fn=cmd_validate)

    e = sub.add_parser("experiment", help="built-in experiments")
    esub = e.add_subparsers(dest="experiment", required=True)
    bg = esub.add_parser("bg-validation", help="explicit background apps vs the generator")
    bg.add_argument("--counts", type=int, nargs="+", default=[10, 100, 300])
    bg.add_argument("--reps", type=int, default=15)
    bg.add_argument("--seed", type=int, default=1)
    bg.add_argument("--out")
    bg.add_argument("--json", action="store_true", help="also print the summary as JSON")
    bg.set_defaults(fn=cmd_bg_validation)
    dz = esub.add_parser("danger-zone", help="vehicle warned on entering and leaving a zone")
    dz.add_argument("--mode", choices=("sim", "realtime"), default="sim")
    dz.add_argument("--pace", type=float, default=1.0)
    dz.add_argument("--scenario", help="alternative danger-zone scenario")
    dz.add_argument("--out")
    dz.set_defaults(fn=cmd_danger_zone)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ParseError as exc:
        return _fail("parse", str(exc), EXIT_PARSE)
    except ValidationError as exc:
        for err in exc.errors:
            print(f"error[validation]: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except SequenceViolation as exc:
        return _fail("check", str(exc), EXIT_CHECK)
    except Exception as exc:
        return _fail("runtime", f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
