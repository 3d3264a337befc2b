"""
Command-line interface.

Exit codes: 0 success, 1 configuration or usage error, 2 the run finished
but some operating points failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .config import PRESETS, ConfigError, load_spec, preset
from .experiment import load_results, run_experiment
from .export import FIGURES, export_plotdata

EXIT_OK, EXIT_CONFIG, EXIT_FAILURES = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors; 2 is reserved for failed points."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _print_errors(errors) -> None:
    for e in errors:
        print(f"  - {e}", file=sys.stderr)


def _load(path: str):
    # a bare preset name is accepted in place of a file
    if not Path(path).exists() and path in PRESETS:
        return preset(path)
    return load_spec(path)


def cmd_validate(args) -> int:
    try:
        spec = _load(args.config)
    except ConfigError as e:
        print(f"{args.config}: invalid", file=sys.stderr)
        _print_errors(e.errors)
        return EXIT_CONFIG
    print(f"{args.config}: ok ({spec.name}: {spec.n_tx_modes} modes, k={spec.subsets}, "
          f"{len(spec.sweep)} powers, {spec.n_captures} captures)")
    return EXIT_OK


def cmd_presets(args) -> int:
    for name in PRESETS:
        print(f"{name:20s} {preset(name).description}")
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        spec = _load(args.config)
        upd = {}
        if args.seed is not None:
            upd["seeds"] = spec.seeds.model_copy(update={"base": args.seed})
        if args.out is not None:
            upd["output_dir"] = args.out
        spec = spec.model_copy(update=upd)
    except ConfigError as e:
        print(f"{args.config}: invalid", file=sys.stderr)
        _print_errors(e.errors)
        return EXIT_CONFIG
    t0 = time.time()
    say = None if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    rs = run_experiment(spec, jobs=args.jobs, keep_taps=args.dump_matrices, progress=say)
    out = rs.write(spec.output_dir, dump_matrices=args.dump_matrices)
    print(f"wrote {out} in {time.time() - t0:.0f} s")
    for p in rs.spec.sweep:
        cells = []
        for k in rs.spec.subsets:
            a = rs.average(p, k)
            cells.append(f"k={k}: " + ("failed" if a is None else f"GMI {a.gmi_per_mode.mean():.3f} "
                                        f"net {a.net_rate_gbps:.1f} Gb/s"))
        print(f"  {p:+6.1f} dBm  " + "  ".join(cells))
    if rs.failures:
        print(f"{len(rs.failures)} failed point(s); see {out / 'failures.json'}", file=sys.stderr)
        for f in rs.failures:
            print(f"  - {f.power_dbm:+.1f} dBm k={f.k_rx} capture {f.capture}: {f.message}", file=sys.stderr)
        return EXIT_FAILURES
    return EXIT_OK


def cmd_export(args) -> int:
    try:
        rs = load_results(args.results)
    except (OSError, ValueError, KeyError) as e:
        print(f"{args.results}: cannot read results: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        paths = export_plotdata(rs, args.figure, args.out or args.results, power_dbm=args.power, k_rx=args.k)
    except ValueError as e:
        print(f"export: {e}", file=sys.stderr)
        return EXIT_CONFIG
    for p in paths:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sdmlink", description="Mode-multiplexed KK link simulator.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a launch-power sweep")
    r.add_argument("config", help="TOML/JSON config file or preset name")
    r.add_argument("--seed", type=int, help="override the base seed")
    r.add_argument("--jobs", type=int, default=1, help="worker threads (results do not depend on it)")
    r.add_argument("--dump-matrices", action="store_true", help="also store the channel and equalizer taps")
    r.add_argument("--out", help="output directory (overrides output_dir)")
    r.add_argument("-q", "--quiet", action="store_true", help="no progress lines")
    r.set_defaults(fn=cmd_run)

    e = sub.add_parser("export", help="write plot data from a results directory")
    e.add_argument("results", help="results directory written by `run`")
    e.add_argument("--figure", required=True, help=f"one of {', '.join(FIGURES)}")
    e.add_argument("--out", help="output directory (default: the results directory)")
    e.add_argument("--power", type=float, help="launch power for xt_matrix")
    e.add_argument("--k", type=int, help="receiver subset for xt_matrix")
    e.set_defaults(fn=cmd_export)

    v = sub.add_parser("validate", help="check a config and report every problem")
    v.add_argument("config")
    v.set_defaults(fn=cmd_validate)

    p = sub.add_parser("presets", help="list the built-in presets")
    p.set_defaults(fn=cmd_presets)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("--jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return args.fn(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
