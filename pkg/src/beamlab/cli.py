"""Command-line front end: ``simulate``, ``spectrum`` and ``verify``.

Exit codes: 0 ok, 1 verification failed, 2 usage or configuration error,
3 simulation failure, 4 spectral non-convergence.
"""
from __future__ import annotations

import argparse
import contextlib
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import AnalysisError, fit_decay
from .config import ConfigError, Config, load_config, profile_norm
from .core import ResolutionError
from .dynamics import CSV_COLUMNS, SimulationError, cantilever_equilibrium, equilibrium_residual, run
from .spectral import OperatorId, SpectralError, find_roots

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_SIM, EXIT_SPECTRAL = 0, 1, 2, 3, 4

SPECTRUM_COLUMNS = ("n", "re_tau", "im_tau", "re_lambda", "im_lambda", "residual", "seed_gap",
                    "asymptote_gap", "certified")


def fmt(x) -> str:
    """Locale-independent shortest round-trip text for a number."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if x == 0.0:
        return "0"
    return repr(x)


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(fmt(v) for v in r) + "\n")


def write_kv(path, items):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in items:
            fh.write(f"{k} = {v if isinstance(v, str) else fmt(v)}\n")


def threads_from_env() -> int:
    raw = os.environ.get("BEAMLAB_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@contextlib.contextmanager
def thread_cap(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=n):
        yield


# ------------------------------------------------------------------ simulate


def cmd_simulate(config_path, out_dir) -> int:
    try:
        cfg = load_config(config_path) if config_path else Config()
        sc = cfg.scenario()
    except (ConfigError, OSError, ValueError, ResolutionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        res = run(sc)
    except (SimulationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_SIM
    out = Path(out_dir)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    write_csv(out / "trace.csv", CSV_COLUMNS, ([getattr(r, c) for c in CSV_COLUMNS] for r in res.rows))
    x = sc.grid.x
    for (name, t), values in sorted(res.snapshots.items()):
        write_csv(out / "snapshots" / f"{name}_{t:g}.csv", ("x", "value"), zip(x, values))
    write_kv(out / "summary.txt", _summary(sc, res))
    return EXIT_OK


def _summary(sc, res):
    items = [
        ("mode", sc.mode), ("N", sc.grid.N), ("dt", sc.dt), ("T", sc.T), ("steps", sc.steps),
        ("rows", len(res.rows)),
        ("m", sc.params.m), ("alpha", sc.params.alpha), ("beta", sc.params.beta),
        ("c", sc.params.c), ("gamma", sc.params.gamma),
        ("E_w_initial", res.rows[0].E_w), ("E_w_final", res.rows[-1].E_w),
        ("max_abs_res_z1", float(np.max(np.abs(res.column("res_z1")))) if sc.mode == "disturbance_loop" else float("nan")),
        ("max_abs_res_moment", float(np.nanmax(np.abs(res.column("res_moment"))))),
    ]
    if sc.T > 0:
        try:
            fit = fit_decay(res.t, res.column("E_w"))
            items += [("E_w_decay_rate", fit.rate), ("E_w_decay_r2", fit.r2),
                      ("decay_window", f"{fmt(fit.window[0])} {fmt(fit.window[1])}")]
        except AnalysisError as exc:
            items.append(("E_w_decay_fit", f"unavailable ({exc})"))
    if sc.mode.startswith("appendix"):
        H = res.appendix_energy()
        items += [("energy_initial", H[0]), ("energy_final", H[-1])]
    if sc.mode == "appendix_loop_constant_F":
        F = sc.disturbance.constant
        resid = equilibrium_residual(sc.params, sc.grid, sc.dt, F=F)
        w_star, _ = cantilever_equilibrium(sc.grid.x, F, sc.params.gamma)
        ref = profile_norm(w_star, sc.grid.x)
        err = profile_norm(res.state.w.y - w_star, sc.grid.x)
        items += [
            ("equilibrium_residual", resid),
            ("equilibrium_residual_check", "pass" if resid <= 1e-8 else "fail"),
            ("w_star_norm", ref),
            ("final_w_error", err),
            ("final_w_error_relative", err / ref if ref > 0 else float("nan")),
        ]
    return items


# ------------------------------------------------------------------ spectrum


def parse_range(text):
    lo, sep, hi = text.partition("..")
    if not sep:
        lo = hi = text
    lo, hi = int(lo), int(hi)
    if lo < 1 or hi < lo:
        raise ValueError("range must satisfy 1 <= lo <= hi")
    return lo, hi


def cmd_spectrum(operator, params, n_range, output) -> int:
    try:
        op = OperatorId.parse(operator)
    except SpectralError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    lo, hi = n_range
    entries = find_roots(op, params, lo, hi)
    rows = []
    for e in entries:
        rows.append((e.n, e.tau.real, e.tau.imag, e.lam.real, e.lam.imag, e.residual, e.seed_gap,
                     e.lambda_gap, e.certified))
    if output in (None, "-"):
        _csv_stdout(rows)
    else:
        write_csv(output, SPECTRUM_COLUMNS, rows)
    if op is not OperatorId.ClosedLoopCandidate:
        bad = [e.n for e in entries if not e.certified]
    else:
        bad = [e.n for e in entries if not e.converged]
    if bad:
        print(f"non-converged or uncertified modes: {bad}", file=sys.stderr)
        return EXIT_SPECTRAL
    return EXIT_OK


def _csv_stdout(rows):
    sys.stdout.write(",".join(SPECTRUM_COLUMNS) + "\n")
    for r in rows:
        sys.stdout.write(",".join(fmt(v) for v in r) + "\n")


# ------------------------------------------------------------------ verify


def cmd_verify(suite, report_path="report.txt") -> int:
    from .verify import SUITES, run_suite

    if suite != "all" and suite not in SUITES:
        print(f"unknown suite {suite!r}; choose from all, {', '.join(SUITES)}", file=sys.stderr)
        return EXIT_USAGE
    n = threads_from_env()
    with thread_cap(n):
        rep = run_suite(suite, threads=n)
    Path(report_path).write_text(rep.to_text(), encoding="utf-8")
    for c in rep.checks:
        print(f"{c.criterion} {c.name}: {'pass' if c.passed else 'FAIL'} ({fmt(c.value)}; {c.threshold})")
    if not rep.passed:
        print("failed checks: " + ", ".join(c.name for c in rep.failures), file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


# ------------------------------------------------------------------ entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="beamlab", description="Beam stabilization simulator and spectral checks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="run a scenario and write trace.csv, snapshots/ and summary.txt")
    s.add_argument("config", nargs="?", help="scenario file (defaults to the published scenario)")
    s.add_argument("-o", "--output", default="out", help="output directory")

    sp = sub.add_parser("spectrum", help="certified roots of a characteristic equation")
    sp.add_argument("operator", help="zhat | a2 | ref-j1 | ref-j0 | closed-loop")
    for name, default in (("m", 5.0), ("alpha", 1.0), ("beta", 2.0), ("c", 1.0), ("gamma", 2.0)):
        sp.add_argument(f"--{name}", type=float, default=default)
    sp.add_argument("--n", default="1..40", help="mode range lo..hi")
    sp.add_argument("-o", "--output", default="-", help="CSV path ('-' for stdout)")

    v = sub.add_parser("verify", help="run acceptance checks and write report.txt")
    v.add_argument("suite", help="all | conservation | spectral | decay | equilibrium | estimator")
    v.add_argument("-o", "--output", default="report.txt")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "simulate":
        return cmd_simulate(args.config, args.output)
    if args.command == "spectrum":
        from .core import Params

        try:
            params = Params(args.m, args.alpha, args.beta, args.c, args.gamma)
            n_range = parse_range(args.n)
        except ValueError as exc:
            print(f"usage error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        return cmd_spectrum(args.operator, params, n_range, args.output)
    return cmd_verify(args.suite, args.output)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
