"""Command-line front end.

Exit codes: 0 success, 1 a verification check failed, 2 unreadable or
invalid input, 3 evaluation failure, 4 constant estimation failure,
5 simulation failure, 6 trace and certificate from different scenarios.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile

from .config import ConfigError, load_config
from .control import certificate_csv, certificate_text, parse_certificate
from .errors import (
    DimensionMismatch,
    EmptyMeldSet,
    FixtureMismatch,
    InversionFailure,
    NonFiniteEvaluation,
    NonFiniteState,
    NotHurwitz,
    SingularInteraction,
    UndefinedRelativeDegree,
)
from .melds import enumerate_melds, meld_report_csv
from .pipeline import apply_certificate, build_scenario, certify_scenario, simulate, summary_text
from .verify import read_trace, verify_trace

EXIT_OK, EXIT_FAIL, EXIT_PARSE, EXIT_EVAL, EXIT_ESTIMATE, EXIT_SIM, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5, 6
EVALUATION_ERRORS = (UndefinedRelativeDegree, NonFiniteEvaluation, SingularInteraction, EmptyMeldSet, DimensionMismatch)


def atomic_write(path: str, text: str):
    """Write through a temporary file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epsilon is not None:
        if not args.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        cfg.epsilon = args.epsilon
    if args.dt is not None:
        if not args.dt > 0:
            raise ConfigError("dt must be positive")
        cfg.dt = args.dt
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _read_certificate(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_certificate(fh.read())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read certificate {path}: {exc}") from exc


def cmd_enumerate(args) -> int:
    try:
        cfg = _load(args)
        scn = build_scenario(cfg)
    except (ConfigError, NotHurwitz) as exc:
        return _fail(EXIT_PARSE, str(exc))
    except EVALUATION_ERRORS as exc:
        return _fail(EXIT_EVAL, str(exc))
    x_op = cfg.x0 if cfg.operating_point is None else cfg.operating_point
    try:
        report = enumerate_melds(scn.system, x_op)
    except EVALUATION_ERRORS as exc:
        return _fail(EXIT_EVAL, str(exc))
    path = os.path.join(cfg.out_dir, "melds.csv")
    atomic_write(path, meld_report_csv(report))
    names = scn.system.output_names
    print(f"{len(report.melds)} melds among {len(report.certificates)} square choices -> {path}")
    for c in report.melds:
        print(f"  {c.sigma.bitstring}  {{{', '.join(names[i] for i in c.sigma.indices)}}}  cond {c.cond_A:.4g}")
    if not report.melds:
        return _fail(EXIT_EVAL, "no meld found at the operating point")
    return EXIT_OK


def cmd_certify(args) -> int:
    try:
        cfg = _load(args)
        scn = build_scenario(cfg)
    except (ConfigError, NotHurwitz) as exc:
        return _fail(EXIT_PARSE, str(exc))
    except EVALUATION_ERRORS as exc:
        return _fail(EXIT_EVAL, str(exc))
    try:
        cert, schedule, _, t_end = certify_scenario(scn)
    except InversionFailure as exc:
        return _fail(EXIT_ESTIMATE, str(exc))
    except ConfigError as exc:
        return _fail(EXIT_PARSE, str(exc))
    except EVALUATION_ERRORS as exc:
        return _fail(EXIT_EVAL, str(exc))
    text = certificate_text(cert)
    atomic_write(os.path.join(cfg.out_dir, "certificate.txt"), text)
    atomic_write(os.path.join(cfg.out_dir, "certificate.csv"), certificate_csv(cert))
    print(text, end="")
    if cfg.mode == "auto-certified":
        print(f"certified schedule: instants {', '.join(f'{t:.6g}' for t in schedule.instants)}, end {t_end:.6g}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        cfg = _load(args)
        scn = build_scenario(cfg)
        cert = _read_certificate(args.certificate) if args.certificate else None
    except (ConfigError, NotHurwitz) as exc:
        return _fail(EXIT_PARSE, str(exc))
    except EVALUATION_ERRORS as exc:
        return _fail(EXIT_EVAL, str(exc))
    if cert is not None and cert.extra.get("fixture") not in (None, cfg.fingerprint()):
        return _fail(EXIT_MISMATCH, "certificate was computed for a different plant, deck or gains")
    try:
        if cert is not None:
            schedule, refs, t_end = apply_certificate(scn, cert, cfg.dt)
        elif cfg.mode == "auto-certified":
            cert, schedule, refs, t_end = certify_scenario(scn)
        else:
            schedule, refs, t_end = scn.schedule, scn.refs, scn.t_end
    except InversionFailure as exc:
        return _fail(EXIT_ESTIMATE, str(exc))
    except EVALUATION_ERRORS as exc:
        return _fail(EXIT_EVAL, str(exc))
    try:
        trace = simulate(scn, schedule, refs, t_end, cfg.dt, bound_S=cert.S if cert is not None else float("nan"))
    except (SingularInteraction, NonFiniteState) as exc:
        stamp = f" (t = {exc.time:.6g})" if getattr(exc, "time", None) is not None else ""
        return _fail(EXIT_SIM, f"{exc}{stamp}")
    trace_path = os.path.join(cfg.out_dir, "trace.csv")
    summary = summary_text(trace, cert)
    atomic_write(trace_path, trace.csv_text())
    atomic_write(os.path.join(cfg.out_dir, "summary.txt"), summary)
    print(summary, end="")
    print(f"trace -> {trace_path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        cert = _read_certificate(args.certificate)
        with open(args.trace, encoding="utf-8") as fh:
            trace = read_trace(fh.read())
    except ConfigError as exc:
        return _fail(EXIT_PARSE, str(exc))
    except OSError as exc:
        return _fail(EXIT_PARSE, f"cannot read trace {args.trace}: {exc}")
    except FixtureMismatch as exc:
        return _fail(EXIT_MISMATCH, str(exc))
    except ValueError as exc:
        return _fail(EXIT_PARSE, f"malformed trace: {exc}")
    try:
        report = verify_trace(trace, cert)
    except FixtureMismatch as exc:
        return _fail(EXIT_MISMATCH, str(exc))
    text = report.text()
    out_dir = args.out if args.out is not None else os.path.dirname(os.path.abspath(args.trace))
    atomic_write(os.path.join(out_dir, "report.txt"), text)
    print(text, end="")
    return EXIT_OK if report.passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meldctl", description="Switching feedback linearization over output melds.")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "enumerate": (cmd_enumerate, "classify every square output choice at the operating point"),
        "certify": (cmd_certify, "estimate constants and dwell-time bounds"),
        "simulate": (cmd_simulate, "run the closed loop and write the trace"),
        "verify": (cmd_verify, "check a trace against a certificate"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--out", help="output directory (default: from the config, or next to the trace)")
        if name == "verify":
            p.add_argument("--trace", required=True)
            p.add_argument("--certificate", required=True)
            continue
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--dt", type=float)
        if name == "simulate":
            p.add_argument("--certificate", help="use these dwell bounds instead of re-estimating")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PARSE if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
