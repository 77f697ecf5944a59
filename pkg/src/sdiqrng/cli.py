"""Command-line pipeline: simulate, certify, extract, and emit figure data.

Every flag except --seed has a default; flat key=value config files supply
defaults too, with explicit flags winning.  Commands are deterministic given
their flags and overwrite their outputs identically on re-runs.  Exit codes:
0 success, 2 usage, 3 data or parse failure, 4 privacy-test abort, 5
optimizer non-convergence.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import certification as cert
from . import estimation as est
from . import extraction as ext
from . import protocol as prot

ENV_OUTDIR = "SDIQRNG_OUTDIR"

_REQUIRED = object()

# (key, parser from string, default) for config-file-backed values
_SIM_FIELDS = (
    ("blocking", float, 0.0),
    ("channel_efficiency", float, 1.0),
    ("n_rounds", int, 100000),
    ("seed", int, _REQUIRED),
    ("strategy", str, "honest"),
    ("sync_model", str, "per_block"),
    ("hide_in_no_detection", lambda s: s.lower() in ("1", "true", "yes"), True),
    ("prng_q", lambda s: tuple(float(v) for v in s.split(",")), (0.5, 0.5, 0.5, 0.5)),
    ("classical_encoding", str, "0011"),
    ("classical_decoding", str, "0011"),
)


def _default_outdir() -> Path:
    return Path(os.environ.get(ENV_OUTDIR, "."))


def _read_config_file(path: Path) -> dict:
    values = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise prot.LogParseError(f"{path} line {lineno}: expected key=value")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def _merge(args: argparse.Namespace, parser: argparse.ArgumentParser, fields) -> dict:
    file_vals = {}
    if getattr(args, "config", None):
        file_vals = _read_config_file(Path(args.config))
    out = {}
    for key, typ, default in fields:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            out[key] = flag_val
        elif key in file_vals:
            out[key] = typ(file_vals[key])
        elif default is not _REQUIRED:
            out[key] = default
        else:
            parser.error(f"missing required --{key.replace('_', '-')} (or config entry)")
    return out


def _write_echo(config: prot.ProtocolConfig, path: Path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for key, value in config.to_dict().items():
            fh.write(f"{key}={value}\n")


def _load_sidecar_config(log_path: Path):
    sidecar = Path(str(log_path) + ".config")
    if sidecar.exists():
        return prot.ProtocolConfig.from_dict(_read_config_file(sidecar))
    return None


def cmd_simulate(args, parser) -> int:
    values = _merge(args, parser, _SIM_FIELDS)
    try:
        config = prot.ProtocolConfig(**values)
    except ValueError as exc:
        parser.error(str(exc))
    out = Path(args.out) if args.out else _default_outdir() / "log.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    log = prot.run_protocol(config)
    prot.write_log(log, out)
    _write_echo(config, Path(str(out) + ".config"))
    n_unblocked = int((~log.blocked).sum())
    n_detected = int((log.b != prot.EMPTY).sum())
    print(f"wrote {out} ({config.n_rounds} rounds, {n_unblocked} unblocked, {n_detected} detected)")
    return 0


def cmd_certify(args, parser) -> int:
    log_path = Path(args.log)
    sidecar = _load_sidecar_config(log_path)
    blocking = args.blocking
    if blocking is None and sidecar is not None:
        blocking = sidecar.blocking
    if blocking is None:
        parser.error("missing required --lambda (no config sidecar next to the log)")
    if args.seed is None:
        parser.error("missing required --seed")
    log = prot.read_log(log_path, config=sidecar)

    t = est.tally(log)
    _, detected = est.conditional_tables(t)
    observed = est.p_prime_average(detected)
    eta_obs = est.observed_efficiency(t)
    bound = cert.privacy_threshold(
        blocking, eta_obs, args.confidence, t.n_detected, args.sync_model
    )
    verdict = cert.shared_randomness_test(observed, bound, args.sync_model)

    inputs = {
        "log": str(log_path),
        "blocking": blocking,
        "confidence": args.confidence,
        "aggregate": args.aggregate,
        "restarts": args.restarts,
        "seed": args.seed,
        "sync_model": args.sync_model,
        "n_rounds": len(log),
        "n_unblocked": t.n_unblocked,
        "n_detected": t.n_detected,
        "observed_efficiency": f"{eta_obs:.9g}",
    }

    if not verdict.passed:
        report = cert.format_report(inputs, verdict, None)
        print(report, end="")
        if args.out:
            Path(args.out).write_text(report, encoding="ascii")
        print("abort: no bits certified", file=sys.stderr)
        return 4

    bounds = est.probability_bounds(t, args.confidence)
    result = cert.certify_min_entropy(
        cert.ConstraintSet.vector(bounds),
        aggregate=args.aggregate,
        restarts=args.restarts,
        seed=args.seed,
        eta=eta_obs,
    )
    other_name = "uniform_average" if args.aggregate == "worst_event" else "worst_event"
    other = cert.certify_min_entropy(
        cert.ConstraintSet.vector(bounds),
        aggregate=other_name,
        restarts=args.restarts,
        seed=args.seed,
        eta=eta_obs,
    )
    report = cert.format_report(inputs, verdict, result, bounds)
    report += (
        f"certified_bits_per_event[{other_name}] = {other.bits_per_event:.9g}\n"
        f"certified_bits_per_round[{other_name}] = {other.bits_per_round:.9g}\n"
    )
    print(report, end="")
    if args.out:
        Path(args.out).write_text(report, encoding="ascii")
    return 0


_INDICATOR_WINDOWS = {
    "vector": (0.46, 0.56),
    "worst_case": (0.70, 0.80),
    "average": (0.79, 0.85),
}


def cmd_figures(args, parser) -> int:
    outdir = Path(args.outdir) if args.outdir else _default_outdir()
    outdir.mkdir(parents=True, exist_ok=True)
    if args.which == "indicators":
        if args.seed is None:
            parser.error("missing required --seed")
        for mode in cert.MODES:
            lo, hi = _INDICATOR_WINDOWS[mode]
            if args.alpha_min is not None:
                lo = args.alpha_min
            if args.alpha_max is not None:
                hi = args.alpha_max
            grid = np.arange(lo, hi + 1e-12, args.alpha_step)
            curve = cert.indicator_scan(
                mode, grid, args.delta, restarts=args.restarts, seed=args.seed
            )
            path = outdir / f"indicators_{mode}.csv"
            cert.write_indicator_curve(curve, path)
            crossing = cert.zero_crossing(curve)
            print(f"wrote {path} (zero crossing: {crossing})")
        return 0
    if args.which == "thresholds":
        etas = [float(v) for v in args.etas.split(",")]
        betas = np.arange(args.beta_min, args.beta_max + 1e-12, args.beta_step)
        rows = []
        for eta in etas:
            for beta in betas:
                s = cert.sync_overhead(float(beta), args.sync_model)
                d = max(0.0, eta - (1.0 - s))
                rows.append((float(beta), eta, 1.0 - d / (2.0 * eta)))
        path = outdir / "thresholds.csv"
        cert.write_threshold_surface(rows, path)
        print(f"wrote {path}")
        return 0
    # probabilities
    if not args.log:
        parser.error("figures probabilities requires --log")
    log = prot.read_log(Path(args.log), config=_load_sidecar_config(Path(args.log)))
    bounds = est.probability_bounds(est.tally(log), args.confidence)
    path = outdir / "probabilities.csv"
    est.write_bounds(bounds, path)
    print(f"wrote {path}")
    return 0


def cmd_extract(args, parser) -> int:
    log_path = Path(args.log)
    log = prot.read_log(log_path, config=_load_sidecar_config(log_path))
    outdir = Path(args.outdir) if args.outdir else _default_outdir()
    outdir.mkdir(parents=True, exist_ok=True)
    if len(log) == 0 or log.blocked.all():
        print("warning: no unblocked rounds; emitting empty bit streams", file=sys.stderr)
        raw_bits = np.zeros(0, np.uint8)
        extracted = np.zeros(0, np.uint8)
    else:
        raw = ext.build_bit_string(log)
        raw_bits = raw.bits
        extracted = ext.von_neumann(raw)
    raw_path = outdir / "raw_bits.bin"
    out_path = outdir / "extracted_bits.bin"
    ext.write_bits(raw_path, raw_bits)
    ext.write_bits(out_path, extracted)
    print(f"wrote {raw_path} (raw length {len(raw_bits)})")
    print(f"wrote {out_path} (extracted length {len(extracted)})")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdiqrng",
        description="Simulate, estimate, certify and extract for the blocker-based "
        "semi-device-independent randomness protocol.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file (flags win)")
        p.add_argument("--threads", type=int, default=1,
                       help="cap on internal parallelism; 1 is the sequential reference")

    p_sim = sub.add_parser("simulate", help="run the protocol and write a round log")
    common(p_sim)
    p_sim.add_argument("--lambda", dest="blocking", type=float, help="blocker threshold in [0,1)")
    p_sim.add_argument("--eta", dest="channel_efficiency", type=float,
                       help="detection efficiency (honest) or presented efficiency (sync attack)")
    p_sim.add_argument("--n", dest="n_rounds", type=int, help="number of rounds")
    p_sim.add_argument("--seed", type=int, help="master seed (required)")
    p_sim.add_argument("--strategy", choices=prot.STRATEGY_IDS)
    p_sim.add_argument("--sync-model", dest="sync_model", choices=prot.SYNC_MODELS)
    p_sim.add_argument("--hide", dest="hide_in_no_detection",
                       action=argparse.BooleanOptionalAction, default=None,
                       help="sync attack hides resync rounds as no-detections")
    p_sim.add_argument("--prng-q", dest="prng_q",
                       type=lambda s: tuple(float(v) for v in s.split(",")),
                       help="q[z=0,b=0],q[z=0,b=1],q[z=1,b=0],q[z=1,b=1]")
    p_sim.add_argument("--classical-encoding", dest="classical_encoding")
    p_sim.add_argument("--classical-decoding", dest="classical_decoding")
    p_sim.add_argument("--out", help="log file path (default $SDIQRNG_OUTDIR/log.csv)")
    p_sim.set_defaults(func=cmd_simulate)

    p_cert = sub.add_parser("certify", help="estimate, run the privacy test, certify bits")
    common(p_cert)
    p_cert.add_argument("log", help="round-log file")
    p_cert.add_argument("--lambda", dest="blocking", type=float,
                        help="blocker threshold (default: from the log's config sidecar)")
    p_cert.add_argument("--confidence", type=float, default=0.99)
    p_cert.add_argument("--aggregate", choices=cert.AGGREGATES, default="worst_event")
    p_cert.add_argument("--restarts", type=int, default=64)
    p_cert.add_argument("--seed", type=int, help="optimizer seed (required)")
    p_cert.add_argument("--sync-model", dest="sync_model", choices=prot.SYNC_MODELS,
                        default="per_block")
    p_cert.add_argument("--out", help="also write the report to this path")
    p_cert.set_defaults(func=cmd_certify)

    p_fig = sub.add_parser("figures", help="emit figure data files (no plotting)")
    common(p_fig)
    p_fig.add_argument("which", choices=("indicators", "thresholds", "probabilities"))
    p_fig.add_argument("--delta", type=float, default=1e-4)
    p_fig.add_argument("--alpha-min", dest="alpha_min", type=float)
    p_fig.add_argument("--alpha-max", dest="alpha_max", type=float)
    p_fig.add_argument("--alpha-step", dest="alpha_step", type=float, default=0.005)
    p_fig.add_argument("--restarts", type=int, default=32)
    p_fig.add_argument("--seed", type=int, help="optimizer seed (required for indicators)")
    p_fig.add_argument("--etas", default="0.001,0.06,0.5")
    p_fig.add_argument("--beta-min", dest="beta_min", type=float, default=0.0)
    p_fig.add_argument("--beta-max", dest="beta_max", type=float, default=0.99)
    p_fig.add_argument("--beta-step", dest="beta_step", type=float, default=0.01)
    p_fig.add_argument("--sync-model", dest="sync_model", choices=prot.SYNC_MODELS,
                       default="per_block")
    p_fig.add_argument("--log", help="round-log file (probabilities only)")
    p_fig.add_argument("--confidence", type=float, default=0.99)
    p_fig.add_argument("--outdir", help="output directory (default $SDIQRNG_OUTDIR)")
    p_fig.set_defaults(func=cmd_figures)

    p_ext = sub.add_parser("extract", help="build the raw string and debias it")
    common(p_ext)
    p_ext.add_argument("log", help="round-log file")
    p_ext.add_argument("--outdir", help="output directory (default $SDIQRNG_OUTDIR)")
    p_ext.set_defaults(func=cmd_extract)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args, parser)
    except prot.LogParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except est.InsufficientDataError as exc:
        print(f"error: insufficient data: {exc}", file=sys.stderr)
        return 3
    except cert.InfeasibleConstraintsError as exc:
        print(f"error: constraints infeasible: {exc}", file=sys.stderr)
        return 3
    except cert.NonConvergenceError as exc:
        print(f"error: optimizer did not converge: {exc}", file=sys.stderr)
        return 5
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
