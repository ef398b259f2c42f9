"""Command-line interface: ``opll simulate | analyze | sweep | selftest``.

Exit codes: 0 success (loop locked), 2 loop not locked, 1 configuration or
usage error.  Every command writes ``manifest.txt`` (flat ``key=value``)
into ``--out`` and echoes the summary keys on stdout.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .analysis import (
    CarrierNotDominantWarning,
    Spectrum,
    carrier_fraction,
    carrier_phase_variance,
    mod_allan,
    rms_phase_variance,
    sa_carrier_phase_variance,
    welch_psd,
)
from .config import config_from_dict, config_hash, load_config, parse_text, set_dotted, with_seed
from .csvio import SCHEMAS, SchemaError, read_columns, read_header, write_columns, write_rows
from .noise import PhaseSeries
from .simengine import ConfigError, SimRecord, run_simulation, run_sweep, validate

log = logging.getLogger("opll")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_LOCKED = 2
THREADS_ENV = "OPLL_THREADS"


class UsageError(Exception):
    """Bad command-line input (maps to exit code 1)."""


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def write_manifest(out_dir: Path, entries: dict, outputs: Sequence[str]) -> Path:
    """Write the flat manifest; ``outputs`` are file names relative to ``out_dir``."""
    lines = [f"{k}={_fmt(v)}" for k, v in entries.items()]
    lines.append(f"outputs={len(outputs)}")
    lines += [f"output.{i}={name}" for i, name in enumerate(outputs)]
    path = out_dir / "manifest.txt"
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def _prepare_out(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _summarize(entries: dict) -> None:
    for k, v in entries.items():
        print(f"{k}={_fmt(v)}")


def _record_summary(rec: SimRecord) -> dict:
    var = rec.locked_phase_variance() if rec.locked else float("nan")
    return {
        "locked": rec.locked,
        "lock_flag_time_s": rec.lock_flag_time,
        "phase_var_rad2": var,
        "overrun_events": len(rec.overrun_events),
        "abort_reason": rec.abort_reason,
    }


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    t_start = time.perf_counter()
    cfg, text = load_config(args.config)
    cfg = with_seed(cfg, args.seed_override)
    validate(cfg)
    out = _prepare_out(args.out)
    rec = run_simulation(cfg)

    t = rec.times
    outputs = [
        write_columns(out / "beat_phase.csv", SCHEMAS["phase"], [t, rec.beat_phase.samples]).name,
        write_columns(out / "phase_error.csv", SCHEMAS["phase"], [t, rec.phase_error]).name,
        write_columns(out / "drives.csv", SCHEMAS["drives"], [t, rec.fast_drive, rec.slow_drive]).name,
    ]
    summary = _record_summary(rec)
    entries = {
        "command": "simulate",
        "version": __version__,
        "config": args.config,
        "config_sha256": config_hash(text),
        "seed": cfg.seed,
        **summary,
        "wall_time_s": time.perf_counter() - t_start,
    }
    write_manifest(out, entries, outputs)
    _summarize(summary)
    return EXIT_OK if rec.locked else EXIT_NOT_LOCKED


def _read_phase(path: str) -> PhaseSeries:
    t, phi = read_columns(path, SCHEMAS["phase"])
    if t.size < 2:
        raise SchemaError(f"{path}: need at least two samples")
    steps = np.diff(t)
    dt = float(np.mean(steps))
    if not dt > 0 or np.max(np.abs(steps - dt)) > 1e-6 * dt:
        raise SchemaError(f"{path}: time_s must be uniformly increasing")
    return PhaseSeries(phi, 1.0 / dt, t0=float(t[0]))


def cmd_analyze(args) -> int:
    t_start = time.perf_counter()
    out = _prepare_out(args.out)
    header = read_header(args.input)
    mode = args.mode
    outputs: list[str] = []
    summary: dict = {"mode": mode}

    if mode == "eq1" and header == SCHEMAS["sa_trace"]:
        if args.rbw_hz is None:
            raise UsageError("--rbw-hz is required for a spectrum-analyzer trace")
        f, p = read_columns(args.input, SCHEMAS["sa_trace"])
        summary["phase_var"] = sa_carrier_phase_variance(f, p, args.rbw_hz)
        outputs.append(write_rows(out / "eq1.csv", ("phase_var",), [(summary["phase_var"],)]).name)
    elif mode == "eq1" and header == SCHEMAS["psd"]:
        f, p = read_columns(args.input, SCHEMAS["psd"])
        spec = Spectrum(f, p, rbw_equivalent=float(f[1] - f[0]) if f.size > 1 else 1.0)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", CarrierNotDominantWarning)
            summary["phase_var"] = carrier_phase_variance(spec, carrier_bins=args.carrier_bins)
        summary["carrier_fraction"] = carrier_fraction(spec, args.carrier_bins)
        summary["carrier_dominant"] = not caught
        outputs.append(write_rows(out / "eq1.csv", ("phase_var", "carrier_fraction"),
                                  [(summary["phase_var"], summary["carrier_fraction"])]).name)
    else:
        series = _read_phase(args.input)
        if mode == "psd":
            seg = args.seg_len or min(len(series), 65536)
            spec = welch_psd(series, seg_len=seg, overlap=args.overlap, detrend="linear")
            summary["peak_hz"] = float(spec.freqs[1:][np.argmax(spec.psd[1:])]) if spec.freqs.size > 1 else 0.0
            summary["total_power"] = spec.integrate()
            summary["rbw_equivalent_hz"] = spec.rbw_equivalent
            outputs.append(write_columns(out / "psd.csv", SCHEMAS["psd"], [spec.freqs, spec.psd]).name)
        elif mode == "eq1":
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", CarrierNotDominantWarning)
                summary["phase_var"] = carrier_phase_variance(series, carrier_bins=args.carrier_bins)
            summary["carrier_fraction"] = carrier_fraction(series, args.carrier_bins)
            summary["carrier_dominant"] = not caught
            outputs.append(write_rows(out / "eq1.csv", ("phase_var", "carrier_fraction"),
                                      [(summary["phase_var"], summary["carrier_fraction"])]).name)
        elif mode == "mvar":
            if args.nu0_hz is None:
                raise UsageError("--nu0-hz is required for mvar")
            curve = mod_allan(series, args.nu0_hz)
            summary["n_taus"] = int(curve.taus.size)
            outputs.append(write_columns(out / "mvar.csv", SCHEMAS["mvar"], [curve.taus, curve.mdev]).name)
        elif mode == "rms":
            rate = min(args.rate_hz, series.sample_rate)
            summary["sample_rate_out_hz"] = rate
            summary["phase_var"] = rms_phase_variance(series, rate)
            outputs.append(write_rows(out / "rms.csv", ("phase_var",), [(summary["phase_var"],)]).name)

    entries = {
        "command": "analyze",
        "version": __version__,
        "input": args.input,
        **summary,
        "wall_time_s": time.perf_counter() - t_start,
    }
    write_manifest(out, entries, outputs)
    _summarize(summary)
    return EXIT_OK


def _parse_values(raw: str) -> list[float]:
    items = [v.strip() for v in raw.split(",") if v.strip()]
    values = []
    for item in items:
        try:
            value = float(item)
        except ValueError:
            raise UsageError(f"sweep value {item!r} is not numeric") from None
        if not math.isfinite(value):
            raise UsageError(f"sweep value {item!r} is not finite")
        values.append(value)
    return values


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1")
    return n


def cmd_sweep(args) -> int:
    t_start = time.perf_counter()
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    data = parse_text(text)
    values = sorted(_parse_values(args.values))
    workers = _threads()
    out = _prepare_out(args.out)

    configs = []
    for v in values:
        value = int(v) if v.is_integer() else v
        cfg = with_seed(config_from_dict(set_dotted(data, args.axis, value)), args.seed_override)
        validate(cfg)
        configs.append(cfg)
    # validate the axis even when there is nothing to run
    set_dotted(data, args.axis, 0.0)

    records = run_sweep(configs, workers=workers)
    rows = []
    for v, rec in zip(values, records):
        if rec.locked:
            var = rec.locked_phase_variance()
            err = PhaseSeries(rec.phase_error[rec.locked_slice()], rec.fs)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", CarrierNotDominantWarning)
                eq1 = carrier_phase_variance(err) if len(err) > 1 else float("nan")
        else:
            var = eq1 = float("nan")
        rows.append((v, var, eq1, int(rec.locked)))
    outputs = [write_rows(out / "summary.csv", ("value", "phase_var", "phase_var_eq1", "locked"), rows).name]

    all_locked = all(r[3] for r in rows)
    summary = {"axis": args.axis, "n_values": len(values), "all_locked": all_locked}
    entries = {
        "command": "sweep",
        "version": __version__,
        "config": args.config,
        "config_sha256": config_hash(text),
        "seed": configs[0].seed if configs else config_from_dict(data).seed,
        "threads": workers,
        **summary,
        "wall_time_s": time.perf_counter() - t_start,
    }
    write_manifest(out, entries, outputs)
    _summarize(summary)
    return EXIT_OK if all_locked else EXIT_NOT_LOCKED


def _selftest_checks():
    from .analysis import carrier_phase_variance as cpv
    from .noise import PowerLawNoiseSpec, synthesize_power_law
    from .pfd import mean_pump_output
    from .simengine import SimConfig

    def white_parseval():
        x = synthesize_power_law(PowerLawNoiseSpec(((0, 1e-6),)), 2**16, 1e6, seed=1).samples
        return abs(np.var(x) / 0.5 - 1) < 0.05

    def pfd_sign():
        return mean_pump_output(1.0e6, 1.017e6, 2e-4, 2e-8) < 0 < mean_pump_output(1.017e6, 1.0e6, 2e-4, 2e-8)

    def eq1_small():
        rng = np.random.default_rng(3)
        phi = rng.normal(0.0, math.sqrt(0.08), 2**16)
        return abs(cpv(PhaseSeries(phi, 1e6), detrend=False) / 0.08 - 1) < 0.2

    def noiseless_lock():
        base = SimConfig()
        cfg = replace(base, laser=replace(base.laser, free_run_noise=PowerLawNoiseSpec()), pfd_floor=False, duration=1e-3)
        rec = run_simulation(cfg)
        return rec.locked and float(np.max(np.abs(rec.phase_error[-1000:]))) < 1e-3

    return [
        ("white_noise_parseval", white_parseval),
        ("pfd_frequency_sign", pfd_sign),
        ("eq1_roundtrip", eq1_small),
        ("noiseless_lock", noiseless_lock),
    ]


def cmd_selftest(args) -> int:
    failed = 0
    for name, check in _selftest_checks():
        try:
            ok = bool(check())
        except Exception as exc:  # report, do not crash
            log.error("%s raised %s", name, exc)
            ok = False
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return EXIT_OK if failed == 0 else EXIT_ERROR


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opll", description="Baseband OPLL simulator and phase-noise analysis.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one closed-loop simulation")
    p.add_argument("--config", required=True, help="TOML config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed-override", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="analyze a phase or spectrum CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--mode", required=True, choices=("psd", "eq1", "mvar", "rms"))
    p.add_argument("--out", required=True)
    p.add_argument("--seg-len", type=int, default=None, help="Welch segment length (samples)")
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--carrier-bins", type=int, default=3)
    p.add_argument("--nu0-hz", type=float, default=None, help="carrier frequency for mvar")
    p.add_argument("--rate-hz", type=float, default=5e6, help="decimated rate for rms")
    p.add_argument("--rbw-hz", type=float, default=None, help="analyzer RBW for eq1 on an SA trace")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="run one simulation per value of a config field")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, help="dotted field, e.g. pfd.n_div")
    p.add_argument("--values", required=True, help="comma-separated numbers (may be empty)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed-override", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("selftest", help="quick built-in sanity checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; 2 means "not locked" here
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
