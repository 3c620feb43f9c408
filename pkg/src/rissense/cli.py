"""Command-line front end: geometry diagnostics, experiment runners, and
a quick self-check of the library's derived constants."""

import argparse
import dataclasses
import math
import sys

import numpy as np

from rissense.geometry import (ArrayGeometry, SubcarrierGrid, SPEED_OF_LIGHT,
                               apparent_angle, classical_rayleigh,
                               effective_rayleigh_freq)
from rissense.harness import (ALL_SCHEMES, PROFILES, ExperimentConfig,
                              records_to_csv, run_experiment, summarize,
                              write_json)

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(name, text):
    kind = _FIELD_TYPES[name]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple":
            parts = [p for p in text.split(",") if p.strip() != ""]
            return tuple(float(p) for p in parts)
    except ValueError:
        raise ValueError(f"config key {name!r}: cannot parse {text!r} as {kind}")
    return text


def load_config(profile="paper", config_path=None, seed=None):
    """Profile defaults, overlaid with a flat key = value file, then the
    seed flag.  Unknown keys are errors, as are malformed values."""
    config = PROFILES[profile]()
    if config_path is not None:
        overrides = {}
        with open(config_path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{config_path}:{lineno}: expected key = value")
                key, _, value = line.partition("=")
                key = key.strip()
                if key not in _FIELD_TYPES:
                    raise ValueError(f"{config_path}:{lineno}: unknown config key {key!r}")
                overrides[key] = _parse_value(key, value)
        config = dataclasses.replace(config, **overrides)
    if seed is not None:
        config = dataclasses.replace(config, master_seed=seed)
    return config


def _bs_array(config):
    return ArrayGeometry(config.n_bs,
                         SPEED_OF_LIGHT / config.center_freq_hz / 2.0)


def cmd_rayleigh(config, args, out):
    array = _bs_array(config)
    lam = SPEED_OF_LIGHT / config.center_freq_hz
    print(f"num_elements = {array.num_elements}", file=out)
    print(f"aperture_m = {array.aperture:.6g}", file=out)
    print(f"classical_rayleigh_m = {classical_rayleigh(array.aperture, lam):.6g}",
          file=out)
    for theta in args.theta:
        eps, z_eff = effective_rayleigh_freq(array, config.center_freq_hz,
                                             theta, config.hbar)
        print(f"theta = {theta:.3f}  epsilon = {eps:.4f}  z_eff_m = {z_eff:.4f}",
              file=out)
    return 0


def cmd_squint(config, args, out):
    grid = SubcarrierGrid(config.center_freq_hz, config.bandwidth_hz,
                          config.num_subcarriers)
    m_hi = config.num_subcarriers - 1
    print(f"band_ghz = {config.bandwidth_hz / 1e9:.6g}", file=out)
    for theta in args.theta:
        low = apparent_angle(grid, theta, 0)
        high = apparent_angle(grid, theta, m_hi)
        spread = abs(high - low)
        bins = spread / (2.0 / (config.varsigma * config.n_bs))
        print(f"theta = {theta:.3f}  apparent_low = {low:.6f}  "
              f"apparent_high = {high:.6f}  spread = {spread:.6f}  "
              f"resolution_bins = {bins:.3f}", file=out)
    return 0


def _print_summary(summary, out):
    for row in summary["per_sweep"]:
        cells = [f"sweep={row['sweep_value']:g}", f"n={row['count']}"]
        for key, label in (("nmse_gmmv_bu", "gmmv"), ("nmse_psomp_bu", "psomp"),
                           ("nmse_la_bu", "la"), ("nmse_genie_bu", "genie")):
            if row.get(key) is not None:
                cells.append(f"{label}={row[key]:.2f}dB")
        for key, label in (("rmse_cdl_pos_err_m", "cdl_pos"),
                           ("rmse_pdl_pos_err_m", "pdl_pos")):
            if row.get(key) is not None:
                cells.append(f"{label}={row[key]:.3g}m")
        if row["failed"]:
            cells.append(f"failed={row['failed']}")
        print("  ".join(cells), file=out)


def _run_and_write(config, schemes, args, out):
    records = run_experiment(config, schemes=schemes, workers=args.workers)
    summary = summarize(records)
    if args.out is not None:
        if args.format == "csv":
            with open(args.out, "w", newline="") as fh:
                fh.write(records_to_csv(records))
        else:
            with open(args.out, "w") as fh:
                write_json(records, fh, summary=summary)
        print(f"wrote {len(records)} records to {args.out}", file=out)
    _print_summary(summary, out)
    return 0


def _oracle_checks():
    """Fast numeric self-checks of the library's derived quantities.
    Yields (name, passed, detail) triples."""
    lam = SPEED_OF_LIGHT / 0.1e12
    array = ArrayGeometry(256, lam / 2.0)
    classical = classical_rayleigh(array.aperture, lam)
    yield ("classical_rayleigh", abs(classical - 98.304) < 0.1,
           f"{classical:.3f} m")
    eps, z_eff = effective_rayleigh_freq(array, 0.1e12, 0.5, 0.1)
    yield ("effective_rayleigh", 0.36 <= eps <= 0.44 and 26.5 <= z_eff <= 32.5,
           f"epsilon={eps:.3f} z_eff={z_eff:.2f} m")
    grid = SubcarrierGrid(0.1e12, 10e9, 2048)
    spread = abs(apparent_angle(grid, 0.5, 2047) - apparent_angle(grid, 0.5, 0))
    bins = spread / (2.0 / (2 * 256))
    yield ("squint_spread", abs(spread - 0.05) <= 0.002 and abs(bins - 12.8) <= 1.0,
           f"spread={spread:.4f} bins={bins:.2f}")

    from rissense.geometry import near_response
    from rissense.pdl import noise_projector

    rng = np.random.default_rng(11)
    small = ArrayGeometry(16, lam / 2.0)
    sig = np.stack([near_response(small, grid.frequency(m), 0.2, 8.0)
                    for m in range(4)], axis=1)
    y = sig @ (rng.normal(size=(4, 32)) + 1j * rng.normal(size=(4, 32)))
    gram = y @ y.conj().T
    proj, _ = noise_projector(gram, 4)
    resid = float(np.linalg.norm(proj @ sig) / np.linalg.norm(sig))
    yield ("noise_projector", resid < 1e-8, f"|P a|/|a| = {resid:.2e}")

    from rissense.cdl import pgd_gradient, pgd_loss

    rng = np.random.default_rng(5)
    g16 = SubcarrierGrid(0.1e12, 10e9, 16)
    arr = ArrayGeometry(32, lam / 2.0)
    w = np.exp(2j * np.pi * rng.uniform(size=(8, 32))) / 2.0
    yg = np.stack([w @ near_response(arr, g16.frequency(m), 0.31, 14.0)
                   for m in range(16)])
    worst = 0.0
    for _ in range(5):
        th = rng.uniform(-0.6, 0.6)
        r = rng.uniform(5.0, 40.0)
        _, grad = pgd_gradient(yg, w, arr, g16, th, r)
        h = 1e-6
        fd = (pgd_loss(yg, w, arr, g16, th + h, r)
              - pgd_loss(yg, w, arr, g16, th - h, r)) / (2 * h)
        worst = max(worst, abs(grad - fd) / max(abs(fd), 1e-30))
    yield ("pgd_gradient", worst < 1e-5, f"max rel err {worst:.2e}")

    from rissense.cdl import intersect_lines

    bs = ArrayGeometry(16, lam / 2, math.pi / 4, (-10 * math.sqrt(2), 0.0))
    ris = ArrayGeometry(16, lam / 2, math.pi / 4, (10 * math.sqrt(2), 0.0),
                        mirrored=True)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        phi = rng.uniform(-3 * math.pi / 4, -math.pi / 4)
        r = 100.0 * math.sqrt(rng.uniform(0.04, 1.0))
        ue = (r * math.cos(phi), r * math.sin(phi))
        t_b = bs.bearing_to(ue)[0]
        t_r = ris.bearing_to(ue)[0]
        xy, _, _ = intersect_lines(t_b, t_r, bs, ris)
        worst = max(worst, math.hypot(xy[0] - ue[0], xy[1] - ue[1]))
    yield ("bearing_intersection", worst < 1e-9, f"worst {worst:.2e} m")

    from rissense.pdl import delay_estimate

    freqs = SubcarrierGrid(0.1e12, 10e9, 2048).frequencies
    tau = 75.01e-9
    tone = np.exp(2j * math.pi * tau * freqs)[None, :]
    gram = tone.conj().T @ tone
    proj = np.eye(2048) - tone.conj().T @ tone / 2048.0
    est = delay_estimate(proj, freqs, 667e-9, levels=3, coarse_points=512)
    err = abs(est.tau - tau)
    yield ("delay_spectrum", err < est.search_resolution,
           f"err {err:.2e} s at resolution {est.search_resolution:.2e} s")


def cmd_oracle_check(config, args, out):
    failed = 0
    for name, ok, detail in _oracle_checks():
        status = "PASS" if ok else "FAIL"
        failed += not ok
        print(f"{status} {name} ({detail})", file=out)
    print(f"{'all checks passed' if not failed else f'{failed} check(s) failed'}",
          file=out)
    return 1 if failed else 0


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", default=None, metavar="PATH",
                        help="flat key = value overrides for the profile")
    shared.add_argument("--profile", choices=sorted(PROFILES), default="paper")
    shared.add_argument("--seed", type=int, default=None,
                        help="override the master seed")
    run_opts = argparse.ArgumentParser(add_help=False)
    run_opts.add_argument("--out", default=None, metavar="PATH")
    run_opts.add_argument("--format", choices=("csv", "json"), default="csv")
    run_opts.add_argument("--workers", type=int, default=1)

    parser = argparse.ArgumentParser(
        prog="rissense",
        description="Wideband array channel sounding, estimation and "
                    "localization experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rayleigh", parents=[shared],
                       help="near/far boundary distances for the profile array")
    p.add_argument("--theta", type=float, action="append", default=None)
    p.set_defaults(func=cmd_rayleigh)
    p = sub.add_parser("squint", parents=[shared],
                       help="apparent-angle drift across the band")
    p.add_argument("--theta", type=float, action="append", default=None)
    p.set_defaults(func=cmd_squint)

    for name, schemes, blurb in (
            ("run-ce", ("ce",), "channel estimation comparison only"),
            ("run-cdl", ("ce", "cdl"), "estimation plus two-bearing localization"),
            ("run-pdl", ("pdl",), "delay-difference localization only"),
            ("sweep", ALL_SCHEMES, "full experiment grid")):
        p = sub.add_parser(name, parents=[shared, run_opts], help=blurb)
        p.set_defaults(func=None, schemes=schemes)
    p = sub.add_parser("oracle-check", parents=[shared],
                       help="run fast numeric self-checks and print pass/fail")
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.profile, args.config, args.seed)
        if getattr(args, "theta", "absent") is None:
            args.theta = [0.1, 0.3, 0.5, 0.7, 0.9]
        if args.func is not None:
            return args.func(config, args, sys.stdout)
        return _run_and_write(config, args.schemes, args, sys.stdout)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
