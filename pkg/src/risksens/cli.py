"""Command-line entry point.

    risksens coeffs     --config run.cfg --out out/
    risksens verify     --config run.cfg --out out/ [--fault swap-gamma-rho]
    risksens experiment --config run.cfg --out out/ [--seed N --paths N --steps N]
    risksens hjb-scan   --config run.cfg --out out/

The config is a flat ``key = value`` file; ``#`` starts a comment. Keys are
the field names of the market parameters and of the experiment settings
(see ``CONFIG_KEYS``). Exit status: 0 on success, 1 when a verification
check fails, 2 on bad input or a coefficient blow-up.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from .gridfn import BlowUpError, make_grid
from .portfolio import (
    FAULTS,
    ExperimentConfig,
    Tolerances,
    baseline_config,
    build_coefficients,
    hjb_scan,
    run_experiment,
    verify_relations,
)
from .lq_coeffs import write_coefficients_csv

log = logging.getLogger("risksens")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class ConfigError(ValueError):
    pass


def _vec(n):
    def parse(text):
        parts = [p for p in text.replace(",", " ").split()]
        if n is not None and len(parts) != n:
            raise ValueError(f"expected {n} numbers, got {len(parts)}")
        return tuple(float(p) for p in parts)
    return parse


def _int(text):
    val = float(text)
    if val != int(val):
        raise ValueError(f"{text!r} is not an integer")
    return int(val)


PARAM_KEYS = {
    "r": float, "a": float, "A": float, "b": float, "B": float,
    "sigma": _vec(2), "lam": _vec(2), "theta": float, "v": float, "T": float,
}
EXPERIMENT_KEYS = {
    "n_steps": _int, "ode_refinement": _int, "n_paths": _int, "seed": _int, "x0": float,
    "perturbations": _vec(None), "state_box": _vec(2), "block_size": _int,
    "relation_paths": _int, "relation_points": _int, "control_grid": _int,
    "control_box": _vec(2), "bsde_paths": _int, "theta_sweep": _vec(None),
    "constant_control": float, "workers": _int,
}
TOLERANCE_KEYS = {f"tol_{name}": float for name in Tolerances.__dataclass_fields__}
SCAN_KEYS = {"scan_t": _int, "scan_x": _int}
CONFIG_KEYS = {**PARAM_KEYS, **EXPERIMENT_KEYS, **TOLERANCE_KEYS, **SCAN_KEYS}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return values


def build_config(values: dict, seed=None, paths=None, steps=None) -> tuple[ExperimentConfig, dict]:
    """Baseline settings overridden by the config values, then by the command-line flags."""
    values = dict(values)
    for key, flag in (("seed", seed), ("n_paths", paths), ("n_steps", steps)):
        if flag is not None:
            values[key] = flag
    base = baseline_config()
    try:
        params = base.params.replace(**{k: v for k, v in values.items() if k in PARAM_KEYS})
        n_steps = values.pop("n_steps", base.sde_grid.n_steps)
        if n_steps < 1:
            raise ValueError("n_steps must be positive")
        tol = Tolerances(**{k[4:]: v for k, v in values.items() if k in TOLERANCE_KEYS})
        exp = {k: v for k, v in values.items() if k in EXPERIMENT_KEYS}
        config = replace(base, params=params, sde_grid=make_grid(0.0, params.T, n_steps),
                         tolerances=tol, **exp)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    scan = {"n_t": values.get("scan_t", 20), "n_x": values.get("scan_x", 20)}
    return config, scan


def load_config(path, **flags) -> tuple[ExperimentConfig, dict]:
    if path is None:
        return build_config({}, **flags)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return build_config(parse_config_text(text, str(path)), **flags)


def cmd_coeffs(config: ExperimentConfig, out_dir, **_) -> int:
    coeffs = build_coefficients(config)
    write_coefficients_csv(coeffs, os.path.join(out_dir, "coeffs.csv"))
    return EXIT_OK


def cmd_verify(config: ExperimentConfig, out_dir, fault=None, **_) -> int:
    report = verify_relations(config, fault=fault)
    with open(os.path.join(out_dir, "relations.txt"), "w", newline="\n") as fh:
        fh.write(report.to_text())
    for c in report.checks:
        if not c.passed:
            log.warning("check %s failed: violation %.3g > %.3g at %s",
                        c.name, c.violation, c.tolerance, c.location)
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_experiment(config: ExperimentConfig, out_dir, fault=None, **_) -> int:
    report = run_experiment(config, out_dir, fault=fault)
    return EXIT_OK if report.relations.passed else EXIT_FAIL


def cmd_hjb_scan(config: ExperimentConfig, out_dir, scan=None, **_) -> int:
    scan = scan or {}
    coeffs = build_coefficients(config)
    rows = hjb_scan(coeffs, config.params, scan.get("n_t", 20), scan.get("n_x", 20),
                    config.state_box, config.control_box, config.control_grid)
    with open(os.path.join(out_dir, "hjb_scan.csv"), "w", newline="\n") as fh:
        fh.write("t,x,residual,u_star\n")
        for row in rows:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")
    worst = max(abs(r[2]) for r in rows)
    log.info("max |HJB residual| = %.3g", worst)
    return EXIT_OK


COMMANDS = {
    "coeffs": cmd_coeffs,
    "verify": cmd_verify,
    "experiment": cmd_experiment,
    "hjb-scan": cmd_hjb_scan,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="risksens",
                                     description="Risk-sensitive factor-model portfolio: "
                                                 "coefficients, relation checks, Monte Carlo.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH", help="flat key = value file")
        p.add_argument("--out", metavar="DIR", default=".", help="output directory (created)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--paths", type=int, help="override n_paths")
        p.add_argument("--steps", type=int, help="override n_steps")
        p.add_argument("--fault", choices=FAULTS, help="inject a known fault (test hook)")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                       help="log progress to stderr")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config, scan = load_config(args.config, seed=args.seed, paths=args.paths,
                                   steps=args.steps)
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](config, args.out, fault=args.fault, scan=scan)
    except ConfigError as exc:
        print(f"risksens: config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BlowUpError as exc:
        print(f"risksens: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"risksens: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
