"""Command-line entry point: ``liperm <experiment> --config PATH``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .ad import ConfigurationError
from .experiments import EXPERIMENTS, load_config, run_experiment
from .measures import ResourceError

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_DIVERGED = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="liperm", description="Left-inverse-penalized GAN experiments.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", required=True, help="TOML or JSON experiment config")
    p.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
    p.add_argument("--out", help="output directory (default: output_dir from the config)")
    p.add_argument("--lam", type=float, action="append",
                   help="restrict a sweep to these lambda values (repeatable)")
    p.add_argument("--verify", action="store_true", help="also run the bound verification suite")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if cfg.experiment != args.experiment:
            raise ConfigurationError(f"config is for {cfg.experiment!r}, not {args.experiment!r}")
        if args.lam:
            unknown = [lam for lam in args.lam if lam not in cfg.lambda_grid]
            if unknown:
                raise ConfigurationError(f"--lam values {unknown} are not in the configured lambda_grid")
        seeds = [args.seed] if args.seed is not None else None
        result = run_experiment(cfg, args.out, lambdas=args.lam, seeds=seeds, verify=args.verify)
    except (ConfigurationError, ResourceError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    verdict = result.get("verify", result) if (args.verify or cfg.experiment == "bounds_verify") else None
    if verdict is not None and not verdict["passed"]:
        print(f"verification failed: {verdict['failures']} of {verdict['n_checks']} checks", file=sys.stderr)
        return EXIT_VERIFY
    if result.get("diverged"):
        print(f"{result['diverged']} run(s) diverged", file=sys.stderr)
        return EXIT_DIVERGED
    if not args.quiet:
        brief = {k: v for k, v in result.items() if k not in ("rows", "checks", "verify")}
        print(json.dumps(brief, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
