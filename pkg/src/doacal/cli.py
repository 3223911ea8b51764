"""Command-line interface: SNR sweeps, single trials and CRB tables."""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from .errors import ConfigError
from .estimators import Variant
from .harness import (
    ExperimentConfig,
    emit_csv,
    parse_config_file,
    reference_crb_deg2,
    run_sweep,
    run_trial,
)

_VARIANT_TOKENS = {v.value: v for v in Variant}


def _parse_variants(text: str) -> tuple[Variant, ...]:
    out = []
    for token in text.split(","):
        token = token.strip().lower()
        if token not in _VARIANT_TOKENS:
            raise ConfigError(
                f"unknown variant '{token}' (choose from {sorted(_VARIANT_TOKENS)})"
            )
        out.append(_VARIANT_TOKENS[token])
    return tuple(out)


def _load_config(args) -> ExperimentConfig:
    config = parse_config_file(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["master_seed"] = args.seed
    if getattr(args, "trials", None) is not None:
        overrides["n_trials"] = args.trials
    if getattr(args, "variants", None):
        overrides["variants"] = _parse_variants(args.variants)
    if overrides:
        from dataclasses import replace

        config = replace(config, **overrides)
    return config


def _cmd_sweep(args) -> int:
    config = _load_config(args)
    out_path = args.out or config.output_path
    t0 = time.time()
    result = run_sweep(config, jobs=args.jobs)
    emit_csv(result, out_path)
    print(f"wrote {len(result.rows)} rows to {out_path} "
          f"({time.time() - t0:.1f} s)")
    return 0


def _cmd_trial(args) -> int:
    config = _load_config(args)
    variant = _parse_variants(args.variant)[0]
    result = run_trial(config, args.snr_db, variant, args.seed, keep_state=True)
    print(f"variant={variant.value} snr_db={args.snr_db} seed={args.seed} "
          f"status={result.status}")
    if result.status != "ok":
        return 1
    state = result.state
    if args.verbose:
        for i, ll in enumerate(state.loglik_trace, start=1):
            print(f"  iteration {i}: log-likelihood {ll:.6f}")
        for flag in state.flags:
            print(f"  flag: {flag}")
    theta_deg = np.degrees(np.sort(state.theta_u))
    print(f"  theta_unknown_deg = {', '.join(f'{t:.6f}' for t in theta_deg)}")
    print(f"  theta_error_deg   = "
          f"{', '.join(f'{e:.6f}' for e in result.theta_error_deg)}")
    print(f"  iterations        = {result.iterations}")
    if args.verbose:
        amps = ", ".join(f"{abs(g):.4f}" for g in state.gains)
        print(f"  gain amplitudes   = {amps}")
    return 0


def _cmd_crb(args) -> int:
    config = _load_config(args)
    print("snr_db,crb_deg2")
    for snr in config.snr_grid_db:
        print(f"{snr!r},{reference_crb_deg2(config, snr)!r}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="doa-calib",
        description="Joint array calibration and DOA estimation experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sweep = sub.add_parser("sweep", help="Monte-Carlo MSE-vs-SNR sweep to CSV")
    p_sweep.add_argument("--config", help="experiment config file (key = value)")
    p_sweep.add_argument("--out", help="output CSV path (default from config)")
    p_sweep.add_argument("--seed", type=int, help="override master seed")
    p_sweep.add_argument("--trials", type=int, help="override trials per cell")
    p_sweep.add_argument("--variants",
                         help="comma list from iml,miml,uncal,diag")
    p_sweep.add_argument("--jobs", type=int, default=1,
                         help="parallel workers (default 1)")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_trial = sub.add_parser("trial", help="run one trial and print estimates")
    p_trial.add_argument("--config", help="experiment config file")
    p_trial.add_argument("--snr-db", type=float, required=True, dest="snr_db")
    p_trial.add_argument("--variant", required=True,
                         help="one of iml,miml,uncal,diag")
    p_trial.add_argument("--seed", type=int, required=True, help="trial seed")
    p_trial.add_argument("--verbose", action="store_true",
                         help="print per-iteration log-likelihood")
    p_trial.set_defaults(func=_cmd_trial)

    p_crb = sub.add_parser("crb", help="print the CRB per SNR grid point")
    p_crb.add_argument("--config", help="experiment config file")
    p_crb.set_defaults(func=_cmd_crb)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
