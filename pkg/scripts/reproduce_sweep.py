#!/usr/bin/env python3
"""Calibrate the background, run the pooled switch-time sweep and print a table.

    python scripts/reproduce_sweep.py --out runs/sweep [--seeds 10] [--triggers 10000000]

Writes the usual campaign files (results.json, fit.json, manifest.json,
per-point JSON and histogram CSVs) to ``--out``.
"""

import argparse
import logging

from hsps.analysis import calibrate_background
from hsps.campaign import Campaign, run_campaign
from hsps.instrument import reference_config


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=2010)
    ap.add_argument("--seeds", type=int, default=10, help="runs pooled per role and point")
    ap.add_argument("--triggers", type=int, default=10**7, help="triggers per run")
    ap.add_argument("--target-onf", type=float, default=0.115)
    ap.add_argument("--sweep", default="60,30,15,5")
    ap.add_argument("-v", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.v else logging.WARNING)

    rate = calibrate_background(args.target_onf, 60.0, reference_config())
    base = reference_config(background_rate_hz=rate, n_triggers=args.triggers, seed=args.seed)
    small = max(args.triggers // 10, 1)
    camp = Campaign(
        base,
        tuple(float(x) for x in args.sweep.split(",")),
        out_dir=args.out,
        seeds_per_point=args.seeds,
        role_triggers={"block12": small, "peakout": small},
        calibration={"target_onf": args.target_onf, "at_delta_t_ns": 60.0, "background_rate_hz": rate},
    )
    res = run_campaign(camp)
    print(f"background rate {rate:.2f} Hz")
    print(f"{'dt/ns':>6} {'ONF':>16} {'alpha':>16} {'gamma':>16} {'r':>18}")
    for p in res["points"]:
        r = f"{p['r']:.2e} +/- {p['r_err']:.1e}" if p["r"] is not None else "-"
        print(
            f"{p['delta_t_switch_ns']:6g} {p['onf']:.4f} +/- {p['onf_err']:.4f} "
            f"{p['alpha']:.4f} +/- {p['alpha_err']:.4f} {p['gamma']:.4f} +/- {p['gamma_err']:.4f} {r:>18}"
        )
    for key, fit in res["fit"].items():
        if "R" in fit:
            lo, hi = fit["intercept_ci95"]
            print(f"{key}: slope {fit['slope']:.3e}/ns intercept {fit['intercept']:.4f} [{lo:.4f}, {hi:.4f}] R {fit['R']:.4f}")


if __name__ == "__main__":
    main()
