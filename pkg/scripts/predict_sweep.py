#!/usr/bin/env python3
"""Exact oracle predictions across the switch-time sweep (no simulation).

    python scripts/predict_sweep.py [--target-onf 0.115] [--sweep 60,30,15,5]
"""

import argparse

from hsps import oracle
from hsps.analysis import calibrate_background
from hsps.instrument import reference_config


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--target-onf", type=float, default=0.115)
    ap.add_argument("--sweep", default="60,30,15,5")
    args = ap.parse_args()

    rate = calibrate_background(args.target_onf, 60.0, reference_config())
    base = reference_config(background_rate_hz=rate)
    print(f"background rate {rate:.2f} Hz")
    print(f"{'dt/ns':>6} {'ONF':>8} {'ONF(1st)':>9} {'alpha':>8} {'alpha(1st)':>10}")
    for dt in (float(x) for x in args.sweep.split(",")):
        cfg = base.with_delta_t(dt)
        pred = oracle.predict(cfg)
        onf1, alpha1 = oracle.predict_first_order(cfg)
        print(f"{dt:6g} {pred.onf:8.4f} {onf1:9.4f} {pred.alpha:8.4f} {alpha1:10.4f}")
    print(f"r = {oracle.predict_r(base):.3e}")


if __name__ == "__main__":
    main()
