"""Command-line entry point: ``hsps run | sweep | predict | analyze``.

Exit status is 0 on success. On failure a one-line JSON object
``{"error": kind, "message": ...}`` goes to stderr and the status is 2 for
bad input and 1 for anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from hsps import oracle
from hsps.campaign import analyze_runs, import_timetags, load_campaign, run_campaign
from hsps.errors import ConfigurationError, HspsError


def _sweep(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hsps", description="Shuttered heralded single-photon source simulator.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one sweep point (all run roles) and analyse it")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--dt", type=float, help="switch time in ns (default: the config's)")

    p = sub.add_parser("sweep", help="simulate and analyse a switch-time sweep")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--dt", type=_sweep, help="comma-separated switch times in ns, e.g. 60,30,15,5")

    p = sub.add_parser("predict", help="closed-form expectations for a configuration")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--dt", type=_sweep)

    p = sub.add_parser("analyze", help="analyse recorded time-tag files")
    p.add_argument("--tags", required=True, nargs="+", type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--bin-width-ps", type=int, default=100)
    return ap


def _write(out: Path, name: str, obj) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _main(args) -> dict:
    if args.command in ("run", "sweep"):
        dt = [args.dt] if args.command == "run" and args.dt is not None else getattr(args, "dt", None)
        campaign = load_campaign(args.config, out_dir=args.out, sweep_ns=dt, seed=args.seed)
        if args.command == "run":
            campaign.sweep_ns = campaign.sweep_ns[:1]
        return run_campaign(campaign)
    if args.command == "predict":
        campaign = load_campaign(args.config, sweep_ns=args.dt)
        return {
            "format": "hsps-prediction/1",
            "points": [oracle.prediction_report(campaign.base.with_delta_t(dt)) for dt in campaign.sweep_ns],
        }
    if args.command == "analyze":
        result = analyze_runs([import_timetags(p) for p in args.tags], args.bin_width_ps)
        _write(args.out, "results.json", result)
        return result
    raise ConfigurationError(f"unknown command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = _main(args)
    except (HspsError, OSError, KeyError) as exc:
        kind = getattr(exc, "kind", "io" if isinstance(exc, OSError) else "input")
        print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
        return 2 if isinstance(exc, (ValueError, OSError, KeyError)) else 1
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
