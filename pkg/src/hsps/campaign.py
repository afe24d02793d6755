"""Switch-time sweeps, result files, and re-import of recorded time tags.

A sweep point consists of five run roles: peak-in with no detector blocked,
with detector 1, detector 2 and both blocked, and a peak-out run. Each run is
reduced to a gate histogram and a coincidence count as soon as it finishes, so
pooled statistics of 10^8 triggers never sit in memory at once.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable
from pathlib import Path

import numpy as np
import yaml

from hsps import analysis as A
from hsps.errors import ConfigurationError, HspsError, InsufficientDataError, TimetagParseError, TimetagValidationError
from hsps.instrument import PEAK_IN, PEAK_OUT, TAGS_HEADER, ExperimentConfig, GateGeometry, RunRecords, run_experiment
from hsps.streams import Origin

log = logging.getLogger(__name__)

ROLES = ("unblocked", "block1", "block2", "block12", "peakout")
_ROLE_SETUP = {
    "unblocked": (PEAK_IN, frozenset()),
    "block1": (PEAK_IN, frozenset({1})),
    "block2": (PEAK_IN, frozenset({2})),
    "block12": (PEAK_IN, frozenset({1, 2})),
    "peakout": (PEAK_OUT, frozenset()),
}


def run_seed(master: int, point: int, role: str, rep: int) -> int:
    """Seed of one run, derived from the campaign master seed by position."""
    ss = np.random.SeedSequence(int(master), spawn_key=(1000 + point, ROLES.index(role), rep))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def role_of(config: ExperimentConfig) -> str:
    for role, (mode, blocked) in _ROLE_SETUP.items():
        if config.mode == mode and config.blocked == blocked:
            return role
    raise ConfigurationError(f"no run role for mode={config.mode} blocked={sorted(config.blocked)}", "blocked")


@dataclass
class RunSummary:
    """Sufficient statistics of one or more pooled runs of the same role."""

    config: ExperimentConfig
    hist: A.GateHistogram
    coincidences: int
    coincidence_triggers: int
    seeds: list[int] = field(default_factory=list)
    min_spacing_ps: int | None = None

    @classmethod
    def of(cls, records: RunRecords, bin_width_ps: int) -> "RunSummary":
        c, n = A._coincidences([records])
        hist = A.build_histogram(records, bin_width_ps)
        return cls(records.config, hist, c, n, [int(records.config.seed)], records.min_trigger_spacing_ps())

    def pool(self, other: "RunSummary") -> "RunSummary":
        if other.config.geometry() != self.config.geometry():
            raise ConfigurationError("cannot pool runs with different geometry", "geometry")
        h = self.hist
        return RunSummary(
            self.config,
            A.GateHistogram(h.bin_width_ps, h.counts + other.hist.counts, h.n_triggers + other.hist.n_triggers, h.gate_length_ps),
            self.coincidences + other.coincidences,
            self.coincidence_triggers + other.coincidence_triggers,
            self.seeds + other.seeds,
            min((s for s in (self.min_spacing_ps, other.min_spacing_ps) if s is not None), default=None),
        )

    def probabilities(self, method: str = "baseline") -> A.ProbabilitySet:
        return A.estimate_probabilities(self.hist, A.regions_for(self.config), method)


def coincidence_set(summaries: dict[str, RunSummary]) -> A.CoincidenceSet:
    roles = ("unblocked", "block1", "block2", "block12")
    missing = [r for r in roles if r not in summaries]
    if missing:
        raise InsufficientDataError(f"missing blocked-detector runs: {missing}")
    ref = A._comparable(summaries["unblocked"].config)
    for r in roles:
        if A._comparable(summaries[r].config) != ref:
            raise ConfigurationError(f"run {r} differs from the unblocked run beyond the blocked set", "config")
    counts = tuple(summaries[r].coincidences for r in roles)
    ns = tuple(summaries[r].coincidence_triggers for r in roles)
    if any(n == 0 for n in ns):
        raise InsufficientDataError("a blocking configuration has no triggers")
    return A.CoincidenceSet(*(c / n for c, n in zip(counts, ns)), counts=counts, n_triggers=ns)


def analyze_point(summaries: dict[str, RunSummary], method: str = "baseline") -> dict:
    """Every figure of merit available from the given run roles."""
    out: dict = {}
    un = summaries.get("unblocked")
    if un is None:
        raise InsufficientDataError("an unblocked peak-in run is required")
    cfg = un.config
    probs = un.probabilities(method)
    out["delta_t_switch_ns"] = cfg.switch.delta_t_switch_ns
    out["n_triggers"] = int(probs.n_triggers.min())
    out["onf"] = A.compute_onf(probs)
    out["onf_err"] = A.onf_error(probs)
    out["gamma"] = A.compute_gamma(probs, cfg.eta)
    out["gamma_err"] = A.gamma_error(probs, cfg.eta)
    out["probabilities"] = probs.as_dict()
    try:
        coin = coincidence_set(summaries)
    except InsufficientDataError as exc:
        out["alpha"] = out["alpha_err"] = None
        out["alpha_note"] = str(exc)
    else:
        out["alpha"] = A.compute_alpha(coin, probs)
        out["alpha_err"] = A.alpha_error(coin, probs)
        out["coincidences"] = coin.as_dict()
    if "peakout" in summaries:
        p_out = summaries["peakout"].probabilities(method)
        out["r"] = A.compute_r(probs, p_out)
        out["r_err"] = A.r_error(probs, p_out)
    else:
        out["r"] = out["r_err"] = None
    return out


def fit_block(points: list[dict]) -> dict:
    """Linear fits of ONF and alpha against the switch time."""
    if len(points) < 3:
        return {"note": f"insufficient points for a fit ({len(points)} < 3)"}
    out = {}
    for key in ("onf", "alpha"):
        pts = [(p["delta_t_switch_ns"], p[key], p[f"{key}_err"]) for p in points if p.get(key) is not None]
        try:
            out[key] = A.fit_linear(pts).as_dict()
        except InsufficientDataError as exc:
            out[key] = {"note": str(exc)}
    return out


# --------------------------------------------------------------------------- campaign


@dataclass
class Campaign:
    """A sweep of switch times around one base configuration.

    ``role_triggers`` overrides the per-run trigger count for a role; runs
    are repeated ``seeds_per_point`` times and pooled.
    """

    base: ExperimentConfig
    sweep_ns: tuple[float, ...]
    out_dir: Path | None = None
    seeds_per_point: int = 1
    role_triggers: dict[str, int] = field(default_factory=dict)
    roles: tuple[str, ...] = ROLES
    bin_width_ps: int = 100
    workers: int | None = None
    calibration: dict | None = None

    def __post_init__(self):
        self.sweep_ns = tuple(float(x) for x in self.sweep_ns)
        if not self.sweep_ns:
            raise ConfigurationError("sweep must not be empty", "campaign.sweep_ns")
        for dt in self.sweep_ns:
            if not dt > 0:
                raise ConfigurationError(f"switch time {dt} must be > 0", "campaign.sweep_ns")
            if round(dt * 1e3) != dt * 1e3:
                raise ConfigurationError(f"switch time {dt} ns is not a whole number of ps", "campaign.sweep_ns")
            self.base.with_delta_t(dt)  # validates the gate layout
        if self.seeds_per_point < 1:
            raise ConfigurationError("must be >= 1", "campaign.seeds_per_point")
        unknown = set(self.role_triggers) - set(ROLES)
        if unknown:
            raise ConfigurationError(f"unknown roles {sorted(unknown)}", "campaign.role_triggers")
        if "unblocked" not in self.roles:
            raise ConfigurationError("the unblocked run is required", "campaign.roles")

    def run_config(self, point: int, role: str, rep: int) -> ExperimentConfig:
        mode, blocked = _ROLE_SETUP[role]
        cfg = self.base.with_delta_t(self.sweep_ns[point]).replace(
            mode=mode, blocked=blocked, seed=run_seed(self.base.seed, point, role, rep)
        )
        if role in self.role_triggers:
            cfg = cfg.replace(n_triggers=int(self.role_triggers[role]), run_duration_s=None)
        return cfg


def simulate_point(campaign: Campaign, point: int, on_run: Callable[[str, RunRecords], None] | None = None) -> dict[str, RunSummary]:
    """Run and pool every role of one sweep point; ``on_run(role, records)`` sees each raw run."""
    summaries: dict[str, RunSummary] = {}
    for role in campaign.roles:
        for rep in range(campaign.seeds_per_point):
            cfg = campaign.run_config(point, role, rep)
            log.info("dt=%g ns %s rep %d seed %d", cfg.switch.delta_t_switch_ns, role, rep, cfg.seed)
            records = run_experiment(cfg)
            if on_run is not None:
                on_run(role, records)
            s = RunSummary.of(records, campaign.bin_width_ps)
            summaries[role] = s if role not in summaries else summaries[role].pool(s)
    return summaries


def _point_job(args):
    campaign, point = args
    return simulate_point(campaign, point)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def run_campaign(campaign: Campaign) -> dict:
    """Simulate and analyse every sweep point; write results when ``out_dir`` is set.

    Files: ``point_dt<dt>ns.json`` and ``hist_dt<dt>ns.csv`` per point,
    ``fit.json``, ``results.json`` (all points plus fits) and
    ``manifest.json`` (resolved config and every run seed).
    """
    out_dir = Path(campaign.out_dir) if campaign.out_dir is not None else None
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            probe = out_dir / ".write-test"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise HspsError(f"output directory {out_dir} is not writable: {exc}") from exc
    jobs = [(campaign, k) for k in range(len(campaign.sweep_ns))]
    workers = campaign.workers or min(len(jobs), os.cpu_count() or 1)
    if workers > 1 and len(jobs) > 1:
        # points are independent; seeds depend only on position, so results do not depend on workers
        with ProcessPoolExecutor(max_workers=workers) as pool:
            all_summaries = list(pool.map(_point_job, jobs))
    else:
        all_summaries = [_point_job(j) for j in jobs]

    points, seeds = [], {}
    for dt, summaries in zip(campaign.sweep_ns, all_summaries):
        res = analyze_point(summaries)
        points.append(res)
        seeds[_tag(dt)] = {role: s.seeds for role, s in summaries.items()}
        if out_dir is not None:
            (out_dir / f"point_{_tag(dt)}.json").write_text(_dump(res))
            summaries["unblocked"].hist.to_csv(out_dir / f"hist_{_tag(dt)}.csv")
            if "peakout" in summaries:
                summaries["peakout"].hist.to_csv(out_dir / f"hist_{_tag(dt)}_peakout.csv")
    fits = fit_block(points)
    result = {"format": "hsps-result/1", "points": points, "fit": fits}
    if out_dir is not None:
        (out_dir / "fit.json").write_text(_dump(fits))
        (out_dir / "results.json").write_text(_dump(result))
        (out_dir / "manifest.json").write_text(_dump(campaign_manifest(campaign, seeds)))
    return result


def _tag(dt: float) -> str:
    return f"dt{dt:g}ns"


def campaign_manifest(campaign: Campaign, seeds: dict | None = None) -> dict:
    return {
        "format": "hsps-campaign/1",
        "experiment": campaign.base.to_dict(),
        "campaign": {
            "sweep_ns": list(campaign.sweep_ns),
            "seeds_per_point": campaign.seeds_per_point,
            "role_triggers": dict(sorted(campaign.role_triggers.items())),
            "roles": list(campaign.roles),
            "bin_width_ps": campaign.bin_width_ps,
        },
        "calibration": campaign.calibration,
        "seeds": seeds,
    }


# --------------------------------------------------------------------------- config files

_CAMPAIGN_KEYS = {"sweep_ns", "seeds_per_point", "role_triggers", "roles", "bin_width_ps", "workers"}
_CALIBRATION_KEYS = {"target_onf", "at_delta_t_ns", "background_rate_hz"}


def load_campaign(path, out_dir=None, sweep_ns=None, seed=None) -> Campaign:
    """Read a YAML config (also accepts a ``manifest.json`` written by a campaign)."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigurationError("top level must be a mapping")
    unknown = set(data) - {"experiment", "campaign", "calibration", "format", "seeds"}
    if unknown:
        raise ConfigurationError(f"unknown section(s) {sorted(unknown)}", sorted(unknown)[0])
    exp = dict(data.get("experiment") or {})
    if seed is not None:
        exp["seed"] = int(seed)
    try:
        base = ExperimentConfig.from_dict(exp)
    except ConfigurationError as exc:
        raise ConfigurationError(exc.message, f"experiment.{exc.field}" if exc.field else "experiment") from None
    except TypeError as exc:
        raise ConfigurationError(str(exc), "experiment") from None

    calib = data.get("calibration")
    if calib:
        unknown = set(calib) - _CALIBRATION_KEYS
        if unknown:
            raise ConfigurationError("unknown key", f"calibration.{sorted(unknown)[0]}")
        calib = dict(calib)
        rate = calib.get("background_rate_hz")
        if rate is None:
            rate = A.calibrate_background(float(calib["target_onf"]), float(calib["at_delta_t_ns"]), base)
            calib["background_rate_hz"] = rate
        base = base.replace(background_rate_hz=float(rate))

    camp = dict(data.get("campaign") or {})
    unknown = set(camp) - _CAMPAIGN_KEYS
    if unknown:
        raise ConfigurationError("unknown key", f"campaign.{sorted(unknown)[0]}")
    if sweep_ns is not None:
        camp["sweep_ns"] = sweep_ns
    camp.setdefault("sweep_ns", [base.switch.delta_t_switch_ns])
    if "roles" in camp:
        camp["roles"] = tuple(camp["roles"])
    return Campaign(base=base, out_dir=out_dir, calibration=calib, **camp)


# --------------------------------------------------------------------------- time-tag import


def import_timetags(path, manifest=None) -> RunRecords:
    """Parse a ``trigger_time_ps,detector,detection_time_in_gate_ps,origin,mode`` file.

    Gate geometry and configuration come from ``manifest`` (a dict or a path);
    by default ``<stem>.manifest.json`` next to the CSV.
    """
    path = Path(path)
    if manifest is None:
        manifest = path.with_suffix(".manifest.json")
    if not isinstance(manifest, dict):
        manifest = json.loads(Path(manifest).read_text())
    cfg = ExperimentConfig.from_dict(manifest["config"])
    geo = GateGeometry(**manifest["geometry"])
    if geo != cfg.geometry():
        raise TimetagValidationError("manifest geometry does not match its config")
    gate_len = geo.gate_length_ps

    triggers: list[int] = []
    times: list[list[int]] = [[], []]
    origins: list[list[int]] = [[], []]
    armed: list[list[bool]] = [[], []]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TAGS_HEADER:
            raise TimetagParseError(f"expected header {','.join(TAGS_HEADER)}", 1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise TimetagParseError(f"expected 5 fields, got {len(row)}", lineno)
            t_s, det_s, dt_s, origin_s, mode = row
            try:
                t = int(t_s)
            except ValueError:
                raise TimetagParseError(f"bad trigger time {t_s!r}", lineno) from None
            if mode != cfg.mode:
                raise TimetagValidationError(f"mode {mode!r} differs from manifest {cfg.mode!r}", lineno)
            if not triggers or t != triggers[-1]:
                if triggers and t < triggers[-1]:
                    raise TimetagValidationError("trigger times not sorted", lineno)
                triggers.append(t)
                for i in (0, 1):
                    times[i].append(-1)
                    origins[i].append(255)
                    armed[i].append(True)
            if det_s == "":
                if dt_s or origin_s:
                    raise TimetagParseError("detection fields without a detector", lineno)
                continue
            if det_s not in ("1", "2"):
                raise TimetagParseError(f"detector must be 1 or 2, got {det_s!r}", lineno)
            i = int(det_s) - 1
            if origin_s == "Unarmed":
                armed[i][-1] = False
                continue
            try:
                dt = int(dt_s)
                origin = Origin.from_label(origin_s)
            except ValueError as exc:
                raise TimetagParseError(str(exc), lineno) from None
            if not 0 <= dt < gate_len:
                raise TimetagValidationError(f"detection at {dt} ps outside the {gate_len} ps gate", lineno)
            if times[i][-1] >= 0:
                raise TimetagValidationError(f"second detection on detector {i + 1} in one gate", lineno)
            times[i][-1] = dt
            origins[i][-1] = int(origin)
    return RunRecords(
        cfg,
        geo,
        np.array(triggers, dtype=np.int64),
        np.array(times, dtype=np.int32).reshape(2, -1),
        np.array(origins, dtype=np.uint8).reshape(2, -1),
        np.array(armed, dtype=bool).reshape(2, -1),
        int(manifest["rearm_interval_ps"]),
    )


def analyze_runs(runs: list[RunRecords], bin_width_ps: int = 100) -> dict:
    """Analyse imported runs: group by role and switch time, pool, and fit."""
    groups: dict[float, dict[str, RunSummary]] = {}
    for run in runs:
        dt = run.config.switch.delta_t_switch_ns
        s = RunSummary.of(run, bin_width_ps)
        g = groups.setdefault(dt, {})
        role = role_of(run.config)
        g[role] = s if role not in g else g[role].pool(s)
    points = [analyze_point(groups[dt]) for dt in sorted(groups, reverse=True)]
    return {"format": "hsps-result/1", "points": points, "fit": fit_block(points)}
