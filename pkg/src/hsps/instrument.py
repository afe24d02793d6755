"""Apparatus model: herald arm, FPGA-driven shutter, fiber beam splitter, gated detectors.

All internal times are integer picoseconds. Config fields carry their unit in
the name (``_ns``, ``_us``, ``_ps``, ``_hz``, ``_s``).

Gate geometry, relative to the start of each 100 ns detector gate::

    0 ........ lead-rf  lead ...... lead+dt  lead+dt+rf ........ gate_length
    |  dark    | ramp up |  plateau   | ramp down |   dark        |

The heralded photon nominally sits mid-plateau (peak-in). In peak-out mode the
switching pulse and the gate are delayed by ``peak_out_delay`` with respect to
the photon, so the photon lands in the dark region before the ramp.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numba
import numpy as np

from hsps.errors import ConfigurationError, InvalidParameterError, PreconditionError
from hsps.streams import (
    PS_PER_S,
    EventStream,
    Origin,
    Purpose,
    gaussian_shifts_ps,
    poisson_in_intervals,
    poisson_times,
    substream_rng,
)

PEAK_IN = "peak-in"
PEAK_OUT = "peak-out"
NO_DETECTION = -1
NO_ORIGIN = 255


def _ps(value: float, unit_ps: float) -> int:
    return int(round(value * unit_ps))


@dataclass(frozen=True)
class SwitchProfile:
    delta_t_switch_ns: float = 60.0
    rise_fall_ns: float = 2.5
    extinction: float = 3.5e-3
    quantization_step_ns: float = 6.0

    def __post_init__(self):
        if not self.delta_t_switch_ns > 0:
            raise ConfigurationError("must be > 0", "switch.delta_t_switch_ns")
        if not self.rise_fall_ns >= 0:
            raise ConfigurationError("must be >= 0", "switch.rise_fall_ns")
        if not 0 <= self.extinction < 1:
            raise ConfigurationError("must lie in [0, 1)", "switch.extinction")
        if not self.quantization_step_ns > 0:
            raise ConfigurationError("must be > 0", "switch.quantization_step_ns")

    @property
    def delta_t_ps(self) -> int:
        return _ps(self.delta_t_switch_ns, 1e3)

    @property
    def rise_fall_ps(self) -> int:
        return _ps(self.rise_fall_ns, 1e3)

    @property
    def step_ps(self) -> int:
        return _ps(self.quantization_step_ns, 1e3)

    @property
    def effective_width_ns(self) -> float:
        """Area under the transmission trapezoid (closed-state leakage excluded)."""
        return self.delta_t_switch_ns + self.rise_fall_ns

    def open_fraction(self, offset_ps) -> np.ndarray:
        """Trapezoid in [0, 1] at ``offset_ps`` from the plateau start."""
        x = np.asarray(offset_ps, dtype=np.float64)
        dt, rf = float(self.delta_t_ps), float(self.rise_fall_ps)
        if rf == 0:
            return ((x >= 0) & (x <= dt)).astype(np.float64)
        up = np.clip((x + rf) / rf, 0.0, 1.0)
        down = np.clip((dt + rf - x) / rf, 0.0, 1.0)
        return np.minimum(up, down)

    def transmission(self, offset_ps) -> np.ndarray:
        return self.extinction + (1.0 - self.extinction) * self.open_fraction(offset_ps)


@dataclass(frozen=True)
class DetectorModel:
    efficiency: float = 0.081
    dark_probability_per_gate: float = 1e-4
    gate_length_ns: float = 100.0
    dead_time_us: float = 10.0
    afterpulse_probability: float = 0.0
    afterpulse_tau_us: float = 5.0
    jitter_fwhm_ps: float = 300.0

    def __post_init__(self):
        for name in ("efficiency", "dark_probability_per_gate", "afterpulse_probability"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigurationError("must lie in [0, 1]", f"detector.{name}")
        if not self.gate_length_ns > 0:
            raise ConfigurationError("must be > 0", "detector.gate_length_ns")
        for name in ("dead_time_us", "jitter_fwhm_ps"):
            if not getattr(self, name) >= 0:
                raise ConfigurationError("must be >= 0", f"detector.{name}")
        if not self.afterpulse_tau_us > 0:
            raise ConfigurationError("must be > 0", "detector.afterpulse_tau_us")

    @property
    def gate_length_ps(self) -> int:
        return _ps(self.gate_length_ns, 1e3)


@dataclass(frozen=True)
class ExperimentConfig:
    pair_rate_hz: float = 1.0e5
    herald_efficiency: float = 0.3
    herald_dark_rate_hz: float = 200.0
    herald_jitter_fwhm_ps: float = 500.0
    signal_coupling: float = 0.14
    fiber_delay_ns: float = 98.0
    background_rate_hz: float = 0.0
    switch: SwitchProfile = field(default_factory=SwitchProfile)
    t_dead_us: float = 20.0
    detectors: tuple[DetectorModel, DetectorModel] = (DetectorModel(), DetectorModel())
    fbs_ratio: float = 0.5
    eta: float = 0.081
    gate_lead_ns: float = 20.0
    peak_width_ns: float = 3.0
    mode: str = PEAK_IN
    blocked: frozenset = frozenset()
    peak_out_delay_ns: float | None = None
    run_duration_s: float | None = None
    n_triggers: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blocked", frozenset(int(b) for b in self.blocked))
        object.__setattr__(self, "detectors", tuple(self.detectors))
        for name in ("pair_rate_hz", "herald_dark_rate_hz", "background_rate_hz", "herald_jitter_fwhm_ps"):
            if not getattr(self, name) >= 0:
                raise ConfigurationError("must be >= 0", name)
        for name in ("herald_efficiency", "signal_coupling", "eta"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigurationError("must lie in [0, 1]", name)
        if not 0 < self.fbs_ratio < 1:
            raise ConfigurationError("must lie in (0, 1)", "fbs_ratio")
        if not self.t_dead_us >= 0:
            raise ConfigurationError("must be >= 0", "t_dead_us")
        if len(self.detectors) != 2:
            raise ConfigurationError("exactly two detectors required", "detectors")
        if self.detectors[0].gate_length_ns != self.detectors[1].gate_length_ns:
            raise ConfigurationError("both detectors must share the gate length", "detectors")
        if not self.blocked <= {1, 2}:
            raise ConfigurationError("detector ids are 1 and 2", "blocked")
        if self.mode not in (PEAK_IN, PEAK_OUT):
            raise ConfigurationError(f"must be {PEAK_IN!r} or {PEAK_OUT!r}", "mode")
        if self.run_duration_s is None and self.n_triggers is None:
            raise ConfigurationError("set run_duration_s or n_triggers", "run_duration_s")
        if self.run_duration_s is not None and not self.run_duration_s > 0:
            raise ConfigurationError("must be > 0", "run_duration_s")
        if self.n_triggers is not None and not self.n_triggers > 0:
            raise ConfigurationError("must be > 0", "n_triggers")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("must be a 64-bit unsigned integer", "seed")
        if not self.peak_width_ns >= 0:
            raise ConfigurationError("must be >= 0", "peak_width_ns")
        self.geometry()  # raises on an impossible layout

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_delta_t(self, delta_t_ns: float) -> "ExperimentConfig":
        return self.replace(switch=dataclasses.replace(self.switch, delta_t_switch_ns=delta_t_ns))

    @property
    def gate_length_ps(self) -> int:
        return self.detectors[0].gate_length_ps

    def resolved_peak_out_delay_ns(self) -> float:
        if self.peak_out_delay_ns is not None:
            return self.peak_out_delay_ns
        # photon lands halfway through the lead, well clear of the ramp
        return self.switch.delta_t_switch_ns / 2 + self.gate_lead_ns / 2

    def geometry(self) -> "GateGeometry":
        sw = self.switch
        lead = _ps(self.gate_lead_ns, 1e3)
        dt, rf = sw.delta_t_ps, sw.rise_fall_ps
        gate = self.gate_length_ps
        shift = _ps(self.resolved_peak_out_delay_ns(), 1e3) if self.mode == PEAK_OUT else 0
        peak_center = lead + dt // 2 - shift
        half_peak = _ps(self.peak_width_ns, 1e3) // 2
        if lead - rf < 0 or lead + dt + rf > gate:
            raise ConfigurationError(
                f"open window [{lead - rf}, {lead + dt + rf}] ps does not fit the {gate} ps gate", "gate_lead_ns"
            )
        if peak_center - half_peak < 0 or peak_center + half_peak > gate:
            raise ConfigurationError("heralded-photon peak falls outside the gate", "peak_out_delay_ns")
        if self.mode == PEAK_IN and (peak_center - half_peak < lead or peak_center + half_peak > lead + dt):
            raise ConfigurationError("peak wider than the switch plateau", "peak_width_ns")
        if self.mode == PEAK_OUT and peak_center + half_peak > lead - rf:
            raise ConfigurationError("peak-out photon overlaps the open window", "peak_out_delay_ns")
        offset = _ps(self.fiber_delay_ns, 1e3) - dt // 2 - lead + shift
        return GateGeometry(
            gate_length_ps=gate,
            window_open_ps=lead,
            window_close_ps=lead + dt,
            rise_fall_ps=rf,
            peak_center_ps=peak_center,
            peak_width_ps=2 * half_peak,
            gate_offset_ps=offset,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["blocked"] = sorted(self.blocked)
        d["detectors"] = [dataclasses.asdict(m) for m in self.detectors]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown field(s) {sorted(unknown)}", sorted(unknown)[0])
        if "switch" in data:
            data["switch"] = _sub(SwitchProfile, data["switch"], "switch")
        if "detectors" in data:
            dets = data["detectors"]
            if isinstance(dets, dict):  # one model shared by both arms
                dets = [dets, dets]
            if len(dets) != 2:
                raise ConfigurationError("exactly two detectors required", "detectors")
            data["detectors"] = tuple(_sub(DetectorModel, d, f"detectors[{i}]") for i, d in enumerate(dets))
        if "blocked" in data:
            data["blocked"] = frozenset(data["blocked"] or ())
        return cls(**data)


def _sub(cls, data, path):
    if isinstance(data, cls):
        return data
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown field(s) {sorted(unknown)}", f"{path}.{sorted(unknown)[0]}")
    try:
        return cls(**data)
    except ConfigurationError as exc:
        raise ConfigurationError(str(exc).split(": ", 1)[-1], f"{path}.{exc.field.split('.')[-1]}") from None


def reference_config(**changes) -> ExperimentConfig:
    """Default apparatus: 30 kHz heralds, gamma=0.14, eta=0.081, 60 ns window.

    ``background_rate_hz`` is zero here; fix it with
    :func:`hsps.analysis.calibrate_background`.
    """
    changes.setdefault("n_triggers", 10**6)
    return ExperimentConfig(**changes)


@dataclass(frozen=True)
class GateGeometry:
    """Gate-relative layout in picoseconds (see module docstring)."""

    gate_length_ps: int
    window_open_ps: int
    window_close_ps: int
    rise_fall_ps: int
    peak_center_ps: int
    peak_width_ps: int
    gate_offset_ps: int  # gate start minus accepted herald time

    @property
    def open_region_ps(self) -> tuple[int, int]:
        return self.window_open_ps - self.rise_fall_ps, self.window_close_ps + self.rise_fall_ps


# --------------------------------------------------------------------------- shutter


@dataclass(frozen=True)
class ShutterSchedule:
    """Accepted triggers and the switch windows they opened (absolute ps)."""

    accepted_triggers: np.ndarray
    window_open: np.ndarray
    window_close: np.ndarray
    dead_until: np.ndarray
    delta_t_ps: int
    step_ps: int

    def __len__(self) -> int:
        return self.accepted_triggers.size

    @property
    def windows(self) -> list[tuple[int, int]]:
        return list(zip(self.window_open.tolist(), self.window_close.tolist()))

    def min_trigger_spacing_ps(self) -> int | None:
        if len(self) < 2:
            return None
        return int(np.diff(self.accepted_triggers).min())

    def check(self, t_dead_ps: int) -> None:
        """Assert the schedule invariants; raises ``AssertionError`` on violation."""
        assert np.all(self.window_close - self.window_open == self.delta_t_ps)
        if len(self) > 1:
            assert np.all(self.window_open[1:] > self.window_close[:-1])
            assert np.diff(self.accepted_triggers).min() >= self.delta_t_ps + t_dead_ps
        assert np.all((self.dead_until - self.accepted_triggers) % self.step_ps == 0)


def rearm_interval_ps(delta_t_ps: int, t_dead_ps: int, step_ps: int) -> int:
    """Busy time after a trigger: pulse plus dead time, rounded up to the FPGA step."""
    return -(-(delta_t_ps + t_dead_ps) // step_ps) * step_ps


@numba.njit(cache=True)
def _greedy_accept(times, interval, armed_from):
    accepted = np.zeros(times.size, dtype=np.bool_)
    nxt = armed_from
    for i in range(times.size):
        if times[i] >= nxt:
            accepted[i] = True
            nxt = times[i] + interval
    return accepted, nxt


def build_shutter_schedule(
    herald_detections: EventStream,
    profile: SwitchProfile,
    t_dead: float,
    window_offset_ps: int = 0,
) -> ShutterSchedule:
    """Greedy earliest-first trigger acceptance with a dead time of ``t_dead`` seconds.

    A herald re-arms the FPGA only if it arrives after the previous switch
    pulse plus ``t_dead``. Each accepted herald opens a window of
    ``delta_t_switch`` starting ``window_offset_ps`` after it.
    """
    if not t_dead >= 0:
        raise InvalidParameterError(f"t_dead must be >= 0, got {t_dead}")
    times = herald_detections.times
    interval = rearm_interval_ps(profile.delta_t_ps, _ps(t_dead, PS_PER_S), profile.step_ps)
    accepted, _ = _greedy_accept(times, interval, np.int64(np.iinfo(np.int64).min))
    return _schedule_from(times[accepted], profile, interval, window_offset_ps)


def _schedule_from(triggers, profile, interval, window_offset_ps) -> ShutterSchedule:
    opens = triggers + window_offset_ps
    return ShutterSchedule(
        accepted_triggers=triggers,
        window_open=opens,
        window_close=opens + profile.delta_t_ps,
        dead_until=triggers + interval,
        delta_t_ps=profile.delta_t_ps,
        step_ps=profile.step_ps,
    )


def transmit_through_switch(signal: EventStream, schedule: ShutterSchedule, profile: SwitchProfile, seed) -> EventStream:
    """Thin photons by the switch transmission of the nearest window."""
    rng = substream_rng(seed, Purpose.SWITCH, 0)
    t = signal.times
    if len(schedule) == 0:
        offset = np.full(t.size, np.iinfo(np.int64).max // 4)
    else:
        centre = (schedule.window_open + schedule.window_close) // 2
        j = np.clip(np.searchsorted(centre, t), 1, max(len(schedule) - 1, 1))
        if len(schedule) == 1:
            nearest = np.zeros(t.size, dtype=np.int64)
        else:
            nearest = np.where(np.abs(t - centre[j - 1]) <= np.abs(centre[j] - t), j - 1, j)
        offset = t - schedule.window_open[nearest]
    keep = rng.random(t.size) < profile.transmission(offset)
    return signal.with_events(t[keep], signal.origins[keep])


def split_fbs(stream: EventStream, ratio: float, seed) -> tuple[EventStream, EventStream]:
    """Route each event to output 1 with probability ``ratio``, else to output 2."""
    if not 0 < ratio < 1:
        raise InvalidParameterError(f"splitting ratio must lie in (0, 1), got {ratio}")
    rng = substream_rng(seed, Purpose.SPLITTER, 0)
    to1 = rng.random(len(stream)) < ratio
    return (
        EventStream(stream.channel + "/1", stream.times[to1], stream.origins[to1], stream.duration_ps),
        EventStream(stream.channel + "/2", stream.times[~to1], stream.origins[~to1], stream.duration_ps),
    )


# --------------------------------------------------------------------------- detectors


@dataclass(frozen=True)
class GateDetections:
    """First detection per gate: ``time_in_gate`` is -1 where nothing fired."""

    time_in_gate: np.ndarray
    origin: np.ndarray
    armed: np.ndarray

    def __len__(self) -> int:
        return self.time_in_gate.size


def _first_per_gate(gate_idx, t_in_gate, origins, n_gates):
    times = np.full(n_gates, NO_DETECTION, dtype=np.int64)
    out_origin = np.full(n_gates, NO_ORIGIN, dtype=np.uint8)
    if gate_idx.size:
        order = np.lexsort((t_in_gate, gate_idx))
        g = gate_idx[order]
        first = np.ones(g.size, dtype=bool)
        first[1:] = g[1:] != g[:-1]
        sel = order[first]
        times[gate_idx[sel]] = t_in_gate[sel]
        out_origin[gate_idx[sel]] = origins[sel]
    return times, out_origin


def detect_in_gates(gate_idx, t_in_gate, origins, n_gates, model: DetectorModel, rng, blocked=False):
    """Detection on photons already assigned to gates (times relative to gate start)."""
    gate_len = model.gate_length_ps
    if blocked:
        gate_idx = gate_idx[:0]
        t_in_gate = t_in_gate[:0]
        origins = origins[:0]
    hit = rng.random(gate_idx.size) < model.efficiency
    t = t_in_gate[hit] + gaussian_shifts_ps(int(hit.sum()), model.jitter_fwhm_ps, rng)
    g, o = gate_idx[hit], origins[hit]
    inside = (t >= 0) & (t < gate_len)
    t, g, o = t[inside], g[inside], o[inside]
    dark = np.flatnonzero(rng.random(n_gates) < model.dark_probability_per_gate)
    dark_t = rng.integers(0, gate_len, size=dark.size, dtype=np.int64)
    g = np.concatenate([g, dark])
    t = np.concatenate([t, dark_t])
    o = np.concatenate([o, np.full(dark.size, Origin.DARK_COUNT, dtype=np.uint8)])
    return _first_per_gate(g, t, o, n_gates)


@numba.njit(cache=True)
def _dead_time_and_afterpulses(gate_start, times, origins, dead_ps, ap_prob, ap_tau_ps, gate_len, u, pos):
    n = gate_start.size
    armed = np.ones(n, dtype=np.bool_)
    ready = np.iinfo(np.int64).min
    last_fire = np.iinfo(np.int64).min
    for i in range(n):
        if gate_start[i] < ready:
            armed[i] = False
            times[i] = -1
            origins[i] = 255
            continue
        if ap_prob > 0.0 and last_fire != np.iinfo(np.int64).min:
            p = ap_prob * np.exp(-(gate_start[i] - last_fire) / ap_tau_ps)
            if u[i] < p and (times[i] < 0 or pos[i] < times[i]):
                times[i] = pos[i]
                origins[i] = 3
        if times[i] >= 0:
            last_fire = gate_start[i] + times[i]
            ready = last_fire + dead_ps
    return armed


def apply_detector_memory(gate_start, det: GateDetections, model: DetectorModel, rng) -> GateDetections:
    """Cross-gate effects: dead time disarming later gates, optional afterpulsing."""
    times = det.time_in_gate.copy()
    origins = det.origin.copy()
    dead_ps = _ps(model.dead_time_us, 1e6)
    n = times.size
    if model.afterpulse_probability > 0:
        u = rng.random(n)
        pos = rng.integers(0, model.gate_length_ps, size=n, dtype=np.int64)
    else:
        u = np.ones(n)
        pos = np.zeros(n, dtype=np.int64)
    armed = _dead_time_and_afterpulses(
        np.asarray(gate_start, dtype=np.int64),
        times,
        origins,
        dead_ps,
        float(model.afterpulse_probability),
        float(model.afterpulse_tau_us * 1e6),
        model.gate_length_ps,
        u,
        pos,
    )
    return GateDetections(times, origins, armed)


def _check_gates(gate_starts, gate_len, dead_ps=0):
    gate_starts = np.asarray(gate_starts, dtype=np.int64)
    if gate_starts.size > 1 and np.any(np.diff(gate_starts) < gate_len):
        raise ConfigurationError("detector gates overlap", "gates")
    return gate_starts


def detect(photons: EventStream, gate_starts, model: DetectorModel, seed, blocked: bool = False) -> GateDetections:
    """Gated detection: at most the first detection in each gate is kept.

    Photons outside every gate are ignored. Dark counts land uniformly in a
    gate with ``dark_probability_per_gate``. A blocked detector sees darks only.
    """
    gate_len = model.gate_length_ps
    starts = _check_gates(gate_starts, gate_len)
    rng = substream_rng(seed, Purpose.DETECTOR_1, 0)
    t = photons.times
    g = np.searchsorted(starts, t, side="right") - 1
    inside = (g >= 0) & (t - starts[np.maximum(g, 0)] < gate_len)
    g = g[inside]
    times, origins = detect_in_gates(g, t[inside] - starts[g], photons.origins[inside], starts.size, model, rng, blocked)
    return apply_detector_memory(starts, GateDetections(times, origins, np.ones(starts.size, bool)), model, rng)


# --------------------------------------------------------------------------- records


@dataclass(frozen=True)
class TriggerRecord:
    trigger_time_ps: int
    window: tuple[int, int]
    detections: dict[int, list[tuple[int, Origin]]]
    mode: str


@dataclass(frozen=True)
class RunRecords:
    """Columnar trigger records of one run.

    ``det_time`` and ``det_origin`` have shape ``(2, n)``; row ``i`` is
    detector ``i + 1``. Times are relative to the gate start, -1 when the
    detector did not fire. ``armed`` is False where the detector was still
    dead when the gate came.
    """

    config: ExperimentConfig
    geometry: GateGeometry
    triggers_ps: np.ndarray
    det_time: np.ndarray
    det_origin: np.ndarray
    armed: np.ndarray
    rearm_interval_ps: int

    def __len__(self) -> int:
        return self.triggers_ps.size

    def __getitem__(self, k: int) -> TriggerRecord:
        geo = self.geometry
        gate_start = int(self.triggers_ps[k]) + geo.gate_offset_ps
        dets = {}
        for i in (0, 1):
            t = int(self.det_time[i, k])
            dets[i + 1] = [] if t < 0 else [(t, Origin(int(self.det_origin[i, k])))]
        return TriggerRecord(
            trigger_time_ps=int(self.triggers_ps[k]),
            window=(gate_start + geo.window_open_ps, gate_start + geo.window_close_ps),
            detections=dets,
            mode=self.config.mode,
        )

    def __iter__(self) -> Iterator[TriggerRecord]:
        return (self[k] for k in range(len(self)))

    @property
    def n_triggers(self) -> np.ndarray:
        """Triggers accepted by each detector."""
        return self.armed.sum(axis=1)

    @property
    def fired(self) -> np.ndarray:
        return self.det_time >= 0

    def schedule(self) -> ShutterSchedule:
        sw = self.config.switch
        return _schedule_from(
            self.triggers_ps, sw, self.rearm_interval_ps, self.geometry.gate_offset_ps + self.geometry.window_open_ps
        )

    def min_trigger_spacing_ps(self) -> int | None:
        return self.schedule().min_trigger_spacing_ps()

    def to_csv(self, dest) -> None:
        """``trigger_time_ps,detector,detection_time_in_gate_ps,origin,mode`` rows.

        Triggers where neither detector fired appear once with empty detector
        fields; gates a dead detector missed carry origin ``Unarmed``.
        """
        mode = self.config.mode
        labels = {int(o): o.label for o in Origin}
        with open(dest, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TAGS_HEADER)
            trig = self.triggers_ps.tolist()
            dt = self.det_time.tolist()
            do = self.det_origin.tolist()
            arm = self.armed.tolist()
            for k, t in enumerate(trig):
                wrote = False
                for i in (0, 1):
                    if not arm[i][k]:
                        w.writerow([t, i + 1, "", "Unarmed", mode])
                        wrote = True
                    elif dt[i][k] >= 0:
                        w.writerow([t, i + 1, dt[i][k], labels[do[i][k]], mode])
                        wrote = True
                if not wrote:
                    w.writerow([t, "", "", "", mode])

    def manifest(self) -> dict:
        return {
            "format": "hsps-run/1",
            "config": self.config.to_dict(),
            "geometry": dataclasses.asdict(self.geometry),
            "rearm_interval_ps": self.rearm_interval_ps,
            "n_triggers": len(self),
        }

    def write(self, stem) -> tuple[Path, Path]:
        """Write ``<stem>.csv`` and ``<stem>.manifest.json``."""
        stem = Path(stem)
        csv_path = stem.with_suffix(".csv")
        man_path = stem.with_suffix(".manifest.json")
        self.to_csv(csv_path)
        man_path.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return csv_path, man_path


TAGS_HEADER = ["trigger_time_ps", "detector", "detection_time_in_gate_ps", "origin", "mode"]


# --------------------------------------------------------------------------- experiment

_TARGET_HERALDS_PER_CHUNK = 1 << 18


def run_experiment(config: ExperimentConfig) -> RunRecords:
    """Simulate one run of the apparatus and return its trigger records.

    The run is generated in chunks of herald time. Photons only matter inside
    detector gates, so background and unheralded-twin photons are drawn
    directly inside the gates (a restricted Poisson process); twins of heralds
    that were rejected by the dead time are tracked exactly.
    """
    cfg = config
    geo = cfg.geometry()
    seed = int(cfg.seed)
    sw = cfg.switch
    gate_len = geo.gate_length_ps
    delay_ps = _ps(cfg.fiber_delay_ns, 1e3)
    interval = rearm_interval_ps(sw.delta_t_ps, _ps(cfg.t_dead_us, 1e6), sw.step_ps)

    herald_rate = cfg.pair_rate_hz * cfg.herald_efficiency + cfg.herald_dark_rate_hz
    duration_ps = None if cfg.run_duration_s is None else _ps(cfg.run_duration_s, PS_PER_S)
    if herald_rate == 0:
        return _empty_records(cfg, geo, interval)
    chunk_ps = _ps(_TARGET_HERALDS_PER_CHUNK / herald_rate, PS_PER_S)
    if duration_ps is not None:
        chunk_ps = min(chunk_ps, duration_ps)
    # pairs emitted after a chunk end never reach gates more than this far back
    jitter_margin = int(10 * cfg.herald_jitter_fwhm_ps) + 1000
    unheralded_rate = cfg.pair_rate_hz * (1 - cfg.herald_efficiency) * cfg.signal_coupling

    pend_gates = np.zeros(0, np.int64)
    pend_has_signal = np.zeros(0, bool)
    pend_signal_t = np.zeros(0, np.int64)
    pend_twins = np.zeros(0, np.int64)
    armed_from = np.int64(np.iinfo(np.int64).min)
    total = 0
    out_trig, out_time, out_orig = [], [], []
    k = 0
    done = False
    while not done:
        t0 = k * chunk_ps
        length = chunk_ps if duration_ps is None else min(chunk_ps, duration_ps - t0)
        t1 = t0 + length
        if duration_ps is not None and t1 >= duration_ps:
            done = True

        pairs = poisson_times(cfg.pair_rate_hz * cfg.herald_efficiency, t0, length, substream_rng(seed, Purpose.HERALD_PAIRS, k))
        twin = substream_rng(seed, Purpose.TWIN_COUPLING, k).random(pairs.size) < cfg.signal_coupling
        darks = poisson_times(cfg.herald_dark_rate_hz, t0, length, substream_rng(seed, Purpose.HERALD_DARKS, k))
        jit = gaussian_shifts_ps(pairs.size, cfg.herald_jitter_fwhm_ps, substream_rng(seed, Purpose.HERALD_JITTER, k))
        h_time = np.concatenate([pairs + jit, darks])
        h_twin = np.concatenate([twin, np.zeros(darks.size, bool)])
        h_twin_t = np.concatenate([pairs + delay_ps, np.full(darks.size, -1, np.int64)])
        order = np.argsort(h_time, kind="stable")
        h_time, h_twin, h_twin_t = h_time[order], h_twin[order], h_twin_t[order]
        np.maximum(h_time, 0, out=h_time)

        accepted, armed_from = _greedy_accept(h_time, np.int64(interval), armed_from)
        trig = h_time[accepted]
        if cfg.n_triggers is not None and total + trig.size >= cfg.n_triggers:
            keep = cfg.n_triggers - total
            cut = np.flatnonzero(accepted)[keep] if keep < trig.size else h_time.size
            accepted[cut:] = False
            trig = trig[:keep]
            done = True
        total += trig.size

        gates = np.concatenate([pend_gates, trig + geo.gate_offset_ps])
        has_signal = np.concatenate([pend_has_signal, h_twin[accepted]])
        signal_t = np.concatenate([pend_signal_t, h_twin_t[accepted]])
        rejected_twins = h_twin_t[h_twin & ~accepted]
        twins = np.concatenate([pend_twins, rejected_twins])
        twins.sort(kind="stable")

        if done:
            n_final = gates.size
        else:
            # future twins arrive no earlier than t1 + delay
            n_final = int(np.searchsorted(gates + gate_len, t1 + delay_ps - jitter_margin, side="right"))
        fin = gates[:n_final]
        g = np.searchsorted(fin, twins, side="right") - 1
        in_fin = (g >= 0) & (twins - fin[np.maximum(g, 0)] < gate_len)
        twin_gate, twin_t = g[in_fin], twins[in_fin]
        if not done:
            # future gates start no earlier than t1 + gate offset
            pend_gates = gates[n_final:]
            horizon = t1 + geo.gate_offset_ps - jitter_margin
            if pend_gates.size:
                horizon = min(horizon, int(pend_gates[0]))
            pend_twins = twins[~in_fin & (twins >= horizon)]
            pend_has_signal = has_signal[n_final:]
            pend_signal_t = signal_t[n_final:]
        if n_final:
            times, origins = _simulate_gates(
                cfg, geo, fin, has_signal[:n_final], signal_t[:n_final], twin_gate, twin_t, unheralded_rate, seed, k
            )
            out_trig.append(fin - geo.gate_offset_ps)
            out_time.append(times)
            out_orig.append(origins)
        k += 1

    if not out_trig:
        return _empty_records(cfg, geo, interval)
    triggers = np.concatenate(out_trig)
    det_time = np.concatenate(out_time, axis=1)
    det_origin = np.concatenate(out_orig, axis=1)
    gate_start = triggers + geo.gate_offset_ps
    armed = np.empty(det_time.shape, dtype=bool)
    for i, model in enumerate(cfg.detectors):
        mem = apply_detector_memory(
            gate_start,
            GateDetections(det_time[i], det_origin[i], np.ones(triggers.size, bool)),
            model,
            substream_rng(seed, Purpose.AFTERPULSE, i),
        )
        det_time[i], det_origin[i], armed[i] = mem.time_in_gate, mem.origin, mem.armed
    records = RunRecords(cfg, geo, triggers, det_time.astype(np.int32), det_origin, armed, interval)
    spacing = records.min_trigger_spacing_ps()
    if spacing is not None and spacing < sw.delta_t_ps + _ps(cfg.t_dead_us, 1e6):
        raise AssertionError(f"dead-time invariant violated: spacing {spacing} ps")
    return records


def _empty_records(cfg, geo, interval) -> RunRecords:
    return RunRecords(
        cfg,
        geo,
        np.zeros(0, np.int64),
        np.zeros((2, 0), np.int32),
        np.zeros((2, 0), np.uint8),
        np.zeros((2, 0), bool),
        interval,
    )


def _simulate_gates(cfg, geo, gate_start, has_signal, signal_t, twin_gate, twin_t, unheralded_rate, seed, k):
    """Photons in a block of gates -> switch -> splitter -> two detectors."""
    n = gate_start.size
    gate_len = geo.gate_length_ps
    sig_gate = np.flatnonzero(has_signal)
    sig_t = signal_t[sig_gate] - gate_start[sig_gate]
    bg_gate, bg_t = poisson_in_intervals(cfg.background_rate_hz, gate_start, gate_len, substream_rng(seed, Purpose.BACKGROUND, k))
    uh_gate, uh_t = poisson_in_intervals(unheralded_rate, gate_start, gate_len, substream_rng(seed, Purpose.UNHERALDED_TWINS, k))
    g = np.concatenate([sig_gate, twin_gate, bg_gate, uh_gate])
    t = np.concatenate([sig_t, twin_t - gate_start[twin_gate], bg_t - gate_start[bg_gate], uh_t - gate_start[uh_gate]])
    o = np.concatenate(
        [
            np.full(sig_gate.size, Origin.HERALDED_SIGNAL, np.uint8),
            np.full(twin_gate.size + bg_gate.size + uh_gate.size, Origin.BACKGROUND, np.uint8),
        ]
    )
    inside = (t >= 0) & (t < gate_len)  # a heralded twin can miss its gate only for absurd jitter
    g, t, o = g[inside], t[inside], o[inside]

    keep = substream_rng(seed, Purpose.SWITCH, k).random(t.size) < cfg.switch.transmission(t - geo.window_open_ps)
    g, t, o = g[keep], t[keep], o[keep]
    to1 = substream_rng(seed, Purpose.SPLITTER, k).random(t.size) < cfg.fbs_ratio

    times = np.empty((2, n), np.int64)
    origins = np.empty((2, n), np.uint8)
    for i, (sel, purpose) in enumerate(((to1, Purpose.DETECTOR_1), (~to1, Purpose.DETECTOR_2))):
        times[i], origins[i] = detect_in_gates(
            g[sel], t[sel], o[sel], n, cfg.detectors[i], substream_rng(seed, purpose, k), blocked=(i + 1) in cfg.blocked
        )
    return times, origins
