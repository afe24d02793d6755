"""Seedable timed event streams.

Times are integer picoseconds since run start. Every random draw comes from a
generator derived from one master seed with :func:`substream_rng`; the spawn
key is ``(purpose, index)`` so adding a new purpose never perturbs the draws of
the existing ones.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hsps.errors import InvalidParameterError, PreconditionError

PS_PER_S = 10**12
FWHM_PER_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))  # 2.3548...


class Origin(enum.IntEnum):
    HERALDED_SIGNAL = 0
    BACKGROUND = 1
    DARK_COUNT = 2
    AFTERPULSE = 3
    HERALD_PHOTON = 4

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def from_label(cls, label: str) -> "Origin":
        try:
            return _BY_LABEL[label]
        except KeyError:
            raise ValueError(f"unknown origin {label!r}") from None


_LABELS = {
    Origin.HERALDED_SIGNAL: "HeraldedSignal",
    Origin.BACKGROUND: "Background",
    Origin.DARK_COUNT: "DarkCount",
    Origin.AFTERPULSE: "Afterpulse",
    Origin.HERALD_PHOTON: "HeraldPhoton",
}
_BY_LABEL = {v: k for k, v in _LABELS.items()}


# Spawn-key purposes. Append only; never renumber.
class Purpose(enum.IntEnum):
    HERALD_PAIRS = 1
    HERALD_DARKS = 2
    HERALD_JITTER = 3
    TWIN_COUPLING = 4
    UNHERALDED_TWINS = 5
    BACKGROUND = 6
    SWITCH = 7
    SPLITTER = 8
    DETECTOR_1 = 9
    DETECTOR_2 = 10
    AFTERPULSE = 11
    PRIMITIVE = 12


def substream_rng(seed, *key: int) -> np.random.Generator:
    """Independent generator for sub-stream ``key`` of master ``seed``.

    A ``Generator`` passed as ``seed`` is returned unchanged so primitives can
    be chained inside a caller that already owns a stream.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        ss = np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(key))
    else:
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise InvalidParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
        ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def seconds_to_ps(t: float) -> int:
    return int(round(t * PS_PER_S))


@dataclass(frozen=True)
class EventStream:
    """Time-sorted events on one channel.

    ``times`` are int64 picoseconds in ``[0, duration_ps]``; ``origins`` holds
    :class:`Origin` codes aligned with ``times``.
    """

    channel: str
    times: np.ndarray
    origins: np.ndarray
    duration_ps: int

    def __post_init__(self):
        times = np.ascontiguousarray(self.times, dtype=np.int64)
        origins = np.ascontiguousarray(self.origins, dtype=np.uint8)
        if origins.ndim == 0:
            origins = np.full(times.shape, origins, dtype=np.uint8)
        if times.shape != origins.shape or times.ndim != 1:
            raise InvalidParameterError("times and origins must be 1-d arrays of equal length")
        if times.size:
            if np.any(np.diff(times) < 0):
                raise PreconditionError(f"events on channel {self.channel!r} are not time-sorted")
            if times[0] < 0 or times[-1] > self.duration_ps:
                raise PreconditionError("event times outside [0, duration]")
        times.flags.writeable = False
        origins.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "origins", origins)

    def __len__(self) -> int:
        return self.times.size

    @property
    def duration_s(self) -> float:
        return self.duration_ps / PS_PER_S

    def with_events(self, times, origins) -> "EventStream":
        return EventStream(self.channel, times, origins, self.duration_ps)

    def to_csv(self, dest=None) -> str | None:
        """Write ``time_ps,channel,origin`` rows; returns the text if ``dest`` is None."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_ps", "channel", "origin"])
        labels = [Origin(o).label for o in range(len(Origin))]
        for t, o in zip(self.times.tolist(), self.origins.tolist()):
            w.writerow([t, self.channel, labels[o]])
        text = buf.getvalue()
        if dest is None:
            return text
        Path(dest).write_text(text)
        return None

    @classmethod
    def from_csv(cls, source, duration_ps: int | None = None) -> "EventStream":
        text = source.read() if hasattr(source, "read") else Path(source).read_text()
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["time_ps", "channel", "origin"]:
            raise PreconditionError("missing time_ps,channel,origin header")
        body = rows[1:]
        channels = {r[1] for r in body}
        if len(channels) > 1:
            raise PreconditionError(f"several channels in one stream: {sorted(channels)}")
        times = np.array([int(r[0]) for r in body], dtype=np.int64)
        origins = np.array([Origin.from_label(r[2]) for r in body], dtype=np.uint8)
        if duration_ps is None:
            duration_ps = int(times[-1]) if times.size else 0
        return cls(channels.pop() if channels else "", times, origins, duration_ps)


def _sorted_stream(channel, times, origins, duration_ps) -> EventStream:
    order = np.argsort(times, kind="stable")
    return EventStream(channel, times[order], origins[order], duration_ps)


def merge_streams(channel: str, *streams: EventStream) -> EventStream:
    """Union of streams, stably sorted (ties keep argument order)."""
    if not streams:
        raise InvalidParameterError("nothing to merge")
    times = np.concatenate([s.times for s in streams])
    origins = np.concatenate([s.origins for s in streams])
    return _sorted_stream(channel, times, origins, max(s.duration_ps for s in streams))


def poisson_times(rate_hz: float, start_ps: int, length_ps: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted event times of a homogeneous Poisson process on ``[start, start+length)``."""
    n = rng.poisson(rate_hz * length_ps / PS_PER_S)
    t = rng.integers(0, length_ps, size=n, dtype=np.int64) if length_ps > 0 else np.zeros(0, np.int64)
    t.sort()
    return t + start_ps


def poisson_in_intervals(rate_hz: float, starts_ps: np.ndarray, length_ps: int, rng: np.random.Generator):
    """Poisson process restricted to disjoint intervals ``[s, s+length)``.

    Returns ``(interval_index, times_ps)`` sorted by time. Equivalent in
    distribution to generating the full process and discarding events outside
    the intervals.
    """
    starts_ps = np.asarray(starts_ps, dtype=np.int64)
    counts = rng.poisson(rate_hz * length_ps / PS_PER_S, size=starts_ps.size)
    idx = np.repeat(np.arange(starts_ps.size), counts)
    offsets = rng.integers(0, length_ps, size=idx.size, dtype=np.int64)
    times = starts_ps[idx] + offsets
    order = np.argsort(times, kind="stable")
    return idx[order], times[order]


def generate_poisson_stream(rate: float, duration: float, origin: Origin, seed, channel: str = "") -> EventStream:
    """Homogeneous Poisson stream of ``rate`` events/s over ``duration`` seconds."""
    if not rate >= 0:
        raise InvalidParameterError(f"rate must be >= 0, got {rate}")
    if not duration > 0:
        raise InvalidParameterError(f"duration must be > 0, got {duration}")
    rng = substream_rng(seed, Purpose.PRIMITIVE, 0)
    dur_ps = seconds_to_ps(duration)
    times = poisson_times(rate, 0, dur_ps, rng)
    return EventStream(channel, times, np.full(times.size, int(origin), np.uint8), dur_ps)


def gaussian_shifts_ps(n: int, fwhm_ps: float, rng: np.random.Generator) -> np.ndarray:
    if fwhm_ps == 0:
        return np.zeros(n, dtype=np.int64)
    return np.rint(rng.normal(0.0, fwhm_ps / FWHM_PER_SIGMA, size=n)).astype(np.int64)


def apply_jitter(stream: EventStream, fwhm: float, seed) -> EventStream:
    """Shift every event by an independent Gaussian deviate of the given FWHM (seconds).

    Results are clipped to the stream's time range and re-sorted.
    """
    if not fwhm >= 0:
        raise InvalidParameterError(f"fwhm must be >= 0, got {fwhm}")
    if fwhm == 0 or len(stream) == 0:
        return stream
    rng = substream_rng(seed, Purpose.PRIMITIVE, 1)
    shifted = stream.times + gaussian_shifts_ps(len(stream), fwhm * PS_PER_S, rng)
    np.clip(shifted, 0, stream.duration_ps, out=shifted)
    return _sorted_stream(stream.channel, shifted, stream.origins.copy(), stream.duration_ps)


def thin_stream(stream: EventStream, survival_probability: float, seed) -> EventStream:
    """Keep each event independently with ``survival_probability``."""
    p = survival_probability
    if not 0 <= p <= 1:
        raise InvalidParameterError(f"survival probability must lie in [0, 1], got {p}")
    if p == 1:
        return stream
    rng = substream_rng(seed, Purpose.PRIMITIVE, 2)
    keep = rng.random(len(stream)) < p
    return stream.with_events(stream.times[keep], stream.origins[keep])
