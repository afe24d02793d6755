"""Estimators on trigger records: gate histograms, region decomposition, ONF, alpha, r, gamma, fits.

Region decomposition with ``method="baseline"`` (the default) subtracts the
flat dark level from the open window and the background plateau from under
the heralded-photon peak before assigning counts, so ``p_true`` and ``p_bkg``
estimate heralded and background clicks rather than raw region populations.
``method="region"`` returns the raw region fractions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from hsps.errors import (
    CalibrationError,
    ConfigurationError,
    DegenerateDesignError,
    InsufficientDataError,
    InvalidParameterError,
)
from hsps.instrument import PEAK_OUT, ExperimentConfig, RunRecords

# --------------------------------------------------------------------------- histogram


@dataclass(frozen=True)
class GateHistogram:
    bin_width_ps: int
    counts: np.ndarray  # (2, n_bins)
    n_triggers: np.ndarray  # (2,)
    gate_length_ps: int

    @property
    def bin_starts_ps(self) -> np.ndarray:
        return np.arange(self.counts.shape[1], dtype=np.int64) * self.bin_width_ps

    @property
    def bin_centres_ps(self) -> np.ndarray:
        return self.bin_starts_ps + self.bin_width_ps / 2

    def to_csv(self, dest) -> None:
        with open(dest, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_start_ps", "det1_counts", "det2_counts"])
            for row in zip(self.bin_starts_ps.tolist(), self.counts[0].tolist(), self.counts[1].tolist()):
                w.writerow(row)


def _as_runs(records) -> list[RunRecords]:
    return [records] if isinstance(records, RunRecords) else list(records)


def build_histogram(records: RunRecords | Sequence[RunRecords], bin_width_ps: int = 100) -> GateHistogram:
    """Detections per time-in-gate bin for each detector, pooled over ``records``."""
    runs = _as_runs(records)
    if not runs:
        raise InsufficientDataError("no runs to histogram")
    gate = runs[0].geometry.gate_length_ps
    if bin_width_ps <= 0 or gate % bin_width_ps:
        raise InvalidParameterError(f"bin width {bin_width_ps} ps does not divide the {gate} ps gate")
    n_bins = gate // bin_width_ps
    counts = np.zeros((2, n_bins), dtype=np.int64)
    n_trig = np.zeros(2, dtype=np.int64)
    for run in runs:
        if run.geometry != runs[0].geometry:
            raise ConfigurationError("cannot pool runs with different gate geometry", "geometry")
        for i in (0, 1):
            t = run.det_time[i][run.det_time[i] >= 0]
            counts[i] += np.bincount(t // bin_width_ps, minlength=n_bins)[:n_bins]
        n_trig += run.n_triggers
    return GateHistogram(bin_width_ps, counts, n_trig, gate)


# --------------------------------------------------------------------------- regions


@dataclass(frozen=True)
class RegionBounds:
    """Half-open intervals in ps relative to the gate start.

    ``open_window`` spans the ramps; ``rise_fall_ps`` lets the estimators
    weight the window by the switch transmission trapezoid.
    """

    peak: tuple[int, int]
    open_window: tuple[int, int]
    gate_length_ps: int
    rise_fall_ps: int = 0

    @property
    def bkg(self) -> list[tuple[int, int]]:
        (p0, p1), (w0, w1) = self.peak, self.open_window
        if p1 <= w0 or p0 >= w1:
            return [self.open_window]
        return [iv for iv in ((w0, p0), (p1, w1)) if iv[1] > iv[0]]

    @property
    def dark(self) -> list[tuple[int, int]]:
        (p0, p1), (w0, w1) = self.peak, self.open_window
        out = [(0, w0), (w1, self.gate_length_ps)]
        if p1 <= w0 or p0 >= w1:  # peak outside the window is carved out of the dark region
            out = [piece for a, b in out for piece in ((a, min(b, p0)), (max(a, p1), b))]
        return [iv for iv in out if iv[1] > iv[0]]

    def weight(self, t_ps) -> np.ndarray:
        """Relative switch transmission (1 on the plateau) at ``t_ps``."""
        t = np.asarray(t_ps, dtype=np.float64)
        w0, w1 = self.open_window
        rf = self.rise_fall_ps
        if rf == 0:
            return ((t >= w0) & (t < w1)).astype(float)
        return np.clip(np.minimum((t - w0) / rf, (w1 - t) / rf), 0.0, 1.0)

    def masks(self, centres) -> dict[str, np.ndarray]:
        def inside(ivs):
            m = np.zeros(len(centres), dtype=bool)
            for a, b in ivs:
                m |= (centres >= a) & (centres < b)
            return m

        return {"peak": inside([self.peak]), "bkg": inside(self.bkg), "dark": inside(self.dark)}


def classify_regions(
    open_window: tuple[int, int],
    peak_center_ps: int,
    peak_full_width_ps: int,
    gate_length_ps: int,
    rise_fall_ps: int = 0,
    mode: str = "peak-in",
) -> RegionBounds:
    """Split the gate into heralded-peak, background (rest of window) and dark regions."""
    w0, w1 = open_window
    if not 0 <= w0 < w1 <= gate_length_ps:
        raise ConfigurationError("open window must lie inside the gate", "open_window")
    half = peak_full_width_ps / 2
    p0, p1 = int(round(peak_center_ps - half)), int(round(peak_center_ps + half))
    if p1 - p0 > w1 - w0:
        raise ConfigurationError("peak wider than the open window", "peak_width")
    if mode == PEAK_OUT:
        if p1 > w0 and p0 < w1 and p1 > p0:
            raise ConfigurationError("peak-out peak overlaps the open window", "peak_center")
        if p0 < 0 or p1 > gate_length_ps:
            raise ConfigurationError("peak outside the gate", "peak_center")
    elif p1 > p0 and (p0 < w0 or p1 > w1):
        raise ConfigurationError("peak-in peak not inside the open window", "peak_center")
    return RegionBounds((p0, p1), (w0, w1), gate_length_ps, rise_fall_ps)


def regions_for(records: RunRecords | ExperimentConfig) -> RegionBounds:
    """Regions implied by a run's configured geometry."""
    cfg = records.config if isinstance(records, RunRecords) else records
    geo = cfg.geometry()
    return classify_regions(
        geo.open_region_ps, geo.peak_center_ps, geo.peak_width_ps, geo.gate_length_ps, geo.rise_fall_ps, cfg.mode
    )


# --------------------------------------------------------------------------- singles


@dataclass(frozen=True)
class ProbabilitySet:
    """Per-detector click probabilities per accepted trigger (index 0 = detector 1).

    ``raw`` holds the Poisson region counts ``(peak, bkg, dark)`` per detector
    and ``coef`` the linear maps from them to the true/bkg count estimates;
    together they give the standard errors.
    """

    p_true: np.ndarray
    p_bkg: np.ndarray
    p_dark: np.ndarray
    n_triggers: np.ndarray
    raw: np.ndarray = field(repr=False)
    coef_true: np.ndarray = field(repr=False)
    coef_bkg: np.ndarray = field(repr=False)

    def __post_init__(self):
        # p_tot is defined as the sum, so the decomposition identity is exact
        if np.any(self.n_triggers <= 0):
            raise InsufficientDataError("a detector accepted no triggers")

    @property
    def p_tot(self) -> np.ndarray:
        return self.p_true + self.p_bkg + self.p_dark

    @property
    def p_signal(self) -> np.ndarray:
        """Dark-free singles ``p_true + p_bkg``."""
        return self.p_true + self.p_bkg

    def _var(self, coef) -> np.ndarray:
        # an empty region still carries the one-count Poisson uncertainty
        return (np.maximum(self.raw, 1) * coef**2).sum(axis=1) / self.n_triggers**2

    @property
    def sigma_true(self) -> np.ndarray:
        return np.sqrt(self._var(self.coef_true))

    @property
    def sigma_bkg(self) -> np.ndarray:
        return np.sqrt(self._var(self.coef_bkg))

    @property
    def sigma_signal(self) -> np.ndarray:
        return np.sqrt(self._var(self.coef_true + self.coef_bkg))

    @property
    def sigma_dark(self) -> np.ndarray:
        # every bin lies in exactly one region, so the total is the raw sum
        return np.sqrt(self._var(1.0 - self.coef_true - self.coef_bkg))

    def as_dict(self) -> dict:
        return {
            "p_true": self.p_true.tolist(),
            "p_bkg": self.p_bkg.tolist(),
            "p_dark": self.p_dark.tolist(),
            "p_tot": self.p_tot.tolist(),
            "sigma_true": self.sigma_true.tolist(),
            "sigma_bkg": self.sigma_bkg.tolist(),
            "n_triggers": self.n_triggers.tolist(),
        }


def estimate_probabilities(hist: GateHistogram, regions: RegionBounds, method: str = "baseline") -> ProbabilitySet:
    """Per-trigger true/background/dark probabilities for each detector."""
    if np.any(hist.n_triggers <= 0):
        raise InsufficientDataError("no accepted triggers")
    centres = hist.bin_centres_ps
    m = regions.masks(centres)
    raw = np.stack([hist.counts[:, m[k]].sum(axis=1) for k in ("peak", "bkg", "dark")], axis=1).astype(float)
    total = hist.counts.sum(axis=1).astype(float)
    if method == "region":
        coef_true = np.array([1.0, 0.0, 0.0])
        coef_bkg = np.array([0.0, 1.0, 0.0])
    elif method == "baseline":
        bw = hist.bin_width_ps
        w = regions.weight(centres) * bw
        lengths = {k: m[k].sum() * bw for k in m}
        area_peak, area_bkg = w[m["peak"]].sum(), w[m["bkg"]].sum()
        area_win = area_peak + area_bkg
        # dark level per ps, from the dark region
        d = np.array([0.0, 0.0, 1.0 / lengths["dark"]]) if lengths["dark"] else np.zeros(3)
        # background light per unit transmission area, from the window sidebands
        if area_bkg > 0:
            b = (np.array([0.0, 1.0, 0.0]) - lengths["bkg"] * d) / area_bkg
        else:
            b = np.zeros(3)
        coef_true = np.array([1.0, 0.0, 0.0]) - lengths["peak"] * d - area_peak * b
        coef_bkg = area_win * b
    else:
        raise InvalidParameterError(f"unknown method {method!r}")
    n = hist.n_triggers.astype(float)
    n_true = raw @ coef_true
    n_bkg = raw @ coef_bkg
    p_true, p_bkg = n_true / n, n_bkg / n
    p_dark = total / n - p_true - p_bkg
    return ProbabilitySet(p_true, p_bkg, p_dark, hist.n_triggers.copy(), raw, coef_true, coef_bkg)


def probabilities_for(records, bin_width_ps: int = 100, method: str = "baseline") -> ProbabilitySet:
    runs = _as_runs(records)
    return estimate_probabilities(build_histogram(runs, bin_width_ps), regions_for(runs[0]), method)


def compute_onf(probs: ProbabilitySet) -> float:
    """Share of background among the dark-free output clicks of both detectors."""
    den = float(probs.p_signal.sum())
    if den <= 0:
        raise InsufficientDataError("no true or background clicks")
    return float(probs.p_bkg.sum()) / den


def onf_error(probs: ProbabilitySet) -> float:
    b, s = probs.p_bkg.sum(), probs.p_signal.sum()
    if s <= 0:
        raise InsufficientDataError("no true or background clicks")
    # gradient of B / S wrt raw counts; B and S are linear in them
    n = probs.n_triggers[:, None].astype(float)
    grad = (probs.coef_bkg / n) / s - b / s**2 * ((probs.coef_true + probs.coef_bkg) / n)
    return float(np.sqrt((probs.raw * grad**2).sum()))


# --------------------------------------------------------------------------- coincidences


@dataclass(frozen=True)
class CoincidenceSet:
    p12_tot_tot: float
    p12_dark_tot: float
    p12_tot_dark: float
    p12_dark_dark: float
    counts: tuple[int, int, int, int]
    n_triggers: tuple[int, int, int, int]

    @property
    def p12_signal(self) -> float:
        return self.p12_tot_tot - self.p12_dark_tot - self.p12_tot_dark + self.p12_dark_dark

    @property
    def sigma_signal(self) -> float:
        # no coincidences at all still leaves a one-count uncertainty
        var = sum(c / n**2 for c, n in zip(self.counts, self.n_triggers))
        return float(np.sqrt(max(var, 1.0 / self.n_triggers[0] ** 2)))

    def as_dict(self) -> dict:
        return {
            "p12_tot_tot": self.p12_tot_tot,
            "p12_dark_tot": self.p12_dark_tot,
            "p12_tot_dark": self.p12_tot_dark,
            "p12_dark_dark": self.p12_dark_dark,
            "p12_signal": self.p12_signal,
            "sigma_signal": self.sigma_signal,
            "counts": list(self.counts),
            "n_triggers": list(self.n_triggers),
        }


def _comparable(cfg: ExperimentConfig) -> dict:
    d = cfg.to_dict()
    for k in ("blocked", "seed", "n_triggers", "run_duration_s"):
        d.pop(k)
    return d


def _coincidences(runs: list[RunRecords]) -> tuple[int, int]:
    c = n = 0
    for run in runs:
        both = run.armed.all(axis=0)
        c += int((run.fired.all(axis=0) & both).sum())
        n += int(both.sum())
    return c, n


def count_coincidences(unblocked, block_1, block_2, block_both) -> CoincidenceSet:
    """Two-fold coincidence probabilities for the four blocking configurations.

    ``block_1`` has detector 1 blocked (dark;tot term), ``block_2`` detector 2
    (tot;dark). Each argument is a run or a list of runs to pool.
    """
    groups = [_as_runs(g) for g in (unblocked, block_1, block_2, block_both)]
    expected = (frozenset(), frozenset({1}), frozenset({2}), frozenset({1, 2}))
    ref = _comparable(groups[0][0].config)
    for runs, want in zip(groups, expected):
        for run in runs:
            if run.config.blocked != want:
                raise ConfigurationError(f"expected blocked={sorted(want)}, got {sorted(run.config.blocked)}", "blocked")
            if _comparable(run.config) != ref:
                raise ConfigurationError("runs differ in more than the blocked detectors", "config")
    cn = [_coincidences(g) for g in groups]
    if any(n == 0 for _, n in cn):
        raise InsufficientDataError("a blocking configuration has no triggers")
    p = [c / n for c, n in cn]
    return CoincidenceSet(*p, counts=tuple(c for c, _ in cn), n_triggers=tuple(n for _, n in cn))


def compute_alpha(coin: CoincidenceSet, probs: ProbabilitySet) -> float:
    """Dark-subtracted coincidences over the product of dark-free singles."""
    s1, s2 = probs.p_signal
    if s1 <= 0 or s2 <= 0:
        raise InsufficientDataError("alpha needs positive singles on both detectors")
    return coin.p12_signal / (s1 * s2)


def alpha_error(coin: CoincidenceSet, probs: ProbabilitySet) -> float:
    s1, s2 = probs.p_signal
    e1, e2 = probs.sigma_signal
    if s1 <= 0 or s2 <= 0:
        raise InsufficientDataError("alpha needs positive singles on both detectors")
    a = coin.p12_signal / (s1 * s2)
    return float(np.sqrt((coin.sigma_signal / (s1 * s2)) ** 2 + a**2 * ((e1 / s1) ** 2 + (e2 / s2) ** 2)))


# --------------------------------------------------------------------------- r and gamma


def compute_r(probs_peak_in: ProbabilitySet, probs_peak_out: ProbabilitySet) -> float:
    """Heralded-click probability with the photon outside the window over inside."""
    p_in = float(probs_peak_in.p_true.sum())
    if p_in <= 0:
        raise InsufficientDataError("no heralded clicks in the peak-in run")
    return float(probs_peak_out.p_true.sum()) / p_in


def r_error(probs_peak_in: ProbabilitySet, probs_peak_out: ProbabilitySet) -> float:
    p_in, p_out = probs_peak_in.p_true.sum(), probs_peak_out.p_true.sum()
    if p_in <= 0:
        raise InsufficientDataError("no heralded clicks in the peak-in run")
    v_in = (probs_peak_in.sigma_true**2).sum()
    v_out = (probs_peak_out.sigma_true**2).sum()
    return float(np.sqrt(v_out / p_in**2 + (p_out / p_in**2) ** 2 * v_in))


def compute_gamma(probs: ProbabilitySet, eta: float) -> float:
    """Source coupling efficiency from heralded clicks and apparatus efficiency ``eta``."""
    if not eta > 0:
        raise InvalidParameterError(f"eta must be > 0, got {eta}")
    return float(probs.p_true.sum()) / eta


def gamma_error(probs: ProbabilitySet, eta: float, eta_err: float = 0.0) -> float:
    g = compute_gamma(probs, eta)
    stat = np.sqrt((probs.sigma_true**2).sum()) / eta
    return float(np.hypot(stat, g * eta_err / eta))


# --------------------------------------------------------------------------- linear fit


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    slope_err: float
    intercept_err: float
    r: float
    cov: np.ndarray = field(repr=False)
    dof: int
    weighted: bool

    @property
    def t95(self) -> float:
        return float(stats.t.ppf(0.975, self.dof))

    def predict(self, x) -> np.ndarray:
        return self.intercept + self.slope * np.asarray(x, dtype=float)

    def band_halfwidth(self, x) -> np.ndarray:
        """95% confidence half-width of the fitted mean at ``x``."""
        x = np.asarray(x, dtype=float)
        var = self.cov[0, 0] + 2 * x * self.cov[0, 1] + x**2 * self.cov[1, 1]
        return self.t95 * np.sqrt(np.maximum(var, 0.0))

    def band(self, x) -> tuple[np.ndarray, np.ndarray]:
        y, h = self.predict(x), self.band_halfwidth(x)
        return y - h, y + h

    def intercept_ci(self) -> tuple[float, float]:
        h = self.t95 * self.intercept_err
        return self.intercept - h, self.intercept + h

    def as_dict(self) -> dict:
        lo, hi = self.intercept_ci()
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "slope_err": self.slope_err,
            "intercept_err": self.intercept_err,
            "intercept_ci95": [lo, hi],
            "R": self.r,
            "dof": self.dof,
            "weighted": self.weighted,
        }


def fit_linear(points) -> FitResult:
    """Weighted least-squares line through ``(x, y, sigma)`` points.

    Weights are ``1/sigma**2`` when every sigma is positive, otherwise equal.
    Parameter covariance is scaled by the residual variance; R is the plain
    Pearson correlation of x and y.
    """
    pts = [tuple(p) for p in points]
    if len(pts) < 3:
        raise InsufficientDataError(f"need at least 3 points, got {len(pts)}")
    x = np.array([p[0] for p in pts], dtype=float)
    y = np.array([p[1] for p in pts], dtype=float)
    sig = np.array([p[2] if len(p) > 2 and p[2] is not None else 0.0 for p in pts], dtype=float)
    if np.ptp(x) == 0:
        raise DegenerateDesignError("all x values are identical")
    weighted = bool(np.all(sig > 0))
    w = 1.0 / sig**2 if weighted else np.ones_like(x)
    X = np.column_stack([np.ones_like(x), x])
    xtwx = X.T @ (w[:, None] * X)
    beta = np.linalg.solve(xtwx, X.T @ (w * y))
    resid = y - X @ beta
    dof = len(x) - 2
    scale = float(w @ resid**2) / dof if dof > 0 else 0.0
    cov = np.linalg.inv(xtwx) * scale
    if np.ptp(y) == 0:
        r = 0.0
    else:
        r = float(np.corrcoef(x, y)[0, 1])
    return FitResult(
        slope=float(beta[1]),
        intercept=float(beta[0]),
        slope_err=float(np.sqrt(cov[1, 1])),
        intercept_err=float(np.sqrt(cov[0, 0])),
        r=r,
        cov=cov,
        dof=dof,
        weighted=weighted,
    )


# --------------------------------------------------------------------------- calibration


def calibrate_background(
    target_onf: float,
    delta_t_ns: float,
    base: ExperimentConfig,
    tol: float = 1e-6,
    predictor: Callable[[ExperimentConfig], float] | None = None,
) -> float:
    """Background rate (photons/s at the switch) that gives ``target_onf`` at ``delta_t_ns``.

    Bisects on the oracle's predicted ONF. A zero target means no added
    background and returns 0.
    """
    from hsps.oracle import predict

    if not 0 <= target_onf < 1:
        raise InvalidParameterError(f"target ONF must lie in [0, 1), got {target_onf}")
    if target_onf == 0:
        return 0.0
    predictor = predictor or (lambda c: predict(c).onf)
    cfg = base.with_delta_t(delta_t_ns)
    width_s = cfg.switch.effective_width_ns * 1e-9
    lo, hi = 0.0, 0.9 / width_s  # just under one photon per window, the oracle validity limit

    def onf(rate):
        return predictor(cfg.replace(background_rate_hz=rate))

    f_lo, f_hi = onf(lo), onf(hi)
    if not f_lo <= target_onf <= f_hi:
        raise CalibrationError(f"target ONF {target_onf} outside reachable range [{f_lo:.4g}, {f_hi:.4g}]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = onf(mid)
        if abs(f_mid - target_onf) <= tol:
            return mid
        if f_mid < target_onf:
            lo = mid
        else:
            hi = mid
    raise CalibrationError("bisection did not converge")
