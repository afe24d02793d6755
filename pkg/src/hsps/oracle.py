"""Analytic per-trigger outcome probabilities, independent of the Monte Carlo path.

For one accepted trigger the detector outcomes are enumerated exactly over
three independent ingredients:

* the heralded photon: present and transmitted with probability
  ``q * gamma * <T>``, then routed to one arm only;
* background photons in the open window: Poisson count (truncated at five)
  spread multinomially over the two arms;
* dark-like clicks per arm: detector darks plus closed-switch leakage.

Each arm's click is labelled with the highest class present, in the order
true > background > dark. The labels match what the region estimators in
:mod:`hsps.analysis` recover on average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, stats

from hsps.errors import AccuracyError
from hsps.instrument import PEAK_OUT, ExperimentConfig
from hsps.streams import FWHM_PER_SIGMA, PS_PER_S

NONE, TRUE, BKG, DARK = range(4)
CLASSES = ("none", "true", "bkg", "dark")
MAX_BACKGROUND_PHOTONS = 5
BLOCKINGS = (frozenset(), frozenset({1}), frozenset({2}), frozenset({1, 2}))


@dataclass(frozen=True)
class TriggerOutcomeDistribution:
    """``joint[c1, c2]``: probability that detector 1 shows class c1 and detector 2 class c2."""

    joint: np.ndarray
    truncation_tail: float

    def __post_init__(self):
        if np.any(self.joint < 0) or abs(self.joint.sum() - 1.0) > 1e-12:
            raise AccuracyError("outcome probabilities do not form a distribution")

    def marginal(self, det: int) -> np.ndarray:
        return self.joint.sum(axis=1 if det == 1 else 0)

    @property
    def p_true(self) -> np.ndarray:
        return np.array([self.marginal(1)[TRUE], self.marginal(2)[TRUE]])

    @property
    def p_bkg(self) -> np.ndarray:
        return np.array([self.marginal(1)[BKG], self.marginal(2)[BKG]])

    @property
    def p_dark(self) -> np.ndarray:
        return np.array([self.marginal(1)[DARK], self.marginal(2)[DARK]])

    @property
    def p_tot(self) -> np.ndarray:
        return self.p_true + self.p_bkg + self.p_dark

    @property
    def p12(self) -> float:
        return float(self.joint[1:, 1:].sum())


@dataclass(frozen=True)
class Prediction:
    """Oracle expectations of every estimator for one configuration."""

    p_true: np.ndarray
    p_bkg: np.ndarray
    p_dark: np.ndarray
    p12_tot_tot: float
    p12_dark_tot: float
    p12_tot_dark: float
    p12_dark_dark: float

    @property
    def p_tot(self) -> np.ndarray:
        return self.p_true + self.p_bkg + self.p_dark

    @property
    def p12_signal(self) -> float:
        return self.p12_tot_tot - self.p12_dark_tot - self.p12_tot_dark + self.p12_dark_dark

    @property
    def onf(self) -> float:
        den = float(np.sum(self.p_true + self.p_bkg))
        return float(np.sum(self.p_bkg)) / den if den > 0 else float("nan")

    @property
    def alpha(self) -> float:
        singles = self.p_true + self.p_bkg
        return self.p12_signal / float(singles[0] * singles[1]) if np.all(singles > 0) else float("nan")

    def as_dict(self) -> dict:
        return {
            "p_true": self.p_true.tolist(),
            "p_bkg": self.p_bkg.tolist(),
            "p_dark": self.p_dark.tolist(),
            "p_tot": self.p_tot.tolist(),
            "p12_tot_tot": self.p12_tot_tot,
            "p12_dark_tot": self.p12_dark_tot,
            "p12_tot_dark": self.p12_tot_dark,
            "p12_dark_dark": self.p12_dark_dark,
            "p12_signal": self.p12_signal,
            "onf": self.onf,
            "alpha": self.alpha,
        }


def _trapezoid_area(knots_x, knots_y, lo, hi) -> float:
    """Exact integral of a piecewise-linear function over [lo, hi]."""
    if hi <= lo:
        return 0.0
    xs = np.concatenate([[lo], [x for x in knots_x if lo < x < hi], [hi]])
    ys = np.interp(xs, knots_x, knots_y, left=0.0, right=0.0)
    return float(np.sum((ys[1:] + ys[:-1]) * np.diff(xs)) / 2)


@dataclass(frozen=True)
class _Ingredients:
    p_heralded: float  # heralded photon transmitted to the splitter
    mu_window: float  # mean background photons through the open window
    leak: float  # mean photons leaking through the closed switch over the gate
    arm: np.ndarray  # per-arm probability a photon at the splitter is detected
    dark: np.ndarray


def _ingredients(cfg: ExperimentConfig) -> _Ingredients:
    geo = cfg.geometry()
    sw = cfg.switch
    ext = sw.extinction
    herald_rate = cfg.pair_rate_hz * cfg.herald_efficiency
    denom = herald_rate + cfg.herald_dark_rate_hz
    q = herald_rate / denom if denom > 0 else 0.0

    # transmission seen by the heralded photon, averaged over herald jitter
    lead, close, rf = geo.window_open_ps, geo.window_close_ps, geo.rise_fall_ps
    kx = [lead - rf, lead, close, close + rf] if rf > 0 else [lead - 1e-9, lead, close, close + 1e-9]
    ky = [0.0, 1.0, 1.0, 0.0]
    sigma = cfg.herald_jitter_fwhm_ps / FWHM_PER_SIGMA
    c = geo.peak_center_ps
    if sigma == 0:
        open_frac = float(np.interp(c, kx, ky, left=0.0, right=0.0))
    else:
        dens = stats.norm(loc=c, scale=sigma).pdf
        open_frac, _ = integrate.quad(
            lambda u: np.interp(u, kx, ky, left=0.0, right=0.0) * dens(u),
            c - 12 * sigma,
            c + 12 * sigma,
            points=[x for x in kx if c - 12 * sigma < x < c + 12 * sigma] or None,
            limit=200,
        )
    mean_t = ext + (1 - ext) * open_frac

    # Unheralded photons at the switch: added background plus twins of other
    # pairs. Twins arriving before the heralded photon come from pairs emitted
    # before the accepted herald, whose heralds went undetected (a detected one
    # would have been the trigger); later ones arrive at the full pair rate.
    twin = cfg.pair_rate_hz * cfg.signal_coupling
    rate_before = cfg.background_rate_hz + twin * (1 - cfg.herald_efficiency)
    rate_after = cfg.background_rate_hz + twin
    gate = geo.gate_length_ps
    cc = min(max(c, 0), gate)
    area_before = _trapezoid_area(kx, ky, kx[0] - 1, c)
    area_after = _trapezoid_area(kx, ky, c, kx[-1] + 1)
    mu = (1 - ext) * (rate_before * area_before + rate_after * area_after) / PS_PER_S
    leak = ext * (rate_before * cc + rate_after * (gate - cc)) / PS_PER_S

    arm = np.array([cfg.fbs_ratio, 1 - cfg.fbs_ratio]) * [d.efficiency for d in cfg.detectors]
    dark = np.array([d.dark_probability_per_gate for d in cfg.detectors])
    for i in (1, 2):
        if i in cfg.blocked:
            arm[i - 1] = 0.0
    return _Ingredients(q * cfg.signal_coupling * mean_t, mu, leak, arm, dark)


def predict_trigger_distribution(config: ExperimentConfig) -> TriggerOutcomeDistribution:
    """Exact outcome distribution of one accepted trigger (background truncated at 5 photons)."""
    ing = _ingredients(config)
    mu = ing.mu_window
    if mu > 1:
        raise AccuracyError(f"mean background per window {mu:.3g} > 1; five-photon truncation is unreliable")
    a1, a2 = ing.arm
    # dark-like click: detector dark or leaked photon, independent of the window
    f = 1 - (1 - ing.dark) * np.exp(-ing.leak * ing.arm)

    weights = stats.poisson.pmf(np.arange(MAX_BACKGROUND_PHOTONS + 1), mu)
    tail = float(stats.poisson.sf(MAX_BACKGROUND_PHOTONS, mu))
    weights[-1] += tail  # lump the tail onto the last term

    # background presence table bg[b1, b2] for arm clicks
    bg = np.zeros((2, 2))
    for n, w in enumerate(weights):
        none12 = (1 - a1 - a2) ** n
        none1 = (1 - a1) ** n
        none2 = (1 - a2) ** n
        bg[0, 0] += w * none12
        bg[0, 1] += w * (none1 - none12)
        bg[1, 0] += w * (none2 - none12)
        bg[1, 1] += w * (1 - none1 - none2 + none12)
    np.maximum(bg, 0.0, out=bg)  # inclusion-exclusion can round to -1e-17

    def arm_class(heralded_here: bool, bkg: int, det: int) -> np.ndarray:
        out = np.zeros(4)
        if heralded_here:
            out[TRUE] = 1.0
        elif bkg:
            out[BKG] = 1.0
        else:
            out[DARK] = f[det]
            out[NONE] = 1 - f[det]
        return out

    p = ing.p_heralded
    true_states = ((p * a1, 1), (p * a2, 2), (1 - p * (a1 + a2), 0))
    joint = np.zeros((4, 4))
    for pw, where in true_states:
        for b1 in (0, 1):
            for b2 in (0, 1):
                w = pw * bg[b1, b2]
                if w:
                    joint += w * np.outer(arm_class(where == 1, b1, 0), arm_class(where == 2, b2, 1))
    return TriggerOutcomeDistribution(joint, tail)


def predict(config: ExperimentConfig) -> Prediction:
    """Expected singles of ``config`` and the four blocked-detector coincidence terms."""
    base = config.replace(blocked=frozenset())
    dists = [predict_trigger_distribution(base.replace(blocked=b)) for b in BLOCKINGS]
    d0 = dists[0]
    return Prediction(
        p_true=d0.p_true,
        p_bkg=d0.p_bkg,
        p_dark=d0.p_dark,
        p12_tot_tot=dists[0].p12,
        p12_dark_tot=dists[1].p12,
        p12_tot_dark=dists[2].p12,
        p12_dark_dark=dists[3].p12,
    )


def predict_r(config: ExperimentConfig) -> float:
    """Expected extinction estimator: heralded detections peak-out over peak-in."""
    p_in = predict_trigger_distribution(config.replace(mode="peak-in", blocked=frozenset())).p_true.sum()
    p_out = predict_trigger_distribution(config.replace(mode=PEAK_OUT, blocked=frozenset())).p_true.sum()
    return float(p_out / p_in)


def predict_first_order(config: ExperimentConfig) -> tuple[float, float]:
    """Closed-form small-probability ONF and alpha.

    Background clicks scale with the trapezoid area (plateau plus one
    rise/fall time), which is what makes both figures of merit linear in the
    switch time with a positive intercept.
    """
    ing = _ingredients(config.replace(blocked=frozenset()))
    true = ing.p_heralded * ing.arm
    bkg = ing.mu_window * ing.arm
    if np.any(true > 0.1) or np.any(bkg > 0.1) or ing.mu_window > 0.1:
        raise AccuracyError("first-order formulas need all per-window probabilities below 0.1")
    singles = true + bkg
    if singles.sum() == 0:
        return 0.0, 0.0
    onf = float(bkg.sum() / singles.sum())
    coinc = true[0] * bkg[1] + bkg[0] * true[1] + bkg[0] * bkg[1]
    alpha = float(coinc / (singles[0] * singles[1])) if np.all(singles > 0) else 0.0
    return onf, alpha


def prediction_report(config: ExperimentConfig) -> dict:
    """JSON-ready oracle output for the CLI."""
    pred = predict(config)
    out = {"delta_t_switch_ns": config.switch.delta_t_switch_ns, **pred.as_dict()}
    out["gamma"] = float(pred.p_true.sum() / config.eta) if config.eta > 0 else None
    try:
        out["r"] = predict_r(config)
    except Exception as exc:  # peak-out layout impossible for this window
        out["r"] = None
        out["r_note"] = str(exc)
    try:
        onf1, alpha1 = predict_first_order(config)
        out["first_order"] = {"onf": onf1, "alpha": alpha1}
    except AccuracyError as exc:
        out["first_order"] = {"note": str(exc)}
    out["mean_background_per_window"] = _ingredients(config).mu_window
    return out


__all__ = [
    "CLASSES",
    "Prediction",
    "TriggerOutcomeDistribution",
    "predict",
    "predict_first_order",
    "predict_r",
    "predict_trigger_distribution",
    "prediction_report",
]

