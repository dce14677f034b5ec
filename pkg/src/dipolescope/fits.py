"""Fit drivers for loading, loss, breathing, time-of-flight and depumping data."""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .atomic import (CS_D2, AtomicLine, ProbePulseConfig, excitation_probability,
                     frequency_coefficient)
from .dynamics import (BallisticParams, DepumpParams, LoadingParams, _riccati,
                       ballistic_escape_probability, loading_sensitivities, riccati_jacobian)
from .lm import FitProblem, FitResult, lm_fit

log = logging.getLogger(__name__)


def _as_arrays(t, y, sigma):
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), y.shape).copy()
    if t.shape != y.shape:
        raise ValueError("t and y differ in length")
    return t, y, sigma


def _log_slope(t, y):
    ok = y > 0
    if ok.sum() < 2:
        return 0.0
    return float(np.polyfit(t[ok], np.log(y[ok]), 1)[0])


# -- loading ---------------------------------------------------------------------

def default_split_time(t, y, window=5):
    """Time of the maximum of the moving-average smoothed curve."""
    window = max(1, min(window, len(y)))
    kernel = np.ones(window) / window
    padded = np.pad(y, (window // 2, window - 1 - window // 2), mode="edge")
    smooth = np.convolve(padded, kernel, mode="valid")
    return float(t[int(np.argmax(smooth))])


def _saturating(p, t, N0):
    R, g = p
    return N0 - R * np.expm1(-g * t) / g


def fit_loading(t, y, sigma, split_time=None, refine=True, initial_number=0.0,
                min_points=3) -> FitResult:
    """Fit R0, gamma_MOT, Gamma_L, beta_L to a loading curve.

    The curve is split at ``split_time`` (default: maximum of the smoothed
    data). Before the split only the loading term is fitted; after it, the
    loss-only Riccati solution starting from the early model's value at the
    split. With ``refine`` the four parameters are then fitted jointly to the
    full rate equation, seeded by the piecewise values.
    """
    t, y, sigma = _as_arrays(t, y, sigma)
    t_star = default_split_time(t, y) if split_time is None else float(split_time)
    early, late = t <= t_star, t >= t_star
    if early.sum() < min_points or late.sum() < min_points:
        raise ValueError(f"insufficient points around split time {t_star:g} s "
                         f"({early.sum()} before, {late.sum()} after; need {min_points})")

    N_star = max(float(np.max(y[early])), 1.0)
    g0 = 2.0 / max(t_star, t[1] - t[0])
    early_fit = lm_fit(FitProblem(lambda p, s: _saturating(p, s, initial_number),
                                  t[early], y[early], sigma[early],
                                  [N_star * g0 / (1 - np.exp(-2)), g0],
                                  names=["R0", "gamma_mot"], log_params=[True, True]))
    R0, g = early_fit.params
    N_cont = float(_saturating((R0, g), np.array([t_star]), initial_number)[0])

    tl = t[late] - t_star
    G0 = max(-_log_slope(tl[len(tl) // 2:], y[late][len(tl) // 2:]), 1e-3)
    s0 = -_log_slope(tl[: max(3, len(tl) // 4)], y[late][: max(3, len(tl) // 4)])
    b0 = max(s0 - G0, 0.05 * G0) / max(N_cont, 1.0)
    late_fit = lm_fit(FitProblem(lambda p, s: _riccati(p[0], p[1], N_cont, s),
                                 tl, y[late], sigma[late], [G0, b0],
                                 names=["Gamma_L", "beta_L"], log_params=[True, True],
                                 jacobian=lambda p, s: riccati_jacobian(p[0], p[1], N_cont, s)[:, 1:]))

    piecewise = np.concatenate([early_fit.params, late_fit.params])
    extra = {
        "split_time": t_star,
        "piecewise": dict(zip(["R0", "gamma_mot", "Gamma_L", "beta_L"], map(float, piecewise))),
        "piecewise_converged": bool(early_fit.converged and late_fit.converged),
    }
    names = ["R0", "gamma_mot", "Gamma_L", "beta_L"]
    if not refine:
        cov = np.zeros((4, 4))
        cov[:2, :2] = early_fit.covariance
        cov[2:, 2:] = late_fit.covariance
        return FitResult(names=names, params=piecewise, covariance=cov,
                         chi2=early_fit.chi2 + late_fit.chi2, dof=len(y) - 4,
                         converged=early_fit.converged and late_fit.converged,
                         iterations=early_fit.iterations + late_fit.iterations,
                         message="piecewise", extra=extra)

    # a collapsed piecewise estimate would pin the log-parameterised refinement
    seed = piecewise.copy()
    N_peak = max(float(np.max(y)), 1.0)
    seed[2] = max(seed[2], 1e-3 * seed[1])
    seed[3] = max(seed[3], 1e-3 * seed[2] / N_peak)
    cache = {}

    def solve(p):
        key = tuple(p)
        if key not in cache:
            cache.clear()
            try:
                cache[key] = loading_sensitivities(p, initial_number, t, rtol=1e-9)
            except RuntimeError:
                # trial step into a region the integrator cannot follow; LM rejects it
                cache[key] = (np.full(t.shape, np.nan), np.zeros((len(t), 4)))
        return cache[key]

    result = lm_fit(FitProblem(lambda p, s: solve(p)[0], t, y, sigma, seed, names=names,
                               log_params=[True, True, True, False], jacobian=lambda p, s: solve(p)[1]))
    result.extra = extra
    return result


# -- losses ------------------------------------------------------------------------

def fit_loss(t, y, sigma) -> FitResult:
    """Fit (N0, Gamma, beta) of dN/dt = -Gamma N - beta N^2.

    beta is left unconstrained so that data without two-body loss can return
    an estimate consistent with zero.
    """
    t, y, sigma = _as_arrays(t, y, sigma)
    if len(t) < 5:
        raise ValueError("loss fit needs at least 5 points")
    t0 = t[0]
    s = t - t0
    half = len(s) // 2
    G0 = max(-_log_slope(s[half:], y[half:]), 1e-3)
    q = max(3, len(s) // 4)
    s_early = -_log_slope(s[:q], y[:q])
    N0 = float(y[0]) if y[0] > 0 else float(np.max(y))
    b0 = max(s_early - G0, 0.0) / N0
    result = lm_fit(FitProblem(lambda p, x: _riccati(p[1], p[2], p[0], x), s, y, sigma,
                               [N0, G0, b0], names=["N0", "Gamma", "beta"],
                               log_params=[True, True, False],
                               jacobian=lambda p, x: riccati_jacobian(p[1], p[2], p[0], x)))
    result.extra = {"t0": float(t0)}
    return result


# -- breathing -----------------------------------------------------------------------

def _breathing_model(p, t):
    baseline, depth, nu_r, tau, phase = p
    return baseline * (1 + depth * np.exp(-t / tau) * np.cos(4 * np.pi * nu_r * t + phase))


def fit_breathing(t, y, sigma) -> FitResult:
    """Damped breathing oscillation; parameters (baseline, depth, nu_r,
    damping_time, phase). nu_r is half the fitted signal frequency."""
    t, y, sigma = _as_arrays(t, y, sigma)
    dt = float(np.median(np.diff(t)))
    span = t[-1] - t[0]
    baseline = float(np.mean(y))
    resid = y - baseline
    pad = 16 * len(y)
    spec = np.fft.rfft(resid * np.hanning(len(y)), n=pad)
    freqs = np.fft.rfftfreq(pad, dt)
    k = int(np.argmax(np.abs(spec[1:]))) + 1
    f_sig = freqs[k]
    if f_sig * span < 3:
        log.warning("fewer than three oscillation periods sampled")
    depth0 = min(np.sqrt(2) * np.std(resid) / abs(baseline), 0.9)
    best = None
    for phase in np.linspace(-np.pi, np.pi, 8, endpoint=False):
        p0 = [baseline, depth0, f_sig / 2, span / 2, phase]
        chi = np.sum(((y - _breathing_model(p0, t)) / sigma) ** 2)
        if best is None or chi < best[0]:
            best = (chi, p0)
    result = lm_fit(FitProblem(_breathing_model, t, y, sigma, best[1],
                               names=["baseline", "depth", "nu_r", "damping_time", "phase"],
                               lower=[-np.inf, 0.0, 0.0, 0.0, -np.inf], upper=[np.inf, 0.999, np.inf, np.inf, np.inf],
                               log_params=[False, False, True, True, False]))
    nyquist = 1 / (2 * dt)
    bin_width = 1 / (len(t) * dt)
    near = nyquist - 2 * result["nu_r"] < 2 * bin_width
    result.extra = {"signal_frequency": 2 * result["nu_r"], "near_nyquist": bool(near)}
    if near:
        result.message += "; fitted frequency within 2 bins of Nyquist"
        log.warning("breathing frequency %.1f Hz is within 2 bins of Nyquist", 2 * result["nu_r"])
    return result


def fit_trap_waist(powers, nu_r, sigma, wavelength=1030e-9, line: AtomicLine = CS_D2) -> FitResult:
    """Fit nu_r = c(w) sqrt(P) for the trap beam waist w (m)."""
    P, y, s = _as_arrays(powers, nu_r, sigma)
    c0 = float(np.sum(y * np.sqrt(P)) / np.sum(P))
    w0 = np.sqrt(frequency_coefficient(1.0, wavelength, line) / c0)
    model = lambda p, x: frequency_coefficient(p[0], wavelength, line) * np.sqrt(x)
    return lm_fit(FitProblem(model, P, y, s, [w0], names=["waist"], log_params=[True]))


# -- time of flight ----------------------------------------------------------------

def fit_temperature(t, escape, sigma, waist, g=9.81, mass=CS_D2.mass, skip_first=True) -> FitResult:
    """Fit temperature (K) and radial trap frequency (Hz) to escape fractions.

    The fractions are expected to be normalised to the first pulse, so that
    datum is identically zero and is dropped when ``skip_first``.
    """
    t, y, sigma = _as_arrays(t, escape, sigma)
    if skip_first:
        t, y, sigma = t[1:], y[1:], sigma[1:]

    def model(p, x):
        return ballistic_escape_probability(BallisticParams(p[0], p[1], waist, g, mass), x)

    best = None
    for T in np.geomspace(1e-6, 1e-3, 13):
        for nu in np.geomspace(20, 5000, 13):
            chi = np.sum(((y - model((T, nu), t)) / sigma) ** 2)
            if best is None or chi < best[0]:
                best = (chi, (T, nu))
    return lm_fit(FitProblem(model, t, y, sigma, best[1], names=["temperature", "nu_r"],
                             log_params=[True, True]))


# -- depumping ------------------------------------------------------------------------

@dataclass
class DepumpingFit:
    powers: np.ndarray
    p_e: np.ndarray
    p_e_err: np.ndarray
    loss_per_pulse: np.ndarray
    per_power: List[FitResult]
    line_fit: FitResult
    conversion: float

    @property
    def slope(self):
        return self.line_fit["slope"]

    def to_dict(self):
        return {
            "powers_W": self.powers.tolist(),
            "p_e": self.p_e.tolist(),
            "p_e_err": self.p_e_err.tolist(),
            "loss_per_pulse": self.loss_per_pulse.tolist(),
            "depump_fraction_of_p_e": self.conversion,
            "line_fit": self.line_fit.to_dict(),
            "per_power": [r.to_dict() for r in self.per_power],
        }


def _decay_model(p, k):
    return p[0] * (1 - p[1]) ** k


def _decay_jac(p, k):
    base = (1 - p[1]) ** k
    return np.column_stack([base, -p[0] * k * (1 - p[1]) ** np.maximum(k - 1, 0)])


def depump_conversion(probe: ProbePulseConfig, line: AtomicLine = CS_D2) -> float:
    """Fraction of the total excitation probability that ends in the dark
    level; independent of probe power and waist."""
    ref = ProbePulseConfig(probe.detuning, 1e-6, probe.waist, probe.duration, probe.period, probe.count)
    return DepumpParams.from_probe(ref, line).loss_per_pulse / excitation_probability(ref, line)


def fit_depumping(powers, trains, sigmas, probe: ProbePulseConfig, line: AtomicLine = CS_D2) -> DepumpingFit:
    """Per-power depumping from the pulse-to-pulse decay of the phase signal,
    then a weighted straight line of p_e against probe power.

    ``trains`` holds one array of per-pulse signals (phase or atom number)
    per power; ``probe`` supplies detuning and pulse settings.
    """
    powers = np.asarray(powers, dtype=float)
    if len(powers) < 3:
        raise ValueError("depumping fit needs at least three powers")
    if len(trains) != len(powers) or len(sigmas) != len(powers):
        raise ValueError("one train and one sigma array per power required")
    kappa = depump_conversion(probe, line)
    per, q, q_err = [], [], []
    for y, s in zip(trains, sigmas):
        y = np.asarray(y, dtype=float)
        k = np.arange(len(y), dtype=float)
        q0 = min(max(-_log_slope(k, y), 0.0), 0.5)
        r = lm_fit(FitProblem(_decay_model, k, y, s, [float(y[0]), q0], names=["amplitude", "loss_per_pulse"],
                              jacobian=_decay_jac))
        per.append(r)
        q.append(r["loss_per_pulse"])
        q_err.append(r.error("loss_per_pulse"))
    q, q_err = np.array(q), np.array(q_err)
    p_e, p_err = q / kappa, q_err / kappa
    line_fit = lm_fit(FitProblem(lambda p, x: p[0] + p[1] * x, powers, p_e, p_err,
                                 [0.0, float(np.max(p_e) / np.max(powers))], names=["intercept", "slope"],
                                 jacobian=lambda p, x: np.column_stack([np.ones_like(x), x])))
    return DepumpingFit(powers, p_e, p_err, q, per, line_fit, kappa)
