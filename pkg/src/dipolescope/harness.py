"""End-to-end scenarios: synthesise probe and reference pulse trains from a
forward model, recover atom numbers, average runs and fit.

A scenario is a nested mapping with unit-suffixed keys (``power_W``,
``detuning_Hz``, ...). Every key has a default taken from the experimental
settings being reproduced; a scenario file only lists the keys it changes.
"""

import copy
import csv
import io
import json
import math
import os
import shutil
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .atomic import (CS_D2, AtomicLine, ProbePulseConfig, excitation_probability,
                     phase_per_atom)
from .dynamics import (DepumpParams, LoadingParams, LossParams, breathing_signal,
                       ballistic_escape_probability, BallisticParams, depump_decay,
                       loading_curve, loss_curve_closed_form, trap_frequency_vs_power)
from .fits import (fit_breathing, fit_depumping, fit_loading, fit_loss, fit_temperature,
                   fit_trap_waist, _breathing_model)
from .interferometer import NoiseConfig, invert_areas, simulate_areas, two_point_variance
from .lm import FitProblem, FitResult, format_value_error, lm_fit

SCENARIO_NAMES = ("noise_scaling", "loading", "losses", "loss_vs_detuning", "breathing",
                  "frequency_vs_power", "time_of_flight", "depumping")
TWO_PI = 2 * math.pi


class ScenarioError(ValueError):
    """Invalid scenario configuration."""


# -- defaults ------------------------------------------------------------------------

def _probe(power, duration, period, count, waist=20e-6, detuning=100e6):
    return {"detuning_Hz": detuning, "power_W": power, "waist_m": waist,
            "duration_s": duration, "period_s": period, "count": count}


_NOISE = {"shot_noise": True, "amplitude_rms": 0.0, "phase_rms_rad": 0.0,
          "drift_rate_rad_per_s": 0.0, "drift_walk_rms_rad": 0.0, "residual_phase_rad": 0.0,
          "balanced": True}

_COMP_TIMES = np.concatenate([np.linspace(0, 0.03, 16), np.geomspace(0.04, 1.5, 24)]).tolist()

_PRESETS = {
    ("loading", "comp"): {
        "probe": {"period_s": 40e-6},
        "truth": {"R0_per_s": 1.34e7, "gamma_mot_per_s": 831.0, "Gamma_L_per_s": 3.5,
                  "beta_L_per_atom_s": 1.1e-4, "initial_atoms": 0.0},
        "options": {"times_s": _COMP_TIMES},
    },
    ("loading", "mol"): {
        "probe": {"period_s": 10e-6},
        "truth": {"R0_per_s": 3.2e4, "gamma_mot_per_s": 5.0, "Gamma_L_per_s": 1.2,
                  "beta_L_per_atom_s": 3e-5, "initial_atoms": 0.0},
        "options": {"times_s": np.linspace(0, 3, 200).tolist()},
    },
    ("losses", "light"): {
        "truth": {"Gamma_per_s": 47.0, "beta_per_atom_s": 1.1e-2, "initial_atoms": 1.5e4},
        "options": {"times_s": np.linspace(0, 0.05, 40).tolist()},
    },
    ("losses", "no_light"): {
        "truth": {"Gamma_per_s": 21.0, "beta_per_atom_s": 2.3e-4, "initial_atoms": 1.5e4},
        "options": {"times_s": np.linspace(0, 0.2, 40).tolist()},
    },
}

_BREATHING_TRUTH = {"atoms": 1e5, "depth": 0.3, "damping_time_s": 5e-3, "phase_rad": math.pi}

_DEFAULTS = {
    "noise_scaling": {
        "runs": 1,
        "probe": _probe(150e-9, 2e-6, 6e-6, 1000),
        "truth": {},
        "options": {"photon_numbers": np.geomspace(2e6, 1.12e8, 6).tolist(), "separation": 1},
    },
    "loading": {
        "runs": 20,
        "probe": _probe(0.3e-6, 2e-6, 40e-6, 10),
        "truth": {},
        "options": {"regime": "comp", "times_s": None, "split_time_s": None, "refine": True},
    },
    "losses": {
        "runs": 20,
        "probe": _probe(0.3e-6, 2e-6, 40e-6, 10),
        "truth": {},
        "options": {"regime": "light", "times_s": None},
    },
    "loss_vs_detuning": {
        "runs": 20,
        "probe": _probe(0.3e-6, 2e-6, 40e-6, 10),
        "truth": {"Gamma_per_s": 47.0, "beta_dark_per_atom_s": 2.3e-4,
                  "beta_reference_per_atom_s": 1.1e-2, "reference_detuning_linewidths": -16.0,
                  "initial_atoms": 1.5e4},
        "options": {"detunings_linewidths": [-8.0, -12.0, -16.0, -20.0, -24.0],
                    "times_s": np.linspace(0, 0.05, 40).tolist()},
    },
    "breathing": {
        "runs": 1,
        "probe": _probe(150e-9, 2e-6, 100e-6, 100),
        "truth": {"nu_r_Hz": 226.5, **_BREATHING_TRUTH},
        "options": {},
    },
    "frequency_vs_power": {
        "runs": 1,
        "probe": _probe(150e-9, 2e-6, 100e-6, 100),
        "trap": {"waist_m": 90e-6, "wavelength_m": 1030e-9},
        "truth": dict(_BREATHING_TRUTH),
        "options": {"powers_W": [1.5, 2.0, 2.5, 3.0, 3.5, 4.0]},
    },
    "time_of_flight": {
        "runs": 10,
        "probe": _probe(150e-9, 2e-6, 100e-6, 50),
        "truth": {"temperature_K": 15e-6, "nu_r_Hz": 275.0, "atoms": 1e5, "g_m_per_s2": 9.81},
        "options": {"depumping": True, "dipole_reference": True},
    },
    "depumping": {
        "runs": 1,
        "probe": _probe(1.2e-6, 10e-6, 100e-6, 40, waist=21.2e-6),
        "truth": {"atoms": 1e5, "repump": 0.0},
        "options": {"powers_W": [0.3e-6, 0.6e-6, 0.9e-6, 1.2e-6]},
    },
}


def _merge(base, update, path=""):
    """Recursively overlay ``update`` on ``base``; unknown keys are errors."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in out:
            raise ScenarioError(f"unknown key '{where}'")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ScenarioError(f"key '{where}' must be an object")
            out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def default_config(name: str, regime: Optional[str] = None) -> dict:
    if name not in SCENARIO_NAMES:
        raise ScenarioError(f"unknown scenario name '{name}'; expected one of {', '.join(SCENARIO_NAMES)}")
    cfg = {"name": name, "seed": 0, "runs": 1, "visibility": 0.98, "trap": {},
           "noise": dict(_NOISE)}
    cfg.update(copy.deepcopy(_DEFAULTS[name]))
    regime = regime or cfg["options"].get("regime")
    if regime is not None:
        preset = _PRESETS.get((name, regime))
        if preset is None:
            known = sorted(r for n, r in _PRESETS if n == name)
            raise ScenarioError(f"unknown regime '{regime}' for {name}; expected one of {', '.join(known)}")
        cfg["options"]["regime"] = regime
        for section, values in preset.items():
            cfg[section].update(copy.deepcopy(values))
    return cfg


@dataclass
class Scenario:
    """Validated scenario configuration (SI units, unit-suffixed keys)."""

    name: str
    probe: dict
    noise: dict
    truth: dict
    options: dict
    trap: dict = field(default_factory=dict)
    runs: int = 1
    seed: int = 0
    visibility: float = 0.98

    def __post_init__(self):
        if self.name not in SCENARIO_NAMES:
            raise ScenarioError(f"unknown scenario name '{self.name}'")
        if not isinstance(self.runs, int) or self.runs < 1:
            raise ScenarioError("runs must be an integer >= 1")
        if not 0 < self.visibility <= 1:
            raise ScenarioError(f"visibility {self.visibility} outside (0, 1]")
        try:
            self.probe_config()
            self.noise_config()
        except (TypeError, ValueError) as exc:
            raise ScenarioError(str(exc)) from exc
        if not self.noise["balanced"] and self.name != "noise_scaling":
            raise ScenarioError("unbalanced detection is only supported by the noise_scaling scenario")

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        if not isinstance(data, dict):
            raise ScenarioError("scenario must be a JSON object")
        if "name" not in data:
            raise ScenarioError("missing key 'name'")
        options = data.get("options", {})
        regime = options.get("regime") if isinstance(options, dict) else None
        cfg = _merge(default_config(data["name"], regime), data)
        return cls(**cfg)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))

    @classmethod
    def default(cls, name: str, **overrides) -> "Scenario":
        return cls.from_dict({"name": name, **overrides})

    def to_dict(self) -> dict:
        return {"name": self.name, "seed": self.seed, "runs": self.runs, "visibility": self.visibility,
                "probe": self.probe, "trap": self.trap, "noise": self.noise, "truth": self.truth,
                "options": self.options}

    def probe_config(self, power: Optional[float] = None) -> ProbePulseConfig:
        p = self.probe
        return ProbePulseConfig(TWO_PI * p["detuning_Hz"], p["power_W"] if power is None else power,
                                p["waist_m"], p["duration_s"], p["period_s"], int(p["count"]))

    def noise_config(self) -> NoiseConfig:
        n = self.noise
        return NoiseConfig(shot_noise=bool(n["shot_noise"]), amplitude_rms=n["amplitude_rms"],
                           phase_rms=n["phase_rms_rad"], drift_rate=n["drift_rate_rad_per_s"],
                           drift_walk_rms=n["drift_walk_rms_rad"], residual_phase=n["residual_phase_rad"],
                           balanced=bool(n["balanced"]), seed=self.seed)


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return Scenario.from_json(fh.read())


# -- outcome -------------------------------------------------------------------------------

@dataclass
class Series:
    """One measured curve with its fitted model, ready to plot."""

    name: str
    x_label: str
    y_label: str
    x: np.ndarray
    y: np.ndarray
    sigma: np.ndarray
    model: Optional[np.ndarray] = None
    curve_x: Optional[np.ndarray] = None
    curve_y: Optional[np.ndarray] = None


@dataclass
class ScenarioOutcome:
    scenario: Scenario
    series: List[Series]
    fits: Dict[str, FitResult]
    results: dict
    primary: str
    diagnostics: List[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def fit(self) -> FitResult:
        return self.fits[self.primary]

    @property
    def converged(self) -> bool:
        return all(f.converged and not f.singular for f in self.fits.values())

    def report(self) -> dict:
        diagnostics = list(self.diagnostics)
        for key, f in self.fits.items():
            if not f.converged or f.singular:
                diagnostics.append(f"fit '{key}' did not converge: {f.message}")
        return {
            "scenario": self.scenario.name,
            "seed": self.scenario.seed,
            "runs": self.scenario.runs,
            "converged": self.converged,
            "results": self.results,
            "diagnostics": diagnostics,
            "fits": {k: f.to_dict() for k, f in self.fits.items()},
            **({"extra": self.extra} if self.extra else {}),
            "config": self.scenario.to_dict(),
        }


def _entry(value, error, unit="", scale=1.0):
    v, e = value * scale, error * scale
    return {"value": v, "stderr": e if math.isfinite(e) else None, "unit": unit,
            "text": format_value_error(v, e) + (f" {unit}" if unit else "")}


# -- measurement chain ------------------------------------------------------------------

class _Chain:
    """Per-run generators plus the probe/reference/inversion steps."""

    def __init__(self, sc: Scenario, line: AtomicLine):
        self.sc = sc
        self.line = line
        self.noise = sc.noise_config()
        seeds = np.random.SeedSequence(sc.seed).spawn(sc.runs)
        self.rngs = [np.random.default_rng(s) for s in seeds]
        self.flagged = 0

    def phases(self, probe: ProbePulseConfig, true_phase) -> np.ndarray:
        """Reference-subtracted phase per pulse, shape (runs, ..., K)."""
        n = probe.photon_number(self.line)
        if not n > 0:
            raise ScenarioError("probe photon number must be > 0")
        t = probe.timestamps
        true_phase = np.asarray(true_phase, dtype=float)
        out = []
        for rng in self.rngs:
            a = simulate_areas(n, true_phase, t, self.noise, rng, self.sc.visibility)
            r = simulate_areas(n, np.zeros_like(true_phase), t, self.noise, rng, self.sc.visibility)
            phi, flags = invert_areas(a, r, n, self.sc.visibility)
            self.flagged += int(flags.sum())
            out.append(phi)
        return np.array(out)

    def phase_sigma(self, probe: ProbePulseConfig, phase) -> np.ndarray:
        """Shot-noise standard deviation of one reference-subtracted pulse."""
        n = probe.photon_number(self.line)
        cos = np.clip(np.abs(np.cos(phase)), 1e-3, None)
        return np.sqrt(1 / cos ** 2 + 1) / (self.sc.visibility * math.sqrt(n))

    def atoms(self, probe: ProbePulseConfig, true_atoms, per_pulse=False):
        """Measured effective F=4 atom numbers and their shot-noise errors.

        ``true_atoms`` has shape (M,) (one train per point, pulses averaged)
        or (K,) with ``per_pulse`` (one train, every pulse kept).
        """
        ppa = phase_per_atom(self.line, probe.detuning, probe.waist)
        K = probe.count
        true_atoms = np.asarray(true_atoms, dtype=float)
        if per_pulse:
            phi = self.phases(probe, ppa * true_atoms).mean(axis=0)
            sigma = self.phase_sigma(probe, phi) / math.sqrt(self.sc.runs)
        else:
            phi = self.phases(probe, np.repeat(ppa * true_atoms[:, None], K, axis=1))
            phi = phi.mean(axis=(0, 2))
            sigma = self.phase_sigma(probe, phi) / math.sqrt(self.sc.runs * K)
        return phi / ppa, sigma / abs(ppa)

    def diagnostics(self):
        return [f"{self.flagged} pulse(s) outside the fringe range were clamped"] if self.flagged else []


def depump_correction(probe_signal, reference_signal) -> np.ndarray:
    """Divide out the probe-induced decay measured with the trap kept on.

    Both signals are normalised to their first pulse; the result is the
    fraction of atoms left in the probe volume with depumping removed.
    """
    p = np.asarray(probe_signal, dtype=float)
    r = np.asarray(reference_signal, dtype=float)
    if p.shape != r.shape:
        raise ValueError(f"train lengths differ: {p.shape} vs {r.shape}")
    if r[0] == 0 or p[0] == 0 or np.any(r == 0):
        raise ValueError("signals must be nonzero for ratio correction")
    return (p / p[0]) / (r / r[0])


# -- scenarios -------------------------------------------------------------------------------

def _noise_scaling(sc, chain, line):
    probe = sc.probe_config()
    m = int(sc.options["separation"])
    ns = np.asarray(sc.options["photon_numbers"], dtype=float)
    if len(ns) < 3 or np.any(ns <= 0):
        raise ScenarioError("options.photon_numbers needs at least three positive values")
    t = probe.timestamps
    var = np.zeros(len(ns))
    for rng in chain.rngs:
        for i, n in enumerate(ns):
            areas = simulate_areas(n, np.zeros(probe.count), t, chain.noise, rng, sc.visibility)
            var[i] += two_point_variance(areas, m)
    var /= sc.runs
    # relative spread of the two-point variance for white noise: adjacent
    # differences are correlated with coefficient -1/2
    K = probe.count - m
    rel = math.sqrt((3 if m == 1 else 2) / K / sc.runs)
    x, y = np.log(ns), np.log(var)
    fit = lm_fit(FitProblem(lambda p, u: p[0] + p[1] * u, x, y, np.full(len(x), rel),
                            [y[0] - x[0], 1.0], names=["log_intercept", "slope"]))
    curve_x = np.geomspace(ns[0], ns[-1], 100)
    series = [Series("two_point_variance", "photons_per_pulse", "variance", ns, var, var * rel,
                     np.exp(fit["log_intercept"]) * ns ** fit["slope"], curve_x,
                     np.exp(fit["log_intercept"]) * curve_x ** fit["slope"])]
    results = {"slope": _entry(fit["slope"], fit.error("slope")),
               "variance_over_photons": [float(v / n) for v, n in zip(var, ns)]}
    return series, {"noise_scaling": fit}, results, "noise_scaling"


def _times(sc):
    t = np.asarray(sc.options["times_s"], dtype=float)
    if t.ndim != 1 or len(t) < 5 or np.any(np.diff(t) <= 0) or t[0] < 0:
        raise ScenarioError("options.times_s must hold >= 5 increasing times >= 0")
    return t


def _loading(sc, chain, line):
    tr = sc.truth
    params = LoadingParams(tr["R0_per_s"], tr["gamma_mot_per_s"], tr["Gamma_L_per_s"], tr["beta_L_per_atom_s"])
    t = _times(sc)
    N = loading_curve(params, tr["initial_atoms"], t)
    probe = sc.probe_config()
    y, s = chain.atoms(probe, N)
    fit = fit_loading(t, y, s, split_time=sc.options["split_time_s"], refine=bool(sc.options["refine"]),
                      initial_number=tr["initial_atoms"])
    est = LoadingParams(*np.clip(fit.params, 0, None))
    curve_x = np.linspace(t[0], t[-1], 400)
    series = [Series("loading", "time_s", "atoms", t, y, s, loading_curve(est, tr["initial_atoms"], t),
                     curve_x, loading_curve(est, tr["initial_atoms"], curve_x))]
    units = {"R0": "1/s", "gamma_mot": "1/s", "Gamma_L": "1/s", "beta_L": "1/(atom s)"}
    results = {k: _entry(fit[k], fit.error(k), u) for k, u in units.items()}
    results["peak_atoms"] = float(N.max())
    return series, {"loading": fit}, results, "loading"


def _loss_dataset(sc, chain, Gamma, beta, N0, t, name):
    N = loss_curve_closed_form(LossParams(Gamma, beta), N0, t)
    y, s = chain.atoms(sc.probe_config(), N)
    fit = fit_loss(t, y, s)
    curve_x = np.linspace(t[0], t[-1], 400)
    model = lambda x: loss_curve_closed_form(LossParams(max(fit["Gamma"], 0.0), max(fit["beta"], 0.0)),
                                             fit["N0"], x)
    return Series(name, "time_s", "atoms", t, y, s, model(t), curve_x, model(curve_x)), fit


def _losses(sc, chain, line):
    tr = sc.truth
    series, fit = _loss_dataset(sc, chain, tr["Gamma_per_s"], tr["beta_per_atom_s"], tr["initial_atoms"],
                                _times(sc), "loss")
    results = {"Gamma": _entry(fit["Gamma"], fit.error("Gamma"), "1/s"),
               "beta": _entry(fit["beta"], fit.error("beta"), "1/(atom s)"),
               "N0": _entry(fit["N0"], fit.error("N0"), "atoms")}
    return [series], {"loss": fit}, results, "loss"


def light_assisted_beta(detuning, beta_dark, beta_ref, ref_detuning):
    """Illustrative light-assisted two-body loss: the excess over the dark
    value scales with the off-resonant scattering rate, 1/detuning^2."""
    detuning = np.asarray(detuning, dtype=float)
    return beta_dark + (beta_ref - beta_dark) * (ref_detuning / detuning) ** 2


def _loss_vs_detuning(sc, chain, line):
    tr = sc.truth
    deltas = np.asarray(sc.options["detunings_linewidths"], dtype=float)
    if len(deltas) < 2 or np.any(deltas == 0):
        raise ScenarioError("options.detunings_linewidths needs >= 2 nonzero values")
    t = _times(sc)
    betas = light_assisted_beta(deltas, tr["beta_dark_per_atom_s"], tr["beta_reference_per_atom_s"],
                                tr["reference_detuning_linewidths"])
    series, fits = [], {}
    for d, b in zip(deltas, betas):
        key = f"loss_{d:g}"
        s, fit = _loss_dataset(sc, chain, tr["Gamma_per_s"], b, tr["initial_atoms"], t, key)
        series.append(s)
        fits[key] = fit
    fitted = np.array([f["beta"] for f in fits.values()])
    errors = np.array([f.error("beta") for f in fits.values()])
    order = np.argsort(np.abs(deltas))
    monotone = bool(np.all(np.diff(fitted[order]) < 0))
    series.append(Series("beta_vs_detuning", "detuning_linewidths", "beta_per_atom_s", deltas, fitted, errors))
    results = {"detunings_linewidths": deltas.tolist(),
               "beta": [_entry(b, e, "1/(atom s)") for b, e in zip(fitted, errors)],
               "losses_increase_towards_resonance": monotone}
    return series, fits, results, next(iter(fits))


def _breathing_dataset(sc, chain, nu_r, name):
    tr = sc.truth
    probe = sc.probe_config()
    t = probe.timestamps
    frac = breathing_signal(t, nu_r, tr["damping_time_s"], tr["depth"], phase=tr["phase_rad"])
    y, s = chain.atoms(probe, tr["atoms"] * frac, per_pulse=True)
    fit = fit_breathing(t, y, s)
    curve_x = np.linspace(t[0], t[-1], 1000)
    return Series(name, "time_s", "atoms", t, y, s, _breathing_model(fit.params, t), curve_x,
                  _breathing_model(fit.params, curve_x)), fit


def _breathing(sc, chain, line):
    series, fit = _breathing_dataset(sc, chain, sc.truth["nu_r_Hz"], "breathing")
    results = {"nu_r": _entry(fit["nu_r"], fit.error("nu_r"), "Hz"),
               "signal_frequency": _entry(2 * fit["nu_r"], 2 * fit.error("nu_r"), "Hz"),
               "damping_time": _entry(fit["damping_time"], fit.error("damping_time"), "ms", 1e3)}
    return [series], {"breathing": fit}, results, "breathing"


def _frequency_vs_power(sc, chain, line):
    powers = np.asarray(sc.options["powers_W"], dtype=float)
    if len(powers) < 2 or np.any(powers <= 0):
        raise ScenarioError("options.powers_W needs >= 2 positive values")
    wl, waist = sc.trap["wavelength_m"], sc.trap["waist_m"]
    true_nu = trap_frequency_vs_power(powers, waist, line, wl)
    series, fits = [], {}
    for P, nu in zip(powers, true_nu):
        key = f"breathing_{P:g}W"
        s, fits[key] = _breathing_dataset(sc, chain, nu, key)
        series.append(s)
    nu_hat = np.array([fits[k]["nu_r"] for k in fits])
    nu_err = np.array([fits[k].error("nu_r") for k in fits])
    wfit = fit_trap_waist(powers, nu_hat, nu_err, wl, line)
    fits["waist"] = wfit
    curve_x = np.linspace(0, powers.max(), 200)
    series.append(Series("frequency_vs_power", "power_W", "nu_r_Hz", powers, nu_hat, nu_err,
                         trap_frequency_vs_power(powers, wfit["waist"], line, wl), curve_x[1:],
                         trap_frequency_vs_power(curve_x[1:], wfit["waist"], line, wl)))
    results = {"waist": _entry(wfit["waist"], wfit.error("waist"), "um", 1e6),
               "nu_r": [_entry(v, e, "Hz") for v, e in zip(nu_hat, nu_err)]}
    return series, fits, results, "waist"


def _time_of_flight(sc, chain, line):
    tr = sc.truth
    probe = sc.probe_config()
    t = probe.timestamps
    params = BallisticParams(tr["temperature_K"], tr["nu_r_Hz"], probe.waist, tr["g_m_per_s2"], line.mass)
    inside = 1 - ballistic_escape_probability(params, t)
    decay = np.ones_like(t)
    if sc.options["depumping"]:
        n4, _ = depump_decay(DepumpParams.from_probe(probe, line), probe.count, 1.0)
        decay = n4
    atoms = tr["atoms"]
    probe_atoms, probe_sigma = chain.atoms(probe, atoms * inside * decay, per_pulse=True)
    if sc.options["dipole_reference"]:
        ref_atoms, ref_sigma = chain.atoms(probe, atoms * decay, per_pulse=True)
        frac = depump_correction(probe_atoms, ref_atoms)
        rel = np.sqrt((probe_sigma / probe_atoms) ** 2 + (probe_sigma[0] / probe_atoms[0]) ** 2
                      + (ref_sigma / ref_atoms) ** 2 + (ref_sigma[0] / ref_atoms[0]) ** 2)
    else:
        frac = probe_atoms / probe_atoms[0]
        rel = np.sqrt((probe_sigma / probe_atoms) ** 2 + (probe_sigma[0] / probe_atoms[0]) ** 2)
    escape = 1 - frac
    sigma = np.abs(frac) * rel
    sigma[0] = max(sigma[0], 1e-12)
    fit = fit_temperature(t, escape, sigma, probe.waist, tr["g_m_per_s2"], line.mass)
    est = BallisticParams(fit["temperature"], fit["nu_r"], probe.waist, tr["g_m_per_s2"], line.mass)
    curve_x = np.linspace(t[0], t[-1], 400)
    series = [Series("escape_probability", "time_s", "escape_fraction", t, escape, sigma,
                     ballistic_escape_probability(est, t), curve_x,
                     ballistic_escape_probability(est, curve_x))]
    results = {"temperature": _entry(fit["temperature"], fit.error("temperature"), "uK", 1e6),
               "nu_r": _entry(fit["nu_r"], fit.error("nu_r"), "Hz"),
               "depumping_end_to_end": float(1 - decay[-1])}
    return series, {"time_of_flight": fit}, results, "time_of_flight"


def _depumping(sc, chain, line):
    tr = sc.truth
    powers = np.asarray(sc.options["powers_W"], dtype=float)
    if len(powers) < 3 or np.any(powers <= 0):
        raise ScenarioError("options.powers_W needs >= 3 positive values")
    base = sc.probe_config()
    ppa3 = phase_per_atom(line, base.detuning, base.waist, level=line.ground_levels[0])
    ppa4 = phase_per_atom(line, base.detuning, base.waist)
    trains, sigmas, truth_pe, truth_q = [], [], [], []
    for P in powers:
        probe = replace(base, power=P)
        dp = DepumpParams.from_probe(probe, line, tr["repump"])
        n4, n3 = depump_decay(dp, probe.count, tr["atoms"])
        # signal in F=4-equivalent atoms; the dark level adds its own small phase
        y, s = chain.atoms(probe, n4 + n3 * ppa3 / ppa4, per_pulse=True)
        trains.append(y)
        sigmas.append(s)
        truth_pe.append(excitation_probability(probe, line))
        truth_q.append(dp.loss_per_pulse)
    dfit = fit_depumping(powers, trains, sigmas, base, line)
    theory_slope = excitation_probability(replace(base, power=1.0), line)
    fits = {f"decay_{P * 1e6:g}uW": r for P, r in zip(powers, dfit.per_power)}
    fits["p_e_vs_power"] = dfit.line_fit
    series = []
    for P, y, s, r in zip(powers, trains, sigmas, dfit.per_power):
        k = np.arange(len(y), dtype=float)
        series.append(Series(f"decay_{P * 1e6:g}uW", "pulse_index", "atoms", k, y, s,
                             r["amplitude"] * (1 - r["loss_per_pulse"]) ** k))
    lf = dfit.line_fit
    series.append(Series("p_e_vs_power", "power_W", "p_e", powers, dfit.p_e, dfit.p_e_err,
                         lf["intercept"] + lf["slope"] * powers, powers, theory_slope * powers))
    results = {"p_e": [_entry(v, e) for v, e in zip(dfit.p_e, dfit.p_e_err)],
               "p_e_generator": [float(v) for v in truth_pe],
               "slope": _entry(lf["slope"], lf.error("slope"), "1/uW", 1e-6),
               "theory_slope_per_uW": theory_slope * 1e-6,
               "intercept": _entry(lf["intercept"], lf.error("intercept"))}
    return series, fits, results, "p_e_vs_power"


_RUNNERS = {
    "noise_scaling": _noise_scaling,
    "loading": _loading,
    "losses": _losses,
    "loss_vs_detuning": _loss_vs_detuning,
    "breathing": _breathing,
    "frequency_vs_power": _frequency_vs_power,
    "time_of_flight": _time_of_flight,
    "depumping": _depumping,
}


def run_scenario(sc: Scenario, line: AtomicLine = CS_D2) -> ScenarioOutcome:
    """Generate, measure, average and fit one scenario."""
    chain = _Chain(sc, line)
    series, fits, results, primary = _RUNNERS[sc.name](sc, chain, line)
    return ScenarioOutcome(sc, series, fits, results, primary, chain.diagnostics())


# -- artifacts ---------------------------------------------------------------------------------

def _series_rows(series: List[Series]):
    for s in series:
        model = s.model if s.model is not None else np.full(len(s.x), np.nan)
        for x, y, e, m in zip(s.x, s.y, s.sigma, model):
            yield [s.name, s.x_label, s.y_label, repr(float(x)), repr(float(y)), repr(float(e)), repr(float(m))]


def _curve_rows(series: List[Series]):
    for s in series:
        if s.curve_x is None:
            continue
        for x, y in zip(s.curve_x, s.curve_y):
            yield [s.name, s.x_label, s.y_label, repr(float(x)), repr(float(y))]


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _dumps(obj) -> str:
    def clean(o):
        if isinstance(o, float) and not math.isfinite(o):
            return None
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        return o
    return json.dumps(clean(json.loads(json.dumps(obj, default=_json_default))), indent=2, sort_keys=True) + "\n"


def artifact_texts(outcome: ScenarioOutcome, fmt: str = "csv") -> Dict[str, str]:
    """File name -> content for every artifact of one outcome."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format '{fmt}'")
    files = {"report.json": _dumps(outcome.report())}
    if fmt == "csv":
        for fname, header, rows in (
                ("dataset.csv", ["series", "x_label", "y_label", "x", "y", "sigma", "model"],
                 _series_rows(outcome.series)),
                ("plot_data.csv", ["series", "x_label", "y_label", "x", "model"], _curve_rows(outcome.series))):
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
            files[fname] = buf.getvalue()
    else:
        files["dataset.json"] = _dumps([
            {"series": s.name, "x_label": s.x_label, "y_label": s.y_label, "x": s.x, "y": s.y,
             "sigma": s.sigma, "model": s.model} for s in outcome.series])
        files["plot_data.json"] = _dumps([
            {"series": s.name, "x_label": s.x_label, "y_label": s.y_label, "x": s.curve_x, "model": s.curve_y}
            for s in outcome.series if s.curve_x is not None])
    return files


def write_artifacts(outcome: ScenarioOutcome, out_dir, fmt: str = "csv", stamp: Optional[str] = None) -> Path:
    """Write artifacts into ``out_dir/<scenario>_<timestamp>``.

    Files are assembled in a hidden staging directory that is renamed into
    place only once complete, so a failed run leaves nothing behind.
    """
    texts = artifact_texts(outcome, fmt)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = stamp or time.strftime("%Y%m%dT%H%M%S")
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out_dir))
    try:
        for name, text in texts.items():
            (staging / name).write_text(text)
        target = out_dir / f"{outcome.scenario.name}_{stamp}"
        suffix = 1
        while True:
            try:
                os.rename(staging, target)
                break
            except OSError:
                if not target.exists():
                    raise
                target = out_dir / f"{outcome.scenario.name}_{stamp}_{suffix}"
                suffix += 1
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return target
