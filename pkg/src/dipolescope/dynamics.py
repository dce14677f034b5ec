"""Time evolution of the trapped atom number and cloud geometry."""

from collections import namedtuple
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional

import numpy as np
from scipy.constants import k as k_B, pi
from scipy.integrate import solve_ivp

from .atomic import (CS_D2, AtomicLine, ProbePulseConfig, branching_ratios,
                     excitation_probabilities, frequency_coefficient)

ODE_RTOL = 1e-9
ODE_ATOL = 1e-6  # atoms


@dataclass(frozen=True)
class LoadingParams:
    R0: float
    gamma_mot: float
    Gamma_L: float
    beta_L: float

    def __post_init__(self):
        if min(self.R0, self.gamma_mot, self.Gamma_L, self.beta_L) < 0:
            raise ValueError("loading parameters must be >= 0")


@dataclass(frozen=True)
class LossParams:
    Gamma: float
    beta: float

    def __post_init__(self):
        if self.Gamma < 0 or self.beta < 0:
            raise ValueError("loss parameters must be >= 0")


@dataclass(frozen=True)
class BallisticParams:
    """Release-and-expand parameters; ``temperature`` in K, ``nu_r`` in Hz."""

    temperature: float
    nu_r: float
    waist: float
    g: float = 9.81
    mass: float = CS_D2.mass

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not self.nu_r > 0 or not self.waist > 0:
            raise ValueError("nu_r and waist must be > 0")

    @property
    def sigma_v(self) -> float:
        return np.sqrt(k_B * self.temperature / self.mass)

    @property
    def sigma_r0(self) -> float:
        return self.sigma_v / (2 * pi * self.nu_r)

    def sigma_r(self, t):
        t = np.asarray(t, dtype=float)
        return np.sqrt(self.sigma_r0 ** 2 + (self.sigma_v * t) ** 2)


@dataclass(frozen=True)
class DepumpParams:
    """Per-pulse excitation probabilities out of the bright level and the
    decay branching of each excited level, keyed (F', F).

    An excitation value is the mean number of photons scattered per atom
    during one pulse via that F'; at high pulse energy it exceeds 1 while
    the transfer to the dark level stays small.
    """

    excitation: Mapping
    branching: Mapping
    repump: float = 0.0
    bright: Fraction = Fraction(4)
    dark: Fraction = Fraction(3)

    def __post_init__(self):
        # pulse-integrated excitation counts scattering events and may exceed 1
        if any(p < 0 for p in self.excitation.values()):
            raise ValueError("excitation probabilities must be >= 0")
        if any(not 0 <= p <= 1 for p in list(self.branching.values()) + [self.repump]):
            raise ValueError("branching ratios and repump probability must lie in [0, 1]")
        totals = {}
        for (Fp, _), b in self.branching.items():
            totals[Fp] = totals.get(Fp, 0.0) + b
        if any(abs(s - 1) > 1e-9 for s in totals.values()):
            raise ValueError("branching ratios out of each F' must sum to 1")

    @property
    def loss_per_pulse(self) -> float:
        """Probability that one pulse transfers a bright atom to the dark level."""
        return sum(p * self.branching.get((Fp, self.dark), 0.0)
                   for Fp, p in self.excitation.items())

    @classmethod
    def from_probe(cls, probe: ProbePulseConfig, line: AtomicLine = CS_D2, repump=0.0):
        bright, dark = line.ground_levels[-1], line.ground_levels[0]
        return cls(excitation=excitation_probabilities(probe, line, bright),
                   branching=branching_ratios(line), repump=repump, bright=bright, dark=dark)


def _check_grid(t):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if len(t) > 1 and np.any(np.diff(t) <= 0):
        raise ValueError("time grid must be strictly increasing")
    return t


def loading_curve(params: LoadingParams, N0: float, t, source_cutoff: Optional[float] = None,
                  rtol: float = ODE_RTOL, atol: float = ODE_ATOL) -> np.ndarray:
    """Integrate dN/dt = R0 exp(-gamma_MOT t) - Gamma_L N - beta_L N^2 from t=0.

    With ``source_cutoff`` the loading term is switched off for t > cutoff.
    """
    if N0 < 0:
        raise ValueError("initial atom number must be >= 0")
    t = _check_grid(t)
    if t[0] < 0:
        raise ValueError("time grid must start at t >= 0")
    R0, g, G, b = params.R0, params.gamma_mot, params.Gamma_L, params.beta_L

    def rhs(s, N):
        src = R0 * np.exp(-g * s) if source_cutoff is None or s <= source_cutoff else 0.0
        return src - G * N - b * N * N

    t_end = t[-1]
    if t_end == 0:
        return np.full(t.shape, float(N0))
    # split at the cutoff so the integrator never steps across the discontinuity
    if source_cutoff is not None and 0 < source_cutoff < t_end:
        first = t[t <= source_cutoff]
        grid = np.unique(np.append(first, source_cutoff))
        sol1 = solve_ivp(rhs, (0.0, source_cutoff), [N0], method="DOP853", rtol=rtol, atol=atol,
                         t_eval=grid)
        sol2 = solve_ivp(lambda s, N: -G * N - b * N * N, (source_cutoff, t_end), [sol1.y[0, -1]],
                         method="DOP853", rtol=rtol, atol=atol, t_eval=t[t > source_cutoff])
        return np.clip(np.concatenate([sol1.y[0][: first.size], sol2.y[0]]), 0.0, None)
    sol = solve_ivp(rhs, (0.0, t_end), [N0], method="DOP853", rtol=rtol, atol=atol, t_eval=t)
    if not sol.success:
        raise RuntimeError(sol.message)
    return np.clip(sol.y[0], 0.0, None)


def loading_sensitivities(params: LoadingParams, N0: float, t, rtol: float = 1e-9, atol: float = 1e-6):
    """Loading curve and its derivatives with respect to (R0, gamma_MOT,
    Gamma_L, beta_L), from the forward sensitivity equations.

    ``params`` may also be a plain (R0, gamma_MOT, Gamma_L, beta_L) sequence,
    which is not range-checked. Returns (N, J) with J of shape (len(t), 4).
    """
    t = _check_grid(t)
    if isinstance(params, LoadingParams):
        params = (params.R0, params.gamma_mot, params.Gamma_L, params.beta_L)
    R0, g, G, b = map(float, params)

    def rhs(s, y):
        N = y[0]
        e = np.exp(-g * s)
        dfdN = -G - 2 * b * N
        return [R0 * e - G * N - b * N * N,
                dfdN * y[1] + e,
                dfdN * y[2] - R0 * s * e,
                dfdN * y[3] - N,
                dfdN * y[4] - N * N]

    sol = solve_ivp(rhs, (0.0, max(t[-1], 0.0)), [N0, 0, 0, 0, 0], method="DOP853",
                    rtol=rtol, atol=atol, t_eval=t)
    if not sol.success:
        raise RuntimeError(sol.message)
    return sol.y[0], sol.y[1:].T


def loss_curve_closed_form(params: LossParams, N0: float, t) -> np.ndarray:
    """Riccati solution N(t) = Gamma N0 e^{-Gamma t} / (Gamma + beta N0 (1 - e^{-Gamma t})).

    Written with expm1 so that Gamma -> 0 reduces smoothly to N0 / (1 + beta N0 t).
    """
    t = np.asarray(t, dtype=float)
    G, b = params.Gamma, params.beta
    return _riccati(G, b, N0, t)


def _riccati(G, b, N0, t):
    if G == 0:
        growth = t
    else:
        growth = -np.expm1(-G * t) / G
    return N0 * np.exp(-G * t) / (1 + b * N0 * growth)


def riccati_jacobian(G, b, N0, t):
    """d N / d (N0, Gamma, beta) of the Riccati solution."""
    t = np.asarray(t, dtype=float)
    e = np.exp(-G * t)
    if G == 0:
        u, du = t, -t * t / 2
    else:
        u = -np.expm1(-G * t) / G
        du = (t * e - u) / G
    D = 1 + b * N0 * u
    N = N0 * e / D
    dN0 = e / D - N0 * e * b * u / D ** 2
    dG = -t * N - N0 * e * b * N0 * du / D ** 2
    db = -N0 * e * N0 * u / D ** 2
    return np.column_stack([dN0, dG, db])


def loss_curve_numeric(params: LossParams, N0: float, t, rtol: float = ODE_RTOL,
                       atol: float = ODE_ATOL) -> np.ndarray:
    return loading_curve(LoadingParams(0.0, 0.0, params.Gamma, params.beta), N0, t,
                         rtol=rtol, atol=atol)


def breathing_signal(t, nu_r: float, damping_time: float, depth: float, baseline: float = 1.0,
                     phase: float = 0.0) -> np.ndarray:
    """Fraction of atoms in the probe volume during a damped breathing mode.

    The size oscillates at twice the radial trap frequency.
    """
    if not nu_r > 0 or not damping_time > 0:
        raise ValueError("nu_r and damping_time must be > 0")
    if not 0 <= depth < 1:
        raise ValueError("modulation depth must lie in [0, 1)")
    t = np.asarray(t, dtype=float)
    return baseline * (1 + depth * np.exp(-t / damping_time) * np.cos(2 * pi * 2 * nu_r * t + phase))


def trap_frequency_vs_power(powers, waist: float, line: AtomicLine = CS_D2,
                            wavelength: float = 1030e-9) -> np.ndarray:
    powers = np.asarray(powers, dtype=float)
    if np.any(powers <= 0):
        raise ValueError("powers must be > 0")
    return frequency_coefficient(waist, wavelength, line) * np.sqrt(powers)


def ballistic_escape_probability(params: BallisticParams, t) -> np.ndarray:
    """Probability that an atom initially in the probe mode has left it after
    a free-fall time t (radial Gaussian overlap with gravity sag)."""
    t = np.asarray(t, dtype=float)
    w2 = params.waist ** 2
    s0 = params.sigma_r0 ** 2
    st = s0 + (params.sigma_v * t) ** 2
    denom = w2 + 4 * st
    sag = params.g * t * t
    return 1 - (w2 + 4 * s0) / denom * np.exp(-sag * sag / (2 * denom))


MCEstimate = namedtuple("MCEstimate", "probability stderr")


def ballistic_mc_oracle(params: BallisticParams, t, samples: int = 1_000_000, seed: int = 0,
                        chunk: int = 250_000) -> MCEstimate:
    """Monte-Carlo escape probability from sampled thermal positions and velocities.

    Each atom carries the weight exp(-2 r^2 / w0^2) of the probe intensity;
    gravity displaces one radial axis by g t^2 / 2.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    rng = np.random.default_rng(seed)
    w2 = params.waist ** 2
    sr, sv = params.sigma_r0, params.sigma_v
    sum_w0 = 0.0
    sum_wt = np.zeros_like(t)
    sum_w0sq = 0.0
    sum_wtsq = np.zeros_like(t)
    sum_cross = np.zeros_like(t)
    remaining = int(samples)
    while remaining > 0:
        m = min(chunk, remaining)
        remaining -= m
        x0, y0 = rng.normal(0, sr, m), rng.normal(0, sr, m)
        vx, vy = rng.normal(0, sv, m), rng.normal(0, sv, m)
        w0 = np.exp(-2 * (x0 * x0 + y0 * y0) / w2)
        sum_w0 += w0.sum()
        sum_w0sq += np.dot(w0, w0)
        for i, ti in enumerate(t):
            x = x0 + vx * ti
            y = y0 + vy * ti - params.g * ti * ti / 2
            wt = np.exp(-2 * (x * x + y * y) / w2)
            sum_wt[i] += wt.sum()
            sum_wtsq[i] += np.dot(wt, wt)
            sum_cross[i] += np.dot(wt, w0)
    n = float(samples)
    m0, mt = sum_w0 / n, sum_wt / n
    ratio = mt / m0
    # delta-method variance of a ratio of correlated sample means
    var_t = sum_wtsq / n - mt ** 2
    var_0 = sum_w0sq / n - m0 ** 2
    cov = sum_cross / n - mt * m0
    var_ratio = (var_t - 2 * ratio * cov + ratio ** 2 * var_0) / (n * m0 ** 2)
    return MCEstimate(1 - ratio, np.sqrt(np.clip(var_ratio, 0, None)))


def depump_decay(params: DepumpParams, pulses: int, N4_0: float, N_total: Optional[float] = None):
    """Bright- and dark-level populations seen by each of ``pulses`` pulses.

    Between pulses a fraction ``loss_per_pulse`` of bright atoms is pumped
    dark and a fraction ``repump`` of dark atoms returns. Returns (N4, N3),
    index 0 being the populations before the first pulse.
    """
    N_total = N4_0 if N_total is None else N_total
    if N4_0 < 0 or N_total < N4_0:
        raise ValueError("need 0 <= N4(0) <= N_total")
    q, rho = params.loss_per_pulse, params.repump
    if q > 1:
        raise ValueError("per-pulse depumping probability exceeds 1")
    n4 = np.empty(int(pulses))
    n3 = np.empty(int(pulses))
    a, d = float(N4_0), float(N_total - N4_0)
    for k in range(int(pulses)):
        n4[k], n3[k] = a, d
        moved, back = a * q, d * rho
        a, d = a - moved + back, d + moved - back
    return n4, n3
