"""Atomic line data and the dispersive/absorptive atom-light formulas.

All detunings and linewidths are angular frequencies (rad/s) internally.
Constants files and user-facing values use Hz and are converted on load.
"""

import configparser
import math
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from typing import Dict, Mapping, Tuple

import numpy as np
from scipy.constants import c, h, k as k_B, pi

TWO_PI = 2 * pi


def _half_int(value) -> Fraction:
    q = Fraction(value)
    if (2 * q).denominator != 1:
        raise ValueError(f"{value!r} is not an integer or half-integer")
    return q


def _span(a: Fraction, b: Fraction):
    """Angular momenta |a-b| .. a+b in unit steps."""
    lo, hi = abs(a - b), a + b
    n = int(hi - lo)
    return [lo + i for i in range(n + 1)]


@dataclass(frozen=True)
class AtomicLine:
    """Hyperfine-resolved D line.

    ``ground_offsets`` and ``excited_offsets`` map F (resp. F') to the level
    energy in rad/s relative to an arbitrary zero within each manifold.
    """

    name: str
    wavelength: float
    hwhm: float
    mass: float
    ground_j: Fraction
    excited_j: Fraction
    nuclear_i: Fraction
    ground_offsets: Mapping[Fraction, float]
    excited_offsets: Mapping[Fraction, float]

    def __post_init__(self):
        if not self.wavelength > 0 or not self.hwhm > 0:
            raise ValueError("wavelength and hwhm must be positive")
        for attr in ("ground_j", "excited_j", "nuclear_i"):
            object.__setattr__(self, attr, _half_int(getattr(self, attr)))
        ground = {_half_int(F): float(w) for F, w in self.ground_offsets.items()}
        excited = {_half_int(F): float(w) for F, w in self.excited_offsets.items()}
        if sorted(ground) != _span(self.ground_j, self.nuclear_i):
            raise ValueError(f"ground levels {sorted(ground)} do not span |J-I|..J+I")
        if sorted(excited) != _span(self.excited_j, self.nuclear_i):
            raise ValueError(f"excited levels {sorted(excited)} do not span |J'-I|..J'+I")
        offsets = [excited[F] for F in sorted(excited)]
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise ValueError("excited-state offsets must increase strictly with F'")
        object.__setattr__(self, "ground_offsets", ground)
        object.__setattr__(self, "excited_offsets", excited)

    @property
    def ground_levels(self):
        return sorted(self.ground_offsets)

    @property
    def excited_levels(self):
        return sorted(self.excited_offsets)

    @property
    def cycling(self) -> Tuple[Fraction, Fraction]:
        """The closed F=I+J -> F'=I+J' transition detunings are referenced to."""
        return self.ground_levels[-1], self.excited_levels[-1]

    @property
    def k0(self) -> float:
        return TWO_PI / self.wavelength

    @property
    def angular_frequency(self) -> float:
        return TWO_PI * c / self.wavelength

    def detunings(self, detuning: float, ground_F) -> Dict[Fraction, float]:
        """Map F' -> Delta_{FF'} for a probe detuned by ``detuning`` from the
        cycling transition."""
        F_ref, Fp_ref = self.cycling
        F = _half_int(ground_F)
        ref = self.excited_offsets[Fp_ref] - self.ground_offsets[F_ref]
        return {
            Fp: detuning + ref - (self.excited_offsets[Fp] - self.ground_offsets[F])
            for Fp in self.excited_levels
        }


def load_line(path=None) -> AtomicLine:
    """Read a constants file; defaults to the bundled Cs D2 set."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if path is None:
        text = resources.files("dipolescope").joinpath("data/cs_d2.ini").read_text()
        parser.read_string(text)
    else:
        with open(path) as fh:
            parser.read_file(fh)
    try:
        sec = parser["line"]
        return AtomicLine(
            name=sec.get("name", "unnamed"),
            wavelength=float(sec["wavelength_m"]),
            hwhm=TWO_PI * float(sec["hwhm_Hz"]),
            mass=float(sec["mass_kg"]),
            ground_j=Fraction(sec["ground_J"]),
            excited_j=Fraction(sec["excited_J"]),
            nuclear_i=Fraction(sec["nuclear_I"]),
            ground_offsets={Fraction(F): TWO_PI * float(v)
                            for F, v in parser["ground_offsets_Hz"].items()},
            excited_offsets={Fraction(F): TWO_PI * float(v)
                             for F, v in parser["excited_offsets_Hz"].items()},
        )
    except KeyError as exc:
        raise ValueError(f"constants file is missing {exc}") from None


CS_D2 = load_line()


# -- angular momentum algebra ------------------------------------------------

def _triangle_sq(a2, b2, c2) -> Fraction:
    # arguments are doubled angular momenta
    return Fraction(
        math.factorial((a2 + b2 - c2) // 2)
        * math.factorial((a2 - b2 + c2) // 2)
        * math.factorial((-a2 + b2 + c2) // 2),
        math.factorial((a2 + b2 + c2) // 2 + 1),
    )


def _triad_ok(a2, b2, c2) -> bool:
    return (a2 + b2 + c2) % 2 == 0 and abs(a2 - b2) <= c2 <= a2 + b2


def wigner_6j_parts(j1, j2, j3, j4, j5, j6) -> Tuple[int, Fraction]:
    """Return (sign, square) of the 6-j symbol {j1 j2 j3; j4 j5 j6}, exactly.

    Racah's single-sum formula. The square is a rational number even when
    the symbol itself is not.
    """
    d = [int(2 * _half_int(j)) for j in (j1, j2, j3, j4, j5, j6)]
    a, b, cc, dd, e, f = d
    triads = [(a, b, cc), (a, e, f), (dd, b, f), (dd, e, cc)]
    if not all(_triad_ok(*t) for t in triads):
        return 0, Fraction(0)
    delta_sq = Fraction(1)
    for t in triads:
        delta_sq *= _triangle_sq(*t)
    sums = [sum(t) // 2 for t in triads]
    tops = [(a + b + dd + e) // 2, (b + cc + e + f) // 2, (cc + a + f + dd) // 2]
    total = Fraction(0)
    for t in range(max(sums), min(tops) + 1):
        den = 1
        for s in sums:
            den *= math.factorial(t - s)
        for u in tops:
            den *= math.factorial(u - t)
        total += Fraction((-1) ** t * math.factorial(t + 1), den)
    if total == 0:
        return 0, Fraction(0)
    return (1 if total > 0 else -1), delta_sq * total * total


def wigner_6j(j1, j2, j3, j4, j5, j6) -> float:
    sign, sq = wigner_6j_parts(j1, j2, j3, j4, j5, j6)
    return sign * math.sqrt(sq)


def transition_strengths(line: AtomicLine = CS_D2, exact: bool = False):
    """Relative strengths S_{JFF'J'} keyed by (F, F').

    S = (2F'+1)(2J+1) {J J' 1; F' F I}^2, normalised so that the strengths out
    of every ground level F sum to one.
    """
    J, Jp, I = line.ground_j, line.excited_j, line.nuclear_i
    table = {}
    for F in line.ground_levels:
        for Fp in line.excited_levels:
            _, sq = wigner_6j_parts(J, Jp, 1, Fp, F, I)
            S = (2 * Fp + 1) * (2 * J + 1) * sq
            table[(F, Fp)] = S if exact else float(S)
    return table


def branching_ratios(line: AtomicLine = CS_D2, exact: bool = False):
    """Spontaneous-decay branching b(F' -> F), keyed by (F', F)."""
    J, Jp, I = line.ground_j, line.excited_j, line.nuclear_i
    table = {}
    for Fp in line.excited_levels:
        for F in line.ground_levels:
            _, sq = wigner_6j_parts(J, Jp, 1, Fp, F, I)
            b = (2 * F + 1) * (2 * Jp + 1) * sq
            table[(Fp, F)] = b if exact else float(b)
    return table


# -- samples and probes --------------------------------------------------------

@dataclass(frozen=True)
class ProbePulseConfig:
    """Probe pulse train. ``detuning`` is from the cycling transition, rad/s."""

    detuning: float
    power: float
    waist: float
    duration: float
    period: float
    count: int

    def __post_init__(self):
        if self.power < 0:
            raise ValueError("probe power must be >= 0")
        if not self.duration > 0:
            raise ValueError("pulse duration must be > 0")
        if self.period < self.duration:
            raise ValueError("repetition period must be >= pulse duration")
        if not self.waist > 0:
            raise ValueError("probe waist must be > 0")
        if int(self.count) < 1:
            raise ValueError("pulse count must be >= 1")

    def photon_number(self, line: AtomicLine = CS_D2) -> float:
        """Photons per pulse, P * tau * lambda / (h c)."""
        return self.power * self.duration * line.wavelength / (h * c)

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(int(self.count)) * self.period


@dataclass(frozen=True)
class TrappedSample:
    """Column densities N_F * l (atoms/m^2) per ground level F."""

    column_density: Mapping[Fraction, float]
    temperature: float = 0.0
    omega_r: float = 0.0
    omega_z: float = 0.0

    def __post_init__(self):
        cd = {_half_int(F): float(v) for F, v in self.column_density.items()}
        if any(v < 0 for v in cd.values()):
            raise ValueError("column densities must be >= 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        object.__setattr__(self, "column_density", cd)

    @classmethod
    def from_atom_number(cls, atoms: float, waist: float, level=4, **kw):
        """Effective atoms in the probe mode, converted with area pi w0^2 / 2."""
        return cls({level: atoms / effective_area(waist)}, **kw)


def effective_area(waist: float) -> float:
    return pi * waist ** 2 / 2


# -- dispersive response -------------------------------------------------------

def refractive_index(sample: TrappedSample, line: AtomicLine, detuning: float) -> complex:
    """Column quantity k0 l (n - 1); real part is the phase shift, imaginary
    part the field attenuation."""
    strengths = transition_strengths(line)
    gamma = line.hwhm
    total = 0j
    for F, col in sample.column_density.items():
        if col == 0:
            continue
        phi_F = line.wavelength ** 2 * col / TWO_PI
        for Fp, d in line.detunings(detuning, F).items():
            S = strengths[(F, Fp)]
            if S:
                total += phi_F * S * gamma * (d + 1j * gamma) / (d * d + gamma * gamma)
    return complex(total)


def phase_shift(sample: TrappedSample, line: AtomicLine, detuning: float) -> float:
    """Dispersive phase shift (rad) summed over all populated ground levels."""
    return refractive_index(sample, line, detuning).real


def phase_per_atom(line: AtomicLine, detuning: float, waist: float, level=4) -> float:
    """Phase shift produced by one effective atom in ``level``."""
    sample = TrappedSample.from_atom_number(1.0, waist, level=level)
    return phase_shift(sample, line, detuning)


def atoms_from_phase(phase, line: AtomicLine, detuning: float, waist: float, level=4):
    return np.asarray(phase) / phase_per_atom(line, detuning, waist, level)


def linewidth_function(line: AtomicLine, detuning: float, ground_F=None) -> float:
    """Strength-weighted Lorentzian sum L(Delta) for ground level F."""
    return sum(linewidth_terms(line, detuning, ground_F).values())


def linewidth_terms(line: AtomicLine, detuning: float, ground_F=None) -> Dict[Fraction, float]:
    F = line.cycling[0] if ground_F is None else _half_int(ground_F)
    strengths = transition_strengths(line)
    g2 = line.hwhm ** 2
    return {Fp: strengths[(F, Fp)] * g2 / (d * d + g2)
            for Fp, d in line.detunings(detuning, F).items()}


def excitation_probabilities(probe: ProbePulseConfig, line: AtomicLine = CS_D2,
                             ground_F=None) -> Dict[Fraction, float]:
    """Pulse-integrated excitation probability per excited level F'.

    sigma(Delta) * n / A with sigma = lambda^2/(3 pi) * L and A = pi w0^2.
    """
    n = probe.photon_number(line)
    area = pi * probe.waist ** 2
    prefactor = line.wavelength ** 2 / (3 * pi) * n / area
    return {Fp: prefactor * term
            for Fp, term in linewidth_terms(line, probe.detuning, ground_F).items()}


def excitation_probability(probe: ProbePulseConfig, line: AtomicLine = CS_D2,
                           ground_F=None) -> float:
    return sum(excitation_probabilities(probe, line, ground_F).values())


# -- far-detuned trap ---------------------------------------------------------

def depth_per_intensity(wavelength: float, line: AtomicLine = CS_D2) -> float:
    """|U| / I (J per W/m^2) for a single effective line, with the
    counter-rotating term."""
    if wavelength <= line.wavelength:
        raise ValueError(
            f"trap wavelength {wavelength:g} m is blue of the {line.name} line; "
            "the attractive-potential model does not apply")
    w0 = line.angular_frequency
    w = TWO_PI * c / wavelength
    full_width = 2 * line.hwhm
    return 3 * pi * c ** 2 / (2 * w0 ** 3) * (full_width / (w0 - w) + full_width / (w0 + w))


def dipole_trap_properties(power: float, waist: float, wavelength: float,
                           line: AtomicLine = CS_D2):
    """Peak trap depth (K) and harmonic radial frequency (Hz) of a Gaussian beam."""
    u = depth_per_intensity(wavelength, line)
    depth = u * 2 * power / (pi * waist ** 2)
    nu_r = math.sqrt(4 * depth / (line.mass * waist ** 2)) / TWO_PI
    return depth / k_B, nu_r


def frequency_coefficient(waist: float, wavelength: float, line: AtomicLine = CS_D2) -> float:
    """c(w) in nu_r = c(w) * sqrt(P)."""
    u = depth_per_intensity(wavelength, line)
    return math.sqrt(8 * u / (pi * line.mass)) / (TWO_PI * waist ** 2)


def waist_from_coefficient(coeff: float, wavelength: float, line: AtomicLine = CS_D2) -> float:
    u = depth_per_intensity(wavelength, line)
    return math.sqrt(math.sqrt(8 * u / (pi * line.mass)) / (TWO_PI * coeff))
