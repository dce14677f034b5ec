import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dipolescope import atomic
from dipolescope.atomic import (CS_D2, AtomicLine, ProbePulseConfig, TrappedSample, branching_ratios,
                                dipole_trap_properties, excitation_probability, linewidth_function,
                                phase_shift, phase_per_atom, refractive_index, transition_strengths,
                                wigner_6j)

MHZ = 2 * math.pi * 1e6
D100 = 100 * MHZ


def toy_line(S_offset=0.0):
    """J=1/2 -> J'=1/2 with I=0: one ground and one excited level."""
    return AtomicLine(name="toy", wavelength=800e-9, hwhm=2 * math.pi * 3e6, mass=1e-25,
                      ground_j=Fraction(1, 2), excited_j=Fraction(1, 2), nuclear_i=Fraction(0),
                      ground_offsets={Fraction(1, 2): 0.0}, excited_offsets={Fraction(1, 2): S_offset})


def reference_probe(power=None, photons=1.3e6, duration=2e-6, waist=20e-6):
    if power is None:
        power = photons * 6.62607015e-34 * 299792458.0 / (duration * CS_D2.wavelength)
    return ProbePulseConfig(D100, power, waist, duration, 100e-6, 1)


# -- transition strengths ----------------------------------------------------------

def test_cs_strengths_exact():
    S = transition_strengths(CS_D2, exact=True)
    F4 = Fraction(4)
    assert S[(F4, Fraction(5))] == Fraction(11, 18)
    assert S[(F4, Fraction(4))] == Fraction(7, 24)
    assert S[(F4, Fraction(3))] == Fraction(7, 72)
    assert S[(Fraction(3), Fraction(5))] == 0


def test_sum_rule_and_selection_rule():
    S = transition_strengths(CS_D2)
    for F in CS_D2.ground_levels:
        assert abs(sum(S[(F, Fp)] for Fp in CS_D2.excited_levels) - 1) < 1e-12
        for Fp in CS_D2.excited_levels:
            if abs(F - Fp) > 1:
                assert S[(F, Fp)] == 0


def test_branching_ratios():
    b = branching_ratios(CS_D2, exact=True)
    assert b[(Fraction(4), Fraction(3))] == Fraction(5, 12)
    assert b[(Fraction(5), Fraction(3))] == 0
    for Fp in CS_D2.excited_levels:
        assert sum(b[(Fp, F)] for F in CS_D2.ground_levels) == 1


def _triangle(a, b):
    lo, hi = abs(a - b), a + b
    return [lo + k for k in range(int(hi - lo) + 1)]


def test_6j_against_sympy():
    wigner = pytest.importorskip("sympy.physics.wigner")
    from sympy import Rational
    sym = lambda x: Rational(x.numerator, x.denominator)
    rng = np.random.default_rng(3)
    halves = [Fraction(k, 2) for k in range(0, 9)]
    checked = 0
    while checked < 150:
        j1, j2, j4, j5 = (halves[i] for i in rng.integers(0, len(halves), 4))
        j3s = sorted(set(_triangle(j1, j2)) & set(_triangle(j4, j5)))
        j6s = sorted(set(_triangle(j1, j5)) & set(_triangle(j4, j2)))
        if not j3s or not j6s:
            continue
        j3 = j3s[rng.integers(len(j3s))]
        j6 = j6s[rng.integers(len(j6s))]
        ref = float(wigner.wigner_6j(*map(sym, (j1, j2, j3, j4, j5, j6))))
        assert wigner_6j(j1, j2, j3, j4, j5, j6) == pytest.approx(ref, abs=1e-12)
        checked += 1
    # the symbols the Cs D2 strengths are built from
    for F in CS_D2.ground_levels:
        for Fp in CS_D2.excited_levels:
            args = (Fraction(1, 2), Fraction(3, 2), 1, Fp, F, Fraction(7, 2))
            ref = float(wigner.wigner_6j(*map(sym, map(Fraction, args))))
            assert wigner_6j(*args) == pytest.approx(ref, abs=1e-14)


# -- dispersive response --------------------------------------------------------------

def test_refractive_index_oracle_value():
    # independent mpmath summation of the three F=4 -> F' terms with the
    # standard excited-state splittings typed in by hand
    n = refractive_index(TrappedSample({4: 1e13}), CS_D2, D100)
    assert n.real == pytest.approx(0.021385582884559402, rel=1e-12)
    assert n.imag == pytest.approx(0.00049832283681181687, rel=1e-12)


def test_refractive_index_empty_sample():
    assert refractive_index(TrappedSample({4: 0.0}), CS_D2, D100) == 0j
    assert phase_shift(TrappedSample({4: 0.0}), CS_D2, D100) == 0.0


def test_single_transition_zero_and_odd():
    line = toy_line()
    sample = TrappedSample({Fraction(1, 2): 1e13})
    assert phase_shift(sample, line, 0.0) == 0.0
    for d in (1e6, 3e7, 2e9):
        assert phase_shift(sample, line, d) == pytest.approx(-phase_shift(sample, line, -d), rel=1e-14)
    # dispersive tail falls off as gamma / detuning
    assert abs(phase_shift(sample, line, 1e15)) < 1e-7 * abs(phase_shift(sample, line, line.hwhm))


def test_single_transition_sign_changes_once():
    line = toy_line()
    sample = TrappedSample({Fraction(1, 2): 1e13})
    d = np.linspace(-50, 50, 2001) * line.hwhm
    re = np.array([phase_shift(sample, line, x) for x in d])
    assert np.sum(np.diff(np.sign(re[re != 0])) != 0) == 1


def test_f3_contribution_small():
    # the lower ground level is ~9.2 GHz further detuned; with half as many
    # atoms there its phase is below 1% of the upper level's
    waist = 20e-6
    n4 = 1e5
    p4 = phase_shift(TrappedSample.from_atom_number(n4, waist), CS_D2, D100)
    both = phase_shift(TrappedSample({4: n4 / atomic.effective_area(waist),
                                      3: n4 / 2 / atomic.effective_area(waist)}), CS_D2, D100)
    assert abs(both - p4) < 0.01 * abs(p4)
    ratio = phase_per_atom(CS_D2, D100, waist, level=3) / phase_per_atom(CS_D2, D100, waist)
    assert ratio == pytest.approx(-0.01627397852, rel=1e-8)


def test_phase_per_atom_scale():
    # ~3.4 urad per effective atom in a 20 um probe: 1e5 atoms give ~0.34 rad
    assert phase_per_atom(CS_D2, D100, 20e-6) == pytest.approx(3.4036e-6, rel=1e-4)


@settings(max_examples=60, deadline=None)
@given(st.floats(-5e10, 5e10, allow_nan=False), st.floats(0, 1e14), st.floats(0, 1e14))
def test_absorption_nonnegative_and_phase_consistent(detuning, n4, n3):
    sample = TrappedSample({4: n4, 3: n3})
    n = refractive_index(sample, CS_D2, detuning)
    assert n.imag >= 0
    assert phase_shift(sample, CS_D2, detuning) == n.real


# -- linewidth function and excitation probability -------------------------------

def test_linewidth_value():
    assert linewidth_function(CS_D2, D100) == pytest.approx(0.00043098038388481605, rel=1e-12)
    assert linewidth_function(CS_D2, D100) == pytest.approx(4.3e-4, rel=0.01)


def test_linewidth_limits():
    line = toy_line()
    assert linewidth_function(line, 0.0) == pytest.approx(1.0)
    assert linewidth_function(CS_D2, 1e15) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.floats(1.2e9, 1e11))
def test_linewidth_bounded_and_decreasing_outside_manifold(d):
    # blue of the F'=5 line and red of F'=3 the Lorentzian tails only fall off
    for sign in (1, -1):
        x = sign * d if sign > 0 else -d - 2 * math.pi * 452e6
        L1 = linewidth_function(CS_D2, x)
        L2 = linewidth_function(CS_D2, x * 1.01 if sign > 0 else x - 0.01 * d)
        assert 0 < L1 <= 1
        assert L2 < L1


def test_pe_reference_settings():
    pe = excitation_probability(reference_probe())
    assert pe == pytest.approx(0.04, rel=0.2)
    assert pe == pytest.approx(0.0343679, rel=1e-5)


def test_pe_zero_power_and_linearity():
    assert excitation_probability(reference_probe(power=0.0)) == 0.0
    p = reference_probe(power=150e-9)
    p2 = reference_probe(power=300e-9)
    assert excitation_probability(p2) == 2 * excitation_probability(p)


def test_pe_composition():
    p = reference_probe()
    n = p.photon_number()
    expected = CS_D2.wavelength ** 2 / (3 * math.pi) * linewidth_function(CS_D2, p.detuning) * n / (math.pi * p.waist ** 2)
    assert excitation_probability(p) == pytest.approx(expected, rel=1e-12)


# -- dipole trap -------------------------------------------------------------------------

def test_trap_depth():
    depth, nu = dipole_trap_properties(3.5, 40e-6, 1030e-9)
    assert depth * 1e6 == pytest.approx(380, rel=0.2)


def test_trap_scaling():
    d1, n1 = dipole_trap_properties(1.0, 40e-6, 1030e-9)
    d4, n4 = dipole_trap_properties(4.0, 40e-6, 1030e-9)
    assert d4 == pytest.approx(4 * d1, rel=1e-14)
    assert n4 == pytest.approx(2 * n1, rel=1e-14)


def test_trap_rejects_blue():
    with pytest.raises(ValueError, match="blue"):
        dipole_trap_properties(1.0, 40e-6, 800e-9)


def test_waist_from_coefficient_round_trip():
    c = atomic.frequency_coefficient(90e-6, 1030e-9)
    assert atomic.waist_from_coefficient(c, 1030e-9) == pytest.approx(90e-6, rel=1e-12)


# -- configuration --------------------------------------------------------------------

def test_line_invariants():
    with pytest.raises(ValueError):
        AtomicLine(name="bad", wavelength=-1, hwhm=1, mass=1, ground_j=Fraction(1, 2), excited_j=Fraction(1, 2),
                   nuclear_i=Fraction(0), ground_offsets={Fraction(1, 2): 0}, excited_offsets={Fraction(1, 2): 0})
    offsets = dict(CS_D2.excited_offsets)
    offsets[Fraction(5)] = 0.0
    with pytest.raises(ValueError):
        AtomicLine(name="bad", wavelength=CS_D2.wavelength, hwhm=CS_D2.hwhm, mass=CS_D2.mass,
                   ground_j=CS_D2.ground_j, excited_j=CS_D2.excited_j, nuclear_i=CS_D2.nuclear_i,
                   ground_offsets=CS_D2.ground_offsets, excited_offsets=offsets)


def test_load_line_from_file(tmp_path):
    text = (atomic.resources.files("dipolescope").joinpath("data/cs_d2.ini").read_text()
            .replace("hwhm_Hz = 2.6e6", "hwhm_Hz = 5.2e6"))
    path = tmp_path / "line.ini"
    path.write_text(text)
    line = atomic.load_line(path)
    assert line.hwhm == pytest.approx(2 * CS_D2.hwhm)
    path.write_text("[line]\nname = broken\n")
    with pytest.raises(ValueError, match="missing"):
        atomic.load_line(path)


def test_probe_config_invariants():
    with pytest.raises(ValueError):
        ProbePulseConfig(D100, -1.0, 20e-6, 2e-6, 1e-4, 1)
    with pytest.raises(ValueError):
        ProbePulseConfig(D100, 1e-7, 20e-6, 2e-6, 1e-6, 1)
    with pytest.raises(ValueError):
        ProbePulseConfig(D100, 1e-7, 0.0, 2e-6, 1e-4, 1)
