"""Command-line front end.

    dipolescope run --scenario time_of_flight --out results
    dipolescope fit loss --data curve.csv
    dipolescope physics pe --photons 1.3e6 --waist-um 20
    dipolescope oracle ballistic

Exit codes: 0 success, 1 input error, 2 fit non-convergence (or a failed
oracle comparison).
"""

import argparse
import csv
import json
import math
import os
import sys
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.constants import c, h

from . import atomic, dynamics, fits, harness
from .atomic import ProbePulseConfig, TrappedSample

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors are input errors (exit 1); exit 2 is reserved for fits."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _line():
    path = os.environ.get("DIPOLESCOPE_DATA")
    try:
        return atomic.load_line(path) if path else atomic.CS_D2
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot load constants from DIPOLESCOPE_DATA={path}: {exc}") from exc


def _emit(rows, fmt, title=None):
    """Print (quantity, value, unit) rows as text, CSV or JSON."""
    if fmt == "json":
        print(json.dumps({q: {"value": v, "unit": u} for q, v, u in rows}, indent=2))
    elif fmt == "csv":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["quantity", "value", "unit"])
        w.writerows(rows)
    else:
        if title:
            print(title)
        for q, v, u in rows:
            val = f"{v:.6g}" if isinstance(v, float) else str(v)
            print(f"  {q} = {val}{' ' + u if u else ''}")


# -- run ------------------------------------------------------------------------------

def _builtin_scenarios():
    return resources.files("dipolescope").joinpath("scenarios")


def _read_scenario(spec: str) -> harness.Scenario:
    path = Path(spec)
    if path.suffix != ".json" and not path.exists():
        candidate = _builtin_scenarios().joinpath(f"{spec}.json")
        if not candidate.is_file():
            raise InputError(f"no scenario file '{spec}' and no built-in scenario of that name")
        text, where = candidate.read_text(), f"<built-in {spec}>"
    else:
        try:
            text, where = path.read_text(), str(path)
        except OSError as exc:
            raise InputError(f"cannot read scenario file: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{where}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from exc
    try:
        return harness.Scenario.from_dict(data)
    except harness.ScenarioError as exc:
        raise InputError(f"{where}: {exc}") from exc


def cmd_run(args) -> int:
    sc = _read_scenario(args.scenario)
    if args.seed is not None:
        sc.seed = args.seed
    try:
        outcome = harness.run_scenario(sc, _line())
    except harness.ScenarioError as exc:
        raise InputError(str(exc)) from exc
    target = harness.write_artifacts(outcome, args.out, args.format or "csv")
    report = outcome.report()
    print(f"scenario {sc.name} (seed {sc.seed}, {sc.runs} run(s)) -> {target}")
    for key, value in report["results"].items():
        if isinstance(value, dict) and "text" in value:
            print(f"  {key} = {value['text']}")
        elif isinstance(value, list) and value and isinstance(value[0], dict):
            print(f"  {key} = " + ", ".join(v["text"] for v in value))
        else:
            print(f"  {key} = {value}")
    for msg in report["diagnostics"]:
        print(f"  warning: {msg}", file=sys.stderr)
    return EXIT_OK if outcome.converged else EXIT_NOT_CONVERGED


# -- fit ------------------------------------------------------------------------------

_FIT_SCALES = {
    "temperature": {"temperature": (1e6, "uK"), "nu_r": (1.0, "Hz")},
    "breathing": {"nu_r": (1.0, "Hz"), "damping_time": (1e3, "ms")},
    "trap_waist": {"waist": (1e6, "um")},
}


def _read_xy(path):
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    except OSError as exc:
        raise InputError(f"cannot read data file: {exc}") from exc
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    try:
        arr = np.array([[float(v) for v in r[:3]] for r in rows])
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric value ({exc})") from exc
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InputError(f"{path}: expected three columns x, y, sigma")
    return arr[:, 0], arr[:, 1], arr[:, 2]


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def cmd_fit(args) -> int:
    x, y, s = _read_xy(args.data)
    line = _line()
    try:
        if args.kind == "loading":
            result = fits.fit_loading(x, y, s)
        elif args.kind == "loss":
            result = fits.fit_loss(x, y, s)
        elif args.kind == "breathing":
            result = fits.fit_breathing(x, y, s)
        elif args.kind == "trap_waist":
            result = fits.fit_trap_waist(x, y, s, args.trap_wavelength_nm * 1e-9, line)
        else:
            if args.waist_um is None:
                raise InputError("--waist-um is required for a temperature fit")
            result = fits.fit_temperature(x, y, s, args.waist_um * 1e-6, mass=line.mass)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if args.format == "json":
        print(result.to_json())
    else:
        print(result.summary(_FIT_SCALES.get(args.kind)))
    return EXIT_OK if result.converged and not result.singular else EXIT_NOT_CONVERGED


# -- physics --------------------------------------------------------------------------

def _need(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        flags = ", ".join("--" + m.replace("_", "-") for m in missing)
        raise InputError(f"physics {args.query} needs {flags}")


def _probe_from(args, line):
    _need(args, "waist_um")
    if args.photons is not None:
        duration = args.duration_us * 1e-6 if args.duration_us else 1e-6
        power = args.photons / (duration * line.wavelength) * h * c
    else:
        _need(args, "power_uw", "duration_us")
        power, duration = args.power_uw * 1e-6, args.duration_us * 1e-6
    return ProbePulseConfig(2 * math.pi * args.detuning_mhz * 1e6, power, args.waist_um * 1e-6,
                            duration, duration, 1)


def cmd_physics(args) -> int:
    line = _line()
    q = args.query
    if q == "pe":
        probe = _probe_from(args, line)
        rows = [("photons_per_pulse", probe.photon_number(line), ""),
                ("L", atomic.linewidth_function(line, probe.detuning), ""),
                ("p_e", atomic.excitation_probability(probe, line), "")]
    elif q == "phase":
        _need(args, "atoms", "waist_um")
        waist = args.waist_um * 1e-6
        area = atomic.effective_area(waist)
        levels = {line.ground_levels[-1]: args.atoms / area}
        if args.atoms_f3:
            levels[line.ground_levels[0]] = args.atoms_f3 / area
        phase = atomic.phase_shift(TrappedSample(levels), line, 2 * math.pi * args.detuning_mhz * 1e6)
        rows = [("phase", phase * 1e3, "mrad"),
                ("phase_per_atom", atomic.phase_per_atom(line, 2 * math.pi * args.detuning_mhz * 1e6, waist) * 1e6,
                 "urad")]
    elif q == "depth":
        _need(args, "power_w", "waist_um")
        try:
            depth, nu = atomic.dipole_trap_properties(args.power_w, args.waist_um * 1e-6,
                                                      args.trap_wavelength_nm * 1e-9, line)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
        rows = [("depth", depth * 1e6, "uK"), ("nu_r", nu, "Hz")]
    else:
        F = Fraction(args.F) if args.F is not None else line.ground_levels[-1]
        if F not in line.ground_levels:
            raise InputError(f"F={F} is not a ground level of {line.name}")
        table = atomic.transition_strengths(line, exact=True)
        rows = [(f"S({F}->{Fp}')", float(table[(F, Fp)]), str(table[(F, Fp)]))
                for Fp in line.excited_levels if abs(F - Fp) <= 1]
        rows.append(("sum", float(sum(table[(F, Fp)] for Fp in line.excited_levels)), ""))
    _emit(rows, args.format, f"{q} ({line.name})")
    return EXIT_OK


# -- oracle ---------------------------------------------------------------------------

def cmd_oracle(args) -> int:
    line = _line()
    rows, ok = [], True
    if args.check == "ballistic":
        params = dynamics.BallisticParams(15e-6, 275.0, 20e-6, mass=line.mass)
        t = np.linspace(0, 5e-3, 20)
        mc = dynamics.ballistic_mc_oracle(params, t, samples=args.samples, seed=args.seed or 0)
        closed = dynamics.ballistic_escape_probability(params, t)
        worst = float(np.max(np.abs(mc.probability - closed)))
        ok = worst < 0.005
        rows = [(f"t={ti * 1e3:.2f}ms", float(p), f"MC {m:.5f} +- {e:.5f}")
                for ti, p, m, e in zip(t, closed, mc.probability, mc.stderr)]
        rows.append(("max_abs_difference", worst, ""))
    elif args.check == "riccati":
        worst = 0.0
        for G in np.linspace(1.0, 50.0, 5):
            for b in np.geomspace(1e-5, 1.2e-2, 5):
                p = dynamics.LossParams(G, b)
                t = np.linspace(0, 5 / G, 50)
                a = dynamics.loss_curve_closed_form(p, 1e4, t)
                n = dynamics.loss_curve_numeric(p, 1e4, t, rtol=1e-11, atol=1e-9)
                worst = max(worst, float(np.max(np.abs(n - a) / a)))
        ok = worst < 1e-6
        rows = [("max_relative_error", worst, "")]
    elif args.check == "shot-noise":
        rng = np.random.default_rng(args.seed or 0)
        n, pulses = 10_000, 20_000
        photons = rng.poisson(n, pulses)
        upper = rng.binomial(photons, 0.5)
        diff = upper - (photons - upper)
        var = float(np.var(diff, ddof=1))
        ok = abs(var / n - 1) < 4 * math.sqrt(2 / pulses)
        rows = [("photons", n, ""), ("difference_variance_over_n", var / n, "")]
    else:
        table = atomic.transition_strengths(line, exact=True)
        for F in line.ground_levels:
            total = sum(table[(F, Fp)] for Fp in line.excited_levels)
            ok &= total == 1
            rows.append((f"sum S(F={F})", str(total), "exact"))
    _emit(rows, args.format, f"oracle {args.check}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NOT_CONVERGED


# -- entry point ------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="dipolescope", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a scenario and write its artifacts")
    r.add_argument("--scenario", required=True,
                   help=f"scenario JSON file or built-in name ({', '.join(harness.SCENARIO_NAMES)})")
    r.add_argument("--out", default="results", help="output directory (default: results)")
    r.add_argument("--seed", type=int, help="override the scenario seed")
    r.add_argument("--format", choices=["csv", "json"], default="csv")
    r.set_defaults(func=cmd_run)

    f = sub.add_parser("fit", help="fit an external x,y,sigma CSV file")
    f.add_argument("kind", choices=["loading", "loss", "breathing", "temperature", "trap_waist"])
    f.add_argument("--data", required=True, help="CSV with columns x, y, sigma (SI units)")
    f.add_argument("--waist-um", type=float, help="probe waist for temperature fits")
    f.add_argument("--trap-wavelength-nm", type=float, default=1030.0)
    f.add_argument("--format", choices=["csv", "json"])
    f.set_defaults(func=cmd_fit)

    ph = sub.add_parser("physics", help="print atomic-physics quantities in lab units")
    ph.add_argument("query", choices=["phase", "pe", "depth", "strengths"])
    ph.add_argument("--detuning-mhz", type=float, default=100.0,
                    help="probe detuning from the cycling transition (default 100)")
    ph.add_argument("--power-uw", type=float, help="probe power")
    ph.add_argument("--duration-us", type=float, help="probe pulse duration")
    ph.add_argument("--photons", type=float, help="photons per pulse (instead of power)")
    ph.add_argument("--waist-um", type=float, help="probe or trap beam waist")
    ph.add_argument("--atoms", type=float, help="effective atoms in the upper ground level")
    ph.add_argument("--atoms-f3", type=float, help="effective atoms in the lower ground level")
    ph.add_argument("--power-w", type=float, help="trap beam power")
    ph.add_argument("--trap-wavelength-nm", type=float, default=1030.0)
    ph.add_argument("--F", help="ground level for strengths (default: upper)")
    ph.add_argument("--format", choices=["csv", "json"])
    ph.set_defaults(func=cmd_physics)

    o = sub.add_parser("oracle", help="run an independent cross-check")
    o.add_argument("check", choices=["ballistic", "riccati", "shot-noise", "strengths"])
    o.add_argument("--samples", type=int, default=1_000_000)
    o.add_argument("--seed", type=int)
    o.add_argument("--format", choices=["csv", "json"])
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"dipolescope: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
