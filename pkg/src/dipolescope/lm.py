"""Damped nonlinear least squares (Levenberg-Marquardt with Marquardt scaling)."""

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

MAX_DAMPING = 1e12
# largest change of a log-parameterised coordinate per step (a factor e^2)
MAX_LOG_STEP = 2.0


@dataclass
class FitProblem:
    """Weighted least-squares problem ``y ~ model(params, t)``.

    ``log_params`` marks parameters fitted as log(p), which keeps them
    positive. ``jacobian(params, t)`` may return d model / d params with
    shape (len(t), len(params)); otherwise forward differences are used.
    """

    model: Callable
    t: np.ndarray
    y: np.ndarray
    sigma: np.ndarray
    p0: Sequence[float]
    names: Optional[Sequence[str]] = None
    lower: Optional[Sequence[float]] = None
    upper: Optional[Sequence[float]] = None
    log_params: Optional[Sequence[bool]] = None
    jacobian: Optional[Callable] = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.p0 = np.asarray(self.p0, dtype=float)
        k = len(self.p0)
        self.sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), self.y.shape).copy()
        if len(self.y) < k:
            raise ValueError(f"{len(self.y)} data points for {k} parameters")
        if np.any(~(self.sigma > 0)):
            raise ValueError("sigma must be > 0")
        self.names = list(self.names) if self.names is not None else [f"p{i}" for i in range(k)]
        self.lower = np.full(k, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(k, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        self.log_params = np.zeros(k, bool) if self.log_params is None else np.asarray(self.log_params, bool)
        if np.any(self.p0[self.log_params] <= 0):
            raise ValueError("log-parameterised starting values must be > 0")


@dataclass
class FitResult:
    names: list
    params: np.ndarray
    covariance: np.ndarray
    chi2: float
    dof: int
    converged: bool
    iterations: int
    message: str = ""
    singular: bool = False
    damping: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    @property
    def reduced_chi2(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else math.nan

    def __getitem__(self, name):
        return float(self.params[self.names.index(name)])

    def error(self, name) -> float:
        return float(self.stderr[self.names.index(name)])

    def as_dict(self):
        return {n: float(v) for n, v in zip(self.names, self.params)}

    def to_dict(self):
        def clean(x):
            x = float(x)
            return x if math.isfinite(x) else None

        return {
            "names": list(self.names),
            "params": [clean(v) for v in self.params],
            "stderr": [clean(v) for v in self.stderr],
            "covariance": [[clean(v) for v in row] for row in self.covariance],
            "chi2": clean(self.chi2),
            "dof": self.dof,
            "reduced_chi2": clean(self.reduced_chi2),
            "converged": self.converged,
            "iterations": self.iterations,
            "singular": self.singular,
            "message": self.message,
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def summary(self, scales=None) -> str:
        """One line per parameter in value(error) notation.

        ``scales`` maps names to (factor, unit) for display.
        """
        scales = scales or {}
        lines = []
        for name, v, e in zip(self.names, self.params, self.stderr):
            f, unit = scales.get(name, (1.0, ""))
            lines.append(f"{name} = {format_value_error(v * f, e * f)}{' ' + unit if unit else ''}")
        status = "converged" if self.converged else f"NOT converged ({self.message})"
        lines.append(f"chi2/dof = {self.reduced_chi2:.3g} ({status}, {self.iterations} iterations)")
        return "\n".join(lines)


def format_value_error(value: float, error: float) -> str:
    """Format as ``15(2)`` / ``1.1(1)e-04`` with one significant error digit
    (two when it starts with 1)."""
    if not math.isfinite(error) or error <= 0:
        return f"{value:.6g}"
    exp = math.floor(math.log10(abs(value))) if value != 0 else 0
    if abs(exp) >= 4:
        mant, err = value / 10 ** exp, error / 10 ** exp
        return f"{format_value_error(mant, err)}e{exp:+03d}"
    digits = math.floor(math.log10(error))
    err_digits = 2 if f"{error:.1e}"[0] == "1" else 1
    decimals = max(0, -(digits - err_digits + 1))
    scaled = round(error * 10 ** decimals)
    if decimals == 0:
        return f"{round(value):d}({scaled:d})"
    return f"{value:.{decimals}f}({scaled:d})"


def _to_internal(problem, p):
    q = p.copy()
    q[problem.log_params] = np.log(p[problem.log_params])
    return q


def _to_natural(problem, q):
    p = q.copy()
    p[problem.log_params] = np.exp(np.clip(q[problem.log_params], -700, 700))
    return np.clip(p, problem.lower, problem.upper)


def _jacobian(problem, p, f0, rel_step):
    if problem.jacobian is not None:
        return np.asarray(problem.jacobian(p, problem.t), dtype=float)
    J = np.empty((len(f0), len(p)))
    # a parameter sitting at zero takes its step from the starting value's
    # magnitude (or 1), not from a vanishing relative step
    typical = np.where(problem.p0 != 0, np.abs(problem.p0), 1.0)
    for i in range(len(p)):
        h = rel_step * (abs(p[i]) if abs(p[i]) > rel_step * typical[i] else typical[i])
        pp = p.copy()
        pp[i] += h
        if pp[i] > problem.upper[i]:
            h = -h
            pp[i] = p[i] + h
        J[:, i] = (np.asarray(problem.model(pp, problem.t), dtype=float) - f0) / h
    return J


def finite_difference_jacobian(problem: FitProblem, p, rel_step=1e-6):
    p = np.asarray(p, dtype=float)
    f0 = np.asarray(problem.model(p, problem.t), dtype=float)
    fd = FitProblem(problem.model, problem.t, problem.y, problem.sigma, problem.p0,
                    lower=problem.lower, upper=problem.upper)
    return _jacobian(fd, p, f0, rel_step)


def lm_fit(problem: FitProblem, max_iter: int = 200, chi2_rtol: float = 1e-10, step_tol: float = 1e-12,
           rel_step: float = 1e-6, damping: float = 1e-3, scale_covariance: bool = False) -> FitResult:
    """Minimise chi^2 = sum(((y - model) / sigma)^2).

    Stops when the relative chi^2 decrease of an accepted step falls below
    ``chi2_rtol`` or the step in internal coordinates is shorter than
    ``step_tol`` relative to the parameter vector. A fit that runs out of
    iterations, or whose damping climbs past 1e12, is returned with
    ``converged=False``.
    """
    P = problem
    w = 1.0 / P.sigma
    p = np.clip(P.p0.copy(), P.lower, P.upper)
    q = _to_internal(P, p)
    f = np.asarray(P.model(p, P.t), dtype=float)
    if not np.all(np.isfinite(f)):
        raise ValueError("model is not finite at the initial parameters")
    r = (P.y - f) * w
    chi2 = float(r @ r)
    lam = damping
    converged = False
    message = "maximum iterations reached"
    it = 0
    while it < max_iter:
        it += 1
        if chi2 == 0:
            converged, message = True, "exact fit"
            break
        Jp = _jacobian(P, p, f, rel_step)
        Jq = Jp * np.where(P.log_params, p, 1.0)
        A = Jq * w[:, None]
        JTJ = A.T @ A
        g = A.T @ r
        diag = np.diag(JTJ).copy()
        diag[diag <= 0] = 1.0
        accepted = False
        while not accepted:
            M = JTJ + lam * np.diag(diag)
            try:
                delta = np.linalg.solve(M, g)
                ok = np.all(np.isfinite(delta))
            except np.linalg.LinAlgError:
                ok = False
            if not ok:
                lam *= 10
                if lam > MAX_DAMPING:
                    break
                continue
            big = np.max(np.abs(delta[P.log_params]), initial=0.0)
            if big > MAX_LOG_STEP:
                delta = delta * (MAX_LOG_STEP / big)
            q_try = q + delta
            p_try = _to_natural(P, q_try)
            q_try = _to_internal(P, p_try)
            f_try = np.asarray(P.model(p_try, P.t), dtype=float)
            r_try = (P.y - f_try) * w
            chi2_try = float(r_try @ r_try) if np.all(np.isfinite(r_try)) else math.inf
            step = np.linalg.norm(q_try - q)
            if chi2_try <= chi2:
                accepted = True
                drop = (chi2 - chi2_try) / chi2 if chi2 > 0 else 0.0
                q, p, f, r = q_try, p_try, f_try, r_try
                chi2 = chi2_try
                lam = max(lam / 10, 1e-15)
                if drop < chi2_rtol or step < step_tol * (np.linalg.norm(q) + step_tol):
                    converged, message = True, "converged"
            else:
                if step < step_tol * (np.linalg.norm(q) + step_tol):
                    converged, message = True, "converged (no further decrease)"
                    break
                lam *= 10
                if lam > MAX_DAMPING:
                    break
        if lam > MAX_DAMPING:
            message = f"damping exceeded {MAX_DAMPING:g}"
            converged = False
            break
        if converged:
            break

    Jp = _jacobian(P, p, f, rel_step)
    A = Jp * w[:, None]
    JTJ = A.T @ A
    dof = len(P.y) - len(p)
    singular = False
    d = np.sqrt(np.diag(JTJ))
    if np.any(d == 0):
        singular = True
    else:
        singular = bool(np.linalg.cond(JTJ / np.outer(d, d)) > MAX_DAMPING)
    if singular:
        cov = np.full((len(p), len(p)), np.inf)
        message += "; normal equations singular, damping escalation cannot regularise the covariance"
    else:
        cov = np.linalg.inv(JTJ)
        cov = (cov + cov.T) / 2
        if scale_covariance and dof > 0:
            cov = cov * chi2 / dof
    return FitResult(names=list(P.names), params=p, covariance=cov, chi2=chi2, dof=dof,
                     converged=converged, iterations=it, message=message, singular=singular,
                     damping=lam)
