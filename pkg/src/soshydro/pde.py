"""Conservative solver for the limiting fourth-order equation on the torus.

The macroscopic slope profile solves

    dm/dt = -1/2 d^2/dtheta^2 ( a_hat(m) (d^2 m/dtheta^2 + E) ),

where ``E`` is an optional electromigration field.  Space is discretized on
``M`` periodic points with the 3-point second difference ``D2`` (scaled by
``M^2``).  The operator is written as ``D2 diag(a_hat) D2`` so the outer
``D2`` keeps the discrete mass exactly conserved.

Two time schemes are available:

* ``implicit-frozen``: backward Euler with ``a_hat`` frozen at the old
  profile,
  ``(I + dt/2 D2 A D2) m+ = m - dt/2 D2 (A E)``.
* ``imex``: the stiff part ``a_max D2 D2`` is treated implicitly and the
  variable remainder explicitly.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .transport import TransportTable

__all__ = [
    "Profile",
    "PdeParams",
    "TestFunction",
    "PdeSolution",
    "PdeError",
    "second_difference",
    "discrete_symbol",
    "pde_step",
    "solve",
    "weak_residual",
    "standard_battery",
    "profile_from_fourier",
    "write_solution_csv",
]

log = logging.getLogger(__name__)

SCHEMES = ("implicit-frozen", "imex")


class PdeError(ArithmeticError):
    """Linear solve failure or non-finite profile; carries a condition estimate."""

    def __init__(self, message, condition: float = float("nan")):
        super().__init__(message)
        self.condition = condition


@dataclass(frozen=True)
class Profile:
    """Grid values ``m_j ~ m(t, j/M)`` at time ``t``."""

    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise ValueError("profile values must be one-dimensional")
        if not np.all(np.isfinite(v)):
            raise ValueError("profile values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def m(self) -> int:
        return self.values.size

    @property
    def theta(self) -> np.ndarray:
        return np.arange(self.m) / self.m

    @property
    def mass(self) -> float:
        """Discrete integral ``sum_j m_j / M``."""
        return float(self.values.sum() / self.m)


@dataclass(frozen=True)
class PdeParams:
    """Solver parameters.

    Parameters
    ----------
    transport : TransportTable
        Source of ``a_hat``.
    dt : float
    m : int
        Grid size, even and at least 16.
    field : callable, optional
        ``E(t, theta)`` vectorized in ``theta``.
    scheme : {"implicit-frozen", "imex"}
    """

    transport: TransportTable
    dt: float
    m: int
    field: Callable | None = None
    scheme: str = "implicit-frozen"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.m < 16 or self.m % 2:
            raise ValueError("M must be even and >= 16")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")


def second_difference(m: int) -> sp.csc_matrix:
    """Periodic 3-point second difference scaled by ``M^2``."""
    main = -2.0 * np.ones(m)
    off = np.ones(m - 1)
    d = sp.diags([off, main, off], [-1, 0, 1], format="lil")
    d[0, m - 1] = 1.0
    d[m - 1, 0] = 1.0
    return (float(m) ** 2 * d).tocsc()


def discrete_symbol(m: int, k: int) -> float:
    """Eigenvalue magnitude of ``-D2`` on Fourier mode ``k``: ``4 M^2 sin^2(pi k/M)``."""
    return 4.0 * m * m * math.sin(math.pi * k / m) ** 2


def _d2(v: np.ndarray) -> np.ndarray:
    m = v.size
    return float(m) ** 2 * (np.roll(v, 1) - 2.0 * v + np.roll(v, -1))


def _field(params: PdeParams, t: float, theta: np.ndarray):
    if params.field is None:
        return None
    e = params.field(t, theta) if callable(params.field) else params.field
    return np.broadcast_to(np.asarray(e, dtype=float), theta.shape)


class _Stepper:
    """Caches the difference matrix and, for IMEX, the constant factorization."""

    def __init__(self, params: PdeParams):
        self.params = params
        self.d2 = second_difference(params.m)
        self.eye = sp.identity(params.m, format="csc")
        self.theta = np.arange(params.m) / params.m
        self._imex = None
        if params.scheme == "imex":
            amax = float(params.transport.values.max())
            self.amax = amax
            self._imex = splu((self.eye + 0.5 * params.dt * amax * (self.d2 @ self.d2)).tocsc())

    def step(self, v: np.ndarray, t: float) -> np.ndarray:
        p = self.params
        h = 0.5 * p.dt
        ahat = p.transport(v)
        e = _field(p, t + p.dt, self.theta)
        rhs = v.copy()
        if e is not None:
            rhs -= h * _d2(ahat * e)
        if p.scheme == "imex":
            rhs -= h * _d2((ahat - self.amax) * _d2(v))
            z = self._imex.solve(rhs)
            q = (ahat - self.amax) * _d2(v) + self.amax * _d2(z)
        else:
            mat = (self.eye + h * (self.d2 @ sp.diags(ahat) @ self.d2)).tocsc()
            try:
                z = splu(mat).solve(rhs)
            except RuntimeError as exc:  # singular factor
                raise PdeError(f"linear solve failed: {exc}", _condition(mat)) from exc
            q = ahat * _d2(z)
        # Rebuild the update as a second difference of a flux so the mass is
        # conserved independently of the linear-solver residual.
        if e is not None:
            q = q + ahat * e
        out = v - h * _d2(q)
        if not np.all(np.isfinite(out)):
            raise PdeError("non-finite profile after linear solve", _condition(
                (self.eye + h * (self.d2 @ sp.diags(ahat) @ self.d2)).tocsc()))
        return out


def _condition(mat) -> float:
    try:
        return float(np.linalg.cond(mat.toarray()))
    except Exception:  # pragma: no cover - diagnostic only
        return float("nan")


def pde_step(p: Profile, params: PdeParams) -> Profile:
    """One step of the selected scheme; returns the profile at ``t + dt``."""
    if p.m != params.m:
        raise ValueError("profile size does not match params.m")
    return Profile(_Stepper(params).step(p.values, p.t), p.t + params.dt)


@dataclass(frozen=True)
class TestFunction:
    """Space-time test function with analytic derivatives.

    ``value``, ``dt`` and ``d2`` map ``(t, theta)`` to arrays; ``d2`` is the
    second derivative in ``theta``.
    """

    __test__ = False  # not a pytest class

    name: str
    value: Callable
    dt: Callable
    d2: Callable

    @classmethod
    def fourier(cls, kind: str, k: int) -> "TestFunction":
        """``sin(2 pi k theta)`` or ``cos(2 pi k theta)``, constant in time."""
        w = 2.0 * math.pi * k
        f = {"sin": np.sin, "cos": np.cos}[kind]
        return cls(f"{kind}{int(2 * k)}pi", lambda t, th: f(w * th), lambda t, th: np.zeros_like(th),
                   lambda t, th: -w * w * f(w * th))

    @classmethod
    def constant(cls) -> "TestFunction":
        return cls("one", lambda t, th: np.ones_like(th), lambda t, th: np.zeros_like(th),
                   lambda t, th: np.zeros_like(th))


def standard_battery() -> list[TestFunction]:
    """``sin 2 pi theta``, ``cos 2 pi theta`` and ``sin 4 pi theta``."""
    return [TestFunction.fourier("sin", 1), TestFunction.fourier("cos", 1), TestFunction.fourier("sin", 2)]


@dataclass(frozen=True)
class PdeSolution:
    """Recorded trajectory and diagnostics of ``solve``.

    Attributes
    ----------
    times, profiles : ndarray
        Record times and profiles ``(n_records, M)``.
    mass : ndarray
        Discrete mass after every step (index 0 is the initial mass).
    energy : float
        ``sum_n dt * mean((D2 m_{n+1/2})^2)`` with the midpoint profile.
    weak : dict
        Weak-form residual for each supplied test function.
    clamped : int
        Number of grid evaluations that fell outside the transport table.
    bound_violations : int
        Steps where ``max|m+| > max|m| + dt ||D2(A E)||_inf`` (up to 1e-12).
    params : PdeParams
    """

    times: np.ndarray
    profiles: np.ndarray
    mass: np.ndarray
    energy: float
    weak: dict
    clamped: int
    bound_violations: int
    params: PdeParams = field(repr=False)

    @property
    def final(self) -> Profile:
        return Profile(self.profiles[-1], float(self.times[-1]))

    def pair(self, phi: TestFunction, index: int = -1) -> float:
        """Discrete ``int m phi`` at a recorded time."""
        th = np.arange(self.params.m) / self.params.m
        return float(np.mean(self.profiles[index] * phi.value(self.times[index], th)))


def solve(m0, horizon: float, params: PdeParams, *, record_every: int = 1,
          test_functions: Sequence[TestFunction] | None = None, mean_tol: float = 1e-10) -> PdeSolution:
    """Integrate from ``m0`` to ``horizon``.

    Parameters
    ----------
    m0 : array_like or Profile
        Initial profile with zero discrete mean.
    horizon : float
        Final time; the number of steps is ``round(horizon / dt)``.
    record_every : int
        Record every this many steps (the final state is always recorded).
    test_functions : sequence of TestFunction, optional
        Battery for weak-form residuals (default ``standard_battery()``).
        Residuals are computed from every step, independent of recording.

    Raises
    ------
    ValueError
        If the initial mean is not zero within ``mean_tol``.
    PdeError
        On linear-solve failure.
    """
    p0 = m0 if isinstance(m0, Profile) else Profile(np.asarray(m0, dtype=float))
    if p0.m != params.m:
        raise ValueError("initial profile size does not match params.m")
    scale = 1.0 + float(np.max(np.abs(p0.values)))
    if abs(p0.mass) > mean_tol * scale:
        raise ValueError(f"initial profile must have zero mean (got {p0.mass:.3e})")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    tests = standard_battery() if test_functions is None else list(test_functions)
    n_steps = int(round(horizon / params.dt))
    stepper = _Stepper(params)
    theta = stepper.theta
    v = p0.values.copy()
    t = p0.t
    times = [t]
    profiles = [v.copy()]
    mass = np.empty(n_steps + 1)
    mass[0] = v.sum() / params.m
    energy = 0.0
    clamped = params.transport.clamps(v)
    violations = 0
    acc = _WeakAccumulator(tests, params, theta, v, t)
    for n in range(n_steps):
        new = stepper.step(v, t)
        e = _field(params, t + params.dt, theta)
        bound = float(np.max(np.abs(v)))
        if e is not None:
            bound += params.dt * float(np.max(np.abs(_d2(params.transport(v) * e))))
        if float(np.max(np.abs(new))) > bound * (1 + 1e-12) + 1e-12:
            violations += 1
        mid = 0.5 * (v + new)
        energy += params.dt * float(np.mean(_d2(mid) ** 2))
        acc.add(v, new, t, t + params.dt)
        v, t = new, t + params.dt
        clamped += params.transport.clamps(v)
        mass[n + 1] = v.sum() / params.m
        if (n + 1) % record_every == 0 or n + 1 == n_steps:
            times.append(t)
            profiles.append(v.copy())
    return PdeSolution(np.asarray(times), np.asarray(profiles), mass, energy, acc.result(v, t), clamped,
                       violations, params)


class _WeakAccumulator:
    """Trapezoid-in-time quadrature of the weak-form identity along a run."""

    def __init__(self, tests, params, theta, v0, t0):
        self.tests = tests
        self.params = params
        self.theta = theta
        self.start = {f.name: float(np.mean(v0 * f.value(t0, theta))) for f in tests}
        self.integral = {f.name: 0.0 for f in tests}

    def _integrand(self, f, v, t):
        th = self.theta
        ahat = self.params.transport(v)
        e = _field(self.params, t, th)
        drive = _d2(v) if e is None else _d2(v) + e
        return float(np.mean(-v * f.dt(t, th) + 0.5 * ahat * drive * f.d2(t, th)))

    def add(self, v, new, t, t_new):
        h = t_new - t
        for f in self.tests:
            self.integral[f.name] += 0.5 * h * (self._integrand(f, v, t) + self._integrand(f, new, t_new))

    def result(self, v, t):
        return {f.name: float(np.mean(v * f.value(t, self.theta))) - self.start[f.name] + self.integral[f.name]
                for f in self.tests}


def weak_residual(solution: PdeSolution, phi: TestFunction, params: PdeParams | None = None) -> float:
    """Weak-form residual of a recorded trajectory for one test function.

    ``int m phi(T) - int m phi(0) - int int m d_s phi
    + 1/2 int int a_hat(m) (D2 m + E) d^2 phi``, with the time integral
    taken by the trapezoid rule over the recorded times.
    """
    params = solution.params if params is None else params
    theta = np.arange(params.m) / params.m
    acc = _WeakAccumulator([phi], params, theta, solution.profiles[0], float(solution.times[0]))
    for i in range(len(solution.times) - 1):
        acc.add(solution.profiles[i], solution.profiles[i + 1], float(solution.times[i]),
                float(solution.times[i + 1]))
    return acc.result(solution.profiles[-1], float(solution.times[-1]))[phi.name]


def profile_from_fourier(m: int, coefficients: Mapping) -> np.ndarray:
    """Grid profile from ``{"sin1": A, "cos2": B, ...}`` Fourier coefficients."""
    theta = np.arange(m) / m
    out = np.zeros(m)
    for key, amp in coefficients.items():
        kind, k = key[:3], int(key[3:])
        if kind not in ("sin", "cos") or k < 1:
            raise ValueError(f"bad Fourier key {key!r}; use sinK or cosK with K >= 1")
        out += float(amp) * (np.sin if kind == "sin" else np.cos)(2.0 * math.pi * k * theta)
    return out


def write_solution_csv(solution: PdeSolution, path) -> None:
    """Rows ``t, m_0, ..., m_{M-1}``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for t, row in zip(solution.times, solution.profiles):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in row])
