"""Lattice geometry, mobilities, stencil operators and conserved quantities.

The state of the microscopic dynamics is a field of real slopes ``x_i`` on
either a periodic ring of ``N`` sites or a finite box ``[-l, l]``.  Every
stencil in the model is the second difference

    X_i = d/dx_{i-1} - 2 d/dx_i + d/dx_{i+1},

and the microscopic current over bond ``i`` is

    w_i = a_i (x_{i-1} - 2 x_i + x_{i+1}) - (X_i a)_i ,

with ``a_i = a(x_{i-1}, x_i, x_{i+1})`` the mobility and ``(X_i a)_i`` the
stencil applied to the mobility's own arguments.  This is the divergence form
``w_i = -e^{H} X_i (a_i e^{-H})`` with ``H = sum_i V(x_i)`` and
``V(x) = x**2 / 2``; it makes ``E[w f] = E[a X_0 f]`` under the product
Gaussian measures and reduces to ``w = c * Laplacian`` for a constant
mobility ``c``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "BoundaryError",
    "SlopeConfig",
    "Mobility",
    "Potential",
    "ConservedPair",
    "POTENTIAL",
    "constant_mobility",
    "bump_mobility",
    "mobility_registry",
    "parse_mobility",
    "energy",
    "current",
    "laplacian_slope",
    "conserved_pair",
    "mobility_field",
    "current_field",
    "laplacian_field",
    "stencil_matrix",
]

# Kernel codes understood by the compiled and fallback steppers.
KIND_CONSTANT = 0
KIND_BUMP = 1


class BoundaryError(IndexError):
    """A stencil reaches outside a box window."""


# ---------------------------------------------------------------------------
# Configurations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SlopeConfig:
    """Real slope field on a periodic ring or a box window.

    Parameters
    ----------
    values : array_like
        Slopes.  For a box of half-width ``l`` the array has ``2l+1`` entries
        ordered from site ``-l`` to site ``+l``.
    topology : {"periodic", "box"}
        Geometry of the lattice.
    center : int
        Absolute index of the box center (informational; stencils use
        relative sites).

    Notes
    -----
    Instances are immutable: the stored array is a read-only copy.
    """

    values: np.ndarray
    topology: str = "periodic"
    center: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.topology == "periodic":
            if v.size < 5:
                raise ValueError("periodic topology requires N >= 5")
        elif self.topology == "box":
            if v.size % 2 != 1 or v.size < 5:
                raise ValueError("box topology requires 2l+1 sites with l >= 2")
        else:
            raise ValueError(f"unknown topology {self.topology!r}")

    @classmethod
    def periodic(cls, values) -> "SlopeConfig":
        return cls(values, "periodic")

    @classmethod
    def box(cls, values, center: int = 0) -> "SlopeConfig":
        return cls(values, "box", center)

    @property
    def n_sites(self) -> int:
        return self.values.size

    @property
    def half_width(self) -> int:
        if self.topology != "box":
            raise AttributeError("half_width is defined for box windows only")
        return (self.values.size - 1) // 2

    def index(self, i: int) -> int:
        """Array index of site ``i`` (relative to the center for boxes)."""
        if self.topology == "periodic":
            return i % self.values.size
        l = self.half_width
        if not -l <= i <= l:
            raise BoundaryError(f"site {i} outside box [-{l}, {l}]")
        return i + l

    def triple(self, i: int) -> tuple[float, float, float]:
        """Slopes ``(x_{i-1}, x_i, x_{i+1})`` with topology checks."""
        if self.topology == "box":
            l = self.half_width
            if not -l < i < l:
                raise BoundaryError(f"stencil at site {i} leaves box [-{l}, {l}]")
        v = self.values
        return v[self.index(i - 1)], v[self.index(i)], v[self.index(i + 1)]


@dataclass(frozen=True)
class ConservedPair:
    """Block mean slope ``y1`` and linear mean slope ``y2`` of a window."""

    y1: float
    y2: float

    def as_tuple(self) -> tuple[float, float]:
        return (self.y1, self.y2)


# ---------------------------------------------------------------------------
# Potential and mobilities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Potential:
    """Quadratic single-site potential ``V(x) = x**2 / 2``."""

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * x * x

    def derivative(self, x):
        return np.asarray(x, dtype=float)


POTENTIAL = Potential()


def _s(x):
    return x * x / (1.0 + x * x)


def _ds(x):
    d = 1.0 + x * x
    return 2.0 * x / (d * d)


@dataclass(frozen=True)
class Mobility:
    """Three-slope mobility ``a(x_{-1}, x_0, x_1)`` with analytic gradient.

    Parameters
    ----------
    name : str
        Family name (``"constant"``, ``"bump"`` or a user label).
    params : tuple
        Family parameters, e.g. ``(("beta", 0.1),)``.
    func : callable
        Vectorized ``(xm, x0, xp) -> a``.
    grad : callable
        Vectorized ``(xm, x0, xp) -> (da/dxm, da/dx0, da/dxp)``.
    lower_bound, upper_bound : float
        Certified bounds ``1/a* <= a <= a*``.
    kind : int or None
        Code of a family implemented by the compiled kernels; ``None`` for
        user mobilities, which run on the numpy fallback.
    kernel_param : float
        Scalar parameter passed to the kernels (``c`` or ``beta``).
    """

    name: str
    params: tuple
    func: Callable = field(repr=False, compare=False)
    grad: Callable = field(repr=False, compare=False)
    lower_bound: float = 1.0
    upper_bound: float = 1.0
    kind: int | None = None
    kernel_param: float = 0.0

    def __call__(self, xm, x0, xp):
        return self.func(xm, x0, xp)

    def __reduce__(self):
        # Registry families are rebuilt from their label so they can cross
        # process boundaries; user mobilities pickle only if their callables do.
        if self.kind is not None:
            return (parse_mobility, (self.label,))
        return super().__reduce__()

    def eval(self, xm, x0, xp):
        return self.func(xm, x0, xp)

    @property
    def is_constant(self) -> bool:
        return self.kind == KIND_CONSTANT

    @property
    def label(self) -> str:
        """Canonical text form, e.g. ``bump(beta=0.1)``."""
        inner = ",".join(f"{k}={float(v)!r}" for k, v in self.params)
        return f"{self.name}({inner})"

    def check_bounds(self, rng, n: int = 100_000, scale: float = 4.0) -> bool:
        """Verify the certified bounds on random probe triples."""
        x = rng.normal(0.0, scale, size=(3, n))
        a = np.broadcast_to(self.func(x[0], x[1], x[2]), (n,))
        return bool(np.all(a >= self.lower_bound) and np.all(a <= self.upper_bound))


def constant_mobility(c: float = 1.0) -> Mobility:
    """Constant mobility ``a = c``."""
    c = float(c)
    if not c > 0 or not np.isfinite(c):
        raise ValueError("constant mobility requires 0 < c < inf")

    def func(xm, x0, xp):
        return np.full(np.broadcast(np.asarray(xm), np.asarray(x0), np.asarray(xp)).shape, c)

    def grad(xm, x0, xp):
        z = np.zeros(np.broadcast(np.asarray(xm), np.asarray(x0), np.asarray(xp)).shape)
        return z, z.copy(), z.copy()

    return Mobility("constant", (("c", c),), func, grad, c, c, KIND_CONSTANT, c)


def bump_mobility(beta: float = 0.1) -> Mobility:
    """Bump mobility ``a = 1 + beta * sum_{k=-1}^{1} s(x_k)``, ``s = x^2/(1+x^2)``.

    Bounds: ``1 <= a <= 1 + 3 beta``.  The family is restricted to
    ``0 < beta < 1/3``.
    """
    beta = float(beta)
    if not 0.0 < beta < 1.0 / 3.0:
        raise ValueError("bump mobility requires 0 < beta < 1/3")

    def func(xm, x0, xp):
        return 1.0 + beta * (_s(np.asarray(xm, float)) + _s(np.asarray(x0, float)) + _s(np.asarray(xp, float)))

    def grad(xm, x0, xp):
        return beta * _ds(np.asarray(xm, float)), beta * _ds(np.asarray(x0, float)), beta * _ds(np.asarray(xp, float))

    return Mobility("bump", (("beta", beta),), func, grad, 1.0, 1.0 + 3.0 * beta, KIND_BUMP, beta)


_REGISTRY = {"constant": constant_mobility, "bump": bump_mobility}


def mobility_registry(name: str, *args, **kwargs) -> Mobility:
    """Look up a mobility family by name.

    Examples
    --------
    >>> mobility_registry("bump", 0.1).upper_bound
    1.3
    """
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown mobility {name!r}; known: {sorted(_REGISTRY)}") from None
    return factory(*args, **kwargs)


_SPEC_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\(\s*(.*?)\s*\))?\s*$")


def parse_mobility(spec) -> Mobility:
    """Build a mobility from ``"bump(0.1)"``, ``"bump(beta=0.1)"`` or a mapping.

    Mappings use ``{"name": "bump", "beta": 0.1}``.
    """
    if isinstance(spec, Mobility):
        return spec
    if isinstance(spec, dict):
        spec = dict(spec)
        name = spec.pop("name")
        return mobility_registry(name, **spec)
    m = _SPEC_RE.match(str(spec))
    if not m:
        raise ValueError(f"cannot parse mobility spec {spec!r}")
    name, inner = m.group(1), m.group(2)
    args, kwargs = [], {}
    if inner:
        for tok in inner.split(","):
            tok = tok.strip()
            if "=" in tok:
                k, v = tok.split("=", 1)
                kwargs[k.strip()] = float(v)
            elif tok:
                args.append(float(tok))
    return mobility_registry(name, *args, **kwargs)


# ---------------------------------------------------------------------------
# Pointwise operations on SlopeConfig
# ---------------------------------------------------------------------------


def energy(config: SlopeConfig) -> float:
    """Total energy ``sum_i V(x_i)`` over the ring or window."""
    v = config.values
    return float(0.5 * np.dot(v, v))


def laplacian_slope(config: SlopeConfig, i: int) -> float:
    """Discrete Laplacian ``x_{i-1} - 2 x_i + x_{i+1}`` at site ``i``."""
    xm, x0, xp = config.triple(i)
    return float(xm - 2.0 * x0 + xp)


def current(config: SlopeConfig, i: int, mob: Mobility) -> float:
    """Microscopic current ``w_i`` over bond ``i``.

    ``w_i = a_i * (x_{i-1} - 2 x_i + x_{i+1}) - (da/dx_{-1} - 2 da/dx_0 + da/dx_1)``
    with every term evaluated at ``(x_{i-1}, x_i, x_{i+1})``.
    """
    xm, x0, xp = config.triple(i)
    a = float(mob.func(xm, x0, xp))
    gm, g0, gp = mob.grad(xm, x0, xp)
    xa = float(gm) - 2.0 * float(g0) + float(gp)
    return a * (xm - 2.0 * x0 + xp) - xa


def conserved_pair(window: SlopeConfig) -> ConservedPair:
    """Conserved pair of a box window.

    ``y1 = sum_j x_j / (2l+1)`` and ``y2 = sum_j j x_j / (l(l+1))`` for
    ``j`` in ``[-l, l]``.
    """
    if window.topology != "box":
        raise ValueError("conserved_pair requires a box window")
    y1, y2 = conserved_pair_array(window.values)
    return ConservedPair(float(y1), float(y2))


def conserved_pair_array(x):
    """Vectorized conserved pair over the last axis of ``x`` (length ``2l+1``)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    l = (n - 1) // 2
    j = np.arange(-l, l + 1, dtype=float)
    return x.sum(axis=-1) / (2 * l + 1), (x * j).sum(axis=-1) / (l * (l + 1))


# ---------------------------------------------------------------------------
# Vectorized fields (used by samplers, estimators and the fallback kernels)
# ---------------------------------------------------------------------------


def mobility_field(x, mob: Mobility, periodic: bool = True):
    """Mobility ``a_i`` and its stencil derivative ``(X_i a)_i``.

    Parameters
    ----------
    x : ndarray, shape (..., n)
        Slopes along the last axis.
    periodic : bool
        Ring geometry when true.  Otherwise only interior sites ``1..n-2``
        are returned, shape ``(..., n-2)``.

    Returns
    -------
    a, xa : ndarray
    """
    x = np.asarray(x, dtype=float)
    if periodic:
        xm, xp = np.roll(x, 1, axis=-1), np.roll(x, -1, axis=-1)
        x0 = x
    else:
        xm, x0, xp = x[..., :-2], x[..., 1:-1], x[..., 2:]
    a = np.broadcast_to(mob.func(xm, x0, xp), x0.shape)
    gm, g0, gp = mob.grad(xm, x0, xp)
    xa = np.broadcast_to(gm - 2.0 * g0 + gp, x0.shape)
    return np.array(a), np.array(xa)


def laplacian_field(x, periodic: bool = True):
    """Second difference of ``x`` along the last axis (interior only if boxed)."""
    x = np.asarray(x, dtype=float)
    if periodic:
        return np.roll(x, 1, axis=-1) - 2.0 * x + np.roll(x, -1, axis=-1)
    return x[..., :-2] - 2.0 * x[..., 1:-1] + x[..., 2:]


def current_field(x, mob: Mobility, periodic: bool = True):
    """Currents ``w_i`` at every site of a ring, or every interior box site."""
    a, xa = mobility_field(x, mob, periodic)
    return a * laplacian_field(x, periodic) - xa


def stencil_matrix(n: int, periodic: bool = False) -> np.ndarray:
    """Rows are the second-difference stencils ``c_i``.

    For a box of ``n = 2l+1`` sites only interior stencils exist, giving an
    ``(n-2, n)`` matrix.  For a ring the matrix is ``(n, n)`` circulant.
    """
    if periodic:
        c = np.zeros((n, n))
        for i in range(n):
            c[i, (i - 1) % n] += 1.0
            c[i, i] -= 2.0
            c[i, (i + 1) % n] += 1.0
        return c
    c = np.zeros((n - 2, n))
    for r in range(n - 2):
        c[r, r : r + 3] = (1.0, -2.0, 1.0)
    return c
