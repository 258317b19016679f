"""Transport coefficient, CLT variances and the semi-inner product.

The transport coefficient is the infimum

    a_hat(alpha) = inf_g E_gc[a(x_{-1}, x_0, x_1) (1 + X_0 sum_j tau^j g)^2]

over bounded local functions ``g``.  Restricting ``g`` to the span of a
finite ``BasisSpec`` turns the infimum into a quadratic minimization in the
basis coefficients, estimated by Monte Carlo under the grand canonical
product measure.  Every restriction gives an upper bound.  The Jensen bounds
``1/E[1/a] <= a_hat <= E[a]`` bracket the true value.

Centered local functions enter the CLT variance through their flux form
``f = sum_m X_m^*(h_m)``.  Here ``X_m = d_{m-1} - 2 d_m + d_{m+1}`` is the
stencil vector field and ``X^*`` its adjoint in ``L^2(a dnu)``.  The current
is ``w = X_0^*(1)`` and the slope Laplacian ``Delta x = X_0^*(1/a)``.  With
the box Dirichlet form

    D(u) = 1/2 E[sum_m a_m (X_m u)^2],

the resolvent pairing ``<(-L_l)^{-1} F, G>`` is approximated by a Galerkin
solve over a trial space.  The trial space holds all linear functions of
the window plus bulk sums of basis features.  The Galerkin value is a lower
bound for every ``<(-L_l)^{-1} F, F>``.  For ``w``, ``Delta x`` and generator
images ``L g`` of trial features it is exact.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .gibbs import CanonicalSpec, gc_mean_inverse_mobility, gc_mean_mobility, sample_canonical, sample_gc
from .lattice import ConservedPair, Mobility, mobility_field, parse_mobility

__all__ = [
    "Feature",
    "BasisSpec",
    "AHatEstimate",
    "BoundsEstimate",
    "FluxForm",
    "current_form",
    "laplacian_form",
    "generator_form",
    "VarianceEstimate",
    "SemiInnerEstimate",
    "ResidualEstimate",
    "TransportTable",
    "SandwichError",
    "SingularGramError",
    "estimate_a_hat",
    "a_hat_bounds",
    "a_hat_bounds_quadrature",
    "clt_variance",
    "galerkin_pairing",
    "semi_inner",
    "fd_residual",
    "tabulate",
    "bulk_shift",
]

log = logging.getLogger(__name__)

RIDGE = 1e-8
MAX_CONDITION = 1e14


class SandwichError(ValueError):
    """A tabulated value leaves ``[1/E[1/a], E[a]]`` by more than 3 stderr."""

    def __init__(self, message, table=None):
        super().__init__(message)
        self.table = table


class SingularGramError(np.linalg.LinAlgError):
    """The regularized Gram matrix is numerically singular."""

    def __init__(self, message, condition: float):
        super().__init__(message)
        self.condition = condition


# ---------------------------------------------------------------------------
# Basis features
# ---------------------------------------------------------------------------

def _sech2(v):
    return 1.0 / np.cosh(v) ** 2


_FACTORS: dict[str, tuple[Callable, Callable]] = {
    "tanh": (np.tanh, _sech2),
    "sin": (np.sin, np.cos),
    "sech2": (_sech2, lambda v: -2.0 * np.tanh(v) * _sech2(v)),
}


@dataclass(frozen=True)
class Feature:
    """Product ``prod_r phi(x_{o_r})`` of bounded single-site factors.

    Parameters
    ----------
    offsets : tuple of int
        Distinct sites relative to the feature center.
    factor : {"tanh", "sin", "sech2"}
        Single-site factor ``phi``; each is bounded with bounded derivative.
    mean_power : int
        Optional block-mean hook: the product is multiplied by
        ``tanh(xbar)**mean_power``, where ``xbar`` is the mean slope over
        the feature's span.  This lets a basis depend on the local mean
        slope without leaving the bounded class.
    """

    offsets: tuple[int, ...]
    factor: str = "tanh"
    mean_power: int = 0

    def __post_init__(self):
        offs = tuple(int(o) for o in self.offsets)
        if not offs or len(set(offs)) != len(offs):
            raise ValueError("feature offsets must be distinct and non-empty")
        if self.factor not in _FACTORS:
            raise ValueError(f"unknown factor {self.factor!r}")
        if self.mean_power < 0:
            raise ValueError("mean_power must be >= 0")
        object.__setattr__(self, "offsets", offs)

    @property
    def span(self) -> tuple[int, int]:
        return min(self.offsets), max(self.offsets)

    @property
    def radius(self) -> int:
        lo, hi = self.span
        return max(-lo, hi)

    def label(self) -> str:
        core = "*".join(f"{self.factor}(x{o:+d})" for o in self.offsets)
        return core + (f"*tanh(mean)^{self.mean_power}" if self.mean_power else "")

    def value_and_grad(self, x: np.ndarray, c: int) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        """Value and nonzero partial derivatives at the shift with center column ``c``."""
        phi, dphi = _FACTORS[self.factor]
        cols = [c + o for o in self.offsets]
        vals = [phi(x[:, j]) for j in cols]
        ders = [dphi(x[:, j]) for j in cols]
        value = np.prod(vals, axis=0) if len(vals) > 1 else vals[0].copy()
        grad: dict[int, np.ndarray] = {}
        for r, j in enumerate(cols):
            others = [vals[q] for q in range(len(vals)) if q != r]
            grad[j] = ders[r] * (np.prod(others, axis=0) if others else 1.0)
        if self.mean_power:
            lo, hi = self.span
            block = list(range(c + lo, c + hi + 1))
            m = np.tanh(x[:, block].mean(axis=1))
            mp = m**self.mean_power
            dm = self.mean_power * m ** (self.mean_power - 1) * (1.0 - m * m) / len(block)
            for j in grad:
                grad[j] = grad[j] * mp
            for j in block:
                grad[j] = grad.get(j, 0.0) + value * dm
            value = value * mp
        return value, grad


@dataclass(frozen=True)
class BasisSpec:
    """Finite family of local functions ``g_k`` spanning the trial space.

    The closure of ``{1} + {X_0 sum_j tau^j g}`` over all bounded local
    ``g`` is the Hilbert space onto which ``1/a`` is projected in the
    variational formula.  The projection itself is never formed; only
    quadratic forms against the span of the listed features are estimated.

    Features that differ only by a shift produce the same
    ``X_0 sum_j tau^j g``; such redundancy is harmless because the Gram
    matrix is ridge-regularized.
    """

    features: tuple[Feature, ...] = ()

    @classmethod
    def default(cls, s: int = 2) -> "BasisSpec":
        """``tanh(x_j)`` for ``|j| <= s`` and ``tanh(x_j) tanh(x_{j+1})`` inside the span."""
        single = [Feature((j,)) for j in range(-s, s + 1)]
        pairs = [Feature((j, j + 1)) for j in range(-s, s)]
        return cls(tuple(single + pairs))

    @classmethod
    def rich(cls, s: int = 2) -> "BasisSpec":
        """Shift-distinct features up to span ``s`` from several factor families."""
        feats = [Feature((0,), f) for f in ("tanh", "sech2", "sin")]
        for d in range(1, s + 1):
            feats += [Feature((0, d), "tanh"), Feature((0, d), "sech2")]
        feats += [Feature((-1, 0, 1), "tanh"), Feature((0,), "tanh", 1)]
        return cls(tuple(feats))

    @classmethod
    def empty(cls) -> "BasisSpec":
        return cls(())

    @property
    def size(self) -> int:
        return len(self.features)

    @property
    def radius(self) -> int:
        return max((f.radius for f in self.features), default=0)

    def digest(self) -> str:
        text = ";".join(f.label() for f in self.features)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _xi_matrix(basis: BasisSpec, x: np.ndarray, origin: int) -> np.ndarray:
    """``X_0 sum_j tau^j g_k`` for every feature, shape ``(n, K)``."""
    out = np.zeros((x.shape[0], basis.size))
    for k, feat in enumerate(basis.features):
        lo, hi = feat.span
        acc = {origin - 1: 0.0, origin: 0.0, origin + 1: 0.0}
        # Shifts whose support touches sites -1, 0, 1.
        for c in range(origin - 1 - hi, origin + 2 - lo):
            _, grad = feat.value_and_grad(x, c)
            for j, gj in grad.items():
                if j in acc:
                    acc[j] = acc[j] + gj
        out[:, k] = acc[origin - 1] - 2.0 * acc[origin] + acc[origin + 1]
    return out


def _window_radius(basis: BasisSpec) -> int:
    # Sites reached by the shifted supports: |j| <= 2s + 1.
    return 2 * basis.radius + 1


# ---------------------------------------------------------------------------
# Transport coefficient
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AHatEstimate:
    """Variational estimate of ``a_hat``; iterates as ``(value, stderr)``."""

    value: float
    stderr: float
    alpha: float
    coefficients: np.ndarray
    condition: float
    mean_mobility: float
    n_samples: int

    def __iter__(self):
        return iter((self.value, self.stderr))


def _ridge_solve(m: np.ndarray, b: np.ndarray, ridge: float) -> tuple[np.ndarray, float]:
    k = m.shape[0]
    if k == 0:
        return np.zeros_like(b), 1.0
    lam = ridge * float(np.trace(m)) / k
    mr = m + lam * np.eye(k)
    cond = float(np.linalg.cond(mr))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularGramError(f"Gram matrix is singular beyond regularization (condition {cond:.3e})", cond)
    return np.linalg.solve(mr, b), cond


def estimate_a_hat(alpha: float, basis: BasisSpec, n_samples: int, rng: np.random.Generator, mob: Mobility, *,
                   n_batches: int = 20, ridge: float = RIDGE, chunk: int = 50_000) -> AHatEstimate:
    """Minimize ``E_gc[a (1 + Phi.c)^2]`` over the basis coefficients ``c``.

    Parameters
    ----------
    alpha : float
        Tilt of the grand canonical measure.
    basis : BasisSpec
    n_samples : int
        Monte Carlo windows of width ``4s+3`` drawn from ``gc(alpha)``.
    rng : numpy.random.Generator
    mob : Mobility

    Returns
    -------
    AHatEstimate
        ``value = q0 - b^T M^{-1} b`` with the ridge-regularized Gram matrix.
        The error bar is the batch scatter of ``a (1 + Phi.c)^2`` at the
        fitted coefficients.

    Raises
    ------
    SingularGramError
        If the regularized Gram matrix has condition number above 1e14.
    """
    if n_samples < 2 * n_batches:
        raise ValueError("n_samples must be at least twice n_batches")
    mob = parse_mobility(mob)
    k = basis.size
    r = _window_radius(basis)
    width = 2 * r + 1
    edges = np.linspace(0, n_samples, n_batches + 1).astype(int)
    a_all = np.empty(n_samples)
    phi_all = np.empty((n_samples, k))
    for lo in range(0, n_samples, chunk):
        hi = min(n_samples, lo + chunk)
        x = sample_gc(alpha, width, rng, hi - lo)
        a_all[lo:hi] = mob.func(x[:, r - 1], x[:, r], x[:, r + 1])
        if k:
            phi_all[lo:hi] = _xi_matrix(basis, x, r)
    q0 = float(a_all.mean())
    b = phi_all.T @ a_all / n_samples
    m = (phi_all * a_all[:, None]).T @ phi_all / n_samples
    sol, cond = _ridge_solve(m, b, ridge)
    c = -sol
    obj = a_all * (1.0 + phi_all @ c) ** 2
    per = np.array([obj[edges[i] : edges[i + 1]].mean() for i in range(n_batches)])
    return AHatEstimate(
        value=float(obj.mean()),
        stderr=float(per.std(ddof=1) / math.sqrt(n_batches)),
        alpha=float(alpha),
        coefficients=c,
        condition=cond,
        mean_mobility=q0,
        n_samples=int(n_samples),
    )


@dataclass(frozen=True)
class BoundsEstimate:
    """Jensen bounds ``(1/E[1/a], E[a])``; iterates as ``(lower, upper)``."""

    lower: float
    lower_stderr: float
    upper: float
    upper_stderr: float

    def __iter__(self):
        return iter((self.lower, self.upper))


def a_hat_bounds(alpha: float, mob: Mobility, n: int, rng: np.random.Generator | None = None) -> BoundsEstimate:
    """Monte Carlo Jensen bounds on ``a_hat(alpha)`` from ``n`` grand canonical triples.

    The lower bound's error bar uses the delta method for ``1/E[1/a]``.
    """
    mob = parse_mobility(mob)
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = np.random.default_rng() if rng is None else rng
    x = sample_gc(alpha, 3, rng, n)
    a = np.broadcast_to(mob.func(x[:, 0], x[:, 1], x[:, 2]), (n,))
    inv = 1.0 / a
    ma, mi = float(a.mean()), float(inv.mean())
    sa = float(a.std(ddof=1) / math.sqrt(n))
    si = float(inv.std(ddof=1) / math.sqrt(n))
    return BoundsEstimate(lower=1.0 / mi, lower_stderr=si / mi**2, upper=ma, upper_stderr=sa)


def a_hat_bounds_quadrature(alpha, mob: Mobility, order: int = 40):
    """Gauss-Hermite values of ``(1/E[1/a], E[a])``; ``alpha`` may be an array."""
    mob = parse_mobility(mob)
    return 1.0 / gc_mean_inverse_mobility(mob, alpha, order), gc_mean_mobility(mob, alpha, order)


# ---------------------------------------------------------------------------
# Flux forms and the Galerkin resolvent
# ---------------------------------------------------------------------------

class _Box:
    """Samples of a box window with cached mobilities at interior columns."""

    def __init__(self, x: np.ndarray, mob: Mobility):
        self.x = x
        self.n_sites = x.shape[1]
        self.l = (self.n_sites - 1) // 2
        self.origin = self.l
        a, xa = mobility_field(x, mob, periodic=False)
        self.a = np.full(x.shape, np.nan)
        self.xa = np.full(x.shape, np.nan)
        self.a[:, 1:-1] = a
        self.xa[:, 1:-1] = xa

    def lap(self, j: int) -> np.ndarray:
        return self.x[:, j - 1] - 2.0 * self.x[:, j] + self.x[:, j + 1]


@dataclass(frozen=True)
class FluxForm:
    """Centered local function ``f = sum_m X_m^*(h_m)`` given by its fluxes.

    Parameters
    ----------
    flux : callable
        ``flux(box, c) -> {m: h_m}`` for the shift with center column ``c``;
        ``m`` is the stencil offset relative to ``c`` and ``h_m`` an array
        over samples.
    reach : (int, int)
        Sites touched by ``f`` relative to its center, stencil neighbours
        included.
    value : callable, optional
        Explicit ``f(box, c)``; needed for Green-Kubo estimates.
    label : str
    """

    flux: Callable
    reach: tuple[int, int]
    value: Callable | None = None
    label: str = "f"

    def __add__(self, other: "FluxForm") -> "FluxForm":
        return combine([(1.0, self), (1.0, other)])

    def __sub__(self, other: "FluxForm") -> "FluxForm":
        return combine([(1.0, self), (-1.0, other)])

    def __mul__(self, s: float) -> "FluxForm":
        return combine([(float(s), self)])

    __rmul__ = __mul__

    def __neg__(self) -> "FluxForm":
        return combine([(-1.0, self)])


def combine(parts: Sequence[tuple[float, FluxForm]]) -> FluxForm:
    """Linear combination ``sum_i s_i f_i`` of flux forms."""
    parts = [(float(s), f) for s, f in parts]

    def flux(box, c):
        out: dict[int, np.ndarray] = {}
        for s, f in parts:
            for m, h in f.flux(box, c).items():
                out[m] = out.get(m, 0.0) + s * h
        return out

    value = None
    if all(f.value is not None for _, f in parts):
        def value(box, c):
            return sum(s * f.value(box, c) for s, f in parts)

    reach = (min(f.reach[0] for _, f in parts), max(f.reach[1] for _, f in parts))
    label = " + ".join(f"{s:g}*({f.label})" for s, f in parts)
    return FluxForm(flux, reach, value, label)


def current_form() -> FluxForm:
    """The current ``w = a Delta x - X a = X_0^*(1)``."""

    def flux(box, c):
        return {0: np.ones(box.x.shape[0])}

    def value(box, c):
        return box.a[:, c] * box.lap(c) - box.xa[:, c]

    return FluxForm(flux, (-1, 1), value, "w")


def laplacian_form() -> FluxForm:
    """The slope Laplacian ``Delta x = X_0^*(1/a)``."""

    def flux(box, c):
        return {0: 1.0 / box.a[:, c]}

    def value(box, c):
        return box.lap(c)

    return FluxForm(flux, (-1, 1), value, "lap")


def generator_form(feature: Feature) -> FluxForm:
    """``L g = -1/2 sum_m X_m^*(X_m g)`` for a basis feature ``g``."""
    lo, hi = feature.span

    def flux(box, c):
        _, grad = feature.value_and_grad(box.x, c)
        out = {}
        for m in range(lo - 1, hi + 2):
            p = c + m
            xg = grad.get(p - 1, 0.0) - 2.0 * grad.get(p, 0.0) + grad.get(p + 1, 0.0)
            out[m] = -0.5 * np.broadcast_to(xg, (box.x.shape[0],))
        return out

    return FluxForm(flux, (lo - 2, hi + 2), None, f"L[{feature.label()}]")


def bulk_shift(l: int) -> int:
    """``l - floor(sqrt(l))``, the half-width of the bulk shift range."""
    return l - math.isqrt(l)


def _shifts(l: int, reaches: Iterable[tuple[int, int]]) -> list[int]:
    l1 = bulk_shift(l)
    lo = min(r[0] for r in reaches)
    hi = max(r[1] for r in reaches)
    js = [j for j in range(-l1, l1 + 1) if j + lo >= -l and j + hi <= l]
    if not js:
        raise ValueError(f"no bulk shift fits the box at l={l}")
    return js


def _flux_field(form: FluxForm, box: _Box, shifts: Sequence[int]) -> np.ndarray:
    # Column p of the result is the stencil p - l + 1, i.e. interior column p + 1.
    n = box.x.shape[0]
    out = np.zeros((n, box.n_sites - 2))
    for j in shifts:
        c = box.origin + j
        for m, h in form.flux(box, c).items():
            out[:, c + m - 1] += h
    return out


def _trial_stencils(feature: Feature, box: _Box, shifts: Sequence[int]) -> np.ndarray:
    # X_m of G = sum_j tau^j g at every interior stencil.
    grad = np.zeros(box.x.shape)
    for j in shifts:
        _, gr = feature.value_and_grad(box.x, box.origin + j)
        for col, gj in gr.items():
            grad[:, col] += gj
    return grad[:, :-2] - 2.0 * grad[:, 1:-1] + grad[:, 2:]


@dataclass(frozen=True)
class GalerkinPairing:
    """Galerkin resolvent pairings ``<(-L_l)^{-1} F_a, F_b>`` between flux forms.

    ``values[a, b]`` carries the requested normalization; ``stderr`` is the
    jackknife error over sample batches.
    """

    values: np.ndarray
    stderr: np.ndarray
    l: int
    shifts: tuple[int, ...]
    normalization: float
    n_samples: int


def galerkin_pairing(forms: Sequence[FluxForm], l: int, sampler: Callable, n_samples: int, mob: Mobility, *,
                     trial: BasisSpec | None = None, normalization: str = "bulk", n_batches: int = 20,
                     chunk: int = 20_000, ridge: float = RIDGE) -> GalerkinPairing:
    """Galerkin estimate of the resolvent pairings of bulk sums of flux forms.

    Parameters
    ----------
    forms : sequence of FluxForm
        Each ``f`` enters as ``F = sum_{j in J} tau^j f`` with ``J`` the bulk
        shifts ``|j| <= l - floor(sqrt l)`` whose support fits the box.
    l : int
        Box half-width, window ``2l+1``.
    sampler : callable
        ``sampler(m) -> (m, 2l+1)`` windows from the reference measure.
    trial : BasisSpec, optional
        Extra trial functions ``sum_{j in J} tau^j g_k``; linear functions
        are always included.
    normalization : {"bulk", "l"}
        Divide by ``|J|/2`` (bulk) or by ``l`` (the CLT-variance definition).
    """
    mob = parse_mobility(mob)
    trial = BasisSpec.empty() if trial is None else trial
    reaches = [f.reach for f in forms] + [generator_form(g).reach for g in trial.features]
    shifts = _shifts(l, reaches)
    ns = 2 * l - 1
    kt = trial.size
    kk = ns + kt
    nf = len(forms)
    edges = np.linspace(0, n_samples, n_batches + 1).astype(int)
    sa = np.zeros((n_batches, kk, kk))
    sb = np.zeros((n_batches, kk, nf))
    counts = np.diff(edges)
    for bidx in range(n_batches):
        done = edges[bidx]
        while done < edges[bidx + 1]:
            m = min(chunk, edges[bidx + 1] - done)
            box = _Box(np.asarray(sampler(m), dtype=float), mob)
            a = box.a[:, 1:-1]
            hf = np.stack([_flux_field(f, box, shifts) for f in forms], axis=2)  # (m, ns, nf)
            xg = (np.stack([_trial_stencils(g, box, shifts) for g in trial.features], axis=2)
                  if kt else np.zeros((m, ns, 0)))
            a_sum = a.sum(axis=0)
            sa[bidx, np.arange(ns), np.arange(ns)] += 0.5 * a_sum
            if kt:
                cross = 0.5 * np.einsum("mp,mpk->pk", a, xg)
                sa[bidx, :ns, ns:] += cross
                sa[bidx, ns:, :ns] += cross.T
                sa[bidx, ns:, ns:] += 0.5 * np.einsum("mp,mpk,mpq->kq", a, xg, xg)
                sb[bidx, ns:, :] += np.einsum("mp,mpk,mpf->kf", a, xg, hf)
            sb[bidx, :ns, :] += np.einsum("mp,mpf->pf", a, hf)
            done += m
    scale = 2.0 / len(shifts) if normalization == "bulk" else 1.0 / l
    if normalization not in ("bulk", "l"):
        raise ValueError("normalization must be 'bulk' or 'l'")

    def pairing(mask):
        w = counts[mask].sum()
        amat = sa[mask].sum(axis=0) / w
        bmat = sb[mask].sum(axis=0) / w
        sol, _ = _ridge_solve(amat, bmat, ridge)
        return scale * bmat.T @ sol

    full = pairing(np.ones(n_batches, bool))
    jack = np.array([pairing(np.arange(n_batches) != i) for i in range(n_batches)])
    err = np.sqrt((n_batches - 1) / n_batches * ((jack - jack.mean(axis=0)) ** 2).sum(axis=0))
    return GalerkinPairing(full, err, l, tuple(shifts), scale, int(n_samples))


# ---------------------------------------------------------------------------
# CLT variance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VarianceEstimate:
    """Estimate of ``V_l(f, y) = (1/l) <(-L_l)^{-1} F, F>``.

    ``method`` is ``"green-kubo"`` or ``"variational-lower"``.  ``t_max`` is
    the truncation time of the Green-Kubo integral (0 for the variational
    bound).  ``cross_check`` holds the other method's estimate when both ran.
    """

    value: float
    stderr: float
    l: int
    t_max: float
    method: str
    flagged: bool = False
    cross_check: "VarianceEstimate | None" = None
    details: dict = field(default_factory=dict, repr=False)

    @property
    def consistent(self) -> bool:
        """Green-Kubo is not below the variational lower bound by more than 3 stderr."""
        if self.cross_check is None:
            return True
        gk, vl = (self, self.cross_check) if self.method == "green-kubo" else (self.cross_check, self)
        return gk.value >= vl.value - 3.0 * math.hypot(gk.stderr, vl.stderr)


def _gk_integral(ac, dt_lag: float, start: int = 0) -> tuple[np.ndarray, int, bool, float]:
    """Per-batch integrals of ``C`` from lag ``start`` to a truncation lag, plus an exponential tail.

    The truncation lag is the first lag after ``start`` where three
    consecutive values of ``|C|`` fall below their batch stderr.  The tail
    ``C(cut)/rate`` uses a single-exponential rate fitted, with stderr
    weights, on the lags between ``start`` and the cut where ``C`` is
    resolved above twice its stderr.
    """
    vals, err = ac.values, ac.stderr
    n = vals.size
    below = np.abs(vals) < err
    cut = None
    for k in range(max(start, 1), n - 2):
        if below[k] and below[k + 1] and below[k + 2]:
            cut = k
            break
    flagged = cut is None
    if cut is None:
        cut = n - 1
    lags = np.arange(start, cut)
    good = lags[vals[lags] > 2.0 * err[lags]]
    rate = 0.0
    if good.size >= 2:
        slope = np.polyfit(good * dt_lag, np.log(vals[good]), 1, w=vals[good] / err[good])[0]
        rate = -slope if slope < 0 else 0.0
    per = np.zeros(ac.batches.shape[0])
    if cut > start:
        w = np.full(cut - start + 1, dt_lag)
        w[0] = w[-1] = 0.5 * dt_lag
        per = ac.batches[:, start : cut + 1] @ w
    if rate > 0:
        per = per + ac.batches[:, cut] / rate
    return per, cut, flagged, rate


def clt_variance(form: FluxForm, l: int, y: ConservedPair, rng: np.random.Generator, *, mob: Mobility,
                 method: str = "both", dt: float | None = None, max_lag: int = 400, sample_every: int = 4,
                 n_samples: int = 200_000, n_batches: int = 20, trial: BasisSpec | None = None,
                 n_variational: int = 100_000, alpha: float | None = None, t_split: float = 5.0,
                 fine_dt: float = 0.01, n_fine: int = 400_000) -> VarianceEstimate:
    """CLT variance of ``f`` under the box dynamics on ``2l+1`` sites at fixed ``y``.

    Parameters
    ----------
    form : FluxForm
        Centered local observable.  Green-Kubo needs ``form.value``.
    l : int
        Box half-width, ``l >= 4``.
    y : ConservedPair
        Conserved block mean and linear mean of the box.
    method : {"both", "green-kubo", "variational-lower"}
    dt, max_lag, sample_every, n_samples, n_batches
        Green-Kubo run: box step, maximal lag (in recorded samples), record
        spacing, series length and batch count.
    t_split, fine_dt, n_fine
        The autocorrelation first falls steeply through the fast modes.  A
        trapezoid rule on the coarse lag grid overestimates that part, so
        ``[0, t_split]`` is integrated from a separate run with step
        ``fine_dt`` recorded at every step (``n_fine`` samples).  The coarse
        run covers ``[t_split, t_max]`` and the tail.
    trial : BasisSpec, optional
        Extra trial functions for the variational bound.

    Returns
    -------
    VarianceEstimate
        The Green-Kubo estimate with the variational bound attached as
        ``cross_check`` when ``method="both"``.

    Raises
    ------
    ValueError
        If ``l < 4`` or the observable is not centered under the canonical
        measure (Monte Carlo pre-test at 5 stderr).
    """
    from . import sim

    if l < 4:
        raise ValueError("clt_variance requires l >= 4")
    if method not in ("both", "green-kubo", "variational-lower"):
        raise ValueError(f"unknown method {method!r}")
    mob = parse_mobility(mob)
    y = y if isinstance(y, ConservedPair) else ConservedPair(*y)
    tilt = y.y1 if alpha is None else alpha
    spec = CanonicalSpec(y, l, tilt)
    shifts = _shifts(l, [form.reach])

    def observable(windows):
        box = _Box(np.asarray(windows, dtype=float), mob)
        return sum(form.value(box, box.origin + j) for j in shifts)

    # Centering pre-test under the canonical measure.
    if form.value is not None:
        probe = observable(sample_canonical(spec, rng, 20_000))
        mean, se = float(probe.mean()), float(probe.std(ddof=1) / math.sqrt(probe.size))
        if abs(mean) > 5.0 * se + 1e-12:
            raise ValueError(f"observable is not centered under the canonical measure (mean {mean:.3g} +- {se:.2g})")

    vl = None
    if method in ("both", "variational-lower"):
        gp = galerkin_pairing([form], l, lambda m: sample_canonical(spec, rng, m), n_variational, mob,
                              trial=trial, normalization="l", n_batches=n_batches)
        vl = VarianceEstimate(float(gp.values[0, 0]), float(gp.stderr[0, 0]), l, 0.0, "variational-lower",
                              details={"shifts": gp.shifts})
        if method == "variational-lower":
            return vl
    if form.value is None:
        raise ValueError("Green-Kubo needs an explicit observable value")
    dt = sim.box_dt_limit(mob) if dt is None else dt
    dt_lag = dt * sample_every
    # The split snaps up to the coarse lag grid; the fine step divides it exactly.
    start = int(math.ceil(t_split / dt_lag - 1e-9))
    per = np.zeros(n_batches)
    if start > 0:
        t_split = start * dt_lag
        fine_lags = max(1, int(round(t_split / fine_dt)))
        fine_dt = t_split / fine_lags
        ac_f = sim.autocorrelation(observable, l, mob, fine_dt, fine_lags, n_fine, rng, y=y, alpha=tilt,
                                   sample_every=1, n_batches=n_batches)
        w = np.full(fine_lags + 1, fine_dt)
        w[0] = w[-1] = 0.5 * fine_dt
        per = ac_f.batches @ w
    ac = sim.autocorrelation(observable, l, mob, dt, max_lag, n_samples, rng, y=y, alpha=tilt,
                             sample_every=sample_every, n_batches=n_batches)
    tail, cut, flagged, rate = _gk_integral(ac, dt_lag, start)
    # The two runs are independent, so batch-wise sums keep the combined scatter.
    per = (per + tail) / l
    t_max = cut * dt_lag
    log.info("green-kubo l=%d: truncation at %.4g (lag %d), tail rate %.4g, flagged=%s", l, t_max, cut, rate, flagged)
    return VarianceEstimate(
        value=float(per.mean()),
        stderr=float(per.std(ddof=1) / math.sqrt(per.size)),
        l=l,
        t_max=t_max,
        method="green-kubo",
        flagged=flagged,
        cross_check=vl,
        details={"tail_rate": rate, "cut": cut, "acf": ac, "shifts": tuple(shifts)},
    )


# ---------------------------------------------------------------------------
# Semi-inner product
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SemiInnerEstimate:
    """Extrapolated semi-inner product ``<<f, g>>_alpha``.

    ``value`` is the intercept ``v_inf`` of the fit ``v_l = v_inf + c/sqrt(l)``
    and ``band`` its one-sigma fit uncertainty.  ``flagged`` marks fits whose
    residuals exceed 3 standard errors.
    """

    value: float
    band: float
    slope: float
    l_grid: tuple[int, ...]
    per_l: np.ndarray
    per_l_stderr: np.ndarray
    flagged: bool


def _extrapolate(ls, v, s) -> tuple[float, float, float, bool]:
    ls = np.asarray(ls, dtype=float)
    # Errors below the ridge's relative bias are not resolvable.
    s = np.maximum(np.asarray(s, dtype=float), 10.0 * RIDGE * (1.0 + np.abs(v)))
    design = np.column_stack([np.ones_like(ls), 1.0 / np.sqrt(ls)])
    if ls.size == 1:
        return float(v[0]), float(s[0]), 0.0, False
    w = 1.0 / s
    coef, *_ = np.linalg.lstsq(design * w[:, None], v * w, rcond=None)
    cov = np.linalg.inv((design * w[:, None] ** 2).T @ design)
    resid = (v - design @ coef) / s
    flagged = bool(ls.size > 2 and np.max(np.abs(resid)) > 3.0)
    return float(coef[0]), float(math.sqrt(cov[0, 0])), float(coef[1]), flagged


def semi_inner(f: FluxForm, g: FluxForm, alpha: float, l_grid: Sequence[int], rng: np.random.Generator, *,
               mob: Mobility, n_samples: int = 100_000, trial: BasisSpec | None = None,
               n_batches: int = 20) -> SemiInnerEstimate:
    """``<<f, g>>_alpha`` by Galerkin resolvent pairings extrapolated in ``l``.

    At each ``l`` the pairing is taken under ``gc(alpha)`` on ``2l+1``
    sites.  That is the canonical measure averaged over the conserved pair
    drawn from its grand canonical law, so the iterated limit
    ``y_k -> alpha`` is realized without a second extrapolation axis.  The
    bulk normalization ``2/|J|`` replaces ``1/l``; the two agree as
    ``l -> infinity``.
    """
    mob = parse_mobility(mob)
    vals, errs = [], []
    for l in l_grid:
        width = 2 * l + 1
        gp = galerkin_pairing([f, g], l, lambda m: sample_gc(alpha, width, rng, m), n_samples, mob,
                              trial=trial, n_batches=n_batches)
        vals.append(0.5 * (gp.values[0, 1] + gp.values[1, 0]))
        errs.append(max(gp.stderr[0, 1], gp.stderr[1, 0]))
    vals, errs = np.asarray(vals), np.asarray(errs)
    v, band, slope, flagged = _extrapolate(list(l_grid), vals, errs)
    return SemiInnerEstimate(v, band, slope, tuple(int(x) for x in l_grid), vals, errs, flagged)


# ---------------------------------------------------------------------------
# Fluctuation-dissipation residual
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResidualEstimate:
    """``<<w - a_hat Delta x - L f>>^2 = 4 (E[a (1 + Phi.c)^2] - a_hat)``."""

    value: float
    stderr: float
    basis_value: AHatEstimate
    a_hat: float
    inconsistent: bool


def fd_residual(alpha: float, basis: BasisSpec, rng: np.random.Generator, *, mob: Mobility, a_hat,
                n_samples: int = 200_000) -> ResidualEstimate:
    """Fluctuation-dissipation residual of the best ``f`` in the span of ``basis``.

    Parameters
    ----------
    a_hat : AHatEstimate or (value, stderr)
        Reference transport coefficient, usually from a richer basis.

    Returns
    -------
    ResidualEstimate
        ``inconsistent`` is set when the residual is negative beyond 3
        combined stderr.
    """
    ref_v, ref_s = tuple(a_hat)
    est = estimate_a_hat(alpha, basis, n_samples, rng, mob)
    val = 4.0 * (est.value - ref_v)
    se = 4.0 * math.hypot(est.stderr, ref_s)
    return ResidualEstimate(val, se, est, float(ref_v), bool(val < -3.0 * se))


# ---------------------------------------------------------------------------
# Transport table
# ---------------------------------------------------------------------------

_TABLE_MAGIC = "# soshydro transport table v1"


@dataclass(frozen=True)
class TransportTable:
    """Tabulated ``a_hat`` on a uniform grid with monotone cubic interpolation.

    Values outside the grid clamp to the endpoint values; every clamped
    evaluation is logged as a warning.
    """

    alpha: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    mobility: str
    basis_digest: str
    _interp: Callable = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        v = np.asarray(self.values, dtype=float)
        s = np.asarray(self.stderr, dtype=float)
        if a.ndim != 1 or a.size < 2 or v.shape != a.shape or s.shape != a.shape:
            raise ValueError("table needs matching 1-D alpha, values and stderr with >= 2 points")
        if not np.all(np.diff(a) > 0):
            raise ValueError("alpha grid must be increasing")
        if not np.allclose(np.diff(a), a[1] - a[0], rtol=1e-9, atol=1e-12):
            raise ValueError("alpha grid must be uniform")
        if not np.all(v > 0):
            raise ValueError("transport values must be positive")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "stderr", s)
        object.__setattr__(self, "_interp", PchipInterpolator(a, v, extrapolate=False))

    @classmethod
    def constant(cls, c: float, lo: float = -3.0, hi: float = 3.0, n: int = 25,
                 mobility: str | None = None) -> "TransportTable":
        """Flat table at ``c`` (the gradient case)."""
        grid = np.linspace(lo, hi, n)
        label = mobility if mobility is not None else f"constant(c={float(c)!r})"
        return cls(grid, np.full(n, float(c)), np.zeros(n), label, BasisSpec.empty().digest())

    def __call__(self, m) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        lo, hi = self.alpha[0], self.alpha[-1]
        out_of_range = (m < lo) | (m > hi)
        if np.any(out_of_range):
            log.warning("transport table clamped %d value(s) outside [%g, %g]", int(out_of_range.sum()), lo, hi)
        out = self._interp(np.clip(m, lo, hi))
        return out

    def clamps(self, m) -> int:
        m = np.asarray(m, dtype=float)
        return int(((m < self.alpha[0]) | (m > self.alpha[-1])).sum())

    @property
    def bounds(self) -> tuple[float, float]:
        return float(self.values.min()), float(self.values.max())

    def to_text(self) -> str:
        lines = [
            _TABLE_MAGIC,
            f"mobility: {self.mobility}",
            f"basis: {self.basis_digest}",
            f"grid: {float(self.alpha[0])!r} {float(self.alpha[-1])!r} {self.alpha.size}",
            "# alpha a_hat stderr",
        ]
        lines += [f"{a!r} {v!r} {s!r}" for a, v, s in zip(self.alpha.tolist(), self.values.tolist(),
                                                          self.stderr.tolist())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TransportTable":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != _TABLE_MAGIC:
            raise ValueError("not a soshydro transport table (bad header)")
        meta = {}
        rows = []
        for ln in lines[1:]:
            if ln.startswith("#"):
                continue
            if ":" in ln:
                key, val = ln.split(":", 1)
                meta[key.strip()] = val.strip()
            else:
                rows.append([float(t) for t in ln.split()])
        for key in ("mobility", "basis", "grid"):
            if key not in meta:
                raise ValueError(f"transport table is missing the {key!r} header")
        arr = np.array(rows, dtype=float)
        lo, hi, n = meta["grid"].split()
        if arr.shape != (int(n), 3) or arr[0, 0] != float(lo) or arr[-1, 0] != float(hi):
            raise ValueError("transport table rows do not match the grid header")
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], meta["mobility"], meta["basis"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "TransportTable":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def check_mobility(self, mob: Mobility | str) -> None:
        """Raise if the table was built for a different mobility."""
        label = parse_mobility(mob).label
        if label != self.mobility:
            raise ValueError(f"transport table was built for {self.mobility}, not {label}")

    def smoothness(self) -> np.ndarray:
        """Deviation of each interior value from its four-neighbour cubic interpolant, in stderr units."""
        v, s = self.values, self.stderr
        n = v.size
        out = np.zeros(n)
        coef = np.array([-1.0 / 6.0, 2.0 / 3.0, 2.0 / 3.0, -1.0 / 6.0])
        for i in range(2, n - 2):
            nb = np.array([v[i - 2], v[i - 1], v[i + 1], v[i + 2]])
            sn = np.array([s[i - 2], s[i - 1], s[i + 1], s[i + 2]])
            se = math.sqrt(s[i] ** 2 + float(np.sum((coef * sn) ** 2)))
            out[i] = abs(v[i] - coef @ nb) / se if se > 0 else 0.0
        return out


def tabulate(alpha_grid, basis: BasisSpec, rng: np.random.Generator, *, mob: Mobility, n_samples: int = 200_000,
             validate: bool = True) -> TransportTable:
    """Tabulate ``a_hat`` over a uniform grid (default use: 25 points on [-3, 3]).

    Each entry is checked against the quadrature Jensen bounds with a
    3-stderr slack.

    Raises
    ------
    SandwichError
        If an entry violates the bounds; the offending table is attached.
    """
    mob = parse_mobility(mob)
    grid = np.asarray(alpha_grid, dtype=float)
    if mob.is_constant:
        c = float(mob.kernel_param)
        return TransportTable(grid, np.full(grid.size, c), np.zeros(grid.size), mob.label, basis.digest())
    vals, errs = [], []
    for a in grid:
        est = estimate_a_hat(float(a), basis, n_samples, rng, mob)
        vals.append(est.value)
        errs.append(est.stderr)
    table = TransportTable(grid, np.array(vals), np.array(errs), mob.label, basis.digest())
    if validate:
        lower, upper = a_hat_bounds_quadrature(grid, mob)
        bad = (table.values < lower - 3 * table.stderr) | (table.values > upper + 3 * table.stderr)
        if np.any(bad):
            idx = int(np.flatnonzero(bad)[0])
            raise SandwichError(f"a_hat({grid[idx]:g}) = {table.values[idx]:.6g} outside "
                                f"[{lower[idx]:.6g}, {upper[idx]:.6g}]", table)
    return table
