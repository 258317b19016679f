"""Equilibrium measures: exact Gaussian sampling and Monte Carlo expectations.

With ``V(x) = x**2/2`` the grand canonical measure at tilt ``alpha`` is the
product of ``N(alpha, 1)`` laws.  The canonical measure of a box conditions
it on the two linear functionals

    y1 = sum_j x_j / (2l+1),   y2 = sum_j j x_j / (l(l+1)),

and because the covariance is the identity the conditional law is obtained
exactly by orthogonally projecting an unconditioned sample onto the affine
constraint set.  The conditional mean profile is therefore affine in ``j``:

    E[x_j] = y1 + 3 j y2 / (2l+1).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .lattice import ConservedPair, Mobility

__all__ = [
    "make_rng",
    "McEstimate",
    "CanonicalSpec",
    "sample_gc",
    "sample_canonical",
    "canonical_mean_profile",
    "canonical_covariance",
    "project_canonical",
    "mc_expectation",
    "ensemble_gap",
    "gh_expectation",
    "gc_mean_mobility",
    "gc_mean_inverse_mobility",
]


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, *keys)``.

    Streams are derived with ``SeedSequence(seed, spawn_key=keys)``, so the
    stream of a replica depends only on the experiment seed and its index.
    """
    ss = np.random.SeedSequence(int(seed) % (1 << 64), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class McEstimate:
    """Monte Carlo mean with its standard error (``std / sqrt(n)``)."""

    mean: float
    stderr: float
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("McEstimate requires n >= 2")

    @classmethod
    def from_samples(cls, values) -> "McEstimate":
        v = np.asarray(values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(v)):
            bad = int(np.flatnonzero(~np.isfinite(v))[0])
            raise FloatingPointError(f"non-finite observable value at sample {bad}")
        return cls(float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)), int(v.size))

    def within(self, target: float, k: float = 3.0) -> bool:
        return abs(self.mean - target) <= k * self.stderr


@dataclass(frozen=True)
class CanonicalSpec:
    """Canonical measure of a box of half-width ``l`` at conserved pair ``y``.

    ``alpha`` is the tilt of the grand canonical law that is conditioned; the
    conditional law does not depend on it, but it fixes the sampling origin.
    """

    y: ConservedPair
    l: int
    alpha: float = 0.0

    def __post_init__(self):
        if self.l < 2:
            raise ValueError("canonical measure requires l >= 2")


def sample_gc(alpha: float, n_sites: int, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """I.i.d. ``N(alpha, 1)`` slopes, shape ``(n_sites,)`` or ``(n, n_sites)``."""
    if n_sites < 1:
        raise ValueError("n_sites must be >= 1")
    shape = (n_sites,) if n is None else (n, n_sites)
    return alpha + rng.standard_normal(shape)


@lru_cache(maxsize=64)
def _constraint(l: int):
    n = 2 * l + 1
    j = np.arange(-l, l + 1, dtype=float)
    a = np.vstack([np.full(n, 1.0 / n), j / (l * (l + 1))])
    # A^T (A A^T)^{-1}: both rows are orthogonal, so the Gram matrix is diagonal.
    gram = a @ a.T
    lift = a.T @ np.linalg.inv(gram)
    lift.setflags(write=False)
    a.setflags(write=False)
    return a, lift


def project_canonical(x, y1, y2) -> np.ndarray:
    """Orthogonal projection of windows ``x`` (last axis ``2l+1``) onto ``{y = (y1, y2)}``."""
    x = np.asarray(x, dtype=float)
    l = (x.shape[-1] - 1) // 2
    a, lift = _constraint(l)
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    resid = np.stack([y1 - x @ a[0], y2 - x @ a[1]], axis=-1)
    return x + resid @ lift.T


def sample_canonical(spec: CanonicalSpec, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Exact sample(s) from the canonical measure of a box.

    Draws i.i.d. ``N(alpha, 1)`` slopes and applies the affine orthogonal
    correction enforcing both constraints.

    Returns
    -------
    ndarray, shape ``(2l+1,)`` or ``(n, 2l+1)``
    """
    x = sample_gc(spec.alpha, 2 * spec.l + 1, rng, n)
    return project_canonical(x, spec.y.y1, spec.y.y2)


def canonical_mean_profile(y1: float, y2: float, l: int) -> np.ndarray:
    """Conditional mean ``E[x_j] = y1 + 3 j y2 / (2l+1)`` for ``j = -l..l``."""
    j = np.arange(-l, l + 1, dtype=float)
    return y1 + 3.0 * j * y2 / (2 * l + 1)


def canonical_covariance(l: int) -> np.ndarray:
    """Conditional covariance ``I - A^T (A A^T)^{-1} A`` of the box slopes."""
    a, lift = _constraint(l)
    return np.eye(2 * l + 1) - lift @ a


def mc_expectation(f: Callable, sampler: Callable, n: int, rng: np.random.Generator, batch: int = 65536) -> McEstimate:
    """Mean and standard error of ``f`` over ``n`` independent samples.

    Parameters
    ----------
    f : callable
        Vectorized observable mapping a ``(m, n_sites)`` sample array to ``(m,)``.
    sampler : callable
        ``sampler(rng, m)`` returning ``m`` independent samples.
    n : int
        Number of samples, at least 100.
    """
    if n < 100:
        raise ValueError("mc_expectation requires n >= 100")
    total = 0.0
    total2 = 0.0
    done = 0
    while done < n:
        m = min(batch, n - done)
        v = np.asarray(f(sampler(rng, m)), dtype=float).reshape(-1)
        if not np.all(np.isfinite(v)):
            bad = done + int(np.flatnonzero(~np.isfinite(v))[0])
            raise FloatingPointError(f"non-finite observable value at sample {bad}")
        total += v.sum()
        total2 += np.dot(v, v)
        done += m
    mean = total / n
    var = max(total2 / n - mean * mean, 0.0) * n / (n - 1)
    return McEstimate(float(mean), float(np.sqrt(var / n)), int(n))


def ensemble_gap(f: Callable, k: int, alpha: float, y2: float, s: int, n: int, rng: np.random.Generator) -> McEstimate:
    """Canonical-minus-grand-canonical expectation of a local observable.

    Estimates ``E_{nu^c_{(alpha, y2), k}}[f] - E_{nu^gc_alpha}[f]`` with
    paired samples: each canonical sample is the projection of the grand
    canonical sample it is paired with, so the difference has small
    variance.  The returned estimate is signed; its absolute value is the gap.

    Parameters
    ----------
    f : callable
        Vectorized observable of the sites ``[-s, s]`` (array ``(m, 2s+1)``).
    k : int
        Box half-width, with ``s <= k / 4``.
    """
    if not 4 * s <= k:
        raise ValueError("ensemble_gap requires s <= k/4")
    x = sample_gc(alpha, 2 * k + 1, rng, n)
    xc = project_canonical(x, alpha, y2)
    sl = slice(k - s, k + s + 1)
    d = np.asarray(f(xc[:, sl]), float) - np.asarray(f(x[:, sl]), float)
    return McEstimate.from_samples(d)


# ---------------------------------------------------------------------------
# Gauss-Hermite quadrature oracles
# ---------------------------------------------------------------------------


@lru_cache(maxsize=8)
def _gh_nodes(order: int):
    z, w = np.polynomial.hermite_e.hermegauss(order)
    return z, w / np.sqrt(2.0 * np.pi)


def gh_expectation(func: Callable, alpha, n_vars: int = 3, order: int = 40):
    """Expectation of ``func(x_1, ..., x_n)`` under i.i.d. ``N(alpha, 1)``.

    Tensor-product Gauss-Hermite quadrature; ``alpha`` may be an array, in
    which case the result has its shape.
    """
    z, w = _gh_nodes(order)
    alpha = np.asarray(alpha, dtype=float)
    grids = np.meshgrid(*([z] * n_vars), indexing="ij")
    weight = np.ones_like(grids[0])
    for wi in np.meshgrid(*([w] * n_vars), indexing="ij"):
        weight = weight * wi
    pts = [g.reshape(-1) for g in grids]
    weight = weight.reshape(-1)
    out = np.empty(alpha.shape)
    for idx in np.ndindex(alpha.shape):
        vals = func(*[p + alpha[idx] for p in pts])
        out[idx] = np.dot(np.broadcast_to(vals, weight.shape), weight)
    return out if out.ndim else float(out)


def gc_mean_mobility(mob: Mobility, alpha, order: int = 40):
    """``E_gc[a]`` at tilt ``alpha`` by quadrature."""
    return gh_expectation(mob.func, alpha, 3, order)


def gc_mean_inverse_mobility(mob: Mobility, alpha, order: int = 40):
    """``E_gc[1/a]`` at tilt ``alpha`` by quadrature."""
    return gh_expectation(lambda *x: 1.0 / mob.func(*x), alpha, 3, order)
