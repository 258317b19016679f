"""Pure numpy steppers with the same contract as the compiled kernels.

Gaussian increments are drawn per step as ``rng.standard_normal(n_stencils)``
(followed by ``rng.random(n_stencils)`` for the Metropolis sweep with a
non-constant mobility), which consumes the bit generator in the same order as
the compiled kernels.  The periodic semi-implicit solve uses a dense Cholesky
factorization; the box solve uses a banded one.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solveh_banded

from .lattice import Mobility, mobility_field, stencil_matrix

__all__ = ["run_periodic", "run_box"]


def _bond(x, j, jm, jp, mob, constant, tau, g, u, noisy, fe):
    """Metropolis-adjusted move along stencil ``j``; returns 1 on rejection."""
    xm, x0, xp = x[jm], x[j], x[jp]
    mu = -(xm - 2.0 * x0 + xp) / 6.0
    a0 = float(mob.func(xm, x0, xp))
    r0 = (1.0 - 1.5 * a0 * tau) / (1.0 + 1.5 * a0 * tau)
    m0 = mu * (1.0 - r0)
    a_post = a0
    rej = 0
    if noisy:
        v0 = (1.0 - r0 * r0) / 6.0
        sp = m0 + np.sqrt(v0) * g
        if not constant:
            a1 = float(mob.func(xm + sp, x0 - 2.0 * sp, xp + sp))
            r1 = (1.0 - 1.5 * a1 * tau) / (1.0 + 1.5 * a1 * tau)
            v1 = (1.0 - r1 * r1) / 6.0
            m1 = mu * (1.0 - r1)
            ratio = np.sqrt(v0 / v1) * np.exp(0.5 * (sp - m0) * (sp - m0) / v0 - 0.5 * (sp - m1) * (sp - m1) / v1)
            if u < ratio:
                a_post = a1
            else:
                sp = 0.0
                rej = 1
    else:
        sp = m0
    d = sp - fe * a_post
    if d != 0.0:
        x[jm] = xm + d
        x[j] = x0 - 2.0 * d
        x[jp] = xp + d
    return rej


def _sweep(x, mob, periodic, forward, tau, g, u, noisy, fe):
    n = x.shape[0]
    constant = mob.is_constant
    lo, hi = (0, n) if periodic else (1, n - 1)
    order = range(lo, hi) if forward else range(hi - 1, lo - 1, -1)
    rej = 0
    for j in order:
        jm = (j - 1) % n
        jp = (j + 1) % n
        rej += _bond(x, j, jm, jp, mob, constant, tau, g[j - lo], 0.0 if u is None else u[j - lo], noisy,
                     0.0 if fe is None else fe[j])
    return rej


def _draw(rng, m, mob, noisy):
    g = rng.standard_normal(m)
    u = rng.random(m) if (noisy and not mob.is_constant) else None
    return g, u



def _d2_periodic(v):
    return np.roll(v, 1) - 2.0 * v + np.roll(v, -1)


def _d2_padded(q):
    # Transpose of the interior stencil matrix applied to a vector that
    # vanishes at both end sites.
    d = -2.0 * q
    d[1:] += q[:-1]
    d[:-1] += q[1:]
    return d


def _check(x, out, n_steps, stride):
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if out.shape[0] < n_steps // stride or (out.shape[0] > 0 and out.shape[1] != x.shape[0]):
        raise ValueError("snapshot buffer has the wrong shape")


def run_periodic(x, mob: Mobility, n_steps, c4, c2, ns, field, scheme, rng, out, stride, step0=0):
    """Numpy counterpart of ``_kernels.run_periodic`` taking a ``Mobility``."""
    n = x.shape[0]
    if n < 6:
        raise ValueError("periodic stepping requires N >= 6")
    _check(x, out, n_steps, stride)
    h = 0.5 * c4
    lin = 1.0 if scheme == 0 else 0.5
    frozen = mob.is_constant
    ef = None if field is None else np.asarray(field, dtype=float)
    c = stencil_matrix(n, periodic=True)
    state = x.copy()
    fac = None
    if frozen:
        a, xa = mobility_field(state, mob, periodic=True)
        sqa = np.sqrt(a)
        if scheme == 1:
            fac = cho_factor(np.eye(n) + h * (c.T * a) @ c)
    noisy = ns != 0.0
    fe = None if ef is None else c2 * ef
    rec = 0
    bad = -1
    rej = 0
    for step in range(n_steps):
        if scheme == 2:
            g, u = _draw(rng, n, mob, noisy)
            rej += _sweep(state, mob, True, (step0 + step) % 2 == 0, 2.0 * c4, g, u, noisy, fe)
        else:
            g = rng.standard_normal(n)
            if not frozen:
                a, xa = mobility_field(state, mob, periodic=True)
                sqa = np.sqrt(a)
            q = c4 * (lin * a * _d2_periodic(state) - xa) + ns * sqa * g
            if ef is not None:
                q = q + c2 * ef * a
            rhs = state - _d2_periodic(q)
            if scheme == 0:
                state = rhs
            else:
                if not frozen:
                    fac = cho_factor(np.eye(n) + h * (c.T * a) @ c)
                z = cho_solve(fac, rhs)
                state = rhs - _d2_periodic(h * a * _d2_periodic(z))
        if not np.isfinite(state.sum()):
            bad = step
            break
        if (step + 1) % stride == 0:
            out[rec] = state
            rec += 1
    x[:] = state
    return rec, bad, rej


def _box_bands(a_full, h):
    n = a_full.shape[0]
    ap = np.concatenate([[0.0], a_full, [0.0]])
    d0 = 1.0 + h * (ap[:-2] + 4.0 * a_full + ap[2:])
    e1 = -2.0 * h * (a_full + ap[2:])
    e2 = h * ap[2:]
    ab = np.zeros((3, n))
    ab[2] = d0
    ab[1, 1:] = e1[:-1]
    ab[0, 2:] = e2[:-2]
    return ab


def run_box(x, mob: Mobility, n_steps, dt, scheme, rng, out, stride, step0=0):
    """Numpy counterpart of ``_kernels.run_box`` taking a ``Mobility``."""
    n = x.shape[0]
    if n < 5:
        raise ValueError("box stepping requires 2l+1 >= 5 sites")
    _check(x, out, n_steps, stride)
    c4 = 0.5 * dt
    ns = np.sqrt(dt)
    h = 0.25 * dt
    lin = 1.0 if scheme == 0 else 0.5
    frozen = mob.is_constant
    state = x.copy()
    a_full = np.zeros(n)
    ab = None
    if frozen:
        a, xa = mobility_field(state, mob, periodic=False)
        a_full[1:-1] = a
        sqa = np.sqrt(a)
        if scheme == 1:
            ab = _box_bands(a_full, h)
    q = np.zeros(n)
    rec = 0
    bad = -1
    rej = 0
    for step in range(n_steps):
        if scheme == 2:
            g, u = _draw(rng, n - 2, mob, True)
            rej += _sweep(state, mob, False, (step0 + step) % 2 == 0, dt, g, u, True, None)
        else:
            g = rng.standard_normal(n - 2)
            if not frozen:
                a, xa = mobility_field(state, mob, periodic=False)
                a_full[1:-1] = a
                sqa = np.sqrt(a)
            lap = state[:-2] - 2.0 * state[1:-1] + state[2:]
            q[1:-1] = c4 * (lin * a * lap - xa) + ns * sqa * g
            rhs = state - _d2_padded(q)
            if scheme == 0:
                state = rhs
            else:
                if not frozen:
                    ab = _box_bands(a_full, h)
                z = solveh_banded(ab, rhs)
                lz = z[:-2] - 2.0 * z[1:-1] + z[2:]
                q[1:-1] = h * a * lz
                state = rhs - _d2_padded(q)
        if not np.isfinite(state.sum()):
            bad = step
            break
        if (step + 1) % stride == 0:
            out[rec] = state
            rec += 1
    x[:] = state
    return rec, bad, rej
