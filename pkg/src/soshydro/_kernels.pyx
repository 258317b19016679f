# cython: language_level=3
"""Compiled steppers for the slope SDE.

Both steppers advance the state in place and write a snapshot every
``stride`` steps.  Gaussian increments are drawn through numpy's C random
API from the generator passed in, one per stencil per step in site order,
which is exactly the order of ``rng.standard_normal((steps, n_stencils))``;
the numpy fallback therefore consumes identical streams.

Schemes
-------
0 : explicit Euler-Maruyama.
1 : semi-implicit Crank-Nicolson with the mobility frozen at the start of
    the step.  The linear part ``a * Laplacian`` of the current is averaged
    over the old and new states; the stencil derivative of the mobility, the
    field term and the noise are explicit.  The implicit solve is followed
    by one conservative correction so that the update is always the second
    difference of a per-bond vector.
2 : Metropolis-adjusted bond sweep.  Bonds are visited one at a time,
    alternating the sweep direction between steps.  Bond ``j`` moves the
    state along its stencil, ``x += s c_j``, with an autoregressive proposal
    that leaves the Gaussian law of ``s`` on that line invariant; its
    contraction ``(1 - u/2)/(1 + u/2)``, ``u = 3 a_j tau``, is the
    Crank-Nicolson factor, which makes a full sweep reproduce the exact
    long-wave relaxation rate for constant mobility.  A Metropolis test on
    the mobility at the proposed point makes every bond move exactly
    reversible, so the Gaussian equilibrium is invariant for any mobility.
    Constant mobilities never reject and draw no uniforms.

Per step the kernels draw one normal per stencil, and for scheme 2 with a
non-constant mobility one uniform per stencil after all the normals.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, isfinite
from cpython.pycapsule cimport PyCapsule_GetPointer, PyCapsule_IsValid
from numpy.random cimport bitgen_t
from numpy.random.c_distributions cimport random_standard_normal, random_standard_uniform

cnp.import_array()

cdef const char *_CAPSULE = "BitGenerator"

cdef enum:
    KIND_CONSTANT = 0
    KIND_BUMP = 1


cdef bitgen_t *_bitgen(object rng) except NULL:
    capsule = rng.bit_generator.capsule
    if not PyCapsule_IsValid(capsule, _CAPSULE):
        raise ValueError("invalid bit generator capsule")
    return <bitgen_t *> PyCapsule_GetPointer(capsule, _CAPSULE)


cdef inline void _site_terms(int kind, double p, const double *x, Py_ssize_t n,
                             double *s, double *sp) noexcept nogil:
    cdef Py_ssize_t i
    cdef double v, d
    if kind == KIND_BUMP:
        for i in range(n):
            v = x[i]
            d = 1.0 / (1.0 + v * v)
            s[i] = v * v * d
            sp[i] = 2.0 * v * d * d




cdef struct Border:
    double lb
    double idm
    double idm1


cdef inline void _mobility(int kind, double p, const double *x, Py_ssize_t lo, Py_ssize_t hi,
                           double *s, double *sp, double *a, double *xa,
                           double *sqa) noexcept nogil:
    # Mobility terms on sites lo..hi-1; x, s and sp must be valid on lo-1..hi.
    cdef Py_ssize_t i
    cdef double sq
    if kind == KIND_BUMP:
        for i in range(lo, hi):
            a[i] = 1.0 + p * (s[i - 1] + s[i] + s[i + 1])
            xa[i] = p * (sp[i - 1] - 2.0 * sp[i] + sp[i + 1])
            sqa[i] = sqrt(a[i])
    else:
        sq = sqrt(p)
        for i in range(lo, hi):
            a[i] = p
            xa[i] = 0.0
            sqa[i] = sq


cdef inline void _penta(const double *a, double h, Py_ssize_t n,
                        double *d0, double *e1, double *e2) noexcept nogil:
    # Entries of I + h C^T diag(a) C for a ghost-padded a (a[-1], a[n] valid).
    cdef Py_ssize_t i
    for i in range(n):
        d0[i] = 1.0 + h * (a[i - 1] + 4.0 * a[i] + a[i + 1])
        e1[i] = -2.0 * h * (a[i] + a[i + 1])
        e2[i] = h * a[i + 1]


cdef inline void _band_row(Py_ssize_t j, const double *d0, const double *e1, const double *e2,
                           double *iD, double *L1, double *L2) noexcept nogil:
    cdef double num1, dj
    L2[j] = e2[j - 2] * iD[j - 2]
    num1 = e1[j - 1] - e2[j - 2] * L1[j - 1]
    L1[j] = num1 * iD[j - 1]
    dj = d0[j] - L2[j] * e2[j - 2] - L1[j] * num1
    iD[j] = 1.0 / dj


cdef inline void _band_factor(const double *d0, const double *e1, const double *e2,
                              Py_ssize_t m, double *iD, double *L1, double *L2) noexcept nogil:
    # LDL^T of the symmetric pentadiagonal matrix K[i,i] = d0[i],
    # K[i,i+1] = e1[i], K[i,i+2] = e2[i]; stores 1/D and the two subdiagonals.
    cdef Py_ssize_t j
    iD[0] = 1.0 / d0[0]
    L1[0] = 0.0
    L2[0] = 0.0
    L1[1] = e1[0] * iD[0]
    L2[1] = 0.0
    iD[1] = 1.0 / (d0[1] - L1[1] * e1[0])
    for j in range(2, m):
        _band_row(j, d0, e1, e2, iD, L1, L2)


cdef inline void _band_forward(const double *L1, const double *L2, Py_ssize_t m,
                               const double *b, double *z) noexcept nogil:
    cdef Py_ssize_t j
    z[0] = b[0]
    z[1] = b[1] - L1[1] * z[0]
    for j in range(2, m):
        z[j] = b[j] - L1[j] * z[j - 1] - L2[j] * z[j - 2]


cdef inline void _band_solve(const double *iD, const double *L1, const double *L2,
                             Py_ssize_t m, const double *b, double *z) noexcept nogil:
    cdef Py_ssize_t j
    _band_forward(L1, L2, m, b, z)
    z[m - 1] = z[m - 1] * iD[m - 1]
    z[m - 2] = z[m - 2] * iD[m - 2] - L1[m - 1] * z[m - 1]
    for j in range(m - 3, -1, -1):
        z[j] = z[j] * iD[j] - L1[j + 1] * z[j + 1] - L2[j + 2] * z[j + 2]


cdef inline double _dot_d(const double *u, const double *v, const double *iD, Py_ssize_t m) noexcept nogil:
    cdef Py_ssize_t j
    cdef double acc = 0.0
    for j in range(m):
        acc += u[j] * v[j] / iD[j]
    return acc


cdef void _cyclic_factor(const double *d0, const double *e1, const double *e2, Py_ssize_t n,
                         double *iD, double *L1, double *L2, double *B0, double *B1,
                         Border *bd) noexcept nogil:
    # Symmetric cyclic pentadiagonal LDL^T with the last two unknowns as a
    # dense border (K[i,i+1] = e1[i], K[i,i+2] = e2[i], indices mod n, n >= 6).
    cdef Py_ssize_t m = n - 2, j
    cdef double num1, dm, dm1, lb, acc0, acc1, acc01
    _band_factor(d0, e1, e2, m, iD, L1, L2)
    # Border rows: B_r[j] = (K[r,j] - B_r[j-1] D_{j-1} L1[j] - B_r[j-2] D_{j-2} L2[j]) / D_j,
    # where D_{j-1} L1[j] = e1[j-1] - e2[j-2] L1[j-1] and D_{j-2} L2[j] = e2[j-2].
    B0[0] = e2[m] * iD[0]
    B1[0] = e1[n - 1] * iD[0]
    B0[1] = (0.0 - B0[0] * e1[0]) * iD[1]
    B1[1] = (e2[n - 1] - B1[0] * e1[0]) * iD[1]
    for j in range(2, m):
        num1 = e1[j - 1] - e2[j - 2] * L1[j - 1]
        B0[j] = (0.0 - B0[j - 1] * num1 - B0[j - 2] * e2[j - 2]) * iD[j]
        B1[j] = (0.0 - B1[j - 1] * num1 - B1[j - 2] * e2[j - 2]) * iD[j]
    # K[m, m-2] = e2[m-2], K[m, m-1] = e1[m-1], K[m+1, m-1] = e2[m-1]: add their
    # contributions, which only touch the last two border entries.
    B0[m - 2] += e2[m - 2] * iD[m - 2]
    num1 = e1[m - 2] - e2[m - 3] * L1[m - 2]
    B0[m - 1] = (e1[m - 1] - B0[m - 2] * num1 - B0[m - 3] * e2[m - 3]) * iD[m - 1]
    B1[m - 1] += e2[m - 1] * iD[m - 1]
    acc0 = _dot_d(B0, B0, iD, m)
    acc1 = _dot_d(B1, B1, iD, m)
    acc01 = _dot_d(B0, B1, iD, m)
    dm = d0[m] - acc0
    lb = (e1[m] - acc01) / dm
    dm1 = d0[m + 1] - acc1 - lb * lb * dm
    bd.lb = lb
    bd.idm = 1.0 / dm
    bd.idm1 = 1.0 / dm1


cdef void _cyclic_solve(const double *iD, const double *L1, const double *L2,
                        const double *B0, const double *B1, const Border *bd, Py_ssize_t n,
                        const double *b, double *z) noexcept nogil:
    cdef Py_ssize_t m = n - 2, j
    cdef double y0, y1, zm, zm1
    _band_forward(L1, L2, m, b, z)
    y0 = b[m]
    y1 = b[m + 1]
    for j in range(m):
        y0 -= B0[j] * z[j]
        y1 -= B1[j] * z[j]
    y1 -= bd.lb * y0
    zm1 = y1 * bd.idm1
    zm = y0 * bd.idm - bd.lb * zm1
    z[m - 1] = z[m - 1] * iD[m - 1] - B0[m - 1] * zm - B1[m - 1] * zm1
    z[m - 2] = z[m - 2] * iD[m - 2] - L1[m - 1] * z[m - 1] - B0[m - 2] * zm - B1[m - 2] * zm1
    for j in range(m - 3, -1, -1):
        z[j] = (z[j] * iD[j] - L1[j + 1] * z[j + 1] - L2[j + 2] * z[j + 2]
                - B0[j] * zm - B1[j] * zm1)
    z[m] = zm
    z[m + 1] = zm1


def cyclic_penta_solve(double[::1] d0, double[::1] e1, double[::1] e2, double[::1] b):
    """Solve ``K z = b`` for a symmetric cyclic pentadiagonal ``K``.

    ``K[i,i] = d0[i]``, ``K[i,i+1] = e1[i]``, ``K[i,i+2] = e2[i]`` with
    indices taken modulo ``n``.  Exposed for testing the stepper's solver.
    """
    cdef Py_ssize_t n = d0.shape[0]
    if n < 6:
        raise ValueError("cyclic solve requires n >= 6")
    work = np.zeros((5, n))
    cdef double[:, ::1] w = work
    cdef Border bd
    z = np.zeros(n)
    cdef double[::1] zv = z
    _cyclic_factor(&d0[0], &e1[0], &e2[0], n, &w[0, 0], &w[1, 0], &w[2, 0], &w[3, 0], &w[4, 0], &bd)
    _cyclic_solve(&w[0, 0], &w[1, 0], &w[2, 0], &w[3, 0], &w[4, 0], &bd, n, &b[0], &zv[0])
    return z


def band_penta_solve(double[::1] d0, double[::1] e1, double[::1] e2, double[::1] b):
    """Solve ``K z = b`` for a symmetric (non-cyclic) pentadiagonal ``K``."""
    cdef Py_ssize_t n = d0.shape[0]
    if n < 3:
        raise ValueError("band solve requires n >= 3")
    work = np.zeros((3, n))
    cdef double[:, ::1] w = work
    z = np.zeros(n)
    cdef double[::1] zv = z
    _band_factor(&d0[0], &e1[0], &e2[0], n, &w[0, 0], &w[1, 0], &w[2, 0])
    _band_solve(&w[0, 0], &w[1, 0], &w[2, 0], n, &b[0], &zv[0])
    return z


cdef inline double _s_of(double v) noexcept nogil:
    return v * v / (1.0 + v * v)


cdef inline int _bond(double *X, double *S, Py_ssize_t jm, Py_ssize_t j, Py_ssize_t jp,
                      bint bump, double p, double tau, double g, double uu, bint noisy,
                      double fe, double r_c, double sd_c) noexcept nogil:
    # One Metropolis-adjusted move along stencil j followed by the explicit
    # field shift ``-fe * a``; returns 0 when the proposal is rejected.
    # ``r_c`` and ``sd_c`` are the proposal factor and noise scale for a
    # constant mobility (unused for the bump family).
    cdef double xm = X[jm], x0 = X[j], xp = X[jp]
    cdef double mu = -(xm - 2.0 * x0 + xp) / 6.0
    cdef double a0, a1, r0, r1, v0, v1, sp, m0, m1, ratio, d, a_post
    cdef double sm1 = 0.0, s01 = 0.0, sp1 = 0.0
    cdef int acc = 1
    if bump:
        a0 = 1.0 + p * (S[jm] + S[j] + S[jp])
        r0 = (1.0 - 1.5 * a0 * tau) / (1.0 + 1.5 * a0 * tau)
    else:
        a0 = p
        r0 = r_c
    m0 = mu * (1.0 - r0)
    a_post = a0
    if noisy:
        if bump:
            v0 = (1.0 - r0 * r0) / 6.0
            sp = m0 + sqrt(v0) * g
            sm1 = _s_of(xm + sp)
            s01 = _s_of(x0 - 2.0 * sp)
            sp1 = _s_of(xp + sp)
            a1 = 1.0 + p * (sm1 + s01 + sp1)
            r1 = (1.0 - 1.5 * a1 * tau) / (1.0 + 1.5 * a1 * tau)
            v1 = (1.0 - r1 * r1) / 6.0
            m1 = mu * (1.0 - r1)
            ratio = sqrt(v0 / v1) * exp(0.5 * (sp - m0) * (sp - m0) / v0 - 0.5 * (sp - m1) * (sp - m1) / v1)
            if uu < ratio:
                a_post = a1
            else:
                sp = 0.0
                acc = 0
        else:
            sp = m0 + sd_c * g
    else:
        sp = m0
    d = sp - fe * a_post
    if d != 0.0:
        X[jm] = xm + d
        X[j] = x0 - 2.0 * d
        X[jp] = xp + d
        if bump:
            if d == sp and noisy:
                # Accepted move without a field shift: the proposal already
                # evaluated the new site terms.
                S[jm] = sm1
                S[j] = s01
                S[jp] = sp1
            else:
                S[jm] = _s_of(X[jm])
                S[j] = _s_of(X[j])
                S[jp] = _s_of(X[jp])
    return acc


cdef Py_ssize_t _sweep(double *X, double *S, Py_ssize_t n, bint periodic, bint forward,
                       bint bump, double p, double tau, const double *g, const double *u,
                       bint noisy, const double *fe) noexcept nogil:
    # Visit every stencil once; returns the number of rejections.  Periodic
    # stencils are 0..n-1 (wrapping), box stencils 1..n-2.  g, u and fe are
    # indexed by stencil in site order whatever the direction.
    cdef Py_ssize_t k, j, lo, hi, cnt, rej = 0
    cdef double r_c = 0.0, sd_c = 0.0
    if not bump:
        r_c = (1.0 - 1.5 * p * tau) / (1.0 + 1.5 * p * tau)
        sd_c = sqrt((1.0 - r_c * r_c) / 6.0)
    if periodic:
        lo = 0
        hi = n
    else:
        lo = 1
        hi = n - 1
    cnt = hi - lo
    for k in range(cnt):
        j = lo + k if forward else hi - 1 - k
        if periodic:
            rej += 1 - _bond(X, S, n - 1 if j == 0 else j - 1, j, 0 if j == n - 1 else j + 1,
                             bump, p, tau, g[j - lo], u[j - lo] if bump else 0.0, noisy,
                             fe[j] if fe != NULL else 0.0, r_c, sd_c)
        else:
            rej += 1 - _bond(X, S, j - 1, j, j + 1, bump, p, tau, g[j - lo],
                             u[j - lo] if bump else 0.0, noisy, 0.0, r_c, sd_c)
    return rej


cdef inline void _pad_periodic(double *v, Py_ssize_t n) noexcept nogil:
    # Ghost sites of a buffer padded by one on each side (pointer offset 1).
    cdef Py_ssize_t left = -1
    v[left] = v[n - 1]
    v[n] = v[0]


def _check_args(Py_ssize_t n, Py_ssize_t n_steps, double[:, ::1] out, Py_ssize_t stride, int scheme):
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    if out.shape[0] < n_steps // stride or (out.shape[0] > 0 and out.shape[1] != n):
        raise ValueError("snapshot buffer has the wrong shape")
    if scheme not in (0, 1, 2):
        raise ValueError(f"unknown scheme {scheme}")


def run_periodic(double[::1] x, int kind, double param, Py_ssize_t n_steps,
                 double c4, double c2, double ns, field, int scheme, rng,
                 double[:, ::1] out, Py_ssize_t stride, Py_ssize_t step0=0):
    """Advance a periodic slope field in place.

    Parameters
    ----------
    x : float64 array (N,)
        State, modified in place.
    kind, param : int, float
        Mobility family code and its parameter.
    n_steps : int
    c4, c2, ns : float
        ``dt N^4 / 2``, ``dt N^2 / 2`` and ``N^2 sqrt(dt)``.  ``ns = 0``
        switches the noise off (a testing hook).
    field : float64 array (N,) or None
        Electromigration field at the sites, held fixed during the call.
    scheme : int
        0 explicit, 1 semi-implicit, 2 Metropolis-adjusted bond sweep.
    rng : numpy.random.Generator
    out : float64 array (n_steps // stride, N)
        Snapshot buffer.
    stride : int
    step0 : int
        Global index of the first step; fixes the sweep direction parity.

    Returns
    -------
    (records, bad_step, rejections) : tuple of int
        ``bad_step`` is the first step whose state is not finite, or -1.
    """
    cdef Py_ssize_t n = x.shape[0]
    if n < 6:
        raise ValueError("periodic stepping requires N >= 6")
    _check_args(n, n_steps, out, stride, scheme)
    work = np.zeros((21, n + 2))
    cdef double[:, ::1] w = work
    cdef double *X = &w[0, 1]
    cdef double *s = &w[1, 1]
    cdef double *sp = &w[2, 1]
    cdef double *a = &w[3, 1]
    cdef double *xa = &w[4, 1]
    cdef double *sqa = &w[5, 1]
    cdef double *q = &w[6, 1]
    cdef double *rhs = &w[7, 1]
    cdef double *z = &w[8, 1]
    cdef double *d0 = &w[9, 1]
    cdef double *e1 = &w[10, 1]
    cdef double *e2 = &w[11, 1]
    cdef double *iD = &w[12, 1]
    cdef double *L1 = &w[13, 1]
    cdef double *L2 = &w[14, 1]
    cdef double *B0 = &w[15, 1]
    cdef double *B1 = &w[16, 1]
    cdef double *ef = &w[17, 1]
    cdef double *g = &w[18, 1]
    cdef double *uu = &w[19, 1]
    cdef double *fe = &w[20, 1]
    cdef Border bd
    cdef Py_ssize_t step, i, rec = 0, bad = -1, rej = 0
    cdef bint has_field = field is not None
    cdef bint frozen = kind != KIND_BUMP
    cdef bint noisy = ns != 0.0
    cdef double h = 0.5 * c4, tau = 2.0 * c4, tot, lin, v, dd
    cdef double[::1] fv
    if has_field:
        fv = np.ascontiguousarray(field, dtype=np.float64)
        if fv.shape[0] != n:
            raise ValueError("field has the wrong length")
        for i in range(n):
            ef[i] = fv[i]
            fe[i] = c2 * fv[i]
    cdef bitgen_t *bg = _bitgen(rng)
    lin = 1.0 if scheme == 0 else 0.5
    for i in range(n):
        X[i] = x[i]
    if scheme == 2:
        for i in range(n):
            s[i] = _s_of(X[i])
    elif frozen:
        _mobility(kind, param, X, 0, n, s, sp, a, xa, sqa)
        _pad_periodic(a, n)
        if scheme == 1:
            _penta(a, h, n, d0, e1, e2)
            _cyclic_factor(d0, e1, e2, n, iD, L1, L2, B0, B1, &bd)
    lock = rng.bit_generator.lock
    with lock:
      with nogil:
        for step in range(n_steps):
            for i in range(n):
                g[i] = random_standard_normal(bg)
            if scheme == 2:
                if not frozen and noisy:
                    for i in range(n):
                        uu[i] = random_standard_uniform(bg)
                rej += _sweep(X, s, n, True, (step0 + step) % 2 == 0, not frozen, param, tau,
                              g, uu, noisy, fe if has_field else NULL)
            else:
                _pad_periodic(X, n)
                if not frozen:
                    for i in range(n):
                        v = X[i]
                        dd = 1.0 / (1.0 + v * v)
                        s[i] = v * v * dd
                        sp[i] = 2.0 * v * dd * dd
                    _pad_periodic(s, n)
                    _pad_periodic(sp, n)
                    _mobility(kind, param, X, 0, n, s, sp, a, xa, sqa)
                    _pad_periodic(a, n)
                for i in range(n):
                    q[i] = c4 * (lin * a[i] * (X[i - 1] - 2.0 * X[i] + X[i + 1]) - xa[i]) + ns * sqa[i] * g[i]
                if has_field:
                    for i in range(n):
                        q[i] += c2 * ef[i] * a[i]
                _pad_periodic(q, n)
                for i in range(n):
                    rhs[i] = X[i] - (q[i - 1] - 2.0 * q[i] + q[i + 1])
                if scheme == 0:
                    for i in range(n):
                        X[i] = rhs[i]
                else:
                    if not frozen:
                        _penta(a, h, n, d0, e1, e2)
                        _cyclic_factor(d0, e1, e2, n, iD, L1, L2, B0, B1, &bd)
                    _cyclic_solve(iD, L1, L2, B0, B1, &bd, n, rhs, z)
                    _pad_periodic(z, n)
                    for i in range(n):
                        q[i] = h * a[i] * (z[i - 1] - 2.0 * z[i] + z[i + 1])
                    _pad_periodic(q, n)
                    for i in range(n):
                        X[i] = rhs[i] - (q[i - 1] - 2.0 * q[i] + q[i + 1])
            tot = 0.0
            for i in range(n):
                tot += X[i]
            if not isfinite(tot):
                bad = step
                break
            if (step + 1) % stride == 0:
                for i in range(n):
                    out[rec, i] = X[i]
                rec += 1
    for i in range(n):
        x[i] = X[i]
    return rec, bad, rej


def run_box(double[::1] x, int kind, double param, Py_ssize_t n_steps, double dt,
            int scheme, rng, double[:, ::1] out, Py_ssize_t stride, Py_ssize_t step0=0):
    """Advance a box window in place under the unscaled box generator.

    Only the interior stencils ``1..n-2`` act, so the block mean and the
    linear mean of the window are conserved.  ``n - 2`` Gaussian increments
    are drawn per step.  Arguments and return value follow ``run_periodic``
    with ``c4 = dt/2`` and ``ns = sqrt(dt)``.
    """
    cdef Py_ssize_t n = x.shape[0]
    if n < 5:
        raise ValueError("box stepping requires 2l+1 >= 5 sites")
    _check_args(n, n_steps, out, stride, scheme)
    work = np.zeros((17, n + 2))
    cdef double[:, ::1] w = work
    cdef double *X = &w[0, 1]
    cdef double *s = &w[1, 1]
    cdef double *sp = &w[2, 1]
    cdef double *a = &w[3, 1]
    cdef double *xa = &w[4, 1]
    cdef double *sqa = &w[5, 1]
    cdef double *q = &w[6, 1]
    cdef double *rhs = &w[7, 1]
    cdef double *z = &w[8, 1]
    cdef double *d0 = &w[9, 1]
    cdef double *e1 = &w[10, 1]
    cdef double *e2 = &w[11, 1]
    cdef double *iD = &w[12, 1]
    cdef double *L1 = &w[13, 1]
    cdef double *L2 = &w[14, 1]
    cdef double *g = &w[15, 1]
    cdef double *uu = &w[16, 1]
    cdef Py_ssize_t step, i, rec = 0, bad = -1, rej = 0
    cdef bint frozen = kind != KIND_BUMP
    cdef double c4 = 0.5 * dt, ns = sqrt(dt), h = 0.25 * dt, tot, lin, v, dd
    cdef bitgen_t *bg = _bitgen(rng)
    lin = 1.0 if scheme == 0 else 0.5
    for i in range(n):
        X[i] = x[i]
    # Ghost and end sites carry no stencil: a, xa, sqa and q vanish there.
    if scheme == 2:
        for i in range(n):
            s[i] = _s_of(X[i])
    elif frozen:
        _mobility(kind, param, X, 1, n - 1, s, sp, a, xa, sqa)
        if scheme == 1:
            _penta(a, h, n, d0, e1, e2)
            _band_factor(d0, e1, e2, n, iD, L1, L2)
    lock = rng.bit_generator.lock
    with lock:
      with nogil:
        for step in range(n_steps):
            for i in range(n - 2):
                g[i] = random_standard_normal(bg)
            if scheme == 2:
                if not frozen:
                    for i in range(n - 2):
                        uu[i] = random_standard_uniform(bg)
                rej += _sweep(X, s, n, False, (step0 + step) % 2 == 0, not frozen, param, dt,
                              g, uu, True, NULL)
            else:
                if not frozen:
                    for i in range(n):
                        v = X[i]
                        dd = 1.0 / (1.0 + v * v)
                        s[i] = v * v * dd
                        sp[i] = 2.0 * v * dd * dd
                    _mobility(kind, param, X, 1, n - 1, s, sp, a, xa, sqa)
                for i in range(1, n - 1):
                    q[i] = c4 * (lin * a[i] * (X[i - 1] - 2.0 * X[i] + X[i + 1]) - xa[i]) + ns * sqa[i] * g[i - 1]
                for i in range(n):
                    rhs[i] = X[i] - (q[i - 1] - 2.0 * q[i] + q[i + 1])
                if scheme == 0:
                    for i in range(n):
                        X[i] = rhs[i]
                else:
                    if not frozen:
                        _penta(a, h, n, d0, e1, e2)
                        _band_factor(d0, e1, e2, n, iD, L1, L2)
                    _band_solve(iD, L1, L2, n, rhs, z)
                    for i in range(1, n - 1):
                        q[i] = h * a[i] * (z[i - 1] - 2.0 * z[i] + z[i + 1])
                    for i in range(n):
                        X[i] = rhs[i] - (q[i - 1] - 2.0 * q[i] + q[i + 1])
            tot = 0.0
            for i in range(n):
                tot += X[i]
            if not isfinite(tot):
                bad = step
                break
            if (step + 1) % stride == 0:
                for i in range(n):
                    out[rec, i] = X[i]
                rec += 1
    for i in range(n):
        x[i] = X[i]
    return rec, bad, rej
