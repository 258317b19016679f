"""Compiled kernels against the numpy fallback, and structural conservation."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from soshydro import kernels
from soshydro.gibbs import make_rng
from soshydro.lattice import Mobility, conserved_pair_array, parse_mobility
from soshydro.sim import SimParams, box_dt_limit

needs_cython = pytest.mark.skipif("cython" not in kernels.available_backends(),
                                  reason="compiled kernels not built")


def _periodic(backend, spec, scheme, field, steps=40, n=16, seed=7, c_dt=0.2):
    mob = parse_mobility(spec)
    params = SimParams(n, mob, c_dt=c_dt, horizon=1.0)
    c4, c2, ns = params.coefficients()
    x = make_rng(seed).normal(0.2, 1.0, size=n)
    x -= x.mean()
    out = np.zeros((steps // 5, n))
    e = None if field is None else np.sin(2 * np.pi * np.arange(n) / n) * field
    rng = make_rng(seed, 1)
    rec, bad, rej = kernels.run_periodic(x, mob, steps, c4, c2, ns, e, scheme, rng, out, 5, backend)
    return x, out, rec, bad, rej, rng.standard_normal()


def _box(backend, spec, scheme, steps=60, l=4, seed=9):
    mob = parse_mobility(spec)
    x = make_rng(seed).normal(0.0, 1.0, size=2 * l + 1)
    rng = make_rng(seed, 2)
    dt = box_dt_limit(mob, scheme)
    rec, bad, rej = kernels.run_box(x, mob, steps, dt, scheme, rng, np.zeros((steps, 2 * l + 1)), 1, backend)
    return x, rec, bad, rej, rng.standard_normal()


@needs_cython
@pytest.mark.parametrize("spec", ["constant(1)", "constant(1.7)", "bump(0.1)", "bump(0.3)"])
@pytest.mark.parametrize("field", [None, 1.5])
def test_sweep_backends_agree_bit_for_bit_on_a_ring(spec, field):
    a = _periodic("cython", spec, 2, field)
    b = _periodic("numpy", spec, 2, field)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert a[2:] == b[2:]  # records, bad step, rejections and the stream position


@needs_cython
@pytest.mark.parametrize("spec", ["constant(1)", "bump(0.1)", "bump(0.3)"])
def test_sweep_backends_agree_bit_for_bit_in_a_box(spec):
    a = _box("cython", spec, 2)
    b = _box("numpy", spec, 2)
    np.testing.assert_array_equal(a[0], b[0])
    assert a[1:] == b[1:]


@needs_cython
@pytest.mark.parametrize("scheme", [0, 1])
@pytest.mark.parametrize("spec", ["constant(1)", "bump(0.2)"])
def test_other_schemes_agree_to_rounding(scheme, spec):
    a = _periodic("cython", spec, scheme, 0.7, c_dt=0.01 if scheme == 0 else 0.2)
    b = _periodic("numpy", spec, scheme, 0.7, c_dt=0.01 if scheme == 0 else 0.2)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-9, atol=1e-10)
    assert a[5] == b[5]  # both consumed the same number of draws
    c = _box("cython", spec, scheme)
    d = _box("numpy", spec, scheme)
    np.testing.assert_allclose(c[0], d[0], rtol=1e-9, atol=1e-10)


@pytest.mark.parametrize("backend", kernels.available_backends())
@pytest.mark.parametrize("scheme", [0, 1, 2])
def test_ring_sum_is_conserved(backend, scheme):
    x, *_ = _periodic(backend, "bump(0.2)", scheme, 2.0, steps=400, c_dt=0.01 if scheme == 0 else 0.25)
    assert abs(x.sum()) < 1e-11


@pytest.mark.parametrize("backend", kernels.available_backends())
@pytest.mark.parametrize("scheme", [0, 1, 2])
def test_box_pair_is_conserved(backend, scheme):
    mob = parse_mobility("bump(0.3)")
    x = make_rng(3).normal(size=9)
    y0 = np.array(conserved_pair_array(x))
    kernels.run_box(x, mob, 500, box_dt_limit(mob, scheme), scheme, make_rng(4), None, 1, backend)
    assert np.max(np.abs(np.array(conserved_pair_array(x)) - y0)) < 1e-12


@given(st.integers(8, 24), st.floats(0.01, 0.3), st.integers(0, 2**31))
def test_sweep_conserves_mass_for_random_inputs(n, beta, seed):
    mob = parse_mobility(f"bump({beta})")
    params = SimParams(n, mob, c_dt=0.25)
    x = make_rng(seed).normal(0.0, 2.0, size=n)
    s0 = x.sum()
    kernels.run_periodic(x, mob, 50, *params.coefficients(), None, 2, make_rng(seed, 1))
    assert abs(x.sum() - s0) < 1e-11 * (1 + np.abs(x).sum())


def test_user_mobility_runs_on_the_fallback():
    base = parse_mobility("bump(0.1)")
    user = Mobility("mine", (("beta", 0.1),), base.func, base.grad, base.lower_bound, base.upper_bound)
    assert kernels.resolve_backend(user) == "numpy"
    assert kernels.resolve_backend(base, "numpy") == "numpy"
    with pytest.raises(ValueError):
        kernels.resolve_backend(base, "fortran")
    a = _box_with(user)
    b = _box_with(base, backend="numpy")
    np.testing.assert_array_equal(a, b)


def _box_with(mob, backend=None):
    x = make_rng(1).normal(size=7)
    kernels.run_box(x, mob, 30, 0.1, 2, make_rng(2), None, 1, backend)
    return x


def test_environment_variable_forces_fallback():
    env = dict(os.environ, SOSHYDRO_BACKEND="numpy")
    out = subprocess.run([sys.executable, "-c", "from soshydro import kernels; print(kernels.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "numpy"


def test_default_backend_prefers_compiled_kernels():
    expected = "cython" if "cython" in kernels.available_backends() else "numpy"
    if os.environ.get("SOSHYDRO_BACKEND", "").lower() in ("numpy", "fallback"):
        expected = "numpy"
    assert kernels.BACKEND == expected


def test_non_finite_state_reports_the_step():
    mob = parse_mobility("constant(1)")
    x = np.zeros(9)
    x[3] = np.inf
    _, bad, _ = kernels.run_box(x, mob, 5, 0.1, 0, make_rng(0), None, 1, None)
    assert bad == 0
