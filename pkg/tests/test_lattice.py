"""Lattice geometry, mobilities, currents and conserved quantities."""
import numpy as np
import pytest
import sympy
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from soshydro.lattice import (
    POTENTIAL,
    BoundaryError,
    ConservedPair,
    SlopeConfig,
    bump_mobility,
    constant_mobility,
    conserved_pair,
    conserved_pair_array,
    current,
    current_field,
    energy,
    laplacian_field,
    laplacian_slope,
    mobility_field,
    mobility_registry,
    parse_mobility,
    stencil_matrix,
)

finite = st.floats(-6.0, 6.0, allow_nan=False)
triples = st.tuples(finite, finite, finite)
mobilities = st.sampled_from(["constant(1)", "constant(2.5)", "bump(0.1)", "bump(0.3)"]).map(parse_mobility)


# --- SlopeConfig -------------------------------------------------------------


def test_periodic_requires_five_sites():
    with pytest.raises(ValueError):
        SlopeConfig.periodic(np.zeros(4))
    assert SlopeConfig.periodic(np.zeros(5)).n_sites == 5


def test_box_requires_odd_width_and_l_at_least_two():
    with pytest.raises(ValueError):
        SlopeConfig.box(np.zeros(3))
    with pytest.raises(ValueError):
        SlopeConfig.box(np.zeros(6))
    assert SlopeConfig.box(np.zeros(5)).half_width == 2


def test_unknown_topology_rejected():
    with pytest.raises(ValueError):
        SlopeConfig(np.zeros(8), "torus")


def test_config_is_immutable():
    cfg = SlopeConfig.periodic(np.arange(6.0))
    with pytest.raises(ValueError):
        cfg.values[0] = 1.0


def test_periodic_index_wraps():
    cfg = SlopeConfig.periodic(np.arange(6.0))
    assert cfg.triple(0) == (5.0, 0.0, 1.0)
    assert cfg.triple(5) == (4.0, 5.0, 0.0)


def test_box_stencil_outside_window_raises():
    cfg = SlopeConfig.box(np.arange(-3.0, 4.0))
    assert cfg.triple(2) == (1.0, 2.0, 3.0)
    with pytest.raises(BoundaryError):
        cfg.triple(3)
    with pytest.raises(BoundaryError):
        laplacian_slope(cfg, -3)
    with pytest.raises(BoundaryError):
        current(cfg, 3, constant_mobility(1.0))


# --- energy --------------------------------------------------------------------


def test_energy_zero_field():
    assert energy(SlopeConfig.periodic(np.zeros(8))) == 0.0


def test_energy_simple_config():
    assert energy(SlopeConfig.periodic([1.0, -1.0, 0.0, 0.0, 0.0])) == 1.0


def test_energy_matches_naive_sum(rng):
    x = rng.normal(size=37)
    naive = 0.0
    for v in x:
        naive += 0.5 * v * v
    assert energy(SlopeConfig.periodic(x)) == pytest.approx(naive, abs=1e-12)


def test_potential_derivative_is_identity():
    probe = np.linspace(-5.0, 5.0, 101)
    np.testing.assert_array_equal(POTENTIAL.derivative(probe), probe)
    np.testing.assert_allclose(POTENTIAL.value(probe), 0.5 * probe**2)


# --- current and Laplacian -----------------------------------------------------


def test_current_linear_field_constant_mobility():
    cfg = SlopeConfig.box([0.0, 1.0, 2.0, 3.0, 4.0])
    assert current(cfg, 0, constant_mobility(1.0)) == 0.0


def test_current_peak_constant_mobility():
    cfg = SlopeConfig.box([0.0, 0.0, 1.0, 0.0, 0.0])
    assert current(cfg, 0, constant_mobility(1.0)) == -2.0


def test_laplacian_examples():
    assert laplacian_slope(SlopeConfig.periodic(np.full(7, 3.2)), 2) == 0.0
    assert laplacian_slope(SlopeConfig.box([0.0, 1.0, 0.0, 1.0, 0.0]), 0) == 2.0
    lin = SlopeConfig.box(np.arange(-4.0, 5.0))
    assert all(laplacian_slope(lin, i) == 0.0 for i in range(-3, 4))


def _symbolic_current(beta):
    xm, x0, xp = sympy.symbols("xm x0 xp")
    s = lambda u: u**2 / (1 + u**2)  # noqa: E731
    a = 1 + beta * (s(xm) + s(x0) + s(xp))
    xa = sympy.diff(a, xm) - 2 * sympy.diff(a, x0) + sympy.diff(a, xp)
    w = a * (xm - 2 * x0 + xp) - xa
    return sympy.lambdify((xm, x0, xp), w, "numpy")


@pytest.mark.parametrize("beta", [0.1, 0.3])
def test_current_matches_symbolic_oracle(beta, rng):
    oracle = _symbolic_current(beta)
    mob = bump_mobility(beta)
    x = rng.normal(0.3, 1.5, size=11)
    cfg = SlopeConfig.periodic(x)
    for i in range(x.size):
        xm, x0, xp = cfg.triple(i)
        assert current(cfg, i, mob) == pytest.approx(float(oracle(xm, x0, xp)), abs=1e-10)


def test_current_field_matches_pointwise(rng, mob):
    x = rng.normal(size=13)
    cfg = SlopeConfig.periodic(x)
    field = current_field(x, mob)
    for i in range(13):
        assert field[i] == pytest.approx(current(cfg, i, mob), abs=1e-13)
    boxed = current_field(x, mob, periodic=False)
    box = SlopeConfig.box(x)
    for r, i in enumerate(range(-5, 6)):
        assert boxed[r] == pytest.approx(current(box, i, mob), abs=1e-13)


@given(arrays(float, st.integers(5, 40), elements=finite), st.floats(0.1, 10.0))
def test_constant_mobility_current_is_scaled_laplacian(x, c):
    mob = constant_mobility(c)
    cfg = SlopeConfig.periodic(x)
    for i in range(x.size):
        assert abs(current(cfg, i, mob) - c * laplacian_slope(cfg, i)) <= 1e-14 * (1 + abs(c * laplacian_slope(cfg, i)))
    np.testing.assert_allclose(current_field(x, mob), c * laplacian_field(x), rtol=0, atol=1e-12)


# --- mobilities ----------------------------------------------------------------


def test_registry_constant():
    mob = mobility_registry("constant", 2.0)
    assert mob.eval(0.3, -1.0, 7.0) == 2.0
    assert [float(g) for g in mob.grad(0.3, -1.0, 7.0)] == [0.0, 0.0, 0.0]
    assert mob.lower_bound == mob.upper_bound == 2.0


def test_registry_bump_at_origin():
    mob = mobility_registry("bump", 0.1)
    assert mob.eval(0.0, 0.0, 0.0) == 1.0
    assert mob.lower_bound == 1.0
    assert mob.upper_bound == pytest.approx(1.3)


@pytest.mark.parametrize("name,args", [("bump", (0.0,)), ("bump", (1.0 / 3.0,)), ("bump", (-0.1,)),
                                       ("constant", (0.0,)), ("constant", (np.inf,)), ("hat", (0.1,))])
def test_registry_rejects_bad_specs(name, args):
    with pytest.raises(ValueError):
        mobility_registry(name, *args)


def test_parse_mobility_forms():
    assert parse_mobility("bump(0.1)").label == "bump(beta=0.1)"
    assert parse_mobility("bump(beta=0.2)").kernel_param == 0.2
    assert parse_mobility({"name": "constant", "c": 3.0}).upper_bound == 3.0
    assert parse_mobility("constant").upper_bound == 1.0
    with pytest.raises(ValueError):
        parse_mobility("bump[0.1]")


def test_bump_gradient_matches_finite_differences(rng):
    mob = bump_mobility(0.1)
    h = 1e-5
    x = rng.normal(0.0, 2.0, size=(3, 500))
    grads = mob.grad(*x)
    for k in range(3):
        up, dn = x.copy(), x.copy()
        up[k] += h
        dn[k] -= h
        fd = (mob.func(*up) - mob.func(*dn)) / (2 * h)
        scale = np.maximum(np.abs(grads[k]), 1e-3)
        assert np.max(np.abs(fd - grads[k]) / scale) <= 1e-6


@given(mobilities, triples)
def test_mobility_bounds_hold(mob, t):
    a = float(mob.eval(*t))
    assert mob.lower_bound <= a <= mob.upper_bound


@given(mobilities, triples)
def test_mobility_gradient_property(mob, t):
    h = 1e-5
    grads = [float(g) for g in mob.grad(*t)]
    for k in range(3):
        up, dn = list(t), list(t)
        up[k] += h
        dn[k] -= h
        fd = (float(mob.eval(*up)) - float(mob.eval(*dn))) / (2 * h)
        assert abs(fd - grads[k]) <= 1e-6 * max(abs(grads[k]), 1e-3)


def test_check_bounds_sampling(rng):
    assert bump_mobility(0.2).check_bounds(rng, 10_000)
    assert constant_mobility(1.7).check_bounds(rng, 10_000)


def test_mobility_field_box_interior(rng, mob):
    x = rng.normal(size=9)
    a, xa = mobility_field(x, mob, periodic=False)
    assert a.shape == xa.shape == (7,)
    np.testing.assert_allclose(a, mob.func(x[:-2], x[1:-1], x[2:]) * np.ones(7))


# --- conserved pair --------------------------------------------------------------


def test_conserved_pair_constant_field():
    assert conserved_pair(SlopeConfig.box(np.full(9, 1.25))).as_tuple() == (1.25, 0.0)


def test_conserved_pair_linear_field():
    pair = conserved_pair(SlopeConfig.box(np.arange(-3.0, 4.0)))
    assert pair.y1 == 0.0
    assert pair.y2 == pytest.approx(7.0 / 3.0, abs=1e-15)


def test_conserved_pair_direct_summation(rng):
    l = 6
    x = rng.normal(size=2 * l + 1)
    y1 = 0.0
    y2 = 0.0
    for j in range(-l, l + 1):
        y1 += x[j + l]
        y2 += j * x[j + l]
    pair = conserved_pair(SlopeConfig.box(x))
    assert pair == ConservedPair(*map(float, conserved_pair_array(x)))
    assert pair.y1 == pytest.approx(y1 / (2 * l + 1), abs=1e-15)
    assert pair.y2 == pytest.approx(y2 / (l * (l + 1)), abs=1e-15)


def test_conserved_pair_recomputes_exactly(rng):
    x = rng.normal(size=11)
    first = conserved_pair(SlopeConfig.box(x))
    again = conserved_pair(SlopeConfig.box(x.copy()))
    assert first == again


def test_conserved_pair_requires_box():
    with pytest.raises(ValueError):
        conserved_pair(SlopeConfig.periodic(np.zeros(9)))


@pytest.mark.parametrize("l", range(2, 65))
def test_conserved_pair_weight_sums(l):
    j = np.arange(-l, l + 1)
    assert j.sum() == 0
    assert int((j * j).sum()) == l * (l + 1) * (2 * l + 1) // 3


@given(st.integers(2, 12))
def test_interior_stencils_preserve_both_conserved_quantities(l):
    n = 2 * l + 1
    c = stencil_matrix(n)
    j = np.arange(-l, l + 1)
    np.testing.assert_array_equal(c.sum(axis=1), 0.0)
    np.testing.assert_array_equal(c @ j, 0.0)
    ring = stencil_matrix(n, periodic=True)
    np.testing.assert_array_equal(ring.sum(axis=0), 0.0)
