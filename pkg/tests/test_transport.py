"""Transport coefficient, Jensen sandwich, CLT variances and the semi-inner product."""
import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from soshydro import transport
from soshydro.gibbs import canonical_covariance, gc_mean_mobility, make_rng
from soshydro.lattice import ConservedPair, parse_mobility, stencil_matrix
from soshydro.transport import (
    BasisSpec,
    Feature,
    SandwichError,
    SingularGramError,
    TransportTable,
    a_hat_bounds,
    a_hat_bounds_quadrature,
    clt_variance,
    current_form,
    estimate_a_hat,
    fd_residual,
    generator_form,
    laplacian_form,
    semi_inner,
    tabulate,
)

from conftest import zscore

ORIGIN = ConservedPair(0.0, 0.0)


# --- basis ---------------------------------------------------------------------------


def test_default_basis_has_nine_bounded_features():
    basis = BasisSpec.default()
    assert basis.size == 9
    assert basis.radius == 2
    x = np.linspace(-50, 50, 11)[None, :].repeat(3, axis=0)
    for feat in basis.features:
        v, grads = feat.value_and_grad(x, 5)
        assert np.all(np.abs(v) <= 1.0)
        assert all(np.all(np.abs(g) <= 1.0) for g in grads.values())


def test_basis_digest_distinguishes_bases():
    assert BasisSpec.default().digest() != BasisSpec.rich().digest()
    assert BasisSpec.default().digest() == BasisSpec.default().digest()


def test_feature_validation():
    with pytest.raises(ValueError):
        Feature((0,), "exp")
    with pytest.raises(ValueError):
        Feature(())


# --- a_hat ---------------------------------------------------------------------------


@pytest.mark.parametrize("c", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("alpha", [0.0, 1.3])
def test_gradient_case_recovers_constant(c, alpha):
    est = estimate_a_hat(alpha, BasisSpec.default(), 100_000, make_rng(1), parse_mobility(f"constant({c})"))
    assert abs(est.value - c) <= 0.02 * c
    # The optimal correction is essentially zero: the shifted Laplacian telescopes.
    assert np.max(np.abs(est.coefficients)) < 0.05


def test_empty_basis_gives_mean_mobility(bump):
    est = estimate_a_hat(0.5, BasisSpec.empty(), 200_000, make_rng(2), bump)
    assert est.value == est.mean_mobility
    assert zscore(est.value, gc_mean_mobility(bump, 0.5), est.stderr) < 3


def test_bump_estimate_lies_in_the_sandwich(bump):
    est = estimate_a_hat(0.0, BasisSpec.default(), 200_000, make_rng(3), bump)
    lower, upper = a_hat_bounds_quadrature(0.0, bump)
    assert lower - 3 * est.stderr <= est.value <= upper + 3 * est.stderr


def test_nongradient_correction_is_resolved_for_a_strong_bump():
    # At bump(0.1) the correction is below Monte Carlo resolution; bump(0.3) at a tilt resolves it.
    strong = parse_mobility("bump(0.3)")
    est = estimate_a_hat(1.0, BasisSpec.rich(), 400_000, make_rng(3), strong)
    _, upper = a_hat_bounds_quadrature(1.0, strong)
    assert est.value < upper - 3 * est.stderr


def test_enlarging_the_basis_never_increases_the_estimate(bump):
    rng = make_rng(4)
    values = [estimate_a_hat(0.7, b, 200_000, rng, bump) for b in (BasisSpec.empty(), BasisSpec.default(),
                                                                   BasisSpec.rich())]
    for small, big in zip(values, values[1:]):
        assert big.value <= small.value + 3 * np.hypot(small.stderr, big.stderr)


def test_singular_gram_without_ridge(bump):
    twins = BasisSpec((Feature((0,)), Feature((0,))))
    with pytest.raises(SingularGramError) as err:
        estimate_a_hat(0.0, twins, 10_000, make_rng(5), bump, ridge=0.0)
    assert err.value.condition > 1e14
    est = estimate_a_hat(0.0, twins, 10_000, make_rng(5), bump)
    assert np.isfinite(est.value)


def test_estimate_requires_enough_samples(bump):
    with pytest.raises(ValueError):
        estimate_a_hat(0.0, BasisSpec.default(), 30, make_rng(0), bump)


# --- Jensen bounds -------------------------------------------------------------------


def test_bounds_of_constant_mobility(const2):
    b = a_hat_bounds(0.3, const2, 1000, make_rng(6))
    assert (b.lower, b.upper) == pytest.approx((2.0, 2.0), abs=1e-12)
    assert tuple(a_hat_bounds_quadrature(0.3, const2)) == pytest.approx((2.0, 2.0))


@pytest.mark.parametrize("alpha", [0.0, -1.5, 2.5])
def test_bump_bounds_against_quadrature(bump, alpha):
    b = a_hat_bounds(alpha, bump, 400_000, make_rng(7))
    lo, hi = a_hat_bounds_quadrature(alpha, bump)
    assert zscore(b.lower, lo, b.lower_stderr) < 3
    assert zscore(b.upper, hi, b.upper_stderr) < 3


@given(st.floats(-3, 3), st.sampled_from(["bump(0.05)", "bump(0.2)", "bump(0.33)", "constant(1.5)"]))
def test_lower_bound_never_exceeds_upper(alpha, spec):
    lo, hi = a_hat_bounds_quadrature(alpha, parse_mobility(spec), order=20)
    assert lo <= hi + 1e-14


# --- CLT variance --------------------------------------------------------------------


def _laplacian_oracle(l, shifts):
    """Exact ``(1/l) <(-L)^{-1} F, F>`` for the summed slope Laplacian with unit mobility."""
    n = 2 * l + 1
    c = stencil_matrix(n).T
    gen = 0.5 * c @ c.T
    j = np.zeros(n - 2)
    j[[s + l - 1 for s in shifts]] = 1.0
    v = c @ j
    return float(v @ np.linalg.pinv(gen) @ canonical_covariance(l) @ v / l)


def test_green_kubo_laplacian_matches_dense_eigensolve():
    unit = parse_mobility("constant(1)")
    est = clt_variance(laplacian_form(), 4, ORIGIN, make_rng(8), mob=unit)
    oracle = _laplacian_oracle(4, est.details["shifts"])
    assert oracle == pytest.approx(2.5, abs=1e-9)
    assert zscore(est.value, oracle, est.stderr) < 4
    assert est.cross_check.value == pytest.approx(oracle, rel=1e-6)
    assert est.consistent
    assert not est.flagged


@pytest.mark.parametrize("y", [(-2.0, 0.0), (0.0, 0.0), (2.0, 0.0), (-2.0, 0.1), (0.0, 0.1), (2.0, 0.1)])
def test_current_variance_is_bounded_uniformly_in_y(bump, y):
    bound = 2.0 * bump.upper_bound * 2.0**2
    for l in (4, 8):
        est = clt_variance(current_form(), l, ConservedPair(*y), make_rng(9, l), mob=bump,
                           method="variational-lower", n_variational=20_000)
        assert 0.5 < est.value < bound


def test_green_kubo_current_against_variational_lower_bound(bump):
    est = clt_variance(current_form(), 4, ConservedPair(0.5, 0.1), make_rng(10), mob=bump)
    assert est.method == "green-kubo"
    assert est.cross_check.method == "variational-lower"
    assert est.consistent
    assert est.t_max > 0


def test_generator_images_have_vanishing_variance_per_site(bump):
    form = generator_form(Feature((0, 1)))
    trial = BasisSpec((Feature((0, 1)),))
    per_site = []
    for l in (4, 8, 16):
        est = clt_variance(form, l, ORIGIN, make_rng(11, l), mob=bump, method="variational-lower", trial=trial,
                           n_variational=20_000)
        per_site.append(est.value / l)
    assert per_site[0] > per_site[1] > per_site[2]


def test_uncentered_observable_is_rejected(bump):
    shifted = current_form() + transport.FluxForm(lambda box, c: 0.0, (0, 0), lambda box, c: np.ones(box.x.shape[0]),
                                                  "one")
    with pytest.raises(ValueError, match="centered"):
        clt_variance(shifted, 4, ORIGIN, make_rng(12), mob=bump, method="green-kubo")


def test_clt_variance_needs_l_four(bump):
    with pytest.raises(ValueError):
        clt_variance(current_form(), 3, ORIGIN, make_rng(0), mob=bump)


# --- semi-inner product --------------------------------------------------------------


@pytest.fixture(scope="module")
def identities():
    """Extrapolated identities for both mobilities over l in {4, 6, 8, 12}."""
    out = {}
    g = Feature((0, 1))
    for spec in ("constant(2)", "bump(0.1)"):
        mob = parse_mobility(spec)
        rng = make_rng(13)
        kw = dict(mob=mob, n_samples=40_000, trial=BasisSpec((g,)))
        grid = [4, 6, 8, 12]
        out[spec] = {
            "w,dx": semi_inner(current_form(), laplacian_form(), 0.0, grid, rng, **kw),
            "w,w": semi_inner(current_form(), current_form(), 0.0, grid, rng, **kw),
            "Lg,dx": semi_inner(generator_form(g), laplacian_form(), 0.0, grid, rng, **kw),
            "mean_a": float(gc_mean_mobility(mob, 0.0)),
        }
    return out


@pytest.mark.parametrize("spec", ["constant(2)", "bump(0.1)"])
def test_current_laplacian_pairing_is_four(identities, spec):
    assert identities[spec]["w,dx"].value == pytest.approx(4.0, rel=0.1)


@pytest.mark.parametrize("spec", ["constant(2)", "bump(0.1)"])
def test_current_norm_is_four_mean_mobility(identities, spec):
    r = identities[spec]
    assert r["w,w"].value == pytest.approx(4.0 * r["mean_a"], rel=0.1)


@pytest.mark.parametrize("spec", ["constant(2)", "bump(0.1)"])
def test_generator_image_is_orthogonal_to_laplacian(identities, spec):
    r = identities[spec]
    assert abs(r["Lg,dx"].value) <= 0.1 * r["w,w"].value


# --- fluctuation-dissipation residual ---------------------------------------------------


def test_residual_vanishes_in_the_gradient_case(const2):
    res = fd_residual(0.0, BasisSpec.empty(), make_rng(14), mob=const2, a_hat=(2.0, 0.0), n_samples=10_000)
    assert res.value == pytest.approx(0.0, abs=1e-12)
    assert not res.inconsistent


@pytest.mark.parametrize("spec,alpha", [("bump(0.1)", 0.0), ("bump(0.3)", 1.0)])
def test_residual_is_nested_and_matches_its_algebraic_form(spec, alpha):
    mob = parse_mobility(spec)
    rng = make_rng(15)
    ref = estimate_a_hat(alpha, BasisSpec.rich(), 400_000, rng, mob)
    empty = fd_residual(alpha, BasisSpec.empty(), rng, mob=mob, a_hat=ref, n_samples=400_000)
    rich = fd_residual(alpha, BasisSpec.default(), rng, mob=mob, a_hat=ref, n_samples=400_000)
    assert empty.value - rich.value >= -3 * np.hypot(empty.stderr, rich.stderr)
    for r in (empty, rich):
        assert r.value == pytest.approx(4.0 * (r.basis_value.value - ref.value))
        assert not r.inconsistent


# --- tables ---------------------------------------------------------------------------------


def test_constant_table_is_flat(const2):
    table = tabulate(np.linspace(-3, 3, 25), BasisSpec.default(), make_rng(16), mob=const2)
    np.testing.assert_array_equal(table.values, 2.0)
    assert table.mobility == "constant(c=2.0)"


@pytest.fixture(scope="module")
def bump_table():
    # Same spacing as the shipped 25-point grid on [-3, 3].
    return tabulate(np.linspace(-1, 1, 9), BasisSpec.default(), make_rng(17), mob=parse_mobility("bump(0.1)"),
                    n_samples=50_000)


def test_bump_table_in_sandwich_and_smooth(bump_table):
    lower, upper = a_hat_bounds_quadrature(bump_table.alpha, parse_mobility("bump(0.1)"))
    s = bump_table.stderr
    assert np.all(bump_table.values >= lower - 3 * s)
    assert np.all(bump_table.values <= upper + 3 * s)
    assert np.max(bump_table.smoothness()) < 5


def test_table_round_trip_is_bit_exact(bump_table, tmp_path):
    again = TransportTable.from_text(bump_table.to_text())
    for name in ("alpha", "values", "stderr"):
        np.testing.assert_array_equal(getattr(again, name), getattr(bump_table, name))
    assert (again.mobility, again.basis_digest) == (bump_table.mobility, bump_table.basis_digest)
    path = tmp_path / "table.txt"
    bump_table.save(path)
    assert TransportTable.load(path).to_text() == bump_table.to_text()


def test_table_interpolation_and_clamping(bump_table, caplog):
    np.testing.assert_allclose(bump_table(bump_table.alpha), bump_table.values, rtol=1e-14)
    with caplog.at_level(logging.WARNING, logger="soshydro.transport"):
        out = bump_table(np.array([-5.0, 5.0]))
    np.testing.assert_allclose(out, bump_table.values[[0, -1]])
    assert "clamped 2" in caplog.text
    assert bump_table.clamps([-5.0, 0.0, 2.5]) == 2


def test_table_checks_mobility(bump_table):
    bump_table.check_mobility("bump(0.1)")
    with pytest.raises(ValueError):
        bump_table.check_mobility("bump(0.2)")


@pytest.mark.parametrize("text", ["garbage\n", "# soshydro transport table v1\nmobility: x\n",
                                  "# soshydro transport table v1\nmobility: x\nbasis: y\ngrid: 0.0 1.0 3\n"
                                  "0.0 1.0 0.0\n1.0 1.0 0.0\n"])
def test_malformed_tables_are_rejected(text):
    with pytest.raises(ValueError):
        TransportTable.from_text(text)


def test_table_validation():
    with pytest.raises(ValueError):
        TransportTable(np.array([0.0, 1.0, 3.0]), np.ones(3), np.zeros(3), "m", "b")
    with pytest.raises(ValueError):
        TransportTable(np.array([0.0, 1.0]), np.array([1.0, -1.0]), np.zeros(2), "m", "b")


def test_sandwich_violation_is_reported(monkeypatch, bump):
    real = transport.estimate_a_hat

    def inflated(alpha, basis, n, rng, mob):
        est = real(alpha, basis, n, rng, mob)
        return transport.AHatEstimate(est.value + 1.0, est.stderr, est.alpha, est.coefficients, est.condition,
                                      est.mean_mobility, est.n_samples)

    monkeypatch.setattr(transport, "estimate_a_hat", inflated)
    with pytest.raises(SandwichError) as err:
        tabulate([0.0, 1.0], BasisSpec.empty(), make_rng(18), mob=bump, n_samples=1000)
    assert err.value.table is not None
