import numpy as np
import pytest
from scipy import integrate

from cmt.targets import TargetSpec, basin_masses, make_target, quadrature_log_z, reference_stats


@pytest.mark.parametrize("spec", [
    TargetSpec("gauss1d", params={"mu": 1.0, "sigma": 0.5, "log_offset": 7.0}),
    TargetSpec("gmm_grid"),
    TargetSpec("many_well", dim=2),
    TargetSpec("funnel", dim=2),
])
def test_log_z_agrees_with_grid_quadrature(spec):
    t = make_target(spec)
    assert quadrature_log_z(t) == pytest.approx(t.true_log_z, abs=1e-6)


def test_many_well_log_z_is_dimension_additive():
    one = make_target(TargetSpec("many_well", dim=1, params={"log_offset": 0.0}))
    five = make_target(TargetSpec("many_well", dim=5, params={"log_offset": 0.0}))
    assert five.true_log_z == pytest.approx(5 * one.true_log_z, rel=1e-12)
    val, _ = integrate.quad(lambda x: np.exp(one.log_prob(np.array([[x]]))[0]), -10, 10)
    assert one.true_log_z == pytest.approx(np.log(val), abs=1e-9)


@pytest.mark.parametrize("name,dim", [("gauss1d", 1), ("gmm_grid", 2), ("many_well", 2), ("funnel", 2)])
def test_reference_samples_match_quadrature_basins(name, dim):
    spec = TargetSpec(name, dim=dim)
    ref = reference_stats(spec)
    x = make_target(spec).sample_reference(200_000, 0)
    emp = basin_masses(x, np.full(len(x), 1 / len(x)), ref.mode_centers)
    np.testing.assert_allclose(emp, ref.mode_masses, atol=0.01)
    assert ref.mode_masses.sum() == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("name,dim", [("gauss1d", 1), ("funnel", 2), ("many_well", 2)])
def test_reference_entropy_matches_closed_form(name, dim):
    spec = TargetSpec(name, dim=dim)
    assert reference_stats(spec).entropy == pytest.approx(make_target(spec).entropy, abs=1e-4)


def test_gmm_grid_has_nine_equal_basins():
    ref = reference_stats(TargetSpec("gmm_grid"))
    assert len(ref.mode_centers) == 9
    np.testing.assert_allclose(ref.mode_masses, 1 / 9, atol=1e-9)


def test_spec_validation_and_stable_keys():
    with pytest.raises(ValueError):
        TargetSpec("nope").resolved()
    with pytest.raises(ValueError):
        TargetSpec("gauss1d", params={"width": 1}).resolved()
    assert TargetSpec("funnel").key() == TargetSpec("funnel", dim=10, params={"scale": 3.0}).key()
    assert TargetSpec("funnel").key() != TargetSpec("funnel", dim=5).key()


def test_funnel_log_prob_formula():
    t = make_target(TargetSpec("funnel", dim=3, params={"log_offset": 0.0}))
    x = np.array([[0.7, -1.2, 0.4]])
    v = 0.7
    want = (-0.5 * (v / 3) ** 2 - 0.5 * np.log(2 * np.pi * 9)
            - 0.5 * (1.44 + 0.16) * np.exp(-v) - np.log(2 * np.pi) - v)
    assert t.log_prob(x)[0] == pytest.approx(want, rel=1e-12)
