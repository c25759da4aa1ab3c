import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmt.core import draw_buffer
from cmt.metrics import RunMetrics, clip_top, elbo_and_logz, ess_fraction, eubo_estimate, evidence, hist_tv, mode_mass_tv
from cmt.mixture import gaussian
from cmt.targets import TargetSpec, make_target, reference_stats

finite_logw = arrays(np.float64, st.integers(1, 200), elements=st.floats(-30, 30))


@settings(max_examples=200)
@given(finite_logw)
def test_ess_fraction_bounds_and_shift_invariance(lw):
    e = ess_fraction(lw)
    assert 1.0 / lw.size - 1e-12 <= e <= 1.0
    assert ess_fraction(lw + 7.5) == pytest.approx(e, rel=1e-9)


@settings(max_examples=100)
@given(finite_logw)
def test_ess_fraction_matches_direct_formula(lw):
    w = np.exp(lw - lw.max())
    assert ess_fraction(lw) == pytest.approx(w.sum() ** 2 / (w.size * (w**2).sum()), rel=1e-9)


def test_ess_extremes():
    assert ess_fraction(np.zeros(10)) == 1.0
    one_hot = np.full(10, -np.inf)
    one_hot[3] = 0.0
    assert ess_fraction(one_hot) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        ess_fraction(np.full(4, -np.inf))


def test_clipping_caps_the_largest_weights():
    lw = np.zeros(20_000)
    lw[:2] = [50.0, 40.0]
    assert ess_fraction(lw) < 1e-3
    # two clipped entries drop to the smaller of them: two equal dominant weights
    np.testing.assert_array_equal(clip_top(lw, 2)[:2], [40.0, 40.0])
    assert ess_fraction(lw, clip=True) == pytest.approx(2 / lw.size, rel=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.lists(st.floats(5, 60), min_size=1, max_size=3), st.integers(0, 2**32 - 1))
def test_clipping_never_lowers_ess_with_outliers(n_per_10k, spikes, seed):
    lw = np.random.default_rng(seed).normal(size=10_000 * n_per_10k)
    lw[: len(spikes)] = spikes
    assert ess_fraction(lw, clip=True) >= ess_fraction(lw) * (1 - 1e-12)


def test_weighted_ess_equals_inverse_one_plus_chi_square():
    rng = np.random.default_rng(0)
    lm = np.log(rng.dirichlet(np.ones(50)))
    lw = rng.standard_normal(50)
    base, w = np.exp(lm), np.exp(lw)
    ratio = w / (base @ w)
    chi2 = base @ (ratio - 1) ** 2
    assert ess_fraction(lw, log_mass=lm) == pytest.approx(1 / (1 + chi2), rel=1e-12)


def test_uniform_mass_reduces_to_plain_ess():
    lw = np.random.default_rng(1).standard_normal(30)
    assert ess_fraction(lw, log_mass=np.zeros(30)) == pytest.approx(ess_fraction(lw), rel=1e-12)


def _kl(m1, v1, m0, v0):
    return 0.5 * (np.log(v0 / v1) + (v1 + (m1 - m0) ** 2) / v0 - 1.0)


def test_evidence_bounds_match_gaussian_kl():
    target = make_target(TargetSpec("gauss1d", params={"log_offset": 3.0}))
    m, v = 0.4, 1.5
    model = gaussian([m], [[v]])
    n = 400_000
    eubo = eubo_estimate(target.sample_reference(n, 0), model, target)
    elbo, log_z = elbo_and_logz(draw_buffer(model, target, n, 1))
    assert eubo.value == pytest.approx(3.0 + _kl(0.0, 1.0, m, v), abs=4 * eubo.se)
    assert elbo == pytest.approx(3.0 - _kl(m, v, 0.0, 1.0), abs=0.01)
    assert log_z == pytest.approx(3.0, abs=0.01)


def test_eubo_flags_points_outside_model_support():
    class Nowhere:
        dim = 1

        def log_prob(self, x):
            return np.where(x[:, 0] > 0, 0.0, -np.inf)

    target = make_target(TargetSpec("gauss1d"))
    out = eubo_estimate(np.array([[1.0], [-1.0], [2.0]]), Nowhere(), target)
    assert out.value == np.inf
    np.testing.assert_array_equal(out.offending, [1])


def test_evidence_is_exact_for_a_perfect_model():
    target = make_target(TargetSpec("gauss1d", params={"log_offset": 5.0}))
    ev = evidence(draw_buffer(gaussian([0.0], [[1.0]]), target, 1000, 0))
    assert ev.log_z_hat == pytest.approx(5.0, abs=1e-12)
    assert ev.elbo == pytest.approx(5.0, abs=1e-12)
    assert ev.log_z_se == pytest.approx(0.0, abs=1e-12)


def test_distances_vanish_on_reference_samples():
    spec = TargetSpec("gmm_grid")
    ref = reference_stats(spec)
    x = make_target(spec).sample_reference(200_000, 4)
    assert mode_mass_tv(x, ref) < 0.01
    assert hist_tv(x, ref) < 0.06
    # all mass in one basin
    one = np.tile(ref.mode_centers[0], (100, 1))
    assert mode_mass_tv(one, ref) == pytest.approx(1 - ref.mode_masses[0], abs=1e-12)


def test_metrics_serialize_non_finite_values():
    m = RunMetrics(ess_reverse_frac=0.5, eubo=np.inf, elbo=-np.inf, log_z_hat=np.float64(1.5),
                   mode_mass_tv=0.0, hist2d_tv=np.nan, per_step=[])
    d = m.as_dict()
    json.dumps(d, allow_nan=False)
    assert d["eubo"] == "inf" and d["elbo"] == "-inf" and d["hist2d_tv"] is None
    assert "ledger" not in d and "model" not in d
