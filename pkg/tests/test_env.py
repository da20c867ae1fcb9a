import math
import pickle

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rwrelab.env import (Direction, LawError, as_mapping, check_transition_vectors,
                         draw_site_vectors, drift_e1, epsilon_of, isotropy_gap, lambda_of,
                         local_drift, make_law, moment_report, resample_site, sample_environment,
                         sigma_of, ssrw_law)
from rwrelab.lattice import LatticeDomain


def test_directions_canonical_order():
    dirs = Direction.all(3)
    assert len(set(dirs)) == 6
    assert [(e.axis, e.sign) for e in dirs[:2]] == [(1, 1), (1, -1)]
    assert [e.index for e in dirs] == list(range(6))
    assert as_mapping(np.arange(6) / 15)[Direction(2, -1)] == pytest.approx(3 / 15)


def test_deterministic_drift_entries():
    law = make_law("deterministic-drift", 4, {"lam": 0.01})
    v = law.sample(3, 0)
    np.testing.assert_allclose(v[0], [1 / 8 + 0.005, 1 / 8 - 0.005] + [1 / 8] * 6)
    assert law.is_deterministic
    assert epsilon_of(law) == pytest.approx(8 * 0.01)


def test_ssrw_is_identity_case():
    law = ssrw_law(4)
    assert epsilon_of(law) == 0.0
    assert lambda_of(law) == 0.0
    assert sigma_of(law, 2) == 0.0


def test_two_point_values():
    law = make_law("two-point", 4, {"a": 0.01})
    v = law.sample(2000, 3)
    e1 = np.unique(np.round(v[:, 0], 12))
    np.testing.assert_allclose(e1, [1 / 8 - 0.01, 1 / 8 + 0.01])
    np.testing.assert_allclose(v[:, 0] + v[:, 1], 0.25)
    assert abs(np.mean(v[:, 0] > 1 / 8) - 0.5) < 0.05


def test_lambda_alias_and_errors():
    assert make_law("deterministic-drift", 2, {"lambda": 0.1}).params["lam"] == 0.1
    with pytest.raises(LawError):
        make_law("bogus", 4, {})
    with pytest.raises(LawError):
        make_law("two-point", 1, {"a": 0.01})
    with pytest.raises(LawError):
        make_law("two-point", 2.5, {"a": 0.01})
    with pytest.raises(LawError):
        make_law("two-point", 4, {"a": 0.2})  # eps = 3.2
    with pytest.raises(LawError):
        make_law("two-point", 4, {})
    with pytest.raises(LawError):
        make_law("custom-table", 2, {"table": [[0.5, 0.5, 0.1, 0.0]]})


def test_check_transition_vectors():
    check_transition_vectors([[0.25] * 4])
    with pytest.raises(ValueError):
        check_transition_vectors([[0.5, 0.5, 0.1, -0.1]])
    with pytest.raises(ValueError):
        check_transition_vectors([[0.3, 0.3, 0.3, 0.3]])
    with pytest.raises(ValueError):
        check_transition_vectors([[0.3, 0.2, 0.25, 0.25]], epsilon=0.1)


@settings(max_examples=30, deadline=None)
@given(kind=st.sampled_from(["two-point", "isotropic-plus-drift"]),
       d=st.integers(2, 6), a=st.floats(0, 0.02), lam=st.floats(-0.02, 0.02),
       seed=st.integers(0, 2 ** 32))
def test_samples_stay_in_band(kind, d, a, lam, seed):
    try:
        law = make_law(kind, d, {"a": a, "lam": lam})
    except LawError:
        return
    v = law.sample(500, seed)
    check_transition_vectors(v, epsilon=law.epsilon)


def test_isotropic_base_exchangeable_and_centered():
    law = make_law("isotropic-plus-drift", 3, {"a": 0.02, "lam": 0.0})
    v = law.sample(200_000, 1)
    np.testing.assert_allclose(v.sum(axis=1), 1.0, atol=1e-12)
    m = v.mean(axis=0)
    np.testing.assert_allclose(m, 1 / 6, atol=3e-4)
    sd = v.std(axis=0)
    assert np.ptp(sd) < 3e-4


def test_exact_moments_match_monte_carlo():
    law = make_law("two-point", 2, {"a": 0.03, "lam": 0.01})
    ex = moment_report(law, rs=(1, 2))
    mc = moment_report(law, rs=(1, 2), n_samples=200_000, seed=5, force_mc=True)
    assert ex.sample_count == 0
    for k in (2, 4):
        assert abs(ex.sigma[k] - mc.sigma[k]) <= 4 * mc.standard_errors[str(k)] + 1e-12
    assert abs(ex.lambda_ - mc.lambda_) <= 4 * mc.standard_errors["lambda"] + 1e-12
    # two-point: only +-e1 fluctuate, each by a
    assert ex.sigma[2] == pytest.approx(math.sqrt(2) * 0.03)
    assert ex.lambda_ == pytest.approx(0.01)


def test_isotropy_gap_reports_both_ratios():
    law = make_law("isotropic-plus-drift", 4, {"a": 0.01, "base": "rademacher"})
    out = isotropy_gap(law)
    assert out["gap"] > 0
    assert out["gap_over_sigma_2"] == pytest.approx(out["gap"] / out["sigma_2"])
    assert "gap_over_sigma_2_sq" in out


def test_environment_is_pure_function_of_seed_and_site():
    law = make_law("two-point", 2, {"a": 0.03})
    dom = LatticeDomain.box(3, 2)
    e1 = sample_environment(law, dom, 42)
    e2 = sample_environment(law, dom, 42)
    sites = dom.sites()
    np.testing.assert_array_equal(e1.vectors(sites), e2.vectors(sites))
    # order of queries is irrelevant
    np.testing.assert_array_equal(e1.vectors(sites[::-1])[::-1], e1.vectors(sites))
    e3 = sample_environment(law, dom, 43)
    assert not np.array_equal(e3.vectors(sites), e1.vectors(sites))


def test_resample_site_touches_one_site_only():
    law = make_law("isotropic-plus-drift", 2, {"a": 0.03})
    dom = LatticeDomain.box(3, 2)
    env = sample_environment(law, dom, 1)
    site = np.array([1, -2])
    env2 = resample_site(env, site, 99)
    sites = dom.sites()
    diff = np.any(env.vectors(sites) != env2.vectors(sites), axis=1)
    assert diff.sum() == 1
    np.testing.assert_array_equal(sites[diff][0], site)
    np.testing.assert_array_equal(env2.vector(site), draw_site_vectors(law, 99, site)[0])
    with pytest.raises(ValueError):
        resample_site(env, [50, 0], 1)


def test_local_drift_and_pickling():
    law = make_law("deterministic-drift", 3, {"lam": 0.04})
    env = sample_environment(law, None, 0)
    np.testing.assert_allclose(local_drift(env, [0, 0, 0]), [0.04, 0, 0], atol=1e-15)
    np.testing.assert_allclose(drift_e1(env, np.zeros((4, 3), dtype=int)), 0.04)
    env2 = pickle.loads(pickle.dumps(resample_site(env, [0, 0, 0], 3)))
    assert env2.law == law
    assert len(env2.overrides) == 1
