import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chi2, multivariate_normal

from mipdcl.filtering import ParticleEnsemble
from mipdcl.learning import (HYPER_COLUMNS, EnsembleProposal, LearningConfig, chain_ess, continued_learning_run,
                             floor_spd, gibbs_omega, hpd_area, hyper_row, mh_log_ratio, mh_theta_step,
                             omega_conditional, population_update, theta_tv_conditional)
from mipdcl.population import HyperPrior

UNIT = HyperPrior(np.zeros(2), np.eye(2), np.eye(2), dof=12.0)


def _ensemble(theta, w=None):
    theta = np.asarray(theta, dtype=float)
    m = theta.shape[0]
    w = np.full(m, 1.0 / m) if w is None else np.asarray(w)
    return ParticleEnsemble(np.column_stack([theta, np.zeros(m)]), np.zeros((m, 6)), w)


def test_theta_tv_conditional_oracle():
    mu, sigma = theta_tv_conditional([2.0, 2.0], np.eye(2), UNIT)
    np.testing.assert_allclose(mu, [1.0, 1.0])
    np.testing.assert_allclose(sigma, 0.5 * np.eye(2))


def test_theta_tv_conditional_precision_weighting():
    h = HyperPrior(np.array([0.0, 0.0]), np.diag([1.0, 3.0]), np.eye(2), 12.0)
    mu, sigma = theta_tv_conditional([4.0, 4.0], np.diag([1.0, 1.0]), h)
    np.testing.assert_allclose(np.diag(sigma), [0.5, 0.75])
    np.testing.assert_allclose(mu, [2.0, 3.0])


def test_omega_conditional_oracle():
    h = HyperPrior.default()
    psi, dof = omega_conditional(h.mean + [0.3, 0.0], h.mean, h)
    assert dof == 13.0
    assert psi[0, 0] == pytest.approx(h.psi[0, 0] + 0.09)
    assert psi[1, 1] == pytest.approx(h.psi[1, 1]) and psi[0, 1] == 0.0
    np.testing.assert_allclose(h.psi, np.diag([0.6561, 1.8144]))


def test_gibbs_omega_mean():
    h = HyperPrior.default()
    rng = np.random.default_rng(0)
    r = np.array([0.3, -0.2])
    draws = np.array([gibbs_omega(h.mean + r, h.mean, h, rng) for _ in range(20000)])
    psi, dof = omega_conditional(h.mean + r, h.mean, h)
    np.testing.assert_allclose(draws.mean(0), psi / (dof - 3), rtol=0.04, atol=2e-3)


def test_mh_ratio_is_zero_when_priors_agree():
    h = HyperPrior.default()
    a = mh_log_ratio([5.0, 1.0], [4.9, 0.8], h.mean, h.omega_mean, h.mean, h.omega_mean)
    assert a == pytest.approx(0.0, abs=1e-12)
    b = mh_log_ratio([5.0, 1.0], [5.0, 1.0], h.mean + 0.3, 2 * h.omega_mean, h.mean, h.omega_mean)
    assert b == pytest.approx(0.0, abs=1e-12)


@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4), st.floats(0.5, 2.0))
def test_mh_ratio_density_oracle(v, scale):
    h = HyperPrior.default()
    prop, cur = np.array(v[:2]) + h.mean, np.array(v[2:]) + h.mean
    tv, om = h.mean + 0.1, scale * h.omega_mean
    new = multivariate_normal(tv, om)
    old = multivariate_normal(h.mean, h.omega_mean)
    ref = (new.logpdf(prop) - old.logpdf(prop)) - (new.logpdf(cur) - old.logpdf(cur))
    assert mh_log_ratio(prop, cur, tv, om, h.mean, h.omega_mean) == pytest.approx(ref, rel=1e-9, abs=1e-9)


def test_mh_step_always_accepts_under_unchanged_prior():
    h = HyperPrior.default()
    rng = np.random.default_rng(1)
    prop = EnsembleProposal(rng.normal(size=(50, 2)) + h.mean, np.full(50, 0.02), h=0.0)
    accepted = [mh_theta_step(h.mean, prop, h.mean, h.omega_mean, (h.mean, h.omega_mean), rng)[1]
                for _ in range(200)]
    assert all(accepted)


def test_ensemble_proposal_without_jitter_returns_particles():
    theta = np.array([[1.0, 2.0], [3.0, 4.0]])
    prop = EnsembleProposal(theta, np.array([0.0, 1.0]), h=0.0)
    rng = np.random.default_rng(0)
    assert all(np.array_equal(prop.draw(rng), [3.0, 4.0]) for _ in range(20))


def test_floor_spd():
    a, flag = floor_spd(np.diag([1.0, 2.0]))
    assert not flag and np.array_equal(a, np.diag([1.0, 2.0]))
    b, flag = floor_spd(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert flag and np.linalg.eigvalsh(b).min() >= 1e-8 * (1 - 1e-6)


def test_chain_ess():
    rng = np.random.default_rng(0)
    iid = rng.normal(size=4000)
    assert 3000 < chain_ess(iid) <= 6000
    x = np.zeros(20000)
    for i in range(1, x.size):
        x[i] = 0.9 * x[i - 1] + rng.normal()
    assert chain_ess(x) == pytest.approx(20000 * 0.1 / 1.9, rel=0.3)


def test_hpd_area_formula():
    h = HyperPrior(np.zeros(2), np.diag([0.04, 0.09]), np.eye(2), 12.0)
    assert hpd_area(h) == pytest.approx(np.pi * chi2.ppf(0.95, 2) * 0.06)


def test_population_update_bookkeeping_and_shrinkage():
    h = HyperPrior.default()
    rng = np.random.default_rng(2)
    ens = _ensemble(h.mean + rng.normal(scale=0.05, size=(300, 2)))
    rep = population_update(ens, h, L=1500, burn_in=300, rng=np.random.default_rng(3))
    assert rep.hyper.dof == h.dof + 1
    assert rep.theta_tv_draws.shape == (1500, 2) and rep.omega_draws.shape == (1500, 2, 2)
    assert hpd_area(rep.hyper) < hpd_area(h)
    assert np.all(np.abs(rep.hyper.mean - h.mean) < 3 * np.sqrt(np.diag(h.cov)))
    assert rep.hyper.omega_mean[0, 1] == 0.0
    assert 0 < rep.acceptance_rate <= 1
    with pytest.raises(ValueError):
        population_update(ens, h, L=10, burn_in=10)


def test_learning_moves_toward_consistent_patients():
    h = HyperPrior.default()
    target = h.mean + np.array([-0.1, 0.5])
    rng = np.random.default_rng(4)

    def patient(_hyper):
        return _ensemble(target + rng.normal(scale=0.05, size=(200, 2)))

    trace = continued_learning_run([patient] * 15, h, LearningConfig(L=600, burn_in=100),
                                   rng_for=lambda i: np.random.default_rng(100 + i))
    d0 = np.linalg.norm(trace.hypers[0].mean - target)
    d1 = np.linalg.norm(trace.hypers[-1].mean - target)
    assert d1 < 0.5 * d0
    areas = [hpd_area(x) for x in trace.hypers]
    assert areas[-1] < areas[0]
    assert [x.dof for x in trace.hypers] == [12.0 + k for k in range(16)]


def test_failing_patient_is_skipped():
    h = HyperPrior.default()
    seen = []

    def good(_):
        return _ensemble(h.mean + np.random.default_rng(0).normal(scale=0.1, size=(50, 2)))

    def bad(_):
        raise RuntimeError("boom")

    trace = continued_learning_run([good, bad, good], h, LearningConfig(L=50, burn_in=10),
                                   on_patient=lambda i, rep: seen.append(i))
    assert trace.failures == 1 and trace.indices == [1, 3] and seen == [0, 2]
    rows = trace.rows(replicate=2)
    assert len(rows) == 3 and all(len(r) == len(HYPER_COLUMNS) for r in rows)
    assert rows[0][:2] == [2, 0]
    assert hyper_row(0, 0, h)[2] == h.mean[0]
