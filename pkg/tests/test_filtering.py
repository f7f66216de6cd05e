import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mipdcl.engine import CYCLE_HOURS, Schedule, integrate, pd_initial
from mipdcl.filtering import (DegenerateEnsembleError, FilterConfig, FilterModel, ParticleEnsemble, TdmObservation,
                              advance_to, assimilate, fit_patient, history_loglik, init_ensemble, loglik_landscape,
                              mh_move,
                              patient_forcing, posterior_summary, predictive_loglik, read_particles,
                              systematic_resample, weighted_quantile, write_particles)
from mipdcl.models import PatientCovariates, PkParams, get_preset
from mipdcl.population import HyperPrior, ResidualModel

GS = get_preset("gold-standard")
COV = PatientCovariates()
NO_DRUG = FilterModel(GS, patient_forcing(COV, [0.0, 0.0]))
NO_RESAMPLE = FilterConfig(M=2, ess_threshold=0.0)


def _ensemble(circ0s, weights=None):
    circ0s = np.asarray(circ0s, dtype=float)
    m = circ0s.size
    theta = np.column_stack([np.full(m, np.log(141.0)), np.full(m, np.log(2.6)), np.log(circ0s)])
    w = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, dtype=float)
    return ParticleEnsemble(theta, pd_initial(circ0s), w)


def test_two_point_bayes_oracle():
    # predictions 1 and 4, observation 1, sigma 0.5: posterior odds exp(0.5 (ln 4 / 0.5)^2)
    ens = assimilate(_ensemble([1.0, 4.0]), TdmObservation(0.0, 1.0), NO_DRUG, ResidualModel(0.5),
                     np.random.default_rng(0), NO_RESAMPLE)
    odds = np.exp(0.5 * (np.log(4.0) / 0.5) ** 2)
    np.testing.assert_allclose(ens.weights, [odds / (1 + odds), 1 / (1 + odds)], rtol=1e-12)


def test_equal_predictions_keep_weights():
    ens = assimilate(_ensemble([3.0, 3.0], [0.3, 0.7]), TdmObservation(0.0, 5.0), NO_DRUG, ResidualModel(0.5),
                     np.random.default_rng(0), NO_RESAMPLE)
    np.testing.assert_allclose(ens.weights, [0.3, 0.7], rtol=1e-12)


def test_huge_sigma_is_uninformative():
    ens = assimilate(_ensemble([1.0, 4.0]), TdmObservation(0.0, 1.0), NO_DRUG, ResidualModel(1e6),
                     np.random.default_rng(0), NO_RESAMPLE)
    np.testing.assert_allclose(ens.weights, [0.5, 0.5], atol=1e-9)


def test_sequential_equals_batch():
    circ = np.array([2.0, 3.0, 5.0, 8.0])
    obs = [TdmObservation(24.0, 3.1), TdmObservation(200.0, 4.0), TdmObservation(500.0, 2.8)]
    cfg = FilterConfig(M=4, ess_threshold=0.0)
    seq = assimilate(_ensemble(circ), obs, NO_DRUG, ResidualModel(0.4), np.random.default_rng(0), cfg)
    ens0 = _ensemble(circ)
    batch = predictive_loglik(ens0.theta, NO_DRUG, [o.time for o in obs], [o.anc for o in obs], 0.4)
    w = np.exp(batch - batch.max())
    np.testing.assert_allclose(seq.weights, w / w.sum(), rtol=1e-8)


def test_all_weights_vanish_raises():
    ens = _ensemble([1.0, 2.0])
    ens.states[:, 5] = 0.0
    with pytest.raises(DegenerateEnsembleError):
        assimilate(ens, TdmObservation(0.0, 1.0), NO_DRUG, ResidualModel(0.5), np.random.default_rng(0),
                   NO_RESAMPLE)


def test_ensemble_validation():
    with pytest.raises(ValueError):
        _ensemble([1.0, 2.0], [0.2, 0.2])
    with pytest.raises(ValueError):
        _ensemble([1.0])
    with pytest.raises(ValueError):
        FilterConfig(M=1)
    with pytest.raises(ValueError):
        advance_to(advance_to(_ensemble([1.0, 2.0]), NO_DRUG, 100.0), NO_DRUG, 50.0)


@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=60).filter(lambda v: sum(v) > 1e-3),
       st.integers(0, 2 ** 32 - 1))
def test_systematic_resampling_counts(raw, seed):
    w = np.array(raw) / np.sum(raw)
    idx = systematic_resample(w, np.random.default_rng(seed))
    counts = np.bincount(idx, minlength=w.size)
    assert counts.sum() == w.size
    # systematic resampling keeps every count within one of its expectation
    assert np.all(np.abs(counts - w.size * w) < 1.0 + 1e-9)


def test_resampling_unbiased_in_expectation():
    w = np.array([0.05, 0.15, 0.3, 0.5])
    rng = np.random.default_rng(4)
    counts = np.mean([np.bincount(systematic_resample(w, rng), minlength=4) for _ in range(4000)], axis=0)
    np.testing.assert_allclose(counts, 4 * w, atol=0.03)


@given(st.integers(2, 40), st.integers(0, 1000))
def test_weighted_quantile_brute_force(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    k = rng.integers(1, 6, size=n)
    w = k / k.sum()
    expanded = np.sort(np.repeat(x, k))
    for q in (0.05, 0.5, 0.95):
        ref = expanded[int(np.ceil(q * expanded.size)) - 1]
        assert weighted_quantile(x, w, q) == ref


@settings(max_examples=20)
@given(st.integers(0, 1000))
def test_summary_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=(30, 3))
    w = rng.random(30)
    w /= w.sum()
    a = ParticleEnsemble(theta, np.zeros((30, 6)), w)
    p = rng.permutation(30)
    b = ParticleEnsemble(theta[p], np.zeros((30, 6)), w[p])
    sa, sb = posterior_summary(a), posterior_summary(b)
    np.testing.assert_allclose(sa.mean, sb.mean, atol=1e-12)
    np.testing.assert_allclose(sa.cov, sb.cov, atol=1e-12)
    for q in sa.quantiles:
        np.testing.assert_array_equal(sa.quantiles[q], sb.quantiles[q])
    np.testing.assert_allclose(sa.mean, w @ theta)
    assert sa.ess == pytest.approx(1 / np.sum(w ** 2))


def test_init_ensemble_prior():
    h = HyperPrior.default()
    ens = init_ensemble(h, 5.0, 4000, np.random.default_rng(0), 0.1)
    np.testing.assert_allclose(ens.theta.mean(0), [np.log(141), np.log(2.6), np.log(5.0)], atol=0.03)
    np.testing.assert_allclose(ens.states[:, 5], np.exp(ens.theta[:, 2]))
    np.testing.assert_allclose(np.diag(ens.prior_cov), [0.0729, 0.2016, 0.01])
    assert ens.ess == pytest.approx(4000)


def test_mh_move_preserves_flat_likelihood_target():
    # with an uninformative likelihood the moved ensemble must still follow the prior
    h = HyperPrior.default()
    ens = init_ensemble(h, 5.0, 3000, np.random.default_rng(1), 0.1, FilterConfig(M=3000))
    hist = ((24.0, 5.0),)
    y, ll = history_loglik(ens.theta, NO_DRUG, hist, 24.0, 1e6, FilterConfig())
    ens = ens.with_(history=hist, t=24.0, states=y, loglik=ll)
    moved = mh_move(ens, NO_DRUG, 1e6, np.random.default_rng(2), FilterConfig(M=3000, move_steps=3))
    np.testing.assert_allclose(moved.theta.mean(0), ens.prior_mean, atol=0.03)
    np.testing.assert_allclose(np.var(moved.theta, axis=0), np.diag(ens.prior_cov), rtol=0.12)
    assert np.mean(np.any(moved.theta != ens.theta, axis=1)) > 0.3


def _typical_data(scheme_days=(1, 4, 7, 10, 13, 16, 19), cycles=2, dose=360.0):
    pd = GS.pd()
    grid = sorted(c * CYCLE_HOURS + (d - 1) * 24.0 for c in range(cycles) for d in scheme_days)
    traj = integrate(PkParams(), pd, COV, Schedule.q3w(dose, n_cycles=cycles, obs_grid=tuple(grid)))
    return list(zip(traj.time.tolist(), traj.anc.tolist()))


def test_fit_patient_recovers_typical_parameters():
    obs = _typical_data()
    ens, model = fit_patient(GS, COV, [360.0, 360.0], obs, np.random.default_rng(3), FilterConfig(M=400))
    s = posterior_summary(ens)
    sd = np.sqrt(np.diag(s.cov))
    truth = np.log([141.0, 2.6, 6.48])
    assert np.all(np.abs(s.mean - truth) < 3 * sd + 0.05)
    assert ens.t == pytest.approx(obs[-1][0])
    assert len(ens.history) == len(obs) - 1
    with pytest.raises(ValueError):
        fit_patient(GS, COV, [360.0], obs, np.random.default_rng(3), FilterConfig(M=50))


def test_resimulated_states_match_history():
    obs = _typical_data(cycles=1)
    ens, model = fit_patient(GS, COV, [360.0], obs, np.random.default_rng(8), FilterConfig(M=60))
    # particle states must be consistent with restarting their parameters from time zero
    ll = predictive_loglik(ens.theta, model, [o[0] for o in obs[1:]], [o[1] for o in obs[1:]], GS.sigma)
    assert np.all(np.isfinite(ll))
    fresh = advance_to(init_ensemble(HyperPrior.default(), 6.48, 2, np.random.default_rng(0), 0.1), model, 0.0)
    assert fresh.t == 0.0


def test_particles_roundtrip(tmp_path):
    ens = init_ensemble(HyperPrior.default(), 6.0, 50, np.random.default_rng(0), 0.1)
    theta, w = read_particles(write_particles(ens, tmp_path / "p.csv"))
    np.testing.assert_allclose(theta, ens.theta, rtol=1e-12)
    np.testing.assert_allclose(w, ens.weights, rtol=1e-12)


def test_landscape_peaks_at_truth_for_noiseless_data():
    obs = [TdmObservation(t, v) for t, v in _typical_data(cycles=2) if t > 0]
    model = FilterModel(GS, patient_forcing(COV, [360.0, 360.0]))
    ls = np.log(np.geomspace(1.0, 7.0, 15))
    lc = np.log(np.geomspace(3.0, 12.0, 15))
    ls = np.sort(np.append(ls, np.log(2.6)))
    lc = np.sort(np.append(lc, np.log(6.48)))
    land = loglik_landscape(obs, model, ResidualModel(GS.sigma), ls, lc, np.log(141.0))
    assert land.loglik.shape == (16, 16)
    assert land.log_slope[land.ml_cell[0]] == pytest.approx(np.log(2.6))
    assert land.log_circ0[land.ml_cell[1]] == pytest.approx(np.log(6.48))
    assert land.map_cell == land.ml_cell
    prior = ((np.log(2.6), 0.449), (np.log(6.48), 0.1))
    withp = loglik_landscape(obs, model, ResidualModel(GS.sigma), ls, lc, np.log(141.0), prior=prior)
    assert np.all(withp.logpost <= withp.loglik + 1e-12)
    with pytest.raises(ValueError):
        loglik_landscape(obs, model, ResidualModel(GS.sigma), [], lc, np.log(141.0))
