"""Individual-level Bayesian inference with a bootstrap particle filter.

Particles carry log-parameters ``(log MTT, log Slope, log ANC0[, log gamma])``
and the PD state at the assimilated-through time.  The PK of the inference
model is shared by all particles of a patient and enters as a
:class:`~mipdcl.engine.PkForcing`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .engine import CYCLE_HOURS, DoseEvent, PkForcing, pd_initial, propagate_pd
from .io import read_csv, write_csv
from .models import PkParams, ModelPreset, PatientCovariates, pd_arrays, pk_vector
from .population import (LOG_LOWER, LOG_UPPER, HyperPrior, ResidualModel, clip_to_bounds, log_lik_matrix,
                         sample_individual)

log = logging.getLogger(__name__)

PARAM_NAMES = ("log_mtt", "log_slope", "log_anc0", "log_gamma")


class DegenerateEnsembleError(RuntimeError):
    pass


@dataclass(frozen=True)
class TdmObservation:
    time: float
    anc: float
    patient_id: int = 0
    cycle: int = 0

    def __post_init__(self):
        if not self.anc > 0:
            raise ValueError("observed ANC must be positive")
        if self.time < 0:
            raise ValueError("observation time must be non-negative")


@dataclass(frozen=True)
class FilterConfig:
    """Particle-filter settings.

    ``resimulate`` re-runs the states of rejuvenated particles from time zero;
    when False (jitter-forward) they keep their states, which lets the
    ensemble track parameters that drift during therapy.  With resimulation
    and ``move_steps > 0`` rejuvenation is a Metropolis-Hastings random walk
    on the posterior given all assimilated data (proposal covariance
    ``move_scale^2`` times the ensemble covariance); otherwise it is plain
    Gaussian jitter of relative size ``jitter_h``.
    """

    M: int = 1000
    ess_threshold: float = 0.5
    jitter_h: float = 0.1
    resimulate: bool = True
    infer_gamma: bool = False
    gamma_sd: float = 0.2
    move_steps: int = 2
    move_scale: float = 1.0
    rtol: float = 1e-6
    backend: str | None = None

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("need at least two particles")
        if (not 0 <= self.ess_threshold <= 1 or self.jitter_h < 0 or self.move_steps < 0
                or not self.move_scale > 0):
            raise ValueError("invalid particle-filter settings")


@dataclass
class ParticleEnsemble:
    theta: np.ndarray
    states: np.ndarray
    weights: np.ndarray
    t: float = 0.0
    prior_var: np.ndarray | None = None
    n_resampled: int = 0
    prior_mean: np.ndarray | None = None
    prior_cov: np.ndarray | None = None
    history: tuple = ()
    loglik: np.ndarray | None = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.theta.ndim != 2 or self.theta.shape[0] < 2:
            raise ValueError("ensemble needs at least two particles")
        if self.weights.shape != (self.M,) or np.any(self.weights < 0):
            raise ValueError("weights must be non-negative, one per particle")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to one")

    @property
    def M(self) -> int:
        return self.theta.shape[0]

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))

    def copy(self) -> "ParticleEnsemble":
        return replace(self, theta=self.theta.copy(), states=self.states.copy(), weights=self.weights.copy(),
                       loglik=None if self.loglik is None else self.loglik.copy())

    def with_(self, **changes) -> "ParticleEnsemble":
        return replace(self, **changes)

    def log_prior(self, theta) -> np.ndarray:
        """Gaussian prior log-density up to a constant; -inf outside the parameter bounds."""
        theta = np.atleast_2d(theta)
        d = theta - self.prior_mean
        # pseudo-inverse: a zero prior variance pins that parameter, and moves keep it pinned
        lp = -0.5 * np.sum(d * (d @ np.linalg.pinv(self.prior_cov)), axis=1)
        k = theta.shape[1]
        out = (theta < LOG_LOWER[:k]) | (theta > LOG_UPPER[:k])
        lp[np.any(out, axis=1)] = -np.inf
        return lp


@dataclass
class FilterModel:
    """What the filter needs to predict ANC: inference preset and administered PK history."""

    preset: ModelPreset
    forcing: PkForcing = field(default_factory=PkForcing)

    def pd_rows(self, theta):
        return pd_arrays(self.preset, theta[:, 0], theta[:, 1], theta[:, 2],
                         theta[:, 3] if theta.shape[1] > 3 else None)


def normalize(logw: np.ndarray) -> np.ndarray:
    w = np.exp(logw - logsumexp(logw))
    return w / w.sum()


def init_ensemble(hyper: HyperPrior, baseline, M, rng, theta_rv, cfg: FilterConfig = FilterConfig(),
                  gamma_typical=None) -> ParticleEnsemble:
    """Prior ensemble around the hyperprior's expected population values.

    ANC0 follows the baseline method around the observed ``baseline`` with
    spread ``theta_rv``.  Weights are uniform, states at steady state.
    """
    if M < 2:
        raise ValueError("need at least two particles")
    pop = hyper.population()
    gp = (np.log(gamma_typical), cfg.gamma_sd) if cfg.infer_gamma else None
    theta = sample_individual(pop, (np.log(baseline), theta_rv), rng, gamma_prior=gp, size=M)
    prior_mean = np.concatenate([pop.theta_tv, [np.log(baseline)], [gp[0]] if gp else []])
    prior_cov = np.zeros((prior_mean.size, prior_mean.size))
    prior_cov[:2, :2] = pop.omega
    prior_cov[2, 2] = theta_rv ** 2
    if gp:
        prior_cov[3, 3] = gp[1] ** 2
    return ParticleEnsemble(theta, pd_initial(np.exp(theta[:, 2])), np.full(M, 1.0 / M), 0.0,
                            np.diag(prior_cov).copy(), prior_mean=prior_mean, prior_cov=prior_cov, loglik=np.zeros(M))


def systematic_resample(weights, rng) -> np.ndarray:
    M = weights.size
    cw = np.cumsum(weights)
    cw[-1] = 1.0
    u = (rng.random() + np.arange(M)) / M
    return np.minimum(np.searchsorted(cw, u, side="right"), M - 1)


def weighted_cov(theta, w) -> np.ndarray:
    mu = w @ theta
    d = theta - mu
    return (d * w[:, None]).T @ d


def rejuvenate(theta, cov, h, rng, prior_var=None) -> np.ndarray:
    """Gaussian jitter with covariance ``h^2 cov``, diagonal floored at 1e-6 of the prior variance."""
    cov = np.array(cov, dtype=float)
    if prior_var is not None:
        floor = 1e-6 * np.asarray(prior_var)
        dg = np.diag(cov)
        cov[np.diag_indices_from(cov)] = np.maximum(dg, floor)
    cov = 0.5 * (cov + cov.T)
    eps = rng.multivariate_normal(np.zeros(theta.shape[1]), h * h * cov, size=theta.shape[0], method="eigh")
    return clip_to_bounds(theta + eps)


def _advance(ens, model, t1, cfg):
    if t1 <= ens.t:
        return ens.states, np.zeros(ens.M, dtype=np.int64)
    y1, _, _, st = propagate_pd(ens.states, model.pd_rows(ens.theta), model.forcing, ens.t, t1,
                                rtol=cfg.rtol, backend=cfg.backend)
    return y1, st


def advance_to(ens: ParticleEnsemble, model: FilterModel, t1, cfg: FilterConfig = FilterConfig()) -> ParticleEnsemble:
    """Predict the ensemble forward to ``t1`` without data."""
    if t1 < ens.t - 1e-9:
        raise ValueError("cannot move an ensemble backwards in time")
    states, st = _advance(ens, model, t1, cfg)
    w = ens.weights.copy()
    if np.any(st == 2):
        w[st == 2] = 0.0
        if w.sum() == 0:
            raise DegenerateEnsembleError("all particles failed during prediction")
        w /= w.sum()
    return ens.with_(theta=ens.theta.copy(), states=states, weights=w, t=max(float(t1), ens.t))


def resimulate(theta, model: FilterModel, t1, cfg: FilterConfig):
    """States at ``t1`` of particles restarted from their steady state at time zero."""
    y0 = pd_initial(np.exp(theta[:, 2]))
    if t1 <= 0:
        return y0, np.zeros(theta.shape[0], dtype=np.int64)
    y1, _, _, st = propagate_pd(y0, model.pd_rows(theta), model.forcing, 0.0, t1,
                                rtol=cfg.rtol, backend=cfg.backend)
    return y1, st


def assimilate(ens: ParticleEnsemble, obs, model: FilterModel, res: ResidualModel, rng,
               cfg: FilterConfig = FilterConfig()) -> ParticleEnsemble:
    """Propagate to the observation time, reweight, and resample/rejuvenate when the ESS drops."""
    if isinstance(obs, (list, tuple)):
        for o in obs:
            ens = assimilate(ens, o, model, res, rng, cfg)
        return ens
    if obs.time < ens.t - 1e-9:
        raise ValueError("observation precedes the ensemble time")
    states, st = _advance(ens, model, obs.time, cfg)
    pred = states[:, 5]
    ok = (st != 2) & (pred > 0) & np.isfinite(pred)
    ll = np.full(ens.M, -np.inf)
    ll[ok] = log_lik_matrix([obs.anc], pred[ok, None], res.sigma)
    with np.errstate(divide="ignore"):
        logw = np.log(ens.weights) + ll
    if not np.any(np.isfinite(logw)):
        raise DegenerateEnsembleError(
            f"all particle weights vanished at t={obs.time:g} h (obs {obs.anc:g}, "
            f"max log-lik {np.max(ll) if ok.any() else float('nan')})")
    w = normalize(logw)
    loglik = None if ens.loglik is None else ens.loglik + ll
    out = ens.with_(theta=ens.theta.copy(), states=states, weights=w, t=float(obs.time),
                    history=ens.history + ((float(obs.time), float(obs.anc)),), loglik=loglik)
    if out.ess < cfg.ess_threshold * out.M:
        out = resample_move(out, model, rng, cfg, res)
    return out


def history_loglik(theta, model: FilterModel, history, t1, res_sigma, cfg: FilterConfig):
    """States at ``t1`` and log-likelihood of all ``history`` points, restarting from time zero."""
    times = np.array([h[0] for h in history], dtype=float)
    values = np.array([h[1] for h in history], dtype=float)
    y0 = pd_initial(np.exp(theta[:, 2]))
    y1, yout, _, st = propagate_pd(y0, model.pd_rows(theta), model.forcing, 0.0, t1, t_out=times,
                                   rtol=cfg.rtol, backend=cfg.backend)
    pred = yout[:, :, 5]
    ok = (st != 2) & np.all(pred > 0, axis=1) & np.all(np.isfinite(pred), axis=1)
    ll = np.full(theta.shape[0], -np.inf)
    ll[ok] = log_lik_matrix(values, pred[ok], res_sigma)
    return y1, ll


def mh_move(ens: ParticleEnsemble, model: FilterModel, res_sigma, rng, cfg: FilterConfig) -> ParticleEnsemble:
    """Random-walk Metropolis-Hastings steps on equally weighted particles.

    The target is prior times the likelihood of every assimilated point, so
    the moved ensemble still represents the same posterior.
    """
    theta, states, ll = ens.theta.copy(), ens.states.copy(), ens.loglik.copy()
    M, d = theta.shape
    lp = ens.log_prior(theta)
    for _ in range(cfg.move_steps):
        cov = np.cov(theta, rowvar=False).reshape(d, d)
        cov[np.diag_indices(d)] = np.maximum(np.diag(cov), 1e-4 * ens.prior_var)
        prop = theta + rng.multivariate_normal(np.zeros(d), cfg.move_scale ** 2 * cov, size=M, method="eigh")
        lp_prop = ens.log_prior(prop)
        inside = np.isfinite(lp_prop)
        ll_prop = np.full(M, -np.inf)
        y_prop = states.copy()
        if inside.any():
            y_prop[inside], ll_prop[inside] = history_loglik(prop[inside], model, ens.history, ens.t, res_sigma, cfg)
        with np.errstate(invalid="ignore"):
            log_a = (lp_prop + ll_prop) - (lp + ll)
        accept = np.isfinite(log_a) & (np.log(rng.random(M)) < log_a)
        theta[accept], states[accept] = prop[accept], y_prop[accept]
        ll[accept], lp[accept] = ll_prop[accept], lp_prop[accept]
    return ens.with_(theta=theta, states=states, loglik=ll)


def resample_move(ens: ParticleEnsemble, model: FilterModel, rng, cfg: FilterConfig,
                  res: ResidualModel | None = None) -> ParticleEnsemble:
    M = ens.M
    idx = systematic_resample(ens.weights, rng)
    if cfg.resimulate and cfg.move_steps > 0 and res is not None and ens.loglik is not None \
            and ens.prior_cov is not None:
        out = ens.with_(theta=ens.theta[idx], states=ens.states[idx], weights=np.full(M, 1.0 / M),
                        loglik=ens.loglik[idx], n_resampled=ens.n_resampled + 1)
        return mh_move(out, model, res.sigma, rng, cfg)
    cov = weighted_cov(ens.theta, ens.weights)
    theta = rejuvenate(ens.theta[idx], cov, cfg.jitter_h, rng, ens.prior_var)
    if cfg.resimulate:
        states, st = resimulate(theta, model, ens.t, cfg)
        failed = st == 2
        if failed.any():
            theta[failed] = ens.theta[idx][failed]
            states[failed] = ens.states[idx][failed]
    else:
        states = ens.states[idx].copy()
    return ens.with_(theta=theta, states=states, weights=np.full(M, 1.0 / M), n_resampled=ens.n_resampled + 1,
                     loglik=None)


@dataclass
class PosteriorSummary:
    mean: np.ndarray
    cov: np.ndarray
    quantiles: dict
    ess: float
    low_ess: bool


def weighted_quantile(x, w, q) -> np.ndarray:
    """Inverse of the weighted empirical CDF (lower quantile)."""
    order = np.argsort(x, kind="stable")
    cw = np.cumsum(w[order])
    cw /= cw[-1]
    idx = np.searchsorted(cw, np.asarray(q) - 1e-12, side="left")
    return x[order][np.minimum(idx, x.size - 1)]


def posterior_summary(ens: ParticleEnsemble, qs=(0.05, 0.5, 0.95)) -> PosteriorSummary:
    w = ens.weights
    mean = w @ ens.theta
    cov = weighted_cov(ens.theta, w)
    quant = {q: np.array([weighted_quantile(ens.theta[:, j], w, q) for j in range(ens.theta.shape[1])])
             for q in qs}
    ess = ens.ess
    if ess < 2:
        log.warning("posterior summary of a degenerate ensemble (ESS %.2f)", ess)
    return PosteriorSummary(mean, cov, quant, ess, ess < 2)


@dataclass
class Landscape:
    log_slope: np.ndarray
    log_circ0: np.ndarray
    loglik: np.ndarray
    logpost: np.ndarray
    ml_cell: tuple
    map_cell: tuple


def loglik_landscape(obs, model: FilterModel, res: ResidualModel, log_slope, log_circ0, log_mtt,
                     log_gamma=None, prior=None, rtol=1e-6, backend=None) -> Landscape:
    """Log-likelihood (and log-posterior) over a rectangular (log Slope, log Circ0) grid.

    ``prior`` is ``((mean_slope, sd_slope), (mean_circ0, sd_circ0))`` on the log scale;
    without it the log-posterior equals the log-likelihood.
    """
    log_slope = np.asarray(log_slope, dtype=float)
    log_circ0 = np.asarray(log_circ0, dtype=float)
    if log_slope.ndim != 1 or log_circ0.ndim != 1 or not log_slope.size or not log_circ0.size:
        raise ValueError("grid axes must be non-empty vectors")
    S, C = np.meshgrid(log_slope, log_circ0, indexing="ij")
    n = S.size
    cols = [np.full(n, log_mtt), S.ravel(), C.ravel()]
    if log_gamma is not None:
        cols.append(np.full(n, log_gamma))
    theta = np.column_stack(cols)
    times = np.array([o.time for o in obs], dtype=float)
    values = np.array([o.anc for o in obs], dtype=float)
    ll = predictive_loglik(theta, model, times, values, res.sigma, rtol, backend).reshape(S.shape)
    lp = ll.copy()
    if prior is not None:
        (ms, ss), (mc, sc) = prior
        lp = lp - 0.5 * ((S - ms) / ss) ** 2 - 0.5 * ((C - mc) / sc) ** 2
    ml = np.unravel_index(np.nanargmax(ll), ll.shape)
    mp = np.unravel_index(np.nanargmax(lp), lp.shape)
    return Landscape(log_slope, log_circ0, ll, lp, tuple(int(i) for i in ml), tuple(int(i) for i in mp))


def predictive_loglik(theta, model: FilterModel, times, values, sigma, rtol=1e-6, backend=None):
    """Joint log-likelihood of a whole observation series for each parameter row, from time zero."""
    times = np.asarray(times, dtype=float)
    order = np.argsort(times, kind="stable")
    y0 = pd_initial(np.exp(theta[:, 2]))
    t1 = float(times.max())
    _, yout, _, st = propagate_pd(y0, model.pd_rows(theta), model.forcing, 0.0, t1,
                                  t_out=times[order], rtol=rtol, backend=backend)
    pred = yout[:, :, 5]
    ok = (st != 2) & np.all(pred > 0, axis=1)
    ll = np.full(theta.shape[0], -np.inf)
    ll[ok] = log_lik_matrix(np.asarray(values)[order], pred[ok], sigma)
    return ll


def patient_forcing(cov: PatientCovariates, doses_mg, pk: PkParams = PkParams(), backend=None) -> PkForcing:
    """Covariate-typical concentration history of a q3w dose sequence (one dose per cycle)."""
    pk_vec = pk_vector(pk, cov)
    forcing = PkForcing()
    for c, d in enumerate(doses_mg):
        ev = [DoseEvent(c * CYCLE_HOURS, float(d))] if d > 0 else []
        forcing = forcing.extend(pk_vec, ev, (c + 1) * CYCLE_HOURS, backend=backend)
    return forcing


def fit_patient(preset: ModelPreset, cov: PatientCovariates, doses_mg, observations, rng,
                cfg: FilterConfig = FilterConfig(), hyper: HyperPrior | None = None, pk: PkParams = PkParams()):
    """Posterior ensemble of one patient from its q3w dose history and ANC measurements.

    ``observations`` are ``(time_h, anc)`` pairs.  A measurement at time zero
    serves as the baseline; otherwise ``cov.baseline_anc`` does.  Returns
    ``(ensemble, model)`` with the ensemble at the last observation time.
    """
    doses_mg = [float(d) for d in doses_mg]
    obs = sorted((float(t), float(v)) for t, v in observations)
    horizon = len(doses_mg) * CYCLE_HOURS
    if obs and obs[-1][0] > horizon:
        raise ValueError("observation after the end of the dosed cycles")
    baseline = next((v for t, v in obs if t == 0), cov.baseline_anc)
    model = FilterModel(preset, patient_forcing(cov, doses_mg, pk, cfg.backend))
    hyper = HyperPrior.from_preset(preset) if hyper is None else hyper
    ens = init_ensemble(hyper, baseline, cfg.M, rng, preset.anc0_sd, cfg, gamma_typical=preset.gamma)
    res = ResidualModel(preset.sigma)
    ens = assimilate(ens, [TdmObservation(t, v) for t, v in obs if t > 0], model, res, rng, cfg)
    return ens, model


def write_particles(ens: ParticleEnsemble, path):
    d = ens.theta.shape[1]
    header = ["id", *PARAM_NAMES[:d], "weight"]
    return write_csv(path, header, ([m, *ens.theta[m], ens.weights[m]] for m in range(ens.M)))


def read_particles(path):
    """Return ``(theta, weights)`` from a particles.csv file."""
    header, rows = read_csv(path)
    a = np.array([[float(v) for v in r] for r in rows])
    return a[:, 1:-1], a[:, -1]
