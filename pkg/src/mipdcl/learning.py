"""Population-level continued learning across patients.

After each patient, a Metropolis-Hastings-within-Gibbs chain over the typical
values, the IIV covariance and the patient's parameters turns the patient's
particle posterior into an updated normal-inverse-Wishart hyperprior.  Only
the particle ensemble and the previous hyperprior enter the update; raw
observations never do.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2, invwishart

from .filtering import ParticleEnsemble, weighted_cov
from .population import HyperPrior

log = logging.getLogger(__name__)

N_POP = 2  # population updates cover (log MTT, log Slope)
S_FLOOR = 1e-8


def theta_tv_conditional(theta_i, omega, hyper: HyperPrior):
    """Mean and covariance of the typical values given one patient and Omega."""
    s_inv = np.linalg.inv(hyper.cov)
    o_inv = np.linalg.inv(omega)
    sigma = np.linalg.inv(s_inv + o_inv)
    sigma = 0.5 * (sigma + sigma.T)
    mu = sigma @ (o_inv @ np.asarray(theta_i, dtype=float) + s_inv @ hyper.mean)
    return mu, sigma


def gibbs_theta_tv(theta_i, omega, hyper: HyperPrior, rng) -> np.ndarray:
    try:
        mu, sigma = theta_tv_conditional(theta_i, omega, hyper)
    except np.linalg.LinAlgError as e:
        raise FloatingPointError(f"singular matrix in typical-value conditional: {e}") from e
    return rng.multivariate_normal(mu, sigma, method="cholesky")


def omega_conditional(theta_i, theta_tv, hyper: HyperPrior):
    """Scale matrix and degrees of freedom of the inverse-Wishart conditional of Omega."""
    r = np.asarray(theta_i, dtype=float) - np.asarray(theta_tv, dtype=float)
    psi = hyper.psi + np.outer(r, r)
    return psi, hyper.dof + 1


def gibbs_omega(theta_i, theta_tv, hyper: HyperPrior, rng) -> np.ndarray:
    psi, dof = omega_conditional(theta_i, theta_tv, hyper)
    if np.linalg.eigvalsh(psi).min() <= 0:
        raise FloatingPointError("inverse-Wishart scale matrix is not positive definite")
    return np.asarray(invwishart.rvs(df=dof, scale=psi, random_state=rng)).reshape(psi.shape)


def mvn_logpdf(x, mean, cov) -> np.ndarray:
    """Gaussian log-density of rows of ``x``."""
    x = np.atleast_2d(x)
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, (x - mean).T)
    return -0.5 * np.sum(z * z, axis=0) - np.log(np.diag(L)).sum() - 0.5 * x.shape[1] * np.log(2 * np.pi)


def mh_log_ratio(proposal, current, theta_tv, omega, prior_mean, prior_omega) -> float:
    """Log of the acceptance ratio: the population prior swapped in for the original prior."""
    pts = np.vstack([proposal, current])
    new = mvn_logpdf(pts, theta_tv, omega)
    old = mvn_logpdf(pts, prior_mean, prior_omega)
    return float((new[0] - old[0]) - (new[1] - old[1]))


@dataclass
class EnsembleProposal:
    """Independence proposal: a weighted draw from the ensemble plus Gaussian jitter."""

    theta: np.ndarray
    weights: np.ndarray
    h: float = 0.05

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)[:, :N_POP]
        self.cw = np.cumsum(self.weights)
        self.cw[-1] = 1.0
        cov = weighted_cov(self.theta, np.asarray(self.weights))
        self.jitter = np.linalg.cholesky(self.h ** 2 * cov + 1e-14 * np.eye(N_POP)) if self.h > 0 else None

    def draw(self, rng) -> np.ndarray:
        m = min(int(np.searchsorted(self.cw, rng.random(), side="right")), self.cw.size - 1)
        x = self.theta[m].copy()
        if self.jitter is not None:
            x += self.jitter @ rng.standard_normal(N_POP)
        return x


def mh_theta_step(current, proposal_src, theta_tv, omega, original_prior, rng):
    """One Metropolis-Hastings update of the patient's (log MTT, log Slope).

    ``proposal_src`` is an :class:`EnsembleProposal` or a ParticleEnsemble;
    ``original_prior = (mean, Omega)`` is the prior the ensemble was built with.
    Returns ``(theta, accepted)``.
    """
    if isinstance(proposal_src, ParticleEnsemble):
        proposal_src = EnsembleProposal(proposal_src.theta, proposal_src.weights)
    current = np.asarray(current, dtype=float)[:N_POP]
    prop = proposal_src.draw(rng)
    la = mh_log_ratio(prop, current, theta_tv, omega, *original_prior)
    if not np.isfinite(la):
        log.warning("rejecting proposal with non-finite density ratio")
        return current, False
    if la >= 0 or rng.random() < np.exp(la):
        return prop, True
    return current, False


def floor_spd(a, floor=S_FLOOR) -> tuple[np.ndarray, bool]:
    """Symmetrize and lift eigenvalues to ``floor``; the flag reports whether lifting happened."""
    a = 0.5 * (a + a.T)
    w, v = np.linalg.eigh(a)
    if w.min() >= floor:
        return a, False
    return (v * np.maximum(w, floor)) @ v.T, True


def chain_ess(x) -> float:
    """Effective sample size of a scalar chain (initial positive sequence of autocorrelations)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or np.var(x) == 0:
        return float(n if np.var(x) == 0 else n)
    d = x - x.mean()
    f = np.fft.rfft(d, 2 * n)
    ac = np.fft.irfft(f * np.conj(f))[:n] / (d @ d)
    s = 0.0
    for k in range(1, n - 1, 2):
        pair = ac[k] + ac[k + 1]
        if pair <= 0:
            break
        s += pair
    return float(n / (1.0 + 2.0 * s))


@dataclass
class PopulationUpdateReport:
    theta_tv_draws: np.ndarray
    omega_draws: np.ndarray
    acceptance_rate: float
    hyper: HyperPrior
    chain_ess: float
    burn_in: int
    degenerate: bool = False


def population_update(ensemble: ParticleEnsemble, hyper_in: HyperPrior, L=1000, burn_in=200, rng=None,
                      h=0.05) -> PopulationUpdateReport:
    """Run the chain for one patient and summarize it into the next hyperprior."""
    if not L > burn_in >= 0:
        raise ValueError("need chain length L > burn_in >= 0")
    rng = np.random.default_rng() if rng is None else rng
    prop = EnsembleProposal(ensemble.theta, ensemble.weights, h)
    prior = (hyper_in.mean, hyper_in.omega_mean)
    theta_tv = hyper_in.mean.copy()
    omega = hyper_in.omega_mean.copy()
    theta_i = ensemble.weights @ ensemble.theta[:, :N_POP]
    tv = np.empty((L, N_POP))
    om = np.empty((L, N_POP, N_POP))
    acc = 0
    for l in range(L):
        theta_tv = gibbs_theta_tv(theta_i, omega, hyper_in, rng)
        omega = gibbs_omega(theta_i, theta_tv, hyper_in, rng)
        theta_i, ok = mh_theta_step(theta_i, prop, theta_tv, omega, prior, rng)
        acc += ok
        tv[l], om[l] = theta_tv, omega
    kept_tv, kept_om = tv[burn_in:], om[burn_in:]
    mean = kept_tv.mean(axis=0)
    S = np.atleast_2d(np.cov(kept_tv, rowvar=False))
    S, degenerate = floor_spd(S)
    if degenerate:
        log.warning("typical-value chain covariance floored")
    omega_mean = np.diag(np.diag(kept_om.mean(axis=0)))
    new = HyperPrior(mean, S, omega_mean, hyper_in.dof + 1)
    return PopulationUpdateReport(tv, om, acc / L, new, chain_ess(kept_tv[:, 0]), burn_in, degenerate)


def hpd_area(hyper: HyperPrior, level=0.95) -> float:
    """Area of the highest-density ellipse of the typical-value distribution."""
    return float(np.pi * chi2.ppf(level, N_POP) * np.sqrt(np.linalg.det(hyper.cov)))


def hyper_row(replicate, patient_index, hyper: HyperPrior, acceptance=float("nan")) -> list:
    return [replicate, patient_index, hyper.mean[0], hyper.mean[1], hyper.cov[0, 0], hyper.cov[0, 1],
            hyper.cov[1, 1], hyper.omega_mean[0, 0], hyper.omega_mean[1, 1], hyper.dof, acceptance]


HYPER_COLUMNS = ["replicate", "patient_index", "mean_log_mtt", "mean_log_slope", "s11", "s12", "s22",
                 "omega_mtt", "omega_slope", "nu", "mh_acceptance_rate"]


@dataclass
class LearningConfig:
    L: int = 1000
    burn_in: int = 200
    mh_jitter_h: float = 0.05


@dataclass
class LearningTrace:
    hypers: list = field(default_factory=list)
    acceptance: list = field(default_factory=list)
    indices: list = field(default_factory=list)
    failures: int = 0

    def rows(self, replicate=0):
        out = [hyper_row(replicate, 0, self.hypers[0])]
        out += [hyper_row(replicate, i, h, a) for i, h, a in zip(self.indices, self.hypers[1:], self.acceptance)]
        return out


def continued_learning_run(patients, hyper0: HyperPrior, config: LearningConfig = LearningConfig(),
                           rng_for=None, on_patient=None) -> LearningTrace:
    """Sequential learning over patients.

    ``patients`` is an iterable of callables; each takes the current hyperprior
    and returns that patient's posterior ParticleEnsemble (running its own
    data assimilation and dosing).  ``rng_for(i)`` supplies the chain RNG of
    patient ``i``.  Failing patients are logged and skipped.
    """
    trace = LearningTrace([hyper0])
    hyper = hyper0
    for i, run_patient in enumerate(patients):
        try:
            ens = run_patient(hyper)
            rep = population_update(ens, hyper, config.L, config.burn_in,
                                    rng_for(i) if rng_for else np.random.default_rng(i), config.mh_jitter_h)
        except (RuntimeError, FloatingPointError, ValueError, np.linalg.LinAlgError) as e:
            log.warning("patient %d skipped: %s", i, e)
            trace.failures += 1
            continue
        hyper = rep.hyper
        trace.hypers.append(hyper)
        trace.acceptance.append(rep.acceptance_rate)
        trace.indices.append(i + 1)
        if on_patient is not None:
            on_patient(i, rep)
    return trace
