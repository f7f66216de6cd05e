"""Statistical layer: individual and population parameters, hyperprior, residual error and virtual patients."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .engine import Schedule
from .io import write_csv
from .models import PRESETS, ModelPreset, PatientCovariates, PkParams, get_preset

BOUNDS = {"mtt": (10.0, 2000.0), "slope": (0.01, 500.0), "anc0": (0.01, 100.0), "gamma": (0.01, 5.0)}
LOG_LOWER = np.log([BOUNDS["mtt"][0], BOUNDS["slope"][0], BOUNDS["anc0"][0], BOUNDS["gamma"][0]])
LOG_UPPER = np.log([BOUNDS["mtt"][1], BOUNDS["slope"][1], BOUNDS["anc0"][1], BOUNDS["gamma"][1]])
MAX_REDRAWS = 100


@dataclass(frozen=True)
class IndividualParams:
    log_mtt: float
    log_slope: float
    log_anc0: float
    log_gamma: float | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError("individual parameters must be finite")

    def as_array(self) -> np.ndarray:
        vals = [self.log_mtt, self.log_slope, self.log_anc0]
        if self.log_gamma is not None:
            vals.append(self.log_gamma)
        return np.array(vals, dtype=float)

    @classmethod
    def from_array(cls, a) -> "IndividualParams":
        a = [float(v) for v in a]
        return cls(*a[:3], a[3] if len(a) > 3 else None)

    def in_bounds(self) -> bool:
        a = self.as_array()
        return bool(np.all((a >= LOG_LOWER[:a.size]) & (a <= LOG_UPPER[:a.size])))

    @property
    def mtt(self):
        return float(np.exp(self.log_mtt))

    @property
    def slope(self):
        return float(np.exp(self.log_slope))

    @property
    def anc0(self):
        return float(np.exp(self.log_anc0))


def clip_to_bounds(theta: np.ndarray) -> np.ndarray:
    """Clip log-parameter rows (..., d) to the guard box."""
    d = theta.shape[-1]
    return np.clip(theta, LOG_LOWER[:d], LOG_UPPER[:d])


def _check_spd(a, what, allow_semi=False):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or not np.allclose(a, a.T):
        raise ValueError(f"{what} must be a symmetric matrix")
    ev = np.linalg.eigvalsh(a)
    if ev.min() < 0 if allow_semi else ev.min() <= 0:
        raise ValueError(f"{what} is not positive {'semi-' if allow_semi else ''}definite")
    return a


@dataclass(frozen=True)
class PopulationParams:
    theta_tv: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta_tv", np.asarray(self.theta_tv, dtype=float))
        om = _check_spd(self.omega, "omega", allow_semi=True)
        object.__setattr__(self, "omega", om)


@dataclass(frozen=True)
class HyperPrior:
    """Normal-inverse-Wishart hyperprior on ``(theta_tv, Omega)``.

    ``theta_tv ~ N(mean, cov)`` and ``Omega ~ IW(psi, dof)`` with
    ``psi = (dof - n - 1) * omega_mean`` so that ``E[Omega] = omega_mean``.
    """

    mean: np.ndarray
    cov: np.ndarray
    omega_mean: np.ndarray
    dof: float

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "cov", _check_spd(self.cov, "hyperprior covariance"))
        object.__setattr__(self, "omega_mean", _check_spd(self.omega_mean, "omega mean"))
        n = self.mean.size
        if self.cov.shape != (n, n) or self.omega_mean.shape != (n, n):
            raise ValueError("hyperprior dimensions disagree")
        if not self.dof > n + 1:
            raise ValueError(f"dof must exceed {n + 1} for the inverse-Wishart mean to exist")

    @property
    def n(self) -> int:
        return self.mean.size

    @property
    def psi(self) -> np.ndarray:
        return (self.dof - self.n - 1) * self.omega_mean

    @classmethod
    def default(cls) -> "HyperPrior":
        """Gold-standard hyperprior on (log MTT, log Slope)."""
        return cls(mean=np.log([141.0, 2.6]), cov=np.diag([0.0013, 0.016]),
                   omega_mean=np.diag([0.0729, 0.2016]), dof=12.0)

    @classmethod
    def from_preset(cls, preset: ModelPreset, cov=(0.0013, 0.016), dof=12.0) -> "HyperPrior":
        om = np.diag([max(preset.omega_mtt, 1e-3) ** 2, max(preset.omega_slope, 1e-3) ** 2])
        return cls(np.log([preset.mtt, preset.slope]), np.diag(cov), om, dof)

    def population(self) -> PopulationParams:
        return PopulationParams(self.mean, self.omega_mean)

    def sample(self, rng, size=None):
        """Independent draws of ``(theta_tv, Omega)`` from the hyperprior."""
        from scipy.stats import invwishart
        k = 1 if size is None else size
        tv = rng.multivariate_normal(self.mean, self.cov, size=k)
        om = invwishart(df=self.dof, scale=self.psi).rvs(size=k, random_state=rng).reshape(k, self.n, self.n)
        return (tv[0], om[0]) if size is None else (tv, om)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist(),
                "omega_mean": self.omega_mean.tolist(), "dof": self.dof}

    @classmethod
    def from_dict(cls, d) -> "HyperPrior":
        return cls(np.array(d["mean"]), np.array(d["cov"]), np.array(d["omega_mean"]), float(d["dof"]))


@dataclass(frozen=True)
class ResidualModel:
    """Exponential residual error, additive on the log scale."""

    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("residual sigma must be positive")


def sample_individual(pop: PopulationParams, anc0_prior, rng, gamma_prior=None, size=None):
    """Draw individual log-parameters around the population values.

    ``anc0_prior = (log y0, theta_rv)`` implements the baseline method:
    ``Circ0 = y0 * exp(theta_rv * eta0)``.  ``gamma_prior = (log gamma, sd)``
    adds a fourth coordinate.  Draws outside the guard box are redrawn.
    Returns an :class:`IndividualParams` or, with ``size``, an array (size, d).
    """
    _check_spd(pop.omega, "omega", allow_semi=True)
    k = 1 if size is None else int(size)
    log_y0, theta_rv = anc0_prior
    d = 3 if gamma_prior is None else 4
    mean = np.concatenate([pop.theta_tv, [log_y0] + ([gamma_prior[0]] if gamma_prior else [])])
    sd_extra = [theta_rv] + ([gamma_prior[1]] if gamma_prior else [])

    def draw(n):
        eta = rng.multivariate_normal(np.zeros(2), pop.omega, size=n, method="eigh")
        extra = rng.standard_normal((n, d - 2)) * np.asarray(sd_extra)
        return mean + np.column_stack([eta, extra])

    out = draw(k)
    for _ in range(MAX_REDRAWS):
        bad = np.any((out < LOG_LOWER[:d]) | (out > LOG_UPPER[:d]), axis=1)
        if not bad.any():
            break
        out[bad] = draw(int(bad.sum()))
    else:
        out = clip_to_bounds(out)
    return IndividualParams.from_array(out[0]) if size is None else out


def log_likelihood(obs, predicted, res: ResidualModel) -> float:
    """Sum of log-normal densities of observations around predictions (log-scale Gaussian)."""
    obs = np.atleast_1d(np.asarray(obs, dtype=float))
    predicted = np.atleast_1d(np.asarray(predicted, dtype=float))
    if obs.shape != predicted.shape:
        raise ValueError("observations and predictions differ in length")
    if np.any(obs <= 0):
        raise ValueError("observations must be positive")
    if np.any(predicted <= 0):
        raise ValueError("predictions must be positive")
    r = np.log(obs) - np.log(predicted)
    return float(np.sum(-0.5 * np.log(2 * np.pi * res.sigma ** 2) - 0.5 * (r / res.sigma) ** 2))


def log_lik_matrix(obs, predicted, sigma) -> np.ndarray:
    """Log-likelihood of one observation vector for many prediction rows (..., J)."""
    r = np.log(np.asarray(obs, dtype=float)) - np.log(np.asarray(predicted, dtype=float))
    return np.sum(-0.5 * np.log(2 * np.pi * sigma ** 2) - 0.5 * (r / sigma) ** 2, axis=-1)


class SamplingScheme(str, enum.Enum):
    SPARSE = "sparse"
    INTERMEDIATE = "intermediate"
    RICH = "rich"


SCHEME_DAYS = {
    SamplingScheme.SPARSE: (1, 15),
    SamplingScheme.INTERMEDIATE: (1, 8, 15),
    SamplingScheme.RICH: (1, 4, 7, 10, 13, 16, 19),
}


def tdm_sample_times(scheme, sched: Schedule) -> list[float]:
    """Sampling times [h]; day ``d`` of a cycle is ``(d - 1) * 24`` h after its start.

    Day-1 samples coincide with the infusion start and therefore see the pre-dose state.
    """
    days = SCHEME_DAYS[SamplingScheme(scheme)]
    return [sched.cycle_start(c) + (d - 1) * 24.0 for c in range(sched.n_cycles) for d in days]


@dataclass(frozen=True)
class CovariateDistribution:
    bsa_mean: float = 1.8
    bsa_sd: float = 0.2
    bsa_range: tuple = (1.4, 2.4)
    age_range: tuple = (40.0, 75.0)
    p_male: float = 0.5
    bili_median: float = 7.0
    bili_sd: float = 0.3
    anc0_median: float = 6.48


@dataclass(frozen=True)
class DataGenSpec:
    """Data-generating side of a scenario.

    ``variability`` scales every random-effect SD (PD IIV, PK IIV/IOV, baseline
    spread and residual error); 0 produces the typical patient exactly.
    """

    preset: str = "gold-standard"
    covariates: CovariateDistribution = field(default_factory=CovariateDistribution)
    anc0_cv: float | None = None
    pk_variability: bool = True
    variability: float = 1.0

    @property
    def model(self) -> ModelPreset:
        if self.preset not in PRESETS:
            raise KeyError(f"unknown data-generating preset {self.preset!r}")
        return get_preset(self.preset)


@dataclass(frozen=True)
class VirtualPatient:
    id: int
    covariates: PatientCovariates
    true_params: IndividualParams
    pk_eta: dict
    pk_kappas: tuple
    model: ModelPreset

    def pd(self):
        p = self.true_params
        return self.model.pd(mtt=p.mtt, slope=p.slope, circ0=p.anc0,
                             gamma=None if p.log_gamma is None else float(np.exp(p.log_gamma)))


def generate_virtual_patient(spec: DataGenSpec, rng, patient_id=0, n_cycles=6, pk=PkParams()):
    """Covariates, true PD parameters and PK random effects of one virtual patient."""
    model = spec.model
    s = spec.variability
    cd = spec.covariates
    if s > 0:
        bsa = cd.bsa_mean
        for _ in range(MAX_REDRAWS):
            bsa = rng.normal(cd.bsa_mean, cd.bsa_sd)
            if cd.bsa_range[0] <= bsa <= cd.bsa_range[1]:
                break
        else:
            bsa = float(np.clip(bsa, *cd.bsa_range))
        age = rng.uniform(*cd.age_range)
        sex = int(rng.random() < cd.p_male)
        bili = float(np.exp(rng.normal(np.log(cd.bili_median), cd.bili_sd)))
    else:
        bsa, age, sex, bili = 1.8, 56.0, 1, 7.0
    anc0_cv = model.anc0_sd if spec.anc0_cv is None else spec.anc0_cv
    z = rng.standard_normal(3)
    true = IndividualParams(
        np.log(model.mtt) + s * model.omega_mtt * z[0],
        np.log(model.slope) + s * model.omega_slope * z[1],
        np.log(cd.anc0_median) + s * anc0_cv * z[2],
        np.log(model.gamma))
    eta, kappas = {}, []
    if spec.pk_variability:
        for name, w2 in pk.omega2.items():
            eta[name] = s * np.sqrt(w2) * rng.standard_normal()
        for _ in range(n_cycles):
            kappas.append({name: s * np.sqrt(p2) * rng.standard_normal() for name, p2 in pk.pi2.items()})
    else:
        kappas = [{} for _ in range(n_cycles)]
    cov = PatientCovariates(bsa=float(bsa), sex=sex, age=float(age), bili=bili,
                            baseline_anc=true.anc0)
    return VirtualPatient(patient_id, cov, true, eta, tuple(kappas), model)


def write_roster(patients, path):
    header = ["id", "bsa", "sex", "age", "bili", "baseline_anc", "mtt", "slope", "anc0", "gamma"]
    rows = ([p.id, p.covariates.bsa, p.covariates.sex, p.covariates.age, p.covariates.bili,
             p.covariates.baseline_anc, p.true_params.mtt, p.true_params.slope, p.true_params.anc0,
             float(np.exp(p.true_params.log_gamma)) if p.true_params.log_gamma is not None else None]
            for p in patients)
    return write_csv(path, header, rows)
