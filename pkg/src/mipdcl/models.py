"""Paclitaxel PK model, neutropenia PD structures and their named presets.

State layout used throughout the package (amounts in umol, cells in
1e9 cells/L)::

    0 cent   1 per1   2 per2   3 stem   4 prol   5 t1   6 t2   7 t3   8 circ

The gold-standard structure is the BME structure with ``ftr = 1``: the stem
compartment then has zero turnover and does not feed the proliferating pool.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

STATE_NAMES = ("cent", "per1", "per2", "stem", "prol", "t1", "t2", "t3", "circ")
PD_STATE_NAMES = STATE_NAMES[3:]
N_STATES = len(STATE_NAMES)

PACLITAXEL_MW = 853.906  # g/mol
INFUSION_HOURS = 3.0


class Structure(str, enum.Enum):
    GOLD_STANDARD = "gold-standard"
    BME = "bme"


@dataclass(frozen=True)
class PatientCovariates:
    bsa: float = 1.8
    sex: int = 1
    age: float = 56.0
    bili: float = 7.0
    baseline_anc: float = 6.48

    def __post_init__(self):
        for name in ("bsa", "age", "bili", "baseline_anc"):
            if not getattr(self, name) > 0:
                raise ValueError(f"covariate {name} must be positive, got {getattr(self, name)}")
        if self.sex not in (0, 1):
            raise ValueError("sex must be 0 (female) or 1 (male)")


TYPICAL_PATIENT = PatientCovariates()


@dataclass(frozen=True)
class PkParams:
    """Re-estimated paclitaxel PK model; ``q`` is an inter-compartmental clearance [L/h]."""

    v1: float = 10.8
    v3: float = 301.0
    km_el: float = 0.667
    vm_el: float = 35.9
    km_tr: float = 1.44
    vm_tr: float = 175.0
    k21: float = 1.12
    q: float = 16.8
    theta_bsa: float = 1.14
    theta_sex: float = 1.07
    theta_age: float = -0.447
    theta_bili: float = -0.0942
    omega2: dict = field(default_factory=lambda: {
        "v3": 0.1639, "vm_el": 0.0253, "km_tr": 0.3885, "vm_tr": 0.077, "k21": 0.008, "q": 0.1660})
    pi2: dict = field(default_factory=lambda: {"v1": 0.1391, "vm_el": 0.0231})
    sigma2: float = 0.0317

    def __post_init__(self):
        for name in ("v1", "v3", "km_el", "vm_el", "km_tr", "vm_tr", "k21", "q"):
            if not getattr(self, name) > 0:
                raise ValueError(f"PK parameter {name} must be positive")
        if any(v < 0 for v in {**self.omega2, **self.pi2}.values()) or self.sigma2 < 0:
            raise ValueError("variance entries must be non-negative")


@dataclass(frozen=True)
class PdParams:
    mtt: float
    slope: float
    gamma: float
    circ0: float
    ftr: float | None = None
    structure: Structure = Structure.GOLD_STANDARD

    def __post_init__(self):
        if not (self.mtt > 0 and self.slope >= 0 and self.gamma > 0 and self.circ0 > 0):
            raise ValueError("PD parameters out of domain")
        if self.structure is Structure.BME and not (self.ftr is not None and 0 < self.ftr < 1):
            raise ValueError("BME structure needs 0 < ftr < 1")

    @property
    def ktr(self) -> float:
        return 4.0 / self.mtt

    @property
    def effective_ftr(self) -> float:
        return self.ftr if self.structure is Structure.BME else 1.0

    def as_array(self) -> np.ndarray:
        """Kernel layout ``ktr, slope, gamma, circ0, ftr``."""
        return np.array([self.ktr, self.slope, self.gamma, self.circ0, self.effective_ftr])


@dataclass(frozen=True)
class ModelPreset:
    """A neutropenia model as used for data generation or inference.

    Variabilities are log-scale standard deviations (CV as reported); the
    baseline term ``anc0_sd`` is the combined IIV/RUV parameter of baseline
    method B2 and ``sigma`` the exponential residual error.
    """

    name: str
    structure: Structure
    mtt: float
    slope: float
    gamma: float
    ftr: float | None
    omega_mtt: float
    omega_slope: float
    anc0_sd: float
    sigma: float
    anc0_typical: float = 6.48

    def pd(self, mtt=None, slope=None, gamma=None, circ0=None) -> PdParams:
        return PdParams(
            mtt=self.mtt if mtt is None else mtt,
            slope=self.slope if slope is None else slope,
            gamma=self.gamma if gamma is None else gamma,
            circ0=self.anc0_typical if circ0 is None else circ0,
            ftr=self.ftr,
            structure=self.structure,
        )

    @property
    def omega(self) -> np.ndarray:
        """IIV covariance of (log MTT, log Slope)."""
        return np.diag([self.omega_mtt ** 2, self.omega_slope ** 2])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["structure"] = self.structure.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelPreset":
        d = dict(d)
        d["structure"] = Structure(d["structure"])
        return cls(**d)


PRESETS = {
    "gold-standard": ModelPreset(
        "gold-standard", Structure.GOLD_STANDARD, mtt=141.0, slope=2.6, gamma=0.2, ftr=None,
        omega_mtt=0.270, omega_slope=0.449, anc0_sd=0.316, sigma=0.316),
    "gold-standard-R": ModelPreset(
        "gold-standard-R", Structure.GOLD_STANDARD, mtt=128.0, slope=4.48, gamma=0.231, ftr=None,
        omega_mtt=0.0, omega_slope=0.438, anc0_sd=0.603, sigma=0.603),
    "bme": ModelPreset(
        "bme", Structure.BME, mtt=145.0, slope=13.1, gamma=0.257, ftr=0.787,
        omega_mtt=0.0, omega_slope=0.448, anc0_sd=0.515, sigma=0.515),
}


def get_preset(name_or_preset) -> ModelPreset:
    if isinstance(name_or_preset, ModelPreset):
        return name_or_preset
    try:
        return PRESETS[name_or_preset]
    except KeyError:
        raise KeyError(f"unknown model preset {name_or_preset!r}; known: {sorted(PRESETS)}") from None


def load_preset(path) -> ModelPreset:
    """Read a preset from a JSON file with the fields of :class:`ModelPreset`."""
    return ModelPreset.from_dict(json.loads(Path(path).read_text()))


def covariate_vm_el(cov: PatientCovariates, pk: PkParams = PkParams()) -> float:
    """Typical maximal elimination rate [umol/h] of one patient."""
    if not (cov.bsa > 0 and cov.age > 0 and cov.bili > 0):
        raise ValueError("covariates must be positive")
    return (pk.vm_el
            * (cov.bsa / 1.8) ** pk.theta_bsa
            * pk.theta_sex ** cov.sex
            * (cov.age / 56.0) ** pk.theta_age
            * (cov.bili / 7.0) ** pk.theta_bili)


def pk_vector(pk: PkParams, cov: PatientCovariates, eta: dict | None = None,
              kappa: dict | None = None) -> np.ndarray:
    """Kernel layout ``v1, km_el, vm_el, km_tr, vm_tr, k21, k13, k31`` for one occasion.

    ``eta`` holds IIV deviations and ``kappa`` IOV deviations (log scale);
    missing entries are zero.
    """
    eta = eta or {}
    kappa = kappa or {}

    def ind(name, value):
        return value * np.exp(eta.get(name, 0.0) + kappa.get(name, 0.0))

    v1 = ind("v1", pk.v1)
    v3 = ind("v3", pk.v3)
    q = ind("q", pk.q)
    return np.array([
        v1, pk.km_el, ind("vm_el", covariate_vm_el(cov, pk)), ind("km_tr", pk.km_tr),
        ind("vm_tr", pk.vm_tr), ind("k21", pk.k21), q / v1, q / v3,
    ])


def dose_to_umol(dose_mg: float) -> float:
    return dose_mg / PACLITAXEL_MW * 1000.0


def pk_rhs(t, x, pk_vec, infusion_rate=0.0):
    """PK derivative of ``cent, per1, per2`` for a kernel-layout PK vector."""
    v1, km_el, vm_el, km_tr, vm_tr, k21, k13, k31 = pk_vec
    cent, per1, per2 = x[0], x[1], x[2]
    c1 = cent / v1
    elim = c1 * vm_el / (km_el + c1)
    transfer = c1 * vm_tr / (km_tr + c1)
    return np.array([
        infusion_rate - elim + k21 * per1 - transfer + k31 * per2 - k13 * cent,
        transfer - k21 * per1,
        k13 * cent - k31 * per2,
    ])


def pd_rhs(t, x, pd: PdParams, c1):
    """PD derivative of ``stem, prol, t1, t2, t3, circ`` at concentration ``c1`` [umol/L]."""
    stem, prol, t1, t2, t3, circ = x
    if circ <= 0:
        raise FloatingPointError("circulating neutrophils must stay positive")
    ktr = pd.ktr
    ftr = pd.effective_ftr
    growth = (1.0 - pd.slope * c1) * (pd.circ0 / circ) ** pd.gamma
    kprol, kstem = ftr * ktr, (1.0 - ftr) * ktr
    return np.array([
        kstem * stem * growth - kstem * stem,
        kprol * prol * growth + kstem * stem - ktr * prol,
        ktr * (prol - t1),
        ktr * (t1 - t2),
        ktr * (t2 - t3),
        ktr * (t3 - circ),
    ])


def initial_state(circ0: float) -> np.ndarray:
    """Drug-free steady state: empty PK compartments, all PD compartments at ``circ0``."""
    return np.array([0.0, 0.0, 0.0] + [circ0] * 6)


def observe_anc(x) -> np.ndarray:
    """Neutrophil observable: the circulating compartment."""
    return np.asarray(x)[..., 8]


def pd_arrays(preset: ModelPreset, log_mtt, log_slope, log_circ0, log_gamma=None) -> np.ndarray:
    """Kernel PD rows for many particles of one preset."""
    log_mtt = np.asarray(log_mtt, dtype=float)
    n = log_mtt.size
    gamma = np.full(n, preset.gamma) if log_gamma is None else np.exp(np.asarray(log_gamma, dtype=float))
    ftr = preset.ftr if preset.structure is Structure.BME else 1.0
    return np.column_stack([
        4.0 / np.exp(log_mtt), np.exp(np.asarray(log_slope, dtype=float)), gamma,
        np.exp(np.asarray(log_circ0, dtype=float)), np.full(n, ftr),
    ])


def with_overrides(preset: ModelPreset, **kw) -> ModelPreset:
    return replace(preset, **kw)
