"""In-silico trial orchestration: virtual patients, dosing arms, outcome metrics and design analyses."""

from __future__ import annotations

import enum
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dosing import (DoseGrid, DosePolicyWeights, GradeThresholds, StandardDosing, grade_of, optimize_dose,
                     standard_dose)
from .engine import CYCLE_HOURS, N_CYCLES, DoseEvent, PkForcing, pd_initial, propagate_pd, simulate_cycle
from .filtering import (FilterConfig, FilterModel, TdmObservation, advance_to, assimilate, init_ensemble,
                        patient_forcing)
from .io import rng_stream
from .learning import LearningConfig, LearningTrace, population_update
from .models import ModelPreset, PatientCovariates, PkParams, get_preset, initial_state, pk_vector
from .population import (SCHEME_DAYS, DataGenSpec, HyperPrior, ResidualModel, SamplingScheme,
                         generate_virtual_patient)

log = logging.getLogger(__name__)

TRACE_STEP = 12.0  # h, grid of stored true ANC courses
N_DAYS = 21


class Arm(str, enum.Enum):
    STANDARD = "standard"
    DA = "da"
    DA_CL = "da_cl"

    @classmethod
    def parse(cls, v) -> "Arm":
        if isinstance(v, cls):
            return v
        aliases = {"standarddosing": cls.STANDARD, "daguided": cls.DA, "daguidedpluscl": cls.DA_CL}
        key = str(v).lower().replace("_", "").replace("-", "").replace("+", "plus")
        if key in aliases:
            return aliases[key]
        return cls(str(v).lower())


@dataclass(frozen=True)
class TrialScenario:
    data_gen: DataGenSpec = field(default_factory=DataGenSpec)
    inference_model: str = "gold-standard"
    scheme: SamplingScheme = SamplingScheme.SPARSE
    arm: Arm = Arm.DA
    n_patients: int = 100
    replicates: int = 1
    seed: int = 0
    dose_grid: DoseGrid = field(default_factory=DoseGrid)
    weights: DosePolicyWeights = field(default_factory=DosePolicyWeights)
    thresholds: GradeThresholds = field(default_factory=GradeThresholds)
    chain: LearningConfig = field(default_factory=LearningConfig)
    pf: FilterConfig = field(default_factory=FilterConfig)
    dose_search: str = "bisection"
    hyper: HyperPrior | None = None
    n_cycles: int = N_CYCLES
    start_patient: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scheme", SamplingScheme(self.scheme))
        object.__setattr__(self, "arm", Arm.parse(self.arm))
        get_preset(self.inference_model)
        self.data_gen.model
        if self.n_patients < 1 or self.replicates < 1:
            raise ValueError("need at least one patient and one replicate")

    @property
    def inference(self) -> ModelPreset:
        return get_preset(self.inference_model)

    def initial_hyper(self) -> HyperPrior:
        if self.hyper is not None:
            return self.hyper
        if self.inference_model == "gold-standard":
            return HyperPrior.default()
        return HyperPrior.from_preset(self.inference)


@dataclass
class PatientOutcome:
    arm: Arm
    replicate: int
    patient: int
    doses: np.ndarray
    nadirs: np.ndarray
    grades: np.ndarray
    anc_course: np.ndarray
    track_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    track_means: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    decisions: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    covariates: object = None
    failed: bool = False


@dataclass
class TrialOutcome:
    scenario: TrialScenario
    patients: list
    hyper_traces: dict = field(default_factory=dict)
    failures: int = 0

    def grade_pct(self, replicate=None) -> np.ndarray:
        return aggregate_metrics(self.patients, replicate=replicate).grade_pct


def _noise_table(seed, rep, pid, n_cycles):
    """Standard-normal residual draws per (cycle, day); shared by all arms."""
    return rng_stream(seed, rep, pid, "noise").standard_normal((n_cycles, N_DAYS))


def _obs_days(scheme: SamplingScheme, arm: Arm):
    days = set(SCHEME_DAYS[scheme])
    if arm is Arm.STANDARD:
        days.add(15)  # the day-15 count drives standard dose reductions
    return sorted(days)


def course_grid(n_cycles=N_CYCLES):
    return np.arange(0.0, n_cycles * CYCLE_HOURS + 0.5, TRACE_STEP)


def run_patient(scenario: TrialScenario, replicate: int, pid: int, hyper: HyperPrior | None = None,
                arm: Arm | None = None, pk: PkParams = PkParams()):
    """Simulate one virtual patient under one dosing arm.

    Returns ``(PatientOutcome, final ParticleEnsemble or None)``.
    """
    arm = scenario.arm if arm is None else Arm.parse(arm)
    sc = scenario
    n_cyc = sc.n_cycles
    vp = generate_virtual_patient(sc.data_gen, rng_stream(sc.seed, replicate, pid, "covariates"), pid,
                                  n_cycles=n_cyc, pk=pk)
    cov = vp.covariates
    dg_model = vp.model
    sigma_dg = dg_model.sigma * sc.data_gen.variability
    eps = _noise_table(sc.seed, replicate, pid, n_cyc)
    true_pd = vp.pd().as_array()
    y = initial_state(vp.true_params.anc0)
    baseline = float(y[8] * np.exp(sigma_dg * eps[0, 0]))
    days = _obs_days(sc.scheme, arm)
    grid = course_grid(n_cyc)
    course = np.empty(grid.size)
    course[0] = y[8]

    inf = sc.inference
    use_filter = arm is not Arm.STANDARD
    if use_filter:
        cfg = sc.pf
        frng = rng_stream(sc.seed, replicate, pid, "filter")
        hyper = sc.initial_hyper() if hyper is None else hyper
        ens = init_ensemble(hyper, baseline, cfg.M, frng, inf.anc0_sd, cfg, gamma_typical=inf.gamma)
        fmodel = FilterModel(inf, PkForcing())
        pk_inf = pk_vector(pk, cov)
        res = ResidualModel(inf.sigma)
        track_t, track_m = [0.0], [ens.weights @ ens.theta]
    else:
        ens = None
    doses, nadirs, decisions, observed = np.zeros(n_cyc), np.zeros(n_cyc), [], [(0.0, baseline, 1)]
    dose, day15 = None, None
    for c in range(n_cyc):
        t0, t1 = c * CYCLE_HOURS, (c + 1) * CYCLE_HOURS
        if use_filter:
            ens = advance_to(ens, fmodel, t0, cfg)
            dec = optimize_dose(ens, sc.dose_grid, sc.weights, (t0, t1), fmodel, pk_inf, cov.bsa, cfg,
                                sc.thresholds, search=sc.dose_search)
            dose = dec.dose_mg
            decisions.append(dec.record(pid, c + 1))
        else:
            dose = standard_dose(cov, day15, dose, StandardDosing(thresholds=sc.thresholds))
        doses[c] = dose
        # samples of this cycle after day 1, then day 1 of the next cycle
        measured = [(t0 + (d - 1) * 24.0, c, d) for d in days if d > 1]
        if c + 1 < n_cyc and 1 in days:
            measured.append((t1, c + 1, 1))
        sel = (grid > t0) & (grid <= t1)
        t_out = np.unique(np.concatenate([[m[0] for m in measured], grid[sel]]))
        pk_true = pk_vector(pk, cov, vp.pk_eta, vp.pk_kappas[c])
        y, yout, nadirs[c] = simulate_cycle(y, pk_true, true_pd, [DoseEvent(t0, dose)], t0, t1, t_out)
        anc_at = dict(zip(t_out.tolist(), yout[:, 8]))
        course[sel] = [anc_at[t] for t in grid[sel]]
        if use_filter:
            fmodel.forcing = fmodel.forcing.extend(pk_inf, [DoseEvent(t0, dose)], t1, backend=cfg.backend)
        for t, cc, d in measured:
            val = float(anc_at[t] * np.exp(sigma_dg * eps[cc, d - 1]))
            observed.append((t, val, d))
            if d == 15 and cc == c:
                day15 = val
            if use_filter and d in SCHEME_DAYS[sc.scheme]:
                ens = assimilate(ens, TdmObservation(t, val, pid, cc + 1), fmodel, res, frng, cfg)
                track_t.append(t)
                track_m.append(ens.weights @ ens.theta)
    grades = grade_of(nadirs, sc.thresholds)
    out = PatientOutcome(arm, replicate, pid, doses, nadirs, np.asarray(grades), course, decisions=decisions,
                         observations=observed, covariates=cov)
    if use_filter:
        out.track_times, out.track_means = np.array(track_t), np.array(track_m)
    return out, ens


def _failed(arm, rep, pid, n_cyc):
    nan = np.full(n_cyc, np.nan)
    return PatientOutcome(arm, rep, pid, nan, nan, np.full(n_cyc, -1), np.full(course_grid(n_cyc).size, np.nan),
                          failed=True)


def _run_independent(args):
    scenario, rep, pid = args
    try:
        return run_patient(scenario, rep, pid)[0]
    except (RuntimeError, FloatingPointError, ValueError) as e:
        log.warning("replicate %d patient %d failed: %s", rep, pid, e)
        return _failed(scenario.arm, rep, pid, scenario.n_cycles)


def run_cl_replicate(scenario: TrialScenario, rep: int, progress=None):
    """Sequential DA-guided dosing with a population update after every patient."""
    hyper = scenario.initial_hyper()
    trace = LearningTrace([hyper])
    outs = []
    for k in range(scenario.n_patients):
        pid = scenario.start_patient + k
        try:
            out, ens = run_patient(scenario, rep, pid, hyper)
            rep_ = population_update(ens, hyper, scenario.chain.L, scenario.chain.burn_in,
                                     rng_stream(scenario.seed, rep, pid, "chain"), scenario.chain.mh_jitter_h)
        except (RuntimeError, FloatingPointError, ValueError, np.linalg.LinAlgError) as e:
            log.warning("replicate %d patient %d failed: %s", rep, pid, e)
            trace.failures += 1
            outs.append(_failed(scenario.arm, rep, pid, scenario.n_cycles))
            continue
        hyper = rep_.hyper
        trace.hypers.append(hyper)
        trace.acceptance.append(rep_.acceptance_rate)
        trace.indices.append(k + 1)
        outs.append(out)
        if progress:
            progress(rep, k)
    return outs, trace


def _run_cl(args):
    scenario, rep = args
    return run_cl_replicate(scenario, rep)


def run_arm(scenario: TrialScenario, threads: int = 1, progress=None) -> TrialOutcome:
    """Run every replicate and patient of a scenario's arm."""
    patients, traces, failures = [], {}, 0
    if scenario.arm is Arm.DA_CL:
        jobs = [(scenario, r) for r in range(scenario.replicates)]
        if threads > 1:
            with ProcessPoolExecutor(threads) as ex:
                results = list(ex.map(_run_cl, jobs))
        else:
            results = []
            for r in range(scenario.replicates):
                results.append(run_cl_replicate(scenario, r, progress))
        for r, (outs, trace) in enumerate(results):
            patients += outs
            traces[r] = trace
            failures += trace.failures
    else:
        jobs = [(scenario, r, scenario.start_patient + k) for r in range(scenario.replicates)
                for k in range(scenario.n_patients)]
        if threads > 1:
            with ProcessPoolExecutor(threads) as ex:
                patients = list(ex.map(_run_independent, jobs, chunksize=4))
        else:
            for j in jobs:
                patients.append(_run_independent(j))
                if progress:
                    progress(j[1], j[2])
        failures = sum(p.failed for p in patients)
    return TrialOutcome(scenario, patients, traces, failures)


@dataclass
class Aggregates:
    grade_counts: np.ndarray
    grade_pct: np.ndarray
    time: np.ndarray
    median: np.ndarray
    q05: np.ndarray
    q95: np.ndarray
    n: int


def aggregate_metrics(patients, replicate=None) -> Aggregates:
    """Per-cycle grade histograms and pointwise ANC median with a 90% band."""
    ps = [p for p in patients if not p.failed and (replicate is None or p.replicate == replicate)]
    if not ps:
        raise ValueError("no successful patients to aggregate")
    grades = np.array([p.grades for p in ps])
    n_cyc = grades.shape[1]
    counts = np.array([np.bincount(grades[:, c], minlength=5) for c in range(n_cyc)])
    courses = np.array([p.anc_course for p in ps])
    q05, med, q95 = np.quantile(courses, [0.05, 0.5, 0.95], axis=0)
    return Aggregates(counts, 100.0 * counts / len(ps), course_grid(n_cyc)[:courses.shape[1]], med, q05, q95,
                      len(ps))


def temporal_parameter_track(outcome: TrialOutcome):
    """Median over patients of the posterior-mean parameters after each assimilation.

    Returns ``(times, medians)`` with medians on the natural scale, columns
    MTT, Slope, Circ0 and, when inferred, gamma.
    """
    ps = [p for p in outcome.patients if not p.failed and p.track_times.size]
    if not ps:
        raise ValueError("no DA-arm tracks available")
    n = min(p.track_times.size for p in ps)
    times = ps[0].track_times[:n]
    means = np.array([np.exp(p.track_means[:n]) for p in ps])
    return times, np.median(means, axis=0)


def iiv_update_track(trace: LearningTrace) -> np.ndarray:
    """Rows ``(patient_index, omega2_mtt, omega2_slope, nu)`` across a learning run."""
    idx = [0] + list(trace.indices)
    return np.array([[i, h.omega_mean[0, 0], h.omega_mean[1, 1], h.dof] for i, h in zip(idx, trace.hypers)])


# ---------------------------------------------------------------- persistence

OUTCOME_COLUMNS = ["arm", "replicate", "patient", "cycle", "dose_mg", "nadir", "grade"]


def outcome_rows(outcome: TrialOutcome):
    arm = outcome.scenario.arm.value
    for p in outcome.patients:
        for c in range(len(p.doses)):
            yield [arm, p.replicate, p.patient, c + 1, p.doses[c], p.nadirs[c], int(p.grades[c])]


def trajectory_rows(outcome: TrialOutcome):
    agg = aggregate_metrics(outcome.patients)
    arm = outcome.scenario.arm.value
    for k, t in enumerate(agg.time):
        yield [arm, t, agg.median[k], agg.q05[k], agg.q95[k]]


def hyper_rows(outcome: TrialOutcome):
    for r, trace in sorted(outcome.hyper_traces.items()):
        yield from trace.rows(r)


def write_audit(outcome: TrialOutcome, out_dir):
    path = Path(out_dir) / "audit" / f"{outcome.scenario.arm.value}.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for p in outcome.patients:
            for d in p.decisions:
                fh.write(json.dumps({"replicate": p.replicate, **d}, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- continued learning runs


def learning_run(scenario: TrialScenario, replicate: int, dosing: Arm = Arm.STANDARD) -> LearningTrace:
    """Continued learning over patients whose doses follow ``dosing``.

    The individual ensemble of each patient is built from the current
    hyperprior; the trace holds the hyperprior after every update.
    """
    hyper = scenario.initial_hyper()
    trace = LearningTrace([hyper])
    for k in range(scenario.n_patients):
        pid = scenario.start_patient + k
        try:
            ens = learning_patient(scenario, replicate, pid, hyper, dosing)
            rep = population_update(ens, hyper, scenario.chain.L, scenario.chain.burn_in,
                                    rng_stream(scenario.seed, replicate, pid, "chain"), scenario.chain.mh_jitter_h)
        except (RuntimeError, FloatingPointError, ValueError, np.linalg.LinAlgError) as e:
            log.warning("replicate %d patient %d skipped: %s", replicate, pid, e)
            trace.failures += 1
            continue
        hyper = rep.hyper
        trace.hypers.append(hyper)
        trace.acceptance.append(rep.acceptance_rate)
        trace.indices.append(k + 1)
    return trace


def learning_patient(scenario, replicate, pid, hyper, dosing: Arm = Arm.STANDARD, pk: PkParams = PkParams()):
    """Posterior ensemble of one patient for the learning loop.

    With standard dosing the patient is simulated first and the scheme's
    measurements are assimilated afterwards in one pass; otherwise the full
    DA-guided patient is simulated.
    """
    if dosing is not Arm.STANDARD:
        return run_patient(replace(scenario, arm=Arm.DA), replicate, pid, hyper)[1]
    sc = scenario
    out, _ = run_patient(replace(sc, arm=Arm.STANDARD), replicate, pid, pk=pk)
    inf, cfg = sc.inference, sc.pf
    frng = rng_stream(sc.seed, replicate, pid, "filter")
    baseline = out.observations[0][1]
    ens = init_ensemble(hyper, baseline, cfg.M, frng, inf.anc0_sd, cfg, gamma_typical=inf.gamma)
    fmodel = FilterModel(inf, patient_forcing(out.covariates, out.doses, pk, cfg.backend))
    res = ResidualModel(inf.sigma)
    days = SCHEME_DAYS[sc.scheme]
    for t, v, d in out.observations[1:]:
        if d in days:
            ens = assimilate(ens, TdmObservation(t, v, pid), fmodel, res, frng, cfg)
    return ens


# ---------------------------------------------------------------- optimal design


@dataclass
class DesignResult:
    days: np.ndarray
    criterion: np.ndarray
    best: tuple
    best_value: float

    def value(self, t2_day, t3_day) -> float:
        i = int(np.flatnonzero(self.days == t2_day)[0])
        j = int(np.flatnonzero(self.days == t3_day)[0])
        return float(self.criterion[i, j])


def _sensitivities(theta, model: FilterModel, times, h):
    """Central finite-difference Jacobians of log ANC w.r.t. log parameters, shape (P, T, d)."""
    P, d = theta.shape
    pert = np.repeat(theta[:, None, :], 2 * d, axis=1)
    for j in range(d):
        pert[:, 2 * j, j] += h
        pert[:, 2 * j + 1, j] -= h
    flat = pert.reshape(-1, d)
    y0 = pd_initial(np.exp(flat[:, 2]))
    _, yout, _, st = propagate_pd(y0, model.pd_rows(flat), model.forcing, 0.0, float(times.max()),
                                  t_out=times)
    if np.any(st == 2):
        raise FloatingPointError("sensitivity simulation failed")
    la = np.log(yout[:, :, 5]).reshape(P, 2 * d, times.size)
    return np.stack([(la[:, 2 * j] - la[:, 2 * j + 1]) / (2 * h) for j in range(d)], axis=-1)


def d_optimal_design(preset="gold-standard", population=False, n_population=200, seed=0, dose_mg=None,
                     bsa=1.8, days=np.arange(2, 21), h=1e-4, pk: PkParams = PkParams()) -> DesignResult:
    """D-optimal choice of two sampling days after a fixed day-1 sample within the first cycle.

    The Fisher information of (log MTT, log Slope, log Circ0) under the
    exponential residual error is accumulated over the design's sampling
    times; ``population=True`` averages it over patients drawn from the
    model's variability.  Entries with ``t2 >= t3`` hold the criterion of the
    mirrored design (duplicates on the diagonal); singular designs are -inf.
    The optimum is searched over ``t2 < t3`` only.
    """
    m = get_preset(preset)
    cov = PatientCovariates(bsa=bsa)
    dose = 200.0 * bsa if dose_mg is None else dose_mg
    forcing = PkForcing().extend(pk_vector(pk, cov), [DoseEvent(0.0, dose)], CYCLE_HOURS)
    model = FilterModel(m, forcing)
    typical = np.log([m.mtt, m.slope, m.anc0_typical])
    if population:
        rng = rng_stream(seed, 0, 0, "design")
        z = rng.standard_normal((n_population, 3))
        theta = typical + z * np.array([m.omega_mtt, m.omega_slope, m.anc0_sd])
    else:
        theta = typical[None, :]
    days = np.asarray(days)
    times = np.concatenate([[0.0], (days - 1) * 24.0])
    J = _sensitivities(theta, model, times, h)
    s2 = m.sigma ** 2
    row0 = J[:, 0, :]
    crit = np.full((days.size, days.size), -np.inf)
    for a in range(days.size):
        for b in range(days.size):
            rows = np.stack([row0, J[:, a + 1, :], J[:, b + 1, :]], axis=1)
            fim = np.einsum("pti,ptj->ij", rows, rows) / (s2 * theta.shape[0])
            sign, logdet = np.linalg.slogdet(fim)
            singular = np.linalg.matrix_rank(fim) < fim.shape[0]
            crit[a, b] = logdet if sign > 0 and np.isfinite(logdet) and not singular else -np.inf
    # admissible designs have t2 < t3; duplicates stay in the surface for reference
    best = np.unravel_index(np.argmax(np.where(np.triu(np.ones_like(crit), 1) > 0, crit, -np.inf)), crit.shape)
    return DesignResult(days, crit, (int(days[best[0]]), int(days[best[1]])), float(crit[best]))
