"""Event-aware integration of the PK/PD system over a multi-cycle schedule.

Single-patient trajectories use the coupled nine-state integrator.  Particle
ensembles whose PK is shared (same patient, same doses) use a split path: the
central concentration is integrated once into a cubic-Hermite table and the
PD states of all particles are driven by that table.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .io import write_csv
from .models import (INFUSION_HOURS, N_STATES, STATE_NAMES, PatientCovariates, PdParams, PkParams,
                     Structure, dose_to_umol, initial_state, pk_vector)

log = logging.getLogger(__name__)

CYCLE_HOURS = 504.0
N_CYCLES = 6


class IntegrationError(RuntimeError):
    def __init__(self, msg, last_time=None):
        super().__init__(msg if last_time is None else f"{msg} (last valid time {last_time:g} h)")
        self.last_time = last_time


@dataclass(frozen=True)
class DoseEvent:
    time: float
    amount: float
    duration: float = INFUSION_HOURS
    occasion: int = 0

    def __post_init__(self):
        if self.time < 0 or self.amount < 0 or not self.duration > 0:
            raise ValueError(f"invalid dose event {self}")

    @property
    def rate_umol(self) -> float:
        return dose_to_umol(self.amount) / self.duration


@dataclass(frozen=True)
class Schedule:
    doses: tuple = ()
    cycle_length: float = CYCLE_HOURS
    n_cycles: int = N_CYCLES
    obs_grid: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "doses", tuple(self.doses))
        times = [d.time for d in self.doses]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("dose events must be strictly increasing in time")
        if self.n_cycles < 1 or not self.cycle_length > 0:
            raise ValueError("schedule needs at least one cycle of positive length")
        if times and times[-1] >= self.horizon:
            raise ValueError("dose after the end of the last cycle")

    @classmethod
    def q3w(cls, dose_mg, n_cycles=N_CYCLES, cycle_length=CYCLE_HOURS, duration=INFUSION_HOURS, obs_grid=None):
        """Day-1 dosing each cycle; ``dose_mg`` is a scalar or one value per cycle."""
        amounts = np.broadcast_to(np.asarray(dose_mg, dtype=float), (n_cycles,))
        doses = [DoseEvent(c * cycle_length, float(a), duration, c) for c, a in enumerate(amounts)]
        return cls(tuple(doses), cycle_length, n_cycles, obs_grid)

    @property
    def horizon(self) -> float:
        return self.cycle_length * self.n_cycles

    def cycle_start(self, c: int) -> float:
        """Start of zero-based cycle ``c``."""
        return c * self.cycle_length

    def windows(self) -> np.ndarray:
        starts = np.arange(self.n_cycles) * self.cycle_length
        return np.column_stack([starts, starts + self.cycle_length])

    def doses_in(self, t0, t1):
        return [d for d in self.doses if t0 <= d.time < t1]

    def grid(self) -> np.ndarray:
        if self.obs_grid is not None:
            return np.asarray(self.obs_grid, dtype=float)
        return np.arange(0.0, self.horizon + 0.5, 1.0)


@dataclass
class Trajectory:
    time: np.ndarray
    states: np.ndarray
    nadirs: np.ndarray | None = None
    structure: Structure = Structure.GOLD_STANDARD
    status: int = 0

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.time.ndim != 1 or np.any(np.diff(self.time) <= 0):
            raise ValueError("trajectory time grid must be strictly increasing")
        if self.states.shape != (self.time.size, N_STATES):
            raise ValueError("states must have shape (len(time), 9)")

    @property
    def anc(self) -> np.ndarray:
        return self.states[:, 8]

    @classmethod
    def from_anc(cls, time, anc):
        """Trajectory with only the circulating compartment populated (synthetic fixtures)."""
        anc = np.asarray(anc, dtype=float)
        states = np.zeros((anc.size, N_STATES))
        states[:, 8] = anc
        return cls(np.asarray(time, dtype=float), states)


def _atol(init, pk_scale, atol):
    if atol is not None:
        return np.broadcast_to(np.asarray(atol, dtype=float), (N_STATES,)).copy()
    scale = np.empty(N_STATES)
    scale[:3] = max(pk_scale, 1.0)
    scale[3:] = max(float(np.max(init[3:])), 1.0)
    return 1e-9 * scale


def integrate(pk: PkParams, pd: PdParams, cov: PatientCovariates, sched: Schedule, init=None,
              rtol=1e-6, atol=None, eta=None, kappas=None, backend=None) -> Trajectory:
    """Integrate one patient over the whole schedule.

    The integrator restarts at every cycle boundary, where the occasion
    deviations ``kappas[c]`` switch, and stops at every infusion start and stop.
    """
    y = initial_state(pd.circ0) if init is None else np.array(init, dtype=float)
    if y.shape != (N_STATES,) or not np.all(np.isfinite(y)) or np.any(y < 0):
        raise ValueError("initial state must be 9 finite non-negative values")
    pdv = pd.as_array()[None, :]
    grid = sched.grid()
    max_dose = max((dose_to_umol(d.amount) for d in sched.doses), default=0.0)
    at = _atol(y, max_dose, atol)
    out = np.empty((grid.size, N_STATES))
    nadirs = np.empty(sched.n_cycles)
    status = 0
    for c in range(sched.n_cycles):
        t0, t1 = sched.cycle_start(c), sched.cycle_start(c + 1)
        kappa = kappas[c] if kappas is not None else None
        pkv = pk_vector(pk, cov, eta, kappa)[None, :]
        doses = sched.doses_in(t0, t1)
        it = np.array([[d.time, d.time + d.duration] for d in doses]).reshape(-1, 2)
        rates = np.array([[d.rate_umol for d in doses]]).reshape(1, -1)
        last = c == sched.n_cycles - 1
        sel = (grid >= t0) & ((grid <= t1) if last else (grid < t1))
        y1, yout, nad, st, _ = kernels.simulate_segment(
            y[None, :], pkv, pdv, it, rates, t0, t1, t_out=grid[sel],
            windows=np.array([[t0, t1]]), rtol=rtol, atol=at, backend=backend)
        if st[0] == 2 or not np.all(np.isfinite(y1)):
            raise IntegrationError("integration failed", last_time=t0)
        if st[0] == 1:
            log.warning("circulating neutrophils floored during cycle %d", c + 1)
        status = max(status, int(st[0]))
        out[sel] = yout[0]
        nadirs[c] = nad[0, 0]
        y = y1[0]
    return Trajectory(grid, out, nadirs, pd.structure, status)


def simulate_cycle(y0, pk_vec, pd_vec, doses, t0, t1, t_out=None, rtol=1e-6, atol=None, backend=None):
    """Advance one patient over ``[t0, t1]`` with the coupled integrator.

    Returns ``(y1, y_out, nadir)`` where ``nadir`` is the ANC minimum on the interval.
    """
    y0 = np.asarray(y0, dtype=float)
    it = np.array([[d.time, d.time + d.duration] for d in doses], dtype=float).reshape(-1, 2)
    rates = np.array([[d.rate_umol for d in doses]], dtype=float).reshape(1, -1)
    at = _atol(y0, max((dose_to_umol(d.amount) for d in doses), default=float(y0[:3].max())), atol)
    tout = np.empty(0) if t_out is None else np.asarray(t_out, dtype=float)
    y1, yout, nad, st, _ = kernels.simulate_segment(
        y0[None, :], np.asarray(pk_vec, dtype=float)[None, :], np.asarray(pd_vec, dtype=float)[None, :],
        it, rates, float(t0), float(t1), t_out=tout, windows=np.array([[t0, t1]]), rtol=rtol, atol=at,
        backend=backend)
    if st[0] == 2 or not np.all(np.isfinite(y1)):
        raise IntegrationError("integration failed", last_time=t0)
    return y1[0], yout[0], float(nad[0, 0])


def nadir_per_cycle(traj: Trajectory, sched: Schedule) -> list[tuple[int, float]]:
    """Per-cycle ANC minima as ``(cycle, nadir)`` with one-based cycle numbers.

    Kernel-computed nadirs (dense output with local refinement) are used when
    the trajectory carries them; otherwise the minimum over the stored grid.
    """
    if traj.time[0] > 0 or traj.time[-1] < sched.horizon - 1e-9:
        raise ValueError("trajectory does not cover all cycles of the schedule")
    if traj.nadirs is not None and len(traj.nadirs) == sched.n_cycles:
        return [(c + 1, float(v)) for c, v in enumerate(traj.nadirs)]
    res = []
    for c, (t0, t1) in enumerate(sched.windows()):
        sel = (traj.time >= t0) & (traj.time < t1)
        if c == sched.n_cycles - 1:
            sel |= traj.time == t1
        if not sel.any():
            raise ValueError(f"no samples in cycle {c + 1}")
        res.append((c + 1, float(traj.anc[sel].min())))
    return res


def write_trajectory_csv(traj: Trajectory, path, observed=None):
    """Export columns ``time_h, cent, per1, per2, [stem], prol, t1, t2, t3, circ, anc_obs``.

    ``observed`` optionally supplies measured ANC per grid point (NaN where
    nothing was measured); by default ``anc_obs`` is the model observable.
    """
    cols = [i for i, n in enumerate(STATE_NAMES) if n != "stem" or traj.structure is Structure.BME]
    obs = traj.anc if observed is None else np.asarray(observed, dtype=float)
    header = ["time_h"] + [STATE_NAMES[i] for i in cols] + ["anc_obs"]
    rows = ([t, *traj.states[k, cols], None if np.isnan(obs[k]) else obs[k]]
            for k, t in enumerate(traj.time))
    return write_csv(path, header, rows)


@dataclass
class PkForcing:
    """Concentration history of one PK parameter set as a Hermite knot table.

    ``breakpoints`` are the infusion switches, where the forcing has kinks.
    """

    t: np.ndarray = field(default_factory=lambda: np.zeros(1))
    c1: np.ndarray = field(default_factory=lambda: np.zeros(1))
    dc1: np.ndarray = field(default_factory=lambda: np.zeros(1))
    breakpoints: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_pk: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    def extend(self, pk_vec, doses, t_end, backend=None, rtol=1e-8) -> "PkForcing":
        """New forcing continued to ``t_end`` with ``doses`` (DoseEvents) administered."""
        t0 = self.t_end
        if t_end <= t0:
            raise ValueError("forcing can only be extended forward in time")
        it = np.array([[d.time, d.time + d.duration] for d in doses], dtype=float).reshape(-1, 2)
        if it.size and it[:, 0].min() < t0:
            raise ValueError("dose before the end of the existing forcing")
        rates = np.array([d.rate_umol for d in doses], dtype=float)
        kt, kc, kd, y1 = kernels.pk_profile(self.y_pk, pk_vec, it, rates, t0, t_end, rtol=rtol,
                                            backend=backend)
        keep = 0 if self.t.size == 1 else self.t.size
        bps = np.concatenate([self.breakpoints, it.ravel()])
        return PkForcing(
            np.concatenate([self.t[:keep], kt]), np.concatenate([self.c1[:keep], kc]),
            np.concatenate([self.dc1[:keep], kd]), np.unique(bps), np.asarray(y1, dtype=float))

    def table(self):
        return self.t, self.c1, self.dc1

    def c1_at(self, t):
        from ._fallback import _hermite
        return _hermite(self.t, self.c1, self.dc1, np.asarray(t, dtype=float))


def pd_initial(circ0) -> np.ndarray:
    """PD steady states for each baseline value, shape (M, 6)."""
    circ0 = np.atleast_1d(np.asarray(circ0, dtype=float))
    return np.repeat(circ0[:, None], 6, axis=1)


def propagate_pd(y0, pd_rows, forcings, t0, t1, profile_index=None, t_out=None, windows=None,
                 rtol=1e-6, atol=None, backend=None):
    """Advance PD states of many particles on shared concentration histories.

    ``forcings`` is one :class:`PkForcing` or a list; ``profile_index`` maps each
    particle to its forcing.  Returns ``(y1, y_out, nadir, status)``.
    """
    if isinstance(forcings, PkForcing):
        forcings = [forcings]
    y0 = np.asarray(y0, dtype=float)
    M = y0.shape[0]
    pid = np.zeros(M, dtype=np.int64) if profile_index is None else np.asarray(profile_index, dtype=np.int64)
    for f in forcings:
        if f.t_end < t1 - 1e-9:
            raise ValueError("forcing does not cover the requested interval")
    if atol is None:
        atol = 1e-9 * max(1.0, float(np.max(pd_rows[:, 3])))
    bps = np.unique(np.concatenate([f.breakpoints for f in forcings]))
    y1, yout, nad, st, _ = kernels.simulate_pd(
        y0, np.ascontiguousarray(pd_rows, dtype=float), [f.table() for f in forcings], pid, bps,
        float(t0), float(t1), t_out=t_out, windows=windows, rtol=rtol, atol=atol, backend=backend)
    return y1, yout, nad, st
