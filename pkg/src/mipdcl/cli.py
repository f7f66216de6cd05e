"""Command-line entry points.

Every subcommand reads a JSON config, writes its results plus a
``manifest.json`` into ``--out-dir`` and exits with 0 on success, 2 on an
invalid config or invocation and 3 on a numerical failure.  Results are
staged in a temporary directory and only moved into place on success, so a
failing run leaves no partial outputs behind.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, as_list, axis_from, filter_from, hyper_from, load_config,
                     patient_from, policy_from, scenarios_from)
from .dosing import SimulationFailure, grade_of, optimize_dose
from .engine import CYCLE_HOURS, IntegrationError, Schedule, integrate, nadir_per_cycle, write_trajectory_csv
from .filtering import (PARAM_NAMES, DegenerateEnsembleError, FilterModel, ResidualModel, TdmObservation,
                        advance_to, fit_patient, loglik_landscape, patient_forcing, posterior_summary,
                        write_particles)
from .io import RunManifest, rng_stream, write_csv
from .learning import HYPER_COLUMNS
from .models import PRESETS, PkParams, get_preset, pk_vector
from .population import SCHEME_DAYS, generate_virtual_patient
from .trial import (OUTCOME_COLUMNS, Arm, d_optimal_design, hyper_rows, learning_run, outcome_rows, run_arm,
                    run_patient, trajectory_rows, write_audit)

log = logging.getLogger("mipdcl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (IntegrationError, FloatingPointError, DegenerateEnsembleError, SimulationFailure,
                  np.linalg.LinAlgError, OverflowError)


class Staging:
    """Temporary output directory committed into ``out_dir`` only on success."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.parent.mkdir(parents=True, exist_ok=True)
        self.path = Path(tempfile.mkdtemp(prefix=".mipdcl-stage-", dir=self.out_dir.parent))

    def commit(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for src in sorted(self.path.rglob("*")):
            if src.is_file():
                dst = self.out_dir / src.relative_to(self.path)
                dst.parent.mkdir(parents=True, exist_ok=True)
                shutil.move(str(src), dst)
        self.discard()

    def discard(self) -> None:
        shutil.rmtree(self.path, ignore_errors=True)


def _manifest(command, cfg, seed, presets) -> RunManifest:
    return RunManifest(config=cfg, seed=seed, command=command, tool_version=__version__,
                       presets={p: get_preset(p).to_dict() for p in sorted(set(presets))})


def _finish(manifest: RunManifest, stage: Path) -> None:
    for f in sorted(stage.rglob("*")):
        if f.is_file() and f.name != "manifest.json":
            manifest.record(f, stage)
    manifest.finished = time.time()
    manifest.write(stage)


# ---------------------------------------------------------------- subcommands


def cmd_simulate(args, stage: Path) -> RunManifest:
    cfg = load_config(args.config, "simulate")
    preset = get_preset(args.preset or cfg["preset"])
    cov = patient_from(cfg.get("patient"))
    per_m2 = cfg.get("doses_per_m2", [200.0] * 6)
    step = cfg.get("output_step_h", 1.0)
    n = len(per_m2)
    grid = tuple(np.arange(0.0, n * CYCLE_HOURS + 0.5 * step, step))
    sched = Schedule.q3w([d * cov.bsa for d in per_m2], n_cycles=n, obs_grid=grid)
    pd = preset.pd()
    pd = type(pd)(**{**pd.__dict__, "circ0": cov.baseline_anc})
    traj = integrate(PkParams(), pd, cov, sched, rtol=cfg.get("rtol", 1e-6))
    write_trajectory_csv(traj, stage / "trajectories.csv")
    nad = nadir_per_cycle(traj, sched)
    write_csv(stage / "nadirs.csv", ["cycle", "dose_mg", "nadir", "grade"],
              [[c, sched.doses[c - 1].amount, v, grade_of(v)] for c, v in nad])
    return _manifest("simulate", cfg, args.seed if args.seed is not None else cfg.get("seed", 0), [preset.name])


def _fit_common(cfg, args):
    preset = get_preset(args.preset or cfg.get("inference_model", "gold-standard"))
    cov = patient_from(cfg.get("patient"))
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    pf = filter_from(cfg.get("particle_filter"))
    obs = [(o["time_h"], o["anc"]) for o in cfg["observations"]]
    rng = rng_stream(seed, 0, 0, "filter")
    try:
        ens, model = fit_patient(preset, cov, cfg["doses_mg"], obs, rng, pf, hyper_from(cfg.get("hyperprior")))
    except ValueError as e:
        raise ConfigError([f"field observations: {e}"]) from e
    return preset, cov, seed, pf, ens, model


def cmd_fit(args, stage: Path) -> RunManifest:
    cfg = load_config(args.config, "fit")
    preset, _, seed, _, ens, _ = _fit_common(cfg, args)
    write_particles(ens, stage / "particles.csv")
    s = posterior_summary(ens)
    d = ens.theta.shape[1]
    write_csv(stage / "posterior_summary.csv", ["parameter", "mean", "sd", "q05", "q50", "q95", "ess"],
              [[PARAM_NAMES[j], s.mean[j], np.sqrt(s.cov[j, j]), s.quantiles[0.05][j], s.quantiles[0.5][j],
                s.quantiles[0.95][j], s.ess] for j in range(d)])
    return _manifest("fit", cfg, seed, [preset.name])


def cmd_dose(args, stage: Path) -> RunManifest:
    cfg = load_config(args.config, "dose")
    if not cfg["doses_mg"] and cfg["observations"]:
        raise ConfigError(["field observations: measurements need a preceding dose"])
    grid, weights, thr = policy_from(cfg)
    c = len(cfg["doses_mg"])
    t0 = c * CYCLE_HOURS
    preset, cov, seed, pf, ens, model = _fit_common(cfg, args)
    ens = advance_to(ens, model, t0, pf)
    dec = optimize_dose(ens, grid, weights, (t0, t0 + CYCLE_HOURS), model, pk_vector(PkParams(), cov), cov.bsa,
                        pf, thr, search=cfg.get("dose_search", "exhaustive"))
    write_csv(stage / "grade_probabilities.csv", ["dose_mg", "p0", "p1", "p2", "p3", "p4", "objective"],
              [[dec.doses_mg[k], *dec.p_grades[k], dec.objective[k]] for k in range(dec.doses_mg.size)])
    (stage / "dose_decision.json").write_text(json.dumps(dec.record(0, c + 1), indent=2, sort_keys=True) + "\n")
    return _manifest("dose", cfg, seed, [preset.name])


def cmd_trial(args, stage: Path) -> RunManifest:
    cfg = load_config(args.config, "trial")
    scenarios = scenarios_from(cfg, args.seed, args.preset)
    outcomes, traj, hyp = [], [], []
    for sc in scenarios:
        def progress(rep, k, arm=sc.arm.value):
            if (k + 1) % 10 == 0:
                log.info("%s replicate %d: %d patients done", arm, rep, k + 1)
        out = run_arm(sc, threads=args.threads, progress=progress)
        log.info("%s (%s): %d patients, %d failures", sc.arm.value, sc.scheme.value, len(out.patients),
                 out.failures)
        multi = len(as_list(cfg["scheme"])) > 1
        outcomes += [[*r, sc.scheme.value] if multi else r for r in outcome_rows(out)]
        traj += [[*r, sc.scheme.value] if multi else r for r in trajectory_rows(out)]
        hyp += [[sc.arm.value, sc.scheme.value, *r] for r in hyper_rows(out)]
        write_audit(out, stage)
        if multi:
            audit = stage / "audit"
            (audit / f"{sc.arm.value}.jsonl").rename(audit / f"{sc.arm.value}_{sc.scheme.value}.jsonl")
    extra = ["scheme"] if len(as_list(cfg["scheme"])) > 1 else []
    write_csv(stage / "outcomes.csv", OUTCOME_COLUMNS + extra, outcomes)
    write_csv(stage / "trajectories.csv", ["arm", "time_h", "median", "q05", "q95"] + extra, traj)
    if hyp:
        write_csv(stage / "hyperprior_trajectory.csv", ["arm", "scheme", *HYPER_COLUMNS], hyp)
    presets = [scenarios[0].inference_model, scenarios[0].data_gen.preset]
    return _manifest("trial", cfg, scenarios[0].seed, presets)


def cmd_learn(args, stage: Path) -> RunManifest:
    cfg = load_config(args.config, "trial")
    scenarios = scenarios_from({**cfg, "arm": "da_cl"}, args.seed, args.preset)
    dosing = Arm.parse(cfg.get("learning_dosing", "standard"))
    rows = []
    for sc in scenarios:
        for r in range(sc.replicates):
            trace = learning_run(sc, r, dosing)
            log.info("%s replicate %d: %d updates, %d skipped", sc.scheme.value, r, len(trace.indices),
                     trace.failures)
            rows += [[sc.scheme.value, *row] for row in trace.rows(r)]
    write_csv(stage / "hyperprior_trajectory.csv", ["scheme", *HYPER_COLUMNS], rows)
    presets = [scenarios[0].inference_model, scenarios[0].data_gen.preset]
    return _manifest("learn", cfg, scenarios[0].seed, presets)


def cmd_identifiability(args, stage: Path) -> RunManifest:
    cfg = load_config(args.config, "identifiability")
    ls = axis_from(cfg["grid"]["slope"], "slope")
    lc = axis_from(cfg["grid"]["circ0"], "circ0")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    inf = get_preset(args.preset or cfg.get("inference_model", "gold-standard"))
    scenario = scenarios_from({"data_gen": cfg.get("data_gen", "gold-standard"), "inference_model": inf.name,
                               "scheme": cfg.get("scheme", "rich"), "arm": "standard",
                               "n_patients": cfg.get("n_patients", 4), "seed": seed})[0]
    meta = []
    for k in range(scenario.n_patients):
        out, _ = run_patient(scenario, 0, k)
        vp = generate_virtual_patient(scenario.data_gen, rng_stream(seed, 0, k, "covariates"), k)
        days = SCHEME_DAYS[scenario.scheme]
        obs = [TdmObservation(t, v) for t, v, d in out.observations[1:] if d in days]
        model = FilterModel(inf, patient_forcing(out.covariates, out.doses))
        baseline = out.observations[0][1]
        prior = ((np.log(inf.slope), inf.omega_slope or 1.0), (np.log(baseline), inf.anc0_sd))
        land = loglik_landscape(obs, model, ResidualModel(inf.sigma), ls, lc, vp.true_params.as_array()[0],
                                prior=prior if cfg.get("use_prior", False) else None)
        S, C = np.meshgrid(land.log_slope, land.log_circ0, indexing="ij")
        write_csv(stage / f"landscape_{k}.csv", ["log_slope", "log_circ0", "loglik", "logpost"],
                  zip(S.ravel(), C.ravel(), land.loglik.ravel(), land.logpost.ravel()))
        truth = vp.true_params.as_array()
        meta.append({"patient": k, "file": f"landscape_{k}.csv", "log_mtt_fixed": float(truth[0]),
                     "true_log_slope": float(truth[1]), "true_log_circ0": float(truth[2]),
                     "ml_cell": list(land.ml_cell), "map_cell": list(land.map_cell), "n_observations": len(obs)})
    axes = {"log_slope": ls.tolist(), "log_circ0": lc.tolist()}
    (stage / "landscapes.json").write_text(json.dumps({"axes": axes, "patients": meta}, indent=2) + "\n")
    return _manifest("analyze identifiability", cfg, seed, [inf.name, scenario.data_gen.preset])


def cmd_design(args, stage: Path) -> RunManifest:
    cfg = load_config(args.config, "design")
    preset = args.preset or cfg.get("preset", "gold-standard")
    first, last = cfg.get("first_day", 2), cfg.get("last_day", 20)
    if last < first:
        raise ConfigError(["field last_day: design grid is empty (last_day < first_day)"])
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    bsa = cfg.get("bsa", 1.8)
    res = d_optimal_design(preset, population=cfg.get("population", False),
                           n_population=cfg.get("n_population", 200), seed=seed,
                           dose_mg=cfg.get("dose_per_m2", 200.0) * bsa, bsa=bsa,
                           days=np.arange(first, last + 1), h=cfg.get("fd_step", 1e-4))
    rows = [[int(a), int(b), res.criterion[i, j]] for i, a in enumerate(res.days) for j, b in enumerate(res.days)
            if a <= b]
    write_csv(stage / "design_surface.csv", ["t2_day", "t3_day", "log_det_fim"], rows)
    weekly = res.value(8, 15) if 8 in res.days and 15 in res.days else float("nan")
    write_csv(stage / "design_optimum.csv", ["t2_day", "t3_day", "log_det_fim", "weekly_log_det_fim"],
              [[res.best[0], res.best[1], res.best_value, weekly]])
    return _manifest("analyze design", cfg, seed, [preset])


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "dose": cmd_dose, "trial": cmd_trial, "learn": cmd_learn,
            ("analyze", "identifiability"): cmd_identifiability, ("analyze", "design"): cmd_design}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON config file")
    common.add_argument("--seed", type=int, help="override the config's seed")
    common.add_argument("--out-dir", default="out", help="output directory (default: out)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for independent patients")
    common.add_argument("--preset", choices=sorted(PRESETS), help="override the model preset")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="mipdcl", description="Neutrophil-guided paclitaxel precision dosing.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate one patient's ANC course")
    sub.add_parser("fit", parents=[common], help="particle-filter posterior of one patient")
    sub.add_parser("dose", parents=[common], help="dose decision for a patient's next cycle")
    sub.add_parser("trial", parents=[common], help="in-silico trial of one or more dosing arms")
    sub.add_parser("learn", parents=[common], help="continued-learning run of the population hyperprior")
    an = sub.add_parser("analyze", help="identifiability landscapes or optimal sampling design")
    asub = an.add_subparsers(dest="analysis", required=True)
    asub.add_parser("identifiability", parents=[common])
    asub.add_parser("design", parents=[common])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    key = (args.command, args.analysis) if args.command == "analyze" else args.command
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    stage = Staging(args.out_dir)
    try:
        manifest = COMMANDS[key](args, stage.path)
        _finish(manifest, stage.path)
    except ConfigError as e:
        stage.discard()
        for d in e.diagnostics:
            print(f"config error: {d}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as e:
        stage.discard()
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except BaseException:
        stage.discard()
        raise
    stage.commit()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
