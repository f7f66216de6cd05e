"""Loading and validation of JSON run configurations.

Every subcommand has a definition in ``schema/config.schema.json``; unknown
keys are rejected.  Errors carry the offending field path and, where it can
be located, the line in the config file.
"""

from __future__ import annotations

import json
import re
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

from .dosing import DoseGrid, DosePolicyWeights, GradeThresholds
from .filtering import FilterConfig
from .learning import LearningConfig
from .models import PatientCovariates
from .population import CovariateDistribution, DataGenSpec, HyperPrior
from .trial import Arm, TrialScenario

KINDS = ("simulate", "fit", "dose", "trial", "identifiability", "design")


class ConfigError(ValueError):
    """Invalid configuration; ``diagnostics`` lists one message per problem."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


@lru_cache(maxsize=None)
def schema() -> dict:
    return json.loads(resources.files("mipdcl").joinpath("schema/config.schema.json").read_text())


@lru_cache(maxsize=None)
def _validator(kind: str) -> Draft202012Validator:
    if kind not in KINDS:
        raise KeyError(f"unknown config kind {kind!r}")
    s = schema()
    return Draft202012Validator({"$defs": s["$defs"], "$ref": f"#/$defs/{kind}"})


def _line_of(text: str | None, path) -> int | None:
    """Best-effort line of the last named key on ``path`` in the raw JSON text."""
    if not text:
        return None
    keys = [p for p in path if isinstance(p, str)]
    if not keys:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(keys[-1]), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _describe(err, text) -> str:
    path = "/".join(str(p) for p in err.absolute_path) or "<root>"
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        msg = f"unknown key(s) {', '.join(extra)}"
        line = _line_of(text, list(err.absolute_path) + extra[:1])
    else:
        msg = err.message
        line = _line_of(text, list(err.absolute_path))
    where = f"line {line}, " if line else ""
    return f"{where}field {path}: {msg}"


def validate(config, kind: str, text: str | None = None) -> dict:
    errors = sorted(_validator(kind).iter_errors(config), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise ConfigError(_describe(e, text) for e in errors)
    return config


def load_config(path, kind: str) -> dict:
    """Read, parse and schema-check a config file."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError([f"cannot read config {path}: {e.strerror}"]) from e
    try:
        config = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError([f"line {e.lineno}, column {e.colno}: {e.msg}"]) from e
    return validate(config, kind, text)


def _semantic(fn, field):
    try:
        return fn()
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError([f"field {field}: {e}"]) from e


def patient_from(cfg: dict | None) -> PatientCovariates:
    return _semantic(lambda: PatientCovariates(**(cfg or {})), "patient")


def data_gen_from(cfg) -> DataGenSpec:
    if isinstance(cfg, str):
        return DataGenSpec(cfg)
    d = dict(cfg)
    if "covariates" in d:
        c = dict(d["covariates"])
        for k in ("bsa_range", "age_range"):
            if k in c:
                c[k] = tuple(c[k])
        d["covariates"] = CovariateDistribution(**c)
    return DataGenSpec(**d)


def filter_from(cfg: dict | None) -> FilterConfig:
    return _semantic(lambda: FilterConfig(**(cfg or {})), "particle_filter")


def hyper_from(cfg: dict | None) -> HyperPrior | None:
    if cfg is None:
        return None
    return _semantic(lambda: HyperPrior.from_dict(cfg), "hyperprior")


def policy_from(cfg: dict) -> tuple[DoseGrid, DosePolicyWeights, GradeThresholds]:
    grid = _semantic(lambda: DoseGrid(tuple(cfg["dose_grid"])) if "dose_grid" in cfg else DoseGrid(), "dose_grid")
    weights = _semantic(lambda: DosePolicyWeights(*cfg["lambda"]) if "lambda" in cfg else DosePolicyWeights(),
                        "lambda")
    thr = _semantic(lambda: GradeThresholds(tuple(cfg["thresholds"])) if "thresholds" in cfg else GradeThresholds(),
                    "thresholds")
    return grid, weights, thr


def as_list(v) -> list:
    return list(v) if isinstance(v, list) else [v]


def scenarios_from(cfg: dict, seed: int | None = None, preset: str | None = None) -> list[TrialScenario]:
    """One scenario per (scheme, arm) combination of a trial/learn config.

    ``seed`` and ``preset`` override the config's seed and inference model.
    """
    grid, weights, thr = policy_from(cfg)
    chain = _semantic(lambda: LearningConfig(**cfg.get("chain", {})), "chain")
    if not chain.L > chain.burn_in:
        raise ConfigError(["field chain: burn_in must be smaller than L"])
    common = dict(
        data_gen=_semantic(lambda: data_gen_from(cfg["data_gen"]), "data_gen"),
        inference_model=preset or cfg["inference_model"],
        n_patients=cfg["n_patients"], replicates=cfg.get("replicates", 1),
        seed=cfg["seed"] if seed is None else seed,
        dose_grid=grid, weights=weights, thresholds=thr, chain=chain,
        pf=filter_from(cfg.get("particle_filter")),
        dose_search=cfg.get("dose_search", "bisection"),
        hyper=hyper_from(cfg.get("hyperprior")),
        n_cycles=cfg.get("n_cycles", 6),
    )
    out = []
    for scheme in as_list(cfg["scheme"]):
        for arm in as_list(cfg["arm"]):
            out.append(_semantic(lambda: TrialScenario(scheme=scheme, arm=Arm.parse(arm), **common), "arm"))
    return out


def axis_from(cfg: dict, name: str) -> np.ndarray:
    if not cfg["max"] >= cfg["min"]:
        raise ConfigError([f"field grid/{name}: max must not be below min"])
    return np.log(np.geomspace(cfg["min"], cfg["max"], cfg["n"]))


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package (e.g. ``trial_structural_bias.json``)."""
    return Path(str(resources.files("mipdcl").joinpath("configs", name)))
