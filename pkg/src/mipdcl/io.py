"""CSV persistence with bit-stable number formatting, RNG streams and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STAGES = {"covariates": 0, "truth": 1, "noise": 2, "filter": 3, "chain": 4, "design": 5, "misc": 6}


def fmt(value) -> str:
    """Serialize one cell; floats use 17 significant digits so they round-trip exactly."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    return str(value)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def rng_stream(seed: int, replicate: int = 0, patient: int = 0, stage: str | int = "misc") -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, replicate, patient, stage)``.

    Each key gets its own Philox stream, so results do not depend on the
    order in which patients or replicates are processed.
    """
    stage_id = STAGES[stage] if isinstance(stage, str) else int(stage)
    ss = np.random.SeedSequence([int(seed), int(replicate), int(patient), stage_id])
    return np.random.Generator(np.random.Philox(ss))


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config)).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    config: dict
    seed: int
    command: str
    tool_version: str
    presets: dict = field(default_factory=dict)
    started: float = field(default_factory=time.time)
    finished: float | None = None
    outputs: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def record(self, path, root) -> None:
        self.outputs[str(Path(path).relative_to(root))] = file_digest(path)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "tool_version": self.tool_version,
            "presets": self.presets,
            "started": self.started,
            "finished": self.finished,
            "outputs": dict(sorted(self.outputs.items())),
        }

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        m = cls(config=d["config"], seed=d["seed"], command=d["command"],
                tool_version=d["tool_version"], presets=d.get("presets", {}),
                started=d["started"], finished=d.get("finished"))
        m.outputs = dict(d.get("outputs", {}))
        return m
