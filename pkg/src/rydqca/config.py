"""Experiment configuration files (TOML)."""

from __future__ import annotations

import hashlib
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import InvalidArgument

EXPERIMENTS = {
    "pxp_orbit": ("ideal", "physical"),
    "quasiparticle": ("ideal", "physical"),
    "rotation_scan": ("ideal",),
    "ghz_growth": ("ideal",),
    "bell": ("ideal", "physical"),
    "cluster": ("ideal", "clifford"),
    "graph_qca": ("ideal", "clifford"),
    "spam_demo": ("ideal",),
}

_TOP_KEYS = {"experiment", "engine", "seed", "shots", "output", "chain", "params", "noise", "spam", "schedule"}


class ConfigError(InvalidArgument):
    def __init__(self, message: str, path: str | Path = "<config>", line: int | None = None):
        where = f"{path}:{line}" if line else str(path)
        super().__init__(f"{where}: {message}")
        self.line = line


@dataclass
class ExperimentConfig:
    experiment: str
    engine: str
    seed: int
    shots: int = 0
    output: str | None = None
    chain: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    spam: dict = field(default_factory=dict)
    schedule: list = field(default_factory=list)
    source: str = ""
    path: str = "<config>"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.source.encode()).hexdigest()


def _line_of(text: str, key: str) -> int | None:
    pat = re.compile(rf"^\s*(\[{re.escape(key)}\]|{re.escape(key)}\s*=)")
    for k, line in enumerate(text.splitlines(), start=1):
        if pat.match(line):
            return k
    return None


def parse_config(text: str, path: str | Path = "<config>", seed_override: int | None = None) -> ExperimentConfig:
    try:
        doc: Mapping[str, Any] = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"not valid TOML ({exc})", path, int(m.group(1)) if m else None) from None

    unknown = sorted(set(doc) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", path, _line_of(text, unknown[0]))
    for key in ("experiment", "engine"):
        if key not in doc:
            raise ConfigError(f"missing required key {key!r}", path)
    if "seed" not in doc and seed_override is None:
        raise ConfigError("missing required key 'seed'", path)
    exp, eng = doc["experiment"], doc["engine"]
    if exp not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {exp!r}; choose from {sorted(EXPERIMENTS)}", path,
                          _line_of(text, "experiment"))
    if eng not in EXPERIMENTS[exp]:
        raise ConfigError(f"experiment {exp!r} does not support engine {eng!r}", path, _line_of(text, "engine"))
    seed = seed_override if seed_override is not None else doc["seed"]
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer", path, _line_of(text, "seed"))
    shots = doc.get("shots", 0)
    if not isinstance(shots, int) or shots < 0:
        raise ConfigError("shots must be a non-negative integer", path, _line_of(text, "shots"))
    for block in ("chain", "params", "noise", "spam"):
        if block in doc and not isinstance(doc[block], dict):
            raise ConfigError(f"{block!r} must be a table", path, _line_of(text, block))
    sched = doc.get("schedule", [])
    if not isinstance(sched, list):
        raise ConfigError("'schedule' must be an array of tables", path, _line_of(text, "schedule"))
    return ExperimentConfig(exp, eng, seed, shots, doc.get("output"), dict(doc.get("chain", {})),
                            dict(doc.get("params", {})), dict(doc.get("noise", {})), dict(doc.get("spam", {})),
                            list(sched), text, str(path))


def load_config(path: str | Path, seed_override: int | None = None) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config ({exc.strerror})", p) from None
    return parse_config(text, p, seed_override)
