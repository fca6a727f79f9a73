"""Scenario configuration files.

Flat UTF-8 ``key = value`` lines under ``[section]`` headers; ``#`` starts a
comment.  Unknown sections or keys are rejected with their line number.
Missing values default to the published scenario.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .core import DisturbanceSpec, Params, make_grid, polynomial
from .dynamics import DEFAULT_INITIAL, GRID_DAMPING, MODES, STARTUP_STEPS, Scenario


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


_NUM = float
_INT = int

SCHEMA = {
    "params": {"m": _NUM, "alpha": _NUM, "beta": _NUM, "c": _NUM, "gamma": _NUM},
    "grid": {"N": _INT, "dt": _NUM, "T": _NUM, "stride": _INT, "snapshots": "list",
             "filter": _NUM, "startup_steps": _INT},
    "mode": {"mode": str},
    "disturbance": {"internal": str, "external": str, "amplitude": _NUM, "frequency": _NUM,
                    "constant": _NUM, "internal_table": "table", "external_table": "table"},
    "initial": {k: "profile" for k in DEFAULT_INITIAL},
}

NAMED_PROFILES = {
    "zero": [0.0],
    "x": [0.0, 1.0],
    "2x": [0.0, 2.0],
    "x^2": [0.0, 0.0, 1.0],
    "x^3": [0.0, 0.0, 0.0, 1.0],
}


@dataclass
class Config:
    params: dict = field(default_factory=lambda: dict(m=5.0, alpha=1.0, beta=2.0, c=1.0, gamma=2.0))
    grid: dict = field(default_factory=lambda: dict(N=10, dt=1.0 / 2000.0, T=10.0, stride=20,
                                                    snapshots=None, filter=GRID_DAMPING,
                                                    startup_steps=STARTUP_STEPS))
    mode: str = "disturbance_loop"
    disturbance: dict = field(default_factory=lambda: dict(internal="cos_tip", external="sinusoid",
                                                           amplitude=1.0, frequency=3.0, constant=0.0,
                                                           internal_table=None, external_table=None))
    initial: dict = field(default_factory=dict)

    def scenario(self) -> Scenario:
        g = self.grid
        T = float(g["T"])
        snaps = g["snapshots"]
        if snaps is None:
            snaps = tuple(T * k / 4.0 for k in range(5))
        dist = DisturbanceSpec(
            internal_kind=self.disturbance["internal"],
            external_kind=self.disturbance["external"],
            amplitude=self.disturbance["amplitude"],
            frequency=self.disturbance["frequency"],
            constant=self.disturbance["constant"],
            internal_table=self.disturbance["internal_table"],
            external_table=self.disturbance["external_table"],
        )
        initial = {k: polynomial(v) for k, v in self.initial.items()}
        return Scenario(
            params=Params(**self.params),
            grid=make_grid(int(g["N"])),
            dt=float(g["dt"]),
            T=T,
            mode=self.mode,
            initial=initial,
            disturbance=dist,
            stride=int(g["stride"]),
            snapshot_times=tuple(snaps),
            grid_damping=float(g["filter"]),
            startup_steps=int(g["startup_steps"]),
        )


def _parse_profile(text, line):
    key = text.strip().lower().replace(" ", "")
    if key in NAMED_PROFILES:
        return NAMED_PROFILES[key]
    body = key[5:] if key.startswith("poly:") else key
    try:
        coeffs = [float(c) for c in re.split(r"[,;]", body) if c]
    except ValueError:
        raise ConfigError(f"profile must be a name {sorted(NAMED_PROFILES)} or ascending coefficients, got {text!r}", line)
    if not coeffs:
        raise ConfigError("empty profile", line)
    return coeffs


def _parse_table(text, line):
    pairs = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = re.split(r"[,\s]+", chunk)
        if len(parts) != 2:
            raise ConfigError(f"table entries are 'x, y' pairs separated by ';', got {chunk!r}", line)
        try:
            pairs.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ConfigError(f"non-numeric table entry {chunk!r}", line)
    if len(pairs) < 2:
        raise ConfigError("a table needs at least two points", line)
    xs, ys = zip(*pairs)
    return (tuple(xs), tuple(ys))


def _convert(kind, text, line):
    try:
        if kind == "list":
            return tuple(float(v) for v in re.split(r"[,\s]+", text.strip()) if v)
        if kind == "profile":
            return _parse_profile(text, line)
        if kind == "table":
            return _parse_table(text, line)
        if kind is int:
            val = float(text)
            if val != int(val):
                raise ValueError
            return int(val)
        return kind(text.strip())
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(f"cannot read {text.strip()!r}", line)


def parse_config(text: str) -> Config:
    cfg = Config()
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.fullmatch(r"\[([A-Za-z_]+)\]", line)
        if m:
            section = m.group(1)
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if section is None:
            raise ConfigError("entry outside of any section", lineno)
        if "=" not in line:
            if section == "mode":
                key, value = "mode", line
            else:
                raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        else:
            key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        val = _convert(SCHEMA[section][key], value, lineno)
        if section == "mode":
            if val not in MODES:
                raise ConfigError(f"unknown mode {val!r}", lineno)
            cfg.mode = val
        elif section == "initial":
            cfg.initial[key] = val
        else:
            getattr(cfg, section)[key] = val
    _validate(cfg)
    return cfg


def _validate(cfg: Config):
    for k, v in cfg.params.items():
        if not v > 0:
            raise ConfigError(f"parameter {k} must be positive")
    if cfg.grid["N"] < 8:
        raise ConfigError("grid N must be at least 8")
    if not cfg.grid["dt"] > 0 or cfg.grid["T"] < 0 or cfg.grid["stride"] < 1:
        raise ConfigError("grid needs dt > 0, T >= 0 and stride >= 1")
    try:
        cfg.scenario()
    except ValueError as exc:
        raise ConfigError(str(exc))


def load_config(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def default_config_text() -> str:
    return """\
# published scenario
[params]
m = 5
alpha = 1
beta = 2
c = 1
gamma = 2

[grid]
N = 10
dt = 0.0005
T = 10
stride = 20

[mode]
mode = disturbance_loop

[disturbance]
internal = cos_tip
external = sinusoid
amplitude = 1
frequency = 3

[initial]
w = x^2
l = x^3
z = 2x
"""


def profile_norm(y, x) -> float:
    return float(np.sqrt(np.trapezoid(np.asarray(y) ** 2, x)))
