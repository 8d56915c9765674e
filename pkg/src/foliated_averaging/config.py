"""Strict INI configuration for the command-line runner.

Every section and key is declared in :data:`SCHEMA` with its parser and
default.  Unknown sections or keys and unparsable values are rejected with the
offending line number.  Keys left out take their defaults, which are recorded
in :attr:`RunConfig.defaults_applied` so the manifest can report them.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .averaging import NumericParams
from .harness import ExperimentConfig
from .levy import AtomLaw, LevyMeasureSpec, TruncatedNormalLaw, UniformLaw


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")
        self.line, self.key = line, key


# ---------------------------------------------------------------------------
# value parsers


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _optional_str(text: str):
    return None if text.strip().lower() in ("", "none") else text.strip()


def _int(text: str) -> int:
    value = float(text)
    if value != int(value):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(value)


_LAW_RE = re.compile(r"^\s*(\w+)\s*\((.*)\)\s*$")


def parse_law(text: str):
    """``uniform(a[, dim])``, ``truncnorm(sigma, cutoff[, dim])`` or ``atoms(z:p, ...)``.

    Atoms are scalars or ``|``-separated vectors, e.g. ``atoms(1|0:0.5, 0|1:0.5)``.
    """
    m = _LAW_RE.match(text)
    if not m:
        raise ValueError(f"cannot parse jump law {text!r}")
    name, args = m.group(1).lower(), m.group(2)
    if name == "uniform":
        vals = _floats(args)
        if len(vals) not in (1, 2):
            raise ValueError("uniform takes (a) or (a, dim)")
        return UniformLaw(vals[0], int(vals[1]) if len(vals) == 2 else 1)
    if name == "truncnorm":
        vals = _floats(args)
        if len(vals) not in (2, 3):
            raise ValueError("truncnorm takes (sigma, cutoff) or (sigma, cutoff, dim)")
        return TruncatedNormalLaw(vals[0], vals[1], int(vals[2]) if len(vals) == 3 else 1)
    if name == "atoms":
        atoms, probs = [], []
        for item in args.split(","):
            if not item.strip():
                continue
            z, _, pr = item.partition(":")
            if not pr:
                raise ValueError(f"atom {item.strip()!r} needs the form z:p")
            atoms.append(tuple(float(c) for c in z.split("|")))
            probs.append(float(pr))
        return AtomLaw(tuple(atoms), tuple(probs))
    raise ValueError(f"unknown jump law {name!r}")


def _law(text: str):
    return text.strip()


# section -> key -> (parser, default); parsed values stay plain python
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "experiment": {
        "system": (str.strip, "ou_lines"),
        "p": (float, 2.0),
        "T": (float, 1.0),
        "eps_grid": (_floats, (0.2, 0.1, 0.05, 0.025)),
        "n_paths": (_int, 200),
        "lambda_target": (_optional_float, None),
        "c": (float, 1.0),
        "c_grid": (_floats, (0.5, 1.0, 2.0)),
        "seed": (_int, 0),
        "eta0": (str.strip, "estimate"),
        "eta0_times": (_floats, (0.5, 1.0, 2.0, 4.0, 8.0)),
        "eta0_replications": (_int, 64),
        "q_table": (_optional_str, None),
    },
    "system": {
        "nu_rate": (float, 1.0),
        "nu_law": (_law, None),
        "nu_prime_rate": (float, 1.0),
        "nu_prime_law": (_law, "uniform(1)"),
        "c0": (float, 0.5),
        "beta": (float, 0.5),
        "kappa": (_optional_float, None),
        "v_bounds": (_floats, (-5.0, 5.0)),
        "x0": (_floats, None),
        "omega0": (float, 1.0),
        "gamma": (float, 0.5),
    },
    "numerics": {
        "h": (float, 1e-3),
        "ode_steps": (_int, 64),
        "leaf_h": (float, 1e-2),
        "burn_in": (float, 0.1),
        "batch_size": (_int, 100),
        "threads": (_int, None),
    },
    "estimate_q": {
        "v_grid": (_floats, (-1.0, -0.5, 0.0, 0.5, 1.0)),
        "horizon": (float, 1000.0),
        "replications": (_int, 64),
        "observable": (str.strip, "pi_K"),
    },
    "eta0": {
        "v": (_floats, (0.0,)),
        "observable": (str.strip, "pi_K"),
    },
    "simulate": {
        "eps": (float, 0.1),
        "path_index": (_int, 0),
    },
    "decompose": {
        "eps": (float, 0.1),
        "n_paths": (_int, 100),
    },
    "bihari": {
        "p_values": (_floats, (2.0, 3.0, 4.0)),
        "eps_T": (_floats, (0.01, 0.05, 0.1)),
        "c": (float, 1.0),
        "T": (float, 1.0),
        "m": (_int, 1000),
        "k": (float, 0.1),
    },
}


@dataclass
class RunConfig:
    values: dict
    defaults_applied: list = field(default_factory=list)
    source: str | None = None

    def section(self, name: str) -> dict:
        return self.values[name]

    @property
    def numerics(self) -> NumericParams:
        n = dict(self.values["numerics"])
        n["threads"] = n["threads"] or 1
        return NumericParams(**n)

    def system_params(self) -> dict:
        s = self.values["system"]
        name = self.values["experiment"]["system"]
        out = {"c0": s["c0"], "beta": s["beta"], "v_bounds": tuple(s["v_bounds"])}
        if s["kappa"] is not None:
            out["kappa"] = s["kappa"]
        if s["x0"] is not None:
            out["x0"] = tuple(s["x0"])
        if s["nu_law"] is not None:
            out["nu"] = LevyMeasureSpec(s["nu_rate"], parse_law(s["nu_law"]))
        elif s["nu_rate"] != 1.0:
            dim = 2 if name == "rotation_coupled" else 1
            out["nu"] = LevyMeasureSpec(s["nu_rate"], UniformLaw(1.0, dim))
        out["nu_prime"] = LevyMeasureSpec(s["nu_prime_rate"], parse_law(s["nu_prime_law"]))
        if name == "rotation_coupled":
            out["omega0"], out["gamma"] = s["omega0"], s["gamma"]
        out["p"] = self.values["experiment"]["p"]
        return out

    def experiment(self) -> ExperimentConfig:
        e = self.values["experiment"]
        return ExperimentConfig(
            system=e["system"], system_params=self.system_params(), p=e["p"], T=e["T"],
            eps_grid=e["eps_grid"], n_paths=e["n_paths"], lambda_target=e["lambda_target"], c=e["c"],
            c_grid=e["c_grid"], seed=e["seed"], numerics=self.numerics, eta0=e["eta0"],
            eta0_times=e["eta0_times"], eta0_replications=e["eta0_replications"], q_table=e["q_table"],
        )

    def snapshot(self) -> dict:
        return {sec: {k: (list(v) if isinstance(v, tuple) else v) for k, v in vals.items()}
                for sec, vals in self.values.items()}


def _line_index(text: str) -> dict:
    """Map ``(section, key)`` and ``(section, None)`` to 1-based line numbers."""
    where, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            where.setdefault((section, None), no)
        elif section is not None:
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip()
            where.setdefault((section, key), no)
    return where


def parse_config(text: str, source: str | None = None) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None,
                                       strict=True, default_section="__none__")
    parser.optionxform = str  # keep key case (T)
    try:
        parser.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " "), getattr(exc, "lineno", None)) from exc
    lines = _line_index(text)
    values, applied = {}, []
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]", lines.get((sec, None)), sec)
        for key in parser[sec]:
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]", lines.get((sec, key)), key)
    for sec, keys in SCHEMA.items():
        values[sec] = {}
        for key, (conv, default) in keys.items():
            if parser.has_option(sec, key):
                raw = parser.get(sec, key)
                try:
                    values[sec][key] = conv(raw)
                except (ValueError, TypeError) as exc:
                    raise ConfigError(f"bad value for {sec}.{key}: {exc}", lines.get((sec, key)), key) from exc
            else:
                values[sec][key] = default
                applied.append(f"{sec}.{key}")
    cfg = RunConfig(values, applied, source)
    try:
        cfg.experiment().build_system()
        if values["system"]["nu_law"] is not None:
            parse_law(values["system"]["nu_law"])
    except (ValueError, KeyError) as exc:
        bad = _blame(str(exc))
        raise ConfigError(f"invalid configuration: {exc}", lines.get(bad) if bad else None) from exc
    return cfg


_BLAME = (
    ("lambda", ("experiment", "lambda_target")),
    ("eps grid", ("experiment", "eps_grid")),
    ("n_paths", ("experiment", "n_paths")),
    ("p must", ("experiment", "p")),
    ("T must", ("experiment", "T")),
    ("c must", ("experiment", "c")),
    ("eta0", ("experiment", "eta0")),
    ("system", ("experiment", "system")),
    ("law", ("system", "nu_law")),
)


def _blame(message: str):
    for needle, where in _BLAME:
        if needle in message:
            return where
    return None


def load_config(path) -> RunConfig:
    """Parse a config file; a missing path means all defaults."""
    if path is None:
        return parse_config("", None)
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))
