"""Layered configuration: defaults < INI file < environment < command-line flags.

Environment keys are ``VGUIDE_<SECTION>_<KEY>`` (upper case). The tool paths
also honour the short forms ``VGUIDE_YOSYS`` and ``VGUIDE_EQY``.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

from .errors import ConfigurationError

DEFAULTS: dict[str, dict[str, object]] = {
    "run": {"seed": 0, "log_level": "INFO"},
    "paths": {"yosys": "", "eqy": ""},
    "corpus": {"min_lines": 4, "max_lines": 10000, "max_tokens": 1024, "workers": 1},
    "tokenizer": {"vocab_size": 512},
    "model": {"context_length": 256, "embed_dim": 128, "num_layers": 4, "num_heads": 4},
    "train": {
        "epochs": 4, "batch_size": 8, "lr_init": 3e-4, "lr_min": 0.0, "beta1": 0.9,
        "beta2": 0.95, "lam": 0.5, "grad_clip": 1.0, "heldout_fraction": 0.1,
    },
    "guidance": {
        "w": 1.5, "rho": 0.9, "tau": 0.75, "temperature": 0.8, "max_new_tokens": 256,
        "rank_by": "posterior",
    },
    "augment": {"temperature": 1.2, "samples_per_head": 4, "workers": 1},
    "labelers": {
        "syntax_timeout": 60.0, "nodes_timeout": 60.0, "sat_timeout": 600.0,
        "equiv_timeout": 600.0, "sat_repeats": 3, "max_processes": os.cpu_count() or 1,
    },
    "eval": {"n": 20, "ks": "1,5,10", "workers": 1},
}

_ALIASES = {("paths", "yosys"): "VGUIDE_YOSYS", ("paths", "eqy"): "VGUIDE_EQY"}

# (low, high, low inclusive, high inclusive); None = unbounded
_RANGES = {
    ("train", "lam"): (0.0, 1.0, True, True),
    ("train", "lr_init"): (0.0, None, False, True),
    ("train", "epochs"): (1, None, True, True),
    ("train", "batch_size"): (1, None, True, True),
    ("train", "heldout_fraction"): (0.0, 1.0, True, False),
    ("guidance", "w"): (0.0, None, True, True),
    ("guidance", "rho"): (0.0, 1.0, False, True),
    ("guidance", "tau"): (0.0, 1.0, True, True),
    ("guidance", "temperature"): (0.0, None, True, True),
    ("augment", "temperature"): (0.0, None, False, True),
    ("eval", "n"): (1, None, True, True),
}


def _coerce(section, key, raw):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            return str(raw).strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (TypeError, ValueError):
        raise ConfigurationError(f"[{section}] {key}: cannot parse {raw!r}") from None
    return str(raw)


def _check_range(section, key, value):
    bounds = _RANGES.get((section, key))
    if bounds is None:
        return
    lo, hi, lo_inc, hi_inc = bounds
    if lo is not None and (value < lo or (value == lo and not lo_inc)):
        raise ConfigurationError(f"[{section}] {key}={value} is below its allowed range")
    if hi is not None and (value > hi or (value == hi and not hi_inc)):
        raise ConfigurationError(f"[{section}] {key}={value} is above its allowed range")


@dataclass
class AppConfig:
    values: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.values[section][key]

    def section(self, name: str) -> dict:
        return dict(self.values[name])

    def as_dict(self) -> dict:
        return {s: dict(v) for s, v in self.values.items()}


def load_config(path=None, env=None, flags=None) -> AppConfig:
    """Resolve every key; ``flags`` maps (section, key) to explicitly passed values."""
    env = os.environ if env is None else env
    flags = flags or {}
    values = {s: dict(keys) for s, keys in DEFAULTS.items()}
    sources = {(s, k): "default" for s, keys in DEFAULTS.items() for k in keys}

    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config file {path}: {exc}") from None
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigurationError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigurationError(f"unknown key {key!r} in [{section}]")
                values[section][key] = _coerce(section, key, raw)
                sources[(section, key)] = "file"

    for section, keys in DEFAULTS.items():
        for key in keys:
            names = [f"VGUIDE_{section.upper()}_{key.upper()}"]
            if (section, key) in _ALIASES:
                names.append(_ALIASES[(section, key)])
            for name in names:
                if env.get(name) not in (None, ""):
                    values[section][key] = _coerce(section, key, env[name])
                    sources[(section, key)] = "env"
                    break

    for (section, key), value in flags.items():
        if value is None:
            continue
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigurationError(f"unknown setting {section}.{key}")
        values[section][key] = _coerce(section, key, value)
        sources[(section, key)] = "flag"

    for section, keys in values.items():
        for key, value in keys.items():
            _check_range(section, key, value)
    return AppConfig(values, sources)


def parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(part) for part in str(text).split(",") if part.strip())
    except ValueError:
        raise ConfigurationError(f"bad k list {text!r}") from None
    if not ks:
        raise ConfigurationError("empty k list")
    return ks
