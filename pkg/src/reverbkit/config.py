"""INI run configuration: every module default in one file.

Values are typed by their defaults. A file or ``section.key=value``
overrides may only set keys that exist here; anything else is a ConfigError.
"""
from __future__ import annotations

import configparser
import copy
import io

from .errors import ConfigError
from .flow import FlowTrainConfig
from .metrics import BlindRt60Config
from .rir import CorpusConfig
from .wpe import WpeConfig

DEFAULTS = {
    "dataset": {
        "n_items": 50,
        "seed": 0,
        "clean_source": "synthetic",
        "test_fraction": 0.2,
        "segment_s": 2.56,
        "encoding": "float32",
    },
    "rir": {
        "dims_low": (3.0, 3.0, 2.5),
        "dims_high": (10.0, 8.0, 4.0),
        "alpha_low": 0.1,
        "alpha_high": 0.6,
        "wall_margin": 0.5,
        "min_separation": 1.0,
        "max_order": 40,
        "speed_of_sound": 343.0,
    },
    "blind_rt60": {
        "n_bands": 8,
        "smooth_frames": 3,
        "active_db": 35.0,
        "fit_start_db": 5.0,
        "fit_stop_db": 40.0,
        "min_points": 3,
        "min_drop_db": 10.0,
    },
    "wpe": {
        "taps": 10,
        "delay": 3,
        "iterations": 3,
        "epsilon": 1e-8,
        "psd_context": 0,
    },
    "flow": {
        "steps": 10000,
        "batch": 64,
        "lr": 1e-3,
        "momentum": 0.9,
        "weight_decay": 0.0,
        "seed": 0,
        "sigma_min": 0.0,
        "cond_drop_prob": 0.1,
        "hidden": 256,
        "augment": 4,
    },
    "sample": {
        "steps": 32,
        "cfg_scale": 1.0,
        "seed": 0,
    },
    "eval": {
        "jobs": 1,
    },
}


def _coerce(default, raw, where):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            vals = tuple(float(v) for v in raw.replace(",", " ").split())
            if len(vals) != len(default):
                raise ValueError(f"expected {len(default)} values")
            return vals
        return raw.strip()
    except ValueError as e:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({e})") from e


def load_config(path=None, overrides=()):
    """Defaults, then the INI file at ``path``, then ``section.key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as f:
                parser.read_file(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except configparser.Error as e:
            raise ConfigError(f"malformed config {path}: {e}") from e
        for section in parser.sections():
            for key, raw in parser.items(section):
                _set(cfg, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.split(".", 1)
        _set(cfg, section.strip(), key.strip(), raw)
    return cfg


def _set(cfg, section, key, raw):
    if section not in cfg:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in cfg[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    cfg[section][key] = _coerce(DEFAULTS[section][key], str(raw), f"{section}.{key}")


def set_value(cfg, section, key, value):
    """Programmatic override (CLI flags); value goes through the same parser."""
    if isinstance(value, (tuple, list)):
        value = " ".join(str(v) for v in value)
    _set(cfg, section, key, value)


def snapshot(cfg):
    """JSON-friendly copy of the effective configuration."""
    return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in kv.items()} for s, kv in cfg.items()}


def dump_ini(cfg):
    parser = configparser.ConfigParser(interpolation=None)
    for section, kv in cfg.items():
        parser[section] = {k: " ".join(map(str, v)) if isinstance(v, tuple) else str(v) for k, v in kv.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def corpus_config(cfg) -> CorpusConfig:
    r = cfg["rir"]
    return CorpusConfig(r["dims_low"], r["dims_high"], r["alpha_low"], r["alpha_high"], r["wall_margin"],
                        r["min_separation"], r["max_order"], r["speed_of_sound"])


def wpe_config(cfg) -> WpeConfig:
    return WpeConfig(**cfg["wpe"])


def blind_config(cfg) -> BlindRt60Config:
    return BlindRt60Config(**cfg["blind_rt60"])


def train_config(cfg) -> FlowTrainConfig:
    kw = {k: v for k, v in cfg["flow"].items() if k != "augment"}
    return FlowTrainConfig(**kw)
