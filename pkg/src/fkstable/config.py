"""Sectioned ``key = value`` run configuration with documented defaults.

Every key has a default; a key or section not listed in :data:`DEFAULTS` is
rejected with :class:`UnknownKeyError` so typos never pass silently.  The
effective configuration (defaults overlaid with the file and overrides) is
rendered canonically for artifact headers and hashed with SHA-256.
"""
from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from .model import (
    HardCutoff,
    ModelSpec,
    PerturbationF,
    ProbeConfig,
    cauchy_model,
    holder_perturbation,
    isotropic_model,
    one_sided_perturbation,
    stable_levy_constant,
    stable_model,
    table_model,
    threshold_perturbation,
    with_half_bound,
    zero_perturbation,
)

# section -> key -> (default, description)
DEFAULTS: dict[str, dict[str, tuple[str, str]]] = {
    "model": {
        "name": ("cauchy", "baseline: cauchy, stable, isotropic or table"),
        "alpha": ("1.0", "stability index in (0, 2); cauchy needs 1"),
        "dimension": ("1", "space dimension (isotropic only; the others are one-dimensional)"),
        "c2": ("auto", "constant kernel value 2C; auto gives the standard stable Levy density"),
        "table": ("", "CSV file with columns t,x,y,p (name = table)"),
        "envelope_lo": ("auto", "lower envelope constant M1; auto measures it"),
        "envelope_hi": ("auto", "upper envelope constant M2; auto measures it"),
        "probe_radius": ("10", "validation probe box half-width"),
        "probe_pairs": ("1000", "number of validation probe pairs"),
    },
    "perturbation": {
        "name": ("threshold", "F: threshold, onesided, holder or zero"),
        "c": ("0.1", "amplitude of threshold and onesided F"),
        "delta": ("0.5", "cutoff of threshold and onesided F"),
        "lam": ("1.0", "amplitude of holder F"),
        "beta": ("1.5", "exponent of holder F (must exceed alpha)"),
        "half_bound": ("auto", "declared bound on |F|; auto uses the natural one"),
    },
    "grid": {
        "t_max": ("0.5", "largest tabulated time"),
        "time_nodes": ("64", "number of time steps"),
        "radius": ("8", "half-width R of the space mesh"),
        "space_nodes": ("512", "number of space intervals"),
        "gamma": ("0.7", "geometric grading ratio toward the diagonal"),
        "grading_levels": ("60", "number of graded panels"),
        "gauss_order": ("6", "Gauss points per panel"),
        "target_radius": ("3", "targets z lie in [-target_radius, target_radius]"),
        "target_spacing": ("0.25", "spacing of target points"),
    },
    "sim": {
        "epsilon": ("0.5", "smallest simulated jump"),
        "paths": ("100000", "number of Monte Carlo paths"),
        "seed": ("1", "master seed"),
        "t": ("1.0", "simulation time"),
        "x0": ("0", "starting point (comma list in d > 1; one value is broadcast)"),
        "mode": ("discard", "small jumps: discard or stable_remainder"),
        "radius": ("10", "domain radius recorded with the run"),
        "block_size": ("4096", "paths per random-stream block"),
        "estimator": ("fk", "mc quantity: fk, moment or smallball"),
        "moment": ("1", "order n of the moment estimator"),
        "z": ("0", "small-ball centre"),
        "r": ("0.1", "small-ball radius"),
    },
    "series": {
        "n_max": ("10", "highest series order tabulated"),
        "K": ("0.5", "target contraction constant in (0, 1)"),
        "N": ("6", "truncation order of the density"),
        "orders": ("0,1,2,3", "orders written by qn"),
        "t": ("0.25,0.5", "grid times written by qn, density, kato and constants"),
        "x": ("0", "start points x"),
        "z": ("0,0.5,1", "end points z"),
        "self_convergence": ("true", "measure quadrature error against the half grid"),
        "declared_tol": ("0.01", "largest acceptable self-convergence error"),
    },
    "verify": {
        "growth_n_max": ("6", "orders checked against the growth bounds"),
        "semigroup_n": ("6", "truncation order of the semigroup check"),
        "compositions": ("4", "compositions used to extend the sandwich in time"),
        "mc_paths": ("100000", "paths of the series-vs-Monte-Carlo check"),
        "holder_paths": ("20000", "paths of the lower-bound panel"),
        "include_mc": ("true", "run the Monte Carlo checks"),
    },
    "fourier": {
        "omega_cutoff": ("40", "frequency cutoff scale of the Fourier inversion"),
        "nodes": ("16384", "quadrature nodes of the Fourier inversion"),
    },
}


class ConfigError(ValueError):
    """Malformed configuration: unreadable file, bad value or unknown key."""


class UnknownKeyError(ConfigError):
    def __init__(self, section: str, key: Optional[str] = None):
        self.section = section
        self.key = key
        if key is None:
            super().__init__(f"unknown config section [{section}]")
        else:
            super().__init__(f"unknown config key '{key}' in section [{section}]")


@dataclass(frozen=True)
class RunConfig:
    """Effective configuration: every documented key with its value as text."""

    values: dict

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def float(self, section: str, key: str) -> float:
        raw = self.get(section, key)
        try:
            v = float(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key} = {raw!r} is not a number") from None
        if not math.isfinite(v):
            raise ConfigError(f"{section}.{key} must be finite")
        return v

    def int(self, section: str, key: str) -> int:
        raw = self.get(section, key)
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key} = {raw!r} is not an integer") from None

    def bool(self, section: str, key: str) -> bool:
        raw = self.get(section, key).lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{section}.{key} = {raw!r} is not a boolean")

    def optional_float(self, section: str, key: str) -> Optional[float]:
        return None if self.get(section, key).lower() == "auto" else self.float(section, key)

    def floats(self, section: str, key: str) -> list[float]:
        raw = self.get(section, key)
        try:
            return [float(v) for v in raw.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"{section}.{key} = {raw!r} is not a list of numbers") from None

    def ints(self, section: str, key: str) -> list[int]:
        raw = self.get(section, key)
        try:
            return [int(v) for v in raw.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"{section}.{key} = {raw!r} is not a list of integers") from None

    def canonical(self) -> str:
        lines = []
        for section in DEFAULTS:
            lines.append(f"[{section}]")
            lines += [f"{key} = {self.values[section][key]}" for key in DEFAULTS[section]]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _check_key(section: str, key: str):
    if section not in DEFAULTS:
        raise UnknownKeyError(section)
    if key not in DEFAULTS[section]:
        raise UnknownKeyError(section, key)


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file at ``path``, then ``section.key=value`` overrides.

    :raises FileNotFoundError: when ``path`` does not exist
    :raises UnknownKeyError: for keys or sections without a documented default
    """
    values = {s: {k: v[0] for k, v in keys.items()} for s, keys in DEFAULTS.items()}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(p.read_text(), source=str(p))
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section, raw=True):
                _check_key(section, key)
                values[section][key] = value.strip()
    for item in overrides:
        name, sep, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        _check_key(section, key)
        values[section][key] = value.strip()
    return RunConfig(values)


# ---------------------------------------------------------------------------
# builders


def build_model(cfg: RunConfig) -> ModelSpec:
    name = cfg.get("model", "name").lower()
    alpha = cfg.float("model", "alpha")
    lo, hi = cfg.optional_float("model", "envelope_lo"), cfg.optional_float("model", "envelope_hi")
    if name == "cauchy":
        if alpha != 1.0:
            raise ConfigError("the cauchy baseline needs alpha = 1")
        return cauchy_model()
    if name == "stable":
        return stable_model(alpha, lo, hi, cfg.float("fourier", "omega_cutoff"), cfg.int("fourier", "nodes"))
    if name == "isotropic":
        c2 = cfg.optional_float("model", "c2")
        return isotropic_model(cfg.int("model", "dimension"), alpha,
                               stable_levy_constant(alpha) if c2 is None else c2)
    if name == "table":
        path = cfg.get("model", "table")
        if not path:
            raise ConfigError("model.table must name a CSV file when model.name = table")
        if not Path(path).is_file():
            raise FileNotFoundError(f"density table not found: {path}")
        return table_model(path, alpha, cfg.optional_float("model", "c2"), lo, hi)
    raise ConfigError(f"unknown model name {name!r} (cauchy, stable, isotropic, table)")


def build_perturbation(cfg: RunConfig) -> PerturbationF:
    name = cfg.get("perturbation", "name").lower()
    if name == "threshold":
        pert = threshold_perturbation(cfg.float("perturbation", "c"), cfg.float("perturbation", "delta"))
    elif name == "onesided":
        pert = one_sided_perturbation(cfg.float("perturbation", "c"), cfg.float("perturbation", "delta"))
    elif name == "holder":
        pert = holder_perturbation(cfg.float("perturbation", "lam"), cfg.float("perturbation", "beta"))
    elif name == "zero":
        pert = zero_perturbation()
    else:
        raise ConfigError(f"unknown perturbation name {name!r} (threshold, onesided, holder, zero)")
    half = cfg.optional_float("perturbation", "half_bound")
    return pert if half is None else with_half_bound(pert, half)


def build_probes(cfg: RunConfig) -> ProbeConfig:
    return ProbeConfig(cfg.float("model", "probe_radius"), cfg.int("model", "probe_pairs"))


def build_grid(cfg: RunConfig):
    from .series import Grid

    return Grid(
        t_max=cfg.float("grid", "t_max"), time_nodes=cfg.int("grid", "time_nodes"),
        radius=cfg.float("grid", "radius"), space_nodes=cfg.int("grid", "space_nodes"),
        gamma=cfg.float("grid", "gamma"), grading_levels=cfg.int("grid", "grading_levels"),
        gauss_order=cfg.int("grid", "gauss_order"), target_radius=cfg.float("grid", "target_radius"),
        target_spacing=cfg.float("grid", "target_spacing"),
    )


def build_path_config(cfg: RunConfig):
    from .pathsim import PathConfig, SmallJumpMode

    mode = cfg.get("sim", "mode").lower()
    try:
        mode = SmallJumpMode(mode)
    except ValueError:
        raise ConfigError(f"sim.mode = {mode!r} is not discard or stable_remainder") from None
    return PathConfig(epsilon=cfg.float("sim", "epsilon"), t_horizon=cfg.float("sim", "t"),
                      radius=cfg.float("sim", "radius"), small_jump_mode=mode,
                      block_size=cfg.int("sim", "block_size"))


def start_point(cfg: RunConfig, d: int) -> list[float]:
    x0 = cfg.floats("sim", "x0")
    if len(x0) == 1:
        return x0 * d
    if len(x0) != d:
        raise ConfigError(f"sim.x0 has {len(x0)} components, the model has dimension {d}")
    return x0


def epsilon_warning(cfg: RunConfig, pert: PerturbationF) -> Optional[str]:
    """Note when ``epsilon`` exceeds a hard cutoff, so ``A_t`` misses charged jumps."""
    eps = cfg.float("sim", "epsilon")
    if isinstance(pert.certificate, HardCutoff) and not pert.is_zero and eps > pert.certificate.delta:
        return f"epsilon {eps} exceeds the cutoff {pert.certificate.delta}: A_t is biased"
    return None
