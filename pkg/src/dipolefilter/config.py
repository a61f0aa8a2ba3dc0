"""Experiment configuration read from TOML.

Every section is optional; missing keys take the library defaults.

``[geometry]``
    conductor_radius_m, source_shell_radius_m, grid_spacing_m, n_sensors,
    sensor_radius_m, rm_neighbor_radius_m, rw_neighbor_radius_m,
    source_max_polar_deg, sensor_max_polar_deg (meters, degrees).
``[model]``
    n_max, p_birth, death_rate (per dipole per step), sigma_q_nam,
    delta_parallel_factor, delta_base_var_nam2, birth_moment_var_nam2,
    birth_rate_poisson, rw_sigma_d (meters), noise_estimate
    (``"pooled"`` or ``"per-sensor"``, from the pre-stimulus block).
``[proposal]``
    q_birth, depth_weight_gamma, lambda_reg (absolute, tesla^2) or snr2 for
    the trace rule, pmf_floor.
``[filter]``
    variant, n_particles, seed, adaptive_resampling, ess_threshold,
    pilot_particles (for matched-budget runs).
``[scenario]``
    n_datasets, T, n_sources, stagger (steps), min_separation (meters),
    moment_magnitude_nam, noise_std_ft or snr, prestim (steps), waveform
    (``"constant"`` or ``"bell"``), seed.
``[metrics]``
    wm_sigma_m (meters).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .forward import GeometryConfig
from .model import ModelParams
from .proposals import ProposalParams
from .smc import VARIANTS
from .synthgen import ScenarioConfig


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass(frozen=True)
class FilterSettings:
    variant: str = "static-rm"
    n_particles: int = 2000
    seed: int = 0
    adaptive_resampling: bool = False
    ess_threshold: float = 0.5
    pilot_particles: int = 200

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.n_particles < 2 or self.pilot_particles < 2:
            raise ConfigError("n_particles and pilot_particles must be at least 2")
        if not 0 < self.ess_threshold <= 1:
            raise ConfigError("ess_threshold must lie in (0, 1]")


@dataclass(frozen=True)
class MetricSettings:
    wm_sigma_m: float = 0.01

    def validate(self) -> None:
        if self.wm_sigma_m <= 0:
            raise ConfigError("wm_sigma_m must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    model: ModelParams = field(default_factory=ModelParams)
    noise_estimate: str = "pooled"
    proposal: ProposalParams = field(default_factory=ProposalParams)
    filter: FilterSettings = field(default_factory=FilterSettings)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    metrics: MetricSettings = field(default_factory=MetricSettings)

    def as_dict(self) -> dict:
        model = dataclasses.asdict(self.model)
        model.pop("noise_cov_diag")
        model["noise_estimate"] = self.noise_estimate
        return {
            "geometry": dataclasses.asdict(self.geometry),
            "model": model,
            "proposal": dataclasses.asdict(self.proposal),
            "filter": dataclasses.asdict(self.filter),
            "scenario": dataclasses.asdict(self.scenario),
            "metrics": dataclasses.asdict(self.metrics),
        }


_SECTIONS = {
    "geometry": GeometryConfig,
    "model": ModelParams,
    "proposal": ProposalParams,
    "filter": FilterSettings,
    "scenario": ScenarioConfig,
    "metrics": MetricSettings,
}


def _build(cls, values: dict, section: str):
    allowed = {f.name for f in dataclasses.fields(cls)} - {"noise_cov_diag"}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    try:
        obj = cls(**values)
        if hasattr(obj, "validate"):
            obj.validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc
    return obj


def from_dict(data: dict) -> ExperimentConfig:
    """Build a validated config from nested dictionaries."""
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(unknown)}")
    parts = {}
    model = dict(data.get("model", {}))
    noise_estimate = model.pop("noise_estimate", "pooled")
    if noise_estimate not in ("pooled", "per-sensor"):
        raise ConfigError("[model] noise_estimate must be 'pooled' or 'per-sensor'")
    for name, cls in _SECTIONS.items():
        values = model if name == "model" else data.get(name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a table")
        parts[name] = _build(cls, values, name)
    return ExperimentConfig(noise_estimate=noise_estimate, **parts)


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a TOML file; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data)
