"""Synthetic staggered-source datasets for benchmarking the filters."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .metrics import DipolePointSet
from .model import NAM


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    """Dataset protocol.

    Sources switch on one at a time every ``stagger`` steps and switch off
    in the same order so the active count returns to zero by ``T``. Noise is
    either an absolute std in femtotesla or, when ``snr`` is set, scaled so
    that ``||noiseless||_F / E||noise||_F`` equals it. ``waveform="bell"``
    replaces the constant amplitude by a Gaussian bump peaking mid-lifetime.
    """

    n_datasets: int = 100
    T: int = 70
    n_sources: int = 5
    stagger: int = 5
    min_separation: float = 0.03
    moment_magnitude_nam: float = 1.0
    noise_std_ft: float = 2.5
    snr: float | None = None
    prestim: int = 5
    waveform: str = "constant"
    seed: int = 0
    max_tries: int = 10_000

    def validate(self) -> None:
        if self.n_sources < 1 or self.stagger < 1 or self.T < 1:
            raise ScenarioError("n_sources, stagger and T must be positive")
        if self.n_sources * self.stagger >= self.T:
            raise ScenarioError("n_sources * stagger must be smaller than T")
        if self.min_separation <= 0:
            raise ScenarioError("min_separation must be positive")
        if self.prestim < 2:
            raise ScenarioError("need at least two pre-stimulus samples")
        if self.waveform not in ("constant", "bell"):
            raise ScenarioError("waveform must be 'constant' or 'bell'")
        if self.noise_std_ft <= 0 and self.snr is None:
            raise ScenarioError("noise level must be positive")


@dataclass(frozen=True, eq=False)
class ExperimentRecord:
    """One dataset: truth per time step, measurements (tesla), noise-only block."""

    source_locations: np.ndarray  # grid indices
    source_moments: np.ndarray  # (n_sources, 3) in A m
    schedule: list
    measurements: np.ndarray
    prestim: np.ndarray
    noiseless: np.ndarray
    config: ScenarioConfig
    seed: int

    @property
    def T(self) -> int:
        return len(self.measurements)

    def active(self, t: int) -> list[int]:
        """Indices of sources active at time ``t`` (1-based)."""
        return [k for k, (on, off) in enumerate(self.schedule) if on <= t < off]

    def truth(self, t: int, grid) -> DipolePointSet:
        act = self.active(t)
        amp = np.array([source_amplitude(self.config, self.schedule[k], t) for k in act])
        moments = self.source_moments[act] * amp.reshape(-1, 1) / NAM
        return DipolePointSet(grid.points[self.source_locations[act]], moments)

    def truth_counts(self) -> np.ndarray:
        return np.array([len(self.active(t)) for t in range(1, self.T + 1)])


def lifetime_schedule(config: ScenarioConfig) -> list[tuple[int, int]]:
    """``(onset, offset)`` per source; source active for ``onset <= t < offset``."""
    config.validate()
    n, s, T = config.n_sources, config.stagger, config.T
    return [(k * s, T - (n - k + 1) * s) for k in range(1, n + 1)]


def source_amplitude(config: ScenarioConfig, window, t: int) -> float:
    """Relative amplitude of a source active over ``window`` at time ``t``."""
    on, off = window
    if not on <= t < off:
        return 0.0
    if config.waveform == "constant":
        return 1.0
    mid, width = 0.5 * (on + off - 1), max((off - on) / 6.0, 1.0)
    return float(np.exp(-0.5 * ((t - mid) / width) ** 2))


def _draw_locations(rng, grid, config):
    for _ in range(config.max_tries):
        idx = rng.choice(grid.size, size=config.n_sources, replace=False)
        pts = grid.points[idx]
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        if config.n_sources == 1 or d[np.triu_indices(config.n_sources, 1)].min() >= config.min_separation:
            return idx
    raise ScenarioError("could not place sources with the requested separation")


def tangential_orientations(rng, locations) -> np.ndarray:
    """Unit vectors uniform on the sphere, projected onto each location's tangent plane."""
    u = rng.standard_normal(locations.shape)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    radial = locations / np.linalg.norm(locations, axis=1, keepdims=True)
    u -= np.sum(u * radial, axis=1, keepdims=True) * radial
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    # one more projection removes the rounding left by the normalization
    u -= np.sum(u * radial, axis=1, keepdims=True) * radial
    return u


def generate(config: ScenarioConfig, grid, sensors, leadfield, rng=None, seed: int | None = None) -> ExperimentRecord:
    """Generate one dataset. ``seed`` (or ``config.seed``) seeds a fresh generator."""
    config.validate()
    if seed is None:
        seed = config.seed
    if rng is None:
        rng = np.random.default_rng(seed)
    schedule = lifetime_schedule(config)
    locs = _draw_locations(rng, grid, config)
    moments = tangential_orientations(rng, grid.points[locs]) * config.moment_magnitude_nam * NAM

    noiseless = np.zeros((config.T, leadfield.n_sensors))
    for k, window in enumerate(schedule):
        field = leadfield.block(locs[k]) @ moments[k]
        amp = np.array([source_amplitude(config, window, t) for t in range(1, config.T + 1)])
        noiseless += amp[:, None] * field[None, :]
    if config.snr is not None:
        std = np.linalg.norm(noiseless) / (config.snr * np.sqrt(noiseless.size))
    else:
        std = config.noise_std_ft * 1e-15
    noise = std * rng.standard_normal((config.T + config.prestim, leadfield.n_sensors))
    return ExperimentRecord(
        source_locations=locs.astype(np.int64),
        source_moments=moments,
        schedule=schedule,
        measurements=noiseless + noise[config.prestim :],
        prestim=noise[: config.prestim],
        noiseless=noiseless,
        config=config,
        seed=int(seed),
    )


def dataset_seeds(config: ScenarioConfig) -> list[int]:
    """Independent per-dataset seeds derived from the scenario seed."""
    children = np.random.SeedSequence(config.seed).spawn(config.n_datasets)
    return [int(c.generate_state(1, dtype=np.uint64)[0] >> 1) for c in children]


def scenario_dict(config: ScenarioConfig) -> dict:
    return asdict(config)
