"""Spherical-conductor geometry and magnetometer forward model.

Sources live on a quasi-uniform spherical cap (a cortex proxy) inside a
homogeneous conducting sphere; radial magnetometers sit on a larger
concentric cap. Fields follow the closed-form Sarvas expression, so a
radially oriented dipole is exactly silent outside the conductor.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

MU0_OVER_4PI = 1e-7
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


class GeometryError(ValueError):
    """Raised for an inconsistent geometry configuration or source position."""


@dataclass(frozen=True)
class GeometryConfig:
    """Geometry parameters, all lengths in meters.

    The cap angles restrict sources and sensors to the upper part of the
    sphere, which keeps the source grid near the ~1500-point size of a
    5 mm hemispherical sampling.
    """

    conductor_radius_m: float = 0.09
    source_shell_radius_m: float = 0.07
    grid_spacing_m: float = 0.005
    n_sensors: int = 102
    sensor_radius_m: float = 0.12
    rm_neighbor_radius_m: float = 0.01
    rw_neighbor_radius_m: float = 0.01
    source_max_polar_deg: float = 90.0
    sensor_max_polar_deg: float = 110.0

    def validate(self) -> None:
        if self.grid_spacing_m <= 0:
            raise GeometryError("grid_spacing_m must be positive")
        if self.grid_spacing_m > self.source_shell_radius_m:
            raise GeometryError("grid spacing larger than the source shell radius")
        if not 0 < self.source_shell_radius_m < self.conductor_radius_m:
            raise GeometryError("source shell must lie strictly inside the conductor")
        if self.sensor_radius_m <= self.conductor_radius_m:
            raise GeometryError("sensor shell does not enclose the conductor")
        if self.n_sensors < 1:
            raise GeometryError("need at least one sensor")
        if self.rm_neighbor_radius_m <= 0 or self.rw_neighbor_radius_m <= 0:
            raise GeometryError("neighbor radii must be positive")
        for angle in (self.source_max_polar_deg, self.sensor_max_polar_deg):
            if not 0 < angle <= 180:
                raise GeometryError("cap polar angles must lie in (0, 180] degrees")

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True, eq=False)
class SensorArray:
    positions: np.ndarray
    orientations: np.ndarray

    @property
    def count(self) -> int:
        return len(self.positions)


@dataclass(frozen=True, eq=False)
class SourceGrid:
    """Candidate dipole locations with precomputed neighbor lists.

    ``neighbors_rm`` drives the Resample-Move location proposal and
    ``neighbors_rw`` the Random Walk jumps. Both exclude the point itself.
    """

    points: np.ndarray
    neighbors_rm: tuple[np.ndarray, ...]
    neighbors_rw: tuple[np.ndarray, ...]
    spacing: float
    shell_radius: float
    max_polar_deg: float = 180.0
    _padded: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def shell_area(self) -> float:
        """Area of the spherical cap the grid samples."""
        cos_max = np.cos(np.deg2rad(self.max_polar_deg))
        return 2.0 * np.pi * self.shell_radius**2 * (1.0 - cos_max)

    def padded_neighbors(self, kind: str = "rm") -> tuple[np.ndarray, np.ndarray]:
        """Neighbor lists as a ``(N_grid, max_degree)`` array padded with -1, plus degrees."""
        if kind not in self._padded:
            lists = self.neighbors_rm if kind == "rm" else self.neighbors_rw
            degree = np.array([len(nb) for nb in lists], dtype=np.int64)
            table = np.full((self.size, max(1, degree.max(initial=0))), -1, dtype=np.int64)
            for k, nb in enumerate(lists):
                table[k, : len(nb)] = nb
            self._padded[kind] = (table, degree)
        return self._padded[kind]


@dataclass(frozen=True, eq=False)
class Leadfield:
    """Gain matrix of shape ``(N_sensors, 3 * N_grid)``; columns ``3k:3k+3`` belong to point k."""

    matrix: np.ndarray

    @property
    def n_sensors(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_grid(self) -> int:
        return self.matrix.shape[1] // 3

    def block(self, k: int) -> np.ndarray:
        return self.matrix[:, 3 * k : 3 * k + 3]

    @property
    def blocks(self) -> np.ndarray:
        """All blocks as a ``(N_grid, N_sensors, 3)`` array (a cached copy)."""
        cached = self.__dict__.get("_blocks")
        if cached is None:
            cached = np.ascontiguousarray(
                self.matrix.reshape(self.n_sensors, self.n_grid, 3).transpose(1, 0, 2)
            )
            cached.setflags(write=False)
            object.__setattr__(self, "_blocks", cached)
        return cached


def fibonacci_cap(n: int, radius: float, max_polar_deg: float) -> np.ndarray:
    """``n`` quasi-uniform points on a spherical cap centred on +z."""
    cos_max = np.cos(np.deg2rad(max_polar_deg))
    i = np.arange(n, dtype=float)
    z = 1.0 - (1.0 - cos_max) * (i + 0.5) / n
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * GOLDEN_ANGLE
    return radius * np.column_stack((rho * np.cos(phi), rho * np.sin(phi), z))


def _neighbor_lists(points: np.ndarray, radius: float) -> tuple[np.ndarray, ...]:
    tree = cKDTree(points)
    lists = tree.query_ball_point(points, r=radius * (1 + 1e-9))
    return tuple(
        np.array(sorted(j for j in nb if j != k), dtype=np.int64) for k, nb in enumerate(lists)
    )


def make_grid(points: np.ndarray, spacing: float, rm_radius: float = 0.01,
              rw_radius: float = 0.01, shell_radius: float | None = None,
              max_polar_deg: float = 180.0) -> SourceGrid:
    """Build a :class:`SourceGrid` from explicit points (used for toy grids too)."""
    points = np.asarray(points, dtype=float)
    if shell_radius is None:
        shell_radius = float(np.linalg.norm(points, axis=1).mean())
    return SourceGrid(
        points=points,
        neighbors_rm=_neighbor_lists(points, rm_radius),
        neighbors_rw=_neighbor_lists(points, rw_radius),
        spacing=spacing,
        shell_radius=shell_radius,
        max_polar_deg=max_polar_deg,
    )


def build_geometry(config: GeometryConfig | None = None) -> tuple[SensorArray, SourceGrid]:
    """Deterministic sensor array and source grid for ``config``."""
    config = config or GeometryConfig()
    config.validate()

    cos_max = np.cos(np.deg2rad(config.source_max_polar_deg))
    cap_area = 2.0 * np.pi * config.source_shell_radius_m**2 * (1.0 - cos_max)
    # hexagonal packing density at the requested spacing
    n_grid = max(1, int(round(cap_area / (np.sqrt(3.0) / 2.0 * config.grid_spacing_m**2))))
    points = fibonacci_cap(n_grid, config.source_shell_radius_m, config.source_max_polar_deg)
    grid = make_grid(
        points,
        config.grid_spacing_m,
        config.rm_neighbor_radius_m,
        config.rw_neighbor_radius_m,
        shell_radius=config.source_shell_radius_m,
        max_polar_deg=config.source_max_polar_deg,
    )

    positions = fibonacci_cap(config.n_sensors, config.sensor_radius_m, config.sensor_max_polar_deg)
    orientations = positions / np.linalg.norm(positions, axis=1, keepdims=True)
    return SensorArray(positions=positions, orientations=orientations), grid


def _sarvas_gain(r0: np.ndarray, sensors: SensorArray) -> np.ndarray:
    """Radial field per unit moment: array ``(n_loc, N_sensors, 3)``."""
    r = sensors.positions[None, :, :]
    n = sensors.orientations[None, :, :]
    r0b = r0[:, None, :]
    a_vec = r - r0b
    a = np.linalg.norm(a_vec, axis=-1)
    rn = np.linalg.norm(r, axis=-1)
    a_dot_r = np.sum(a_vec * r, axis=-1)
    r0_dot_r = np.sum(r0b * r, axis=-1)

    F = a * (rn * a + rn**2 - r0_dot_r)
    c_r = a**2 / rn + a_dot_r / a + 2.0 * a + 2.0 * rn
    c_r0 = a + 2.0 * rn + a_dot_r / a
    grad_F_dot_n = c_r * np.sum(r * n, axis=-1) - c_r0 * np.sum(r0b * n, axis=-1)

    r0_cross_n = np.cross(np.broadcast_to(r0b, a_vec.shape), np.broadcast_to(n, a_vec.shape))
    r0_cross_r = np.cross(np.broadcast_to(r0b, a_vec.shape), np.broadcast_to(r, a_vec.shape))
    # B.n = mu0/4pi * q . [F (r0 x n) - (gradF.n)(r0 x r)] / F^2
    gain = (F[..., None] * r0_cross_n - grad_F_dot_n[..., None] * r0_cross_r) / (F**2)[..., None]
    return MU0_OVER_4PI * gain


def _check_sources(r0: np.ndarray, conductor_radius: float) -> None:
    radii = np.linalg.norm(r0, axis=-1)
    if np.any(radii >= conductor_radius):
        raise GeometryError("dipole location on or outside the conductor surface")
    if np.any(radii < 1e-6):
        raise GeometryError("dipole location too close to the sphere centre")


def dipole_field(location, moment, sensors: SensorArray, conductor_radius: float = 0.09) -> np.ndarray:
    """Radial magnetic field at each sensor from a current dipole (SI units)."""
    r0 = np.asarray(location, dtype=float).reshape(1, 3)
    _check_sources(r0, conductor_radius)
    if np.any(np.linalg.norm(sensors.positions, axis=1) <= conductor_radius):
        raise GeometryError("sensors must lie outside the conductor")
    return _sarvas_gain(r0, sensors)[0] @ np.asarray(moment, dtype=float)


def compute_leadfield(grid: SourceGrid, sensors: SensorArray, conductor_radius: float = 0.09) -> Leadfield:
    """Stack the three unit-moment fields of every grid point into the gain matrix."""
    _check_sources(grid.points, conductor_radius)
    gains = _sarvas_gain(grid.points, sensors)  # (N_grid, N_sensors, 3)
    matrix = np.ascontiguousarray(gains.transpose(1, 0, 2).reshape(sensors.count, 3 * grid.size))
    matrix.setflags(write=False)
    return Leadfield(matrix=matrix)


def predict_field(state, leadfield: Leadfield) -> np.ndarray:
    """Noiseless field of a dipole state: sum of ``G(r) q`` over its dipoles."""
    out = np.zeros(leadfield.n_sensors)
    for dip in state.dipoles:
        out += leadfield.block(dip.location) @ dip.moment
    return out


def save_leadfield(leadfield: Leadfield, path, config: GeometryConfig) -> None:
    """Write ``<path>.npy`` plus a JSON sidecar with shape and config hash."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), np.asarray(leadfield.matrix))
    sidecar = {
        "schema": "dipolefilter.leadfield/1",
        "shape": list(leadfield.matrix.shape),
        "config_hash": config.digest(),
        "config": asdict(config),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_leadfield(path, config: GeometryConfig | None = None) -> Leadfield:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    matrix = np.load(path.with_suffix(".npy"))
    if list(matrix.shape) != sidecar["shape"]:
        raise GeometryError("leadfield shape does not match its sidecar")
    if config is not None and sidecar["config_hash"] != config.digest():
        raise GeometryError("leadfield was computed for a different geometry config")
    matrix.setflags(write=False)
    return Leadfield(matrix=matrix)
