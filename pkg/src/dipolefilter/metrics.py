"""Discrepancies between an estimated and a target dipole set.

Every metric returns NaN (the missing-value marker) when a required set is
empty, so that averages over time steps can skip those entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist


@dataclass(frozen=True, eq=False)
class DipolePointSet:
    """Dipole locations (meters) with moments (nAm)."""

    locations: np.ndarray
    moments: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "locations", np.asarray(self.locations, dtype=float).reshape(-1, 3))
        moments = np.zeros_like(self.locations) if self.moments is None else self.moments
        object.__setattr__(self, "moments", np.asarray(moments, dtype=float).reshape(-1, 3))
        if len(self.locations) != len(self.moments):
            raise ValueError("locations and moments differ in length")

    @property
    def count(self) -> int:
        return len(self.locations)

    @classmethod
    def empty(cls) -> "DipolePointSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))


def _points(s):
    return s.locations if isinstance(s, DipolePointSet) else np.asarray(s, dtype=float).reshape(-1, 3)


def adct(est, tgt) -> float:
    """Mean distance from each estimated dipole to its closest target."""
    a, b = _points(est), _points(tgt)
    if not len(a) or not len(b):
        return float("nan")
    return float(cdist(a, b).min(axis=1).mean())


def sd(est, tgt) -> float:
    """Symmetrized ADCT: also penalizes undetected targets."""
    return adct(est, tgt) + adct(tgt, est)


def ospa(est, tgt) -> float:
    """Mean distance under the best one-to-one matching of the smaller set into the larger.

    No cardinality penalty: only the smaller set's points are charged.
    """
    a, b = _points(est), _points(tgt)
    if not len(a) or not len(b):
        return float("nan")
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / min(len(a), len(b)))


def wm(est: DipolePointSet, tgt: DipolePointSet, grid, sigma: float = 0.01) -> float:
    """Integrated absolute difference of moment-weighted Gaussian bumps over the source shell.

    Quadrature weights are ``shell_area / N_grid``. Result in nAm per meter
    (the bumps are 3-D densities integrated over a surface).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pts = grid.points
    weight = grid.shell_area / grid.size

    def density(s):
        if s.count == 0:
            return np.zeros(len(pts))
        d2 = cdist(pts, s.locations, "sqeuclidean")
        g = np.exp(-d2 / (2 * sigma**2)) / (2 * np.pi * sigma**2) ** 1.5
        return g @ np.linalg.norm(s.moments, axis=1)

    return float(np.sum(np.abs(density(est) - density(tgt))) * weight)
