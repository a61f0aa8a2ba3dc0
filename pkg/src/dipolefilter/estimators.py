"""Point summaries of a weighted dipole cloud."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class PosteriorSummary:
    """Posterior projections at one time step.

    ``cond_moment`` is the moment averaged over particles that hold a
    dipole at each point (NaN where the intensity is zero); ``raw_moment``
    is the same weighted sum before dividing by the intensity. Moments are
    in ampere-meters.
    """

    n_pmf: np.ndarray
    intensity: np.ndarray
    cond_moment: np.ndarray
    raw_moment: np.ndarray
    representative_set: list = field(default_factory=list)
    shortfall: bool = False

    @property
    def n_mode(self) -> int:
        return int(np.argmax(self.n_pmf))


def summarize(cloud, n_grid: int, n_max: int, grid=None) -> PosteriorSummary:
    """Dipole-count pmf, intensity, and conditional moments of ``cloud``.

    ``cloud`` needs ``loc``, ``mom``, ``count`` arrays and normalized
    ``weights``. If ``grid`` is given the representative set is attached.
    """
    w = np.asarray(cloud.weights, dtype=float)
    count = np.asarray(cloud.count)
    n_pmf = np.bincount(count, weights=w, minlength=n_max + 1)[: n_max + 1]

    kmax = cloud.loc.shape[1]
    valid = np.arange(kmax)[None, :] < count[:, None]
    locs = cloud.loc[valid]
    wk = np.broadcast_to(w[:, None], valid.shape)[valid]
    moms = cloud.mom[valid]
    intensity = np.bincount(locs, weights=wk, minlength=n_grid)
    raw = np.stack([np.bincount(locs, weights=wk * moms[:, c], minlength=n_grid) for c in range(3)], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(intensity[:, None] > 0, raw / intensity[:, None], np.nan)
    summary = PosteriorSummary(n_pmf, intensity, cond, raw)
    if grid is not None:
        reps, short = representative_set(summary, grid)
        summary = PosteriorSummary(n_pmf, intensity, cond, raw, reps, short)
    return summary


def find_peaks(intensity, grid) -> np.ndarray:
    """Grid points whose intensity is positive and strictly above every RM neighbor's."""
    intensity = np.asarray(intensity, dtype=float)
    table, degree = grid.padded_neighbors("rm")
    nb = np.where(table >= 0, intensity[np.clip(table, 0, None)], -np.inf)
    is_peak = (intensity > 0) & np.all(intensity[:, None] > nb, axis=1)
    return np.nonzero(is_peak)[0]


def representative_set(summary: PosteriorSummary, grid) -> tuple[list, bool]:
    """The ``mode(N)`` highest intensity peaks with their conditional moments.

    Returns ``(dipoles, shortfall)`` where ``dipoles`` is a list of
    ``(grid_index, moment)`` and ``shortfall`` flags fewer peaks than the
    modal count.
    """
    n_hat = summary.n_mode
    if n_hat == 0:
        return [], False
    peaks = find_peaks(summary.intensity, grid)
    # stable sort on -intensity keeps the lowest index first among ties
    order = peaks[np.argsort(-summary.intensity[peaks], kind="stable")]
    chosen = order[:n_hat]
    return [(int(k), summary.cond_moment[k].copy()) for k in chosen], len(chosen) < n_hat
