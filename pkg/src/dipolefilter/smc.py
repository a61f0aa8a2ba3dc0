"""Particle filters for the dipole model.

The cloud is stored as arrays over particles and dipole slots so that the
proposal, weighting, resampling and Resample-Move sweeps run vectorized.
Slot ``k`` of a particle holds the dipole with label ``k``; slots at or
beyond the particle's count are empty (location -1, zero moment).

Moment and residual histories are kept per particle: ``mom_hist[i, k, n]``
is the moment of dipole ``k`` at time ``n`` (zero outside its lifetime) and
``res_hist[i, n]`` is ``b_n`` minus the field predicted by particle ``i``
at time ``n``. The residual cache turns the Resample-Move likelihood ratio
over a dipole's lifetime into a rank-one update per time step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from .model import DipoleState, Dipole, ModelParams, truncated_poisson_pmf
from .proposals import ProposalParams, TikhonovOperator

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)

VARIANTS = {
    "static-rm": dict(proposal="designed", model="static", move=True),
    "static-bootstrap": dict(proposal="bootstrap", model="static", move=False),
    "rw-designed": dict(proposal="designed", model="rw", move=False),
    "rw-bootstrap": dict(proposal="bootstrap", model="rw", move=False),
}


class NumericalCollapse(FloatingPointError):
    """All importance weights vanished or became non-finite."""


@dataclass
class FilterConfig:
    n_particles: int = 1000
    proposal: str = "designed"
    model: str = "static"
    move: bool = True
    adaptive_resampling: bool = False
    ess_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        if self.proposal not in ("designed", "bootstrap"):
            raise ValueError(f"unknown proposal {self.proposal!r}")
        if self.model not in ("static", "rw"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.move and self.model != "static":
            raise ValueError("the Resample-Move step is defined for the Static model only")

    @classmethod
    def from_variant(cls, variant: str, **kwargs) -> "FilterConfig":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        return cls(**{**VARIANTS[variant], **kwargs})


@dataclass
class EvalCounter:
    """Likelihood evaluations, split by the part of the algorithm that needs them."""

    weights: int = 0
    death: int = 0
    rm: int = 0
    rw_location: int = 0

    @property
    def total(self) -> int:
        return self.weights + self.death + self.rm + self.rw_location

    def as_dict(self) -> dict:
        return {"weights": self.weights, "death": self.death, "rm": self.rm,
                "rw_location": self.rw_location, "total": self.total}


def ess(weights) -> float:
    """Effective sample size of normalized weights."""
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def systematic_resample(rng, weights) -> np.ndarray:
    """Ancestor indices from one uniform offset and ``N`` evenly strided positions."""
    w = np.asarray(weights, dtype=float)
    n = len(w)
    cum = np.cumsum(w)
    cum /= cum[-1]
    positions = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cum, positions, side="right"), n - 1)


def _normalize(log_w):
    top = np.max(log_w)
    if not np.isfinite(top):
        raise NumericalCollapse("all particle weights are zero or non-finite")
    w = np.exp(log_w - top)
    return w / w.sum()


@dataclass
class ParticleCloud:
    loc: np.ndarray
    mom: np.ndarray
    birth: np.ndarray
    count: np.ndarray
    mom_hist: np.ndarray
    res_hist: np.ndarray
    log_weights: np.ndarray
    t: int = 0
    ess: float = 0.0
    cum_log_evidence: float = 0.0
    step_log_evidence: list = field(default_factory=list)
    # completed dipole lifetimes along each particle's ancestral path
    dead_life: np.ndarray | None = None
    dead_count: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.count)
        if self.dead_life is None:
            self.dead_life = np.zeros(n)
        if self.dead_count is None:
            self.dead_count = np.zeros(n, dtype=np.int64)

    @property
    def n_particles(self) -> int:
        return len(self.count)

    @property
    def weights(self) -> np.ndarray:
        return _normalize(self.log_weights)

    def particle(self, i: int) -> DipoleState:
        dipoles = []
        for k in range(self.count[i]):
            t0 = int(self.birth[i, k])
            hist = [self.mom_hist[i, k, n].copy() for n in range(t0, self.t + 1)]
            dipoles.append(Dipole(int(self.loc[i, k]), self.mom[i, k].copy(), t0, hist))
        return DipoleState(dipoles, self.t)

    def residual_history(self, i: int) -> np.ndarray:
        """Residual vectors for times ``1..t``."""
        return self.res_hist[i, 1 : self.t + 1].copy()

    def take(self, idx) -> None:
        """Replace the particle set by ``self[idx]`` (history up to ``t`` only)."""
        t = self.t
        self.loc = self.loc[idx]
        self.mom = self.mom[idx]
        self.birth = self.birth[idx]
        self.count = self.count[idx]
        self.dead_life = self.dead_life[idx]
        self.dead_count = self.dead_count[idx]
        self.mom_hist[:, :, : t + 1] = self.mom_hist[idx, :, : t + 1]
        self.res_hist[:, : t + 1] = self.res_hist[idx, : t + 1]
        self.log_weights = self.log_weights[idx]

    def _ensure_capacity(self, t: int) -> None:
        cap = self.res_hist.shape[1]
        if t < cap:
            return
        new_cap = max(t + 1, 2 * cap)
        n, k = self.loc.shape
        mh = np.zeros((n, k, new_cap, 3))
        mh[:, :, :cap] = self.mom_hist
        rh = np.zeros((n, new_cap, self.res_hist.shape[2]))
        rh[:, :cap] = self.res_hist
        self.mom_hist, self.res_hist = mh, rh


@dataclass
class FilterOutput:
    step_log_evidence: np.ndarray
    cum_log_evidence: np.ndarray
    ess: np.ndarray
    eval_counts: dict
    n_particles: int
    mean_n_dipoles: float
    mean_lifetime: float
    summaries: list = field(default_factory=list)

    @property
    def log_evidence(self) -> float:
        return float(self.cum_log_evidence[-1]) if len(self.cum_log_evidence) else 0.0


class ParticleFilter:
    """Static or Random Walk dipole filter with bootstrap or designed proposal."""

    def __init__(self, config: FilterConfig, model: ModelParams, leadfield, grid,
                 proposal: ProposalParams | None = None, tikhonov: TikhonovOperator | None = None,
                 rng=None, horizon: int = 64):
        if model.noise_cov_diag is None:
            raise ValueError("model params carry no noise variances")
        self.config = config
        self.model = model
        self.grid = grid
        self.leadfield = leadfield
        self.blocks = leadfield.blocks
        self.n_grid, self.n_sensors = self.blocks.shape[0], self.blocks.shape[1]
        self.proposal = proposal or ProposalParams()
        if config.proposal == "designed" and tikhonov is None:
            tikhonov = TikhonovOperator(leadfield, self.proposal)
        self.tikhonov = tikhonov
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.inv_var = 1.0 / model.noise_cov_diag
        self.log_norm = -0.5 * float(np.sum(np.log(2.0 * np.pi * model.noise_cov_diag)))
        self.horizon = horizon
        self.counter = EvalCounter()
        self.n_dip_trace: list[float] = []
        self._rm_table, self._rm_degree = grid.padded_neighbors("rm")
        if config.model == "rw":
            self._rw_cands, self._rw_logk = _rw_tables(grid, model.rw_sigma_d)

    # -- helpers ----------------------------------------------------------------

    def _loglik(self, resid):
        return self.log_norm - 0.5 * np.einsum("...s,s->...", resid * resid, self.inv_var)

    def _contributions(self, loc, mom, count):
        """Per-slot predicted fields, shape ``(N, K, S)``; empty slots give zero."""
        k_act = int(count.max(initial=0))
        out = np.zeros(loc.shape + (self.n_sensors,))
        if k_act:
            G = self.blocks[np.clip(loc[:, :k_act], 0, None)]
            out[:, :k_act] = np.einsum("nksc,nkc->nks", G, mom[:, :k_act])
            out[:, :k_act] *= (np.arange(k_act)[None, :] < count[:, None])[..., None]
        return out

    def _step_moments(self, q):
        v = self.model.delta_var
        f = self.model.delta_parallel_factor
        z = self.rng.standard_normal(q.shape)
        norm = np.linalg.norm(q, axis=-1, keepdims=True)
        u = np.where(norm >= 1e-15, q / np.where(norm >= 1e-15, norm, 1.0), 0.0)
        return q + np.sqrt(v) * (z + (np.sqrt(f) - 1.0) * u * np.sum(u * z, axis=-1, keepdims=True))

    # -- initialisation -----------------------------------------------------------

    def init(self, initial_locations=None) -> ParticleCloud:
        """Draw the initial cloud from the prior.

        ``initial_locations`` pins every particle to the same dipole
        locations (moments still drawn from the prior); it is used for
        fixed-configuration restrictions of the model.
        """
        n, kmax = self.config.n_particles, self.model.n_max
        rng = self.rng
        if initial_locations is None:
            pmf = truncated_poisson_pmf(self.model.birth_rate_poisson, kmax)
            count = np.searchsorted(np.cumsum(pmf), rng.random(n), side="right").clip(0, kmax)
            loc = rng.integers(self.n_grid, size=(n, kmax))
        else:
            initial_locations = np.asarray(initial_locations, dtype=np.int64)
            count = np.full(n, len(initial_locations))
            loc = np.zeros((n, kmax), dtype=np.int64)
            loc[:, : len(initial_locations)] = initial_locations
        mom = self.model.sigma_q * rng.standard_normal((n, kmax, 3))
        valid = np.arange(kmax)[None, :] < count[:, None]
        loc = np.where(valid, loc, -1).astype(np.int64)
        mom = mom * valid[..., None]
        cap = self.horizon + 1
        mom_hist = np.zeros((n, kmax, cap, 3))
        mom_hist[:, :, 0] = mom
        cloud = ParticleCloud(
            loc=loc, mom=mom, birth=np.zeros((n, kmax), dtype=np.int64), count=count.astype(np.int64),
            mom_hist=mom_hist, res_hist=np.zeros((n, cap, self.n_sensors)),
            log_weights=np.full(n, -np.log(n)), t=0, ess=float(n),
        )
        return cloud

    # -- one filtering step -------------------------------------------------------

    def step(self, cloud: ParticleCloud, b_t) -> ParticleCloud:
        b_t = np.asarray(b_t, dtype=float)
        if b_t.shape != (self.n_sensors,):
            raise ValueError("measurement dimension does not match the sensor count")
        cfg, model, rng = self.config, self.model, self.rng
        n, kmax = cloud.loc.shape
        t = cloud.t + 1
        cloud._ensure_capacity(t)
        rows = np.arange(n)
        n_prev = cloud.count.copy()

        p_b = np.where(n_prev < model.n_max, model.p_birth, 0.0)
        p_d = 1.0 - (1.0 - model.death_rate) ** n_prev
        log_ratio = np.zeros(n)

        if cfg.proposal == "designed":
            tik = self.tikhonov(b_t)
            q_b = np.where(p_b > 0, self.proposal.q_birth, 0.0)
            C = self._contributions(cloud.loc, cloud.mom, n_prev)
            F_prev = C.sum(axis=1)
            ll_prev = self._loglik(b_t - F_prev)
            ll_minus = self._loglik(b_t - F_prev[:, None, :] + C)
            ll_minus = np.where(np.arange(kmax)[None, :] < n_prev[:, None], ll_minus, -np.inf)
            self.counter.death += int(n_prev.sum() + np.count_nonzero(n_prev))
            q_d, log_dying = _death_probability(q_b, p_b, p_d, ll_prev, ll_minus, n_prev)
        else:
            tik = None
            q_b, q_d = p_b, np.where(n_prev > 0, p_d, 0.0)

        u = rng.random(n)
        is_birth = u < q_b
        is_death = ~is_birth & (u < q_b + q_d)
        is_stay = ~is_birth & ~is_death

        # deaths: choose a victim and shift the later labels down
        dying = np.nonzero(is_death)[0]
        if len(dying):
            if cfg.proposal == "designed":
                cdf = np.cumsum(np.exp(log_dying[dying]), axis=1)
                victim = (cdf < rng.random(len(dying))[:, None] * cdf[:, -1:]).sum(axis=1)
                victim = np.minimum(victim, n_prev[dying] - 1)
                log_ratio[dying] = (np.log(p_d[dying] / n_prev[dying]) - np.log(q_d[dying])
                                    - log_dying[dying, victim])
            else:
                victim = np.floor(rng.random(len(dying)) * n_prev[dying]).astype(np.int64)
            cloud.dead_life[dying] += t - cloud.birth[dying, victim]
            cloud.dead_count[dying] += 1
            self._remove_slot(cloud, dying, victim)

        if cfg.proposal == "designed":
            stay_idx = np.nonzero(is_stay)[0]
            log_ratio[stay_idx] = (np.log1p(-p_b[stay_idx] - p_d[stay_idx])
                                   - np.log1p(-q_b[stay_idx] - q_d[stay_idx]))

        n_surv = cloud.count.copy()
        slot_valid = np.arange(kmax)[None, :] < n_surv[:, None]
        rw_designed = cfg.model == "rw" and cfg.proposal == "designed"
        if not rw_designed:
            cloud.mom = np.where(slot_valid[..., None], self._step_moments(cloud.mom), 0.0)
            if cfg.model == "rw":
                self._rw_jump(cloud, n_surv)

        # births go to slot n_surv
        born = np.nonzero(is_birth)[0]
        if len(born):
            slot = n_surv[born]
            if cfg.proposal == "designed":
                cdf = np.cumsum(tik.location_pmf)
                new_loc = np.minimum(np.searchsorted(cdf, rng.random(len(born)) * cdf[-1], side="right"),
                                     self.n_grid - 1)
                log_ratio[born] = (np.log(p_b[born] / q_b[born]) - np.log(self.n_grid)
                                   - np.log(tik.location_pmf[new_loc]))
            else:
                new_loc = rng.integers(self.n_grid, size=len(born))
            cloud.loc[born, slot] = new_loc
            cloud.mom[born, slot] = np.sqrt(model.birth_var) * rng.standard_normal((len(born), 3))
            cloud.birth[born, slot] = t
            cloud.count[born] += 1

        if rw_designed:
            log_ratio += self._rw_conditional(cloud, n_surv, b_t)

        # weights
        cloud.t = t
        F = self._contributions(cloud.loc, cloud.mom, cloud.count).sum(axis=1)
        resid = b_t - F
        ll = self._loglik(resid)
        self.counter.weights += n
        cloud.res_hist[:, t] = resid
        cloud.mom_hist[:, :, t] = cloud.mom

        increment = ll + log_ratio
        if not np.all(np.isfinite(increment) | (increment == -np.inf)):
            raise NumericalCollapse("non-finite importance weight increment")
        log_prior_w = cloud.log_weights - logsumexp(cloud.log_weights)
        log_w = log_prior_w + increment
        step_ev = float(logsumexp(log_w))
        if not np.isfinite(step_ev):
            raise NumericalCollapse(f"all importance weights vanished at t={t}")
        cloud.step_log_evidence.append(step_ev)
        cloud.cum_log_evidence += step_ev
        cloud.log_weights = log_w - step_ev
        w = np.exp(cloud.log_weights)
        cloud.ess = ess(w / w.sum())

        if not cfg.adaptive_resampling or cloud.ess < cfg.ess_threshold * n:
            idx = systematic_resample(rng, w)
            cloud.take(idx)
            cloud.log_weights = np.full(n, -np.log(n))

        if cfg.move:
            self.rm_move(cloud)
        self.n_dip_trace.append(float(cloud.count.mean()))
        return cloud

    def _remove_slot(self, cloud, rows, victim):
        kmax = cloud.loc.shape[1]
        slots = np.arange(kmax)[None, :]
        src = np.minimum(slots + (slots >= victim[:, None]), kmax - 1)
        r = rows[:, None]
        cloud.loc[rows] = cloud.loc[r, src]
        cloud.mom[rows] = cloud.mom[r, src]
        cloud.birth[rows] = cloud.birth[r, src]
        cloud.mom_hist[rows] = cloud.mom_hist[r, src]
        last = cloud.count[rows] - 1
        cloud.loc[rows, last] = -1
        cloud.mom[rows, last] = 0.0
        cloud.birth[rows, last] = 0
        cloud.mom_hist[rows, last] = 0.0
        cloud.count[rows] -= 1

    # -- Random Walk location updates ---------------------------------------------

    def _rw_jump(self, cloud, n_surv):
        kmax = cloud.loc.shape[1]
        for k in range(int(n_surv.max(initial=0))):
            rows = np.nonzero(n_surv > k)[0]
            cands = self._rw_cands[cloud.loc[rows, k]]
            logk = self._rw_logk[cloud.loc[rows, k]]
            pick = _sample_logits(self.rng, logk)
            cloud.loc[rows, k] = cands[np.arange(len(rows)), pick]

    def _rw_conditional(self, cloud, n_surv, b_t):
        """Conditional location step for survivors; returns ``log K - log q_loc`` per particle."""
        n = cloud.loc.shape[0]
        out = np.zeros(n)
        # survivors hold t-1 moments, newborns their t moment
        F = self._contributions(cloud.loc, cloud.mom, cloud.count).sum(axis=1)
        for k in reversed(range(int(n_surv.max(initial=0)))):
            rows = np.nonzero(n_surv > k)[0]
            loc_k = cloud.loc[rows, k]
            q_old = cloud.mom[rows, k]
            q_new = self._step_moments(q_old)
            base = b_t - F[rows] + np.einsum("nsc,nc->ns", self.blocks[loc_k], q_old)
            cands = self._rw_cands[loc_k]
            logk = self._rw_logk[loc_k]
            valid = np.isfinite(logk)
            G = self.blocks[np.where(valid, cands, 0)]
            pred = np.einsum("ncsd,nd->ncs", G, q_new)
            ll = self._loglik(base[:, None, :] - pred)
            self.counter.rw_location += int(valid.sum())
            logits = np.where(valid, logk + ll, -np.inf)
            pick = _sample_logits(self.rng, logits)
            ar = np.arange(len(rows))
            log_norm = logsumexp(logits, axis=1)
            # log K(chosen) - log q_loc(chosen) = log sum_c K_c L_c - log L_chosen
            out[rows] += log_norm - ll[ar, pick]
            new_loc = cands[ar, pick]
            F[rows] += pred[ar, pick] - np.einsum("nsc,nc->ns", self.blocks[loc_k], q_old)
            cloud.loc[rows, k] = new_loc
            cloud.mom[rows, k] = q_new
        return out

    # -- Resample-Move ------------------------------------------------------------

    def rm_move(self, cloud: ParticleCloud) -> np.ndarray:
        """One Metropolis-Hastings sweep over the dipoles of every particle.

        Each dipole proposes a uniformly chosen grid neighbor; the acceptance
        ratio is the likelihood ratio over the dipole's lifetime times
        ``|S| / |S'|``. Returns the per-dipole acceptance indicator array.
        """
        t = cloud.t
        n, kmax = cloud.loc.shape
        accepted = np.zeros((n, kmax), dtype=bool)
        if t < 1:
            return accepted
        for k in range(int(cloud.count.max(initial=0))):
            rows = np.nonzero(cloud.count > k)[0]
            r_old = cloud.loc[rows, k]
            deg = self._rm_degree[r_old]
            keep = deg > 0
            rows, r_old, deg = rows[keep], r_old[keep], deg[keep]
            if not len(rows):
                continue
            pick = np.minimum((self.rng.random(len(rows)) * deg).astype(np.int64), deg - 1)
            r_new = self._rm_table[r_old, pick]
            deg_new = self._rm_degree[r_new]
            t0 = np.maximum(cloud.birth[rows, k], 1)
            lo = int(t0.min())
            self.counter.rm += int(np.sum(t - t0 + 1))

            D = self.blocks[r_new] - self.blocks[r_old]
            dll = self._rm_loglik_delta(cloud, rows, k, D, lo, t)
            log_alpha = np.log(deg) - np.log(deg_new) + dll
            acc = np.log(self.rng.random(len(rows))) < log_alpha
            if np.any(acc):
                ra = rows[acc]
                qh = cloud.mom_hist[ra, k, lo : t + 1]
                cloud.res_hist[ra, lo : t + 1] -= np.einsum("psc,pwc->pws", D[acc], qh)
                cloud.loc[ra, k] = r_new[acc]
                accepted[ra, k] = True
        return accepted

    def _rm_loglik_delta(self, cloud, rows, k, D, lo, t):
        """Log-likelihood change over times ``lo..t`` when slot ``k`` moves by field delta ``D``."""
        qh = cloud.mom_hist[rows, k, lo : t + 1]
        R = cloud.res_hist[rows, lo : t + 1]
        M = np.einsum("pws,s,pwc->psc", R, self.inv_var, qh)
        Q = np.einsum("pwc,pwd->pcd", qh, qh)
        DWD = np.einsum("psc,s,psd->pcd", D, self.inv_var, D)
        return np.sum(D * M, axis=(1, 2)) - 0.5 * np.sum(DWD * Q, axis=(1, 2))

    def mean_lifetime(self, cloud: ParticleCloud) -> float:
        """Weighted mean dipole lifetime along the surviving trajectories.

        Each particle contributes the dipoles that died on its ancestral path
        plus its living dipoles, censored at the current time.
        """
        valid = np.arange(cloud.loc.shape[1])[None, :] < cloud.count[:, None]
        ages = np.where(valid, cloud.t - np.maximum(cloud.birth, 0) + 1, 0).sum(axis=1)
        total = cloud.dead_life + ages
        n = cloud.dead_count + cloud.count
        w = cloud.weights
        denom = float(np.sum(w * n))
        return float(np.sum(w * total) / denom) if denom > 0 else 0.0


def _death_probability(q_b, p_b, p_d, ll_prev, ll_minus, n_prev):
    """Vectorized counterpart of :func:`dipolefilter.proposals.death_probability`."""
    n = len(n_prev)
    has = n_prev > 0
    q_d = np.zeros(n)
    log_dying = np.full(ll_minus.shape, -np.inf)
    if not np.any(has):
        return q_d, log_dying
    lm = ll_minus[has]
    lse = logsumexp(lm, axis=1)
    log_dying[has] = lm - lse[:, None]
    with np.errstate(divide="ignore"):
        log_a = np.log(p_d[has]) + lse - np.log(n_prev[has])
        stay = 1.0 - p_b[has] - p_d[has]
        log_b = np.where(stay > 0, ll_prev[has] + np.log(np.where(stay > 0, stay, 1.0)), -np.inf)
    q = (1.0 - q_b[has]) * expit(log_a - log_b)
    q_d[has] = np.where(p_d[has] > 0, q, 0.0)
    return q_d, log_dying


def _sample_logits(rng, logits):
    """One categorical draw per row of unnormalized log probabilities."""
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    cdf = np.cumsum(p, axis=1)
    u = rng.random(len(logits))[:, None] * cdf[:, -1:]
    return np.minimum((cdf < u).sum(axis=1), logits.shape[1] - 1)


def _rw_tables(grid, sigma_d):
    table, degree = grid.padded_neighbors("rw")
    cands = np.concatenate([np.arange(grid.size)[:, None], table], axis=1)
    d2 = np.sum((grid.points[np.clip(cands, 0, None)] - grid.points[:, None, :]) ** 2, axis=-1)
    logk = np.where(cands >= 0, -d2 / (2.0 * sigma_d**2), -np.inf)
    logk -= logsumexp(logk, axis=1, keepdims=True)
    return np.where(cands >= 0, cands, 0), logk


def run(config: FilterConfig, measurements, model: ModelParams, leadfield, grid,
        proposal: ProposalParams | None = None, tikhonov: TikhonovOperator | None = None,
        summarize: bool = False, initial_locations=None, rng=None) -> FilterOutput:
    """Filter a ``(T, N_sensors)`` measurement series."""
    from .estimators import summarize as summarize_cloud

    measurements = np.asarray(measurements, dtype=float).reshape(-1, leadfield.n_sensors)
    T = len(measurements)
    pf = ParticleFilter(config, model, leadfield, grid, proposal, tikhonov, rng=rng, horizon=max(T, 1))
    cloud = pf.init(initial_locations)
    ess_trace, summaries = [], []
    for t in range(T):
        cloud = pf.step(cloud, measurements[t])
        ess_trace.append(cloud.ess)
        if summarize:
            summaries.append(summarize_cloud(cloud, grid.size, model.n_max, grid))
    steps = np.asarray(cloud.step_log_evidence, dtype=float)
    return FilterOutput(
        step_log_evidence=steps,
        cum_log_evidence=np.cumsum(steps),
        ess=np.asarray(ess_trace),
        eval_counts=pf.counter.as_dict(),
        n_particles=config.n_particles,
        mean_n_dipoles=float(np.mean(pf.n_dip_trace)) if pf.n_dip_trace else 0.0,
        mean_lifetime=pf.mean_lifetime(cloud),
        summaries=summaries,
    )
