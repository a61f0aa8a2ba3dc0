"""Static-dipole state-space model and its Random Walk variant.

States are labelled dipole sets on a source grid. Moments are stored in
ampere-meters; configuration values are given in nAm and converted here.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

NAM = 1e-9
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class ModelParams:
    """Prior and noise parameters of the dipole model.

    ``sigma_q_nam`` is the prior moment std in nAm. ``delta_base_var_nam2``
    is the per-step moment variance across the current moment direction
    (nAm^2); along the direction it is multiplied by
    ``delta_parallel_factor``. ``None`` selects ``(sigma_q / 10)**2``.
    """

    n_max: int = 7
    p_birth: float = 0.01
    death_rate: float = 1.0 / 30.0
    sigma_q_nam: float = 1.0
    delta_parallel_factor: float = 10.0
    delta_base_var_nam2: float | None = None
    birth_moment_var_nam2: float | None = None
    birth_rate_poisson: float = 1.0
    noise_cov_diag: np.ndarray | None = field(default=None, compare=False)
    rw_sigma_d: float = 0.005

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be at least 1")
        if not 0 <= self.p_birth < 1 or not 0 <= self.death_rate < 1:
            raise ValueError("birth and death probabilities must lie in [0, 1)")
        if self.p_birth + self.p_death(self.n_max - 1) >= 1:
            raise ValueError("p_birth + P_death(N) must stay below 1")
        if self.sigma_q_nam <= 0 or self.delta_var <= 0 or self.birth_var <= 0:
            raise ValueError("moment variances must be positive")
        if self.delta_parallel_factor <= 0 or self.rw_sigma_d <= 0:
            raise ValueError("delta_parallel_factor and rw_sigma_d must be positive")
        if self.noise_cov_diag is not None:
            noise = np.asarray(self.noise_cov_diag, dtype=float)
            if np.any(noise <= 0) or not np.all(np.isfinite(noise)):
                raise ValueError("noise variances must be positive and finite")
            object.__setattr__(self, "noise_cov_diag", noise)

    @property
    def sigma_q(self) -> float:
        return self.sigma_q_nam * NAM

    @property
    def delta_var(self) -> float:
        v = self.delta_base_var_nam2
        if v is None:
            v = (self.sigma_q_nam / 10.0) ** 2
        return v * NAM**2

    @property
    def birth_var(self) -> float:
        v = self.birth_moment_var_nam2
        return self.delta_var if v is None else v * NAM**2

    def p_death(self, n: int) -> float:
        return 1.0 - (1.0 - self.death_rate) ** n

    def birth_prob(self, n: int) -> float:
        return self.p_birth if n < self.n_max else 0.0

    def with_noise(self, noise_cov_diag) -> "ModelParams":
        return replace(self, noise_cov_diag=np.asarray(noise_cov_diag, dtype=float))


@dataclass
class Dipole:
    location: int
    moment: np.ndarray
    birth_time: int = 0
    moment_history: list = field(default_factory=list)

    def __post_init__(self):
        self.moment = np.asarray(self.moment, dtype=float)
        if not self.moment_history:
            self.moment_history = [self.moment]


@dataclass
class DipoleState:
    """A labelled dipole set at time ``t``; labels are list positions."""

    dipoles: list = field(default_factory=list)
    t: int = 0

    @property
    def count(self) -> int:
        return len(self.dipoles)

    @property
    def locations(self) -> tuple:
        return tuple(d.location for d in self.dipoles)

    def without(self, k: int) -> "DipoleState":
        """The state with dipole ``k`` removed; later labels shift down by one."""
        return DipoleState([d for i, d in enumerate(self.dipoles) if i != k], self.t)


class Move(enum.Enum):
    BIRTH = "birth"
    DEATH = "death"
    STAY = "stay"


@dataclass(frozen=True)
class MoveTag:
    kind: Move
    victim: int | None = None


def ancestor_label(j: int, n: int) -> int:
    """Previous label of the survivor now labelled ``n`` after dipole ``j`` died (0-based)."""
    return n if n < j else n + 1


# --- moment dynamics -------------------------------------------------------

def moment_step_cov(q_prev, params: ModelParams) -> np.ndarray:
    """Covariance of one moment step, stretched along the current moment direction."""
    v = params.delta_var
    q_prev = np.asarray(q_prev, dtype=float)
    norm = np.linalg.norm(q_prev)
    if norm < 1e-15:
        return v * np.eye(3)
    u = q_prev / norm
    return v * (np.eye(3) + (params.delta_parallel_factor - 1.0) * np.outer(u, u))


def _moment_step_sqrt(q_prev, params: ModelParams) -> np.ndarray:
    v = params.delta_var
    norm = np.linalg.norm(q_prev)
    if norm < 1e-15:
        return np.sqrt(v) * np.eye(3)
    u = q_prev / norm
    return np.sqrt(v) * (np.eye(3) + (np.sqrt(params.delta_parallel_factor) - 1.0) * np.outer(u, u))


def gaussian_logpdf(x, mean, cov) -> float:
    diff = np.asarray(x, dtype=float) - mean
    sign, logdet = np.linalg.slogdet(cov)
    return float(-0.5 * (len(diff) * LOG_2PI + logdet + diff @ np.linalg.solve(cov, diff)))


def moment_step_logpdf(q_next, q_prev, params: ModelParams) -> float:
    return gaussian_logpdf(q_next, q_prev, moment_step_cov(q_prev, params))


def birth_moment_logpdf(q, params: ModelParams) -> float:
    return gaussian_logpdf(q, np.zeros(3), params.birth_var * np.eye(3))


def _step_moment(rng, q_prev, params):
    return q_prev + _moment_step_sqrt(q_prev, params) @ rng.standard_normal(3)


def _evolve(dipole: Dipole, t: int, rng, params, location=None) -> Dipole:
    q = _step_moment(rng, dipole.moment, params)
    return Dipole(
        location=dipole.location if location is None else location,
        moment=q,
        birth_time=dipole.birth_time,
        moment_history=dipole.moment_history + [q],
    )


def _newborn(location: int, rng, params: ModelParams, t: int) -> Dipole:
    q = np.sqrt(params.birth_var) * rng.standard_normal(3)
    return Dipole(location=int(location), moment=q, birth_time=t, moment_history=[q])


# --- prior -------------------------------------------------------------------

def truncated_poisson_pmf(rate: float, n_max: int) -> np.ndarray:
    from scipy.stats import poisson

    pmf = poisson.pmf(np.arange(n_max + 1), rate)
    return pmf / pmf.sum()


def sample_prior(rng, params: ModelParams, grid) -> DipoleState:
    """Draw an initial state: truncated-Poisson count, uniform locations, Gaussian moments."""
    pmf = truncated_poisson_pmf(params.birth_rate_poisson, params.n_max)
    n = int(rng.choice(len(pmf), p=pmf))
    dipoles = []
    for _ in range(n):
        loc = int(rng.integers(grid.size))
        q = params.sigma_q * rng.standard_normal(3)
        dipoles.append(Dipole(loc, q, 0, [q]))
    return DipoleState(dipoles, 0)


def prior_logdensity(state: DipoleState, params: ModelParams, grid) -> float:
    pmf = truncated_poisson_pmf(params.birth_rate_poisson, params.n_max)
    if state.count > params.n_max:
        return -np.inf
    out = np.log(pmf[state.count])
    for d in state.dipoles:
        out += -np.log(grid.size) + gaussian_logpdf(d.moment, np.zeros(3), params.sigma_q**2 * np.eye(3))
    return float(out)


# --- Static transition -------------------------------------------------------

def sample_transition(rng, j_prev: DipoleState, params: ModelParams, grid) -> tuple[DipoleState, MoveTag]:
    """One step of the Static prior: at most one birth or one death, then moment steps."""
    n = j_prev.count
    p_b = params.birth_prob(n)
    p_d = params.p_death(n)
    u = rng.random()
    t = j_prev.t + 1
    if u < p_b:
        survivors = [_evolve(d, t, rng, params) for d in j_prev.dipoles]
        survivors.append(_newborn(rng.integers(grid.size), rng, params, t))
        return DipoleState(survivors, t), MoveTag(Move.BIRTH)
    if u < p_b + p_d:
        victim = int(rng.integers(n))
        survivors = [_evolve(d, t, rng, params) for i, d in enumerate(j_prev.dipoles) if i != victim]
        return DipoleState(survivors, t), MoveTag(Move.DEATH, victim)
    return DipoleState([_evolve(d, t, rng, params) for d in j_prev.dipoles], t), MoveTag(Move.STAY)


def _transition_components(j_prev, locations_next, n_next, params, grid, location_logkernel):
    """Yield ``(log_mass, pairs, newborn)`` for every mixture summand matching the location pattern.

    ``pairs`` lists ``(prev_label, next_label)`` for survivors and ``newborn``
    is the label of the born dipole or ``None``. ``location_logkernel(a, b)``
    is the log probability that a survivor at ``a`` sits at ``b`` next step.
    """
    n = j_prev.count
    prev_locs = j_prev.locations

    def survivors_logmass(pairs):
        total = 0.0
        for a, b in pairs:
            total += location_logkernel(prev_locs[a], locations_next[b])
            if total == -np.inf:
                break
        return total

    p_b = params.birth_prob(n)
    p_d = params.p_death(n)
    if n_next == n + 1 and p_b > 0:
        pairs = [(i, i) for i in range(n)]
        lm = np.log(p_b) - np.log(grid.size) + survivors_logmass(pairs)
        if lm > -np.inf:
            yield lm, pairs, n
    if n_next == n - 1 and n >= 1 and p_d > 0:
        for j in range(n):
            pairs = [(ancestor_label(j, m), m) for m in range(n - 1)]
            lm = np.log(p_d) - np.log(n) + survivors_logmass(pairs)
            if lm > -np.inf:
                yield lm, pairs, None
    if n_next == n and 1.0 - p_b - p_d > 0:
        pairs = [(i, i) for i in range(n)]
        lm = np.log1p(-p_b - p_d) + survivors_logmass(pairs)
        if lm > -np.inf:
            yield lm, pairs, None


def _static_kernel(a: int, b: int) -> float:
    return 0.0 if a == b else -np.inf


def _mixture_logdensity(j_prev, j_next, params, grid, kernel) -> float:
    terms = []
    for lm, pairs, newborn in _transition_components(
        j_prev, j_next.locations, j_next.count, params, grid, kernel
    ):
        term = lm
        for a, b in pairs:
            term += moment_step_logpdf(j_next.dipoles[b].moment, j_prev.dipoles[a].moment, params)
        if newborn is not None:
            term += birth_moment_logpdf(j_next.dipoles[newborn].moment, params)
        terms.append(term)
    return float(logsumexp(terms)) if terms else -np.inf


def transition_logdensity(j_prev: DipoleState, j_next: DipoleState, params: ModelParams, grid) -> float:
    """Log Static transition density (counting measure on locations, Lebesgue on moments)."""
    return _mixture_logdensity(j_prev, j_next, params, grid, _static_kernel)


def transition_log_mass(j_prev: DipoleState, locations_next, params: ModelParams, grid, kind: str = "static") -> float:
    """Log probability of the next location pattern, moments integrated out."""
    kernel = _static_kernel if kind == "static" else rw_location_logkernel(grid, params)
    locations_next = tuple(locations_next)
    terms = [
        lm
        for lm, _, _ in _transition_components(
            j_prev, locations_next, len(locations_next), params, grid, kernel
        )
    ]
    return float(logsumexp(terms)) if terms else -np.inf


# --- likelihood --------------------------------------------------------------

def log_likelihood(b_t, j_t: DipoleState, leadfield, params: ModelParams) -> float:
    """Gaussian log likelihood with diagonal noise covariance."""
    from .forward import predict_field

    b_t = np.asarray(b_t, dtype=float)
    noise = params.noise_cov_diag
    if noise is None:
        raise ValueError("model params carry no noise variances")
    if b_t.shape != (leadfield.n_sensors,) or noise.shape != b_t.shape:
        raise ValueError("measurement dimension does not match the sensor count")
    resid = b_t - predict_field(j_t, leadfield)
    return float(-0.5 * (np.sum(np.log(2 * np.pi * noise)) + np.sum(resid**2 / noise)))


# --- Random Walk variant -----------------------------------------------------

def rw_kernel_row(grid, k: int, sigma_d: float) -> tuple[np.ndarray, np.ndarray]:
    """Candidate locations ``{k} + neighbors_rw[k]`` and their jump probabilities."""
    cands = np.concatenate(([k], grid.neighbors_rw[k])).astype(np.int64)
    d2 = np.sum((grid.points[cands] - grid.points[k]) ** 2, axis=1)
    w = np.exp(-d2 / (2.0 * sigma_d**2))
    return cands, w / w.sum()


def rw_location_logkernel(grid, params: ModelParams):
    cache = {}

    def kernel(a: int, b: int) -> float:
        if a not in cache:
            cands, probs = rw_kernel_row(grid, a, params.rw_sigma_d)
            cache[a] = dict(zip(cands.tolist(), np.log(probs).tolist()))
        return cache[a].get(b, -np.inf)

    return kernel


def rw_sample_transition(rng, j_prev: DipoleState, params: ModelParams, grid) -> tuple[DipoleState, MoveTag]:
    """Random Walk prior step: Static birth/death structure plus neighbor jumps."""
    j_next, move = sample_transition(rng, j_prev, params, grid)
    n_surv = j_next.count - (1 if move.kind is Move.BIRTH else 0)
    for m in range(n_surv):
        d = j_next.dipoles[m]
        cands, probs = rw_kernel_row(grid, d.location, params.rw_sigma_d)
        d.location = int(cands[rng.choice(len(cands), p=probs)])
    return j_next, move


def rw_transition_logdensity(j_prev: DipoleState, j_next: DipoleState, params: ModelParams, grid) -> float:
    return _mixture_logdensity(j_prev, j_next, params, grid, rw_location_logkernel(grid, params))


# --- noise -------------------------------------------------------------------

def estimate_noise(b_pre, groups=None, pooled: bool = False) -> np.ndarray:
    """Per-sensor noise variance from a noise-only window of shape ``(T0, N_sensors)``.

    With ``pooled`` the variances are averaged within each group of sensors
    (all sensors form one group when ``groups`` is ``None``).
    """
    b_pre = np.asarray(b_pre, dtype=float)
    if b_pre.ndim != 2 or b_pre.shape[0] < 2:
        raise ValueError("need at least two pre-stimulus samples")
    var = b_pre.var(axis=0, ddof=1)
    if pooled:
        labels = np.zeros(var.shape, dtype=int) if groups is None else np.asarray(groups)
        out = np.empty_like(var)
        for g in np.unique(labels):
            out[labels == g] = var[labels == g].mean()
        var = out
    if np.any(var <= 0):
        raise ValueError("degenerate noise estimate: zero variance")
    return var
