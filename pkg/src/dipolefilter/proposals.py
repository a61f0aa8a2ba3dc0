"""Data-driven importance distribution for the dipole filters.

Births are placed by a normalized, depth-weighted Tikhonov inverse of the
current measurement; deaths are proposed with an approximation of the
optimal probability obtained by freezing the previous state. The Random
Walk model additionally samples each surviving dipole's location from its
conditional posterior over the local neighborhood.

These functions work on a single :class:`~dipolefilter.model.DipoleState`
and serve as the reference for the vectorized engine in :mod:`dipolefilter.smc`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .forward import predict_field
from .model import (
    Dipole,
    DipoleState,
    Move,
    MoveTag,
    ModelParams,
    _moment_step_sqrt,
    _newborn,
    ancestor_label,
    birth_moment_logpdf,
    log_likelihood,
    moment_step_logpdf,
    rw_kernel_row,
)


class TikhonovError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class ProposalParams:
    """Tuning of the designed proposal.

    ``lambda_reg=None`` selects ``trace(G R G^T) / (N_sensors * snr2)``.
    ``pmf_floor`` is the weight of the uniform component mixed into the
    Tikhonov location pmf.
    """

    q_birth: float = 1.0 / 3.0
    depth_weight_gamma: float = 0.6
    lambda_reg: float | None = None
    snr2: float = 9.0
    pmf_floor: float = 1e-3
    max_condition: float = 1e13

    def __post_init__(self):
        if not 0 < self.q_birth < 1:
            raise ValueError("q_birth must lie in (0, 1)")
        if not 0 <= self.pmf_floor <= 1:
            raise ValueError("pmf_floor must lie in [0, 1]")
        if self.lambda_reg is not None and self.lambda_reg <= 0:
            raise ValueError("lambda_reg must be positive")

    def birth_rate(self, n_prev: int, model: ModelParams) -> float:
        """Birth proposal probability; zero wherever the prior forbids a birth."""
        return self.q_birth if model.birth_prob(n_prev) > 0 else 0.0


@dataclass(frozen=True, eq=False)
class TikhonovProposal:
    lambda_reg: float
    depth_weight_gamma: float
    location_pmf: np.ndarray
    amplitude: np.ndarray


class TikhonovOperator:
    """Precomputed regularized inverse ``R G^T (G R G^T + lambda I)^-1``.

    Building it once per leadfield makes each per-step pmf a single
    matrix-vector product.
    """

    def __init__(self, leadfield, params: ProposalParams | None = None):
        params = params or ProposalParams()
        G = np.asarray(leadfield.matrix)
        n_sensors, n_cols = G.shape
        block_norm2 = np.sum(G.reshape(n_sensors, n_cols // 3, 3) ** 2, axis=(0, 2))
        weights = np.repeat(block_norm2 ** (-params.depth_weight_gamma), 3)
        GRGt = (G * weights) @ G.T
        lam = params.lambda_reg
        if lam is None:
            lam = np.trace(GRGt) / (n_sensors * params.snr2)
        system = GRGt + lam * np.eye(n_sensors)
        cond = np.linalg.cond(system)
        if not np.isfinite(cond) or cond > params.max_condition:
            raise TikhonovError(f"Tikhonov system is ill-conditioned (condition number {cond:.3e})")
        self.params = params
        self.lambda_reg = float(lam)
        self.condition = float(cond)
        self.operator = (weights[:, None] * G.T) @ np.linalg.inv(system)
        self.n_grid = n_cols // 3

    def __call__(self, b_t) -> TikhonovProposal:
        b_t = np.asarray(b_t, dtype=float)
        J = (self.operator @ b_t).reshape(self.n_grid, 3)
        amp = np.linalg.norm(J, axis=1)
        total = amp.sum()
        uniform = np.full(self.n_grid, 1.0 / self.n_grid)
        if not total > 0:
            pmf = uniform
        else:
            eps = self.params.pmf_floor
            pmf = (1.0 - eps) * amp / total + eps * uniform
            pmf /= pmf.sum()
        return TikhonovProposal(self.lambda_reg, self.params.depth_weight_gamma, pmf, amp)


def tikhonov_location_pmf(b_t, leadfield, params: ProposalParams | None = None) -> TikhonovProposal:
    return TikhonovOperator(leadfield, params)(b_t)


@dataclass(frozen=True)
class DeathWeights:
    q_death: float
    p_dying: np.ndarray
    log_p_dying: np.ndarray


def death_probability(q_birth, p_birth, p_death, ll_prev, ll_minus) -> tuple[float, np.ndarray]:
    """Approximately optimal death probability and victim log-pmf from frozen likelihoods."""
    ll_minus = np.asarray(ll_minus, dtype=float)
    n = len(ll_minus)
    if n == 0:
        return 0.0, np.zeros(0)
    log_dying = ll_minus - logsumexp(ll_minus)
    if p_death <= 0:
        return 0.0, log_dying
    log_a = np.log(p_death) + logsumexp(ll_minus) - np.log(n)
    stay = 1.0 - p_birth - p_death
    log_b = ll_prev + np.log(stay) if stay > 0 else -np.inf
    q_death = (1.0 - q_birth) * float(expit(log_a - log_b))
    return q_death, log_dying


def death_weights(j_prev: DipoleState, b_t, leadfield, model: ModelParams,
                  proposal: ProposalParams | None = None) -> DeathWeights:
    """Death proposal probability and victim distribution for one particle."""
    proposal = proposal or ProposalParams()
    n = j_prev.count
    if n == 0:
        return DeathWeights(0.0, np.zeros(0), np.zeros(0))
    ll_prev = log_likelihood(b_t, j_prev, leadfield, model)
    ll_minus = [log_likelihood(b_t, j_prev.without(k), leadfield, model) for k in range(n)]
    q_death, log_dying = death_probability(
        proposal.birth_rate(n, model), model.birth_prob(n), model.p_death(n), ll_prev, ll_minus
    )
    return DeathWeights(q_death, np.exp(log_dying), log_dying)


def _step(rng, d: Dipole, model, location=None) -> Dipole:
    q = d.moment + _moment_step_sqrt(d.moment, model) @ rng.standard_normal(3)
    return Dipole(d.location if location is None else location, q, d.birth_time, d.moment_history + [q])


def _choose_move(rng, q_birth, q_death):
    u = rng.random()
    if u < q_birth:
        return Move.BIRTH
    if u < q_birth + q_death:
        return Move.DEATH
    return Move.STAY


def sample_proposal(rng, j_prev: DipoleState, b_t, tikhonov: TikhonovProposal, death: DeathWeights,
                    proposal: ProposalParams, model: ModelParams) -> tuple[DipoleState, MoveTag, float]:
    """Draw from the designed proposal and return the realized move's log density."""
    n = j_prev.count
    t = j_prev.t + 1
    q_b = proposal.birth_rate(n, model)
    kind = _choose_move(rng, q_b, death.q_death)
    victim = None
    if kind is Move.BIRTH:
        survivors = [_step(rng, d, model) for d in j_prev.dipoles]
        loc = int(rng.choice(len(tikhonov.location_pmf), p=tikhonov.location_pmf))
        newborn = _newborn(loc, rng, model, t)
        j_next = DipoleState(survivors + [newborn], t)
        move = MoveTag(Move.BIRTH)
        log_q = np.log(q_b) + np.log(tikhonov.location_pmf[loc]) + birth_moment_logpdf(newborn.moment, model)
    elif kind is Move.DEATH:
        victim = int(rng.choice(n, p=death.p_dying))
        survivors = [_step(rng, d, model) for i, d in enumerate(j_prev.dipoles) if i != victim]
        j_next = DipoleState(survivors, t)
        move = MoveTag(Move.DEATH, victim)
        log_q = np.log(death.q_death) + death.log_p_dying[victim]
    else:
        j_next = DipoleState([_step(rng, d, model) for d in j_prev.dipoles], t)
        move = MoveTag(Move.STAY)
        log_q = np.log1p(-q_b - death.q_death)
    for m, d in enumerate(j_next.dipoles[: j_next.count - (kind is Move.BIRTH)]):
        prev = j_prev.dipoles[ancestor_label(victim, m) if kind is Move.DEATH else m]
        log_q += moment_step_logpdf(d.moment, prev.moment, model)
    return j_next, move, float(log_q)


def proposal_logdensity(j_prev: DipoleState, j_next: DipoleState, tikhonov: TikhonovProposal,
                        death: DeathWeights, proposal: ProposalParams, model: ModelParams) -> float:
    """Full mixture density of the designed proposal (sums every matching summand)."""
    n = j_prev.count
    q_b = proposal.birth_rate(n, model)
    prev_locs, next_locs = j_prev.locations, j_next.locations
    terms = []

    def moments(pairs):
        return sum(moment_step_logpdf(j_next.dipoles[b].moment, j_prev.dipoles[a].moment, model)
                   for a, b in pairs)

    if j_next.count == n + 1 and q_b > 0 and next_locs[:n] == prev_locs:
        newborn = j_next.dipoles[n]
        terms.append(np.log(q_b) + np.log(tikhonov.location_pmf[newborn.location])
                     + birth_moment_logpdf(newborn.moment, model) + moments([(i, i) for i in range(n)]))
    if j_next.count == n - 1 and death.q_death > 0:
        for j in range(n):
            pairs = [(ancestor_label(j, m), m) for m in range(n - 1)]
            if all(prev_locs[a] == next_locs[b] for a, b in pairs):
                terms.append(np.log(death.q_death) + death.log_p_dying[j] + moments(pairs))
    if j_next.count == n and next_locs == prev_locs and 1 - q_b - death.q_death > 0:
        terms.append(np.log1p(-q_b - death.q_death) + moments([(i, i) for i in range(n)]))
    return float(logsumexp(terms)) if terms else -np.inf


def matched_log_ratio(move: MoveTag, n_prev: int, location: int | None, tikhonov: TikhonovProposal | None,
                      death: DeathWeights | None, proposal: ProposalParams | None, model: ModelParams,
                      n_grid: int) -> float:
    """``log p_move / q_move`` for the realized move with moment factors cancelled.

    ``tikhonov=None`` means the birth location was drawn uniformly and
    ``proposal=None`` denotes the bootstrap proposal (ratio zero).
    """
    if proposal is None:
        return 0.0
    p_b, p_d = model.birth_prob(n_prev), model.p_death(n_prev)
    q_b = proposal.birth_rate(n_prev, model)
    q_d = death.q_death if death is not None else 0.0
    if move.kind is Move.BIRTH:
        q_loc = 1.0 / n_grid if tikhonov is None else tikhonov.location_pmf[location]
        return float(np.log(p_b / q_b) - np.log(n_grid) - np.log(q_loc))
    if move.kind is Move.DEATH:
        return float(np.log(p_d / n_prev) - np.log(q_d) - death.log_p_dying[move.victim])
    return float(np.log1p(-p_b - p_d) - np.log1p(-q_b - q_d))


# --- Random Walk conditional location proposal --------------------------------

def rw_conditional_location_step(rng, survivors: DipoleState, b_t, leadfield, model: ModelParams, grid,
                                 fixed=()) -> tuple[DipoleState, float]:
    """Move each surviving dipole, most recently born first.

    Each dipole's moment is drawn from the dynamics; its location is then
    drawn over ``{current} + neighbors_rw`` with probability proportional to
    the jump kernel times the likelihood given the other dipoles at their
    most recent values. ``fixed`` holds dipoles already at time ``t`` (a
    newborn) that enter the likelihood but are not moved.

    Returns the state at time ``t`` (survivors in label order followed by
    ``fixed``) and the log proposal density of the realized draws.
    """
    current = list(survivors.dipoles)
    fixed = list(fixed)
    log_q = 0.0
    for k in reversed(range(len(current))):
        d = current[k]
        moved = _step(rng, d, model)
        log_q += moment_step_logpdf(moved.moment, d.moment, model)
        others = DipoleState([x for i, x in enumerate(current) if i != k] + fixed)
        base = b_t - predict_field(others, leadfield)
        cands, kern = rw_kernel_row(grid, d.location, model.rw_sigma_d)
        ll = np.array([
            -0.5 * np.sum((base - leadfield.block(c) @ moved.moment) ** 2 / model.noise_cov_diag)
            for c in cands
        ])
        logits = np.log(kern) + ll
        probs = softmax(logits)
        pick = int(rng.choice(len(cands), p=probs))
        log_q += float(logits[pick] - logsumexp(logits))
        moved.location = int(cands[pick])
        current[k] = moved
    return DipoleState(current + fixed, survivors.t + 1), float(log_q)


def sample_rw_proposal(rng, j_prev: DipoleState, b_t, tikhonov: TikhonovProposal, death: DeathWeights,
                       proposal: ProposalParams, model: ModelParams, leadfield, grid
                       ) -> tuple[DipoleState, MoveTag, float]:
    """Designed birth/death followed by the conditional location step for survivors."""
    n = j_prev.count
    t = j_prev.t + 1
    q_b = proposal.birth_rate(n, model)
    kind = _choose_move(rng, q_b, death.q_death)
    fixed = []
    if kind is Move.BIRTH:
        kept = list(j_prev.dipoles)
        loc = int(rng.choice(len(tikhonov.location_pmf), p=tikhonov.location_pmf))
        fixed = [_newborn(loc, rng, model, t)]
        move = MoveTag(Move.BIRTH)
        log_q = np.log(q_b) + np.log(tikhonov.location_pmf[loc]) + birth_moment_logpdf(fixed[0].moment, model)
    elif kind is Move.DEATH:
        victim = int(rng.choice(n, p=death.p_dying))
        kept = [d for i, d in enumerate(j_prev.dipoles) if i != victim]
        move = MoveTag(Move.DEATH, victim)
        log_q = np.log(death.q_death) + death.log_p_dying[victim]
    else:
        kept = list(j_prev.dipoles)
        move = MoveTag(Move.STAY)
        log_q = np.log1p(-q_b - death.q_death)
    j_next, log_q_loc = rw_conditional_location_step(
        rng, DipoleState(kept, j_prev.t), b_t, leadfield, model, grid, fixed
    )
    return j_next, move, float(log_q + log_q_loc)
