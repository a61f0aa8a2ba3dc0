import numpy as np
import pytest
from scipy.special import logsumexp

from dipolefilter.forward import GeometryConfig, build_geometry, compute_leadfield, make_grid, Leadfield
from dipolefilter.model import (
    NAM,
    Dipole,
    DipoleState,
    Move,
    ModelParams,
    log_likelihood,
    moment_step_logpdf,
    sample_transition,
    transition_logdensity,
)
from dipolefilter.proposals import (
    ProposalParams,
    TikhonovError,
    TikhonovOperator,
    death_probability,
    death_weights,
    matched_log_ratio,
    proposal_logdensity,
    rw_conditional_location_step,
    sample_proposal,
    tikhonov_location_pmf,
)


@pytest.fixture(scope="module")
def geometry():
    sensors, grid = build_geometry(GeometryConfig())
    return sensors, grid, compute_leadfield(grid, sensors)


TOY = np.array([[0.0, 0.0, 0.07], [0.02, 0.0, 0.067], [0.0, 0.025, 0.065]])


@pytest.fixture(scope="module")
def toy():
    sensors, _ = build_geometry(GeometryConfig(n_sensors=12))
    grid = make_grid(TOY, spacing=0.02, rm_radius=0.03, rw_radius=0.03)
    return sensors, grid, compute_leadfield(grid, sensors)


def test_pmf_is_a_distribution(geometry):
    _, grid, L = geometry
    rng = np.random.default_rng(0)
    op = TikhonovOperator(L)
    prop = op(rng.normal(size=L.n_sensors) * 1e-14)
    assert prop.location_pmf.shape == (grid.size,)
    assert prop.location_pmf.sum() == pytest.approx(1.0, abs=1e-12)
    assert prop.location_pmf.min() >= 1e-3 / grid.size * (1 - 1e-12)
    assert prop.lambda_reg > 0


def test_zero_data_gives_uniform(geometry):
    _, grid, L = geometry
    prop = tikhonov_location_pmf(np.zeros(L.n_sensors), L)
    assert np.allclose(prop.location_pmf, 1.0 / grid.size)


def test_strong_source_peak_near_truth(geometry):
    sensors, grid, L = geometry
    rng = np.random.default_rng(1)
    op = TikhonovOperator(L)
    for k in rng.choice(grid.size, 20, replace=False):
        r = grid.points[k]
        u = np.cross(r, rng.normal(size=3))
        b = L.block(k) @ (u / np.linalg.norm(u) * 10 * NAM)
        peak = np.argmax(op(b).location_pmf)
        assert np.linalg.norm(grid.points[peak] - r) < 0.015


def test_ill_conditioned_system_raises():
    G = np.outer(np.ones(4), np.arange(1.0, 7.0))
    with pytest.raises(TikhonovError, match="condition"):
        TikhonovOperator(Leadfield(G), ProposalParams(lambda_reg=1e-30))


def test_death_probability_formula():
    q_b, p_b, p_d = 1 / 3, 0.01, 0.1
    ll_prev, ll_minus = -3.0, np.array([-2.0, -5.0, -4.0])
    q_d, log_dying = death_probability(q_b, p_b, p_d, ll_prev, ll_minus)
    mean_minus = np.mean(np.exp(ll_minus))
    expect = (1 - q_b) * mean_minus * p_d / (mean_minus * p_d + np.exp(ll_prev) * (1 - p_b - p_d))
    assert q_d == pytest.approx(expect, rel=1e-12)
    assert np.allclose(np.exp(log_dying), np.exp(ll_minus) / np.exp(ll_minus).sum())
    assert death_probability(q_b, p_b, p_d, ll_prev, []) == (0.0, pytest.approx(np.zeros(0)))
    assert death_probability(q_b, p_b, 0.0, ll_prev, ll_minus)[0] == 0.0


def test_death_weights_use_likelihood_without_each_dipole(toy):
    sensors, grid, L = toy
    rng = np.random.default_rng(3)
    model = ModelParams().with_noise(np.full(sensors.count, 1e-30))
    j = DipoleState([Dipole(k, rng.normal(size=3) * NAM) for k in (0, 2)], 4)
    b = rng.normal(size=sensors.count) * 1e-15
    dw = death_weights(j, b, L, model)
    ll = [log_likelihood(b, j.without(k), L, model) for k in range(2)]
    assert np.allclose(dw.log_p_dying, np.array(ll) - logsumexp(ll))


def _toy_model(sensors, **kw):
    return ModelParams(n_max=3, p_birth=0.2, death_rate=0.25, **kw).with_noise(np.full(sensors.count, 4e-30))


def test_sampled_log_q_equals_mixture_density(toy):
    sensors, grid, L = toy
    rng = np.random.default_rng(4)
    model = _toy_model(sensors)
    prop = ProposalParams()
    op = TikhonovOperator(L, prop)
    j_prev = DipoleState([Dipole(0, rng.normal(size=3) * NAM), Dipole(2, rng.normal(size=3) * NAM)], 3)
    # data half explained by the current state keeps all three moves plausible
    b = L.block(0) @ j_prev.dipoles[0].moment + 0.5 * L.block(2) @ j_prev.dipoles[2 - 1].moment
    tik, dw = op(b), death_weights(j_prev, b, L, model, prop)
    seen = set()
    for _ in range(200):
        j_next, move, log_q = sample_proposal(rng, j_prev, b, tik, dw, prop, model)
        seen.add(move.kind)
        if move.kind is Move.BIRTH and j_next.dipoles[-1].location in j_prev.locations:
            continue  # coincident locations: several summands share the pattern
        assert log_q == pytest.approx(proposal_logdensity(j_prev, j_next, tik, dw, prop, model), rel=1e-10, abs=1e-8)
    assert seen == {Move.BIRTH, Move.DEATH, Move.STAY}


def test_matched_ratio_equals_full_mixture(toy):
    """Weight increment from the realized component equals p * prior / q by full enumeration."""
    sensors, grid, L = toy
    rng = np.random.default_rng(5)
    model = _toy_model(sensors)
    prop = ProposalParams()
    op = TikhonovOperator(L, prop)
    checked = 0
    for trial in range(60):
        n_prev = int(rng.integers(0, 3))
        locs = rng.choice(grid.size, n_prev, replace=False)
        j_prev = DipoleState([Dipole(int(k), rng.normal(size=3) * NAM) for k in locs], 3)
        b = L.matrix @ rng.normal(size=3 * grid.size) * NAM
        tik, dw = op(b), death_weights(j_prev, b, L, model, prop)
        j_next, move, log_q = sample_proposal(rng, j_prev, b, tik, dw, prop, model)
        if len(set(j_next.locations)) < j_next.count:
            continue
        full = (transition_logdensity(j_prev, j_next, model, grid)
                - proposal_logdensity(j_prev, j_next, tik, dw, prop, model))
        loc = j_next.dipoles[-1].location if move.kind is Move.BIRTH else None
        matched = matched_log_ratio(move, n_prev, loc, tik, dw, prop, model, grid.size)
        assert matched == pytest.approx(full, abs=1e-8)
        checked += 1
    assert checked > 30


def test_bootstrap_ratio_is_zero():
    assert matched_log_ratio(None, 2, None, None, None, None, ModelParams(), 10) == 0.0


def test_birth_rate_zero_at_capacity():
    model = ModelParams(n_max=2)
    assert ProposalParams().birth_rate(2, model) == 0.0
    assert ProposalParams().birth_rate(1, model) == pytest.approx(1 / 3)


def test_death_weights_prefer_spurious_dipole(toy):
    sensors, grid, L = toy
    model = ModelParams().with_noise(np.full(sensors.count, 1e-32))
    real = Dipole(0, np.array([0.0, 1.0, 0.0]) * NAM)
    spurious = Dipole(2, np.array([1.0, 0.0, 0.0]) * NAM)
    b = L.block(0) @ real.moment
    j = DipoleState([real, spurious], 4)
    ll = [log_likelihood(b, j.without(k), L, model) for k in range(2)]
    assert ll[1] - ll[0] >= 20
    dw = death_weights(j, b, L, model)
    assert dw.p_dying[1] >= 0.999


def test_birth_frequency_and_capacity(toy):
    sensors, grid, L = toy
    rng = np.random.default_rng(7)
    model = ModelParams().with_noise(np.full(sensors.count, 1e-30))
    prop = ProposalParams()
    tik = TikhonovOperator(L, prop)(L.block(1) @ np.array([0.0, 1.0, 0.0]) * NAM)
    empty = DipoleState([], 0)
    dw = death_weights(empty, None, L, model, prop)
    n = 10**6
    births = sum(sample_proposal(rng, empty, None, tik, dw, prop, model)[1].kind is Move.BIRTH for _ in range(n))
    assert abs(births / n - 1 / 3) < 0.002
    full = DipoleState([Dipole(k % 3, np.ones(3) * NAM) for k in range(model.n_max)], 0)
    dw = death_weights(full, np.zeros(sensors.count), L, model, prop)
    for _ in range(2000):
        assert sample_proposal(rng, full, None, tik, dw, prop, model)[1].kind is not Move.BIRTH


def test_rw_conditional_step_finds_true_location():
    """Noiseless data and a small moment step so the moment draw cannot mimic a shift."""
    sensors, grid = build_geometry(GeometryConfig())
    L = compute_leadfield(grid, sensors)
    rng = np.random.default_rng(6)
    model = ModelParams(p_birth=0.0, death_rate=0.0, delta_base_var_nam2=1e-6).with_noise(np.full(sensors.count, 1e-36))
    k = 700
    r = grid.points[k]
    u = np.cross(r, [1.0, 0.0, 0.0])
    q = u / np.linalg.norm(u) * NAM
    b = L.block(k) @ q
    start = DipoleState([Dipole(k, q)], 3)
    hits = 0
    n = 10**4
    for _ in range(n):
        nxt, log_q = rw_conditional_location_step(rng, start, b, L, model, grid)
        hits += nxt.locations == (k,)
        assert np.isfinite(log_q)
    assert hits / n >= 0.99


def test_rw_conditional_step_density(toy):
    """The returned log density is the product of the categorical and moment draws."""
    sensors, grid, L = toy
    rng = np.random.default_rng(8)
    model = _toy_model(sensors)
    j = DipoleState([Dipole(0, rng.normal(size=3) * NAM, 0), Dipole(1, rng.normal(size=3) * NAM, 2)], 3)
    b = L.block(2) @ np.array([1.0, 0.0, 0.0]) * NAM
    counts, logq = {}, {}
    n = 4000
    for _ in range(n):
        nxt, log_q = rw_conditional_location_step(rng, j, b, L, model, grid)
        assert nxt.count == 2 and nxt.t == 4
        for old, new in zip(j.locations, nxt.locations):
            assert new == old or new in grid.neighbors_rw[old]
        counts[nxt.locations] = counts.get(nxt.locations, 0) + 1
        # strip the moment factors to recover the location probability
        moments = sum(moment_step_logpdf(a.moment, p.moment, model) for a, p in zip(nxt.dipoles, j.dipoles))
        logq.setdefault(nxt.locations, []).append(log_q - moments)
    # location probabilities depend on the sampled moments, so compare averages loosely
    for locs, c in counts.items():
        if c > 200:
            assert abs(c / n - np.mean(np.exp(logq[locs]))) < 0.1


def test_designed_and_bootstrap_agree_on_one_step(toy):
    """Self-normalized estimates of E[N_t] under both proposals agree within 3 SE."""
    sensors, grid, L = toy
    rng = np.random.default_rng(9)
    model = _toy_model(sensors).with_noise(np.full(sensors.count, 1e-28))
    prop = ProposalParams()
    j_prev = DipoleState([Dipole(0, np.array([0.0, 1.0, 0.0]) * NAM)], 2)
    b = L.block(0) @ j_prev.dipoles[0].moment + L.block(2) @ np.array([1.0, 0.0, 0.0]) * NAM
    tik, dw = TikhonovOperator(L, prop)(b), death_weights(j_prev, b, L, model, prop)

    def estimate(draws):
        n, logw = np.array([d[0] for d in draws]), np.array([d[1] for d in draws])
        w = np.exp(logw - logw.max())
        w /= w.sum()
        mean = np.sum(w * n)
        return mean, np.sqrt(np.sum(w**2 * (n - mean) ** 2))

    m = 20000
    designed = []
    for _ in range(m):
        j, _, log_q = sample_proposal(rng, j_prev, b, tik, dw, prop, model)
        designed.append((j.count, transition_logdensity(j_prev, j, model, grid) - log_q
                         + log_likelihood(b, j, L, model)))
    boot = []
    for _ in range(m):
        j, _ = sample_transition(rng, j_prev, model, grid)
        boot.append((j.count, log_likelihood(b, j, L, model)))
    (a, sa), (c, sc) = estimate(designed), estimate(boot)
    assert abs(a - c) < 3 * np.hypot(sa, sc) + 1e-9
