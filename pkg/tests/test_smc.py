import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp

from dipolefilter.forward import GeometryConfig, build_geometry, compute_leadfield
from dipolefilter.model import NAM, Move, MoveTag, ModelParams, truncated_poisson_pmf
from dipolefilter.proposals import death_probability, matched_log_ratio, ProposalParams
from dipolefilter.smc import (
    FilterConfig,
    NumericalCollapse,
    ParticleFilter,
    _death_probability,
    ess,
    run,
    systematic_resample,
)
from oracles import kalman_log_evidence, simulate_single_dipole


@pytest.fixture(scope="module")
def small():
    sensors, grid = build_geometry(GeometryConfig(grid_spacing_m=0.01, n_sensors=30))
    return sensors, grid, compute_leadfield(grid, sensors)


def _data(small, seed=0, T=8, noise_ft=5.0):
    sensors, grid, L = small
    rng = np.random.default_rng(seed)
    k = grid.size // 2
    b = np.array([L.block(k) @ np.array([0.0, 1.0, 0.0]) * NAM * (t > 2) for t in range(T)])
    b += rng.normal(size=b.shape) * noise_ft * 1e-15
    return b, ModelParams().with_noise(np.full(sensors.count, (noise_ft * 1e-15) ** 2))


def test_ess_examples():
    assert ess(np.full(8, 1 / 8)) == pytest.approx(8)
    assert ess(np.eye(5)[2]) == 1.0
    assert ess([0.5, 0.25, 0.25]) == pytest.approx(1 / 0.375, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=40), st.integers(0, 2**31))
def test_ess_bounds_and_resample_counts(raw, seed):
    w = np.array(raw) / np.sum(raw)
    n = len(w)
    assert 1 - 1e-12 <= ess(w) <= n * (1 + 1e-12)
    idx = systematic_resample(np.random.default_rng(seed), w)
    counts = np.bincount(idx, minlength=n)
    assert counts.sum() == n
    # tolerance absorbs cumulative-sum rounding at exact integer boundaries
    assert np.all(counts >= np.floor(n * w - 1e-9)) and np.all(counts <= np.ceil(n * w + 1e-9))


def test_resample_examples():
    rng = np.random.default_rng(0)
    assert np.array_equal(systematic_resample(rng, np.full(6, 1 / 6)), np.arange(6))
    w = np.array([0.7] + [0.3] + [0.0] * 8)
    for _ in range(100):
        assert np.bincount(systematic_resample(rng, w), minlength=10)[:2].tolist() == [7, 3]


def test_resample_offspring_unbiased():
    rng = np.random.default_rng(1)
    n, reps = 7, 10**5
    w = rng.dirichlet(np.ones(n))
    counts = np.zeros((reps, n))
    for r in range(reps):
        counts[r] = np.bincount(systematic_resample(rng, w), minlength=n)
    se = counts.std(axis=0, ddof=1) / np.sqrt(reps)
    assert np.all(np.abs(counts.mean(axis=0) - n * w) <= 3 * se + 1e-12)


def test_init_cloud(small):
    sensors, grid, L = small
    model = ModelParams().with_noise(np.ones(sensors.count))
    cfg = FilterConfig.from_variant("static-bootstrap", n_particles=20000, seed=3)
    cloud = ParticleFilter(cfg, model, L, grid).init()
    assert cloud.ess == 20000 and cloud.cum_log_evidence == 0
    assert np.allclose(cloud.weights, 1 / 20000)
    pmf = truncated_poisson_pmf(1.0, model.n_max)
    mean = np.sum(np.arange(len(pmf)) * pmf)
    sd = np.sqrt(np.sum((np.arange(len(pmf)) - mean) ** 2 * pmf))
    assert abs(cloud.count.mean() - mean) < 3 * sd / np.sqrt(20000)
    again = ParticleFilter(cfg, model, L, grid).init()
    assert np.array_equal(cloud.loc, again.loc) and np.array_equal(cloud.mom, again.mom)


def test_vectorized_death_probability_matches_scalar():
    rng = np.random.default_rng(2)
    n, kmax = 50, 4
    n_prev = rng.integers(0, kmax + 1, n)
    p_b = np.where(n_prev < kmax, 0.01, 0.0)
    p_d = 1 - (1 - 1 / 30) ** n_prev
    q_b = np.where(p_b > 0, 1 / 3, 0.0)
    ll_prev = rng.normal(size=n) * 5
    ll_minus = np.where(np.arange(kmax)[None, :] < n_prev[:, None], rng.normal(size=(n, kmax)) * 5, -np.inf)
    q_d, log_dying = _death_probability(q_b, p_b, p_d, ll_prev, ll_minus, n_prev)
    for i in range(n):
        qs, ls = death_probability(q_b[i], p_b[i], p_d[i], ll_prev[i], ll_minus[i, : n_prev[i]])
        assert q_d[i] == pytest.approx(qs, rel=1e-12, abs=1e-300)
        assert np.allclose(log_dying[i, : n_prev[i]], ls)


def test_uniform_birth_increment():
    # uniform location proposal leaves log(P_birth / Q_birth) = log(3/100)
    model = ModelParams()
    r = matched_log_ratio(MoveTag(Move.BIRTH), 2, 5, None, None, ProposalParams(), model, 1000)
    assert r == pytest.approx(np.log(3 / 100), abs=1e-12)


def test_residual_cache_reconstructs_history(small):
    sensors, grid, L = small
    b, model = _data(small)
    model = ModelParams(death_rate=0.0, p_birth=0.2).with_noise(model.noise_cov_diag)
    pf = ParticleFilter(FilterConfig.from_variant("static-rm", n_particles=200, seed=4), model, L, grid)
    cloud = pf.init()
    for t in range(len(b)):
        cloud = pf.step(cloud, b[t])
        assert np.allclose(cloud.weights, 1 / 200)
    for i in range(cloud.n_particles):
        for n in range(1, cloud.t + 1):
            pred = sum((L.block(cloud.loc[i, k]) @ cloud.mom_hist[i, k, n] for k in range(cloud.count[i])),
                       np.zeros(sensors.count))
            assert np.allclose(cloud.res_hist[i, n], b[n - 1] - pred, rtol=0, atol=1e-6 * np.abs(b).max())


def test_rm_acceptance_from_cache_matches_recompute(small):
    sensors, grid, L = small
    b, model = _data(small, seed=5)
    pf = ParticleFilter(FilterConfig.from_variant("static-rm", n_particles=100, seed=5), model, L, grid)
    cloud = pf.init()
    for t in range(len(b)):
        cloud = pf.step(cloud, b[t])
    rows = np.nonzero(cloud.count > 0)[0]
    k = 0
    r_old = cloud.loc[rows, k]
    r_new = pf._rm_table[r_old, 0]
    ok = r_new >= 0
    rows, r_old, r_new = rows[ok], r_old[ok], r_new[ok]
    lo, t = 1, cloud.t
    fast = pf._rm_loglik_delta(cloud, rows, k, L.blocks[r_new] - L.blocks[r_old], lo, t)
    for p, i in enumerate(rows):
        slow = 0.0
        for n in range(lo, t + 1):
            q = cloud.mom_hist[i, k, n]
            res_old = cloud.res_hist[i, n]
            res_new = res_old - (L.block(r_new[p]) - L.block(r_old[p])) @ q
            slow += pf._loglik(res_new) - pf._loglik(res_old)
        assert fast[p] == pytest.approx(slow, abs=1e-8)


def test_bootstrap_eval_count_exact(small):
    b, model = _data(small)
    sensors, grid, L = small
    for variant in ("static-bootstrap", "rw-bootstrap"):
        out = run(FilterConfig.from_variant(variant, n_particles=150, seed=1), b, model, L, grid)
        assert out.eval_counts["total"] == len(b) * 150


def test_empty_series(small):
    sensors, grid, L = small
    _, model = _data(small)
    out = run(FilterConfig(n_particles=10), np.zeros((0, sensors.count)), model, L, grid)
    assert out.log_evidence == 0.0 and len(out.ess) == 0 and len(out.cum_log_evidence) == 0


@pytest.mark.parametrize("variant", ["static-rm", "static-bootstrap", "rw-designed", "rw-bootstrap"])
def test_deterministic_replay(small, variant):
    sensors, grid, L = small
    b, model = _data(small)
    a = run(FilterConfig.from_variant(variant, n_particles=100, seed=7), b, model, L, grid, summarize=True)
    c = run(FilterConfig.from_variant(variant, n_particles=100, seed=7), b, model, L, grid, summarize=True)
    assert np.array_equal(a.cum_log_evidence, c.cum_log_evidence)
    assert np.array_equal(a.ess, c.ess)
    assert all(np.array_equal(x.intensity, y.intensity) for x, y in zip(a.summaries, c.summaries))
    assert np.all((a.ess >= 1 - 1e-9) & (a.ess <= 100 + 1e-9))


def test_errors(small):
    sensors, grid, L = small
    b, model = _data(small)
    pf = ParticleFilter(FilterConfig(n_particles=10), model, L, grid)
    cloud = pf.init()
    with pytest.raises(ValueError):
        pf.step(cloud, np.zeros(3))
    with pytest.raises(NumericalCollapse):
        pf.step(cloud, np.full(sensors.count, np.nan))
    with pytest.raises(ValueError):
        ParticleFilter(FilterConfig(n_particles=10), ModelParams(), L, grid)
    with pytest.raises(ValueError):
        FilterConfig(n_particles=1)
    with pytest.raises(ValueError):
        FilterConfig(model="rw", move=True)


def test_linear_gaussian_evidence(small):
    """Fixed single dipole, no births or deaths: particle evidence tracks the Kalman recursion."""
    sensors, grid, L = small
    k = grid.size // 3
    noise = np.full(sensors.count, (40e-15) ** 2)
    model = ModelParams(p_birth=0.0, death_rate=0.0, delta_parallel_factor=1.0).with_noise(noise)
    rng = np.random.default_rng(11)
    diffs = []
    for r in range(5):
        b = simulate_single_dipole(rng, 10, L.block(k), noise, model.sigma_q**2, model.delta_var)
        exact = kalman_log_evidence(b, L.block(k), noise, model.sigma_q**2, model.delta_var)
        cfg = FilterConfig(n_particles=3000, proposal="bootstrap", move=False, seed=r)
        out = run(cfg, b, model, L, grid, initial_locations=[k])
        diffs.append(out.log_evidence - exact)
    assert abs(np.mean(diffs)) < 0.5


def test_mean_lifetime_counts_dead_lineage(small):
    sensors, grid, L = small
    _, model = _data(small)
    pf = ParticleFilter(FilterConfig(n_particles=4, proposal="bootstrap", move=False), model, L, grid)
    cloud = pf.init(initial_locations=[3])
    cloud.t = 9
    cloud.dead_life[:] = [0, 4, 4, 0]
    cloud.dead_count[:] = [0, 1, 1, 0]
    # each particle's living dipole has age 10; two lineages add a dipole of life 4
    assert pf.mean_lifetime(cloud) == pytest.approx((10 * 4 + 8) / 6)
