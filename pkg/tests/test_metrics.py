import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dipolefilter.forward import GeometryConfig, build_geometry
from dipolefilter.metrics import DipolePointSet, adct, ospa, sd, wm


@pytest.fixture(scope="module")
def grid():
    return build_geometry(GeometryConfig())[1]


def _dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def brute_adct(est, tgt):
    if not est or not tgt:
        return float("nan")
    return sum(min(_dist(e, t) for t in tgt) for e in est) / len(est)


def brute_ospa(est, tgt):
    if not est or not tgt:
        return float("nan")
    small, large = (est, tgt) if len(est) <= len(tgt) else (tgt, est)
    best = min(sum(_dist(s, large[p]) for s, p in zip(small, perm))
               for perm in itertools.permutations(range(len(large)), len(small)))
    return best / len(small)


def brute_wm(est, tgt, points, sigma, weight):
    total = 0.0
    norm = (2 * math.pi * sigma**2) ** 1.5
    for r in points:
        val = 0.0
        for (loc, q), sign in [(x, 1.0) for x in est] + [(x, -1.0) for x in tgt]:
            d2 = sum((a - b) ** 2 for a, b in zip(r, loc))
            val += sign * math.sqrt(sum(c * c for c in q)) * math.exp(-d2 / (2 * sigma**2)) / norm
        total += abs(val)
    return total * weight


def _pairs(s):
    return list(zip(s.locations.tolist(), s.moments.tolist()))


def _random_set(rng, grid, n):
    idx = rng.choice(grid.size, size=n)
    return DipolePointSet(grid.points[idx], rng.normal(size=(n, 3)))


def test_adct_nearest_of_two():
    est = DipolePointSet([[0, 0, 0.05]], None)
    tgt = DipolePointSet([[0, 0, 0.06], [0, 0.05, 0]], None)
    assert adct(est, tgt) == pytest.approx(0.01, abs=1e-15)


def test_ospa_two_estimates_on_one_target():
    a, b = [0.0, 0.0, 0.07], [0.0, 0.02, 0.0685]
    est = DipolePointSet([a, a], None)
    tgt = DipolePointSet([a, b], None)
    assert adct(est, tgt) == 0.0
    assert ospa(est, tgt) == pytest.approx(np.linalg.norm(np.subtract(a, b)) / 2)


def test_adct_not_symmetric():
    est = DipolePointSet([[0, 0, 0.07]], None)
    tgt = DipolePointSet([[0, 0, 0.07], [0, 0.03, 0.06]], None)
    assert adct(est, tgt) == 0.0
    assert adct(tgt, est) > 0.0


def test_empty_sets_are_missing(grid):
    full = DipolePointSet([[0, 0, 0.07]], [[1, 0, 0]])
    empty = DipolePointSet.empty()
    for f in (adct, sd, ospa):
        assert math.isnan(f(empty, full)) and math.isnan(f(full, empty))
    assert wm(empty, empty, grid) == 0.0
    assert wm(full, empty, grid) > 0.0


def test_wm_rejects_nonpositive_sigma(grid):
    s = DipolePointSet([[0, 0, 0.07]], [[1, 0, 0]])
    with pytest.raises(ValueError):
        wm(s, s, grid, sigma=0.0)


def test_location_distance_oracles(grid):
    """ADCT, SD and OSPA against loops and permutation enumeration, 10^3 random pairs."""
    rng = np.random.default_rng(11)
    for _ in range(1000):
        est = _random_set(rng, grid, int(rng.integers(1, 5)))
        tgt = _random_set(rng, grid, int(rng.integers(1, 5)))
        e, t = est.locations.tolist(), tgt.locations.tolist()
        assert adct(est, tgt) == pytest.approx(brute_adct(e, t), abs=1e-12)
        assert sd(est, tgt) == pytest.approx(brute_adct(e, t) + brute_adct(t, e), abs=1e-12)
        assert ospa(est, tgt) == pytest.approx(brute_ospa(e, t), abs=1e-12)


def test_wm_oracle(grid):
    """Vectorized WM against a pointwise loop over the quadrature grid."""
    rng = np.random.default_rng(12)
    weight = grid.shell_area / grid.size
    pts = grid.points.tolist()
    for _ in range(25):
        est = _random_set(rng, grid, int(rng.integers(0, 5)))
        tgt = _random_set(rng, grid, int(rng.integers(0, 5)))
        expected = brute_wm(_pairs(est), _pairs(tgt), pts, 0.01, weight)
        assert wm(est, tgt, grid) == pytest.approx(expected, rel=1e-10, abs=1e-12)


def test_wm_separated_singletons_match_two_bumps(grid):
    """Far-apart unit singletons: WM close to twice the analytic single-bump surface integral."""
    sigma, R = 0.01, grid.shell_radius
    # a 3-D Gaussian integrated over a sphere of radius R through its centre, for sigma << R
    bump = (2 * np.pi * sigma**2) ** -1.5 * 2 * np.pi * sigma**2 * (1 - np.exp(-2 * R**2 / sigma**2))
    # pick points away from the cap rim so the bumps are not truncated
    polar = np.degrees(np.arccos(grid.points[:, 2] / R))
    inner = np.nonzero(polar < 50)[0]
    a = inner[np.argmax(grid.points[inner, 0])]
    b = inner[np.argmin(grid.points[inner, 0])]
    assert np.linalg.norm(grid.points[a] - grid.points[b]) > 6 * sigma
    est = DipolePointSet(grid.points[[a]], [[1.0, 0, 0]])
    tgt = DipolePointSet(grid.points[[b]], [[0, 1.0, 0]])
    assert wm(est, tgt, grid, sigma) == pytest.approx(2 * bump, rel=0.05)


points = st.lists(st.tuples(*[st.floats(-0.08, 0.08)] * 3), min_size=1, max_size=4)


@settings(max_examples=200, deadline=None)
@given(points, points)
def test_sd_and_ospa_symmetric(a, b):
    A, B = DipolePointSet(a, None), DipolePointSet(b, None)
    assert sd(A, B) == pytest.approx(sd(B, A), abs=1e-15)
    assert ospa(A, B) == pytest.approx(ospa(B, A), abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(points, points)
def test_ospa_dominates_adct_when_estimate_is_smaller(a, b):
    if len(a) > len(b):
        a, b = b, a
    A, B = DipolePointSet(a, None), DipolePointSet(b, None)
    assert ospa(A, B) >= adct(A, B) - 1e-15


@settings(max_examples=100, deadline=None)
@given(points)
def test_self_distance_zero(a):
    A = DipolePointSet(a, None)
    assert adct(A, A) == 0.0 and sd(A, A) == 0.0 and ospa(A, A) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_wm_zero_on_self_and_homogeneous(seed, c):
    grid = build_geometry(GeometryConfig(grid_spacing_m=0.01))[1]
    rng = np.random.default_rng(seed)
    est, tgt = _random_set(rng, grid, 2), _random_set(rng, grid, 3)
    assert wm(est, est, grid) == 0.0
    scaled = wm(DipolePointSet(est.locations, c * est.moments), DipolePointSet(tgt.locations, c * tgt.moments), grid)
    assert scaled == pytest.approx(c * wm(est, tgt, grid), rel=1e-10)
