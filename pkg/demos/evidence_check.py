"""
Is the evidence estimate calibrated?
====================================

With births and deaths switched off and one dipole pinned to a known grid
point, the model is linear-Gaussian and a Kalman filter gives the exact
log-evidence. The particle estimate should scatter around it, and the
ratio of evidences (not their logs) should average to one.
"""

import numpy as np
from scipy.stats import multivariate_normal

from dipolefilter import FilterConfig, ModelParams, build_geometry, compute_leadfield, run

sensors, grid = build_geometry()
L = compute_leadfield(grid, sensors)
k = 700
G = L.block(k)
noise = np.full(sensors.count, (2.5e-15) ** 2)
model = ModelParams(p_birth=0.0, death_rate=0.0, delta_parallel_factor=1.0).with_noise(noise)
prior_var, step_var = model.sigma_q**2, model.delta_var


def kalman(b):
    m, P, total = np.zeros(3), prior_var * np.eye(3), 0.0
    for y in b:
        P = P + step_var * np.eye(3)
        S = G @ P @ G.T + np.diag(noise)
        total += multivariate_normal.logpdf(y, G @ m, S)
        K = np.linalg.solve(S, G @ P).T
        m, P = m + K @ (y - G @ m), P - K @ G @ P
    return total


rng = np.random.default_rng(0)
diffs = []
for r in range(10):
    q = rng.normal(scale=np.sqrt(prior_var), size=3)
    b = []
    for _ in range(20):
        q = q + rng.normal(scale=np.sqrt(step_var), size=3)
        b.append(G @ q + rng.normal(size=sensors.count) * np.sqrt(noise))
    est = run(FilterConfig(n_particles=10_000, proposal="bootstrap", move=False, seed=r), np.array(b), model, L,
              grid, initial_locations=[k]).log_evidence
    diffs.append(est - kalman(b))
    print(f"run {r}: particle - exact = {diffs[-1]:+.3f}")
print(f"mean evidence ratio {np.mean(np.exp(diffs)):.3f}")
