"""
Which dynamic model do the data support?
========================================

Static-model data are filtered under both the Static and the Random Walk
models. The cumulative log-evidence traces separate once the sources are
on; a positive terminal gap favours the Static model.

The evidence is a profile likelihood over the fixed noise, birth/death and
moment parameters, so gaps compare models under those settings.

With only 1000 particles the Static estimate is itself noisy: when the cloud
settles on a wrong configuration (for example two dipoles sharing one source)
its evidence drops and the gap can come out negative even though the data are
Static. Rerunning such a dataset with 10^4 particles usually reverses the sign.
"""

import numpy as np

from dipolefilter import (
    FilterConfig,
    ModelParams,
    ScenarioConfig,
    TikhonovOperator,
    build_geometry,
    compute_leadfield,
    estimate_noise,
    generate,
    run,
)

sensors, grid = build_geometry()
L = compute_leadfield(grid, sensors)
tik = TikhonovOperator(L)
scenario = ScenarioConfig(n_datasets=3, T=70, n_sources=3, stagger=5, noise_std_ft=2.5, seed=5)

for i in range(scenario.n_datasets):
    rec = generate(scenario, grid, sensors, L, seed=100 + i)
    model = ModelParams().with_noise(estimate_noise(rec.prestim, pooled=True))
    static = run(FilterConfig.from_variant("static-rm", n_particles=1000, seed=i), rec.measurements, model, L, grid,
                 tikhonov=tik)
    walk = run(FilterConfig.from_variant("rw-designed", n_particles=1000, seed=i), rec.measurements, model, L, grid,
               tikhonov=tik)
    gap = static.cum_log_evidence - walk.cum_log_evidence
    marks = ", ".join(f"t={t}: {gap[t - 1]:+.1f}" for t in (10, 30, 50, 70))
    print(f"dataset {i}: static - random walk log-evidence {marks}")
