"""
Background load: explicit apps versus the generator
===================================================

Three foreground apps query a Location Service every 500 ms while 100
background apps load it. We run the scenario once with real background
MEC apps and once with the analytic generator, then compare the
foreground response times.
"""

import numpy as np
from scipy import stats

from mecsim.experiments import background_variant
from mecsim.scenario import bundled, load_scenario, run

base = load_scenario(bundled("bg_validation"))

###############################################################################
# One run per mode, same seed. The generator mode stores only foreground
# jobs in the queue; the explicit mode instantiates 100 PoissonRequester apps.

samples = {}
for mode in ("explicit", "generator"):
    result = run(background_variant(base, 100, mode, seed=7))
    samples[mode] = result.world.stats.values("fg_response_time")
    print(f"{mode:9s} {len(samples[mode])} foreground requests, "
          f"wall {result.manifest['wall_time']:.3f} s, events {result.manifest['events']}")

###############################################################################
# The two response-time distributions should overlap.

for q in (0.5, 0.9, 0.99):
    row = "  ".join(f"{mode} {1e3 * np.quantile(v, q):6.2f} ms" for mode, v in samples.items())
    print(f"p{int(q * 100):<3d} {row}")
ks = stats.ks_2samp(samples["explicit"], samples["generator"])
print(f"KS distance {ks.statistic:.4f} (p = {ks.pvalue:.2f})")
