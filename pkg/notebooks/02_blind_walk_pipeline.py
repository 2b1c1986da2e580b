"""
Dataset inference with label-only access
========================================

A reduced version of the default scenario: train a victim, build a few
stolen and one independent suspect, and test each with Blind Walk
embeddings and the victim's confidence regressor. The full-size run is
``python -m dsinfer sweep-m``.
"""

import logging

import numpy as np

from dsinfer.data import TaskConfig
from dsinfer.experiments import ScenarioConfig, build_scenario, regressor_embeddings, sweep_m
from dsinfer.inference import score

logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

config = ScenarioConfig(task=TaskConfig(num_classes=10, signal_dim=10, noise_dim=400, class_sep=1.5),
                        n_surrogate=5000, epoch_scale=0.5)
sc = build_scenario(config)

# %%
# Private points sit closer to the victim's decision boundaries, so the
# regressor scores them lower than public points.
embs = regressor_embeddings(sc)
s = score(sc.regressor, embs)
member = np.array([e.membership for e in embs])
print(f"regressor training pools: mean score private {s[member < 0].mean():.3f}, "
      f"public {s[member > 0].mean():.3f}")

# %%
for threat in ("source", "label_query", "independent"):
    v = sc.infer(threat, m=30, repetitions=50, bootstrap=10)
    print(f"{threat:12s} p={v.aggregated_p:.2e}  effect={v.effect_size:.3f}  -> {v.decision}  "
          f"({v.queries_used} queries)")

# %%
# p-value against the number of revealed points.
for row in sweep_m(sc, "source", (5, 10, 20, 30), repetitions=50, bootstrap=10):
    print(f"m={row['m']:3d}  p={row['aggregated_p']:.2e}  99% CI [{row['ci_low']:.1e}, {row['ci_high']:.1e}]")
