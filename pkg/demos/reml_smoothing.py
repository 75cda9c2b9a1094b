"""
Choosing smoothing parameters by REML
=====================================

A single smooth of t fitted to noisy curves. The restricted likelihood is
profiled over a log-lambda grid and compared with the optimizer's choice.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from famm import build_dataset, fit_model, parse_model_spec, reml_criterion
from famm.inference import fitted_with_ci

rng = np.random.default_rng(3)
t = np.linspace(0, 1, 40)
truth = np.sin(2 * np.pi * t) + 0.5 * t
Y = truth + rng.normal(0, 0.4, (5, t.size))
records = [(i + 1, tt, yy) for i in range(5) for tt, yy in zip(t, Y[i])]
ds = build_dataset(records)

spec = parse_model_spec({"terms": [{"kind": "intercept_t", "k_t": 20}]})
model = fit_model(ds, spec)
print("log lambda:", model.log_lambda, "edf:", model.edf, "sigma2:", model.sigma2_eps)
print("converged:", model.converged, "local minimum:", model.local_minimum)

# Profile the criterion on a grid
grid = np.linspace(-6, 14, 201)
profile = [reml_criterion(model.system, [g]) for g in grid]
print("grid argmin %.2f vs optimizer %.2f" % (grid[np.argmin(profile)], model.log_lambda[0]))

fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
ax1.plot(grid, profile, "k")
ax1.axvline(model.log_lambda[0], color="r", ls="--")
ax1.set_xlabel("log lambda")
ax1.set_ylabel("REML criterion")

ci = fitted_with_ci(model)
first = slice(0, t.size)
ax2.plot(t, Y.T, ".", color="0.7", ms=3)
ax2.fill_between(t, ci.ci_lower[first], ci.ci_upper[first], color="C0", alpha=0.3)
ax2.plot(t, ci.values[first], "C0")
ax2.plot(t, truth, "k--")
ax2.set_xlabel("t")
fig.tight_layout()
fig.savefig("reml_smoothing.png", dpi=100)
