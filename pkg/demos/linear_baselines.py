"""
Sparse linear baselines: lasso and the shared-support l2,1 penalty
==================================================================

Lasso fits the label alone. The l2,1 penalty fits the label and the
explanation attributes together and zeroes whole feature rows, so every
output uses the same features. Past ``l21_alpha_max`` all rows are zero.

Run from the repository root:  python3 demos/linear_baselines.py
"""

import json
import os

import numpy as np

from ted.experiments import ExperimentConfig, report, run_experiment
from ted.models import fit_lasso, fit_multitask_l21, l21_alpha_max

HERE = os.path.dirname(os.path.abspath(__file__))

# %% A constructed problem with three informative features out of twelve
rng = np.random.default_rng(0)
X = rng.normal(size=(300, 12))
W = np.zeros((12, 3))
W[[2, 5, 9]] = rng.normal(size=(3, 3))
Y = X @ W + 0.1 * rng.normal(size=(300, 3))

amax = l21_alpha_max(X, Y)
print(f"alpha_max = {amax:.3f}")
print("alpha/alpha_max  active rows (l2,1)      active coefs (lasso on column 0)")
for frac in (1.01, 0.5, 0.2, 0.05, 0.01, 0.001):
    a = frac * amax
    l21 = fit_multitask_l21(X, Y, a)
    lasso = fit_lasso(X, Y[:, 0], a)
    print(f"{frac:>15}  {str(l21.active_rows().tolist()):<22}  {lasso.active_rows().tolist()}")

# %% The same solvers through the experiment runner on the synthetic CSV
with open(os.path.join(HERE, "configs", "synth_l21.json"), encoding="utf-8") as fh:
    d = json.load(fh)
d["source"]["path"] = os.path.join(HERE, "configs", d["source"]["path"])
record = run_experiment(ExperimentConfig.from_dict(d))
print()
print(report(record))
