"""Which covariates drive the covariance?  A look at the score statistics.

Run with:  python3 demos/02_screening.py
"""

import numpy as np

from crossfit_gee import BasisFamily, ModelSpec, penalized_solve, residuals, screen
from crossfit_gee.simulate import ScenarioConfig, generate

cfg = ScenarioConfig(n=500, p=40, l=2, s=3, m=2, covariance="exchangeable-varying",
                     active_set=(4, 12), strength=2.0, seed=5)
data, truth = generate(cfg)

# residuals from a working-independence penalized fit
spec = ModelSpec("identity", m_set=(0, 1))
fit = penalized_solve(data, spec)
r = residuals(data, fit.coef)

res = screen(data, r, BasisFamily.polynomial(3), alpha=0.05)
print(f"critical value {res.critical_value:.2f} (chi-square with 3 df, level 0.05/{data.p})")
for k in range(data.l):
    top = np.argsort(res.w_stats[k])[::-1][:5]
    print(f"measurement {k}: largest W at {top.tolist()} -> {np.round(res.w_stats[k, top], 1).tolist()}")
print("selected:", res.union_set, " planted:", truth.active_set)

# the theory choice alpha_p = p^-c is stricter for large p
strict = screen(data, r, c=1.0)
print(f"with alpha_p = 1/p: critical value {strict.critical_value:.2f}, selected {strict.union_set}")

# a few null statistics should look like chi-square(3) draws
null = np.delete(res.w_stats, list(truth.active_set), axis=1).ravel()
print(f"mean of {null.size} null statistics: {null.mean():.2f} (chi-square(3) mean is 3)")
