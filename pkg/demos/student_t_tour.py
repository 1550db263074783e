"""A short tour of the t-distribution toolkit.

Run with ``python3 demos/student_t_tour.py``.  Takes a few seconds.
"""

import math

import numpy as np

from enrf.estimation import GridSearch, TlassoConfig, default_rho, tlasso
from enrf.tdist import JointSplit, TDist, condition, moments, quantile1d, sample
from enrf.transport import apply_analysis, build_analysis_map, kalman_apply

rng = np.random.default_rng(0)

# %% Tails
# The 97.5% quantile shrinks towards the Gaussian 1.96 as the dof grows.
print("97.5% quantile of St(0, 1, nu)")
for nu in (3, 5, 10, 30, 100, math.inf):
    print(f"  nu = {nu:>5}: {quantile1d(nu, 0.975):.4f}")

# %% Conditioning
# Unlike the Gaussian case, the posterior scale of a t-distribution depends
# on how surprising the observation is.
joint = JointSplit.from_blocks(
    mu_y=[0.0], mu_x=[0.0, 0.0],
    scale_y=[[1.0]], scale_xy=[[0.8], [0.3]], scale_x=[[1.0, 0.2], [0.2, 1.0]],
    dof=4.0)
print("\nposterior covariance trace as the observation moves away")
for y in (0.0, 1.0, 3.0, 10.0):
    post = condition(joint, [y])
    _, cov = moments(post)
    print(f"  y* = {y:>4}: dof {post.dof:.0f}, trace {np.trace(cov):.3f}")

# %% Fitting
# Sparse t fit of a heavy-tailed sample; the dof is chosen on a grid.
truth = TDist(np.zeros(6), np.eye(6) + 0.4 * np.eye(6, k=1) + 0.4 * np.eye(6, k=-1), 4.0)
Z = sample(truth, 400, rng)
fit = tlasso(Z, TlassoConfig(rho=default_rho(400), dof_mode=GridSearch()))
print(f"\ntlasso on 400 draws of a nu=4 sample: dof {fit.dof}, "
      f"{fit.iterations} EM iterations")
print("  fitted precision (rounded):")
print("  " + np.array2string(np.round(fit.precision, 2), prefix="  "))

# %% Robust analysis
# The t analysis map rescales each particle's residual by sqrt(alpha*/alpha_i),
# so a particle whose predicted observation is an outlier barely feels the
# Kalman gain's pull.
amap = build_analysis_map(joint)
y_star = np.array([0.5])
y_i = np.array([[0.2, -0.4, 25.0]])
x_i = np.array([[0.1, -0.3, 1.0], [0.0, 0.2, -0.5]])
print("\nanalysis of three particles (the last has y_i = 25)")
print("  t map   :", np.round(apply_analysis(amap, y_star, y_i, x_i), 3).tolist())
print("  Kalman  :", np.round(kalman_apply(amap, y_star, y_i, x_i), 3).tolist())
