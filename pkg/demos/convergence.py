"""Static problem: how fast do the EnKF and EnRF posteriors converge?

The prior of (y, x) is a standard t-distribution, so the true posterior is
known in closed form.  Both analysis maps are scored against it for growing
ensemble sizes.  The CLI equivalent with the full replicate count is

    enrf convergence --nu 2.5 --m-grid 100,200,400,600 --replicates 200

This script uses fewer replicates and runs in well under a minute.
"""

import math

from enrf.harness import convergence_study

for nu in (2.5, 10.0, math.inf):
    res = convergence_study(n=10, d=5, nu=nu, m_grid=(100, 200, 400), replicates=20, seed=1)
    curves = res.curves()
    print(f"nu = {nu}")
    print("     M   enkf mean  enrf mean   enkf cov   enrf cov")
    for k, M in enumerate(res.m_grid):
        print(f"  {M:4d}  " + "  ".join(
            f"{curves[name][k]:9.4f}"
            for name in ("enkf_mean_err", "enrf_mean_err", "enkf_cov_err", "enrf_cov_err")))
