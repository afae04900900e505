"""
Covariance tube around the weak canard
======================================

The linearized covariance of sample paths around the weak canard grows like
1/|z| up to the fold and like 1/sqrt(mu) at it.  Paths started on the canard
stay inside the tube of radius r with probability close to one once r is a
few noise levels.
"""

import numpy as np

from duckhunt import SystemParams
from duckhunt.covariance import TubeSpec, integrate_covariance, tube_norms, weak_x
from duckhunt.sde import first_exit_tube

mu, sigma, z0 = 0.08, 0.008, -1.0
params = SystemParams(mu=mu, sigma=sigma, sigma_prime=sigma)

z = np.linspace(z0, np.sqrt(mu), 2001)
cov = integrate_covariance(weak_x, z0, (1, 1, 0), mu, 1.0, np.sqrt(mu), z)
kplus, _ = tube_norms(cov.v1, cov.v2, cov.v3)
for zz in (-0.8, -0.4, -np.sqrt(mu), 0.0):
    i = np.argmin(np.abs(z - zz))
    print(f"z = {z[i]:+.3f}   v1 = {cov.v1[i]:7.3f}   v2 = {cov.v2[i]:7.3f}   |V| = {kplus[i]:7.3f}")

for ratio in (2.5, 3.5, 6.0):
    tube = TubeSpec(weak_x, lambda zz: np.square(zz) - mu / 2, cov, ratio * sigma)
    exits = first_exit_tube(params, tube, z0, n_paths=500, master_seed=1)
    print(f"r/sigma = {ratio}: {exits.exit_fraction():.3f} of paths leave before z = sqrt(mu)")
