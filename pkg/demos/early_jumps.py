"""
Early jumps past the fold
=========================

Beyond z = sqrt(mu) the weak canard is repelling and noisy paths leave its
neighbourhood at z of order sqrt(mu |log sigma|), long before the
deterministic canard would.
"""

import numpy as np

from duckhunt import SystemParams
from duckhunt.analysis import exit_scaling_fit
from duckhunt.covariance import EscapeSetSpec
from duckhunt.sde import first_exit_escape_set

mu = 0.05
spec = EscapeSetSpec(eta=0.5, mu=mu)
for sigma in (1e-4, 1e-3, 1e-2):
    params = SystemParams(mu=mu, sigma=sigma, sigma_prime=sigma)
    exits = first_exit_escape_set(params, spec, n_paths=1000, master_seed=7, z_max=3.0)
    scale = np.sqrt(mu * abs(np.log(sigma)))
    fit = exit_scaling_fit(exits, mu, sigma)
    print(f"sigma = {sigma:.0e}: median exit z = {np.median(exits.exit_z()):.3f} "
          f"= {np.median(exits.exit_z()) / scale:.2f} x sqrt(mu|log sigma|), "
          f"tail rate {fit.kappa:.2f} (R2 {fit.r2:.3f})")
