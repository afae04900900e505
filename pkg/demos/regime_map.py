"""
How many small oscillations survive the noise
=============================================

The k-th canard's rotations are visible while sigma stays below
sigma_k = mu^(1/4) exp(-c0 (2k+1)^2 mu).  Counting visible canards over a
(mu, sigma) grid gives a staircase of nested regions.
"""

import numpy as np

from duckhunt.analysis import regime_map

mu = np.geomspace(0.01, 0.5, 8)
sigma = np.geomspace(1e-4, 1e-1, 7)
rm = regime_map(mu, sigma, c0=1.0)

print("mu \\ sigma " + " ".join(f"{s:8.0e}" for s in sigma))
for m, row in zip(mu, rm.counts):
    print(f"{m:10.4f} " + " ".join(f"{c:8d}" for c in row))
