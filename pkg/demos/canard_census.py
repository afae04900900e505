"""
Maximal canards of the folded node
==================================

Trace the attracting and repelling slow manifolds to the plane z = 0 and
locate the canards where the two slices cross.  At mu = 0.08 there are five
secondary canards besides the strong one.
"""

import numpy as np

from duckhunt import SystemParams
from duckhunt.canard import SectionSpec, canard_spacing, hunt

params = SystemParams(mu=0.08, eps=0.01)
att, rep, canards = hunt(params, n_seeds=400)

print(" k   twists   distance to weak canard")
for c in canards:
    print(f"{c.k:2d}   {c.twists:6d}   {c.dist_weak:.3e}")

# The distances decay like exp(-c0 (2k+1)^2 mu); fit c0 on the secondary canards.
spacing = canard_spacing(canards, params)
print(f"\nfitted c0 = {spacing.c0:.3f}")

# Further out, on the section y = 1, the canards are separated by O(sqrt(eps)) in z.
far = canard_spacing(canards, params, SectionSpec("y", 1.0, -1))
print("z-separations / sqrt(eps):", np.round(far.sep_over_sqrt_eps, 4))
