"""
Noise changes the mixed-mode pattern
====================================

In the two-jump return model the deterministic orbit makes two large
oscillations between passages through the folded node.  With noise the
paths jump early and the pattern collapses to one large oscillation.
"""

import numpy as np

from duckhunt import TWO_LAO_PARAMS
from duckhunt.analysis import classify_mmo
from duckhunt.model import drift_global_return
from duckhunt.odeint import IntegratorConfig, integrate
from duckhunt.sde import Divergence, SdeConfig, default_step, global_return_model, simulate_batch

gp = TWO_LAO_PARAMS
cfg = IntegratorConfig(abs_tol=1e-9, rel_tol=1e-9, max_step=gp.system.eps / 2)
orbit = integrate(lambda s, u: drift_global_return(u, gp), np.zeros(3), (0.0, 100.0), cfg)
det = orbit(np.arange(0.0, 100.0, 0.002))
print("deterministic:", classify_mmo(det, gp, sigma=0.0).symbol())

res = simulate_batch(global_return_model(gp), np.zeros(3),
                     SdeConfig(default_step(gp.system), n_paths=4, master_seed=1),
                     [Divergence(5.0)], s_max=100.0, record_every=10)
for j in range(4):
    keep = res.record_s <= res.stop_s[j]
    print(f"path {j}:", classify_mmo(res.record[keep, :, j], gp).symbol())
