"""
Inside one step of the learned filter
=====================================

An untrained Recursive KalmanNet is run one step at a time to show what each
piece produces: squared input features, a gain, a Cholesky factor, and a
covariance that stays positive definite by construction.
"""

import numpy as np

from rknet.rkn import (RknModel, build_features, chol_head_to_factor, rkn_filter,
                       rkn_init_hidden, rkn_step)
from rknet.ssm import make_cv_model, make_schedule, default_initial_law, simulate_episode

model_ss = make_cv_model()
init = default_initial_law()
net = RknModel(model_ss.F, model_ss.H, seed=0)
print("feature width:", net.feat_dim, " parameters:", net.params.size)

# %%
# Features are the innovation, previous correction, measurement matrix and
# measurement difference, squared so that their signs do not matter.
print(build_features(np.array([2.0]), np.array([1.0, -3.0]), model_ss.H, np.array([0.5])))

# %%
# The Cholesky head softplus-maps its diagonal, so the noise term is never
# singular even when the raw outputs are very negative.
print(chol_head_to_factor(np.array([-30.0, 0.5, 0.0])).C)

# %%
# One step on a single measurement.
ep = simulate_episode(model_ss, make_schedule("S1", 150), init, 150, seed=1)
hidden = rkn_init_hidden(net, init, batch=1)
rec, hidden = rkn_step(net, hidden, ep.z[:1])
print("gain", rec.K[0].ravel(), "\ncovariance\n", rec.state.P[0])

# %%
# A whole episode: the filter only ever sees the measurements.
run = rkn_filter(net, init, ep)
eig = np.linalg.eigvalsh(run.P_post[0])
print(f"smallest covariance eigenvalue over 150 steps: {eig.min():.3e}")
