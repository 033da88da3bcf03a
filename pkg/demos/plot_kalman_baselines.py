"""
Kalman baselines on the switching-noise scenario
================================================

Two classical filters run on the same test set: one is told the true
measurement-noise variance at every step, the other assumes a constant unit
variance. The script prints their mean squared errors around the noise switch
and saves a gain plot.
"""

import numpy as np
import matplotlib.pyplot as plt

from rknet.evaluate import eqm, eqm_normalized, gain_trace, to_db
from rknet.kalman import MeasurementNoiseModel, run_kf, steady_state_gain
from rknet.ssm import generate_dataset, make_cv_model, default_initial_law

# %%
# The constant-velocity model and 1000 test episodes whose noise jumps from
# 0.35 to 1.75 at index 75.
model = make_cv_model()
init = default_initial_law()
test = generate_dataset(model, [("S1", 1000)], init, 150, 42, "test")
x, z, sigma = test.stacked()

# %%
# Filter every episode with both noise models.
oracle = run_kf(model, MeasurementNoiseModel("oracle"), init, test)
fixed = run_kf(model, MeasurementNoiseModel("fixed", 1.0), init, test)

for run in (oracle, fixed):
    db = to_db(eqm(run, x))
    en = eqm_normalized(run, x)
    print(f"{run.estimator_id:12s} EQM(70) {db[70]:7.2f} dB  EQM(80) {db[80]:7.2f} dB  "
          f"EQM_n(70) {en[70]:5.2f}  EQM_n(80) {en[80]:5.2f}")

# %%
# Stationary gains for the two noise levels give the targets the oracle filter
# should approach on each side of the switch.
k_lo = steady_state_gain(model.F, model.H, model.Q, np.array([[0.35**2]]))[0, 0]
k_hi = steady_state_gain(model.F, model.H, model.Q, np.array([[1.75**2]]))[0, 0]
print(f"steady-state position gain: {k_lo:.4f} (sigma 0.35), {k_hi:.4f} (sigma 1.75)")

t = np.arange(150)
plt.plot(t, gain_trace(oracle)[:, 0, 0], label="oracle R")
plt.plot(t, gain_trace(fixed)[:, 0, 0], label="R = 1")
plt.axhline(k_lo, ls=":", c="gray")
plt.axhline(k_hi, ls=":", c="gray")
plt.xlabel("t")
plt.ylabel("mean position gain")
plt.legend()
plt.savefig("kalman_gains.svg")
