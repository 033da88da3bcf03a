"""
Is the filter's covariance honest?
==================================

If the filter's covariance matches its real errors, the normalized squared
error of a 2-dimensional state averages to 2 across episodes. With N episodes
the central limit theorem puts that average within a narrow band.
"""

import numpy as np
import matplotlib.pyplot as plt

from rknet.evaluate import chi2_band, eqm_normalized
from rknet.kalman import MeasurementNoiseModel, run_kf
from rknet.ssm import generate_dataset, make_cv_model, default_initial_law

model, init = make_cv_model(), default_initial_law()
test = generate_dataset(model, [("S1", 1000)], init, 150, 42, "test")
x, _, _ = test.stacked()

mean, var, lo, hi = chi2_band(m=2, N=len(test))
print(f"band: mean {mean}, variance {var:.4f}, 4-sigma interval [{lo:.3f}, {hi:.3f}]")

# %%
# The oracle filter stays inside the band. The fixed-variance filter assumes
# more noise than there is before the switch (values below 2) and much less
# than there is after it (values far above 2).
for nm in (MeasurementNoiseModel("oracle"), MeasurementNoiseModel("fixed", 1.0)):
    en = eqm_normalized(run_kf(model, nm, init, test), x)
    inside = np.mean((en >= lo) & (en <= hi))
    print(f"{nm.estimator_id:12s} inside band for {100 * inside:5.1f}% of steps")
    plt.plot(en, label=nm.estimator_id)

plt.axhspan(lo, hi, color="gray", alpha=0.3)
plt.yscale("log")
plt.xlabel("t")
plt.ylabel("EQM_n")
plt.legend()
plt.savefig("consistency_band.svg")
