"""
A short training run
====================

Trains the learned filter for a handful of epochs on a reduced version of the
switching-noise scenario and compares it with both Kalman baselines. A full
run uses 1000 training episodes and a few dozen epochs; this one takes about
a minute.
"""

import logging

from rknet.evaluate import compare, metrics_report
from rknet.kalman import MeasurementNoiseModel, run_kf
from rknet.rkn import rkn_filter
from rknet.ssm import generate_dataset, make_cv_model, default_initial_law
from rknet.train import TrainConfig, train_rkn

logging.basicConfig(level=logging.INFO, format="%(message)s")

model, init = make_cv_model(), default_initial_law()
train = generate_dataset(model, [("S1", 200)], init, 150, 7, "train")
val = generate_dataset(model, [("S1", 40)], init, 150, 7, "val")
test = generate_dataset(model, [("S1", 300)], init, 150, 42, "test")

config = TrainConfig(batch_size=32, max_epochs=8, patience=4, seed=0)
net, history = train_rkn(config, 0, train, val)
print(f"best epoch {history.best_epoch}, validation NLL {min(history.val_loss):.3f}")

# %%
# Same test set, same probe times, three estimators.
reports = [
    metrics_report(run_kf(model, MeasurementNoiseModel("oracle"), init, test), test),
    metrics_report(run_kf(model, MeasurementNoiseModel("fixed", 1.0), init, test), test),
    metrics_report(rkn_filter(net, init, test, estimator_id="rkn (8 epochs)"), test),
]
print(compare(reports, (70, 80)).render())
