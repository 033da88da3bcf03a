"""
Checking backpropagation through time
=====================================

The training loss depends on the whole sequence, including the recursion on
the covariance. Central finite differences on random coordinates confirm the
hand-written reverse pass.
"""

from rknet.nn import grad_check
from rknet.rkn import RknModel
from rknet.ssm import generate_dataset, make_cv_model, default_initial_law
from rknet.train import loss_and_grad

model, init = make_cv_model(), default_initial_law()
data = generate_dataset(model, [("S1", 2)], init, 20, 4, "train")
x, z, _ = data.stacked()
net = RknModel(model.F, model.H, seed=0)


def loss_fn(theta):
    net.params.set_flat(theta)
    return loss_and_grad(net, init, x, z, l2_lambda=1e-4)


report = grad_check(loss_fn, net.params.flat(), n_probes=64, step=1e-6, tol=1e-3)
print(report)
worst = report.rel_errors.argmax()
print(f"worst coordinate {report.coords[worst]}: analytic {report.analytic[worst]:.6e}, "
      f"numeric {report.numeric[worst]:.6e}")
