"""
Training a small model end to end
=================================

Fits a reduced network on synthetic pairs for a handful of epochs and then
inspects both heads on one validation image. Takes about a minute on one core.
"""

import numpy as np

from mmshr.data_io import SynthDataset
from mmshr.network import ModelConfig, build_model, count_params
from mmshr.tensor import Tensor, no_grad
from mmshr.training import ScheduleConfig, fit, metric_psnr

cfg = ModelConfig.desk()
store, model = build_model(cfg, seed=0)
print("parameters", count_params(store))

train_x, train_y = SynthDataset(128, 32, 32, seed=0).materialize()
val_x, val_y = SynthDataset(8, 32, 32, seed=99, empty_every=0).materialize()

sched = ScheduleConfig(lr_max=1e-3, lr_min=1e-5, total_epochs=12, batch=8)
history, report, _ = fit(model, train_x, train_y, val_x, val_y, sched, seed=0,
                         on_epoch=lambda r: print(f"epoch {r.epoch}  lr {r.lr:.2e}  loss {r.loss_total:.4f}  "
                                                  f"val PSNR {r.val_psnr:.2f}"))
print(f"input baseline {report.input_psnr:.2f} dB -> model {report.psnr:.2f} dB")
print(f"mean |Out1 + Out2 - input| {report.decomposition_error:.4f}")

# Look at one image: Out1 should be close to the diffuse image and Out2 should
# carry the highlight.
model.eval()
with no_grad():
    out1, out2 = model(Tensor(val_x[:1]))
true_residual = val_x[0] - val_y[0]
print("Out1 PSNR vs gt", round(metric_psnr(out1.data[0], val_y[0]), 2))
print("residual correlation", np.corrcoef(out2.data[0].ravel(), true_residual.ravel())[0, 1])
