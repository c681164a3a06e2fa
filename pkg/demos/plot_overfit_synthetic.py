"""
Overfitting a synthetic teat-end dataset
========================================

Generate four classes of ring images, train a narrow copy of the network
and watch it memorise the training set. This is a capacity check, not a
measure of field accuracy.

Runs in a few minutes on one CPU core.
"""
import tempfile

import numpy as np

from ctsar import build_ctsar_cnn
from ctsar.data import generate_synthetic_dataset, load_dataset, load_images, stratified_split
from ctsar.training import TrainConfig, evaluate, train

###############################################################################
# Data
# ----
# Class ``c`` shows ``c + 1`` concentric rings in its own tint.

root = generate_synthetic_dataset(8, seed=0, out_dir=tempfile.mkdtemp())
manifest = stratified_split(load_dataset(root), val_fraction=0.15, seed=0)
print("counts per score:", manifest.counts)
x_train, y_train = load_images(manifest.subset("train"), 112)
x_val, y_val = load_images(manifest.subset("val"), 112)
print("train", x_train.shape, "val", x_val.shape)

###############################################################################
# Training
# --------
# A quarter-width network keeps each step near a second.

model = build_ctsar_cnn(seed=0, width_mult=0.25)
print(f"{model.num_parameters():,} parameters")
cfg = TrainConfig(learning_rate=0.001, batch_size=8, epochs=12, seed=0)
result = train(model, x_train, y_train, cfg, x_val, y_val)
for rec in result.history:
    print(f"epoch {rec.epoch:2d}  loss {rec.train_loss:.3f}  acc {rec.train_acc:.2f}  val acc {rec.val_acc:.2f}")

###############################################################################
# Results
# -------
# With no normalisation layers the loss spikes in the first few steps and can
# jump again once the set is memorised at this learning rate.

print(evaluate(model, x_train, y_train).format())
print("first 10 step losses:", np.round(result.step_losses[:10], 3))
