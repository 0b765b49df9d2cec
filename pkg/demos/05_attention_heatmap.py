"""Attention weights of a trained model laid out on the patch grid.

The heatmap sums to one over the image; the normalized map rescales it to
[0, 1] for display and is written as CSV or as a grayscale PGM.
"""

import tempfile
from pathlib import Path

from msrgcn import harness, synthdata
from msrgcn.model import ModelConfig, forward, heatmap

data = synthdata.generate_dataset(synthdata.GenConfig(n_images=60, grid_min=4, grid_max=5, seed=3))
fold = synthdata.group_kfold(data, k=3, seed=0).folds[0]
params, _ = harness.train_fold(data, fold, harness.TrainConfig(max_epochs=5, lr=0.003, k=3), ModelConfig())

image = fold.test[0]
builder = harness.BatchBuilder(data, ModelConfig().variant)
hm = heatmap(forward(builder.batch([image]), None, params, ModelConfig()))
print(f"{image}: label {data.record(image).label}, attention sum {hm.raw.sum():.6f}")
for row in hm.normalized:
    print(" ".join(f"{v:4.2f}" for v in row))

out = Path(tempfile.mkdtemp())
hm.save(out / "attention.csv")
hm.save(out / "attention.pgm")
print("wrote", sorted(p.name for p in out.iterdir()))
