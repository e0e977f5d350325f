"""Accuracy against input resolution.

Trains the same small model on clouds sampled at several sizes and prints
the best test accuracy for each. FPS and kNN costs grow linearly with the
point count while the transformer cost stays fixed, as the FLOP column shows.
"""

import sys

from pointy.backbone import ModelConfig, count_flops
from pointy.data import gen_synthetic, split
from pointy.train import TrainConfig, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 3
sizes = (128, 256, 512)

print("points   best OA   MFLOPs (fps+knn / total)")
for n in sizes:
    data = split(gen_synthetic(per_class=60, n_points=n, seed=0), 0.85, seed=0)
    config = ModelConfig(D=48, H=16, P=32, k=16, n_points=n, num_classes=4)
    result = train(config, *data, TrainConfig(epochs=epochs, seed=0, lr=3e-4))
    flops = count_flops(config)
    geo = flops.items["fps"] + flops.items["knn"]
    print(f"{n:6d}   {result.best_oa:6.1f}%   {geo / 1e6:6.2f} / {flops.total / 1e6:6.1f}")
