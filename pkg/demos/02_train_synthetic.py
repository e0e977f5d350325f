"""Train the reduced model on the four-shape benchmark.

The nearest-centroid score on covariance eigenvalues is printed first. It is
a cheap baseline that the network should beat. Pass an epoch count to train
longer; the acceptance test uses 30.
"""

import sys
import time

from pointy.backbone import ModelConfig, count_params
from pointy.data import gen_synthetic, nearest_centroid_oa, split
from pointy.train import TrainConfig, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
seed = 0

train_set, test_set = split(gen_synthetic(per_class=200, n_points=512, seed=seed), 0.85, seed=seed)
print(f"{len(train_set)} train / {len(test_set)} test clouds, classes {train_set.class_names}")
print(f"nearest-centroid baseline: {nearest_centroid_oa(train_set, test_set):.1f}%")

config = ModelConfig(D=96, H=32, P=32, k=16, n_points=512, num_classes=4)
print(f"model: {count_params(config).total:,} parameters, tokens {config.token_counts()}")

start = time.perf_counter()
result = train(config, train_set, test_set, TrainConfig(epochs=epochs, seed=seed),
               on_epoch=lambda m: print(f"  epoch {m.epoch:2d}  loss {m.train_loss:.3f}  OA {m.test_oa:5.1f}%"))
print(f"best {result.best_oa:.1f}% at epoch {result.best_epoch}, {time.perf_counter() - start:.0f}s")
