"""Zero-shot transfer to shapes the model never saw.

The network is trained on sphere, cube, cylinder and plane. Its head is then
dropped and cone, torus and helix are classified by cosine similarity to
class-mean features. An untrained network is scored the same way for
comparison. On these shapes it also does very well, because the held-out
classes differ so much in gross geometry that random features separate them.
"""

import sys

from pointy.backbone import ModelConfig, init_params
from pointy.data import TRANSFER_CLASSES, gen_synthetic, nearest_centroid_oa, split
from pointy.train import TrainConfig, train
from pointy.zeroshot import zeroshot_eval

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
config = ModelConfig(D=96, H=32, P=32, k=16, n_points=512, num_classes=4)

source = split(gen_synthetic(per_class=200, n_points=512, seed=0), 0.85, seed=0)
result = train(config, *source, TrainConfig(epochs=epochs, seed=0))
print(f"source accuracy after {epochs} epochs: {result.best_oa:.1f}%")

target = split(gen_synthetic(TRANSFER_CLASSES, per_class=200, n_points=512, seed=100), 0.85, seed=100)
trained = zeroshot_eval(result.best_checkpoint, *target, ks=(1, 2, 3))
untrained = zeroshot_eval((config, init_params(config, seed=0)), *target, ks=(1, 2, 3))
print("target classes:", ", ".join(TRANSFER_CLASSES))
print("trained   ", {f"top{k}": round(v, 1) for k, v in trained.accuracy.items()})
print("untrained ", {f"top{k}": round(v, 1) for k, v in untrained.accuracy.items()})
print(f"covariance nearest-centroid on the target: {nearest_centroid_oa(*target):.1f}%")
