"""Pointy: a lightweight hierarchical transformer for point clouds, in numpy."""

__version__ = "0.1.0"

from .backbone import ModelConfig, ModelParams, count_flops, count_params, forward, init_params, preset
from .data import Dataset, gen_synthetic, load_manifest, split
from .geometry import PatchSet, PointCloud, fps, knn_group, normalize_unit_range, rotate_z, sample_uniform
from .train import TrainConfig, evaluate, train
from .zeroshot import build_prototypes, cosine_topk, extract_features, zeroshot_eval
