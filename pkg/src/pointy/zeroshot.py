"""Zero-shot transfer by cosine similarity to class-mean prototypes.

The classification head of a trained checkpoint is dropped; every cloud is
represented by the mean-pooled token features that would have fed the head.
Class prototypes are plain means of the target training split's features,
and test clouds are ranked against them by cosine similarity.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import ModelConfig, ModelParams
from .checkpoint import Checkpoint
from .data import Dataset
from .train import predict, preprocess_eval, restore


@dataclass
class PrototypeBank:
    prototypes: np.ndarray  # (C, D)
    class_names: list[str]
    counts: np.ndarray  # (C,)

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


def _model_from(source) -> tuple[ModelConfig, ModelParams]:
    if isinstance(source, Checkpoint):
        config, _, params, _ = restore(source)
        return config, params
    config, params = source
    return config, params


def extract_features(source, dataset: Dataset, seed: int = 0, key: str = "pooled") -> tuple[np.ndarray, np.ndarray]:
    """Pooled pre-head features (M, D) and labels, unaugmented.

    ``source`` is a :class:`Checkpoint` or a ``(ModelConfig, ModelParams)`` pair.
    ``key="tokens"`` returns the pre-pool token matrices instead.
    """
    config, params = _model_from(source)
    patches = preprocess_eval(dataset, config, seed)
    feats = predict(params, config, patches, key=key).astype(np.float64)
    return feats, dataset.labels.copy()


def build_prototypes(features: np.ndarray, labels, class_names=None) -> PrototypeBank:
    labels = np.asarray(labels)
    n_classes = len(class_names) if class_names is not None else int(labels.max()) + 1
    names = list(class_names) if class_names is not None else [str(c) for c in range(n_classes)]
    protos = np.zeros((n_classes, features.shape[1]))
    counts = np.zeros(n_classes, dtype=np.int64)
    for c in range(n_classes):
        members = features[labels == c]
        if len(members) == 0:
            raise ValueError(f"class {names[c]!r} has no training samples")
        protos[c] = members.mean(axis=0)
        counts[c] = len(members)
    return PrototypeBank(protos, names, counts)


def cosine_similarities(features: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """(M, C) cosine similarities; a zero-norm vector scores -inf."""
    features = np.atleast_2d(features)
    if features.shape[1] != bank.dim:
        raise ValueError(f"feature dim {features.shape[1]} != prototype dim {bank.dim}")
    fn = np.linalg.norm(features, axis=1)
    pn = np.linalg.norm(bank.prototypes, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sims = (features @ bank.prototypes.T) / (fn[:, None] * pn[None, :])
    degenerate = (fn[:, None] == 0) | (pn[None, :] == 0)
    if degenerate.any():
        warnings.warn("zero-norm feature or prototype; ranked last")
        sims = np.where(degenerate, -np.inf, sims)
    return sims


def rank_classes(sims: np.ndarray) -> np.ndarray:
    """Class indices sorted by descending similarity, ties by class index."""
    sims = np.atleast_2d(sims)
    return np.argsort(-sims, axis=1, kind="stable")


def cosine_topk(feature: np.ndarray, bank: PrototypeBank, ks=(1, 3, 5)) -> dict[int, list[int]]:
    """Top-k class lists for one feature vector, keyed by k."""
    ranking = rank_classes(cosine_similarities(feature, bank))[0]
    return {k: ranking[:k].tolist() for k in ks}


def topk_accuracy(ranking: np.ndarray, labels, ks=(1, 3, 5)) -> dict[int, float]:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty test split")
    hits = ranking == labels[:, None]
    return {k: 100.0 * float(hits[:, :k].any(axis=1).mean()) for k in ks}


@dataclass
class ZeroShotResult:
    accuracy: dict[int, float]
    ranking: np.ndarray
    labels: np.ndarray
    bank: PrototypeBank

    def report(self, checkpoint: str = "", target: str = "") -> dict:
        return {
            "checkpoint": checkpoint,
            "target": target,
            "accuracy": {f"top{k}": v for k, v in self.accuracy.items()},
            "C": len(self.bank.class_names),
            "M": int(len(self.labels)),
        }


def zeroshot_eval(source, train_split: Dataset, test_split: Dataset, ks=(1, 3, 5), seed: int = 0) -> ZeroShotResult:
    """Prototype protocol: means from ``train_split``, Top-k on ``test_split``."""
    if train_split.class_names != test_split.class_names:
        raise ValueError("train and test splits use different label spaces")
    config, params = _model_from(source)
    f_train, y_train = extract_features((config, params), train_split, seed)
    f_test, y_test = extract_features((config, params), test_split, seed)
    bank = build_prototypes(f_train, y_train, train_split.class_names)
    ranking = rank_classes(cosine_similarities(f_test, bank))
    return ZeroShotResult(topk_accuracy(ranking, y_test, ks), ranking, y_test, bank)


def write_report(result: ZeroShotResult, path, checkpoint: str = "", target: str = "") -> dict:
    report = result.report(checkpoint, target)
    Path(path).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return report


def write_rankings_csv(result: ZeroShotResult, path) -> None:
    names = result.bank.class_names
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample", "label", "ranking"])
        for i, (label, row) in enumerate(zip(result.labels, result.ranking)):
            writer.writerow([i, names[label], " ".join(names[c] for c in row)])
