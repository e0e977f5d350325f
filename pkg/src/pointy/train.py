"""Supervised training under a single fixed regime.

AdamW at a constant learning rate, batches of 16, cross-entropy, random
z-rotation of training clouds only, evaluation after every epoch. The
reported model is the epoch with the best test accuracy (ties go to the
earlier epoch); this is selection on the test split, which is optimistic
but is how the reference numbers were produced.
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .backbone import ModelConfig, ModelParams, forward_patches, init_params, load_param_arrays
from .checkpoint import Checkpoint
from .data import Dataset, prepare_cloud
from .geometry import PatchSet, patchify
from .numerics import (
    AdamWState,
    NonFiniteError,
    adamw_step,
    backward,
    cross_entropy,
    make_rng,
    zero_grads,
)

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "test_oa", "wall_time_s")


class TrainingDiverged(FloatingPointError):
    """Loss or gradients became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    precision: str = "f32"
    augment: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    deterministic: bool = False  # single thread, no prefetch, wall time written as 0
    prefetch: int = 2  # batches prepared ahead by a loader thread; 0 disables

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    test_oa: float
    wall_time_s: float

    def __post_init__(self):
        if not 0.0 <= self.test_oa <= 100.0:
            raise ValueError(f"test_oa {self.test_oa} outside [0, 100]")


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochMetrics]
    best_checkpoint: Checkpoint
    last_checkpoint: Checkpoint
    best_epoch: int = 0

    @property
    def best_oa(self) -> float:
        return max((m.test_oa for m in self.history), default=float("nan"))


# evaluation ----------------------------------------------------------------

def overall_accuracy(logits: np.ndarray, labels) -> float:
    """Percent of rows whose first maximal logit is the label."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot score an empty split")
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == labels))


def preprocess_eval(dataset: Dataset, config: ModelConfig, seed: int = 0) -> list[PatchSet]:
    """Unaugmented patches for every cloud; resampling (if any) is seeded per sample."""
    out = []
    for i, cloud in enumerate(dataset.clouds):
        cloud = prepare_cloud(cloud, config.n_points, make_rng(seed, 40, i))
        out.append(patchify(cloud, config.P, config.k, fps_start=config.fps_start,
                            rng=make_rng(seed, 41, i)))
    return out


def predict(params: ModelParams, config: ModelConfig, patches: list[PatchSet],
            batch_size: int = 64, key: str = "logits") -> np.ndarray:
    rows = []
    for start in range(0, len(patches), batch_size):
        out = forward_patches(patches[start:start + batch_size], params, config)
        rows.append(out[key].data)
    if not rows:
        return np.zeros((0, config.num_classes if key == "logits" else config.D))
    return np.concatenate(rows)


def evaluate(params: ModelParams, config: ModelConfig, split: Dataset | list[PatchSet],
             labels=None, seed: int = 0) -> float:
    """Overall accuracy (%) without augmentation or voting."""
    if isinstance(split, Dataset):
        labels = split.labels
        split = preprocess_eval(split, config, seed)
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    return overall_accuracy(predict(params, config, split), labels)


# training ------------------------------------------------------------------

def _epoch_batches(dataset: Dataset, config: ModelConfig, tcfg: TrainConfig, epoch: int):
    """Yield (patches, labels) batches for one epoch, deterministic in (seed, epoch)."""
    rng = make_rng(tcfg.seed, 1, epoch)
    order = rng.permutation(len(dataset))
    for start in range(0, len(order), tcfg.batch_size):
        idx = order[start:start + tcfg.batch_size]
        patches = []
        for i in idx:
            angle = rng.uniform(0.0, 2.0 * np.pi) if tcfg.augment else None
            cloud = prepare_cloud(dataset.clouds[i], config.n_points, rng, angle)
            patches.append(patchify(cloud, config.P, config.k, fps_start=config.fps_start, rng=rng))
        yield patches, dataset.labels[idx]


def _prefetched(gen, depth: int):
    """Run ``gen`` on a loader thread with a bounded queue of ``depth`` items."""
    if depth <= 0:
        yield from gen
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def produce():
        try:
            for item in gen:
                if stop.is_set():
                    return
                q.put(item)
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)
            return
        q.put(done)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while worker.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                worker.join(timeout=0.01)


def _param_stats(params: ModelParams) -> str:
    parts = []
    for name, t in params.parameters().items():
        bad = int((~np.isfinite(t.data)).sum())
        parts.append(f"{name}: max|w|={np.nanmax(np.abs(t.data)):.3g}" + (f" non-finite={bad}" if bad else ""))
    return "; ".join(parts[:8]) + ("; ..." if len(parts) > 8 else "")


def _snapshot(params: ModelParams, opt: AdamWState, epoch: int, rng_state, history, run_config) -> Checkpoint:
    named = params.parameters()
    moments = {}
    for name in named:
        if name in opt.m:
            moments[f"m/{name}"] = opt.m[name].copy()
            moments[f"v/{name}"] = opt.v[name].copy()
    return Checkpoint(
        config=run_config,
        params={n: t.data.copy() for n, t in named.items()},
        optimizer={"step": opt.step, **opt.hyperparameters()},
        moments=moments,
        epoch=epoch,
        rng_state=rng_state,
        history=[asdict(m) for m in history],
    )


def restore(ckpt: Checkpoint) -> tuple[ModelConfig, TrainConfig, ModelParams, AdamWState]:
    """Rebuild config, parameters and optimizer state from a checkpoint."""
    config = ModelConfig.from_dict(ckpt.config["model"])
    tcfg = TrainConfig.from_dict(ckpt.config["train"])
    params = init_params(config, tcfg.seed, tcfg.precision)
    load_param_arrays(params, ckpt.params)
    hyper = {k: v for k, v in ckpt.optimizer.items() if k != "step"}
    opt = AdamWState(**hyper, step=int(ckpt.optimizer.get("step", 0)))
    for key, arr in ckpt.moments.items():
        kind, name = key.split("/", 1)
        (opt.m if kind == "m" else opt.v)[name] = np.array(arr, dtype=params.dtype)
    return config, tcfg, params, opt


def _rng_state(seed: int, epoch: int) -> dict:
    """JSON form of the generator state that the next epoch starts from."""
    state = make_rng(seed, 1, epoch).bit_generator.state
    return {"seed": seed, "next_epoch": epoch, "bit_generator": state["bit_generator"],
            "counter": [int(x) for x in state["state"]["counter"]],
            "key": [int(x) for x in state["state"]["key"]]}


def _thread_limit(tcfg: TrainConfig):
    if not tcfg.deterministic:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(1)


def train(config: ModelConfig, train_set: Dataset, test_set: Dataset, tcfg: TrainConfig,
          params: ModelParams | None = None, resume: Checkpoint | None = None,
          extra_config: dict | None = None, on_epoch=None) -> TrainResult:
    """Train from scratch (or from ``resume``) for ``tcfg.epochs`` epochs in total.

    ``on_epoch(metrics)`` is called after each evaluation.
    """
    if len(train_set) == 0 or len(test_set) == 0:
        raise ValueError("train and test splits must be non-empty")
    if train_set.num_classes != config.num_classes or test_set.num_classes != config.num_classes:
        raise ValueError(f"dataset has {train_set.num_classes} classes, model expects {config.num_classes}")
    run_config = {"model": config.to_dict(), "train": tcfg.to_dict(), **(extra_config or {})}

    history: list[EpochMetrics] = []
    start_epoch = 1
    if resume is not None:
        _, _, params, opt = restore(resume)
        history = [EpochMetrics(**row) for row in resume.history]
        start_epoch = resume.epoch + 1
    else:
        params = params or init_params(config, tcfg.seed, tcfg.precision)
        opt = AdamWState(lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps,
                         weight_decay=tcfg.weight_decay)
    named = params.parameters()
    test_patches = preprocess_eval(test_set, config, tcfg.seed)

    best = max(history, key=lambda m: (m.test_oa, -m.epoch), default=None)
    # When resuming, the best weights seen so far are only known if they were
    # the resume point; otherwise the resume checkpoint stands in until beaten.
    best_ckpt = resume
    rng_state = resume.rng_state if resume is not None else None

    with _thread_limit(tcfg):
        for epoch in range(start_epoch, tcfg.epochs + 1):
            t0 = time.perf_counter()
            drop_rng = make_rng(tcfg.seed, 2, epoch) if config.dropout > 0 else None
            total, count = 0.0, 0
            depth = 0 if tcfg.deterministic else tcfg.prefetch
            for b, (patches, labels) in enumerate(_prefetched(_epoch_batches(train_set, config, tcfg, epoch), depth)):
                try:
                    out = forward_patches(patches, params, config, drop_rng)
                    loss = cross_entropy(out["logits"], labels)
                    zero_grads(named.values())
                    backward(loss)
                    for name, t in named.items():
                        if not np.isfinite(t.grad).all():
                            raise NonFiniteError(f"non-finite gradient for {name}")
                except NonFiniteError as exc:
                    raise TrainingDiverged(f"epoch {epoch} batch {b}: {exc}. {_param_stats(params)}") from exc
                adamw_step(named, opt)
                total += float(loss.data) * len(labels)
                count += len(labels)
            oa = evaluate(params, config, test_patches, test_set.labels)
            wall = 0.0 if tcfg.deterministic else time.perf_counter() - t0
            metrics = EpochMetrics(epoch, total / count, oa, wall)
            history.append(metrics)
            rng_state = _rng_state(tcfg.seed, epoch + 1)
            log.info("epoch %d loss %.4f test OA %.2f%%", epoch, metrics.train_loss, oa)
            if best is None or oa > best.test_oa:
                best = metrics
                best_ckpt = _snapshot(params, opt, epoch, rng_state, history, run_config)
            if on_epoch is not None:
                on_epoch(metrics)

    last_epoch = history[-1].epoch if history else 0
    last_ckpt = _snapshot(params, opt, last_epoch, rng_state, history, run_config)
    if best_ckpt is None:
        best_ckpt = last_ckpt
    else:
        best_ckpt.history = last_ckpt.history
    return TrainResult(params, history, best_ckpt, last_ckpt, best.epoch if best else 0)


# metrics files ---------------------------------------------------------------

def write_history_csv(history: list[EpochMetrics], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        for m in history:
            writer.writerow([m.epoch, repr(m.train_loss), repr(m.test_oa), repr(m.wall_time_s)])


def read_history_csv(path) -> list[EpochMetrics]:
    path = Path(path)
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != HISTORY_FIELDS:
            raise ValueError(f"{path}:1: expected header {','.join(HISTORY_FIELDS)}")
        for lineno, row in enumerate(reader, 2):
            try:
                epoch, loss, oa, wall = row
                rows.append(EpochMetrics(int(epoch), float(loss), float(oa), float(wall)))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if any(math.isnan(m.train_loss) for m in rows):
        raise ValueError(f"{path}: NaN loss in history")
    return rows
