import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from data import DatasetManifest, LabeledImage, Preprocess
from errors import ConfigurationError, DataError, DimensionError, NumericError
from events import EventEmitter
from network import MulterConfig, MulterModel, init_multer, multer_forward, predicted_classes
from tensor import Tape, Tensor, apply_op, backward, zero_grad
from utils import _get_float_env, _get_int_env

METRICS_HEADER = ("epoch", "lr", "train_loss", "train_acc", "eval_acc")


@dataclass
class TrainingConfig:
    base_lr: float = field(default_factory=lambda: _get_float_env("MULTER_LR", 0.01))
    decay_factor: float = 0.1
    decay_every: int = 10
    momentum: float = field(default_factory=lambda: _get_float_env("MULTER_MOMENTUM", 0.9))
    epochs: int = field(default_factory=lambda: _get_int_env("MULTER_EPOCHS", 30))
    batch_size: int = field(default_factory=lambda: _get_int_env("MULTER_BATCH", 32))
    seed: int = field(default_factory=lambda: _get_int_env("MULTER_SEED", 0))
    resize_size: int = 256
    crop_size: int = 224
    flip_prob: float = 0.5
    workers: int = field(default_factory=lambda: _get_int_env("MULTER_WORKERS", 1))

    def __post_init__(self):
        if self.base_lr < 0 or self.momentum < 0 or self.epochs < 0:
            raise ConfigurationError("learning rate, momentum and epochs must be non-negative")
        if not 0 < self.decay_factor <= 1:
            raise ConfigurationError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.decay_every < 1:
            raise ConfigurationError("decay_every must be positive")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2 for batch normalization")
        if self.workers < 1:
            raise ConfigurationError("workers must be positive")

    def preprocess(self) -> Preprocess:
        return Preprocess(self.resize_size, self.crop_size, self.flip_prob)


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "OptimizerState":
        return cls({name: np.zeros_like(p.data) for name, p in params.items()})


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    eval_acc: float


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for parameter init, shuffling and augmentation."""
    init, shuffle, augment = np.random.SeedSequence(seed).spawn(3)
    return {
        "init": np.random.default_rng(init),
        "shuffle": np.random.default_rng(shuffle),
        "augment": np.random.default_rng(augment),
    }


def init_model(config: MulterConfig, class_names: Sequence[str], seed: int) -> MulterModel:
    params = init_multer(config, seed_streams(seed)["init"])
    return MulterModel(params=params, class_names=list(class_names))


def cross_entropy_loss(logits: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} do not match labels {labels.shape}")
    batch, classes = logits.shape
    if np.any(labels < 0) or np.any(labels >= classes):
        raise DataError(f"labels must lie in [0, {classes}), got {labels.tolist()}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("cross_entropy_loss received non-finite logits")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(batch)
    loss = -log_probs[rows, labels].mean()

    def rule(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return apply_op("cross_entropy", (logits,), np.asarray(loss), rule)


def lr_at(epoch: int, cfg: TrainingConfig) -> float:
    if epoch < 0:
        raise ConfigurationError(f"epoch must be non-negative, got {epoch}")
    value = cfg.base_lr * cfg.decay_factor ** (epoch // cfg.decay_every)
    # 12 significant digits so 0.01 * 0.1 compares equal to 0.001
    return float(f"{value:.12g}")


def sgd_momentum_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: OptimizerState,
    lr: float,
    momentum: float,
):
    """Classical momentum: ``v <- momentum * v + g; p <- p - lr * v``."""
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise DimensionError(
                f"gradient for '{name}' has shape {grad.shape}, parameter has {param.shape}"
            )
        velocity = state.velocity.get(name)
        if velocity is None:
            velocity = np.zeros_like(param.data)
        elif velocity.shape != param.shape:
            raise DimensionError(
                f"velocity for '{name}' has shape {velocity.shape}, parameter has {param.shape}"
            )
        velocity = momentum * velocity + grad
        state.velocity[name] = velocity
        param.data = param.data - lr * velocity


def train_step(
    model: MulterModel,
    images: np.ndarray,
    labels: np.ndarray,
    state: OptimizerState,
    lr: float,
    momentum: float,
) -> tuple[float, int]:
    """One forward/backward/update on a batch; returns (loss, correct predictions)."""
    params = model.params.parameters()
    with Tape() as tape:
        logits = multer_forward(images, model.params, "train")
        loss = cross_entropy_loss(logits, labels)
    zero_grad(params.values())
    backward(loss, tape)
    sgd_momentum_step(params, {name: p.grad for name, p in params.items()}, state, lr, momentum)
    correct = int((predicted_classes(logits.data) == labels).sum())
    return loss.item(), correct


def iter_batches(order: Sequence[int], batch_size: int) -> Iterator[list[int]]:
    batches = [list(order[i : i + batch_size]) for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        # batch norm cannot train on a single sample
        logging.warning("Merging trailing single-sample batch into the previous batch")
        batches[-2].extend(batches.pop())
    yield from batches


def _stack_views(
    samples: list[LabeledImage],
    rngs: list[np.random.Generator],
    preprocess: Preprocess,
    executor: ThreadPoolExecutor | None,
) -> np.ndarray:
    if executor is None:
        views = [preprocess.train_view(s, r) for s, r in zip(samples, rngs)]
    else:
        views = list(executor.map(preprocess.train_view, samples, rngs))
    return np.stack(views)


def evaluate(
    model: MulterModel,
    samples: Sequence[LabeledImage],
    preprocess: Preprocess,
    batch_size: int = 32,
) -> float:
    if not samples:
        raise DataError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        images = np.stack([preprocess.eval_view(s) for s in batch])
        labels = np.array([s.label for s in batch])
        logits = multer_forward(images, model.params, "eval")
        correct += int((predicted_classes(logits.data) == labels).sum())
    return correct / len(samples)


def train(
    model: MulterModel,
    dataset: DatasetManifest,
    cfg: TrainingConfig,
    events: EventEmitter | None = None,
) -> tuple[MulterModel, list[EpochMetrics]]:
    if not dataset.train:
        raise DataError("cannot train on an empty dataset")
    if dataset.num_classes != model.config.num_classes:
        raise DataError(
            f"dataset has {dataset.num_classes} classes, model expects {model.config.num_classes}"
        )
    if len(dataset.train) < 2:
        raise ConfigurationError("training needs at least 2 samples for batch normalization")

    streams = seed_streams(cfg.seed)
    shuffle_rng, augment_rng = streams["shuffle"], streams["augment"]
    preprocess = cfg.preprocess()
    state = OptimizerState.zeros_like(model.params.parameters())
    executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    history: list[EpochMetrics] = []

    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            order = shuffle_rng.permutation(len(dataset.train))
            total_loss, total_correct = 0.0, 0

            for step, batch in enumerate(iter_batches(order, cfg.batch_size)):
                samples = [dataset.train[i] for i in batch]
                seeds = augment_rng.integers(0, 2**63 - 1, size=len(samples))
                rngs = [np.random.default_rng(int(s)) for s in seeds]
                images = _stack_views(samples, rngs, preprocess, executor)
                labels = np.array([s.label for s in samples])

                loss, correct = train_step(model, images, labels, state, lr, cfg.momentum)
                if not math.isfinite(loss):
                    raise NumericError(f"training diverged at epoch {epoch}, step {step}")
                total_loss += loss * len(samples)
                total_correct += correct
                if events:
                    events.emit("step_end", epoch=epoch, step=step, loss=loss)

            eval_acc = (
                evaluate(model, dataset.test, preprocess, cfg.batch_size)
                if dataset.test
                else float("nan")
            )
            metrics = EpochMetrics(
                epoch=epoch,
                lr=lr,
                train_loss=total_loss / len(dataset.train),
                train_acc=total_correct / len(dataset.train),
                eval_acc=eval_acc,
            )
            history.append(metrics)
            if events:
                events.emit("epoch_end", metrics=metrics)
    finally:
        if executor is not None:
            executor.shutdown()

    return model, history


def write_metrics_csv(history: Sequence[EpochMetrics], path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for m in history:
            writer.writerow(
                [
                    m.epoch,
                    f"{m.lr:.12g}",
                    f"{m.train_loss:.6f}",
                    f"{m.train_acc:.6f}",
                    f"{m.eval_acc:.6f}",
                ]
            )
