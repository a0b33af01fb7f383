"""
Training Loop

Seeded, single-threaded momentum SGD with cosine learning-rate decay and
cross-entropy loss. Records per-epoch loss/accuracy and the full trajectory of
every pooling exponent (one point per optimizer step, plus the initial value).
Two runs with the same seed are bitwise identical.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ml.errors import InvalidArgument, TrainingDiverged
from ml.pooling import PoolingConfig
from ml.retrieval import DescriptorSet
from ml.tensor_core import Rng
from ml.toy_vit import ToyViTConfig, ToyViTModel
from utils.console import status, success
from utils.idx_dataset import Dataset


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 20
    tune_blocks: int = -1

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidArgument(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise InvalidArgument(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgument(f"epochs and batch_size must be positive, got {self.epochs}, {self.batch_size}")


@dataclass
class TrainingTrace:
    """Per-epoch metrics plus the per-step exponent trajectory"""
    groups: int
    epochs: List[int] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    accuracies: List[float] = field(default_factory=list)
    epoch_exponents: List[np.ndarray] = field(default_factory=list)
    exponent_history: List[np.ndarray] = field(default_factory=list)

    def record_step(self, exponents: np.ndarray) -> None:
        self.exponent_history.append(exponents.copy())

    def record_epoch(self, epoch: int, loss: float, accuracy: float, exponents: np.ndarray) -> None:
        self.epochs.append(epoch)
        self.losses.append(loss)
        self.accuracies.append(accuracy)
        self.epoch_exponents.append(exponents.copy())

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    @property
    def final_accuracy(self) -> float:
        return self.accuracies[-1]

    def trajectory(self) -> np.ndarray:
        """(steps + 1) x G exponent values, initial value first"""
        return np.array(self.exponent_history)

    def to_frame(self) -> pd.DataFrame:
        """Trace table: epoch, loss, acc, p_1..p_G"""
        frame = pd.DataFrame({'epoch': self.epochs, 'loss': self.losses, 'acc': self.accuracies})
        if self.groups and self.epoch_exponents:
            exponents = np.array(self.epoch_exponents)
            for g in range(exponents.shape[1]):
                frame[f'p_{g + 1}'] = exponents[:, g]
        return frame


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def evaluate_accuracy(model: ToyViTModel, dataset: Dataset) -> float:
    predicted, _ = model.predict(dataset.images)
    return float(np.mean(predicted == dataset.labels))


def extract_descriptors(model: ToyViTModel, dataset: Dataset, ids: Optional[Sequence] = None) -> DescriptorSet:
    """Pooled vectors of every image as a DescriptorSet (ids default to 0..M-1)"""
    _, pooled = model.predict(dataset.images)
    ids = np.arange(len(dataset)) if ids is None else np.asarray(ids)
    return DescriptorSet.create(pooled, dataset.labels, ids)


def check_dataset(dataset: Dataset, config: ToyViTConfig) -> None:
    if len(dataset) == 0:
        raise InvalidArgument("dataset is empty")
    expected = (config.image_size, config.image_size, config.channels_in)
    if dataset.images.shape[1:] != expected:
        raise InvalidArgument(f"dataset images have shape {dataset.images.shape[1:]}, config expects {expected}")
    if dataset.labels.min() < 0 or dataset.labels.max() >= config.classes:
        raise InvalidArgument(f"labels must lie in 0..{config.classes - 1}, got max {dataset.labels.max()}")


ENCODER_FIELDS = ('image_size', 'patch_size', 'channels_in', 'embed_dim', 'heads', 'blocks', 'mlp_hidden')


def warm_start(pretrained: ToyViTModel, config: ToyViTConfig, rng: Rng) -> ToyViTModel:
    """
    Model for `config` whose encoder is copied from a pretrained model

    The exponents are kept when the pooling strategy and group count match,
    the classifier when the class count matches too; otherwise both are
    freshly initialised from `rng`.

    Raises:
        InvalidArgument: the encoder shapes differ
    """
    source = pretrained.config
    mismatched = [name for name in ENCODER_FIELDS if getattr(source, name) != getattr(config, name)]
    if mismatched:
        raise InvalidArgument(f"pretrained encoder does not fit the config: {', '.join(mismatched)} differ")

    model = ToyViTModel.initialize(config, rng)
    same_pooling = (source.pooling.strategy, source.pooling.groups) == (config.pooling.strategy, config.pooling.groups)
    same_head = same_pooling and source.classes == config.classes

    for name, value in pretrained.params.items():
        if name == 'pool.p' and not same_pooling:
            continue
        if name.startswith('head.') and not same_head:
            continue
        model.params[name] = value.copy()

    if 'pool.p' in model.params:
        model.config = replace(config, pooling=config.pooling.with_exponents(model.params['pool.p']))
    return model


def train(dataset: Dataset, config: ToyViTConfig, training: TrainingConfig, seed: int,
          verbose: bool = True, init_model: Optional[ToyViTModel] = None) -> Tuple[ToyViTModel, TrainingTrace]:
    """
    Train a toy ViT, freshly initialised or warm-started from `init_model`

    Raises:
        TrainingDiverged: loss or a parameter became non-finite; carries the
            model after the last completed epoch and the partial trace
    """
    check_dataset(dataset, config)

    rng = Rng(seed)
    model = ToyViTModel.initialize(config, rng) if init_model is None else warm_start(init_model, config, rng)
    shuffle_rng = rng.spawn(1)

    trainable = model.trainable_names(training.tune_blocks)
    velocity = {name: np.zeros_like(model.params[name]) for name in trainable}

    n = len(dataset)
    steps_per_epoch = math.ceil(n / training.batch_size)
    total_steps = training.epochs * steps_per_epoch

    trace = TrainingTrace(groups=len(model.exponents))
    trace.record_step(model.exponents)
    last_good = model.copy()
    step = 0

    if verbose:
        status(f"  Training {config.blocks}-block ViT (D={config.embed_dim}, heads={config.heads}, "
               f"pooling={config.pooling.strategy}, G={config.pooling.groups}) on {n} images")

    for epoch in range(1, training.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_total = 0.0

        for start in range(0, n, training.batch_size):
            batch = order[start:start + training.batch_size]
            loss, grads = model.loss_and_grads(dataset.images[batch], dataset.labels[batch])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}, step {step}",
                                       last_good=last_good, trace=trace, where=f"step {step}")

            lr = cosine_lr(training.lr, step, total_steps)
            for name in trainable:
                velocity[name] = training.momentum * velocity[name] + grads[name]
                model.params[name] -= lr * velocity[name]
            model.project_exponents()

            bad = [name for name in trainable if not np.all(np.isfinite(model.params[name]))]
            if bad:
                raise TrainingDiverged(f"parameter '{bad[0]}' became non-finite at step {step}",
                                       last_good=last_good, trace=trace, where=bad[0])

            step += 1
            trace.record_step(model.exponents)
            loss_total += loss * len(batch)

        accuracy = evaluate_accuracy(model, dataset)
        trace.record_epoch(epoch, loss_total / n, accuracy, model.exponents)
        last_good = model.copy()

        if verbose:
            exps = ", ".join(f"{p:.3f}" for p in model.exponents)
            status(f"    epoch {epoch:3d}  loss {loss_total / n:.4f}  acc {accuracy:.3f}" + (f"  p=[{exps}]" if exps else ""))

    if verbose:
        success(f"Training finished: loss {trace.final_loss:.4f}, accuracy {trace.final_accuracy:.3f}")
    return model, trace


def sweep_config(config: ToyViTConfig, key: str, value: str) -> ToyViTConfig:
    """
    Apply one sweep value

    p_init sets every exponent; groups switches to GGeM with that many groups
    (`H` = heads, `D` = embed_dim).
    """
    pooling = config.pooling
    if key == 'p_init':
        if not pooling.uses_exponents:
            raise InvalidArgument(f"p_init sweep needs gem or ggem pooling, got {pooling.strategy}")
        p = float(value)
        return replace(config, pooling=pooling.with_exponents([p] * pooling.groups))

    if key == 'groups':
        symbols = {'H': config.heads, 'D': config.embed_dim}
        groups = symbols[value] if value in symbols else int(value)
        p_init = pooling.exponents[0] if pooling.uses_exponents else 3.0
        new_pooling = PoolingConfig.ggem(groups=groups, p=p_init, trainable=pooling.exponents_trainable,
                                         clamp_eps=pooling.clamp_eps)
        return replace(config, pooling=new_pooling)

    raise InvalidArgument(f"unsupported sweep key '{key}' (expected p_init or groups)")


def run_sweep(dataset: Dataset, config: ToyViTConfig, training: TrainingConfig, seed: int,
              key: str, values: Sequence[str],
              init_model: Optional[ToyViTModel] = None) -> List[Tuple[str, ToyViTModel, TrainingTrace]]:
    """One seeded training run per sweep value"""
    runs = []
    for value in values:
        status(f"\nSweep {key}={value}")
        status("-" * 40)
        run_config = sweep_config(config, key, value)
        model, trace = train(dataset, run_config, training, seed, init_model=init_model)
        runs.append((value, model, trace))
    return runs


def sweep_summary(key: str, runs: Sequence[Tuple[str, ToyViTModel, TrainingTrace]]) -> Dict:
    """Final metrics per sweep value plus the best value by accuracy then loss"""
    rows = []
    for value, model, trace in runs:
        trajectory = trace.trajectory()
        rows.append({
            'value': value,
            'groups': model.config.pooling.groups,
            'final_loss': trace.final_loss,
            'final_accuracy': trace.final_accuracy,
            'initial_exponents': trajectory[0].tolist() if trajectory.size else [],
            'final_exponents': model.exponents.tolist(),
            'max_exponent_change': float(np.abs(trajectory[-1] - trajectory[0]).max()) if trajectory.size else 0.0,
        })
    best = min(rows, key=lambda r: (-r['final_accuracy'], r['final_loss'])) if rows else None
    return {'key': key, 'runs': rows, 'best_value': best['value'] if best else None}
