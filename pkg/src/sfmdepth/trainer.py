"""Two-view training loop with deterministic shuffling and resume.

Every source of randomness is derived from the run seed: the train/val
split uses one fixed stream, and each epoch derives its own stream from
(seed, epoch), so resuming from a checkpoint at epoch boundaries
reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .dataset_io import Dataset
from .errors import ConfigError, EmptyDataset, ManifestError, WarpOutOfView
from .losses import pair_loss
from .model import Model, build_model
from .supervision import PairingConfig, TrainingPair, annotate_frames, assemble_pairs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 1.0e-4
    consistency_weight: float = 2.0e-4
    validation_fraction: float = 0.05
    seed: int = 0
    max_gap: int | None = 3
    noise_sigma: float = 0.0
    threads: int = 1  # reserved; 1 is the only value with a determinism guarantee

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError(
                f"validation_fraction must be in [0, 1), got {self.validation_fraction}"
            )
        if self.consistency_weight < 0:
            raise ConfigError(
                f"consistency_weight must be >= 0, got {self.consistency_weight}"
            )
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "consistency_weight": self.consistency_weight,
            "validation_fraction": self.validation_fraction,
            "seed": self.seed,
            "max_gap": self.max_gap,
            "noise_sigma": self.noise_sigma,
            "threads": self.threads,
        }


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(v) for name, v in params.items()}
        self.v = {name: np.zeros_like(v) for name, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            p -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float | None
    steps: int
    skipped: int
    seconds: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "steps": self.steps,
            "skipped": self.skipped,
            "seconds": self.seconds,
        }


@dataclass
class TrainResult:
    model: Model
    history: list[EpochStats] = field(default_factory=list)
    train_pair_count: int = 0
    val_pair_count: int = 0


def training_pairs_from_dataset(
    dataset: Dataset, pairing: PairingConfig | None = None
) -> list[TrainingPair]:
    """Annotate every frame and assemble the in-window training pairs."""
    trajectory = dataset.trajectory()
    annotations = annotate_frames(dataset.points, trajectory, dataset.images_by_id())
    pairs = assemble_pairs(trajectory, annotations, pairing, dataset.subsequences)
    if not pairs:
        raise EmptyDataset("dataset yields no usable training pairs")
    return pairs


def split_pairs(
    pairs: list[TrainingPair], validation_fraction: float, seed: int
) -> tuple[list[int], list[int]]:
    """Deterministic train/validation split over pair indices."""
    n = len(pairs)
    if n == 0:
        raise EmptyDataset("no pairs to split")
    rng = np.random.default_rng([seed, 0x5917])
    order = rng.permutation(n)
    n_val = 0
    if validation_fraction > 0 and n >= 2:
        n_val = min(n - 1, max(1, int(round(n * validation_fraction))))
    val_idx = sorted(int(i) for i in order[:n_val])
    train_idx = sorted(int(i) for i in order[n_val:])
    return train_idx, val_idx


def _step(model: Model, pair: TrainingPair, image_j, image_k, config: TrainConfig):
    tape = Tape()
    bound = model.bind(tape)
    pred_j = bound.predict(image_j, pair.frame_id_j)
    pred_k = bound.predict(image_k, pair.frame_id_k)
    result = pair_loss(pred_j, pred_k, pair, config.consistency_weight)
    return tape, result


def evaluate_pairs(model: Model, pairs: list[TrainingPair], config: TrainConfig) -> float:
    """Mean objective over pairs without updating anything."""
    total = 0.0
    counted = 0
    for pair in pairs:
        try:
            _, result = _step(model, pair, pair.image_j, pair.image_k, config)
        except WarpOutOfView:
            continue
        total += result.value()
        counted += 1
    if counted == 0:
        raise EmptyDataset("no pair could be evaluated")
    return total / counted


def train(
    model: Model,
    pairs: list[TrainingPair],
    config: TrainConfig,
    checkpoint_path: str | Path | None = None,
    resume: bool = False,
) -> TrainResult:
    """Optimize the model over the pairs; optionally checkpoint per epoch.

    With ``resume`` the checkpoint's model, optimizer state, and history
    are restored and training continues at the next epoch, reproducing
    the uninterrupted run exactly.
    """
    if not pairs:
        raise EmptyDataset("cannot train on an empty pair list")
    train_idx, val_idx = split_pairs(pairs, config.validation_fraction, config.seed)
    if not train_idx:
        raise EmptyDataset("validation split leaves no training pairs")
    optimizer = Adam(model.parameters, config.learning_rate)
    history: list[EpochStats] = []
    start_epoch = 1

    if resume:
        if checkpoint_path is None or not Path(checkpoint_path).is_file():
            raise ConfigError(f"no checkpoint to resume from at {checkpoint_path}")
        saved = load_checkpoint(checkpoint_path)
        model = saved["model"]
        optimizer = Adam(model.parameters, config.learning_rate)
        optimizer.t = saved["adam_t"]
        for name in model.parameters:
            optimizer.m[name] = saved["adam_m"][name]
            optimizer.v[name] = saved["adam_v"][name]
        history = [EpochStats(seconds=0.0, **h) for h in saved["history"]]
        start_epoch = saved["next_epoch"]

    result = TrainResult(
        model=model,
        history=history,
        train_pair_count=len(train_idx),
        val_pair_count=len(val_idx),
    )

    for epoch in range(start_epoch, config.epochs + 1):
        began = time.monotonic()
        rng = np.random.default_rng([config.seed, 1, epoch])
        order = rng.permutation(len(train_idx))
        loss_sum = 0.0
        steps = 0
        skipped = 0
        for slot in order:
            pair = pairs[train_idx[int(slot)]]
            image_j, image_k = pair.image_j, pair.image_k
            if config.noise_sigma > 0:
                image_j = np.clip(
                    image_j + config.noise_sigma * rng.standard_normal(image_j.shape), 0.0, 1.0
                )
                image_k = np.clip(
                    image_k + config.noise_sigma * rng.standard_normal(image_k.shape), 0.0, 1.0
                )
            try:
                tape, step_result = _step(model, pair, image_j, image_k, config)
            except WarpOutOfView:
                skipped += 1
                continue
            tape.backward(step_result.total)
            optimizer.step(model.gradients())
            loss_sum += step_result.value()
            steps += 1
        val_loss = (
            evaluate_pairs(model, [pairs[i] for i in val_idx], config) if val_idx else None
        )
        stats = EpochStats(
            epoch=epoch,
            train_loss=loss_sum / steps if steps else float("nan"),
            val_loss=val_loss,
            steps=steps,
            skipped=skipped,
            seconds=time.monotonic() - began,
        )
        history.append(stats)
        log.info(
            "epoch %d: train %.6g  val %s  (%d steps, %d skipped, %.1fs)",
            epoch,
            stats.train_loss,
            "n/a" if val_loss is None else f"{val_loss:.6g}",
            steps,
            skipped,
            stats.seconds,
        )
        if checkpoint_path is not None:
            save_checkpoint(
                checkpoint_path, model, optimizer, config, history, next_epoch=epoch + 1
            )

    result.model = model
    result.history = history
    return result


def save_checkpoint(
    path: str | Path,
    model: Model,
    optimizer: Adam,
    config: TrainConfig,
    history: list[EpochStats],
    next_epoch: int,
) -> None:
    payload: dict[str, np.ndarray] = {}
    for name, values in model.parameters.items():
        payload[f"param.{name}"] = values
        payload[f"m.{name}"] = optimizer.m[name]
        payload[f"v.{name}"] = optimizer.v[name]
    np.savez(
        path,
        model_config=json.dumps(model.config_dict()),
        train_config=json.dumps(config.to_dict()),
        adam_t=optimizer.t,
        next_epoch=next_epoch,
        # wall-clock seconds are diagnostic only; persisting them would
        # break bit-identical reruns
        history=json.dumps(
            [{k: v for k, v in h.to_dict().items() if k != "seconds"} for h in history]
        ),
        **payload,
    )


def load_checkpoint(path: str | Path) -> dict:
    """Restore a checkpoint: model with weights, optimizer moments, history."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        model = build_model(json.loads(str(archive["model_config"])))
        adam_m: dict[str, np.ndarray] = {}
        adam_v: dict[str, np.ndarray] = {}
        for key in archive.files:
            if key.startswith("param."):
                model.parameters[key[len("param.") :]] = archive[key]
            elif key.startswith("m."):
                adam_m[key[2:]] = archive[key]
            elif key.startswith("v."):
                adam_v[key[2:]] = archive[key]
        return {
            "model": model,
            "adam_m": adam_m,
            "adam_v": adam_v,
            "adam_t": int(archive["adam_t"]),
            "next_epoch": int(archive["next_epoch"]),
            "history": json.loads(str(archive["history"])),
            "train_config": json.loads(str(archive["train_config"])),
        }
