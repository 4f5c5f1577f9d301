"""Training protocol: Adam, plateau learning-rate decay, early stopping, best-weight restore.

Scheduler semantics (all counts in epochs, evaluated once per epoch after
the validation loss is recorded):

* an epoch *improves* when its validation loss is strictly below the best so far;
* the learning rate is multiplied by ``plateau_factor`` when at least
  ``plateau_patience`` epochs have passed both since the best epoch and
  since the previous reduction (the cooldown equals the patience);
* training stops once ``early_stop_patience`` epochs pass without
  improvement, or at ``max_epochs``.
"""

from __future__ import annotations

import contextlib
import copy
import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import augment
from .dataset import DatasetSplit, PreprocessSpec, load_image, normalize
from .errors import EmptySplit, NonFiniteLoss
from .regressor import RegressionModel, save_checkpoint

log = logging.getLogger(__name__)

HISTORY_FILE = "history.csv"
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "train_mae", "val_mae", "lr")


@dataclass(frozen=True)
class TrainingConfig:
    max_epochs: int = 500
    initial_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    plateau_patience: int = 7
    plateau_factor: float = 0.8
    early_stop_patience: int = 25
    batch_size: int = 16
    seed: int = 0
    deterministic: bool = False
    shuffle: bool = True
    init_head_bias: bool = True
    num_workers: int = 0

    def __post_init__(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if not self.plateau_patience < self.early_stop_patience:
            raise ValueError("plateau_patience must be smaller than early_stop_patience")
        if self.max_epochs < self.early_stop_patience:
            raise ValueError("max_epochs must be >= early_stop_patience")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.initial_lr < 0:
            raise ValueError("initial_lr must be >= 0")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_mae: float
    val_mae: float
    lr: float


@dataclass
class TrainingState:
    initial_lr: float
    epoch: int = 0
    current_lr: float = 0.0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_best: int = 0
    epochs_since_reduction: int = 0
    reductions: list = field(default_factory=list)
    history: list = field(default_factory=list)
    stop_reason: str | None = None

    def __post_init__(self):
        if not self.current_lr:
            self.current_lr = self.initial_lr

    @property
    def reduction_count(self) -> int:
        return len(self.reductions)

    def record(self, train_loss, val_loss, train_mae=math.nan, val_mae=math.nan) -> bool:
        """Append one epoch (trained at ``current_lr``); returns True on improvement."""
        self.epoch += 1
        self.history.append(EpochRecord(self.epoch, float(train_loss), float(val_loss),
                                        float(train_mae), float(val_mae), self.current_lr))
        improved = val_loss < self.best_val_loss
        if improved:
            self.best_val_loss = float(val_loss)
            self.best_epoch = self.epoch
        self.epochs_since_best = self.epoch - self.best_epoch
        return improved


def step_scheduler(state: TrainingState, config: TrainingConfig) -> TrainingState:
    state.epochs_since_reduction += 1
    if (state.epochs_since_best >= config.plateau_patience
            and state.epochs_since_reduction >= config.plateau_patience):
        # recompute from the reduction count so repeated decay never drifts
        state.reductions.append(state.epoch)
        state.current_lr = config.initial_lr * config.plateau_factor ** len(state.reductions)
        state.epochs_since_reduction = 0
    return state


def should_stop(state: TrainingState, config: TrainingConfig) -> bool:
    if state.epochs_since_best >= config.early_stop_patience:
        state.stop_reason = "early_stop"
        return True
    if state.epoch >= config.max_epochs:
        state.stop_reason = "max_epochs"
        return True
    return False


def simulate_schedule(val_losses, config: TrainingConfig) -> TrainingState:
    """Drive the scheduler with a scripted loss sequence; no model involved."""
    state = TrainingState(config.initial_lr)
    for loss in val_losses:
        state.record(math.nan, loss)
        step_scheduler(state, config)
        if should_stop(state, config):
            break
    return state


def write_history(state: TrainingState, path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for r in state.history:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.train_mae), repr(r.val_mae), repr(r.lr)])
    return path


def read_history(path) -> list[dict]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in rows]


# --- data -------------------------------------------------------------------


class ImageBank:
    """Decoded, resized, un-normalized images for one split, held in memory."""

    def __init__(self, records, spec: PreprocessSpec, num_workers: int = 0):
        self.records = list(records)
        self.spec = spec
        self.ages = np.array([r.age_years for r in self.records], dtype=np.float32)
        if num_workers > 1:
            with ThreadPoolExecutor(num_workers) as pool:
                imgs = list(pool.map(lambda r: load_image(r, spec), self.records))
        else:
            imgs = [load_image(r, spec) for r in self.records]
        h, w = spec.target_height, spec.target_width
        self.images = np.stack(imgs) if imgs else np.zeros((0, h, w, 3), np.float32)

    def __len__(self):
        return len(self.records)

    def batch(self, indices, aug=None, seed=0, epoch=0, pool=None) -> torch.Tensor:
        def one(i):
            img = self.images[i]
            if aug is not None:
                rng = augment.derived_rng(seed, 0, epoch, int(i))
                s = augment.sample_params(aug, rng, img.shape[:2])
                img = augment.apply(img, s, aug.fill_policy)
            return normalize(img, self.spec)

        arr = np.stack(list(pool.map(one, indices)) if pool is not None else [one(i) for i in indices])
        return torch.from_numpy(arr.transpose(0, 3, 1, 2)).contiguous(memory_format=torch.channels_last)


def evaluate_loss(model: RegressionModel, bank: ImageBank, batch_size: int = 16) -> tuple[float, float, np.ndarray]:
    """(MSE, MAE, predictions) on un-augmented images in eval mode."""
    was_training = model.training
    model.eval()
    preds = []
    try:
        with torch.no_grad():
            for i in range(0, len(bank), batch_size):
                x = bank.batch(range(i, min(i + batch_size, len(bank))))
                preds.append(model(x).reshape(-1).double().numpy())
    finally:
        model.train(was_training)
    p = np.concatenate(preds) if preds else np.zeros(0)
    err = p - bank.ages.astype(np.float64)
    return float(np.mean(err**2)), float(np.mean(np.abs(err))), p


@contextlib.contextmanager
def deterministic_mode(enabled: bool):
    if not enabled:
        yield
        return
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


# --- loop -------------------------------------------------------------------


def train(model: RegressionModel, split: DatasetSplit, config: TrainingConfig,
          aug: augment.AugmentationConfig | None = None, out_dir=None,
          preprocess: PreprocessSpec | None = None, config_hash: str | None = None,
          callback=None, extra_meta: dict | None = None):
    """Fit ``model`` in place; returns ``(checkpoint_dir or None, TrainingState)``.

    On return the model holds the weights of its best validation epoch.  With
    ``out_dir`` those weights, ``model.json`` and ``history.csv`` are written
    there.  Training images are augmented freshly each epoch; validation
    images are only normalized.
    """
    if not (split.train and split.val):
        raise EmptySplit(f"train/val/test sizes {split.sizes()}: train and val must be non-empty")
    if not split.test:
        raise EmptySplit(f"train/val/test sizes {split.sizes()}: test must be non-empty")
    aug = aug if aug is not None else augment.AugmentationConfig()
    h, w, _ = model.input_shape
    preprocess = preprocess or PreprocessSpec(h, w, normalization=model.normalization)
    config_hash = config_hash or config.digest()
    out_dir = Path(out_dir) if out_dir is not None else None

    torch.manual_seed(config.seed)
    t0 = time.time()
    train_bank = ImageBank(split.train, preprocess, config.num_workers)
    val_bank = ImageBank(split.val, preprocess, config.num_workers)
    log.info("loaded %d train / %d val images in %.1fs", len(train_bank), len(val_bank), time.time() - t0)

    model.to(memory_format=torch.channels_last)
    if config.init_head_bias:
        with torch.no_grad():
            model.fc.bias.fill_(float(train_bank.ages.mean()))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.initial_lr,
                                 betas=(config.beta1, config.beta2), eps=config.eps)
    state = TrainingState(config.initial_lr)
    best_weights = copy.deepcopy(model.state_dict())
    meta = dict(extra_meta or {})

    def checkpoint():
        if out_dir is None:
            return None
        save_checkpoint(model, out_dir, config_hash, state_dict=best_weights,
                        best_val_loss=state.best_val_loss, best_epoch=state.best_epoch, **meta)
        write_history(state, out_dir / HISTORY_FILE)
        return out_dir

    pool = ThreadPoolExecutor(config.num_workers) if config.num_workers > 1 else None
    try:
        with deterministic_mode(config.deterministic):
            while True:
                epoch = state.epoch + 1
                t0 = time.time()
                for g in optimizer.param_groups:
                    g["lr"] = state.current_lr
                order = (augment.derived_rng(config.seed, 1, epoch).permutation(len(train_bank))
                         if config.shuffle else np.arange(len(train_bank)))
                model.train()
                sq_sum = abs_sum = 0.0
                for start in range(0, len(order), config.batch_size):
                    idx = order[start : start + config.batch_size]
                    x = train_bank.batch(idx, aug, config.seed, epoch, pool)
                    y = torch.from_numpy(train_bank.ages[idx]).reshape(-1, 1)
                    pred = model(x)
                    loss = torch.mean((pred - y) ** 2)
                    if not torch.isfinite(loss):
                        checkpoint()
                        raise NonFiniteLoss(
                            f"non-finite training loss at epoch {epoch}, batch starting {start}; "
                            f"last good weights from epoch {state.best_epoch} saved"
                        )
                    optimizer.zero_grad(set_to_none=True)
                    loss.backward()
                    optimizer.step()
                    err = (pred.detach() - y).double()
                    sq_sum += float((err**2).sum())
                    abs_sum += float(err.abs().sum())
                n = len(order)
                val_loss, val_mae, _ = evaluate_loss(model, val_bank, config.batch_size)
                if not math.isfinite(val_loss):
                    checkpoint()
                    raise NonFiniteLoss(f"non-finite validation loss at epoch {epoch}")
                if state.record(sq_sum / n, val_loss, abs_sum / n, val_mae):
                    best_weights = copy.deepcopy(model.state_dict())
                step_scheduler(state, config)
                rec = state.history[-1]
                log.info("epoch %d  loss %.3f  val_loss %.3f  mae %.3f  val_mae %.3f  lr %.3g  (%.1fs)",
                         epoch, rec.train_loss, rec.val_loss, rec.train_mae, rec.val_mae, rec.lr, time.time() - t0)
                if callback is not None:
                    callback(state)
                if should_stop(state, config):
                    break
    finally:
        if pool is not None:
            pool.shutdown()

    model.load_state_dict(best_weights)
    model.eval()
    return checkpoint(), state
