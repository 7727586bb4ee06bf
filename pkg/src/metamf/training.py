"""Minibatch MSE training with validation-based early stopping."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .dataset import Ratings
from .errors import ContractError, TrainingError
from .model import MetaParams, ModelConfig, forward, predict
from .optim import SGD, Adam

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 1e-3
    max_epochs: int = 60
    patience: int = 5
    seed: int = 0
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be > 0")
        if self.max_epochs < 1:
            raise ContractError("max_epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    def make_optimizer(self, parameters):
        if self.optimizer == "sgd":
            return SGD(parameters, lr=self.learning_rate)
        return Adam(parameters, lr=self.learning_rate,
                    betas=(self.adam_beta1, self.adam_beta2), eps=self.adam_eps)


@dataclass
class TrainLog:
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    best_epoch: int = -1
    checkpoint_path: str | None = None
    model_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_mse", "val_mse", "seconds"])
            for k, (tr, va, sec) in enumerate(zip(self.train_mse, self.val_mse, self.seconds)):
                w.writerow([k, repr(tr), repr(va), f"{sec:.3f}"])


def minibatch_iter(n_records: int, batch_size: int, epoch_seed):
    """Yield index arrays covering a seeded permutation of ``range(n_records)``."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    perm = np.random.default_rng(epoch_seed).permutation(n_records)
    for start in range(0, n_records, batch_size):
        yield perm[start:start + batch_size]


def training_step(params: MetaParams, optimizer, users, items, targets) -> float:
    """One optimizer step on a batch; returns the batch loss before the step."""
    optimizer.zero_grad()
    target = Tensor(np.asarray(targets).reshape(-1, 1), dtype=params["memory"].dtype)
    with Tape() as tape:
        loss = ad.mse_loss(forward(params, users, items), target)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value}")
    tape.backward(loss)
    optimizer.step()
    return value


def evaluate_mse(params: MetaParams, records: Ratings) -> float:
    pred = predict(params, records.users, records.items)
    d = pred - records.ratings
    return float(np.mean(d * d))


def _check_indices(records: Ratings, n_users: int, n_items: int, what: str):
    if len(records) and (
        records.users.min() < 0 or records.users.max() >= n_users
        or records.items.min() < 0 or records.items.max() >= n_items
    ):
        raise ContractError(f"{what} references a user or item outside the model")


def train(model_config: ModelConfig, train_config: TrainConfig, train_records: Ratings,
          val_records: Ratings, n_users: int, n_items: int, init_seed: int | None = None,
          params: MetaParams | None = None) -> tuple[MetaParams, TrainLog]:
    """Fit MetaMF/NoMetaMF and return the parameters of the best validation epoch.

    ``init_seed`` defaults to ``train_config.seed``; the epoch shuffles are
    seeded from ``(train_config.seed, epoch)``.
    """
    if len(train_records) == 0:
        raise ContractError("training set is empty")
    if len(val_records) == 0:
        raise ContractError("validation set is empty")
    _check_indices(train_records, n_users, n_items, "training set")
    _check_indices(val_records, n_users, n_items, "validation set")

    if params is None:
        seed = train_config.seed if init_seed is None else init_seed
        params = MetaParams.initialize(model_config, n_users, n_items, seed=seed)
    optimizer = train_config.make_optimizer(params.trainable())
    log = TrainLog(model_config=asdict(model_config), train_config=asdict(train_config))

    best_val = np.inf
    best = params.snapshot()
    stale = 0
    users, items, ratings = train_records.users, train_records.items, train_records.ratings
    for epoch in range(train_config.max_epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for b, idx in enumerate(minibatch_iter(len(train_records), train_config.batch_size,
                                               (train_config.seed, epoch))):
            try:
                loss = training_step(params, optimizer, users[idx], items[idx], ratings[idx])
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
            total += loss * len(idx)
            count += len(idx)
        val = evaluate_mse(params, val_records)
        if not np.isfinite(val):
            raise TrainingError(f"epoch {epoch}: validation MSE is not finite")
        log.train_mse.append(total / count)
        log.val_mse.append(val)
        log.seconds.append(time.perf_counter() - t0)
        logger.debug("epoch %d train %.4f val %.4f", epoch, total / count, val)
        if val < best_val:
            best_val, best, stale = val, params.snapshot(), 0
            log.best_epoch = epoch
        else:
            stale += 1
            if stale >= train_config.patience:
                break
    params.load_snapshot(best)
    return params, log
