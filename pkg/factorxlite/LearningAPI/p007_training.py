######################################################################################################
# FactorXLite - A factorization-centralization toolkit for rehearsal-free continual learning
# Copyright (C) 2025 FactorXLite contributors
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE. See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program. If not, see <https://www.gnu.org/licenses/>.
######################################################################################################


import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .p000_utility import ConfigError, ContractError, LogFunction, derive_seed, factorx_log, progress_bar
from .p001_tensor import Tensor, add, backward, softmax_cross_entropy
from .p002_optimizer import SgdConfig, sgd_step
from .p003_model import KnowledgeBase, forward_batch
from .p004_lora import LoraAdapter, LoraConfig, init_adapter
from .p005_taskgen import Dataset, TaskSuite
from .p006_evaluation import evaluate_snapshot, mean_nll


MERGE_BASES = ("current", "original")


@dataclass(frozen=True)
class StreamSchedule:
    """Order of the stream and the training budget of every adapter."""
    datasets: tuple[str, ...]
    K: int = 3
    epochs_per_dataset: int = 4
    batch_size: int = 32
    sgd: SgdConfig = field(default_factory=SgdConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    merge_base: str = "original"
    early_stopping_patience: int | None = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))
        if len(self.datasets) < 1:
            raise ConfigError("StreamSchedule needs at least one dataset")
        if isinstance(self.K, bool) or int(self.K) != self.K or self.K < 1:
            raise ConfigError(f"K must be a positive integer, got {self.K!r}")
        if self.epochs_per_dataset < 0:
            raise ConfigError(f"epochs_per_dataset must be >= 0, got {self.epochs_per_dataset}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.merge_base not in MERGE_BASES:
            raise ConfigError(f"merge_base must be one of {MERGE_BASES}, got '{self.merge_base}'")
        if self.early_stopping_patience is not None and self.early_stopping_patience < 1:
            raise ConfigError("early_stopping_patience must be >= 1 or None")

    def to_dict(self) -> dict:
        return {
            "datasets": list(self.datasets),
            "K": self.K,
            "epochs_per_dataset": self.epochs_per_dataset,
            "batch_size": self.batch_size,
            "sgd": self.sgd.to_dict(),
            "lora": self.lora.to_dict(),
            "merge_base": self.merge_base,
            "early_stopping_patience": self.early_stopping_patience,
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StreamSchedule":
        return cls(
            datasets=tuple(data["datasets"]),
            K=int(data["K"]),
            epochs_per_dataset=int(data["epochs_per_dataset"]),
            batch_size=int(data["batch_size"]),
            sgd=SgdConfig.from_dict(data["sgd"]),
            lora=LoraConfig.from_dict(data["lora"]),
            merge_base=data["merge_base"],
            early_stopping_patience=data.get("early_stopping_patience"),
            seed=int(data.get("seed", 0)),
        )


@dataclass
class TrainingLog:
    dataset_id: str
    epoch_losses: list[float] = field(default_factory=list)
    heldout_losses: list[float] = field(default_factory=list)
    heldout_errors: list[float] = field(default_factory=list)
    steps: int = 0
    best_epoch: int | None = None
    stopped_early: bool = False
    restored_best: bool = False
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "epoch_losses": list(self.epoch_losses),
            "heldout_losses": list(self.heldout_losses),
            "heldout_errors": list(self.heldout_errors),
            "steps": self.steps,
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "restored_best": self.restored_best,
            "wall_clock": self.wall_clock,
        }


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 32
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(0.3, 1e-4, 1.0))
    target_error: float = 0.02
    # False trains the whole epoch budget even once the target is met
    stop_at_target: bool = False

    @classmethod
    def from_dict(cls, values: dict) -> "PretrainConfig":
        return cls(
            epochs=int(values["epochs"]),
            batch_size=int(values["batch_size"]),
            sgd=SgdConfig.from_dict(values),
            target_error=float(values["target_error"]),
            stop_at_target=bool(values.get("stop_at_target", False)),
        )


def _frozen(kb: KnowledgeBase) -> KnowledgeBase:
    if any(t.requires_grad for t in kb.params.values()):
        return kb.with_grad(False)
    return kb


def fit_adapter(kb: KnowledgeBase, adapter: LoraAdapter, train: Dataset, epochs: int, batch_size: int,
                sgd: SgdConfig, seed: int, heldout: Dataset | None = None, patience: int | None = None,
                extra_loss: Callable[[np.ndarray, Tensor], Tensor] | None = None,
                after_step: Callable[[LoraAdapter], None] | None = None,
                log: LogFunction = factorx_log) -> TrainingLog:
    """
    Train the adapter factors in place with minibatch SGD; the knowledge base stays frozen.

    Parameters:
    -----------
    extra_loss : callable, optional
        f(tokens, logits) -> scalar Tensor added to the cross-entropy of every batch
    after_step : callable, optional
        Called with the adapter after every optimizer step
    heldout, patience
        When both are given, training stops after `patience` epochs without
        held-out improvement and the best factors are restored

    Returns:
    --------
    TrainingLog
        Per-epoch mean training loss and held-out loss
    """
    if len(train) == 0:
        raise ContractError(f"Cannot train on empty dataset '{train.id}'")
    started = time.perf_counter()
    kb = _frozen(kb)
    params = adapter.parameters()
    rng = np.random.default_rng(derive_seed(seed, "shuffle"))
    record = TrainingLog(train.id)
    best_loss, best_state, stale = np.inf, None, 0
    n = len(train)

    for epoch in range(epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in progress_bar(range(0, n, batch_size), desc=f"{train.id} epoch {epoch + 1}/{epochs}", unit="batch"):
            idx = order[start:start + batch_size]
            tokens, labels = train.tokens[idx], train.labels[idx]
            logits = forward_batch(kb, tokens, adapter)
            loss = softmax_cross_entropy(logits, labels)
            if extra_loss is not None:
                loss = add(loss, extra_loss(tokens, logits))
            batch_losses.append(loss.item())
            backward(loss)
            sgd_step(params, sgd)
            record.steps += 1
            if after_step is not None:
                after_step(adapter)
        record.epoch_losses.append(float(np.mean(batch_losses)))

        if heldout is not None and patience is not None:
            heldout_loss = mean_nll(kb, adapter, heldout)
            record.heldout_losses.append(heldout_loss)
            if heldout_loss < best_loss:
                best_loss, best_state, stale = heldout_loss, adapter.copy(), 0
                record.best_epoch = epoch
            else:
                stale += 1
                if stale >= patience:
                    record.stopped_early = True
                    log(f"Early stop on '{train.id}' after epoch {epoch + 1} (best epoch {record.best_epoch + 1})", 'debug')
                    break
        log(f"'{train.id}' epoch {epoch + 1}: loss {record.epoch_losses[-1]:.4f}", 'debug')

    if best_state is not None and record.best_epoch != len(record.epoch_losses) - 1:
        adapter.load_state(best_state)
        record.restored_best = True
    record.wall_clock = time.perf_counter() - started
    return record


def train_adapter(kb: KnowledgeBase, dataset: Dataset, schedule: StreamSchedule, seed: int,
                  heldout: Dataset | None = None, log: LogFunction = factorx_log) -> tuple[LoraAdapter, TrainingLog]:
    """
    Create a fresh adapter against kb and fit it to one dataset.

    Only the adapter factors are updated; kb is bit-identical afterwards.
    """
    if len(dataset) == 0:
        raise ContractError(f"Cannot train on empty dataset '{dataset.id}'")
    adapter = init_adapter(kb, schedule.lora, dataset.id, derive_seed(seed, "init"))
    record = fit_adapter(
        kb, adapter, dataset,
        epochs=schedule.epochs_per_dataset,
        batch_size=schedule.batch_size,
        sgd=schedule.sgd,
        seed=seed,
        heldout=heldout,
        patience=schedule.early_stopping_patience,
        log=log,
    )
    return adapter, record


def pretrain_knowledge_base(kb: KnowledgeBase, suite: TaskSuite, cfg: PretrainConfig, seed: int,
                            log: LogFunction = factorx_log) -> tuple[KnowledgeBase, TrainingLog]:
    """
    Train every base parameter on the monolingual mixture.

    Trains the whole epoch budget; with cfg.stop_at_target it stops as soon
    as the held-out token error drops below cfg.target_error. A final error
    at or above the target is reported as a warning.
    """
    started = time.perf_counter()
    model = kb.with_grad(True)
    params = [model.params[name] for name in sorted(model.params)]
    data = suite.pretrain
    rng = np.random.default_rng(derive_seed(seed, "pretrain-shuffle"))
    record = TrainingLog("pretrain")
    heldout = {"pretrain": suite.pretrain_heldout}

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        batch_losses = []
        for start in progress_bar(range(0, len(data), cfg.batch_size), desc=f"Pretraining epoch {epoch + 1}/{cfg.epochs}", unit="batch"):
            idx = order[start:start + cfg.batch_size]
            loss = softmax_cross_entropy(forward_batch(model, data.tokens[idx]), data.labels[idx])
            batch_losses.append(loss.item())
            backward(loss)
            sgd_step(params, cfg.sgd)
            record.steps += 1
        record.epoch_losses.append(float(np.mean(batch_losses)))
        error = evaluate_snapshot(model, None, heldout, desc="Pretrain held-out")["pretrain"]
        record.heldout_errors.append(error)
        log(f"Pretraining epoch {epoch + 1}: loss {record.epoch_losses[-1]:.4f}, held-out token error {error:.4f}")
        if error < cfg.target_error:
            if record.best_epoch is None:
                record.best_epoch = epoch
            if cfg.stop_at_target:
                record.stopped_early = epoch + 1 < cfg.epochs
                break

    if record.heldout_errors and record.heldout_errors[-1] >= cfg.target_error:
        log(f"Pretraining budget exhausted above target error {cfg.target_error}", 'warning')

    record.wall_clock = time.perf_counter() - started
    return model.with_grad(False), record
