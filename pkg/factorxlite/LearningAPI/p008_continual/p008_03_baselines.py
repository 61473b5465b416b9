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
from dataclasses import dataclass

import numpy as np

from ..p000_utility import ConfigError, LogFunction, derive_seed, factorx_log
from ..p001_tensor import Tensor, kl_divergence, mul, no_grad
from ..p003_model import KnowledgeBase, forward_batch
from ..p004_lora import LoraAdapter, compose_delta, init_adapter, sparsity_summary
from ..p005_taskgen import TaskSuite, pool_datasets
from ..p006_evaluation import RunReport, record_snapshot
from ..p007_training import StreamSchedule, fit_adapter, train_adapter
from .p008_02_stream import _checkpoint, new_report, resolve_stream
from .p008_04_experiment_io import save_adapter, save_knowledge_base, save_report


@dataclass(frozen=True)
class SwadtConfig:
    """Weight averaging plus distillation from the pre-dataset snapshot."""
    ema_beta: float = 0.999
    distill_weight: float = 1.0
    distill_temperature: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.ema_beta <= 1.0:
            raise ConfigError(f"ema_beta must lie in [0, 1], got {self.ema_beta}")
        if self.distill_weight < 0:
            raise ConfigError(f"distill_weight must be non-negative, got {self.distill_weight}")
        if not self.distill_temperature > 0:
            raise ConfigError(f"distill_temperature must be positive, got {self.distill_temperature}")

    def to_dict(self) -> dict:
        return {"ema_beta": self.ema_beta, "distill_weight": self.distill_weight,
                "distill_temperature": self.distill_temperature}


class ExponentialWeightAverager:
    """
    theta_avg <- beta * theta_avg + (1 - beta) * theta, kept in float64.
    """

    def __init__(self, beta: float, initial: dict[str, np.ndarray]):
        if not 0.0 <= beta <= 1.0:
            raise ConfigError(f"EMA beta must lie in [0, 1], got {beta}")
        self.beta = float(beta)
        self.average = {name: np.array(value, dtype=np.float64) for name, value in initial.items()}
        self.steps = 0

    def update(self, current: dict[str, np.ndarray]):
        for name, value in current.items():
            self.average[name] = self.beta * self.average[name] + (1.0 - self.beta) * np.asarray(value, dtype=np.float64)
        self.steps += 1

    @staticmethod
    def closed_form(beta: float, initial: np.ndarray, trajectory: list[np.ndarray]) -> np.ndarray:
        """beta^n * theta_0 + (1 - beta) * sum_i beta^(n-1-i) * theta_i"""
        n = len(trajectory)
        total = beta ** n * np.asarray(initial, dtype=np.float64)
        for i, theta in enumerate(trajectory):
            total = total + (1.0 - beta) * beta ** (n - 1 - i) * np.asarray(theta, dtype=np.float64)
        return total

    # ---- adapter helpers ----

    @staticmethod
    def _named(adapter: LoraAdapter) -> dict[str, np.ndarray]:
        named = {}
        for name in adapter.layer_names:
            A, B = adapter.factors[name]
            named[f"{name}.A"] = A.data
            named[f"{name}.B"] = B.data
        return named

    @classmethod
    def from_adapter(cls, beta: float, adapter: LoraAdapter) -> "ExponentialWeightAverager":
        return cls(beta, cls._named(adapter))

    def update_from_adapter(self, adapter: LoraAdapter):
        self.update(self._named(adapter))

    def to_adapter(self, template: LoraAdapter) -> LoraAdapter:
        factors = {}
        for name in template.layer_names:
            A, B = template.factors[name]
            factors[name] = (Tensor(self.average[f"{name}.A"].astype(A.dtype), name=A.name),
                             Tensor(self.average[f"{name}.B"].astype(B.dtype), name=B.name))
        return LoraAdapter(template.config, factors, template.trained_on, template.base_version)


def _sequential_run(kb0: KnowledgeBase, schedule: StreamSchedule, suite: TaskSuite, method: str,
                    swadt: SwadtConfig | None, run_dir: str | None, eps: float, relative_sparsity: bool,
                    log: LogFunction) -> RunReport:
    """One adapter carried through the whole stream, optionally averaged and distilled."""
    started = time.perf_counter()
    streams = resolve_stream(schedule, suite, log)
    forward_tests = {s.id: s.test for s in streams}
    backward_tests = {k: suite.backward_tests[k] for k in sorted(suite.backward_tests)}
    report = new_report(method, schedule, suite)
    if swadt is not None:
        report.schedule["swadt"] = swadt.to_dict()

    kb_path = _checkpoint(run_dir, "kb_base.clkb", save_knowledge_base, kb0)
    record_snapshot(report, "base", kb0, None, forward_tests, backward_tests)
    report.checkpoints["base"] = {"kb": kb_path, "adapter": None}

    # Seeded like train_adapter on the first dataset, so a one-dataset stream reduces to it
    first_seed = derive_seed(schedule.seed, "adapter", streams[0].id)
    adapter = init_adapter(kb0, schedule.lora, method, derive_seed(first_seed, "init"))
    averager = ExponentialWeightAverager.from_adapter(swadt.ema_beta, adapter) if swadt is not None else None

    for t, splits in enumerate(streams, start=1):
        log(f"{method}: dataset {t}/{len(streams)} '{splits.id}'")
        extra_loss = None
        if swadt is not None and swadt.distill_weight > 0:
            extra_loss = _distillation_loss(kb0, averager.to_adapter(adapter), swadt)

        training = fit_adapter(
            kb0, adapter, splits.train,
            epochs=schedule.epochs_per_dataset,
            batch_size=schedule.batch_size,
            sgd=schedule.sgd,
            seed=derive_seed(schedule.seed, "adapter", splits.id),
            heldout=splits.heldout,
            patience=schedule.early_stopping_patience,
            extra_loss=extra_loss,
            after_step=averager.update_from_adapter if averager is not None else None,
            log=log,
        )
        evaluated = averager.to_adapter(adapter) if averager is not None else adapter.copy()
        evaluated.trained_on = splits.id

        delta = compose_delta(evaluated)
        report.history.append({
            "event": "adapter",
            "t": t,
            "dataset": splits.id,
            **sparsity_summary(delta, eps, kb0, relative_sparsity),
            "norm": delta.frobenius_norm(),
            "training": training.to_dict(),
        })
        row = f"sequential:{splits.id}"
        seen = [s.heldout for s in streams[:t]]
        record_snapshot(report, row, kb0, evaluated, forward_tests, backward_tests, seen, t)
        adapter_path = _checkpoint(run_dir, f"adapter_{t:02d}_{splits.id}.clad", save_adapter, evaluated)
        report.checkpoints[row] = {"kb": kb_path, "adapter": adapter_path}

    report.wall_clock["total_seconds"] = time.perf_counter() - started
    report.artifacts = {"kb": kb0, "adapter": adapter, "evaluated_adapter": evaluated, "averager": averager}
    if run_dir is not None:
        save_report(report, run_dir)
    return report


def _distillation_loss(kb0: KnowledgeBase, teacher: LoraAdapter, cfg: SwadtConfig):
    def loss(tokens: np.ndarray, logits: Tensor) -> Tensor:
        with no_grad():
            teacher_logits = forward_batch(kb0, tokens, teacher).data
        return mul(kl_divergence(logits, teacher_logits, cfg.distill_temperature), cfg.distill_weight)

    return loss


def swadt_run_stream(kb0: KnowledgeBase, schedule: StreamSchedule, suite: TaskSuite, cfg: SwadtConfig,
                     run_dir: str | None = None, eps: float = 1e-3, relative_sparsity: bool = True,
                     log: LogFunction = factorx_log) -> RunReport:
    """
    Sequential fine-tuning of one adapter with an exponential moving average
    of its factors and distillation towards the snapshot taken before each
    dataset. Only current-dataset inputs are used; evaluation uses the average.
    """
    return _sequential_run(kb0, schedule, suite, "swadt", cfg, run_dir, eps, relative_sparsity, log)


def naive_sequential(kb0: KnowledgeBase, schedule: StreamSchedule, suite: TaskSuite,
                     run_dir: str | None = None, eps: float = 1e-3, relative_sparsity: bool = True,
                     log: LogFunction = factorx_log) -> RunReport:
    """One adapter trained through every dataset in order, no regularization beyond weight decay."""
    return _sequential_run(kb0, schedule, suite, "naive", None, run_dir, eps, relative_sparsity, log)


def multitask_ceiling(kb0: KnowledgeBase, schedule: StreamSchedule, suite: TaskSuite,
                      run_dir: str | None = None, eps: float = 1e-3, relative_sparsity: bool = True,
                      log: LogFunction = factorx_log) -> RunReport:
    """
    One adapter trained on the shuffled union of every scheduled dataset.

    A single scheduled dataset is used as is, so the run reduces to train_adapter on it.
    """
    started = time.perf_counter()
    streams = resolve_stream(schedule, suite, log)
    forward_tests = {s.id: s.test for s in streams}
    backward_tests = {k: suite.backward_tests[k] for k in sorted(suite.backward_tests)}
    report = new_report("ceiling", schedule, suite)

    kb_path = _checkpoint(run_dir, "kb_base.clkb", save_knowledge_base, kb0)
    record_snapshot(report, "base", kb0, None, forward_tests, backward_tests)
    report.checkpoints["base"] = {"kb": kb_path, "adapter": None}

    pool_seed = derive_seed(schedule.seed, "pool") if len(streams) > 1 else None
    train = pool_datasets([s.train for s in streams], seed=pool_seed)
    heldout = pool_datasets([s.heldout for s in streams], split="heldout", seed=pool_seed)
    log(f"Multitask ceiling: {len(train)} pooled samples from {len(streams)} datasets")
    adapter, training = train_adapter(kb0, train, schedule, derive_seed(schedule.seed, "adapter", train.id),
                                      heldout=heldout, log=log)

    delta = compose_delta(adapter)
    report.history.append({
        "event": "adapter",
        "t": 1,
        "dataset": train.id,
        **sparsity_summary(delta, eps, kb0, relative_sparsity),
        "norm": delta.frobenius_norm(),
        "training": training.to_dict(),
    })
    row = f"ceiling:{train.id}"
    record_snapshot(report, row, kb0, adapter, forward_tests, backward_tests, [s.heldout for s in streams], 1)
    adapter_path = _checkpoint(run_dir, f"adapter_ceiling_{train.id}.clad", save_adapter, adapter)
    report.checkpoints[row] = {"kb": kb_path, "adapter": adapter_path}

    report.wall_clock["total_seconds"] = time.perf_counter() - started
    report.artifacts = {"kb": kb0, "adapter": adapter}
    if run_dir is not None:
        save_report(report, run_dir)
    return report


class ExperimentBaselines:
    """Runs the comparison systems for a ContinualExperiment"""

    def __init__(self, parent_experiment):
        self.parent = parent_experiment

    def _sparsity_options(self) -> dict:
        evaluation = self.parent.config.evaluation
        return {"eps": evaluation["sparsity_eps"], "relative_sparsity": evaluation["relative_sparsity"]}

    def swadt(self, schedule: StreamSchedule | None = None, cfg: SwadtConfig | None = None,
              run_dir: str | None = None) -> RunReport:
        parent = self.parent
        return swadt_run_stream(parent.require_knowledge_base(), schedule or parent.schedule(), parent.suite,
                                cfg or parent.config.swadt, run_dir=run_dir, log=parent._log,
                                **self._sparsity_options())

    def naive(self, schedule: StreamSchedule | None = None, run_dir: str | None = None) -> RunReport:
        parent = self.parent
        return naive_sequential(parent.require_knowledge_base(), schedule or parent.schedule(), parent.suite,
                                run_dir=run_dir, log=parent._log,
                                **self._sparsity_options())

    def ceiling(self, schedule: StreamSchedule | None = None, run_dir: str | None = None) -> RunReport:
        parent = self.parent
        return multitask_ceiling(parent.require_knowledge_base(), schedule or parent.schedule(), parent.suite,
                                 run_dir=run_dir, log=parent._log,
                                 **self._sparsity_options())
