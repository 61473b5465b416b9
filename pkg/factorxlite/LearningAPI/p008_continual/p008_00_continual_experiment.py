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


import os
from datetime import datetime
from typing import TYPE_CHECKING

from ...config import INFO
from ..p000_utility import logging_overrides
from ..p003_model import KnowledgeBase, init_model
from ..p005_taskgen import TaskSuite, make_suite
from ..p006_evaluation import RunReport, evaluate_snapshot
from ..p007_training import StreamSchedule, TrainingLog, pretrain_knowledge_base
from .p008_02_stream import ExperimentStream
from .p008_03_baselines import ExperimentBaselines
from .p008_04_experiment_io import ExperimentIO

if TYPE_CHECKING:
    from ...UtilityAPI.RunConfigAPI import RunConfig


class ContinualExperiment:
    """Owns a run configuration, its task suite and the current knowledge base"""

    def __init__(self, run_config: "RunConfig | None" = None, output_dir: str | None = None):
        """Initialize an experiment; the default configuration is used when none is given."""
        self.reset(run_config, output_dir)

    def reset(self, run_config=None, output_dir=None):
        if run_config is None:
            from ...UtilityAPI.RunConfigAPI import load_run_config
            run_config = load_run_config()
        self.config = run_config
        self.output_dir = output_dir or run_config.output_dir

        self.logging_settings = dict(run_config.settings.get("logging", {}))
        self.params = {
            'verbose': self.logging_settings.get("verbose", True),
            'debug': self.logging_settings.get("debug", False),
        }

        # Component managers
        self.stream = ExperimentStream(self)
        self.baselines = ExperimentBaselines(self)
        self.io = ExperimentIO(self)

        self._suite: TaskSuite | None = None
        self.knowledge_base: KnowledgeBase | None = None

    def _log(self, message: str, level: str = 'info'):
        """Log a message based on verbosity settings."""
        if level == 'debug' and not self.params['debug']:
            return
        if self.params['verbose'] or level in ('warning', 'error'):
            print(f"{INFO['name']}::{datetime.now()} | {level.upper()}: {message}")

    @property
    def suite(self) -> TaskSuite:
        if self._suite is None:
            self._log(f"Generating task suite ({len(self.config.suite.stream)} stream datasets, "
                      f"{self.config.suite.n_languages} languages)")
            self._suite = make_suite(self.config.suite, self.config.suite_seed)
        return self._suite

    def require_knowledge_base(self) -> KnowledgeBase:
        if self.knowledge_base is None:
            raise RuntimeError("No knowledge base loaded. Use pretrain() or load_knowledge_base() first.")
        return self.knowledge_base

    def build_model(self) -> KnowledgeBase:
        self.knowledge_base = init_model(self.config.model)
        self._log(f"Initialized model with {self.knowledge_base.parameter_count()} parameters")
        return self.knowledge_base

    def pretrain(self, checkpoint_path: str | None = None) -> tuple[KnowledgeBase, TrainingLog, dict]:
        """
        Pretrain the knowledge base on the monolingual mixture.

        Returns:
        --------
        tuple
            (knowledge base, training log, backward evaluation row)
        """
        kb = self.knowledge_base or self.build_model()
        with logging_overrides(self.logging_settings):
            kb, record = pretrain_knowledge_base(kb, self.suite, self.config.pretrain, self.config.pretrain_seed,
                                                 log=self._log)
            row = evaluate_snapshot(kb, None, self.suite.backward_tests, desc="Backward suite")
        self.knowledge_base = kb
        worst = max(row.values())
        level = 'info' if worst < self.config.pretrain.target_error else 'warning'
        self._log(f"Pretrained backward token error: worst {worst:.4f}, target {self.config.pretrain.target_error}", level)
        if checkpoint_path is not None:
            self.io.save_knowledge_base(kb, checkpoint_path)
        return kb, record, row

    def load_knowledge_base(self, path: str) -> KnowledgeBase:
        self.knowledge_base = self.io.load_knowledge_base(path)
        return self.knowledge_base

    def schedule(self, K: int | None = None, merge_base: str | None = None) -> StreamSchedule:
        return self.config.stream_schedule(K=K, merge_base=merge_base)

    def run(self, method: str | None = None, K: int | None = None, merge_base: str | None = None,
            run_dir: str | None = None, resume: bool = False) -> RunReport:
        """Run one method over the stream and write its report to run_dir."""
        method = method or self.config.method
        schedule = self.schedule(K=K, merge_base=merge_base)
        run_dir = run_dir or os.path.join(self.output_dir, f"{method}_K{schedule.K}_{schedule.merge_base}")
        os.makedirs(run_dir, exist_ok=True)
        self._log(f"Running method '{method}' with K={schedule.K}, merge_base={schedule.merge_base} into {run_dir}")

        runners = {
            "centralized": lambda: self.stream.run(schedule, run_dir=run_dir, resume=resume),
            "swadt": lambda: self.baselines.swadt(schedule, run_dir=run_dir),
            "naive": lambda: self.baselines.naive(schedule, run_dir=run_dir),
            "ceiling": lambda: self.baselines.ceiling(schedule, run_dir=run_dir),
        }
        if method not in runners:
            raise ValueError(f"Unknown method '{method}'")
        with logging_overrides(self.logging_settings):
            report = runners[method]()
        self.io.save_suite(os.path.join(run_dir, "suite"))
        return report
