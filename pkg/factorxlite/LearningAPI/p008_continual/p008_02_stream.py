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
import time

import numpy as np

from ..p000_utility import ConfigError, LogFunction, derive_seed, factorx_log
from ..p003_model import KnowledgeBase
from ..p004_lora import compose_delta, factor_space_gap, sparsity_summary
from ..p005_taskgen import TaskSuite
from ..p006_evaluation import MetricsMatrix, RunReport, record_snapshot
from ..p007_training import StreamSchedule, train_adapter
from .p008_01_centralization import CentralizationState, centralize, incremental_update
from .p008_04_experiment_io import (
    load_adapter, load_knowledge_base, load_run_state, save_adapter, save_knowledge_base, save_report,
    save_run_state,
)


CHECKPOINT_DIR = "checkpoints"


def new_report(method: str, schedule: StreamSchedule, suite: TaskSuite) -> RunReport:
    return RunReport(
        method=method,
        schedule=schedule.to_dict(),
        forward=MetricsMatrix(cols=list(schedule.datasets)),
        backward=MetricsMatrix(cols=sorted(suite.backward_tests)),
        suite_fingerprint=suite.fingerprint(),
        seed=schedule.seed,
    )


def resolve_stream(schedule: StreamSchedule, suite: TaskSuite, log: LogFunction = factorx_log):
    """Look up every scheduled dataset and warn when no centralization can happen."""
    splits = [suite.get(dataset_id) for dataset_id in schedule.datasets]
    if schedule.K > len(splits):
        log(f"K={schedule.K} exceeds the {len(splits)} scheduled datasets; no centralization will take place", 'warning')
    return splits


def _checkpoint(run_dir: str | None, filename: str, save, obj) -> str | None:
    if run_dir is None:
        return None
    relative = os.path.join(CHECKPOINT_DIR, filename)
    save(obj, os.path.join(run_dir, relative))
    return relative


def run_stream(kb0: KnowledgeBase, schedule: StreamSchedule, suite: TaskSuite, run_dir: str | None = None,
               resume: bool = False, eps: float = 1e-3, relative_sparsity: bool = True,
               log: LogFunction = factorx_log) -> RunReport:
    """
    Factorization and centralization over the whole stream.

    For every dataset an adapter is trained against the current knowledge
    base; every K adapters the mean of all deltas seen so far is merged.
    Snapshots are evaluated after every adapter and every merge.

    Parameters:
    -----------
    kb0 : KnowledgeBase
        Pretrained knowledge base at stream start
    schedule : StreamSchedule
        Dataset order, K, training budget and merge base
    suite : TaskSuite
        Source of training, held-out and test data
    run_dir : str, optional
        When given, checkpoints, the report and a resumable run state are written here
    resume : bool
        Continue from the run state in run_dir instead of starting over
    eps : float
        Sparsity threshold of the recorded deltas
    relative_sparsity : bool
        Also record sparsity relative to the knowledge base weights

    Returns:
    --------
    RunReport
        Rows 'base', 'adapter:<id>' and 'centralized:<n>'; the final knowledge
        base and state are available under report.artifacts
    """
    started = time.perf_counter()
    streams = resolve_stream(schedule, suite, log)
    forward_tests = {s.id: s.test for s in streams}
    backward_tests = {k: suite.backward_tests[k] for k in sorted(suite.backward_tests)}

    kb = kb0
    state = CentralizationState.empty(kb0, schedule.lora, schedule.K)
    report = new_report("centralized", schedule, suite)
    adapter_paths: list[str | None] = []
    kb_path = None
    start = 0

    saved = load_run_state(run_dir) if (resume and run_dir is not None) else None
    if saved is not None:
        kb, state, report, adapter_paths, kb_path, start = _restore(saved, kb0, schedule, suite, run_dir, log)
    else:
        kb_path = _checkpoint(run_dir, "kb_base.clkb", save_knowledge_base, kb0)
        record_snapshot(report, "base", kb0, None, forward_tests, backward_tests)
        report.checkpoints["base"] = {"kb": kb_path, "adapter": None}

    for t in range(start + 1, len(streams) + 1):
        splits = streams[t - 1]
        log(f"Factorization {t}/{len(streams)}: training adapter on '{splits.id}' against kb v{kb.version}")
        adapter, training = train_adapter(kb, splits.train, schedule, derive_seed(schedule.seed, "adapter", splits.id),
                                          heldout=splits.heldout, log=log)
        delta = compose_delta(adapter)
        report.history.append({
            "event": "adapter",
            "t": t,
            "dataset": splits.id,
            "kb_version": kb.version,
            **sparsity_summary(delta, eps, kb, relative_sparsity),
            "norm": delta.frobenius_norm(),
            "training": training.to_dict(),
        })
        state = incremental_update(state, adapter)

        row = f"adapter:{splits.id}"
        seen = [s.heldout for s in streams[:t]]
        record_snapshot(report, row, kb, adapter, forward_tests, backward_tests, seen, t)
        adapter_paths.append(_checkpoint(run_dir, f"adapter_{t:02d}_{splits.id}.clad", save_adapter, adapter))
        report.checkpoints[row] = {"kb": kb_path, "adapter": adapter_paths[-1]}

        if state.due():
            window_gap = factor_space_gap(state.recent_adapters)
            kb, state = centralize(kb, state, schedule.merge_base, original_kb=kb0, eps=eps,
                                   relative_sparsity=relative_sparsity)
            entry = dict(state.history[-1])
            adapter_sparsities = [h["sparsity"] for h in report.history if h["event"] == "adapter"]
            entry.update({
                "event": "centralization",
                "min_adapter_sparsity": min(adapter_sparsities),
                "sparser_than_adapters": entry["sparsity"] >= min(adapter_sparsities),
                "window_factor_space_gap": window_gap["relative"],
            })
            report.history.append(entry)
            row = f"centralized:{state.merges}"
            log(f"Centralization {state.merges} after t={t}: kb v{kb.version}, |delta_avg|={entry['norm']:.4g}")
            record_snapshot(report, row, kb, None, forward_tests, backward_tests, seen, t)
            kb_path = _checkpoint(run_dir, f"kb_centralized_{state.merges}.clkb", save_knowledge_base, kb)
            report.checkpoints[row] = {"kb": kb_path, "adapter": None}

        if run_dir is not None:
            _save_state(run_dir, report, schedule, state, adapter_paths, kb_path, t)

    report.wall_clock["total_seconds"] = report.wall_clock.get("total_seconds", 0.0) + time.perf_counter() - started
    report.wall_clock["peak_stored_adapters"] = state.peak_stored
    report.artifacts = {"kb": kb, "state": state}
    if run_dir is not None:
        save_report(report, run_dir)
    return report


def _save_state(run_dir, report, schedule, state, adapter_paths, kb_path, completed):
    save_run_state(run_dir, {
        "method": report.method,
        "schedule": schedule.to_dict(),
        "suite_fingerprint": report.suite_fingerprint,
        "completed": completed,
        "kb": kb_path,
        "adapters": adapter_paths,
        "recent": len(state.recent_adapters),
        "t": state.t,
        "merges": state.merges,
        "peak_stored": state.peak_stored,
        "history": state.history,
        "report": report.to_dict(),
    })


def _restore(saved: dict, kb0: KnowledgeBase, schedule: StreamSchedule, suite: TaskSuite, run_dir: str, log: LogFunction):
    if saved["schedule"] != schedule.to_dict():
        raise ConfigError(f"Run state in '{run_dir}' was written for a different schedule")
    if saved["suite_fingerprint"] != suite.fingerprint():
        raise ConfigError(f"Run state in '{run_dir}' was written for a different task suite")

    kb = load_knowledge_base(os.path.join(run_dir, saved["kb"]))
    adapter_paths = list(saved["adapters"])
    state = CentralizationState.empty(kb0, schedule.lora, schedule.K)
    # Composed deltas are rebuilt from the stored float32 factors in stream order,
    # which reproduces the float64 running sum exactly.
    for path in adapter_paths:
        state.running_sum = state.running_sum + compose_delta(load_adapter(os.path.join(run_dir, path))).astype(np.float64)
    n_recent = saved["recent"]
    state.recent_adapters = [load_adapter(os.path.join(run_dir, p)) for p in adapter_paths[len(adapter_paths) - n_recent:]] if n_recent else []
    state.t = saved["t"]
    state.merges = saved["merges"]
    state.peak_stored = saved["peak_stored"]
    state.history = list(saved["history"])
    report = RunReport.from_dict(saved["report"])
    log(f"Resuming '{run_dir}' after {saved['completed']} of {len(schedule.datasets)} datasets")
    return kb, state, report, adapter_paths, saved["kb"], saved["completed"]


class ExperimentStream:
    """Runs the factorization-centralization stream for a ContinualExperiment"""

    def __init__(self, parent_experiment):
        self.parent = parent_experiment
        self.last_report: RunReport | None = None

    def run(self, schedule: StreamSchedule | None = None, run_dir: str | None = None, resume: bool = False) -> RunReport:
        parent = self.parent
        schedule = schedule or parent.schedule()
        evaluation = parent.config.evaluation
        self.last_report = run_stream(parent.require_knowledge_base(), schedule, parent.suite,
                                      run_dir=run_dir, resume=resume, eps=evaluation["sparsity_eps"],
                                      relative_sparsity=evaluation["relative_sparsity"], log=parent._log)
        return self.last_report
