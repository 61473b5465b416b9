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


from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .p000_utility import ContractError, SuiteMismatchError, progress_bar
from .p001_tensor import no_grad
from .p003_model import KnowledgeBase, forward_batch, predict_batch
from .p005_taskgen import Dataset


# Quoted relative improvement of the centralized model over the base model
# on the published forward suite, next to the row averages it was reported with.
PUBLISHED_BASE_AVG = 39.4
PUBLISHED_CENTRALIZED_AVG = 28.7
PUBLISHED_QUOTED_IMPROVEMENT = 0.246


def token_error_rate(ref: Sequence[int], hyp: Sequence[int]) -> float:
    """
    Levenshtein distance with unit costs, divided by len(ref).

    Raises:
    -------
    ContractError
        If the reference is empty
    """
    ref = list(ref)
    hyp = list(hyp)
    if len(ref) == 0:
        raise ContractError("token_error_rate needs a non-empty reference")
    previous = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        current = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            current[j] = min(
                previous[j] + 1,             # deletion
                current[j - 1] + 1,          # insertion
                previous[j - 1] + (r != h),  # substitution
            )
        previous = current
    return previous[-1] / len(ref)


def dataset_error_rate(references: np.ndarray, hypotheses: np.ndarray) -> float:
    """Mean token error rate over the rows of a batch."""
    if references.shape[0] == 0:
        raise ContractError("cannot score an empty test set")
    exact = np.all(references == hypotheses, axis=1)
    total = 0.0
    for k in np.flatnonzero(~exact):
        total += token_error_rate(references[k], hypotheses[k])
    return total / references.shape[0]


@dataclass
class MetricsMatrix:
    """
    Model-snapshot x test-set error table. Absent cells are None;
    the AVG of a row is the mean over its filled cells.
    """
    cols: list[str]
    rows: list[str] = field(default_factory=list)
    values: dict[str, dict[str, float | None]] = field(default_factory=dict)

    def add_row(self, row_id: str, cells: dict[str, float]):
        unknown = set(cells) - set(self.cols)
        if unknown:
            raise ContractError(f"Row '{row_id}' has cells for unknown test sets {sorted(unknown)}")
        if row_id not in self.values:
            self.rows.append(row_id)
        self.values[row_id] = {col: (None if cells.get(col) is None else float(cells[col])) for col in self.cols}

    def get(self, row_id: str, col: str) -> float | None:
        return self.values[row_id][col]

    def avg(self, row_id: str) -> float | None:
        filled = [v for v in self.values[row_id].values() if v is not None]
        return float(np.mean(filled)) if filled else None

    def averages(self) -> dict[str, float | None]:
        return {row: self.avg(row) for row in self.rows}

    def to_dict(self) -> dict:
        return {
            "rows": list(self.rows),
            "cols": list(self.cols),
            "values": {row: dict(self.values[row]) for row in self.rows},
            "avg": self.averages(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsMatrix":
        matrix = cls(cols=list(data["cols"]))
        for row in data["rows"]:
            matrix.add_row(row, data["values"][row])
        return matrix

    def csv_rows(self, label: str) -> list[list[str]]:
        def cell(v):
            return "" if v is None else repr(float(v))

        out = [["matrix", "row", *self.cols, "AVG"]]
        for row in self.rows:
            out.append([label, row, *[cell(self.values[row][c]) for c in self.cols], cell(self.avg(row))])
        return out


@dataclass
class RunReport:
    method: str
    schedule: dict
    forward: MetricsMatrix
    backward: MetricsMatrix
    history: list[dict] = field(default_factory=list)
    cumulative_risk: list[dict] = field(default_factory=list)
    checkpoints: dict[str, dict] = field(default_factory=dict)
    wall_clock: dict[str, float] = field(default_factory=dict)
    suite_fingerprint: str = ""
    seed: int = 0
    notes: list[str] = field(default_factory=list)
    # In-memory results of the run (final knowledge base, adapters, state); never serialized
    artifacts: dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "schedule": self.schedule,
            "forward": self.forward.to_dict(),
            "backward": self.backward.to_dict(),
            "history": self.history,
            "cumulative_risk": self.cumulative_risk,
            "checkpoints": self.checkpoints,
            "wall_clock": self.wall_clock,
            "suite_fingerprint": self.suite_fingerprint,
            "seed": int(self.seed),
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        return cls(
            method=data["method"],
            schedule=data["schedule"],
            forward=MetricsMatrix.from_dict(data["forward"]),
            backward=MetricsMatrix.from_dict(data["backward"]),
            history=list(data.get("history", [])),
            cumulative_risk=list(data.get("cumulative_risk", [])),
            checkpoints=dict(data.get("checkpoints", {})),
            wall_clock=dict(data.get("wall_clock", {})),
            suite_fingerprint=data.get("suite_fingerprint", ""),
            seed=int(data.get("seed", 0)),
            notes=list(data.get("notes", [])),
        )

    def rows_with_prefix(self, prefix: str) -> list[str]:
        return [row for row in self.forward.rows if row.startswith(prefix)]


def evaluate_snapshot(kb: KnowledgeBase, adapter, test_sets: dict[str, Dataset], desc: str = "Evaluating") -> dict[str, float]:
    """
    Mean token error rate of kb (plus adapter, when given) on every test set.

    Raises:
    -------
    ContractError
        If no test sets are given or one of them is empty
    """
    if not test_sets:
        raise ContractError("evaluate_snapshot needs at least one test set")
    row = {}
    for test_id in progress_bar(list(test_sets), desc=desc, unit="set"):
        dataset = test_sets[test_id]
        if len(dataset) == 0:
            raise ContractError(f"Test set '{test_id}' is empty")
        hypotheses = predict_batch(kb, dataset.tokens, adapter)
        row[test_id] = dataset_error_rate(dataset.labels, hypotheses)
    return row


def mean_nll(kb: KnowledgeBase, adapter, dataset: Dataset, chunk_size: int = 256) -> float:
    """Mean per-token negative log-likelihood of the labels."""
    total = 0.0
    with no_grad():
        for start in range(0, len(dataset), chunk_size):
            logits = forward_batch(kb, dataset.tokens[start:start + chunk_size], adapter).data.astype(np.float64)
            labels = dataset.labels[start:start + chunk_size]
            shifted = logits - logits.max(axis=-1, keepdims=True)
            log_z = np.log(np.exp(shifted).sum(axis=-1))
            picked = np.take_along_axis(shifted, labels[..., None], axis=-1)[..., 0]
            total += float(np.sum(log_z - picked))
    return total / dataset.labels.size


def cumulative_risk(kb: KnowledgeBase, adapter, seen: Sequence[Dataset]) -> float:
    """Sum over the seen datasets of their mean negative log-likelihood."""
    if len(seen) == 0:
        raise ContractError("cumulative_risk needs at least one seen dataset")
    return float(sum(mean_nll(kb, adapter, dataset) for dataset in seen))


def record_snapshot(report: RunReport, row_id: str, kb: KnowledgeBase, adapter,
                    forward_tests: dict[str, Dataset], backward_tests: dict[str, Dataset],
                    seen: Sequence[Dataset] = (), step: int = 0) -> None:
    """Evaluate one model version on both suites and append it to the report."""
    report.forward.add_row(row_id, evaluate_snapshot(kb, adapter, forward_tests, desc=f"{row_id} forward"))
    report.backward.add_row(row_id, evaluate_snapshot(kb, adapter, backward_tests, desc=f"{row_id} backward"))
    if seen:
        report.cumulative_risk.append({
            "row": row_id,
            "t": int(step),
            "datasets": [d.id for d in seen],
            "value": cumulative_risk(kb, adapter, seen),
        })


def relative_improvement(base_avg: float, model_avg: float) -> float | None:
    """(base - model) / base, or None when the base average is zero."""
    if base_avg is None or model_avg is None or base_avg == 0:
        return None
    return (base_avg - model_avg) / base_avg


def _forgetting(matrix: MetricsMatrix, model_row: str) -> dict[str, float | None]:
    earlier = matrix.rows[:matrix.rows.index(model_row)]
    out = {}
    for col in matrix.cols:
        final = matrix.get(model_row, col)
        previous = [matrix.get(r, col) for r in earlier if matrix.get(r, col) is not None]
        out[col] = None if final is None else (final - min(previous) if previous else 0.0)
    return out


def transfer_scores(report: RunReport, model_row: str | None = None, base_row: str = "base",
                    ceiling: RunReport | None = None, ceiling_row: str | None = None) -> dict:
    """
    Summary scores of one report row against the base row.

    relative_improvement is computed on the forward AVG, backward_transfer
    the same way on the backward AVG, forgetting per test set is the model
    row's error minus the best error of any earlier row. When a ceiling
    report is given, ceiling_fraction is the share of the ceiling's forward
    improvement that the model achieves. Undefined ratios are None and
    listed under "undefined".
    """
    for matrix in (report.forward, report.backward):
        if base_row not in matrix.values:
            raise ContractError(f"Report has no '{base_row}' row")
    model_row = model_row or report.forward.rows[-1]

    fwd_base, fwd_model = report.forward.avg(base_row), report.forward.avg(model_row)
    bwd_base, bwd_model = report.backward.avg(base_row), report.backward.avg(model_row)
    scores = {
        "model_row": model_row,
        "base_row": base_row,
        "forward_avg": {"base": fwd_base, "model": fwd_model},
        "backward_avg": {"base": bwd_base, "model": bwd_model},
        "relative_improvement": relative_improvement(fwd_base, fwd_model),
        "backward_transfer": relative_improvement(bwd_base, bwd_model),
        "forgetting": {
            "forward": _forgetting(report.forward, model_row),
            "backward": _forgetting(report.backward, model_row),
        },
        "ceiling_fraction": None,
        "undefined": [],
    }
    if ceiling is not None:
        ceiling_avg = ceiling.forward.avg(ceiling_row or ceiling.forward.rows[-1])
        gain_model = None if fwd_model is None else fwd_base - fwd_model
        gain_ceiling = None if ceiling_avg is None else fwd_base - ceiling_avg
        if gain_model is not None and gain_ceiling:
            scores["ceiling_fraction"] = gain_model / gain_ceiling
        else:
            scores["undefined"].append("ceiling_fraction")
    for key in ("relative_improvement", "backward_transfer"):
        if scores[key] is None:
            scores["undefined"].append(key)
    return scores


def published_reference_note() -> str:
    """Formula result on the published row averages next to the quoted figure."""
    computed = relative_improvement(PUBLISHED_BASE_AVG, PUBLISHED_CENTRALIZED_AVG)
    return (
        f"Published reference: relative_improvement({PUBLISHED_BASE_AVG}, {PUBLISHED_CENTRALIZED_AVG}) = "
        f"{computed * 100:.1f}% by this harness's formula; the quoted figure is "
        f"{PUBLISHED_QUOTED_IMPROVEMENT * 100:.1f}%. The two differ because the quoted value uses its own "
        f"averaging and rounding, which is not reproduced here."
    )


def merge_reports(reports: Sequence[RunReport], labels: Sequence[str] | None = None) -> tuple[MetricsMatrix, MetricsMatrix]:
    """
    Join several reports over the same suite into one forward and one backward table.

    A single report is returned as is; with several, row ids are prefixed
    with the run label.

    Raises:
    -------
    SuiteMismatchError
        If the reports were produced on different task suites or test sets
    """
    if len(reports) == 0:
        raise ContractError("merge_reports needs at least one report")
    first = reports[0]
    for report in reports[1:]:
        if report.suite_fingerprint != first.suite_fingerprint:
            raise SuiteMismatchError(
                f"Report '{report.method}' was produced on a different task suite than '{first.method}'"
            )
        if report.forward.cols != first.forward.cols or report.backward.cols != first.backward.cols:
            raise SuiteMismatchError(f"Report '{report.method}' evaluates different test sets than '{first.method}'")
    if len(reports) == 1:
        return first.forward, first.backward

    labels = list(labels) if labels is not None else [r.method for r in reports]
    forward, backward = MetricsMatrix(cols=list(first.forward.cols)), MetricsMatrix(cols=list(first.backward.cols))
    for label, report in zip(labels, reports):
        for row in report.forward.rows:
            forward.add_row(f"{label}/{row}", report.forward.values[row])
            backward.add_row(f"{label}/{row}", report.backward.values[row])
    return forward, backward
