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


from functools import lru_cache

import numpy as np
import pytest

from factorxlite.LearningAPI.p000_utility import ContractError, SuiteMismatchError
from factorxlite.LearningAPI.p001_tensor import no_grad, softmax_cross_entropy
from factorxlite.LearningAPI.p003_model import forward_batch, predict_batch
from factorxlite.LearningAPI.p004_lora import init_adapter
from factorxlite.LearningAPI.p005_taskgen import Dataset
from factorxlite.LearningAPI.p006_evaluation import (
    MetricsMatrix, RunReport, cumulative_risk, dataset_error_rate, evaluate_snapshot, mean_nll, merge_reports,
    published_reference_note, record_snapshot, relative_improvement, token_error_rate, transfer_scores,
)


def _edit_distance_oracle(a, b):
    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def _report(forward_rows, backward_rows, fingerprint="abc", method="centralized"):
    forward = MetricsMatrix(cols=["f1", "f2"])
    backward = MetricsMatrix(cols=["b1"])
    for row, cells in forward_rows.items():
        forward.add_row(row, cells)
    for row, cells in backward_rows.items():
        backward.add_row(row, cells)
    return RunReport(method=method, schedule={}, forward=forward, backward=backward, suite_fingerprint=fingerprint)


class TestTokenErrorRate:
    @pytest.mark.parametrize("ref, hyp, expected", [
        ([1, 2, 3], [1, 2, 3], 0.0),
        ([1, 2, 3], [1, 9, 3], 1 / 3),
        ([1], [2, 3, 4], 3.0),
        ([1, 2, 3], [], 1.0),
    ])
    def test_examples(self, ref, hyp, expected):
        assert token_error_rate(ref, hyp) == pytest.approx(expected)

    def test_empty_reference(self):
        with pytest.raises(ContractError):
            token_error_rate([], [1])

    def test_matches_recursive_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a = tuple(rng.integers(0, 4, size=rng.integers(1, 13)).tolist())
            b = tuple(rng.integers(0, 4, size=rng.integers(0, 13)).tolist())
            assert token_error_rate(a, b) * len(a) == pytest.approx(_edit_distance_oracle(a, b))

    def test_distance_is_a_metric_on_short_sequences(self):
        rng = np.random.default_rng(1)

        def dist(x, y):
            return round(token_error_rate(x, y) * len(x))

        for _ in range(200):
            a, b, c = (tuple(rng.integers(0, 3, size=rng.integers(1, 7)).tolist()) for _ in range(3))
            assert dist(a, b) == dist(b, a)
            assert dist(a, c) <= dist(a, b) + dist(b, c)

    def test_dataset_average(self):
        refs = np.array([[1, 2, 3], [4, 5, 6]])
        hyps = np.array([[1, 2, 3], [4, 0, 0]])
        assert dataset_error_rate(refs, hyps) == pytest.approx(1 / 3)


class TestSnapshots:
    def test_perfect_predictions_score_zero(self, tiny_kb, tiny_suite):
        # Arrange: relabel a test set with the model's own predictions
        source = tiny_suite.get("t0").test
        relabelled = Dataset("self", source.tokens, predict_batch(tiny_kb, source.tokens), "test")

        # Act
        row = evaluate_snapshot(tiny_kb, None, {"self": relabelled})

        # Assert
        assert row == {"self": 0.0}

    def test_zero_adapter_matches_base_row(self, tiny_kb, tiny_lora, tiny_suite):
        tests = tiny_suite.forward_tests()
        adapter = init_adapter(tiny_kb, tiny_lora, "t0", seed=0)
        assert evaluate_snapshot(tiny_kb, adapter, tests) == evaluate_snapshot(tiny_kb, None, tests)

    def test_evaluation_is_repeatable_and_read_only(self, tiny_kb, tiny_suite):
        before = tiny_kb.fingerprint()
        first = evaluate_snapshot(tiny_kb, None, tiny_suite.backward_tests)
        second = evaluate_snapshot(tiny_kb, None, tiny_suite.backward_tests)
        assert first == second
        assert tiny_kb.fingerprint() == before

    def test_no_test_sets(self, tiny_kb):
        with pytest.raises(ContractError):
            evaluate_snapshot(tiny_kb, None, {})

    def test_record_snapshot_fills_both_matrices(self, tiny_kb, tiny_suite):
        report = RunReport("centralized", {}, MetricsMatrix(cols=tiny_suite.stream_ids),
                           MetricsMatrix(cols=sorted(tiny_suite.backward_tests)))
        seen = [tiny_suite.get("t0").heldout]
        record_snapshot(report, "base", tiny_kb, None, tiny_suite.forward_tests(), tiny_suite.backward_tests,
                        seen=seen, step=1)
        assert report.forward.rows == ["base"] and report.backward.rows == ["base"]
        assert report.cumulative_risk[0]["datasets"] == ["t0"]


class TestCumulativeRisk:
    def test_single_dataset_is_its_mean_nll(self, tiny_kb, tiny_suite):
        ds = tiny_suite.get("t1").heldout
        assert cumulative_risk(tiny_kb, None, [ds]) == pytest.approx(mean_nll(tiny_kb, None, ds))

    def test_mean_nll_matches_cross_entropy(self, tiny_kb, tiny_suite):
        ds = tiny_suite.get("t1").test
        with no_grad():
            expected = np.mean([softmax_cross_entropy(forward_batch(tiny_kb, ds.tokens[i:i + 1]),
                                                      ds.labels[i:i + 1]).item() for i in range(len(ds))])
        assert mean_nll(tiny_kb, None, ds, chunk_size=7) == pytest.approx(expected, abs=1e-5)

    def test_adding_a_dataset_never_lowers_the_risk(self, tiny_kb, tiny_suite):
        seen = [tiny_suite.get(i).heldout for i in tiny_suite.stream_ids]
        values = [cumulative_risk(tiny_kb, None, seen[:n]) for n in range(1, len(seen) + 1)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_nothing_seen(self, tiny_kb):
        with pytest.raises(ContractError):
            cumulative_risk(tiny_kb, None, [])


class TestMetricsMatrix:
    def test_average_ignores_absent_cells(self):
        m = MetricsMatrix(cols=["a", "b", "c"])
        m.add_row("r", {"a": 0.2, "c": 0.4})
        assert m.get("r", "b") is None
        assert m.avg("r") == pytest.approx(0.3)

    def test_unknown_column(self):
        with pytest.raises(ContractError, match="zz"):
            MetricsMatrix(cols=["a"]).add_row("r", {"zz": 1.0})

    def test_dict_round_trip(self):
        m = MetricsMatrix(cols=["a", "b"])
        m.add_row("base", {"a": 0.5, "b": 0.25})
        m.add_row("next", {"a": 0.1})
        again = MetricsMatrix.from_dict(m.to_dict())
        assert again == m
        assert m.to_dict()["avg"] == {"base": 0.375, "next": 0.1}

    def test_csv_rows_carry_the_average(self):
        m = MetricsMatrix(cols=["a", "b"])
        m.add_row("base", {"a": 0.5, "b": 0.25})
        rows = m.csv_rows("forward")
        assert rows[0] == ["matrix", "row", "a", "b", "AVG"]
        assert float(rows[1][-1]) == pytest.approx(np.mean([float(v) for v in rows[1][2:-1]]))


class TestScores:
    def test_published_row_averages(self):
        assert relative_improvement(39.4, 28.7) == pytest.approx(0.272, abs=5e-4)

    def test_zero_base_is_undefined(self):
        assert relative_improvement(0.0, 0.1) is None

    def test_model_equal_to_base(self):
        report = _report({"base": {"f1": 0.4, "f2": 0.2}, "centralized:1": {"f1": 0.4, "f2": 0.2}},
                         {"base": {"b1": 0.1}, "centralized:1": {"b1": 0.1}})
        scores = transfer_scores(report)
        assert scores["relative_improvement"] == 0.0
        assert scores["backward_transfer"] == 0.0

    def test_hand_built_report(self):
        # Arrange
        report = _report(
            {"base": {"f1": 0.5, "f2": 0.3}, "adapter:x": {"f1": 0.1, "f2": 0.3}, "centralized:1": {"f1": 0.2, "f2": 0.2}},
            {"base": {"b1": 0.1}, "adapter:x": {"b1": 0.2}, "centralized:1": {"b1": 0.15}},
        )
        ceiling = _report({"base": {"f1": 0.5, "f2": 0.3}, "ceiling:all": {"f1": 0.1, "f2": 0.1}},
                          {"base": {"b1": 0.1}, "ceiling:all": {"b1": 0.1}}, method="ceiling")

        # Act
        scores = transfer_scores(report, ceiling=ceiling)

        # Assert
        assert scores["model_row"] == "centralized:1"
        assert scores["relative_improvement"] == pytest.approx((0.4 - 0.2) / 0.4)
        assert scores["backward_transfer"] == pytest.approx((0.1 - 0.15) / 0.1)
        assert scores["forgetting"]["forward"]["f1"] == pytest.approx(0.1)
        assert scores["forgetting"]["forward"]["f2"] == pytest.approx(-0.1)
        assert scores["forgetting"]["backward"]["b1"] == pytest.approx(0.05)
        assert scores["ceiling_fraction"] == pytest.approx(0.2 / 0.3)
        assert scores["undefined"] == []

    def test_missing_base_row(self):
        report = _report({"x": {"f1": 0.1}}, {"x": {"b1": 0.1}})
        with pytest.raises(ContractError):
            transfer_scores(report)

    def test_reference_note_quotes_both_figures(self):
        note = published_reference_note()
        assert "27.2%" in note and "24.6%" in note


class TestMergeReports:
    def test_single_report_is_returned_unchanged(self):
        report = _report({"base": {"f1": 0.1, "f2": 0.2}}, {"base": {"b1": 0.3}})
        forward, backward = merge_reports([report])
        assert forward is report.forward and backward is report.backward

    def test_rows_are_prefixed_with_labels(self):
        a = _report({"base": {"f1": 0.1, "f2": 0.2}}, {"base": {"b1": 0.3}})
        b = _report({"base": {"f1": 0.1, "f2": 0.2}, "sequential:x": {"f1": 0.0}}, {"base": {"b1": 0.3}},
                    method="naive")
        forward, _ = merge_reports([a, b], labels=["run1", "run2"])
        assert forward.rows == ["run1/base", "run2/base", "run2/sequential:x"]

    def test_different_suites_are_rejected(self):
        a = _report({"base": {"f1": 0.1}}, {"base": {"b1": 0.3}}, fingerprint="one")
        b = _report({"base": {"f1": 0.1}}, {"base": {"b1": 0.3}}, fingerprint="two")
        with pytest.raises(SuiteMismatchError):
            merge_reports([a, b])
