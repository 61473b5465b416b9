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


import json
import os
import struct

import pytest

from factorxlite.FactorXLiteApp import (
    EXIT_CONFIG, EXIT_MISSING_CHECKPOINT, EXIT_OK, EXIT_SUITE_MISMATCH, main,
)
from factorxlite.LearningAPI.p006_evaluation import MetricsMatrix, RunReport
from factorxlite.LearningAPI.p008_continual.p008_04_experiment_io import load_report, read_json, save_report

from support import TINY_STREAM


@pytest.fixture(autouse=True)
def no_output_root(monkeypatch):
    monkeypatch.delenv("FACTORXLITE_OUTPUT_ROOT", raising=False)


@pytest.fixture
def tiny_config(tmp_path):
    document = {
        "logging": {"verbose": False, "progress_bars": False},
        "model": {"vocab_in": 48, "vocab_out": 48, "d_model": 16, "n_layers": 1, "n_heads": 2,
                  "d_ff": 32, "max_seq_len": 8},
        "lora": {"rank": 2, "alpha": 4.0},
        "schedule": {"epochs_per_dataset": 1, "batch_size": 16},
        "pretrain": {"epochs": 1, "batch_size": 20},
        "suite": {
            "n_languages": 5, "vocab_per_lang": 8, "seq_len": 6,
            "pretrain_samples_per_lang": 40, "pretrain_heldout_per_lang": 10,
            "monolingual_test_samples": 20, "stream_test_samples": 20,
            "heldout_fraction": 0.2, "min_untouched_languages": 1,
            "stream": [spec.to_dict() for spec in TINY_STREAM],
        },
        "io": {"output_dir": str(tmp_path / "runs")},
    }
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(document), encoding="utf-8")
    return str(path)


@pytest.fixture
def pretrained(tiny_config, tmp_path):
    assert main(["pretrain", "--config", tiny_config]) == EXIT_OK
    return str(tmp_path / "runs" / "knowledge_base.clkb")


def _report_dir(tmp_path, name, fingerprint):
    forward = MetricsMatrix(cols=["t0"])
    forward.add_row("base", {"t0": 0.5})
    backward = MetricsMatrix(cols=["L3"])
    backward.add_row("base", {"L3": 0.1})
    directory = tmp_path / name
    save_report(RunReport(name, {}, forward, backward, suite_fingerprint=fingerprint), str(directory))
    return str(directory)


class TestExitCodes:
    def test_unparseable_config(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        assert main(["pretrain", "--config", str(path)]) == EXIT_CONFIG

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"model": {"width": 3}}), encoding="utf-8")
        assert main(["stream", "--config", str(path)]) == EXIT_CONFIG

    def test_missing_checkpoint(self, tiny_config, tmp_path):
        code = main(["stream", "--config", tiny_config, "--checkpoint", str(tmp_path / "absent.clkb")])
        assert code == EXIT_MISSING_CHECKPOINT

    def test_corrupt_checkpoint(self, tiny_config, tmp_path):
        path = tmp_path / "corrupt.clkb"
        path.write_bytes(b"not a checkpoint at all")
        assert main(["stream", "--config", tiny_config, "--checkpoint", str(path)]) == EXIT_MISSING_CHECKPOINT

    def test_checkpoint_with_undecodable_layer_name(self, tiny_config, tmp_path):
        path = tmp_path / "badname.clkb"
        metadata = b"{}"
        path.write_bytes(b"CLKB" + struct.pack("<I", 1) + struct.pack("<I", len(metadata)) + metadata
                         + struct.pack("<I", 2) + b"\xff\xfe")
        assert main(["stream", "--config", tiny_config, "--checkpoint", str(path)]) == EXIT_MISSING_CHECKPOINT

    def test_reports_from_different_suites(self, tmp_path):
        a = _report_dir(tmp_path, "naive", "one")
        b = _report_dir(tmp_path, "swadt", "two")
        assert main(["report", a, b, "--no-plots"]) == EXIT_SUITE_MISMATCH

    def test_missing_report(self, tmp_path):
        assert main(["report", str(tmp_path / "nothing"), "--no-plots"]) == EXIT_CONFIG


class TestPipeline:
    def test_pretrain_writes_checkpoint_and_evaluation(self, pretrained):
        assert os.path.exists(pretrained)
        evaluation = read_json(pretrained.replace(".clkb", "_eval.json"))
        assert sorted(evaluation["backward"]) == ["L0", "L1", "L2", "L3", "L4"]
        assert len(evaluation["training"]["epoch_losses"]) == 1

    def test_pretraining_twice_writes_identical_checkpoints(self, tiny_config, tmp_path):
        first, second = tmp_path / "first.clkb", tmp_path / "second.clkb"
        assert main(["pretrain", "--config", tiny_config, "--output", str(first)]) == EXIT_OK
        assert main(["pretrain", "--config", tiny_config, "--output", str(second)]) == EXIT_OK
        assert first.read_bytes() == second.read_bytes()

    def test_stream_and_report(self, tiny_config, pretrained, tmp_path, capsys):
        # Arrange
        run_dir = tmp_path / "centralized"
        ceiling_dir = tmp_path / "ceiling"

        # Act
        assert main(["stream", "--config", tiny_config, "--k", "3", "--run-dir", str(run_dir)]) == EXIT_OK
        assert main(["stream", "--config", tiny_config, "--method", "ceiling", "--run-dir", str(ceiling_dir)]) == EXIT_OK
        capsys.readouterr()
        code = main(["report", str(run_dir), str(ceiling_dir), "--output", str(tmp_path / "cmp")])

        # Assert
        assert code == EXIT_OK
        report = load_report(str(run_dir))
        assert report.rows_with_prefix("centralized:") == ["centralized:1", "centralized:2"]
        assert (run_dir / "suite" / "manifest.json").exists()
        comparison = read_json(str(tmp_path / "cmp" / "comparison.json"))
        assert comparison["runs"] == ["centralized", "ceiling"]
        assert "centralized/centralized:2" in comparison["forward"]["rows"]
        assert comparison["transfer_scores"]["centralized"]["ceiling_fraction"] is not None \
            or "ceiling_fraction" in comparison["transfer_scores"]["centralized"]["undefined"]
        assert (tmp_path / "cmp" / "comparison.csv").exists()
        assert os.listdir(tmp_path / "cmp" / "plots")
        out = capsys.readouterr().out
        assert "27.2%" in out and "24.6%" in out

    def test_period_longer_than_stream_warns(self, tiny_config, pretrained, tmp_path, capsys):
        run_dir = tmp_path / "k7"
        assert main(["stream", "--config", tiny_config, "--k", "7", "--run-dir", str(run_dir)]) == EXIT_OK
        assert "no centralization" in capsys.readouterr().out
        assert load_report(str(run_dir)).rows_with_prefix("centralized:") == []

    def test_same_configuration_reproduces_the_report(self, tiny_config, pretrained, tmp_path):
        for name in ("first", "second"):
            assert main(["stream", "--config", tiny_config, "--method", "naive",
                         "--run-dir", str(tmp_path / name)]) == EXIT_OK
        first, second = load_report(str(tmp_path / "first")), load_report(str(tmp_path / "second"))
        assert first.forward == second.forward
        assert first.backward == second.backward

    def test_single_run_report_matches_the_run(self, tiny_config, pretrained, tmp_path):
        run_dir = tmp_path / "naive"
        main(["stream", "--config", tiny_config, "--method", "naive", "--run-dir", str(run_dir)])
        assert main(["report", str(run_dir), "--no-plots"]) == EXIT_OK
        comparison = read_json(str(run_dir / "comparison.json"))
        assert comparison["forward"] == load_report(str(run_dir)).forward.to_dict()
