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


import numpy as np
import pytest

from factorxlite.LearningAPI.p000_utility import ConfigError, derive_seed
from factorxlite.LearningAPI.p007_training import StreamSchedule, train_adapter
from factorxlite.LearningAPI.p008_continual.p008_03_baselines import (
    ExponentialWeightAverager, SwadtConfig, multitask_ceiling, naive_sequential, swadt_run_stream,
)

from support import random_adapter


def quiet(*args, **kwargs):
    pass


def _schedule(base, **overrides):
    return StreamSchedule(**{**base.__dict__, **overrides})


class TestExponentialWeightAverager:
    def test_beta_one_keeps_the_initial_value(self):
        ema = ExponentialWeightAverager(1.0, {"w": np.array([2.0])})
        for value in (5.0, -3.0, 7.0):
            ema.update({"w": np.array([value])})
        assert ema.average["w"][0] == 2.0

    def test_beta_zero_tracks_the_latest_value(self):
        ema = ExponentialWeightAverager(0.0, {"w": np.array([2.0])})
        ema.update({"w": np.array([5.0])})
        ema.update({"w": np.array([-1.5])})
        assert ema.average["w"][0] == -1.5

    def test_half_decay_example(self):
        ema = ExponentialWeightAverager(0.5, {"w": np.array([0.0])})
        ema.update({"w": np.array([1.0])})
        assert ema.average["w"][0] == pytest.approx(0.5)
        ema.update({"w": np.array([2.0])})
        assert ema.average["w"][0] == pytest.approx(1.25)

    def test_matches_closed_form(self):
        # Arrange
        rng = np.random.default_rng(0)
        initial = rng.normal(size=(3, 4))
        trajectory = [rng.normal(size=(3, 4)) for _ in range(50)]
        ema = ExponentialWeightAverager(0.9, {"w": initial})

        # Act
        for theta in trajectory:
            ema.update({"w": theta})

        # Assert
        expected = ExponentialWeightAverager.closed_form(0.9, initial, trajectory)
        assert np.max(np.abs(ema.average["w"] - expected)) < 1e-5
        assert ema.steps == 50

    def test_beta_out_of_range(self):
        with pytest.raises(ConfigError):
            ExponentialWeightAverager(1.5, {})

    def test_adapter_round_trip(self, tiny_kb, tiny_lora):
        adapter = random_adapter(tiny_kb, tiny_lora, 3)
        ema = ExponentialWeightAverager.from_adapter(0.5, adapter)
        assert ema.to_adapter(adapter).fingerprint() == adapter.fingerprint()


class TestSwadtConfig:
    @pytest.mark.parametrize("kwargs", [
        {"ema_beta": -0.1}, {"ema_beta": 1.1}, {"distill_weight": -1.0}, {"distill_temperature": 0.0},
    ])
    def test_invalid_values(self, kwargs):
        with pytest.raises(ConfigError):
            SwadtConfig(**kwargs)


class TestSequentialBaselines:
    def test_naive_rows_and_frozen_base(self, tiny_kb, tiny_suite, tiny_schedule):
        schedule = _schedule(tiny_schedule, datasets=("t0", "t1", "t2"))
        report = naive_sequential(tiny_kb, schedule, tiny_suite, log=quiet)
        assert report.method == "naive"
        assert report.forward.rows == ["base", "sequential:t0", "sequential:t1", "sequential:t2"]
        assert report.artifacts["kb"].fingerprint() == tiny_kb.fingerprint()

    def test_naive_on_one_dataset_is_plain_adapter_training(self, tiny_kb, tiny_suite, tiny_schedule):
        # Arrange
        schedule = _schedule(tiny_schedule, datasets=("t2",))
        splits = tiny_suite.get("t2")

        # Act
        report = naive_sequential(tiny_kb, schedule, tiny_suite, log=quiet)
        expected, _ = train_adapter(tiny_kb, splits.train, schedule, derive_seed(schedule.seed, "adapter", "t2"),
                                    heldout=splits.heldout, log=quiet)

        # Assert
        assert report.artifacts["adapter"].fingerprint() == expected.fingerprint()

    def test_swadt_without_averaging_or_distillation_is_naive(self, tiny_kb, tiny_suite, tiny_schedule):
        schedule = _schedule(tiny_schedule, datasets=("t0", "t1", "t2"))
        naive = naive_sequential(tiny_kb, schedule, tiny_suite, log=quiet)
        swadt = swadt_run_stream(tiny_kb, schedule, tiny_suite, SwadtConfig(0.0, 0.0, 2.0), log=quiet)
        assert swadt.forward == naive.forward
        assert swadt.backward == naive.backward

    def test_swadt_averages_once_per_optimizer_step(self, tiny_kb, tiny_suite, tiny_schedule):
        # Arrange
        schedule = _schedule(tiny_schedule, datasets=("t0", "t1", "t2"), epochs_per_dataset=4,
                             early_stopping_patience=1)

        # Act
        report = swadt_run_stream(tiny_kb, schedule, tiny_suite, SwadtConfig(0.9, 0.5, 2.0), log=quiet)

        # Assert
        steps = sum(entry["training"]["steps"] for entry in report.history if entry["event"] == "adapter")
        assert report.artifacts["averager"].steps == steps

    def test_swadt_records_its_settings(self, tiny_kb, tiny_suite, tiny_schedule):
        schedule = _schedule(tiny_schedule, datasets=("t0", "t1"))
        report = swadt_run_stream(tiny_kb, schedule, tiny_suite, SwadtConfig(0.9, 0.5, 2.0), log=quiet)
        assert report.method == "swadt"
        assert report.schedule["swadt"] == {"ema_beta": 0.9, "distill_weight": 0.5, "distill_temperature": 2.0}
        assert report.rows_with_prefix("sequential:") == ["sequential:t0", "sequential:t1"]
        assert len(report.cumulative_risk) == 2


class TestCeiling:
    def test_pools_every_scheduled_dataset(self, tiny_kb, tiny_suite, tiny_schedule):
        report = multitask_ceiling(tiny_kb, _schedule(tiny_schedule, datasets=("t0", "t1", "t2")), tiny_suite,
                                   log=quiet)
        assert report.forward.rows == ["base", "ceiling:pooled"]
        assert report.cumulative_risk[0]["datasets"] == ["t0", "t1", "t2"]

    def test_one_dataset_reduces_to_plain_adapter_training(self, tiny_kb, tiny_suite, tiny_schedule):
        schedule = _schedule(tiny_schedule, datasets=("t1",))
        splits = tiny_suite.get("t1")
        report = multitask_ceiling(tiny_kb, schedule, tiny_suite, log=quiet)
        expected, _ = train_adapter(tiny_kb, splits.train, schedule, derive_seed(schedule.seed, "adapter", "t1"),
                                    heldout=splits.heldout, log=quiet)
        assert report.forward.rows == ["base", "ceiling:t1"]
        assert report.artifacts["adapter"].fingerprint() == expected.fingerprint()
