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


import pytest

from factorxlite.config import SETTINGS
from factorxlite.LearningAPI.p002_optimizer import SgdConfig
from factorxlite.LearningAPI.p003_model import ModelConfig, init_model
from factorxlite.LearningAPI.p004_lora import LoraConfig
from factorxlite.LearningAPI.p005_taskgen import SuiteConfig, make_suite
from factorxlite.LearningAPI.p007_training import StreamSchedule

from support import TINY_STREAM


@pytest.fixture(autouse=True)
def quiet_logging(monkeypatch):
    """Keep test output clean; warnings and errors still print."""
    monkeypatch.setitem(SETTINGS["logging"], "verbose", False)
    monkeypatch.setitem(SETTINGS["logging"], "progress_bars", False)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(vocab_in=48, vocab_out=48, d_model=16, n_layers=1, n_heads=2,
                       d_ff=32, max_seq_len=8, seed=7)


@pytest.fixture
def tiny_kb(tiny_model_config):
    return init_model(tiny_model_config)


@pytest.fixture
def tiny_lora():
    return LoraConfig(rank=2, alpha=4.0, init_sigma=0.05)


@pytest.fixture
def tiny_suite_config():
    return SuiteConfig(
        n_languages=5, vocab_per_lang=8, seq_len=6,
        pretrain_samples_per_lang=40, pretrain_heldout_per_lang=10,
        monolingual_test_samples=20, stream_test_samples=20,
        heldout_fraction=0.2, min_untouched_languages=1,
        stream=TINY_STREAM, vocab_in=48, vocab_out=48,
    )


@pytest.fixture
def tiny_suite(tiny_suite_config):
    return make_suite(tiny_suite_config, seed=11)


@pytest.fixture
def tiny_schedule(tiny_lora):
    return StreamSchedule(
        datasets=tuple(spec.id for spec in TINY_STREAM),
        K=3, epochs_per_dataset=1, batch_size=16,
        sgd=SgdConfig(0.1, 0.01, 1.0), lora=tiny_lora,
        merge_base="current", early_stopping_patience=2, seed=5,
    )


@pytest.fixture
def log_capture():
    """Log callable recording (level, message) pairs."""
    records = []

    def log(message, level='info'):
        records.append((level, message))

    log.records = records
    return log
