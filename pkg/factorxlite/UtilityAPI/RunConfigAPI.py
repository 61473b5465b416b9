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
from dataclasses import dataclass, field

from ..config import SETTINGS
from ..LearningAPI.p000_utility import ConfigError, deep_merge, derive_seed
from ..LearningAPI.p002_optimizer import SgdConfig
from ..LearningAPI.p003_model import ModelConfig
from ..LearningAPI.p004_lora import LoraConfig
from ..LearningAPI.p005_taskgen import SuiteConfig
from ..LearningAPI.p007_training import MERGE_BASES, PretrainConfig, StreamSchedule
from ..LearningAPI.p008_continual.p008_03_baselines import SwadtConfig
from .DataValidationAPI import FactorXDataTypesManager


METHODS = ("centralized", "swadt", "naive", "ceiling")

SETTINGS_SCHEMA = {
    "logging": {"verbose": "bool", "debug": "bool", "progress_bars": "bool"},
    "model": {
        "vocab_in": "int", "vocab_out": "int", "d_model": "int", "n_layers": "int",
        "n_heads": "int", "d_ff": "int", "max_seq_len": "int", "use_positions": "bool",
    },
    "lora": {"rank": "int", "alpha": "number", "init_sigma": "number", "target_layers": "optional(list(str))"},
    "sgd": {"learning_rate": "number", "weight_decay": "number", "grad_clip_norm": "optional(number)"},
    "schedule": {
        "K": "int", "epochs_per_dataset": "int", "batch_size": "int",
        "merge_base": "str", "early_stopping_patience": "optional(int)",
    },
    "swadt": {"ema_beta": "number", "distill_weight": "number", "distill_temperature": "number"},
    "pretrain": {
        "epochs": "int", "batch_size": "int", "learning_rate": "number", "weight_decay": "number",
        "grad_clip_norm": "optional(number)", "target_error": "number",
        "stop_at_target": "bool",
    },
    "suite": {
        "n_languages": "int", "vocab_per_lang": "int", "seq_len": "int",
        "pretrain_samples_per_lang": "int", "pretrain_heldout_per_lang": "int",
        "monolingual_test_samples": "int", "stream_test_samples": "int",
        "heldout_fraction": "number", "min_untouched_languages": "int",
        "stream": "list(stream_task)",
    },
    "evaluation": {"sparsity_eps": "number", "relative_sparsity": "bool"},
    "io": {"output_dir": "str", "output_root_env": "str"},
    "method": "str",
    "seed": "int",
}


def _validator() -> FactorXDataTypesManager:
    manager = FactorXDataTypesManager()
    manager.register_custom_structure("stream_task", {
        "id": "str", "pair": "list(int)", "mix_ratio": "number", "rho": "number", "n_samples": "int",
    })
    manager.type_checkers["list(stream_task)"] = lambda x: manager._check_list_type(x, "stream_task")
    return manager


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; reproducible from this document plus the code version."""
    model: ModelConfig
    lora: LoraConfig
    sgd: SgdConfig
    swadt: SwadtConfig
    pretrain: PretrainConfig
    suite: SuiteConfig
    schedule: dict
    evaluation: dict
    output_dir: str
    method: str
    seed: int
    settings: dict = field(repr=False, compare=False, default_factory=dict)

    @property
    def suite_seed(self) -> int:
        return derive_seed(self.seed, "suite")

    @property
    def pretrain_seed(self) -> int:
        return derive_seed(self.seed, "pretrain")

    @property
    def stream_seed(self) -> int:
        return derive_seed(self.seed, "stream")

    def stream_schedule(self, datasets=None, K: int | None = None, merge_base: str | None = None) -> StreamSchedule:
        datasets = tuple(datasets) if datasets is not None else tuple(task.id for task in self.suite.stream)
        return StreamSchedule(
            datasets=datasets,
            K=self.schedule["K"] if K is None else K,
            epochs_per_dataset=self.schedule["epochs_per_dataset"],
            batch_size=self.schedule["batch_size"],
            sgd=self.sgd,
            lora=self.lora,
            merge_base=self.schedule["merge_base"] if merge_base is None else merge_base,
            early_stopping_patience=self.schedule["early_stopping_patience"],
            seed=self.stream_seed,
        )

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self.settings))


def build_run_config(settings: dict) -> RunConfig:
    """
    Validate a complete settings document and build the typed configuration.

    Raises:
    -------
    ConfigError
        Naming the offending key
    """
    values = _validator().validate_section(settings, SETTINGS_SCHEMA)
    if values["method"] not in METHODS:
        raise ConfigError(f"Invalid value for 'method': '{values['method']}', expected one of {METHODS}")
    if values["schedule"]["merge_base"] not in MERGE_BASES:
        raise ConfigError(f"Invalid value for 'schedule.merge_base': '{values['schedule']['merge_base']}'")

    seed = values["seed"]
    model = ModelConfig(**values["model"], seed=derive_seed(seed, "model"))
    lora = values["lora"]
    return RunConfig(
        model=model,
        lora=LoraConfig(lora["rank"], lora["alpha"], lora["init_sigma"],
                        None if lora["target_layers"] is None else tuple(lora["target_layers"])),
        sgd=SgdConfig.from_dict(values["sgd"]),
        swadt=SwadtConfig(**values["swadt"]),
        pretrain=PretrainConfig.from_dict(values["pretrain"]),
        suite=SuiteConfig.from_dict(values["suite"], model.vocab_in, model.vocab_out),
        schedule=values["schedule"],
        evaluation=values["evaluation"],
        output_dir=values["io"]["output_dir"],
        method=values["method"],
        seed=seed,
        settings=settings,
    )


def load_run_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """
    Read a JSON run configuration, merge it over the SETTINGS defaults and validate it.

    The environment variable named by SETTINGS["io"]["output_root_env"]
    replaces the output directory when set.

    Parameters:
    -----------
    path : str, optional
        JSON document; None uses the defaults alone
    overrides : dict, optional
        Further nested overrides applied after the file

    Raises:
    -------
    ConfigError
        For unreadable JSON, unknown keys or invalid values
    FileNotFoundError
        If the path does not exist
    """
    defaults = {k: v for k, v in SETTINGS.items() if not k.startswith("_")}
    document = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
        try:
            document = json.loads(text)
        except json.JSONDecodeError as error:
            raise ConfigError(f"Cannot parse '{path}': {error.msg} at line {error.lineno}, column {error.colno}") from error
        if not isinstance(document, dict):
            raise ConfigError(f"'{path}' must contain a JSON object at the top level")
    settings = deep_merge(defaults, document)
    if overrides:
        settings = deep_merge(settings, overrides)

    env_name = settings["io"]["output_root_env"]
    if os.environ.get(env_name):
        settings["io"]["output_dir"] = os.environ[env_name]
    return build_run_config(settings)
