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


INFO = {
    "version": "1.0.0",
    "name": "FactorXLite",
}

SETTINGS = {
    "_version": INFO["version"],

    "logging": {
        "verbose": True,
        "debug": False,
        "progress_bars": True,
    },

    "model": {
        "vocab_in": 256,
        "vocab_out": 256,
        "d_model": 64,
        "n_layers": 2,
        "n_heads": 2,
        "d_ff": 128,
        "max_seq_len": 32,
        "use_positions": True,
    },

    "lora": {
        "rank": 4,
        "alpha": 8.0,
        "init_sigma": 0.02,
        # None selects every attention W_q and W_k of the knowledge base
        "target_layers": None,
    },

    "sgd": {
        "learning_rate": 0.1,
        "weight_decay": 0.01,
        "grad_clip_norm": 1.0,
    },

    "schedule": {
        "K": 3,
        "epochs_per_dataset": 4,
        "batch_size": 32,
        # 'original' merges every average into the pretrained weights; 'current' into the latest merge
        "merge_base": "original",
        "early_stopping_patience": 2,
    },

    "swadt": {
        "ema_beta": 0.999,
        "distill_weight": 1.0,
        "distill_temperature": 2.0,
    },

    "pretrain": {
        "epochs": 30,
        "batch_size": 32,
        "learning_rate": 0.3,
        "weight_decay": 0.0001,
        "grad_clip_norm": 1.0,
        "target_error": 0.02,
        "stop_at_target": False,
    },

    "suite": {
        "n_languages": 8,
        "vocab_per_lang": 24,
        "seq_len": 12,
        "pretrain_samples_per_lang": 2000,
        "pretrain_heldout_per_lang": 100,
        "monolingual_test_samples": 200,
        "stream_test_samples": 200,
        "heldout_fraction": 0.1,
        "min_untouched_languages": 3,
        # Six code-switching datasets over five of the eight languages
        "stream": [
            {"id": "cs-L0-L1", "pair": [0, 1], "mix_ratio": 0.5, "rho": 0.5, "n_samples": 2000},
            {"id": "cs-L0-L2", "pair": [0, 2], "mix_ratio": 0.6, "rho": 0.5, "n_samples": 4000},
            {"id": "cs-L0-L3", "pair": [0, 3], "mix_ratio": 0.5, "rho": 0.4, "n_samples": 1500},
            {"id": "cs-L2-L4", "pair": [2, 4], "mix_ratio": 0.5, "rho": 0.5, "n_samples": 1000},
            {"id": "cs-L1-L3", "pair": [1, 3], "mix_ratio": 0.4, "rho": 0.6, "n_samples": 1200},
            {"id": "cs-L0-L4", "pair": [0, 4], "mix_ratio": 0.5, "rho": 0.5, "n_samples": 3000},
        ],
    },

    "evaluation": {
        "sparsity_eps": 1e-3,
        "relative_sparsity": True,
    },

    "io": {
        "output_dir": "factorx_runs",
        "output_root_env": "FACTORXLITE_OUTPUT_ROOT",
    },

    # centralized, swadt, naive or ceiling
    "method": "centralized",

    "seed": 20250101,
}
