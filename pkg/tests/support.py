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


"""Helpers shared by several test modules."""
import numpy as np

from factorxlite.LearningAPI.p001_tensor import Tensor
from factorxlite.LearningAPI.p004_lora import init_adapter
from factorxlite.LearningAPI.p005_taskgen import StreamTaskSpec


TINY_STREAM = (
    StreamTaskSpec("t0", (0, 1), 0.5, 0.5, 30),
    StreamTaskSpec("t1", (1, 2), 0.5, 0.5, 30),
    StreamTaskSpec("t2", (0, 2), 0.6, 0.4, 30),
    StreamTaskSpec("t3", (0, 1), 0.4, 0.6, 30),
    StreamTaskSpec("t4", (1, 2), 0.5, 0.5, 30),
    StreamTaskSpec("t5", (0, 2), 0.5, 0.5, 30),
)


def random_adapter(kb, lora, seed, dataset_id="random", scale=0.1):
    """Adapter with both factors random, so its composed delta is non-zero."""
    adapter = init_adapter(kb, lora, dataset_id, seed)
    rng = np.random.default_rng(seed + 1)
    for name in adapter.layer_names:
        _, B = adapter.factors[name]
        B.data = rng.normal(0.0, scale, size=B.shape).astype(np.float32)
    return adapter


def numeric_grad(loss_fn, tensor: Tensor, indices, eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar loss at selected flat coordinates."""
    flat = tensor.data.reshape(-1)
    out = np.zeros(len(indices))
    for k, i in enumerate(indices):
        original = flat[i]
        flat[i] = original + eps
        plus = loss_fn()
        flat[i] = original - eps
        minus = loss_fn()
        flat[i] = original
        out[k] = (plus - minus) / (2 * eps)
    return out
