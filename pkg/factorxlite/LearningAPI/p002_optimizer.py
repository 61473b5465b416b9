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


from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .p000_utility import ConfigError, ContractError
from .p001_tensor import Tensor


@dataclass(frozen=True)
class SgdConfig:
    """Plain SGD with decoupled-from-momentum weight decay and optional global-norm clipping."""
    learning_rate: float = 0.1
    weight_decay: float = 0.0
    grad_clip_norm: float | None = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ConfigError(f"grad_clip_norm must be positive or None, got {self.grad_clip_norm}")

    @classmethod
    def from_dict(cls, values: dict) -> "SgdConfig":
        return cls(
            learning_rate=float(values["learning_rate"]),
            weight_decay=float(values["weight_decay"]),
            grad_clip_norm=None if values.get("grad_clip_norm") is None else float(values["grad_clip_norm"]),
        )

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "grad_clip_norm": self.grad_clip_norm,
        }


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64)
            total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return float(np.sqrt(total))


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """
    Rescale gradients in place so their global L2 norm is at most max_norm.

    Returns:
    --------
    float
        The norm before clipping
    """
    params = list(params)
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.data.dtype)
    return norm


def sgd_step(params: Iterable[Tensor], cfg: SgdConfig):
    """
    One update w <- w - lr * (grad + weight_decay * w), then clear the gradients.

    Tensors flagged no_decay (biases, normalization gains) skip the decay term.

    Raises:
    -------
    ContractError
        If any parameter has no gradient
    """
    params = list(params)
    missing = [p.name or repr(p) for p in params if p.grad is None]
    if missing:
        raise ContractError(f"sgd_step called before backward: no gradient for {', '.join(missing)}")

    if cfg.grad_clip_norm is not None:
        clip_grad_norm(params, cfg.grad_clip_norm)

    for p in params:
        update = p.grad.astype(np.float64)
        if cfg.weight_decay and not p.no_decay:
            update = update + cfg.weight_decay * p.data.astype(np.float64)
        p.data = (p.data.astype(np.float64) - cfg.learning_rate * update).astype(p.data.dtype)
        p.grad = None
