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


from dataclasses import dataclass, field, replace

import numpy as np

from ..p000_utility import ContractError
from ..p003_model import KnowledgeBase
from ..p004_lora import (
    DeltaSet, LoraAdapter, LoraConfig, average_deltas, compose_delta, lora_merge, sparsity_summary,
)


@dataclass
class CentralizationState:
    """
    Running record of the stream between merges.

    running_sum holds the sum of every composed delta since the stream
    started (float64); recent_adapters holds at most K factorized adapters.
    """
    running_sum: DeltaSet
    K: int
    t: int = 0
    recent_adapters: list[LoraAdapter] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    peak_stored: int = 0
    merges: int = 0

    @classmethod
    def empty(cls, kb: KnowledgeBase, lora: LoraConfig, K: int) -> "CentralizationState":
        if K < 1:
            raise ContractError(f"Centralization period K must be >= 1, got {K}")
        layers = {name: np.zeros(kb.params[name].shape, dtype=np.float64) for name in lora.resolve_targets(kb)}
        return cls(running_sum=DeltaSet(layers), K=int(K))

    def delta_avg(self) -> DeltaSet:
        """running_sum / t in the dtype of the base weights."""
        if self.t == 0:
            raise ContractError("No adapters accumulated yet (t == 0)")
        return (self.running_sum * (1.0 / self.t)).astype(np.float32)

    def due(self) -> bool:
        return self.t > 0 and self.t % self.K == 0 and len(self.recent_adapters) > 0


def incremental_update(state: CentralizationState, adapter: LoraAdapter) -> CentralizationState:
    """
    running_sum += compose_delta(adapter), t += 1, adapter kept until the next merge.

    Returns a new state; the input state is not modified.

    Raises:
    -------
    ContractError
        If K adapters are already stored (a merge is overdue)
    DimensionError
        If the adapter's layers do not match the running sum
    """
    if len(state.recent_adapters) >= state.K:
        raise ContractError(
            f"{len(state.recent_adapters)} adapters already stored with K={state.K}; centralize before adding more"
        )
    running_sum = state.running_sum + compose_delta(adapter).astype(np.float64)
    recent = state.recent_adapters + [adapter]
    return replace(
        state,
        running_sum=running_sum,
        t=state.t + 1,
        recent_adapters=recent,
        history=list(state.history),
        peak_stored=max(state.peak_stored, len(recent)),
    )


def centralize(kb: KnowledgeBase, state: CentralizationState, merge_base: str = "current",
               original_kb: KnowledgeBase | None = None, eps: float = 1e-3,
               relative_sparsity: bool = True) -> tuple[KnowledgeBase, CentralizationState]:
    """
    Merge the mean of every delta seen so far into the knowledge base.

    Parameters:
    -----------
    kb : KnowledgeBase
        Current knowledge base
    state : CentralizationState
        Accumulated deltas, t >= 1
    merge_base : str
        'current' merges into kb; 'original' merges into original_kb
    original_kb : KnowledgeBase, optional
        Knowledge base at stream start, required for merge_base='original'
    eps : float
        Sparsity threshold recorded in the history
    relative_sparsity : bool
        Also record sparsity relative to the magnitude of the base weights

    Returns:
    --------
    tuple
        (new knowledge base with version kb.version + 1, new state with the stored adapters released)

    Raises:
    -------
    ContractError
        If t == 0 or the original knowledge base is missing
    """
    if state.t == 0:
        raise ContractError("centralize called before any adapter was trained (t == 0)")
    if merge_base == "current":
        base = kb
    elif merge_base == "original":
        if original_kb is None:
            raise ContractError("merge_base='original' needs the stream's original knowledge base")
        base = original_kb
    else:
        raise ContractError(f"Unknown merge_base '{merge_base}'")

    delta = state.delta_avg()
    merged = lora_merge(base, delta)
    merged.version = kb.version + 1

    entry = {
        "merge": state.merges + 1,
        "t": state.t,
        "merge_base": merge_base,
        **sparsity_summary(delta, eps, base, relative_sparsity),
        "norm": delta.frobenius_norm(),
        "kb_version": merged.version,
    }
    new_state = replace(
        state,
        recent_adapters=[],
        history=list(state.history) + [entry],
        merges=state.merges + 1,
    )
    return merged, new_state


def naive_mean_delta(adapters: list[LoraAdapter]) -> DeltaSet:
    """Store-all reference: mean of the composed deltas of every adapter."""
    return average_deltas([compose_delta(adapter) for adapter in adapters])
