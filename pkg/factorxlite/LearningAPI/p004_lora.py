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
from typing import Iterable, Sequence

import numpy as np

from .p000_utility import (
    AdapterCompatibilityError, ConfigError, ContractError, DimensionError, fingerprint_arrays,
)
from .p001_tensor import Tensor
from .p003_model import KnowledgeBase


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    alpha: float = 8.0
    init_sigma: float = 0.02
    # None selects the knowledge base's default targets (every W_q and W_k)
    target_layers: tuple[str, ...] | None = None

    def __post_init__(self):
        if isinstance(self.rank, bool) or not isinstance(self.rank, (int, np.integer)) or self.rank <= 0:
            raise ConfigError(f"LoRA rank must be a positive integer, got {self.rank!r}")
        if not self.alpha > 0:
            raise ConfigError(f"LoRA alpha must be positive, got {self.alpha}")
        if not self.init_sigma > 0:
            raise ConfigError(f"LoRA init_sigma must be positive, got {self.init_sigma}")
        if self.target_layers is not None:
            if len(self.target_layers) == 0:
                raise ConfigError("LoRA target_layers must not be empty")
            object.__setattr__(self, "target_layers", tuple(self.target_layers))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def resolve_targets(self, kb: KnowledgeBase) -> list[str]:
        return list(self.target_layers) if self.target_layers is not None else kb.target_layers()

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "alpha": self.alpha,
            "init_sigma": self.init_sigma,
            "target_layers": None if self.target_layers is None else list(self.target_layers),
        }

    @classmethod
    def from_dict(cls, values: dict) -> "LoraConfig":
        targets = values.get("target_layers")
        return cls(
            rank=int(values["rank"]),
            alpha=float(values["alpha"]),
            init_sigma=float(values["init_sigma"]),
            target_layers=None if targets is None else tuple(targets),
        )


class LoraAdapter:
    """Per-layer factor pairs (A [d_out x r], B [r x d_in]) trained on one dataset."""

    def __init__(self, config: LoraConfig, factors: dict[str, tuple[Tensor, Tensor]],
                 trained_on: str = "", base_version: int = 0):
        self.config = config
        self.factors = factors
        self.trained_on = trained_on
        self.base_version = int(base_version)

    @property
    def scale(self) -> float:
        return self.config.scale

    @property
    def layer_names(self) -> list[str]:
        return sorted(self.factors)

    def parameters(self) -> list[Tensor]:
        params = []
        for name in self.layer_names:
            A, B = self.factors[name]
            params.extend((A, B))
        return params

    def copy(self) -> "LoraAdapter":
        factors = {name: (A.copy(), B.copy()) for name, (A, B) in self.factors.items()}
        return LoraAdapter(self.config, factors, self.trained_on, self.base_version)

    def astype(self, dtype) -> "LoraAdapter":
        factors = {name: (A.astype(dtype), B.astype(dtype)) for name, (A, B) in self.factors.items()}
        return LoraAdapter(self.config, factors, self.trained_on, self.base_version)

    def load_state(self, other: "LoraAdapter"):
        """Overwrite factor values in place with those of another adapter."""
        for name in self.layer_names:
            A, B = self.factors[name]
            A_src, B_src = other.factors[name]
            A.data = A_src.data.copy()
            B.data = B_src.data.copy()

    def fingerprint(self) -> str:
        named = []
        for name in self.layer_names:
            A, B = self.factors[name]
            named.extend(((f"{name}.A", A.data), (f"{name}.B", B.data)))
        return fingerprint_arrays(named)

    def __repr__(self) -> str:
        return (f"LoraAdapter(trained_on='{self.trained_on}', layers={len(self.factors)}, "
                f"rank={self.config.rank}, base_version={self.base_version})")


class DeltaSet:
    """Dense per-layer weight updates; closed under addition and scalar multiplication."""

    def __init__(self, layers: dict[str, np.ndarray]):
        self.layers = {name: np.asarray(w) for name, w in layers.items()}

    @property
    def layer_names(self) -> list[str]:
        return sorted(self.layers)

    def shapes(self) -> dict[str, tuple]:
        return {name: w.shape for name, w in self.layers.items()}

    @property
    def dtype(self):
        return next(iter(self.layers.values())).dtype if self.layers else np.float32

    def _check_compatible(self, other: "DeltaSet"):
        if set(self.layers) != set(other.layers):
            raise DimensionError(
                f"DeltaSet layers differ: {sorted(set(self.layers) ^ set(other.layers))}"
            )
        for name, w in self.layers.items():
            if w.shape != other.layers[name].shape:
                raise DimensionError(f"DeltaSet shapes differ for '{name}': {w.shape} vs {other.layers[name].shape}")

    def __add__(self, other: "DeltaSet") -> "DeltaSet":
        self._check_compatible(other)
        return DeltaSet({n: np.add(w, other.layers[n], dtype=np.result_type(w, other.layers[n]))
                         for n, w in self.layers.items()})

    def __sub__(self, other: "DeltaSet") -> "DeltaSet":
        return self + (-other)

    def __neg__(self) -> "DeltaSet":
        return DeltaSet({n: -w for n, w in self.layers.items()})

    def __mul__(self, c: float) -> "DeltaSet":
        return DeltaSet({n: (w * c).astype(w.dtype) for n, w in self.layers.items()})

    __rmul__ = __mul__

    def astype(self, dtype) -> "DeltaSet":
        return DeltaSet({n: w.astype(dtype) for n, w in self.layers.items()})

    def copy(self) -> "DeltaSet":
        return DeltaSet({n: w.copy() for n, w in self.layers.items()})

    def zeros_like(self) -> "DeltaSet":
        return DeltaSet({n: np.zeros_like(w) for n, w in self.layers.items()})

    def frobenius_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(w.astype(np.float64) ** 2)) for w in self.layers.values())))

    def max_abs_diff(self, other: "DeltaSet") -> float:
        self._check_compatible(other)
        if not self.layers:
            return 0.0
        return max(float(np.max(np.abs(w.astype(np.float64) - other.layers[n].astype(np.float64))))
                   for n, w in self.layers.items())

    def num_entries(self) -> int:
        return int(sum(w.size for w in self.layers.values()))

    def fingerprint(self) -> str:
        return fingerprint_arrays((n, self.layers[n]) for n in self.layer_names)

    def __repr__(self) -> str:
        return f"DeltaSet(layers={len(self.layers)}, norm={self.frobenius_norm():.4g})"


def init_adapter(kb: KnowledgeBase, cfg: LoraConfig, dataset_id: str, seed: int) -> LoraAdapter:
    """
    Fresh adapter: A ~ N(0, sigma^2), B = 0, so the composed delta is exactly zero.

    Raises:
    -------
    AdapterCompatibilityError
        If a target layer is not an attention or feed-forward weight of the knowledge base
    ConfigError
        If the rank exceeds a quarter of the smaller layer dimension
    """
    rng = np.random.default_rng(int(seed))
    factors = {}
    adaptable = set(kb.adaptable_layers())
    for name in sorted(cfg.resolve_targets(kb)):
        if name not in kb.params:
            raise AdapterCompatibilityError(f"LoRA target layer '{name}' does not exist in the knowledge base")
        W = kb.params[name]
        if name not in adaptable:
            raise AdapterCompatibilityError(
                f"LoRA target layer '{name}' is not an attention or feed-forward weight (shape {W.shape})"
            )
        d_out, d_in = W.shape
        if cfg.rank > min(d_out, d_in) / 4:
            raise ConfigError(
                f"LoRA rank {cfg.rank} too large for '{name}' {W.shape}: must be <= {min(d_out, d_in) // 4}"
            )
        A = rng.normal(0.0, cfg.init_sigma, size=(d_out, cfg.rank)).astype(W.dtype)
        B = np.zeros((cfg.rank, d_in), dtype=W.dtype)
        factors[name] = (
            Tensor(A, requires_grad=True, name=f"{name}.lora_A"),
            Tensor(B, requires_grad=True, name=f"{name}.lora_B"),
        )
    return LoraAdapter(cfg, factors, trained_on=dataset_id, base_version=kb.version)


def compose_delta(adapter: LoraAdapter) -> DeltaSet:
    """Delta W = (alpha / r) A B for every adapted layer."""
    layers = {}
    for name, (A, B) in adapter.factors.items():
        product = adapter.scale * (A.data.astype(np.float64) @ B.data.astype(np.float64))
        layers[name] = product.astype(A.dtype)
    return DeltaSet(layers)


def average_deltas(deltas: Sequence[DeltaSet]) -> DeltaSet:
    """Entrywise mean with 64-bit accumulation."""
    if len(deltas) == 0:
        raise ContractError("average_deltas needs at least one DeltaSet")
    first = deltas[0]
    total = first.astype(np.float64)
    for other in deltas[1:]:
        total = total + other.astype(np.float64)
    return DeltaSet({n: (w / len(deltas)).astype(first.layers[n].dtype) for n, w in total.layers.items()})


def add_deltas(a: DeltaSet, b: DeltaSet) -> DeltaSet:
    return a + b


def scale_delta(delta: DeltaSet, c: float) -> DeltaSet:
    return delta * c


def lora_merge(kb: KnowledgeBase, delta: DeltaSet) -> KnowledgeBase:
    """
    New knowledge base with W <- W + Delta W on every layer in the delta,
    version incremented. The input knowledge base is left untouched.
    """
    for name, dw in delta.layers.items():
        if name not in kb.params:
            raise AdapterCompatibilityError(f"Delta layer '{name}' does not exist in the knowledge base")
        if kb.params[name].shape != dw.shape:
            raise DimensionError(f"Delta for '{name}' has shape {dw.shape}, base weight is {kb.params[name].shape}")
    merged = kb.copy(version=kb.version + 1)
    for name, dw in delta.layers.items():
        W = merged.params[name]
        W.data = (W.data.astype(np.float64) + dw.astype(np.float64)).astype(W.data.dtype)
    return merged


def sparsity(delta: DeltaSet, eps: float = 1e-3, reference: KnowledgeBase | None = None) -> float:
    """
    Fraction of delta entries with |w| < eps across all layers.

    When a reference knowledge base is given, eps is taken relative to the
    RMS magnitude of the corresponding base weight.
    """
    if not eps > 0:
        raise ContractError(f"sparsity threshold must be positive, got {eps}")
    total = delta.num_entries()
    if total == 0:
        raise ContractError("sparsity of an empty DeltaSet is undefined")
    small = 0
    for name, w in delta.layers.items():
        threshold = eps
        if reference is not None:
            base = reference.params[name].data.astype(np.float64)
            threshold = eps * float(np.sqrt(np.mean(base ** 2)))
        small += int(np.count_nonzero(np.abs(w) < threshold))
    return small / total


def sparsity_summary(delta: DeltaSet, eps: float, reference: KnowledgeBase, relative: bool = True) -> dict:
    """History fields for a delta: absolute sparsity, plus sparsity relative to reference when asked."""
    summary = {"sparsity": sparsity(delta, eps)}
    if relative:
        summary["relative_sparsity"] = sparsity(delta, eps, reference=reference)
    return summary


# ---- factor-space diagnostic ----

def average_factors(adapters: Sequence[LoraAdapter]) -> LoraAdapter:
    """Average A and B separately. Diagnostic only; centralization averages in delta space."""
    if len(adapters) == 0:
        raise ContractError("average_factors needs at least one adapter")
    first = adapters[0]
    factors = {}
    for name in first.layer_names:
        A_sum = sum(ad.factors[name][0].data.astype(np.float64) for ad in adapters)
        B_sum = sum(ad.factors[name][1].data.astype(np.float64) for ad in adapters)
        dtype = first.factors[name][0].dtype
        factors[name] = (
            Tensor((A_sum / len(adapters)).astype(dtype), name=f"{name}.lora_A"),
            Tensor((B_sum / len(adapters)).astype(dtype), name=f"{name}.lora_B"),
        )
    return LoraAdapter(first.config, factors, trained_on="factor-average", base_version=first.base_version)


def factor_space_gap(adapters: Sequence[LoraAdapter]) -> dict:
    """How far compose(mean of factors) lies from mean of composed deltas, in Frobenius norm."""
    delta_avg = average_deltas([compose_delta(ad) for ad in adapters])
    factor_avg = compose_delta(average_factors(adapters))
    gap = (factor_avg.astype(np.float64) - delta_avg.astype(np.float64)).frobenius_norm()
    reference = delta_avg.frobenius_norm()
    return {
        "absolute": gap,
        "relative": gap / reference if reference > 0 else None,
        "delta_avg_norm": reference,
        "factor_avg_norm": factor_avg.frobenius_norm(),
    }


def adapter_entries(adapters: Iterable[LoraAdapter]) -> int:
    """Total stored factor entries, used for memory accounting."""
    return int(sum(t.size for ad in adapters for t in ad.parameters()))
