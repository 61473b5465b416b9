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


import math
from dataclasses import asdict, dataclass

import numpy as np

from .p000_utility import AdapterCompatibilityError, ConfigError, derive_seed, fingerprint_arrays
from .p001_tensor import (
    Tensor, add, embedding, gelu, layer_norm, matmul, mul, reshape, softmax, transpose, no_grad,
)


TARGET_SUFFIXES = ("attn.W_q", "attn.W_k")
# Linear weights whose forward pass applies adapter factors
ADAPTABLE_SUFFIXES = ("attn.W_q", "attn.W_k", "attn.W_v", "attn.W_o", "ff.W_1", "ff.W_2")


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the per-position transduction transformer."""
    vocab_in: int = 256
    vocab_out: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    max_seq_len: int = 32
    seed: int = 0
    use_positions: bool = True

    def __post_init__(self):
        for key in ("vocab_in", "vocab_out", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            value = getattr(self, key)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"ModelConfig.{key} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {k: values[k] for k in cls.__dataclass_fields__ if k in values}
        return cls(**known)


class KnowledgeBase:
    """
    Full parameter set of the base model, versioned across centralizations.

    The parameter map is treated as immutable once built; merges and
    pretraining return new instances.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], version: int = 0):
        self.config = config
        self.params = params
        self.version = int(version)

    def target_layers(self) -> list[str]:
        """Every attention W_q and W_k, in layer order."""
        return [f"layers.{i}.{suffix}" for i in range(self.config.n_layers) for suffix in TARGET_SUFFIXES]

    def adaptable_layers(self) -> list[str]:
        return [f"layers.{i}.{suffix}" for i in range(self.config.n_layers) for suffix in ADAPTABLE_SUFFIXES]

    def copy(self, version: int | None = None) -> "KnowledgeBase":
        params = {name: t.copy() for name, t in self.params.items()}
        return KnowledgeBase(self.config, params, self.version if version is None else version)

    def astype(self, dtype) -> "KnowledgeBase":
        return KnowledgeBase(self.config, {n: t.astype(dtype) for n, t in self.params.items()}, self.version)

    def with_grad(self, enabled: bool) -> "KnowledgeBase":
        """Copy whose parameters do (or do not) record gradients."""
        kb = self.copy()
        for t in kb.params.values():
            t.requires_grad = enabled
            t.grad = None
        return kb

    def fingerprint(self) -> str:
        return fingerprint_arrays((name, self.params[name].data) for name in sorted(self.params))

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def __repr__(self) -> str:
        return f"KnowledgeBase(version={self.version}, parameters={self.parameter_count()})"


def parameter_count(cfg: ModelConfig) -> int:
    """Analytic parameter count for a configuration."""
    d, f = cfg.d_model, cfg.d_ff
    per_layer = 2 * (2 * d) + 4 * d * d + (f * d + f) + (d * f + d)
    total = cfg.vocab_in * d + cfg.n_layers * per_layer + 2 * d + (cfg.vocab_out * d + cfg.vocab_out)
    if cfg.use_positions:
        total += cfg.max_seq_len * d
    return total


def init_model(cfg: ModelConfig) -> KnowledgeBase:
    """
    Seeded initialization: Gaussian N(0, 1/d_in) for projections and
    embeddings, ones for normalization gains, zeros for biases. version = 0.
    """
    if not isinstance(cfg, ModelConfig):
        raise ConfigError(f"init_model expects a ModelConfig, got {type(cfg).__name__}")
    rng = np.random.default_rng(derive_seed(cfg.seed, "init_model"))
    d, f = cfg.d_model, cfg.d_ff
    params: dict[str, Tensor] = {}

    def gaussian(name, shape, fan_in):
        params[name] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape).astype(np.float32), name=name)

    def constant(name, shape, value):
        params[name] = Tensor(np.full(shape, value, dtype=np.float32), name=name, no_decay=True)

    gaussian("embed.tokens", (cfg.vocab_in, d), d)
    if cfg.use_positions:
        gaussian("embed.positions", (cfg.max_seq_len, d), d)
    for i in range(cfg.n_layers):
        prefix = f"layers.{i}"
        constant(f"{prefix}.ln1.gain", (d,), 1.0)
        constant(f"{prefix}.ln1.bias", (d,), 0.0)
        for w in ("W_q", "W_k", "W_v", "W_o"):
            gaussian(f"{prefix}.attn.{w}", (d, d), d)
        constant(f"{prefix}.ln2.gain", (d,), 1.0)
        constant(f"{prefix}.ln2.bias", (d,), 0.0)
        gaussian(f"{prefix}.ff.W_1", (f, d), d)
        constant(f"{prefix}.ff.b_1", (f,), 0.0)
        gaussian(f"{prefix}.ff.W_2", (d, f), f)
        constant(f"{prefix}.ff.b_2", (d,), 0.0)
    constant("ln_f.gain", (d,), 1.0)
    constant("ln_f.bias", (d,), 0.0)
    gaussian("head.W", (cfg.vocab_out, d), d)
    constant("head.b", (cfg.vocab_out,), 0.0)
    return KnowledgeBase(cfg, params, version=0)


# ---- forward pass ----

def check_adapter(kb: KnowledgeBase, adapter) -> None:
    """
    Raises:
    -------
    AdapterCompatibilityError
        If an adapter layer is missing from the knowledge base, is not routed
        through the forward pass, or its factor shapes do not fit
    """
    adaptable = set(kb.adaptable_layers())
    for name, (A, B) in adapter.factors.items():
        if name not in kb.params:
            raise AdapterCompatibilityError(f"Adapter layer '{name}' does not exist in the knowledge base")
        if name not in adaptable:
            raise AdapterCompatibilityError(
                f"Adapter layer '{name}' is not an attention or feed-forward weight; adaptable: {sorted(adaptable)}"
            )
        W = kb.params[name]
        d_out, d_in = W.shape
        if A.ndim != 2 or B.ndim != 2 or A.shape[0] != d_out or B.shape[1] != d_in or A.shape[1] != B.shape[0]:
            raise AdapterCompatibilityError(
                f"Adapter factors for '{name}' have shapes A{A.shape} B{B.shape}, base weight is {W.shape}"
            )


def _linear(x: Tensor, W: Tensor, b: Tensor | None = None, factors=None, scale: float = 1.0) -> Tensor:
    # y = x W^T (+ b) (+ scale * (x B^T) A^T)
    y = matmul(x, W.t())
    if factors is not None:
        A, B = factors
        y = add(y, mul(matmul(matmul(x, B.t()), A.t()), scale))
    if b is not None:
        y = add(y, b)
    return y


def _attention(kb: KnowledgeBase, h: Tensor, i: int, adapter) -> Tensor:
    cfg = kb.config
    p = kb.params
    prefix = f"layers.{i}.attn"
    batch, length, d = h.shape
    heads, hd = cfg.n_heads, cfg.head_dim

    def project(w):
        name = f"{prefix}.{w}"
        factors = adapter.factors.get(name) if adapter is not None else None
        scale = adapter.scale if adapter is not None else 1.0
        out = _linear(h, p[name], factors=factors, scale=scale)
        return transpose(reshape(out, (batch, length, heads, hd)), (0, 2, 1, 3))

    q, k, v = project("W_q"), project("W_k"), project("W_v")
    scores = mul(matmul(q, k.t()), 1.0 / math.sqrt(hd))
    weights = softmax(scores, axis=-1)
    context = matmul(weights, v)
    context = reshape(transpose(context, (0, 2, 1, 3)), (batch, length, d))
    name = f"{prefix}.W_o"
    factors = adapter.factors.get(name) if adapter is not None else None
    return _linear(context, p[name], factors=factors, scale=adapter.scale if adapter is not None else 1.0)


def _feed_forward(kb: KnowledgeBase, h: Tensor, i: int, adapter) -> Tensor:
    p = kb.params
    prefix = f"layers.{i}.ff"
    scale = adapter.scale if adapter is not None else 1.0

    def factors(name):
        return adapter.factors.get(name) if adapter is not None else None

    hidden = gelu(_linear(h, p[f"{prefix}.W_1"], p[f"{prefix}.b_1"], factors(f"{prefix}.W_1"), scale))
    return _linear(hidden, p[f"{prefix}.W_2"], p[f"{prefix}.b_2"], factors(f"{prefix}.W_2"), scale)


def _check_tokens(kb: KnowledgeBase, tokens: np.ndarray):
    cfg = kb.config
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise IndexError(f"token batch must have shape [batch, length>=1], got {tokens.shape}")
    if tokens.shape[1] > cfg.max_seq_len:
        raise IndexError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_in):
        raise IndexError(f"token out of range [0, {cfg.vocab_in}): min {tokens.min()}, max {tokens.max()}")


def forward_batch(kb: KnowledgeBase, tokens, adapter=None) -> Tensor:
    """
    Logits for a batch of equal-length sequences.

    Parameters:
    -----------
    kb : KnowledgeBase
        Base parameters
    tokens : array-like of int, shape [batch, length]
        Input tokens, each < vocab_in
    adapter : LoraAdapter, optional
        When given, every adapted linear layer computes Wx + (alpha/r) A(Bx)

    Returns:
    --------
    Tensor
        Shape [batch, length, vocab_out]

    Raises:
    -------
    IndexError
        For out-of-range tokens or over-long sequences
    AdapterCompatibilityError
        If the adapter does not fit this knowledge base
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(kb, tokens)
    if adapter is not None:
        check_adapter(kb, adapter)

    cfg = kb.config
    p = kb.params
    length = tokens.shape[1]

    x = embedding(p["embed.tokens"], tokens)
    if cfg.use_positions:
        x = add(x, embedding(p["embed.positions"], np.arange(length)))
    for i in range(cfg.n_layers):
        h = layer_norm(x, p[f"layers.{i}.ln1.gain"], p[f"layers.{i}.ln1.bias"])
        x = add(x, _attention(kb, h, i, adapter))
        h = layer_norm(x, p[f"layers.{i}.ln2.gain"], p[f"layers.{i}.ln2.bias"])
        x = add(x, _feed_forward(kb, h, i, adapter))
    x = layer_norm(x, p["ln_f.gain"], p["ln_f.bias"])
    return _linear(x, p["head.W"], p["head.b"])


def forward(kb: KnowledgeBase, tokens, adapter=None) -> Tensor:
    """Logits [len x vocab_out] for a single sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise IndexError(f"forward expects a 1-D token sequence, got shape {tokens.shape}")
    logits = forward_batch(kb, tokens[None, :], adapter)
    return reshape(logits, logits.shape[1:])


def decode_logits(logits) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-1)


def predict(kb: KnowledgeBase, tokens, adapter=None) -> list[int]:
    with no_grad():
        return decode_logits(forward(kb, tokens, adapter)).tolist()


def predict_batch(kb: KnowledgeBase, tokens, adapter=None, chunk_size: int = 256) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    outputs = []
    with no_grad():
        for start in range(0, tokens.shape[0], chunk_size):
            outputs.append(decode_logits(forward_batch(kb, tokens[start:start + chunk_size], adapter)))
    return np.concatenate(outputs, axis=0) if outputs else np.zeros((0, tokens.shape[-1]), dtype=np.int64)
