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
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .p000_utility import ConfigError, ContractError, derive_seed, fingerprint_arrays


SPLITS = ("train", "heldout", "test")


@dataclass(frozen=True)
class Language:
    """
    A synthetic language: a contiguous input vocabulary and a bijective
    token-substitution mapping onto a contiguous output interval.
    """
    id: str
    vocab_start: int
    vocab_size: int
    out_start: int
    mapping: np.ndarray = field(repr=False, compare=False)
    seed: int = 0

    @property
    def vocab_range(self) -> tuple[int, int]:
        return self.vocab_start, self.vocab_start + self.vocab_size

    @property
    def output_range(self) -> tuple[int, int]:
        return self.out_start, self.out_start + self.vocab_size

    def translate(self, tokens) -> np.ndarray:
        return self.mapping[np.asarray(tokens) - self.vocab_start]

    def contains(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        return (tokens >= self.vocab_start) & (tokens < self.vocab_start + self.vocab_size)


@dataclass(frozen=True)
class CodeSwitchTask:
    """
    Mixed-vocabulary task over two languages. Each language's mapping is
    perturbed on a fraction rho of its vocabulary by a cyclic shift of labels.
    """
    id: str
    language_pair: tuple[Language, Language]
    mix_ratio: float
    rho: float
    perturbed: dict = field(repr=False, compare=False)
    seed: int = 0

    def mapping_for(self, language: Language) -> np.ndarray:
        return self.perturbed[language.id]

    @property
    def touches(self) -> list[str]:
        return [lang.id for lang in self.language_pair]


@dataclass
class Dataset:
    id: str
    tokens: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.tokens.ndim != 2 or self.tokens.shape != self.labels.shape:
            raise ContractError(
                f"Dataset '{self.id}' needs equal [n, len] tokens and labels, got {self.tokens.shape} and {self.labels.shape}"
            )
        if self.split not in SPLITS:
            raise ConfigError(f"Unknown split '{self.split}' for dataset '{self.id}'")

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.tokens.shape[1])

    def subset(self, indices, split: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.id, self.tokens[indices], self.labels[indices], split or self.split)

    def fingerprint(self) -> str:
        return fingerprint_arrays([(f"{self.id}.{self.split}.tokens", self.tokens),
                                   (f"{self.id}.{self.split}.labels", self.labels)])


@dataclass(frozen=True)
class StreamTaskSpec:
    id: str
    pair: tuple[int, int]
    mix_ratio: float
    rho: float
    n_samples: int

    @classmethod
    def from_dict(cls, values: dict) -> "StreamTaskSpec":
        return cls(str(values["id"]), tuple(int(i) for i in values["pair"]), float(values["mix_ratio"]),
                   float(values["rho"]), int(values["n_samples"]))

    def to_dict(self) -> dict:
        return {"id": self.id, "pair": list(self.pair), "mix_ratio": self.mix_ratio,
                "rho": self.rho, "n_samples": self.n_samples}


@dataclass(frozen=True)
class SuiteConfig:
    n_languages: int = 8
    vocab_per_lang: int = 24
    seq_len: int = 12
    pretrain_samples_per_lang: int = 2000
    pretrain_heldout_per_lang: int = 100
    monolingual_test_samples: int = 200
    stream_test_samples: int = 200
    heldout_fraction: float = 0.1
    min_untouched_languages: int = 3
    stream: tuple[StreamTaskSpec, ...] = ()
    vocab_in: int = 256
    vocab_out: int = 256

    def __post_init__(self):
        if self.n_languages * self.vocab_per_lang > min(self.vocab_in, self.vocab_out):
            raise ConfigError(
                f"{self.n_languages} languages x {self.vocab_per_lang} tokens overflow "
                f"vocab_in={self.vocab_in} / vocab_out={self.vocab_out}"
            )
        if not 0 < self.heldout_fraction < 1:
            raise ConfigError(f"heldout_fraction must lie in (0, 1), got {self.heldout_fraction}")
        if not self.stream:
            raise ConfigError("Suite stream must contain at least one dataset")
        ids = [task.id for task in self.stream]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"Duplicate stream dataset ids: {ids}")
        for task in self.stream:
            a, b = task.pair
            if a == b:
                raise ConfigError(f"Stream dataset '{task.id}' pairs language {a} with itself")
            if not (0 <= a < self.n_languages and 0 <= b < self.n_languages):
                raise ConfigError(f"Stream dataset '{task.id}' uses a language outside [0, {self.n_languages})")
            if not 0 < task.mix_ratio < 1:
                raise ConfigError(f"mix_ratio of '{task.id}' must lie in (0, 1), got {task.mix_ratio}")
            if not 0 <= task.rho <= 1:
                raise ConfigError(f"rho of '{task.id}' must lie in [0, 1], got {task.rho}")
            if task.n_samples < 2:
                raise ConfigError(f"Stream dataset '{task.id}' needs at least 2 samples")
        touched = {i for task in self.stream for i in task.pair}
        if self.n_languages - len(touched) < self.min_untouched_languages:
            raise ConfigError(
                f"Stream touches {len(touched)} of {self.n_languages} languages; at least "
                f"{self.min_untouched_languages} must stay untouched for backward evaluation"
            )

    @classmethod
    def from_dict(cls, values: dict, vocab_in: int = 256, vocab_out: int = 256) -> "SuiteConfig":
        scalars = {k: v for k, v in values.items() if k != "stream"}
        return cls(**scalars, stream=tuple(StreamTaskSpec.from_dict(s) for s in values["stream"]),
                   vocab_in=vocab_in, vocab_out=vocab_out)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "stream"}
        out["stream"] = [task.to_dict() for task in self.stream]
        return out


@dataclass
class StreamSplits:
    id: str
    task: CodeSwitchTask
    train: Dataset
    heldout: Dataset
    test: Dataset

    @property
    def touches(self) -> list[str]:
        return self.task.touches


@dataclass
class TaskSuite:
    config: SuiteConfig
    seed: int
    languages: list[Language]
    pretrain: Dataset
    pretrain_heldout: Dataset
    stream: list[StreamSplits]
    backward_tests: dict[str, Dataset]

    @property
    def stream_ids(self) -> list[str]:
        return [s.id for s in self.stream]

    def get(self, dataset_id: str) -> StreamSplits:
        for splits in self.stream:
            if splits.id == dataset_id:
                return splits
        raise ConfigError(f"Unknown stream dataset '{dataset_id}'; available: {self.stream_ids}")

    def forward_tests(self, dataset_ids: Sequence[str] | None = None) -> dict[str, Dataset]:
        ids = self.stream_ids if dataset_ids is None else list(dataset_ids)
        return {i: self.get(i).test for i in ids}

    def untouched_languages(self) -> list[str]:
        touched = {lang for s in self.stream for lang in s.touches}
        return [lang.id for lang in self.languages if lang.id not in touched]

    def all_datasets(self) -> list[Dataset]:
        datasets = [self.pretrain, self.pretrain_heldout]
        for s in self.stream:
            datasets.extend((s.train, s.heldout, s.test))
        datasets.extend(self.backward_tests[k] for k in sorted(self.backward_tests))
        return datasets

    def fingerprint(self) -> str:
        named = []
        for ds in self.all_datasets():
            named.extend(((f"{ds.id}.{ds.split}.tokens", ds.tokens), (f"{ds.id}.{ds.split}.labels", ds.labels)))
        for lang in self.languages:
            named.append((f"{lang.id}.mapping", lang.mapping))
        return fingerprint_arrays(named)

    def manifest(self) -> dict:
        return {
            "seed": int(self.seed),
            "fingerprint": self.fingerprint(),
            "config": self.config.to_dict(),
            "languages": [
                {"id": lang.id, "vocab_range": list(lang.vocab_range), "output_range": list(lang.output_range)}
                for lang in self.languages
            ],
            "stream": [
                {
                    "id": s.id,
                    "touches": s.touches,
                    "mix_ratio": s.task.mix_ratio,
                    "rho": s.task.rho,
                    "train": len(s.train),
                    "heldout": len(s.heldout),
                    "test": len(s.test),
                }
                for s in self.stream
            ],
            "backward_tests": {k: len(v) for k, v in sorted(self.backward_tests.items())},
            "untouched_languages": self.untouched_languages(),
        }


def make_languages(n_languages: int, vocab_per_lang: int, seed: int,
                   vocab_in: int = 256, vocab_out: int = 256) -> list[Language]:
    """
    Languages laid out back to back: language i owns inputs
    [i*V, (i+1)*V) and outputs [i*V, (i+1)*V), with a seeded permutation between them.

    Raises:
    -------
    ConfigError
        If the languages do not fit in the input or output vocabulary
    """
    if n_languages <= 0 or vocab_per_lang <= 0:
        raise ConfigError("n_languages and vocab_per_lang must be positive")
    if n_languages * vocab_per_lang > vocab_in or n_languages * vocab_per_lang > vocab_out:
        raise ConfigError(
            f"Vocabulary overflow: {n_languages} x {vocab_per_lang} > vocab_in={vocab_in} or vocab_out={vocab_out}"
        )
    languages = []
    for i in range(n_languages):
        lang_seed = derive_seed(seed, "language", i)
        perm = np.random.default_rng(lang_seed).permutation(vocab_per_lang)
        start = i * vocab_per_lang
        languages.append(Language(f"L{i}", start, vocab_per_lang, start, (start + perm).astype(np.int64), lang_seed))
    return languages


def perturb_mapping(language: Language, rho: float, rng: np.random.Generator) -> np.ndarray:
    """
    Cyclically shift the labels of round(rho * V) randomly chosen tokens.

    A single chosen token cannot be shifted, so the count is raised to two.
    """
    m = int(round(rho * language.vocab_size))
    if m == 1:
        m = 2
    mapping = language.mapping.copy()
    if m == 0:
        return mapping
    chosen = rng.choice(language.vocab_size, size=m, replace=False)
    mapping[chosen] = language.mapping[np.roll(chosen, -1)]
    return mapping


def make_codeswitch_task(task_id: str, language_a: Language, language_b: Language,
                         mix_ratio: float, rho: float, seed: int) -> CodeSwitchTask:
    if not 0 < mix_ratio < 1:
        raise ConfigError(f"mix_ratio must lie in (0, 1), got {mix_ratio}")
    if not 0 <= rho <= 1:
        raise ConfigError(f"rho must lie in [0, 1], got {rho}")
    perturbed = {}
    for lang in (language_a, language_b):
        rng = np.random.default_rng(derive_seed(seed, "perturbation", lang.id))
        perturbed[lang.id] = perturb_mapping(lang, rho, rng)
    return CodeSwitchTask(task_id, (language_a, language_b), mix_ratio, rho, perturbed, seed)


def sample_monolingual(lang: Language, n: int, length: int, seed: int,
                       split: str = "test", dataset_id: str | None = None) -> Dataset:
    """Uniform token draws from the language's vocabulary, labelled through its mapping."""
    if n <= 0:
        raise ContractError(f"sample_monolingual needs n > 0, got {n}")
    rng = np.random.default_rng(int(seed))
    offsets = rng.integers(0, lang.vocab_size, size=(n, length))
    tokens = lang.vocab_start + offsets
    return Dataset(dataset_id or lang.id, tokens, lang.mapping[offsets], split)


def sample_codeswitch(task: CodeSwitchTask, n: int, length: int, seed: int,
                      split: str = "train") -> Dataset:
    """Each position comes from the first language with probability mix_ratio, else the second."""
    if n <= 0:
        raise ContractError(f"sample_codeswitch needs n > 0, got {n}")
    lang_a, lang_b = task.language_pair
    if lang_a.vocab_size != lang_b.vocab_size:
        raise ConfigError("Code-switch languages must share a vocabulary size")
    rng = np.random.default_rng(int(seed))
    from_a = rng.random((n, length)) < task.mix_ratio
    offsets = rng.integers(0, lang_a.vocab_size, size=(n, length))
    tokens = np.where(from_a, lang_a.vocab_start + offsets, lang_b.vocab_start + offsets)
    labels = np.where(from_a, task.mapping_for(lang_a)[offsets], task.mapping_for(lang_b)[offsets])
    return Dataset(task.id, tokens, labels, split)


def _draw_disjoint(draw: Callable[[int, int], Dataset], n: int, seen: set, seed: int) -> Dataset:
    """Draw n samples whose token rows do not appear in `seen`, then add them to it."""
    rows_tokens, rows_labels = [], []
    attempt = 0
    template = None
    while len(rows_tokens) < n:
        batch = draw(n - len(rows_tokens), derive_seed(seed, "attempt", attempt))
        if template is None:
            template = batch
        for tokens, labels in zip(batch.tokens, batch.labels):
            key = tokens.tobytes()
            if key in seen:
                continue
            seen.add(key)
            rows_tokens.append(tokens)
            rows_labels.append(labels)
        attempt += 1
        if attempt > 100:
            raise ConfigError(f"Could not draw {n} distinct samples for '{template.id}'; vocabulary too small")
    return Dataset(template.id, np.stack(rows_tokens), np.stack(rows_labels), template.split)


def make_suite(cfg: SuiteConfig, seed: int) -> TaskSuite:
    """
    Build the full benchmark: pretraining mixture, stream datasets and backward test sets.

    Test sets are drawn first, then held-out splits, then training data, all
    against one shared record of seen token rows, so no input sequence
    appears in two splits.
    """
    languages = make_languages(cfg.n_languages, cfg.vocab_per_lang, seed, cfg.vocab_in, cfg.vocab_out)
    tasks = [
        make_codeswitch_task(spec.id, languages[spec.pair[0]], languages[spec.pair[1]],
                             spec.mix_ratio, spec.rho, derive_seed(seed, "task", spec.id))
        for spec in cfg.stream
    ]
    L = cfg.seq_len
    seen: set = set()

    backward_tests = {
        lang.id: _draw_disjoint(
            lambda k, s, lang=lang: sample_monolingual(lang, k, L, s, "test"),
            cfg.monolingual_test_samples, seen, derive_seed(seed, "backward-test", lang.id))
        for lang in languages
    }
    stream_tests = {
        task.id: _draw_disjoint(
            lambda k, s, task=task: sample_codeswitch(task, k, L, s, "test"),
            cfg.stream_test_samples, seen, derive_seed(seed, "stream-test", task.id))
        for task in tasks
    }
    pretrain_heldout = pool_datasets([
        _draw_disjoint(lambda k, s, lang=lang: sample_monolingual(lang, k, L, s, "heldout"),
                       cfg.pretrain_heldout_per_lang, seen, derive_seed(seed, "pretrain-heldout", lang.id))
        for lang in languages
    ], dataset_id="pretrain", split="heldout")

    stream = []
    for spec, task in zip(cfg.stream, tasks):
        n_heldout = max(1, int(round(cfg.heldout_fraction * spec.n_samples)))
        heldout = _draw_disjoint(lambda k, s, task=task: sample_codeswitch(task, k, L, s, "heldout"),
                                 n_heldout, seen, derive_seed(seed, "stream-heldout", task.id))
        train = _draw_disjoint(lambda k, s, task=task: sample_codeswitch(task, k, L, s, "train"),
                               spec.n_samples - n_heldout, seen, derive_seed(seed, "stream-train", task.id))
        stream.append(StreamSplits(task.id, task, train, heldout, stream_tests[task.id]))

    pretrain = pool_datasets([
        _draw_disjoint(lambda k, s, lang=lang: sample_monolingual(lang, k, L, s, "train"),
                       cfg.pretrain_samples_per_lang, seen, derive_seed(seed, "pretrain-train", lang.id))
        for lang in languages
    ], dataset_id="pretrain", split="train", seed=derive_seed(seed, "pretrain-shuffle"))

    return TaskSuite(cfg, int(seed), languages, pretrain, pretrain_heldout, stream, backward_tests)


def pool_datasets(datasets: Sequence[Dataset], dataset_id: str | None = None,
                  split: str = "train", seed: int | None = None) -> Dataset:
    """
    Concatenate datasets, optionally shuffled. A single dataset keeps its id.
    """
    if len(datasets) == 0:
        raise ContractError("pool_datasets needs at least one dataset")
    if dataset_id is None:
        dataset_id = datasets[0].id if len(datasets) == 1 else "pooled"
    tokens = np.concatenate([d.tokens for d in datasets], axis=0)
    labels = np.concatenate([d.labels for d in datasets], axis=0)
    if seed is not None:
        order = np.random.default_rng(int(seed)).permutation(tokens.shape[0])
        tokens, labels = tokens[order], labels[order]
    return Dataset(dataset_id, tokens, labels, split)


def unigram_uniformity_pvalue(dataset: Dataset, language: Language) -> float:
    """Chi-square p-value of the language's token counts against a uniform distribution."""
    tokens = dataset.tokens[language.contains(dataset.tokens)]
    counts = np.bincount(tokens - language.vocab_start, minlength=language.vocab_size)
    return float(stats.chisquare(counts).pvalue)


def language_share(dataset: Dataset, language: Language) -> float:
    return float(np.mean(language.contains(dataset.tokens)))
