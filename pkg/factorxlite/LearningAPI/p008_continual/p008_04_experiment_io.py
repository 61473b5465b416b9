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


import csv
import io
import json
import os
import struct

import numpy as np

from ..p000_utility import (
    CheckpointFormatError, ConfigError, SuiteMismatchError, atomic_write_bytes, atomic_write_text,
)
from ..p001_tensor import Tensor
from ..p003_model import KnowledgeBase, ModelConfig
from ..p004_lora import DeltaSet, LoraAdapter, LoraConfig
from ..p005_taskgen import Dataset, SuiteConfig, TaskSuite, make_suite
from ..p006_evaluation import RunReport, evaluate_snapshot


MAGIC_KNOWLEDGE_BASE = b"CLKB"
MAGIC_ADAPTER = b"CLAD"
MAGIC_DELTA = b"CLDL"
MAGIC_DATASET = b"CLDS"
FORMAT_VERSION = 1

REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
MANIFEST_JSON = "manifest.json"
RUN_STATE_DIR = "run_state"


# ---- binary container ----

def _pack_string(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _encode(magic: bytes, metadata: dict, records: list[tuple[str, np.ndarray]], dtype: str = "<f4") -> bytes:
    """
    magic | u32 version | length-prefixed JSON metadata | records.
    Each record: length-prefixed name, u32 rank, u32 dims, little-endian payload.
    """
    parts = [magic, struct.pack("<I", FORMAT_VERSION), _pack_string(json.dumps(metadata, sort_keys=True))]
    for name, array in records:
        array = np.ascontiguousarray(array, dtype=dtype)
        parts.append(_pack_string(name))
        parts.append(struct.pack("<I", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes, path: str):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.payload):
            raise CheckpointFormatError(f"Truncated file '{self.path}' at byte {self.offset}")
        chunk = self.payload[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        start = self.offset
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as error:
            raise CheckpointFormatError(f"Corrupt string at byte {start} of '{self.path}': {error}") from error

    def done(self) -> bool:
        return self.offset == len(self.payload)


def _decode(path: str, expected_magic: bytes, dtype: str = "<f4") -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)
    magic = reader.take(4)
    if magic != expected_magic:
        raise CheckpointFormatError(f"'{path}' has magic {magic!r}, expected {expected_magic!r}")
    version = reader.u32()
    if version > FORMAT_VERSION or version < 1:
        raise CheckpointFormatError(f"'{path}' uses format version {version}; this build reads up to {FORMAT_VERSION}")
    try:
        metadata = json.loads(reader.string())
    except json.JSONDecodeError as error:
        raise CheckpointFormatError(f"Corrupt metadata block in '{path}': {error}") from error
    records = {}
    item_size = np.dtype(dtype).itemsize
    while not reader.done():
        name = reader.string()
        rank = reader.u32()
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        records[name] = np.frombuffer(reader.take(count * item_size), dtype=dtype).reshape(dims).astype(dtype[1:])
    return metadata, records


# ---- knowledge base / adapter / delta ----

def save_knowledge_base(kb: KnowledgeBase, path: str):
    names = sorted(kb.params)
    metadata = {
        "kind": "knowledge_base",
        "config": kb.config.to_dict(),
        "version": kb.version,
        "no_decay": [n for n in names if kb.params[n].no_decay],
    }
    atomic_write_bytes(path, _encode(MAGIC_KNOWLEDGE_BASE, metadata, [(n, kb.params[n].data) for n in names]))


def load_knowledge_base(path: str) -> KnowledgeBase:
    metadata, records = _decode(path, MAGIC_KNOWLEDGE_BASE)
    no_decay = set(metadata.get("no_decay", []))
    params = {name: Tensor(array, name=name, no_decay=name in no_decay) for name, array in records.items()}
    return KnowledgeBase(ModelConfig.from_dict(metadata["config"]), params, metadata["version"])


def save_adapter(adapter: LoraAdapter, path: str):
    records = []
    for name in adapter.layer_names:
        A, B = adapter.factors[name]
        records.extend(((f"{name}.A", A.data), (f"{name}.B", B.data)))
    metadata = {
        "kind": "adapter",
        "config": adapter.config.to_dict(),
        "trained_on": adapter.trained_on,
        "base_version": adapter.base_version,
        "layers": adapter.layer_names,
    }
    atomic_write_bytes(path, _encode(MAGIC_ADAPTER, metadata, records))


def load_adapter(path: str) -> LoraAdapter:
    metadata, records = _decode(path, MAGIC_ADAPTER)
    factors = {}
    for name in metadata["layers"]:
        try:
            A, B = records[f"{name}.A"], records[f"{name}.B"]
        except KeyError as error:
            raise CheckpointFormatError(f"Adapter file '{path}' misses factors for '{name}'") from error
        factors[name] = (Tensor(A, requires_grad=True, name=f"{name}.lora_A"),
                         Tensor(B, requires_grad=True, name=f"{name}.lora_B"))
    return LoraAdapter(LoraConfig.from_dict(metadata["config"]), factors,
                       metadata["trained_on"], metadata["base_version"])


def save_delta(delta: DeltaSet, path: str):
    metadata = {"kind": "delta", "layers": delta.layer_names}
    atomic_write_bytes(path, _encode(MAGIC_DELTA, metadata, [(n, delta.layers[n]) for n in delta.layer_names]))


def load_delta(path: str) -> DeltaSet:
    _, records = _decode(path, MAGIC_DELTA)
    return DeltaSet(records)


# ---- datasets / suites ----

def save_dataset(dataset: Dataset, path: str):
    metadata = {"kind": "dataset", "id": dataset.id, "split": dataset.split,
                "n": len(dataset), "seq_len": dataset.seq_len}
    records = [("tokens", dataset.tokens), ("labels", dataset.labels)]
    atomic_write_bytes(path, _encode(MAGIC_DATASET, metadata, records, dtype="<u4"))


def load_dataset(path: str) -> Dataset:
    metadata, records = _decode(path, MAGIC_DATASET, dtype="<u4")
    return Dataset(metadata["id"], records["tokens"].astype(np.int64), records["labels"].astype(np.int64), metadata["split"])


def dataset_filename(dataset: Dataset) -> str:
    return f"{dataset.id}.{dataset.split}.clds"


def write_json(path: str, document: dict):
    atomic_write_text(path, json.dumps(document, indent=2, sort_keys=True) + "\n")


def read_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def save_suite(suite: TaskSuite, directory: str):
    """Manifest plus one binary file per dataset split."""
    manifest = suite.manifest()
    manifest["files"] = {}
    backward = [suite.backward_tests[k] for k in sorted(suite.backward_tests)]
    for key, dataset in [("pretrain.train", suite.pretrain), ("pretrain.heldout", suite.pretrain_heldout)] + \
            [(f"{s.id}.{split}", getattr(s, split)) for s in suite.stream for split in ("train", "heldout", "test")] + \
            [(f"backward.{d.id}", d) for d in backward]:
        filename = os.path.join("datasets", dataset_filename(dataset))
        save_dataset(dataset, os.path.join(directory, filename))
        manifest["files"][key] = filename
    write_json(os.path.join(directory, MANIFEST_JSON), manifest)


def load_suite(directory: str) -> TaskSuite:
    """
    Regenerate the suite from its manifest and verify it against the stored fingerprint.

    Raises:
    -------
    SuiteMismatchError
        If regeneration does not reproduce the stored suite
    """
    manifest = read_json(os.path.join(directory, MANIFEST_JSON))
    config = dict(manifest["config"])
    vocab_in, vocab_out = config.pop("vocab_in"), config.pop("vocab_out")
    suite = make_suite(SuiteConfig.from_dict(config, vocab_in, vocab_out), manifest["seed"])
    if suite.fingerprint() != manifest["fingerprint"]:
        raise SuiteMismatchError(f"Suite in '{directory}' does not regenerate to its stored fingerprint")
    return suite


# ---- reports ----

def report_csv_text(report: RunReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    forward_rows = report.forward.csv_rows("forward")
    backward_rows = report.backward.csv_rows("backward")
    writer.writerows(forward_rows)
    writer.writerows(backward_rows)
    return buffer.getvalue()


def save_report(report: RunReport, directory: str):
    write_json(os.path.join(directory, REPORT_JSON), report.to_dict())
    atomic_write_text(os.path.join(directory, REPORT_CSV), report_csv_text(report))


def load_report(path: str) -> RunReport:
    if os.path.isdir(path):
        path = os.path.join(path, REPORT_JSON)
    if not os.path.exists(path):
        raise FileNotFoundError(f"No report found at '{path}'")
    try:
        return RunReport.from_dict(read_json(path))
    except (KeyError, TypeError, json.JSONDecodeError) as error:
        raise ConfigError(f"Malformed report '{path}': {error}") from error


# ---- run state ----

def save_run_state(run_dir: str, document: dict):
    write_json(os.path.join(run_dir, RUN_STATE_DIR, "state.json"), document)


def load_run_state(run_dir: str) -> dict | None:
    path = os.path.join(run_dir, RUN_STATE_DIR, "state.json")
    return read_json(path) if os.path.exists(path) else None


def reevaluate_row(report: RunReport, row_id: str, run_dir: str, suite: TaskSuite) -> tuple[dict, dict]:
    """Reload the checkpoints behind one report row and recompute its forward and backward cells."""
    if row_id not in report.checkpoints:
        raise ConfigError(f"Report row '{row_id}' has no checkpoint reference")
    refs = report.checkpoints[row_id]
    kb = load_knowledge_base(os.path.join(run_dir, refs["kb"]))
    adapter = load_adapter(os.path.join(run_dir, refs["adapter"])) if refs.get("adapter") else None
    forward = evaluate_snapshot(kb, adapter, {c: suite.get(c).test for c in report.forward.cols})
    backward = evaluate_snapshot(kb, adapter, {c: suite.backward_tests[c] for c in report.backward.cols})
    return forward, backward


class ExperimentIO:
    """Handles persistence of checkpoints, suites and reports for a ContinualExperiment"""

    def __init__(self, parent_experiment):
        self.parent = parent_experiment

    def run_dir(self, name: str) -> str:
        path = os.path.join(self.parent.output_dir, name)
        os.makedirs(path, exist_ok=True)
        return path

    def save_knowledge_base(self, kb: KnowledgeBase, path: str):
        save_knowledge_base(kb, path)
        self.parent._log(f"Knowledge base v{kb.version} written to {path}")

    def load_knowledge_base(self, path: str) -> KnowledgeBase:
        if not os.path.exists(path):
            raise FileNotFoundError(f"Knowledge base checkpoint '{path}' does not exist")
        kb = load_knowledge_base(path)
        self.parent._log(f"Knowledge base v{kb.version} loaded from {path}", 'debug')
        return kb

    def save_suite(self, directory: str):
        save_suite(self.parent.suite, directory)
        self.parent._log(f"Task suite manifest written to {directory}")

    def save_report(self, report: RunReport, directory: str):
        save_report(report, directory)
        self.parent._log(f"Report for method '{report.method}' written to {directory}")

    def reevaluate_row(self, report: RunReport, row_id: str, run_dir: str) -> tuple[dict, dict]:
        return reevaluate_row(report, row_id, run_dir, self.parent.suite)
