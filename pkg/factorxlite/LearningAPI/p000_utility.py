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


import copy
import hashlib
import os
import tempfile
from contextlib import contextmanager
from datetime import datetime
from typing import Any, Callable, Iterable

import numpy as np
from tqdm import tqdm

from ..config import INFO, SETTINGS


class DimensionError(ValueError):
    """Raised when tensor or delta shapes do not line up."""


class ContractError(RuntimeError):
    """Raised when a precondition of an operation is violated."""


class ConfigError(ValueError):
    """Raised for invalid configuration values or documents."""


class AdapterCompatibilityError(ValueError):
    """Raised when an adapter does not fit the knowledge base it is used with."""


class CheckpointFormatError(ValueError):
    """Raised for unknown magic, unsupported versions or truncated checkpoint files."""


class SuiteMismatchError(ValueError):
    """Raised when reports produced on different task suites are combined."""


LogFunction = Callable[..., None]


def factorx_log(message: str, level: str = 'info', verbose: bool | None = None, debug: bool | None = None):
    """
    Print a log line in the FactorXLite format.

    Parameters:
    -----------
    message : str
        Text of the message
    level : str
        'debug', 'info', 'warning' or 'error'
    verbose, debug : bool, optional
        Overrides for SETTINGS["logging"]; warnings and errors are always printed
    """
    verbose = SETTINGS["logging"]["verbose"] if verbose is None else verbose
    debug = SETTINGS["logging"]["debug"] if debug is None else debug

    if level == 'debug' and not debug:
        return
    if level in ('warning', 'error') or verbose:
        print(f"{INFO['name']}::{datetime.now()} | {level.upper()}: {message}")


def derive_seed(master_seed: int, *labels: Any) -> int:
    """
    Fan a master seed out into a named sub-seed.

    The sub-seed depends only on the master seed and the labels, so adding
    a new consumer never shifts the seeds of existing ones.

    Returns:
    --------
    int
        Unsigned 64-bit seed
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master_seed)).encode("utf-8"))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def fingerprint_arrays(named_arrays: Iterable[tuple[str, np.ndarray]]) -> str:
    """Hex digest over names, shapes, dtypes and raw bytes of the arrays."""
    h = hashlib.blake2b(digest_size=16)
    for name, array in named_arrays:
        array = np.ascontiguousarray(array)
        h.update(name.encode("utf-8"))
        h.update(str(array.shape).encode("utf-8"))
        h.update(str(array.dtype).encode("utf-8"))
        h.update(array.tobytes())
    return h.hexdigest()


def deep_merge(defaults: dict, overrides: dict, path: str = "") -> dict:
    """
    Merge a nested override dictionary into a copy of the defaults.

    Keys starting with "_" in the defaults are metadata and cannot be overridden.
    
    Raises:
    -------
    ConfigError
        If an override key does not exist in the defaults
    """
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        key_path = f"{path}.{key}" if path else key
        if key not in defaults or key.startswith("_"):
            raise ConfigError(f"Unknown configuration key '{key_path}'")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            merged[key] = deep_merge(defaults[key], value, key_path)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def atomic_write_bytes(path: str, payload: bytes):
    """Write a file through a temporary sibling and rename it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path: str, text: str):
    """UTF-8, LF line endings."""
    atomic_write_bytes(path, text.replace("\r\n", "\n").encode("utf-8"))


def progress_bar(iterable, desc: str = "", total: int | None = None, leave: bool = False, **kwargs):
    """tqdm wrapper honouring SETTINGS["logging"]["progress_bars"] and verbosity."""
    logging_settings = SETTINGS["logging"]
    disable = not (logging_settings["progress_bars"] and logging_settings["verbose"])
    return tqdm(iterable, desc=desc, total=total, leave=leave, disable=disable, **kwargs)


@contextmanager
def logging_overrides(values: dict):
    """
    Apply a run configuration's logging section to SETTINGS["logging"] for
    the duration of the block; the previous values are restored afterwards.
    """
    logging_settings = SETTINGS["logging"]
    previous = dict(logging_settings)
    logging_settings.update({k: v for k, v in values.items() if k in logging_settings})
    try:
        yield
    finally:
        logging_settings.clear()
        logging_settings.update(previous)
