"""Single-file archive of named arrays plus a JSON metadata header.

The container is a numpy ``.npz`` file: every array is stored as a ``.npy``
member (explicit dtype and shape header, little-endian). The metadata dict is
JSON-encoded into the reserved member ``__meta__``.
"""
from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import DatasetError

META_KEY = "__meta__"
FORMAT_VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    if META_KEY in arrays:
        raise ValueError(f"array name {META_KEY!r} is reserved")
    header = {"format_version": FORMAT_VERSION, **(meta or {})}
    payload = {name: _little_endian(np.asarray(a)) for name, a in arrays.items()}
    payload[META_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read an archive written by :func:`save_arrays`.

    Raises :class:`DatasetError` for missing, truncated or foreign files and
    for a format version this code does not understand.
    """
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {name: data[name] for name in data.files}
    except FileNotFoundError:
        raise DatasetError(f"{path}: no such archive") from None
    except (zipfile.BadZipFile, EOFError, ValueError, OSError, KeyError) as exc:
        raise DatasetError(f"{path}: unreadable archive ({exc})") from exc
    if META_KEY not in arrays:
        raise DatasetError(f"{path}: missing metadata header")
    try:
        meta = json.loads(arrays.pop(META_KEY).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{path}: corrupt metadata header") from exc
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetError(
            f"{path}: archive format version {version}, this build reads version {FORMAT_VERSION}"
        )
    return arrays, meta


def _little_endian(a: np.ndarray) -> np.ndarray:
    if a.dtype.byteorder == ">":
        return a.astype(a.dtype.newbyteorder("<"))
    return a
