"""On-disk formats: matrix containers, decompositions, adapters, CSV and manifests.

A matrix container is a JSON sidecar `name.json`
({"rows", "cols", "dtype": "f64le", "layout": "row-major"}) next to the raw
little-endian float64 blob `name.bin`.
"""

import csv
import hashlib
import json
import logging
from dataclasses import fields, is_dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from adapters import STATE_CLASSES, AdapterKind, OFTState
from errors import FormatError
from linalg import ColumnSelect, SpectralDecomposition

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MATRIX_DTYPE = "f64le"
MATRIX_LAYOUT = "row-major"
MATRIX_KEYS = {"rows", "cols", "dtype", "layout"}
ADAPTER_HEADER = "adapter.json"
DECOMPOSITION_HEADER = "decomposition.json"


def _stem(path):
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".bin") else path


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


##############################################################################
# JSON helpers


def jsonable(value):
    """Plain JSON types for numpy scalars/arrays, enums, column selections and dataclasses."""

    if isinstance(value, Enum):
        return value.value
    if isinstance(value, ColumnSelect):
        return value.to_dict()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if is_dataclass(value):
        return {f.name: jsonable(getattr(value, f.name)) for f in fields(value)}
    return value


def write_json(path, document):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(jsonable(document), handle, indent=2, sort_keys=True, allow_nan=False)
        handle.write("\n")
    return path


def read_json(path):
    try:
        with open(path, encoding="utf-8") as handle:
            return json.load(handle)
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: no such file") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


##############################################################################
# Matrix containers


def write_matrix(path, matrix):
    """Write `matrix` as name.json + name.bin; returns the two paths."""

    arr = np.asarray(matrix, dtype="<f8")
    if arr.ndim != 2:
        raise FormatError(f"matrix containers hold 2-D arrays, got shape {arr.shape}")
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = stem.with_suffix(".json")
    blob = stem.with_suffix(".bin")
    with open(blob, "wb") as handle:
        handle.write(np.ascontiguousarray(arr).tobytes())
    write_json(header, {"rows": arr.shape[0], "cols": arr.shape[1],
                        "dtype": MATRIX_DTYPE, "layout": MATRIX_LAYOUT})
    return header, blob


def read_matrix(path):
    stem = _stem(path)
    header = read_json(stem.with_suffix(".json"))
    if not isinstance(header, dict) or set(header) != MATRIX_KEYS:
        raise FormatError(f"{stem}.json: header must have exactly the keys {sorted(MATRIX_KEYS)}")
    if header["dtype"] != MATRIX_DTYPE or header["layout"] != MATRIX_LAYOUT:
        raise FormatError(f"{stem}.json: unsupported dtype/layout {header['dtype']}/{header['layout']}")
    rows, cols = header["rows"], header["cols"]
    if not all(isinstance(x, int) and not isinstance(x, bool) and x >= 0 for x in (rows, cols)):
        raise FormatError(f"{stem}.json: rows and cols must be nonnegative integers")

    blob = stem.with_suffix(".bin")
    try:
        data = blob.read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"{blob}: no such file") from exc
    if len(data) != rows * cols * 8:
        raise FormatError(f"{blob}: expected {rows * cols * 8} bytes for {rows}x{cols}, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f8").reshape(rows, cols).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{blob}: matrix has non-finite entries")
    return arr


##############################################################################
# Decompositions


def write_decomposition(directory, d):
    directory = Path(directory)
    write_matrix(directory / "u", d.u)
    write_matrix(directory / "s", d.s[None, :])
    write_matrix(directory / "v", d.v)
    write_json(directory / DECOMPOSITION_HEADER, {"schema_version": SCHEMA_VERSION, "rows": d.shape[0],
                                                  "cols": d.shape[1], "k": d.k, "canonical": d.canonical})
    return directory


def read_decomposition(directory):
    directory = Path(directory)
    header = read_json(directory / DECOMPOSITION_HEADER)
    _check_schema(header, directory / DECOMPOSITION_HEADER)
    u, s, v = (read_matrix(directory / name) for name in ("u", "s", "v"))
    k = header.get("k")
    if s.shape != (1, k) or u.shape != (header.get("rows"), k) or v.shape != (header.get("cols"), k):
        raise FormatError(f"{directory}: factor shapes u{u.shape} s{s.shape} v{v.shape} disagree with the header")
    return SpectralDecomposition(u, s[0], v, canonical=bool(header.get("canonical", False)))


##############################################################################
# Adapter containers


def _check_schema(header, where):
    if not isinstance(header, dict) or header.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"{where}: expected schema_version {SCHEMA_VERSION}")


def write_adapter(directory, state):
    """Header adapter.json plus one matrix container per tensor (1-D tensors as 1 x n)."""

    directory = Path(directory)
    frozen = set(state.frozen())
    entries = []
    for name, arr in state.tensors().items():
        stem = f"tensor_{name}"
        write_matrix(directory / stem, arr[None, :] if arr.ndim == 1 else arr)
        entries.append({"name": name, "shape": list(arr.shape), "frozen": name in frozen, "file": stem})
    columns = getattr(state, "columns", None)
    write_json(directory / ADAPTER_HEADER, {
        "schema_version": SCHEMA_VERSION,
        "kind": state.kind.value,
        "base_shape": list(state.base_shape),
        "rank": state.rank,
        "columns": None if columns is None else columns.to_dict(),
        "seed": state.seed,
        "extras": state.extras(),
        "tensors": entries,
    })
    logger.debug("wrote %s adapter to %s", state.kind.value, directory)
    return directory


def read_adapter(directory):
    directory = Path(directory)
    header = read_json(directory / ADAPTER_HEADER)
    _check_schema(header, directory / ADAPTER_HEADER)
    try:
        kind = AdapterKind(header["kind"])
        cls = STATE_CLASSES[kind]
        tensors = {}
        for entry in header["tensors"]:
            arr = read_matrix(directory / entry["file"])
            shape = tuple(entry["shape"])
            if arr.size != int(np.prod(shape)):
                raise FormatError(f"{directory}: tensor {entry['name']} does not have shape {shape}")
            tensors[entry["name"]] = arr.reshape(shape)
        columns = None if header["columns"] is None else ColumnSelect.from_dict(header["columns"])
        if cls is OFTState:
            tensors = dict(sorted(tensors.items(), key=lambda item: _oft_order(item[0])))
        return cls.from_parts(base_shape=tuple(header["base_shape"]), rank=header["rank"],
                              seed=header["seed"], columns=columns, extras=header["extras"],
                              tensors=tensors)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{directory / ADAPTER_HEADER}: malformed adapter header ({exc!r})") from exc


def _oft_order(name):
    return -1 if name == "raw" else int(name.split("_")[1])


##############################################################################
# CSV and manifests


def write_csv(path, rows):
    """Rows of cells written with LF endings; floats should already be repr() strings."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        for row in rows:
            writer.writerow(row)
    return path


def artifact_digests(paths, root):
    """{relative path: sha256} for every file under the given paths."""

    root = Path(root)
    digests = {}
    for path in paths:
        path = Path(path)
        files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
        for file in files:
            digests[file.relative_to(root).as_posix()] = sha256_file(file)
    return dict(sorted(digests.items()))


def write_manifest(directory, command, params, artifacts, versions, settings=None, measurements=None):
    """manifest.json recording how to rerun `command` and the SHA-256 of what it wrote."""

    directory = Path(directory)
    document = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "params": params,
        "settings": settings or {},
        "versions": versions,
        "artifacts": artifact_digests(artifacts, directory),
    }
    if measurements:
        document["measurements"] = measurements
    return write_json(directory / "manifest.json", document)


def read_manifest(path):
    document = read_json(path)
    _check_schema(document, path)
    for key in ("command", "params"):
        if key not in document:
            raise FormatError(f"{path}: manifest is missing {key!r}")
    return document
