"""Feature files, JSON documents, score files and run configuration.

Binary feature files (``.mdfv``) are little-endian::

    magic  b"MDFV"        4 bytes
    version u32 = 1
    n       u64
    d       u64
    dtype   u8            1 = float32, 2 = float64
    has_labels u8
    payload n*d values, row-major
    labels  n*i32         only if has_labels

Anything else is read as CSV: a header row, then one row per sample, with an
optional final ``label`` column.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import BadDtype, BadMagic, ConfigError, RaggedCsv, TruncatedFile
from .gda import FeatureMatrix

MAGIC = b"MDFV"
VERSION = 1
_HEADER = struct.Struct("<4sIQQBB")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def write_features(path, features: FeatureMatrix, dtype: int = 2) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        _write_csv(path, features)
        return
    if dtype not in _DTYPES:
        raise BadDtype(f"unknown dtype code {dtype}")
    has_labels = features.labels is not None
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, features.n, features.d, dtype, int(has_labels)))
        fh.write(np.ascontiguousarray(features.values, dtype=_DTYPES[dtype]).tobytes())
        if has_labels:
            labels = np.asarray(features.labels)
            if labels.size and (labels.min() < 0 or labels.max() >= 2**31):
                raise BadDtype("labels must lie in [0, 2^31)")
            fh.write(labels.astype("<i4").tobytes())


def read_features(path) -> FeatureMatrix:
    """Read an MDFV or CSV feature file.

    Raises:
        BadMagic, TruncatedFile, BadDtype: malformed binary file (with byte offset).
        RaggedCsv: a CSV row with the wrong number of fields (with line number).
    """
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC or path.suffix.lower() == ".mdfv":
        return _read_binary(path.read_bytes())
    return _read_csv(path)


def _read_binary(raw: bytes) -> FeatureMatrix:
    if raw[:4] != MAGIC:
        raise BadMagic(f"bad magic {raw[:4]!r}", offset=0)
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"header needs {_HEADER.size} bytes, file has {len(raw)}", offset=len(raw))
    _, version, n, d, dtype, has_labels = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise BadDtype(f"unsupported version {version}", offset=4)
    if dtype not in _DTYPES:
        raise BadDtype(f"unknown dtype code {dtype}", offset=24)
    if has_labels not in (0, 1):
        raise BadDtype(f"has_labels must be 0 or 1, got {has_labels}", offset=25)
    dt = _DTYPES[dtype]
    start = _HEADER.size
    end = start + n * d * dt.itemsize
    total = end + (4 * n if has_labels else 0)
    if len(raw) < total:
        raise TruncatedFile(f"expected {total} bytes, file has {len(raw)}", offset=len(raw))
    if len(raw) > total:
        raise TruncatedFile(f"{len(raw) - total} trailing bytes after payload", offset=total)
    values = np.frombuffer(raw, dtype=dt, count=n * d, offset=start).reshape(n, d)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<i4", count=n, offset=end).astype(np.int64)
        if labels.size and labels.min() < 0:
            raise BadDtype("negative label", offset=end + 4 * int(np.argmin(labels)))
    return FeatureMatrix(values.astype(np.float64), labels)


def _write_csv(path: Path, features: FeatureMatrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = [f"f{j}" for j in range(features.d)]
        if features.labels is not None:
            header.append("label")
        w.writerow(header)
        for i, row in enumerate(features.values):
            cells = [repr(float(v)) for v in row]
            if features.labels is not None:
                cells.append(str(int(features.labels[i])))
            w.writerow(cells)


def _read_csv(path: Path) -> FeatureMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise RaggedCsv("empty CSV file", line=1)
    header = [h.strip() for h in rows[0]]
    has_labels = bool(header) and header[-1].lower() == "label"
    width = len(header)
    values, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise RaggedCsv(f"expected {width} fields, got {len(row)}", line=lineno)
        try:
            nums = [float(c) for c in (row[:-1] if has_labels else row)]
            if has_labels:
                labels.append(int(row[-1]))
        except ValueError as exc:
            raise RaggedCsv(f"unparseable field: {exc}", line=lineno) from None
        values.append(nums)
    d = width - int(has_labels)
    arr = np.array(values, dtype=np.float64).reshape(len(values), d)
    return FeatureMatrix(arr, np.array(labels, dtype=np.int64) if has_labels else None)


# ---------------------------------------------------------------------------
# scores


def write_scores(path, scores, is_positive=None) -> None:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if is_positive is None:
            w.writerow(["score"])
            w.writerows([[repr(float(s))] for s in scores])
        else:
            w.writerow(["score", "is_positive"])
            w.writerows([[repr(float(s)), int(bool(p))] for s, p in zip(scores, is_positive)])


def read_scores(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read a score CSV: a ``score`` column and optionally ``is_positive``."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        return np.empty(0), None
    header = [h.strip() for h in rows[0]]
    if "score" not in header:
        raise RaggedCsv("score file needs a 'score' column", line=1)
    si = header.index("score")
    li = header.index("is_positive") if "is_positive" in header else None
    scores, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise RaggedCsv(f"expected {len(header)} fields, got {len(row)}", line=lineno)
        try:
            scores.append(float(row[si]))
            if li is not None:
                labels.append(int(row[li]) != 0)
        except ValueError as exc:
            raise RaggedCsv(f"unparseable field: {exc}", line=lineno) from None
    return np.array(scores), (np.array(labels, dtype=bool) if li is not None else None)


# ---------------------------------------------------------------------------
# JSON


def _check_finite(obj, where="$"):
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError(f"non-finite number at {where}")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{where}.{k}")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _check_finite(v, f"{where}[{i}]")


def save_json(path, doc: dict) -> None:
    """Write ``doc``; Python's float repr round-trips every double exactly."""
    _check_finite(doc)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# run configuration

try:  # Python >= 3.11
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover
    import tomli as _toml

DEFAULT_CONFIG = {
    "seed": 7,
    "data": {
        "classes": 4,
        "dim": 16,
        "latent_dim": 4,
        "spread": 3.0,
        "noise": 0.1,
        "ood_shift": 3.0,
        "n_train": 2000,
        "n_val": 500,
        "n_test": 500,
    },
    "net": {"hidden": [32, 32], "epochs": 50, "batch_size": 64, "learning_rate": 0.05, "momentum": 0.9},
    "gda": {"rel_ridge": 1e-6},
    "preprocess": {"eps_grid": [0.0, 0.0005, 0.001, 0.0014, 0.002, 0.0024, 0.005, 0.01, 0.05, 0.1, 0.2]},
    "cv": {"outer_folds": 5, "inner_folds": 5, "l2_grid": [1e-4, 1e-2, 1.0], "iterations": 2000, "step": 0.1},
    "attack": {"eps_fraction": 0.25, "bim_iters": 20},
    "garbage": {"n": 200, "target_class": 0, "step": 0.05, "iterations": 500},
    "odin": {"temperatures": [1.0, 10.0, 100.0, 1000.0]},
    "metrics": ["tnr_at_tpr95", "auroc", "detection_accuracy", "aupr_in", "aupr_out"],
    "paths": {"outdir": "."},
}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        name = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{name}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{name}' must be a table")
            out[key] = _merge(base[key], value, name + ".")
        else:
            out[key] = value
    return out


def load_config(path=None, text: str | None = None) -> dict:
    """Defaults overlaid with a TOML file; unknown keys raise :class:`ConfigError`."""
    if path is None and text is None:
        return json.loads(json.dumps(DEFAULT_CONFIG))
    if text is None:
        text = Path(path).read_text()
    try:
        user = _toml.loads(text)
    except _toml.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    return _merge(DEFAULT_CONFIG, user)
