"""On-disk sample format: CSV matrices plus a JSON manifest.

A manifest looks like::

    {"logits": "logits.csv", "labels": "labels.csv",
     "features": "features.csv", "class_names": null}

Paths are resolved relative to the manifest. Matrix CSVs hold one sample per
line; an optional single header line is recognised by a non-numeric first
token. Labels are a single column of integers.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class SampleSet:
    logits: np.ndarray
    labels: np.ndarray
    features: Optional[np.ndarray] = None
    class_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        labels = np.asarray(self.labels)
        if logits.ndim != 2:
            raise DataError(f"logits must be 2-D, got shape {logits.shape}")
        n, m = logits.shape
        if n < 1:
            raise DataError("sample set is empty")
        if m < 2:
            raise DataError(f"need at least 2 classes, got {m}")
        if not np.all(np.isfinite(logits)):
            r, c = np.argwhere(~np.isfinite(logits))[0]
            raise DataError(f"non-finite logit at row {r}, column {c}")
        if labels.ndim != 1 or len(labels) != n:
            raise DataError(f"row-count mismatch: {n} logit rows vs {labels.shape} labels")
        if not np.issubdtype(labels.dtype, np.integer):
            raise DataError("labels must be integers")
        bad = np.flatnonzero((labels < 0) | (labels >= m))
        if len(bad):
            raise DataError(f"label out of range at row {int(bad[0])}")
        features = self.features
        if features is not None:
            features = np.asarray(features, dtype=np.float64)
            if features.ndim != 2 or features.shape[0] != n:
                raise DataError(f"row-count mismatch: {n} logit rows vs features {features.shape}")
            if features.shape[1] < 1:
                raise DataError("features need at least one column")
            if not np.all(np.isfinite(features)):
                r, c = np.argwhere(~np.isfinite(features))[0]
                raise DataError(f"non-finite feature at row {r}, column {c}")
        names = self.class_names
        if names is not None:
            names = tuple(str(s) for s in names)
            if len(names) != m:
                raise DataError(f"{len(names)} class names for {m} classes")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels.astype(np.int64))
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "class_names", names)

    @property
    def n(self) -> int:
        return self.logits.shape[0]

    @property
    def n_classes(self) -> int:
        return self.logits.shape[1]

    @property
    def feature_dim(self) -> Optional[int]:
        return None if self.features is None else self.features.shape[1]


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def _read_rows(path: Path) -> list[tuple[int, list[str]]]:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(i + 1, row) for i, row in enumerate(csv.reader(fh)) if row]
    if rows and not _is_number(rows[0][1][0].strip()):
        rows = rows[1:]
    return rows


def read_matrix_csv(path) -> np.ndarray:
    """Parse a numeric CSV. Errors name the file, line and column (1-based)."""
    path = Path(path)
    rows = _read_rows(path)
    if not rows:
        raise DataError(f"{path.name}: no data rows")
    width = len(rows[0][1])
    out = np.empty((len(rows), width), dtype=np.float64)
    for r, (line, row) in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path.name}: row {line} has {len(row)} columns, expected {width}")
        for c, token in enumerate(row):
            try:
                value = float(token)
            except ValueError:
                raise DataError(f"{path.name}: unparsable value {token!r} at row {line}, column {c + 1}") from None
            if not math.isfinite(value):
                raise DataError(f"{path.name}: non-finite value at row {line}, column {c + 1}")
            out[r, c] = value
    return out


def read_labels_csv(path, n_classes: Optional[int] = None) -> np.ndarray:
    path = Path(path)
    rows = _read_rows(path)
    if not rows:
        raise DataError(f"{path.name}: no data rows")
    out = np.empty(len(rows), dtype=np.int64)
    for r, (line, row) in enumerate(rows):
        if len(row) != 1:
            raise DataError(f"{path.name}: row {line} has {len(row)} columns, expected 1")
        try:
            out[r] = int(row[0].strip())
        except ValueError:
            raise DataError(f"{path.name}: non-integer label {row[0]!r} at row {line}, column 1") from None
        if n_classes is not None and not 0 <= out[r] < n_classes:
            raise DataError(f"{path.name}: label out of range at row {line} ({out[r]} not in [0, {n_classes}))")
    return out


def load_sampleset(manifest_path) -> SampleSet:
    """Load and validate the sample set described by a manifest file."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"missing file: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path.name}: invalid JSON ({exc})") from None
    if not isinstance(manifest, dict):
        raise DataError(f"{manifest_path.name}: manifest must be a JSON object")
    for key in ("logits", "labels"):
        if not isinstance(manifest.get(key), str):
            raise DataError(f"{manifest_path.name}: missing required key {key!r}")
    base = manifest_path.parent
    logits = read_matrix_csv(base / manifest["logits"])
    n, m = logits.shape
    labels = read_labels_csv(base / manifest["labels"], n_classes=m)
    if len(labels) != n:
        raise DataError(f"row-count mismatch: {n} logit rows vs {len(labels)} labels")
    features = None
    if manifest.get("features") is not None:
        features = read_matrix_csv(base / manifest["features"])
        if features.shape[0] != n:
            raise DataError(f"row-count mismatch: {n} logit rows vs {features.shape[0]} feature rows")
    names = manifest.get("class_names")
    if names is not None and not (isinstance(names, list) and all(isinstance(s, str) for s in names)):
        raise DataError(f"{manifest_path.name}: class_names must be null or a list of strings")
    return SampleSet(logits, labels, features, None if names is None else tuple(names))


def validate_pair(val: SampleSet, test: SampleSet) -> None:
    """Check that a fitting split and an evaluation split are compatible."""
    if val.n_classes != test.n_classes:
        raise DataError(f"class-count mismatch: {val.n_classes} vs {test.n_classes}")
    if val.feature_dim is not None and test.feature_dim is not None and val.feature_dim != test.feature_dim:
        raise DataError(f"feature-dimension mismatch: {val.feature_dim} vs {test.feature_dim}")


def format_float(x: float) -> str:
    # repr is the shortest string that round-trips exactly
    return repr(float(x))


def write_matrix_csv(path, matrix: np.ndarray, header: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in matrix:
            fh.write(",".join(format_float(x) for x in row) + "\n")


def write_sampleset(directory, samples: SampleSet) -> Path:
    """Write ``samples`` as CSV files plus ``manifest.json``; return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    m = samples.n_classes
    write_matrix_csv(directory / "logits.csv", samples.logits, [f"logit_{j}" for j in range(m)])
    with open(directory / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("label\n")
        fh.writelines(f"{int(a)}\n" for a in samples.labels)
    manifest = {"logits": "logits.csv", "labels": "labels.csv", "features": None,
                "class_names": None if samples.class_names is None else list(samples.class_names)}
    if samples.features is not None:
        d = samples.features.shape[1]
        write_matrix_csv(directory / "features.csv", samples.features, [f"feature_{j}" for j in range(d)])
        manifest["features"] = "features.csv"
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path
