"""File formats: versioned JSON records, sample CSVs and row-atomic result CSVs."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from pathlib import Path

import numpy as np

from covshift.errors import ConfigError

FORMAT_VERSION = 1


def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, default=_default, allow_nan=True) + "\n"


def write_json(path, obj):
    """Write JSON atomically (temporary file, then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps(obj))
    os.replace(tmp, path)


def read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def provenance(payload) -> str:
    """``covshift-<version>+plan.<sha1[:12]>`` of the canonical JSON payload."""
    from covshift import __version__

    blob = json.dumps(payload, sort_keys=True, default=_default).encode()
    return f"covshift-{__version__}+plan.{hashlib.sha1(blob).hexdigest()[:12]}"


# ---------------------------------------------------------------------------
# Samples


def write_samples_csv(path, x, f_values=None):
    """Header ``dim,x0,...,x{d-1}`` plus ``f_value`` for labeled samples."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    d = x.shape[1]
    header = ["dim"] + [f"x{i}" for i in range(d)]
    if f_values is not None:
        f_values = np.asarray(f_values, dtype=float).ravel()
        if f_values.size != x.shape[0]:
            raise ValueError("f_values and samples differ in length")
        header.append("f_value")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, row in enumerate(x):
            cells = [d] + [repr(float(v)) for v in row]
            if f_values is not None:
                cells.append(repr(float(f_values[i])))
            w.writerow(cells)


def read_samples_csv(path):
    """Return ``(x, f_values or None)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["dim"]:
        raise ConfigError(f"{path}: expected a header starting with 'dim'")
    header = rows[0]
    labeled = header[-1] == "f_value"
    d = len(header) - 1 - int(labeled)
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(header))
    if data.size and np.any(data[:, 0] != d):
        raise ConfigError(f"{path}: dim column disagrees with the header")
    x = data[:, 1:1 + d]
    return x, (data[:, -1] if labeled else None)


# ---------------------------------------------------------------------------
# Result tables


def format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


class RowWriter:
    """CSV writer that emits each row with a single write and flushes it.

    An interrupted run therefore leaves only complete rows behind.
    """

    def __init__(self, path, fields):
        self.fields = tuple(fields)
        self._fh = open(path, "w", newline="")
        self._write(self.fields)

    def _write(self, cells):
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(cells)
        self._fh.write(buf.getvalue())
        self._fh.flush()

    def write(self, row: dict):
        self._write([format_cell(row.get(k)) for k in self.fields])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_rows_csv(path, fields, rows):
    with RowWriter(path, fields) as w:
        for r in rows:
            w.write(r)


def _parse(v: str):
    if v == "":
        return None
    if v in ("true", "false"):
        return v == "true"
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def read_rows_csv(path) -> list:
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]
