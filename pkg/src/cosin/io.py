"""File formats: headerless numeric CSV, ``i,j`` mask files and key=value configs."""
from __future__ import annotations

import csv
import json
import os
import shutil
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np

from .model import HyperParams


class InputError(ValueError):
    """A malformed or missing input file; carries the path and 1-based line."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = f"{path}:{line}: " if line is not None else (f"{path}: " if path is not None else "")
        super().__init__(where + message)
        self.path = path
        self.line = line


def format_number(v) -> str:
    """Integers without a decimal point, floats as the shortest round-trip repr."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_matrix(path, a, integer: bool = False) -> None:
    a = np.asarray(a)
    if a.ndim == 1:
        a = a[:, None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in a:
            if integer:
                w.writerow([str(int(v)) for v in row])
            else:
                w.writerow([repr(float(v)) for v in row])


def read_matrix(path, integer: bool = False) -> np.ndarray:
    """Read a dense headerless CSV; ragged rows or bad cells name file and line."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: file not found")
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(c.strip() == "" for c in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise InputError(f"expected {width} columns, found {len(row)}", path, lineno)
            try:
                vals = [float(c) for c in row]
            except ValueError:
                bad = next(c for c in row if not _is_float(c))
                raise InputError(f"cannot parse {bad!r} as a number", path, lineno) from None
            if integer:
                for c, v in zip(row, vals):
                    if not (np.isfinite(v) and v == int(v)):
                        raise InputError(f"expected an integer, found {c!r}", path, lineno)
            rows.append(vals)
    if not rows:
        raise InputError("file is empty", path)
    a = np.array(rows)
    return a.astype(np.int64) if integer else a


def _is_float(c: str) -> bool:
    try:
        float(c)
        return True
    except ValueError:
        return False


def write_mask(path, mask) -> None:
    """Held-out entries as zero-based ``i,j`` pairs in row-major order."""
    ii, jj = np.nonzero(np.asarray(mask, dtype=bool))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for i, j in zip(ii, jj):
            w.writerow([int(i), int(j)])


def read_mask(path, shape) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: file not found")
    mask = np.zeros(shape, dtype=bool)
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 2:
                raise InputError("expected an i,j pair", path, lineno)
            try:
                i, j = int(row[0]), int(row[1])
            except ValueError:
                raise InputError(f"cannot parse {','.join(row)!r} as integer indices", path, lineno) from None
            if not (0 <= i < shape[0] and 0 <= j < shape[1]):
                raise InputError(f"index ({i},{j}) outside a {shape[0]}x{shape[1]} matrix", path, lineno)
            mask[i, j] = True
    return mask


_HP_TYPES = {f.name: f.type for f in fields(HyperParams)}


def parse_hp_value(name: str, text: str):
    if name not in _HP_TYPES:
        raise KeyError(name)
    kind = str(_HP_TYPES[name])
    text = text.strip()
    if "None" in kind and text.lower() in ("", "none"):
        return None
    if "int" in kind:
        return int(text)
    return float(text)


def read_config(path) -> dict:
    """Flat ``key=value`` file of HyperParams fields; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: file not found")
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError("expected key=value", path, lineno)
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                out[key] = parse_hp_value(key, value)
            except KeyError:
                raise InputError(f"unknown setting {key!r}", path, lineno) from None
            except ValueError:
                raise InputError(f"bad value {value!r} for {key}", path, lineno) from None
    return out


def write_config(path, hp: HyperParams) -> None:
    with open(path, "w") as fh:
        for f in fields(hp):
            v = getattr(hp, f.name)
            fh.write(f"{f.name}={'none' if v is None else format_number(v)}\n")


def dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


class atomic_directory:
    """Build an output directory under a temporary name, rename on success.

    The target must not already hold files; on error the partial output is
    removed and the target left untouched.
    """

    def __init__(self, target):
        self.target = Path(target)

    def __enter__(self) -> Path:
        if self.target.exists() and any(self.target.iterdir()):
            raise InputError("output directory exists and is not empty", self.target)
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.target.exists():
            self.target.rmdir()
        os.replace(self.tmp, self.target)
        os.chmod(self.target, 0o755)
        return False
