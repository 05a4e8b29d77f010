"""DrawStore persistence: a JSON manifest plus one flat little-endian array per field."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .gibbs import Draw, DrawStore
from .io import InputError, dump_json

FORMAT_VERSION = 1
FIELDS = ("beta", "sigma2", "eta", "lam", "GammaT", "GammaB", "rho")
_LE = "<f8"


def _shape(name: str, dims: dict, k: int) -> tuple[int, ...]:
    n, p, d, qT, qB = dims["n"], dims["p"], dims["d"], dims["qT"], dims["qB"]
    return {
        "beta": (d, p),
        "sigma2": (p,),
        "eta": (n, k),
        "lam": (p, k),
        "GammaT": (d, qT),
        "GammaB": (qB, k),
        "rho": (k,),
    }[name]


def _dims(store: DrawStore) -> dict:
    first = store.draws[0]
    return {
        "n": int(first.eta.shape[0]),
        "p": int(first.lam.shape[0]),
        "d": int(first.beta.shape[0]),
        "qT": int(first.GammaT.shape[1]),
        "qB": int(first.GammaB.shape[0]),
    }


def save_store(store: DrawStore, directory, fmt: str = "binary") -> Path:
    """Write ``store`` into ``directory`` (created if needed).

    ``fmt="binary"`` concatenates every draw's row-major array into
    ``<field>.f64``; ``fmt="csv"`` writes ``<field>.csv`` with one row per
    draw holding the flattened values.
    """
    if fmt not in ("binary", "csv"):
        raise ValueError(f"unknown draw format {fmt!r}")
    if len(store) == 0:
        raise ValueError("cannot save an empty DrawStore")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dims = _dims(store)
    manifest = {
        "format_version": FORMAT_VERSION,
        "encoding": "float64-le row-major" if fmt == "binary" else "csv",
        "dims": dims,
        "fields": list(FIELDS),
        "iterations_kept": [int(d.iteration) for d in store],
        "k_star": [int(d.k_star) for d in store],
        "meta": store.meta,
    }
    if fmt == "binary":
        for name in FIELDS:
            with open(directory / f"{name}.f64", "wb") as fh:
                for d in store:
                    fh.write(np.ascontiguousarray(getattr(d, name), dtype=_LE).tobytes())
    else:
        for name in FIELDS:
            with open(directory / f"{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                for d in store:
                    w.writerow([repr(float(v)) for v in np.ravel(getattr(d, name))])
    (directory / "meta.json").write_text(dump_json(manifest))
    return directory


def load_store(directory) -> DrawStore:
    directory = Path(directory)
    path = directory / "meta.json"
    if not path.is_file():
        raise InputError("no draws manifest (meta.json) found", directory)
    manifest = json.loads(path.read_text())
    dims, ks, iters = manifest["dims"], manifest["k_star"], manifest["iterations_kept"]
    if not ks:
        raise InputError("draws directory holds no draws", directory)
    binary = manifest["encoding"].startswith("float64")
    columns = {}
    for name in FIELDS:
        sizes = [int(np.prod(_shape(name, dims, k))) for k in ks]
        if binary:
            flat = np.fromfile(directory / f"{name}.f64", dtype=_LE).astype(float)
            if flat.size != sum(sizes):
                raise InputError(f"{name}.f64 holds {flat.size} values, manifest implies {sum(sizes)}", directory)
            offsets = np.concatenate([[0], np.cumsum(sizes)])
            columns[name] = [flat[offsets[t]:offsets[t + 1]] for t in range(len(ks))]
        else:
            with open(directory / f"{name}.csv", newline="") as fh:
                rows = [np.array([float(c) for c in row]) if row else np.empty(0) for row in csv.reader(fh)]
            if len(rows) != len(ks) or any(r.size != s for r, s in zip(rows, sizes)):
                raise InputError(f"{name}.csv does not match the manifest", directory)
            columns[name] = rows
    draws = []
    for t, (it, k) in enumerate(zip(iters, ks)):
        parts = {name: columns[name][t].reshape(_shape(name, dims, k)) for name in FIELDS}
        draws.append(Draw(int(it), **parts))
    return DrawStore(draws, manifest["meta"])
