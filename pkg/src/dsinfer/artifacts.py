"""On-disk formats: model checkpoints, labelled-set CSVs, JSON records and run directories.

A checkpoint is one JSON header line followed by the parameters as a raw
little-endian float64 block::

    {"arch": {...}, "seed": 0, "train_meta": {...}, "n_params": 1234, "dtype": "<f8"}\\n
    <8 * n_params bytes>
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .models import ArchSpec, LabeledSet, Model

CHECKPOINT_DTYPE = "<f8"


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def canonical_json(obj) -> str:
    return json.dumps(jsonable(obj), sort_keys=True, separators=(",", ":"))


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# ------------------------------------------------------------ checkpoints

def save_checkpoint(path, model: Model) -> None:
    header = {
        "arch": model.arch.to_dict(),
        "seed": jsonable(model.train_meta.get("seed")),
        "train_meta": jsonable(model.train_meta),
        "n_params": int(model.params.size),
        "dtype": CHECKPOINT_DTYPE,
    }
    with open(path, "wb") as fh:
        fh.write(canonical_json(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(model.params, dtype=CHECKPOINT_DTYPE).tobytes())


def load_checkpoint(path) -> Model:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    header = json.loads(blob[:nl].decode("utf-8"))
    if header.get("dtype") != CHECKPOINT_DTYPE:
        raise ValueError(f"{path}: unsupported parameter dtype {header.get('dtype')!r}")
    body = blob[nl + 1:]
    n = int(header["n_params"])
    if len(body) != 8 * n:
        raise ValueError(f"{path}: expected {8 * n} parameter bytes, found {len(body)}")
    params = np.frombuffer(body, dtype=CHECKPOINT_DTYPE).astype(np.float64)
    return Model(ArchSpec.from_dict(header["arch"]), params, header.get("train_meta") or {})


# ---------------------------------------------------------- labelled sets

def write_labeled_csv(path, data: LabeledSet) -> None:
    """``index,x0..x{d-1},label``; the split tag goes to ``<path>.json``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", *[f"x{i}" for i in range(data.dim)], "label"])
        for i, x, y in zip(data.index, data.inputs, data.labels):
            w.writerow([int(i), *[repr(float(v)) for v in x], int(y)])
    write_json(str(path) + ".json", {"split_tag": data.split_tag, "n": len(data), "dim": data.dim})


def read_labeled_csv(path) -> LabeledSet:
    side = Path(str(path) + ".json")
    tag = read_json(side)["split_tag"] if side.is_file() else "synthetic"
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[0] != "index" or header[-1] != "label":
            raise ValueError(f"{path}: not a labelled-set file")
        rows = list(r)
    dim = len(header) - 2
    X = np.array([[float(v) for v in row[1:-1]] for row in rows]).reshape(len(rows), dim)
    return LabeledSet(X, np.array([int(row[-1]) for row in rows], dtype=np.int64), tag,
                      np.array([int(row[0]) for row in rows], dtype=np.int64))


# ----------------------------------------------------------- run folders

def run_id(*parts) -> str:
    """Content address of a run: hash of its resolved inputs."""
    h = hashlib.sha256()
    for p in parts:
        h.update(canonical_json(p).encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()[:16]


class RunDir:
    """Write a run into a scratch folder and publish it atomically.

    If the final folder already exists the run is not repeated and nothing
    is overwritten; ``existed`` tells the caller which case happened.
    """

    def __init__(self, root, name: str):
        self.root = Path(root)
        self.final = self.root / name
        self.existed = self.final.exists()
        self.path: Optional[Path] = None

    def __enter__(self) -> "RunDir":
        if not self.existed:
            self.root.mkdir(parents=True, exist_ok=True)
            self.path = Path(tempfile.mkdtemp(prefix=".tmp-", dir=self.root))
        return self

    def __exit__(self, exc_type, exc, tb):
        if self.path is None:
            return False
        if exc_type is not None:
            shutil.rmtree(self.path, ignore_errors=True)
            return False
        try:
            os.rename(self.path, self.final)
        except OSError:
            # lost a race with an identical run; keep the first one
            shutil.rmtree(self.path, ignore_errors=True)
            self.existed = True
        return False
