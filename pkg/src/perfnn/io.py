"""Binary dataset container, CSV export and model checkpoints (all little-endian).

Dataset file::

    b"PBEN" | version u16 | n_samples u64 | grid_n u16 | span f64 | sigma f64
    n_samples x (aif_id u32 | aif f64[grid_n] | tcc f64[grid_n] | cbf f64 | tmax f64 | cbv f64)

Checkpoint file::

    b"PMLP" | version u16 | input_dim u16
    repeated until EOF: name_len u16 | name utf-8 | rows u32 | cols u32 | f64[rows*cols]
"""
from __future__ import annotations

import csv
import os
import struct
from typing import Dict

import numpy as np

from .neuralnet import MlpModel, PARAM_NAMES
from .simulate import AcquisitionGrid, Dataset

DATASET_MAGIC = b"PBEN"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"PMLP"
CHECKPOINT_VERSION = 1

_DS_HEADER = struct.Struct("<4sHQHdd")
_CK_HEADER = struct.Struct("<4sHH")


class FormatError(ValueError):
    """Malformed or unsupported file."""


def _record_dtype(n: int) -> np.dtype:
    return np.dtype(
        [("aif_id", "<u4"), ("aif", "<f8", (n,)), ("tcc", "<f8", (n,)),
         ("cbf", "<f8"), ("tmax", "<f8"), ("cbv", "<f8")]
    )


def write_dataset(path, ds: Dataset) -> None:
    n = ds.grid.n_samples
    rec = np.empty(len(ds), dtype=_record_dtype(n))
    rec["aif_id"] = ds.aif_id
    rec["aif"] = ds.aif
    rec["tcc"] = ds.tcc
    rec["cbf"] = ds.cbf
    rec["tmax"] = ds.tmax
    rec["cbv"] = ds.cbv
    with open(path, "wb") as fh:
        fh.write(_DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(ds), n, ds.grid.span, ds.sigma))
        fh.write(rec.tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _DS_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, count, n, span, sigma = _DS_HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file (magic {magic!r})")
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    dtype = _record_dtype(n)
    body = raw[_DS_HEADER.size:]
    if len(body) != count * dtype.itemsize:
        raise FormatError(f"{path}: expected {count} records, found {len(body) / dtype.itemsize:g}")
    rec = np.frombuffer(body, dtype=dtype)
    col = lambda k: np.array(rec[k], dtype=np.float64)  # contiguous, writable copies
    return Dataset(
        AcquisitionGrid(n, span), col("aif"), col("tcc"), col("cbf"), col("tmax"), col("cbv"),
        rec["aif_id"].astype(np.int64), sigma,
    )


def csv_header(n: int):
    return ([f"aif_{i}" for i in range(n)] + [f"tcc_{i}" for i in range(n)]
            + ["cbf", "tmax", "cbv", "aif_id"])


def write_dataset_csv(path, ds: Dataset) -> None:
    # repr() round-trips float64 exactly
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(ds.grid.n_samples))
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.aif[i]] + [repr(float(v)) for v in ds.tcc[i]]
            row += [repr(float(ds.cbf[i])), repr(float(ds.tmax[i])), repr(float(ds.cbv[i])), str(int(ds.aif_id[i]))]
            w.writerow(row)


def read_dataset_csv(path, span: float = 40.0, sigma: float = 0.0) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n = sum(1 for h in header if h.startswith("aif_") and h != "aif_id")
    if header != csv_header(n):
        raise FormatError(f"{path}: unexpected CSV columns")
    data = np.array(body, dtype=np.float64).reshape(-1, len(header))
    return Dataset(
        AcquisitionGrid(n, span), data[:, :n], data[:, n : 2 * n], data[:, 2 * n], data[:, 2 * n + 1],
        data[:, 2 * n + 2], data[:, 2 * n + 3].astype(np.int64), sigma,
    )


def _blocks(model: MlpModel) -> Dict[str, np.ndarray]:
    blocks = {k: model.params[k] for k in PARAM_NAMES}
    blocks["input_scale"] = np.atleast_1d(np.asarray(model.input_scale, dtype=np.float64))
    for k in PARAM_NAMES:
        if k in model.velocity:
            blocks["v." + k] = model.velocity[k]
    return blocks


def write_checkpoint(path, model: MlpModel) -> None:
    out = bytearray(_CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.input_dim))
    for name, arr in _blocks(model).items():
        arr = np.asarray(arr, dtype="<f8")
        rows, cols = (arr.shape[0], arr.shape[1]) if arr.ndim == 2 else (arr.size, 1)
        key = name.encode()
        out += struct.pack("<H", len(key)) + key + struct.pack("<II", rows, cols)
        out += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def read_checkpoint(path) -> MlpModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CK_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, input_dim = _CK_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = _CK_HEADER.size
    blocks = {}
    try:
        while pos < len(raw):
            (klen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + klen].decode()
            pos += klen
            rows, cols = struct.unpack_from("<II", raw, pos)
            pos += 8
            nbytes = 8 * rows * cols
            if pos + nbytes > len(raw):
                raise FormatError(f"{path}: block {name!r} truncated")
            blocks[name] = np.frombuffer(raw[pos : pos + nbytes], dtype="<f8").reshape(rows, cols).copy()
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"{path}: truncated block header") from exc
    missing = [k for k in PARAM_NAMES if k not in blocks]
    if missing:
        raise FormatError(f"{path}: missing parameter blocks {missing}")
    params = {k: blocks[k] if k.startswith("W") else blocks[k].reshape(-1) for k in PARAM_NAMES}
    scale = blocks.get("input_scale", np.array([[100.0]])).reshape(-1)
    velocity = {}
    for k in PARAM_NAMES:
        if "v." + k in blocks:
            velocity[k] = blocks["v." + k].reshape(params[k].shape)
    return MlpModel(params, input_dim, float(scale[0]) if scale.size == 1 else scale, velocity)


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
