"""On-disk formats: MSEQ sequence containers, model files, score CSVs.

All writers go through :func:`atomic_write` (temporary file + rename) and
produce byte-identical output for identical input.
"""

from __future__ import annotations

import csv
import io as _io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ParseError
from .models import Model, ModelSpec, SequenceDataset

MSEQ_MAGIC = b"MSEQ1"
_MSEQ_HEADER = struct.Struct("<IIIIB")
DTYPE_F32, DTYPE_U8 = 0, 1
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}
UNLABELLED = 255

MODEL_MAGIC = b"MATLSTM-MODEL"
MODEL_FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


def atomic_write(path, data: bytes | str) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


# ------------------------------------------------------------------ MSEQ


@dataclass
class Mseq:
    frames: np.ndarray  # (N, T, n_r, n_c) float64
    labels: np.ndarray  # int8, -1 for unlabelled
    dtype: int = DTYPE_F32


def choose_dtype(frames: np.ndarray) -> int:
    """Unsigned bytes when every value is an integer in 0..255, else 32-bit float."""
    f = np.asarray(frames)
    if f.size and np.all((f >= 0) & (f <= 255) & (f == np.round(f))):
        return DTYPE_U8
    return DTYPE_F32


def encode_mseq(frames: np.ndarray, labels: np.ndarray, dtype: int | None = None) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ValueError(f"frames must be (N, T, n_r, n_c), got {frames.shape}")
    n, T, r, c = frames.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"need {n} labels, got {labels.shape}")
    if not np.all(np.isin(labels, (-1, 0, 1))):
        raise ValueError("labels must be 0, 1 or -1 (unlabelled)")
    dtype = choose_dtype(frames) if dtype is None else dtype
    if dtype not in _DTYPES:
        raise ValueError(f"unknown dtype code {dtype}")
    lab = np.where(labels < 0, UNLABELLED, labels).astype(np.uint8)
    payload = np.ascontiguousarray(frames, dtype=_DTYPES[dtype]).tobytes()
    return MSEQ_MAGIC + _MSEQ_HEADER.pack(n, T, r, c, dtype) + lab.tobytes() + payload


def decode_mseq(buf: bytes) -> Mseq:
    if buf[: len(MSEQ_MAGIC)] != MSEQ_MAGIC:
        raise ParseError(f"not an MSEQ file: magic {buf[:len(MSEQ_MAGIC)]!r}", offset=0)
    off = len(MSEQ_MAGIC)
    if len(buf) < off + _MSEQ_HEADER.size:
        raise ParseError("MSEQ header truncated", offset=len(buf))
    n, T, r, c, dtype = _MSEQ_HEADER.unpack_from(buf, off)
    off += _MSEQ_HEADER.size
    if dtype not in _DTYPES:
        raise ParseError(f"unknown MSEQ dtype code {dtype}", offset=off - 1)
    lab = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off) if len(buf) >= off + n else None
    if lab is None:
        raise ParseError(f"MSEQ labels truncated: need {n} bytes", offset=len(buf))
    if np.any((lab > 1) & (lab != UNLABELLED)):
        bad = int(np.flatnonzero((lab > 1) & (lab != UNLABELLED))[0])
        raise ParseError(f"invalid label byte {lab[bad]}", offset=off + bad)
    off += n
    dt = _DTYPES[dtype]
    want = n * T * r * c * dt.itemsize
    if len(buf) - off != want:
        raise ParseError(
            f"MSEQ payload is {len(buf) - off} bytes, header implies {want}", offset=off
        )
    frames = np.frombuffer(buf, dtype=dt, offset=off).reshape(n, T, r, c).astype(np.float64)
    labels = np.where(lab == UNLABELLED, -1, lab).astype(np.int8)
    return Mseq(frames, labels, dtype)


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_dataset(path, ds: SequenceDataset, meta: dict, dtype: int | None = None) -> None:
    """MSEQ payload plus a JSON sidecar holding ids and metadata (fingerprint, config)."""
    atomic_write(path, encode_mseq(ds.frames, ds.labels, dtype))
    side = dict(meta)
    side["ids"] = list(ds.ids)
    atomic_write(sidecar_path(path), dump_json(side))


def read_dataset(path) -> tuple[SequenceDataset, dict]:
    m = decode_mseq(Path(path).read_bytes())
    meta: dict = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    n = len(m.labels)
    ids = meta.pop("ids", None) or [str(i) for i in range(n)]
    if len(ids) != n:
        raise ParseError(f"sidecar lists {len(ids)} ids for {n} sequences")
    meta["dtype"] = m.dtype
    return SequenceDataset(m.frames, m.labels, ids), meta


# ------------------------------------------------------------------ model files


def encode_model(model: Model, meta: dict | None = None) -> bytes:
    """Magic, format version, JSON header, then float64 parameters in header order."""
    names = sorted(model.params)
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "params": [[k, list(np.shape(model.params[k]))] for k in names],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes() for k in names)
    return MODEL_MAGIC + _U32.pack(MODEL_FORMAT_VERSION) + _U32.pack(len(hbytes)) + hbytes + payload


def decode_model(buf: bytes) -> tuple[Model, dict]:
    if buf[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ParseError("not a model file", offset=0)
    off = len(MODEL_MAGIC)
    if len(buf) < off + 8:
        raise ParseError("model header truncated", offset=len(buf))
    (version,) = _U32.unpack_from(buf, off)
    if version != MODEL_FORMAT_VERSION:
        raise ParseError(f"unsupported model format version {version}", offset=off)
    (hlen,) = _U32.unpack_from(buf, off + 4)
    off += 8
    try:
        header = json.loads(buf[off:off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"model header is not JSON: {exc}", offset=off) from exc
    off += hlen
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        if len(buf) < off + 8 * count:
            raise ParseError(f"model payload truncated in {name}", offset=len(buf))
        params[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    if off != len(buf):
        raise ParseError(f"{len(buf) - off} trailing bytes after model payload", offset=off)
    spec = ModelSpec.from_dict(header["spec"])
    return Model(spec, params), header.get("meta", {})


def save_model(path, model: Model, meta: dict | None = None) -> None:
    atomic_write(path, encode_model(model, meta))


def load_model(path) -> tuple[Model, dict]:
    return decode_model(Path(path).read_bytes())


# ------------------------------------------------------------------ CSV


def scores_csv(ids: Sequence[str], scores: np.ndarray, labels: np.ndarray) -> str:
    """``id,score,label``; scores printed with 17 significant digits, empty label if unlabelled."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "score", "label"])
    for i, s, lab in zip(ids, scores, labels):
        w.writerow([i, repr(float(s)), "" if lab < 0 else int(lab)])
    return buf.getvalue()


def read_scores_csv(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    ids, scores, labels = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["id"])
            scores.append(float(row["score"]))
            labels.append(int(row["label"]) if row["label"] != "" else -1)
    return ids, np.array(scores), np.array(labels, dtype=np.int8)


@dataclass
class Table:
    header: list[str]
    rows: list[list[Any]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for r in self.rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
        return buf.getvalue()
