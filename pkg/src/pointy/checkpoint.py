"""Binary checkpoint format.

Layout (little-endian)::

    b"PTYC" | u32 version=1 | u64 len + UTF-8 JSON metadata
    u32 n | n x tensor           (model parameters)
    u32 m | m x tensor           (optimizer moments, named "m/<param>", "v/<param>")
    u32 CRC32 of everything before it

    tensor := u16 len + UTF-8 name | u8 dtype (0=f32, 1=f64) | u8 rank | rank x u64 | raw data

The JSON metadata holds the run config, epoch, optimizer step and
hyperparameters, generator state and the metric history.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FormatError

MAGIC = b"PTYC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    optimizer: dict = field(default_factory=dict)  # step + hyperparameters
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    rng_state: dict | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def test_oa(self) -> float | None:
        for row in self.history:
            if row["epoch"] == self.epoch:
                return row["test_oa"]
        return None


def _write_tensors(out: io.BytesIO, tensors: dict[str, np.ndarray]) -> None:
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = {
        "config": ckpt.config,
        "optimizer": ckpt.optimizer,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(meta_raw)) + meta_raw)
    _write_tensors(out, ckpt.params)
    _write_tensors(out, ckpt.moments)
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.pos, self.path)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensors(self, section: str) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I", f"{section} count")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<H", "tensor name length")
            name = self.take(n, "tensor name").decode("utf-8")
            code, rank = self.unpack("<BB", f"{name} header")
            if code not in _DTYPES:
                raise FormatError(f"{name}: unknown dtype code {code}", self.pos - 2, self.path)
            shape = self.unpack(f"<{rank}Q", f"{name} extents")
            dtype = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            data = np.frombuffer(self.take(nbytes, f"{name} data"), dtype=dtype).reshape(shape)
            out[name] = data.astype(dtype.newbyteorder("="))
        return out


def decode_checkpoint(buf: bytes, path=None) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0, path)
    if len(buf) < 20:
        raise FormatError("truncated header", len(buf), path)
    (stored_crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    r = _Reader(buf[:-4], path)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4, path)
    (meta_len,) = r.unpack("<Q", "metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata is not valid JSON ({exc})", 16, path) from None
    params = r.tensors("parameter")
    moments = r.tensors("optimizer")
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} unexpected trailing bytes", r.pos, path)
    if zlib.crc32(buf[:-4]) != stored_crc:
        raise FormatError("CRC32 mismatch", len(buf) - 4, path)
    return Checkpoint(meta["config"], params, meta.get("optimizer", {}), moments, meta.get("epoch", 0),
                      meta.get("rng_state"), meta.get("history", []))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a checkpoint, including per-tensor shapes against its config."""
    path = Path(path)
    ckpt = decode_checkpoint(path.read_bytes(), path)
    from .backbone import ModelConfig, init_params

    model_cfg = ckpt.config.get("model")
    if model_cfg is not None:
        precision = ckpt.config.get("train", {}).get("precision", "f32")
        expected = init_params(ModelConfig.from_dict(model_cfg), precision=precision).parameters()
        for name, arr in ckpt.params.items():
            if name not in expected:
                raise FormatError(f"tensor {name} not part of the configured model", path=path)
            if arr.shape != expected[name].shape:
                raise FormatError(f"tensor {name} has shape {arr.shape}, config implies "
                                  f"{expected[name].shape}", path=path)
        missing = set(expected) - set(ckpt.params)
        if missing:
            raise FormatError(f"missing tensors {sorted(missing)[:5]}", path=path)
    return ckpt
