"""Binary model checkpoints: a versioned header (magic, model kind, config
hash, update count) followed by named little-endian float32 parameter blobs.
Saving is canonical (names sorted), so load-then-save is byte-identical."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Tensor

MAGIC = b"STCK"
VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    config_hash: str
    update: int
    arrays: dict    # name -> float32 ndarray


def config_hash(*parts) -> str:
    """Stable 16-hex-digit digest of configuration objects (dataclasses,
    dicts, scalars)."""
    def norm(o):
        if dataclasses.is_dataclass(o) and not isinstance(o, type):
            return {"__type__": type(o).__name__,
                    **{k: norm(v) for k, v in dataclasses.asdict(o).items()}}
        if isinstance(o, dict):
            return {str(k): norm(v) for k, v in sorted(o.items())}
        if isinstance(o, (list, tuple)):
            return [norm(v) for v in o]
        return o

    blob = json.dumps([norm(p) for p in parts], sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(path, kind: str, cfg_hash: str, update: int,
                    arrays: dict) -> None:
    kind_b = kind.encode("utf-8")
    hash_b = cfg_hash.encode("ascii")
    out = [MAGIC, struct.pack("<I", VERSION),
           struct.pack("<H", len(kind_b)), kind_b,
           struct.pack("<H", len(hash_b)), hash_b,
           struct.pack("<QI", update, len(arrays))]
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        name_b = name.encode("utf-8")
        out.append(struct.pack("<H", len(name_b)))
        out.append(name_b)
        out.append(struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
    Path(path).write_bytes(b"".join(out))


def _take(buf: bytes, offset: int, n: int) -> tuple[bytes, int]:
    if offset + n > len(buf):
        raise ValueError("truncated checkpoint file")
    return buf[offset:offset + n], offset + n


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    raw, off = _take(buf, 0, 4)
    if raw != MAGIC:
        raise ValueError(f"not a checkpoint file (bad magic {raw!r})")
    raw, off = _take(buf, off, 4)
    version = struct.unpack("<I", raw)[0]
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version} (expected {VERSION})")
    raw, off = _take(buf, off, 2)
    raw, off = _take(buf, off, struct.unpack("<H", raw)[0])
    kind = raw.decode("utf-8")
    raw, off = _take(buf, off, 2)
    raw, off = _take(buf, off, struct.unpack("<H", raw)[0])
    cfg_hash = raw.decode("ascii")
    raw, off = _take(buf, off, 12)
    update, n_blobs = struct.unpack("<QI", raw)
    arrays = {}
    for _ in range(n_blobs):
        raw, off = _take(buf, off, 2)
        raw, off = _take(buf, off, struct.unpack("<H", raw)[0])
        name = raw.decode("utf-8")
        raw, off = _take(buf, off, 1)
        ndim = struct.unpack("<B", raw)[0]
        raw, off = _take(buf, off, 4 * ndim)
        shape = struct.unpack(f"<{ndim}I", raw)
        size = int(np.prod(shape)) if ndim else 1
        raw, off = _take(buf, off, 4 * size)
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if off != len(buf):
        raise ValueError("trailing bytes after checkpoint payload")
    return Checkpoint(kind, cfg_hash, update, arrays)


def check_resume(ckpt: Checkpoint, expected_hash: str) -> None:
    """Refuse to resume from a checkpoint of a differently-configured model."""
    if ckpt.config_hash != expected_hash:
        raise ValueError(
            "config hash mismatch on resume: checkpoint has "
            f"{ckpt.config_hash}, current config is {expected_hash}")


# ----------------------------------------------------------------------
# model helpers


def model_config_hash(model) -> str:
    parts = {}
    if hasattr(model, "encoder"):
        parts["encoder"] = model.encoder.cfg
    elif hasattr(model, "cfg"):
        parts["cfg"] = model.cfg
    if hasattr(model, "dec_cfg"):
        parts["decoder"] = model.dec_cfg
    if hasattr(model, "vocab"):
        parts["vocab_size"] = len(model.vocab)
    return config_hash(parts)


def _model_params(model) -> dict:
    return model.all_params() if hasattr(model, "all_params") else model.params


def save_model_checkpoint(model, run_dir, kind: str, update: int) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / f"{kind}-{update:06d}.ckpt"
    arrays = {k: t.data for k, t in _model_params(model).items()}
    save_checkpoint(path, kind, model_config_hash(model), update, arrays)
    return path


def restore_model(model, ckpt: Checkpoint, resume: bool = False) -> None:
    """Copy checkpoint arrays into an already-constructed model in place."""
    if resume:
        check_resume(ckpt, model_config_hash(model))
    params = _model_params(model)
    missing = set(params) - set(ckpt.arrays)
    extra = set(ckpt.arrays) - set(params)
    if missing or extra:
        raise ValueError(f"parameter name mismatch: missing {sorted(missing)}, "
                         f"unexpected {sorted(extra)}")
    for name, t in params.items():
        a = ckpt.arrays[name]
        if a.shape != t.data.shape:
            raise ValueError(f"shape mismatch for '{name}': "
                             f"{a.shape} vs {t.data.shape}")
        t.data = a.astype(t.data.dtype)
