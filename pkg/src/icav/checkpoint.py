"""Binary checkpoints: header, length-prefixed named float32 blobs, digest trailer.

Layout (all integers little-endian)::

    b"ICAVCKPT"  u32 version  u32 len + fingerprint (ascii)  u64 step
    u64 optimizer_step  u32 n_blobs
    n_blobs x { u32 len + name (utf-8)  u32 ndim  ndim x u32 dims  u64 nbytes  data }
    32-byte sha256 of everything above
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch

MAGIC = b"ICAVCKPT"
VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    fingerprint: str
    step: int
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0
    version: int = VERSION


def model_blobs(model: torch.nn.Module, adapters=None) -> dict[str, np.ndarray]:
    """Every model tensor (frozen base, conditioning) and every adapter factor."""
    out = {f"model/{k}": v.detach().numpy().copy() for k, v in model.state_dict().items()}
    if adapters is not None:
        mods = getattr(adapters, "modules", adapters)
        for k, v in mods.state_dict().items():
            out[f"adapter/{k}"] = v.detach().numpy().copy()
    return out


def _pack_blob(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode()
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<Q", arr.nbytes)
    return head + arr.tobytes()


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    fp = ckpt.fingerprint.encode("ascii")
    blobs = [(n, ckpt.params[n]) for n in sorted(ckpt.params)]
    blobs += [(f"optim/{n}", ckpt.optimizer[n]) for n in sorted(ckpt.optimizer)]
    body = bytearray(MAGIC)
    body += struct.pack("<I", ckpt.version)
    body += struct.pack("<I", len(fp)) + fp
    body += struct.pack("<QQI", ckpt.step, ckpt.optimizer_step, len(blobs))
    for name, arr in blobs:
        body += _pack_blob(name, arr)
    body += hashlib.sha256(body).digest()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(body))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptCheckpointError("checkpoint truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic header")
    (version,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    if len(raw) < 32 or hashlib.sha256(raw[:-32]).digest() != raw[-32:]:
        raise CorruptCheckpointError(f"{path}: digest mismatch (truncated or modified)")
    r = _Reader(raw[:-32])
    r.take(len(MAGIC) + 4)
    (n_fp,) = r.unpack("<I")
    fingerprint = r.take(n_fp).decode("ascii")
    step, opt_step, n_blobs = r.unpack("<QQI")
    params, optim = {}, {}
    for _ in range(n_blobs):
        (n_name,) = r.unpack("<I")
        name = r.take(n_name).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptCheckpointError(f"{path}: blob {name!r} size does not match its shape")
        arr = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(shape).astype(np.float32)
        if name.startswith("optim/"):
            optim[name[len("optim/"):]] = arr
        else:
            params[name] = arr
    if r.pos != len(r.raw):
        raise CorruptCheckpointError(f"{path}: trailing bytes after the last blob")
    return Checkpoint(fingerprint, step, params, optim, opt_step, version)


def bind_checkpoint(ckpt: Checkpoint, model: torch.nn.Module, adapters=None) -> None:
    """Copy checkpoint tensors into ``model`` (and ``adapters``), all or nothing."""
    targets = {f"model/{k}": v for k, v in model.state_dict().items()}
    if adapters is not None:
        mods = getattr(adapters, "modules", adapters)
        targets.update({f"adapter/{k}": v for k, v in mods.state_dict().items()})
    missing = sorted(set(targets) - set(ckpt.params))
    extra = sorted(set(ckpt.params) - set(targets))
    bad = [f"{n}: checkpoint {tuple(ckpt.params[n].shape)} vs model {tuple(targets[n].shape)}"
           for n in sorted(set(targets) & set(ckpt.params))
           if tuple(ckpt.params[n].shape) != tuple(targets[n].shape)]
    if missing or extra or bad:
        lines = bad + [f"missing {n}" for n in missing[:5]] + [f"unexpected {n}" for n in extra[:5]]
        raise ShapeMismatchError("checkpoint does not fit this model config:\n  " + "\n  ".join(lines))
    with torch.no_grad():
        for n, t in targets.items():
            t.copy_(torch.from_numpy(ckpt.params[n]))


def optimizer_blobs(opt) -> dict[str, np.ndarray]:
    return {n: t.detach().numpy().copy() for n, t in opt.named_state()}


def restore_optimizer(ckpt: Checkpoint, opt) -> None:
    if ckpt.optimizer:
        opt.load_named_state({n: torch.from_numpy(a) for n, a in ckpt.optimizer.items()},
                             ckpt.optimizer_step)


def checkpoint_from(model, adapters, fingerprint: str, step: int,
                    optimizer: Optional[object] = None) -> Checkpoint:
    opt = optimizer_blobs(optimizer) if optimizer is not None and optimizer.steps else {}
    return Checkpoint(fingerprint, step, model_blobs(model, adapters), opt,
                      optimizer.steps if optimizer is not None else 0)


def params_equal(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
