"""Parameter storage, ADAM and the MMEN checkpoint format."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import NumericError, Tensor

CKPT_MAGIC = b"MMEN"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Param:
    value: np.ndarray
    trainable: bool = True
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    steps: int = 0


@dataclass
class ParamStore:
    """Named parameters with per-parameter trainable flag and ADAM state.

    Non-trainable entries also hold batch-norm running statistics.
    """

    params: dict[str, Param] = field(default_factory=dict)

    def add(self, name, value, trainable=True):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        self.params[name] = Param(np.ascontiguousarray(value), trainable)

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name) -> np.ndarray:
        return self.params[name].value

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def tensor(self, name, track=True):
        p = self.params[name]
        return Tensor(p.value, requires_grad=track and p.trainable, name=name)

    def freeze(self, prefix):
        for n in self.names(prefix):
            self.params[n].trainable = False

    def unfreeze(self, prefix):
        for n in self.names(prefix):
            if not _is_stat(n):
                self.params[n].trainable = True

    def is_frozen(self, prefix):
        names = [n for n in self.names(prefix) if not _is_stat(n)]
        return bool(names) and not any(self.params[n].trainable for n in names)

    def merge(self, other, src_prefix="", dst_prefix=""):
        """Copy parameters ``src_prefix*`` of ``other`` in as ``dst_prefix*``."""
        for n in other.names(src_prefix):
            new = dst_prefix + n[len(src_prefix):]
            src = other.params[n]
            self.params[new] = Param(src.value.copy(), src.trainable)

    def astype(self, dtype):
        out = ParamStore()
        for n, p in self.params.items():
            out.params[n] = Param(p.value.astype(dtype), p.trainable)
        return out

    def digest(self, prefix=""):
        h = hashlib.sha256()
        for n in sorted(self.names(prefix)):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n].value).tobytes())
        return h.hexdigest()

    def count(self, prefix="", trainable_only=False):
        return sum(p.value.size for n, p in self.params.items()
                   if n.startswith(prefix) and (p.trainable or not trainable_only) and not _is_stat(n))


def _is_stat(name):
    return name.endswith(".running_mean") or name.endswith(".running_var")


def adam_step(store: ParamStore, grads: dict, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One ADAM update with bias correction; frozen parameters are skipped."""
    for name in sorted(grads):
        p = store.params[name]
        if not p.trainable:
            continue
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if p.m is None:
            p.m = np.zeros_like(p.value)
            p.v = np.zeros_like(p.value)
        p.steps += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        mhat = p.m / (1.0 - beta1 ** p.steps)
        vhat = p.v / (1.0 - beta2 ** p.steps)
        p.value -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.value.dtype)


def collect_grads(store: ParamStore, tensors: dict) -> dict:
    """Map name -> gradient for every tracked tensor that received one."""
    out = {}
    for name, t in tensors.items():
        if t.requires_grad and t.grad is not None:
            out[name] = t.grad
    return out


# -- checkpoint io ----------------------------------------------------------

def save_checkpoint(store: ParamStore, path) -> None:
    names = sorted(store.params)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(names)))
        for n in names:
            arr = np.ascontiguousarray(store.params[n].value, dtype="<f4")
            raw = n.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path, trainable=True) -> ParamStore:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    store = ParamStore()
    for _ in range(count):
        (nlen,) = take("<H")
        name = bytes(take(f"<{nlen}s")[0]).decode("utf-8")
        (rank,) = take("<B")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        if pos + 4 * n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(dims)
        pos += 4 * n
        store.add(name, arr, trainable=trainable and not _is_stat(name))
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return store
