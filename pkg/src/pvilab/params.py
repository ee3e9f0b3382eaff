"""Named parameter store, optimizers, and the binary checkpoint codec.

Frozen entries are never touched by an optimizer step and own no optimizer
state; their bytes must be bit-identical before and after any number of
steps. The checkpoint format is fixed little-endian binary, magic PVILAB01.
"""
from __future__ import annotations

import hashlib
import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"PVILAB01"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files."""


class OptimizerError(ValueError):
    """Raised when a step is attempted with missing gradients."""


class ParamStore:
    """Ordered mapping of unique names to (tensor, trainable)."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self._opt_state: dict[str, dict[str, np.ndarray]] = {}
        self._adam_steps = 0

    def add(self, name: str, tensor: Tensor, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name!r}")
        tensor.requires_grad = bool(trainable)
        self._entries[name] = tensor
        self._trainable[name] = bool(trainable)
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if t]

    def frozen_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if not t]

    def set_trainable(self, name: str, flag: bool) -> None:
        if name not in self._entries:
            raise KeyError(name)
        self._trainable[name] = bool(flag)
        self._entries[name].requires_grad = bool(flag)
        if not flag:
            self._opt_state.pop(name, None)

    def replace(self, name: str, tensor: Tensor) -> None:
        """Swap the tensor behind a name; used by gradcheck closures.

        The caller keeps control of ``requires_grad`` on the incoming tensor,
        so even a frozen entry can be probed for gradients without unfreezing
        it in the optimizer's bookkeeping.
        """
        if name not in self._entries:
            raise KeyError(name)
        self._entries[name] = tensor

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def state_hash(self, names=None) -> str:
        """sha256 over name-sorted raw little-endian bytes of the given entries."""
        if names is None:
            names = self.names()
        digest = hashlib.sha256()
        for name in sorted(names):
            t = self._entries[name]
            digest.update(name.encode("utf-8"))
            digest.update(str(t.dtype).encode())
            digest.update(str(t.shape).encode())
            digest.update(np.ascontiguousarray(t.data).astype(t.dtype.newbyteorder("<"), copy=False).tobytes())
        return digest.hexdigest()


def _sgd_step(store: ParamStore, lr: float) -> None:
    for name in store.trainable_names():
        t = store[name]
        if t.grad is None:
            raise OptimizerError(f"missing gradient for trainable entry {name!r}")
        t.data -= (lr * t.grad).astype(t.dtype, copy=False)


def _adamw_step(store: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                weight_decay: float = 0.0) -> None:
    b1, b2 = betas
    store._adam_steps += 1
    t_step = store._adam_steps
    bias1 = 1.0 - b1 ** t_step
    bias2 = 1.0 - b2 ** t_step
    for name in store.trainable_names():
        t = store[name]
        if t.grad is None:
            raise OptimizerError(f"missing gradient for trainable entry {name!r}")
        state = store._opt_state.setdefault(
            name, {"m": np.zeros_like(t.data), "v": np.zeros_like(t.data)}
        )
        g = t.grad
        state["m"] = b1 * state["m"] + (1.0 - b1) * g
        state["v"] = b2 * state["v"] + (1.0 - b2) * (g * g)
        mhat = state["m"] / bias1
        vhat = state["v"] / bias2
        update = mhat / (np.sqrt(vhat) + eps)
        if weight_decay:
            update = update + weight_decay * t.data
        t.data -= (lr * update).astype(t.dtype, copy=False)


def optimizer_step(store: ParamStore, lr: float, kind: str = "adamw", **kwargs) -> None:
    """Apply one update to every trainable entry, then clear all grads."""
    if kind == "sgd":
        _sgd_step(store, lr)
    elif kind == "adamw":
        _adamw_step(store, lr, **kwargs)
    else:
        raise ValueError(f"unknown optimizer kind {kind!r} (expected sgd or adamw)")
    store.zero_grad()


# ---------------------------------------------------------------- checkpoints
#
# layout, all little-endian:
#   magic   8 bytes  "PVILAB01"
#   count   u32
#   entry:  u16 name length, utf-8 name bytes,
#           u8 dtype (0 = f32, 1 = f64), u8 trainable, u8 rank,
#           u32 per extent, raw row-major payload


def save_checkpoint(store: ParamStore, path) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", len(store))
    for name, t in store.items():
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        code = _DTYPE_CODES[np.dtype(t.dtype)]
        blob += struct.pack("<BBB", code, int(store.is_trainable(name)), t.data.ndim)
        for extent in t.data.shape:
            blob += struct.pack("<I", extent)
        blob += np.ascontiguousarray(t.data).astype(_CODE_DTYPES[code], copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    offset = len(MAGIC)
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    store = ParamStore()
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            code, trainable, rank = struct.unpack_from("<BBB", blob, offset)
            offset += 3
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
            shape = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
            offset += 4 * rank
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            payload = blob[offset : offset + nbytes]
            if len(payload) != nbytes:
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            offset += nbytes
            data = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
            store.add(name, Tensor(data.astype(dtype.newbyteorder("="), copy=False)), trainable=bool(trainable))
        except struct.error:
            raise CheckpointError(f"{path}: truncated checkpoint") from None
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return store


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        digest.update(fh.read())
    return digest.hexdigest()
