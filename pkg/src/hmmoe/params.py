"""Named parameter registry, checkpoint I/O and seed derivation."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ContractError, DataError
from .tensor import DTYPE, Tensor

_MAGIC = b"HMMOECK1"


def derive_rng(seed: int, *path: str | int) -> np.random.Generator:
    """Counter-based generator for the component named by ``path``.

    The same ``(seed, path)`` always yields the same stream; distinct paths
    yield independent Philox keys.
    """
    words = [zlib.crc32(str(p).encode()) for p in path]
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(words))
    return np.random.Generator(np.random.Philox(ss))


class ParameterStore:
    """Ordered mapping ``name -> Tensor`` with a frozen flag per entry.

    Trainable entries are leaf tensors with ``requires_grad=True``; frozen
    entries never require grad, so no gradient is ever computed for them.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}

    def add(self, name: str, value, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} already registered")
        t = value if isinstance(value, Tensor) else Tensor(np.array(value, dtype=DTYPE))
        t.name = name
        t.requires_grad = not frozen
        self._params[name] = t
        self._frozen[name] = frozen
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def set_frozen(self, name: str, frozen: bool = True) -> None:
        self._frozen[name] = frozen
        self._params[name].requires_grad = not frozen

    def freeze_prefix(self, prefix: str) -> None:
        for name in self._params:
            if name.startswith(prefix):
                self.set_frozen(name, True)

    def trainable(self) -> list[Tensor]:
        return [t for n, t in self._params.items() if not self._frozen[n]]

    def trainable_items(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if not self._frozen[n]]

    def frozen_items(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if self._frozen[n]]

    def zero_grad(self) -> None:
        for t in self.trainable():
            t.grad = np.zeros_like(t.data)

    def digest(self, frozen_only: bool = True) -> str:
        """SHA-256 over names, shapes and raw bytes of (frozen) parameters."""
        h = hashlib.sha256()
        for name, t in self._params.items():
            if frozen_only and not self._frozen[name]:
                continue
            h.update(name.encode())
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    # -- checkpoint format ---------------------------------------------------
    # magic | u64 LE header length | JSON header | concatenated <f8 payloads

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        entries, offset = [], 0
        for name, t in self._params.items():
            nbytes = t.size * 8
            entries.append({"name": name, "shape": list(t.shape),
                            "frozen": self._frozen[name], "offset": offset})
            offset += nbytes
        header = json.dumps({"tensors": entries}, separators=(",", ":")).encode()
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for t in self._params.values():
                fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ParameterStore":
        raw = Path(path).read_bytes()
        if raw[:8] != _MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16:16 + hlen])
        payload = memoryview(raw)[16 + hlen:]
        store = cls()
        for e in header["tensors"]:
            n = int(np.prod(e["shape"], dtype=np.int64))
            start = e["offset"]
            if start + 8 * n > len(payload):
                raise DataError(f"{path}: payload truncated at {e['name']}")
            data = np.frombuffer(payload[start:start + 8 * n], dtype="<f8")
            store.add(e["name"], data.astype(DTYPE).reshape(e["shape"]), frozen=e["frozen"])
        return store

    def load_values(self, other: "ParameterStore") -> None:
        """Copy values (not flags) from ``other`` into matching entries."""
        for name, t in self._params.items():
            src = other[name]
            if src.shape != t.shape:
                raise DataError(f"shape mismatch for {name}: {src.shape} vs {t.shape}")
            t.data = src.data.copy()
