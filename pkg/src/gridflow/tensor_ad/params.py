"""Named parameter stores and the ``ckpt/1`` checkpoint format.

A checkpoint is ``MAGIC``, a little-endian uint64 header length, a UTF-8 JSON
header (schema, tensor names, shapes, byte offsets, free-form ``meta``) and
then every tensor's float64 data in little-endian order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

CKPT_SCHEMA = "ckpt/1"
MAGIC = b"GFCKPT\x00\x01"


class ParamMismatch(ValueError):
    pass


class Params:
    """Ordered ``name -> Tensor`` map; insertion order is the canonical order."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._t: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        if name in self._t:
            raise KeyError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._t[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __len__(self) -> int:
        return len(self._t)

    def names(self) -> list[str]:
        return list(self._t)

    def items(self):
        return self._t.items()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: t.shape for k, t in self._t.items()}

    def copy(self) -> "Params":
        return Params({k: Tensor(t.data.copy()) for k, t in self._t.items()})

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self._t.items()}

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.size for t in self._t.values())

    def check_aligned(self, other: "Params") -> None:
        if self.shapes() != other.shapes() or self.names() != other.names():
            raise ParamMismatch("parameter sets differ in names, order or shapes")

    def blend_(self, other: "Params", alpha: float) -> "Params":
        """In place: ``self <- alpha * self + (1 - alpha) * other``."""
        self.check_aligned(other)
        for name, t in self._t.items():
            t.data = alpha * t.data + (1.0 - alpha) * other[name].data
        return self


def save_checkpoint(path: str | Path, params: Params, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"schema": CKPT_SCHEMA, "tensors": entries, "meta": meta or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> tuple[Params, dict]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise ValueError(f"{path}: not a {CKPT_SCHEMA} file")
    (hlen,) = struct.unpack_from("<Q", buf, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(buf[start : start + hlen])
    if header.get("schema") != CKPT_SCHEMA:
        raise ValueError(f"{path}: schema {header.get('schema')!r} != {CKPT_SCHEMA!r}")
    body = start + hlen
    params = Params()
    for e in header["tensors"]:
        a = np.frombuffer(buf, dtype="<f8", count=e["nbytes"] // 8, offset=body + e["offset"])
        params.add(e["name"], a.reshape(e["shape"]).astype(np.float64))
    return params, header["meta"]
