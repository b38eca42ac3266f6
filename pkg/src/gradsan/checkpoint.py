"""Generator checkpoint files: the only artifact a private run releases.

Layout: ``b"GSCK"``, ``u16`` version, ``u32`` metadata length, UTF-8 JSON
metadata (network layout, latent width, class count, step), then the
parameter block from :mod:`gradsan.autodiff.serialize`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gradsan.autodiff import NetworkSpec, SerializationError, pack_params, unpack_params
from gradsan.autodiff.network import check_params

MAGIC = b"GSCK"
VERSION = 1


@dataclass
class GeneratorCheckpoint:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    latent_dim: int
    num_classes: int
    step: int = 0

    def to_bytes(self) -> bytes:
        meta = json.dumps(
            {"spec": self.spec.to_dict(), "latent_dim": self.latent_dim,
             "num_classes": self.num_classes, "step": self.step},
            sort_keys=True,
        ).encode("utf-8")
        return MAGIC + struct.pack("<HI", VERSION, len(meta)) + meta + pack_params(self.params)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "GeneratorCheckpoint":
        if buf[:4] != MAGIC:
            raise SerializationError("not a generator checkpoint (bad magic)")
        try:
            version, mlen = struct.unpack_from("<HI", buf, 4)
        except struct.error:
            raise SerializationError("truncated checkpoint header") from None
        if version != VERSION:
            raise SerializationError(f"unsupported checkpoint version {version}")
        start = 10
        try:
            meta = json.loads(bytes(buf[start : start + mlen]).decode("utf-8"))
            spec = NetworkSpec.from_dict(meta["spec"])
        except (ValueError, KeyError, TypeError) as e:
            raise SerializationError(f"corrupt checkpoint metadata: {e}") from None
        params, end = unpack_params(buf, start + mlen)
        if end != len(buf):
            raise SerializationError(f"{len(buf) - end} trailing bytes after parameters")
        try:
            check_params(spec, params)
        except ValueError as e:
            raise SerializationError(str(e)) from None
        return cls(spec, params, int(meta["latent_dim"]), int(meta["num_classes"]), int(meta.get("step", 0)))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "GeneratorCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())
