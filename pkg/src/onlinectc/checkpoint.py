"""Binary checkpoints.

Layout (little-endian): ``OCTC``, u32 version, u32 config length, UTF-8
JSON config, then the parameter array, the optimizer state, the frame
counter and the input normalization statistics.  Arrays are a u64 length
followed by float32 values, so a loaded checkpoint saves back to the same
bytes.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FormatError, Normalizer
from .optim import OptimizerState

MAGIC = b"OCTC"
VERSION = 1
_KINDS = ("sgd", "adadelta")


@dataclass
class Checkpoint:
    config: dict  # run config plus "alphabet" and "input_dim"
    params: np.ndarray
    optimizer: OptimizerState
    frames_seen: int
    normalizer: Normalizer

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        blob = json.dumps(self.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out.write(MAGIC + struct.pack("<II", VERSION, len(blob)) + blob)

        def array(a):
            a = np.asarray(a, dtype="<f4")
            out.write(struct.pack("<Q", a.size) + a.tobytes())

        array(self.params)
        opt = self.optimizer
        out.write(struct.pack("<B4dQ", _KINDS.index(opt.kind), opt.learning_rate, opt.momentum,
                              opt.rms_decay, opt.epsilon, opt.rejected))
        array(opt.velocity)
        if opt.kind == "adadelta":
            array(opt.rms_grad)
            array(opt.rms_update)
        out.write(struct.pack("<Q", self.frames_seen))
        array(self.normalizer.mean)
        array(self.normalizer.std)
        return out.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:4] != MAGIC:
            raise FormatError("not a checkpoint file")
        buf = io.BytesIO(raw)
        buf.read(4)

        def unpack(fmt):
            size = struct.calcsize(fmt)
            chunk = buf.read(size)
            if len(chunk) != size:
                raise FormatError("truncated checkpoint")
            return struct.unpack(fmt, chunk)

        def array():
            (n,) = unpack("<Q")
            chunk = buf.read(4 * n)
            if len(chunk) != 4 * n:
                raise FormatError("truncated checkpoint")
            return np.frombuffer(chunk, dtype="<f4").astype(np.float64)

        version, length = unpack("<II")
        if version != VERSION:
            raise FormatError(f"checkpoint version {version}, expected {VERSION}")
        config = json.loads(buf.read(length).decode("utf-8"))
        params = array()
        kind, lr, momentum, rms_decay, epsilon, rejected = unpack("<B4dQ")
        opt = OptimizerState(array(), lr, momentum, _KINDS[kind], rms_decay, epsilon, rejected=rejected)
        if opt.kind == "adadelta":
            opt.rms_grad = array()
            opt.rms_update = array()
        (frames_seen,) = unpack("<Q")
        normalizer = Normalizer(array(), array())
        if buf.read(1):
            raise FormatError("trailing bytes after checkpoint")
        return cls(config, params, opt, frames_seen, normalizer)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
