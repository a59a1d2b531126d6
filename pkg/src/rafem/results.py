"""Binary result stream: one record per accepted time step.

Layout (all little-endian):

    magic   7 bytes  b"RFSIM1\\0"
    version u8       0x01
    nodes   u32      node count N
    then per accepted step:
        step            u32
        time_s          f64
        dt_s            f64
        corrector_iters u32
        converged       u8
        T               N x f64
        V               N x f64

Records are written as steps are accepted, so a simulation can stream
its output.  Writing the same run twice produces identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RESULT_MAGIC",
    "RESULT_VERSION",
    "ResultFile",
    "ResultFormatError",
    "ResultWriter",
    "StepRecord",
    "read_result_file",
]

RESULT_MAGIC = b"RFSIM1\x00"
RESULT_VERSION = 1

_HEAD = struct.Struct("<IddIB")


class ResultFormatError(ValueError):
    """Raised for files that do not parse as a result stream."""


@dataclass
class StepRecord:
    step: int
    time: float
    dt: float
    corrector_iters: int
    converged: bool
    T: np.ndarray
    V: np.ndarray


class ResultWriter:
    """Streams accepted steps to a result file."""

    def __init__(self, path, node_count: int):
        if node_count <= 0:
            raise ValueError("node_count must be positive")
        self.node_count = node_count
        self._fh = open(path, "wb")
        self._fh.write(RESULT_MAGIC)
        self._fh.write(bytes([RESULT_VERSION]))
        self._fh.write(struct.pack("<I", node_count))

    def append(self, record: StepRecord) -> None:
        if record.T.shape != (self.node_count,) or record.V.shape != (self.node_count,):
            raise ValueError("field length does not match the writer's node count")
        self._fh.write(
            _HEAD.pack(
                record.step,
                record.time,
                record.dt,
                record.corrector_iters,
                1 if record.converged else 0,
            )
        )
        self._fh.write(np.ascontiguousarray(record.T, dtype="<f8").tobytes())
        self._fh.write(np.ascontiguousarray(record.V, dtype="<f8").tobytes())

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self) -> "ResultWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass
class ResultFile:
    node_count: int
    steps: list[StepRecord]

    def step_index(self, step: int) -> int:
        """Position of the record whose step counter equals ``step``."""
        for i, rec in enumerate(self.steps):
            if rec.step == step:
                return i
        raise KeyError(f"no record for step {step}")


def read_result_file(path) -> ResultFile:
    with open(path, "rb") as fh:
        blob = fh.read()
    head = len(RESULT_MAGIC) + 1 + 4
    if len(blob) < head:
        raise ResultFormatError(f"{path}: too short to be a result file")
    if blob[: len(RESULT_MAGIC)] != RESULT_MAGIC:
        raise ResultFormatError(f"{path}: bad magic")
    version = blob[len(RESULT_MAGIC)]
    if version != RESULT_VERSION:
        raise ResultFormatError(f"{path}: unsupported version {version}")
    (node_count,) = struct.unpack_from("<I", blob, len(RESULT_MAGIC) + 1)
    if node_count == 0:
        raise ResultFormatError(f"{path}: node count is zero")
    rec_size = _HEAD.size + 2 * 8 * node_count
    body = len(blob) - head
    if body % rec_size != 0:
        raise ResultFormatError(f"{path}: truncated step record")
    steps = []
    offset = head
    for _ in range(body // rec_size):
        step, time_s, dt_s, iters, converged = _HEAD.unpack_from(blob, offset)
        offset += _HEAD.size
        t_field = np.frombuffer(blob, dtype="<f8", count=node_count, offset=offset).copy()
        offset += 8 * node_count
        v_field = np.frombuffer(blob, dtype="<f8", count=node_count, offset=offset).copy()
        offset += 8 * node_count
        steps.append(
            StepRecord(
                step=step,
                time=time_s,
                dt=dt_s,
                corrector_iters=iters,
                converged=bool(converged),
                T=t_field,
                V=v_field,
            )
        )
    return ResultFile(node_count=node_count, steps=steps)
