"""Append-only snapshot store used for weight rewinding.

File layout (little-endian)::

    b"PLCK" | u16 version | u16 len + run_id utf-8 | u32 epoch | i64 seed | u32 n_tensors
    per tensor: u16 len + name | u8 dtype (0 = f32, 1 = f64) | u8 prunable | u8 rank
                | u32 extents[rank] | raw values
    u64 checksum (first 8 bytes of blake2b over everything before it)

Optimizer moments are never stored: rewinding always restarts the optimizer.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import ModelState, ParamTensor

MAGIC = b"PLCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}

# epochs of the rewinding study, for a 75-epoch schedule
PAPER_SNAPSHOT_EPOCHS = (0, 5, 10, 20, 40, 60, 75)
PAPER_TOTAL_EPOCHS = 75


class CheckpointError(Exception):
    pass


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def encode(state: ModelState, run_id: str = "") -> bytes:
    rid = run_id.encode()
    parts = [MAGIC, struct.pack("<HH", VERSION, len(rid)), rid,
             struct.pack("<IqI", state.epoch_tag, state.seed, len(state.params))]
    for name, p in state.params.items():
        raw = name.encode()
        v = p.values
        tag = _TAGS[v.dtype]
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BBB", tag, p.prunable, v.ndim))
        parts.append(struct.pack(f"<{v.ndim}I", *v.shape))
        parts.append(np.ascontiguousarray(v, dtype=_DTYPES[tag]).tobytes())
    body = b"".join(parts)
    return body + _checksum(body)


def decode(data: bytes) -> tuple[str, ModelState]:
    body, check = data[:-8], data[-8:]
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if _checksum(body) != check:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted")
    version, ln = struct.unpack_from("<HH", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 8
    run_id = data[off : off + ln].decode()
    off += ln
    epoch, seed, count = struct.unpack_from("<IqI", data, off)
    off += struct.calcsize("<IqI")
    params = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", data, off)
        name = data[off + 2 : off + 2 + nl].decode()
        off += 2 + nl
        tag, prunable, rank = struct.unpack_from("<BBB", data, off)
        off += 3
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        dt = _DTYPES[tag]
        n = int(np.prod(shape))
        values = np.frombuffer(data, dt, n, off).reshape(shape).astype(dt.newbyteorder("="))
        off += n * dt.itemsize
        params[name] = ParamTensor(name, values, bool(prunable))
    return run_id, ModelState(params, epoch_tag=epoch, seed=seed)


def save_state(path, state: ModelState, run_id: str = "") -> str:
    """Write a single checkpoint file atomically; returns its sha256 digest."""
    data = encode(state, run_id)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load_state(path) -> ModelState:
    return decode(Path(path).read_bytes())[1]


def describe(path) -> list[dict]:
    """Tensor directory of a checkpoint: name, shape, dtype, prunable."""
    run_id, state = decode(Path(path).read_bytes())
    return [
        {"run_id": run_id, "epoch": state.epoch_tag, "name": n, "shape": list(p.shape),
         "dtype": str(p.values.dtype), "prunable": p.prunable, "size": p.size}
        for n, p in state.params.items()
    ]


def scaled_snapshot_epochs(total_epochs: int, paper_epochs=PAPER_SNAPSHOT_EPOCHS,
                           paper_total: int = PAPER_TOTAL_EPOCHS) -> list[int]:
    """Rewind epochs rescaled to a shorter schedule (rounded), always including T."""
    scaled = {int(round(t * total_epochs / paper_total)) for t in paper_epochs}
    scaled.add(total_epochs)
    return sorted(e for e in scaled if 0 <= e <= total_epochs)


def nearest_epoch(epoch: float, available) -> int:
    """Closest stored epoch (ties go to the earlier one)."""
    return min(sorted(available), key=lambda e: abs(e - epoch))


class SnapshotStore:
    """Directory of ``epoch_XXXX.ckpt`` files plus ``index.json`` (epoch -> file, digest)."""

    def __init__(self, directory, run_id: str):
        self.directory = Path(directory)
        self.run_id = run_id
        self.directory.mkdir(parents=True, exist_ok=True)
        self._index_path = self.directory / "index.json"
        if self._index_path.exists():
            meta = json.loads(self._index_path.read_text())
            if meta["run_id"] != run_id:
                raise CheckpointError(f"{directory} belongs to run {meta['run_id']!r}, not {run_id!r}")
            self.index = {int(k): v for k, v in meta["snapshots"].items()}
        else:
            self.index = {}

    @property
    def epochs(self) -> list[int]:
        return sorted(self.index)

    def __contains__(self, epoch: int) -> bool:
        return epoch in self.index

    def _write_index(self) -> None:
        meta = {"run_id": self.run_id, "snapshots": {str(k): self.index[k] for k in sorted(self.index)}}
        tmp = self._index_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(meta, indent=1))
        os.replace(tmp, self._index_path)

    def save(self, state: ModelState) -> str:
        epoch = state.epoch_tag
        if epoch in self.index:
            raise CheckpointError(f"run {self.run_id!r} already has a snapshot for epoch {epoch}")
        fname = f"epoch_{epoch:04d}.ckpt"
        digest = save_state(self.directory / fname, state, self.run_id)
        self.index[epoch] = {"file": fname, "digest": digest}
        self._write_index()
        return digest

    def load(self, epoch: int) -> ModelState:
        if epoch not in self.index:
            raise KeyError(f"no snapshot for epoch {epoch}; stored epochs: {self.epochs}")
        entry = self.index[epoch]
        data = (self.directory / entry["file"]).read_bytes()
        if hashlib.sha256(data).hexdigest() != entry["digest"]:
            raise CheckpointError(f"digest mismatch for epoch {epoch} of run {self.run_id!r}")
        return decode(data)[1]

    def digest(self, epoch: int) -> str:
        return self.index[epoch]["digest"]


def save_snapshot(store: SnapshotStore, state: ModelState) -> str:
    return store.save(state)


def load_snapshot(store: SnapshotStore, epoch: int) -> ModelState:
    return store.load(epoch)


class MemoryStore:
    """In-process snapshot source with the same ``save/load/epochs`` surface."""

    def __init__(self, schedule_epochs=None):
        self._states: dict[int, ModelState] = {}
        self.schedule_epochs = None if schedule_epochs is None else set(schedule_epochs)

    @property
    def epochs(self) -> list[int]:
        return sorted(self._states)

    def save(self, state: ModelState) -> None:
        if state.epoch_tag in self._states:
            raise CheckpointError(f"already have a snapshot for epoch {state.epoch_tag}")
        self._states[state.epoch_tag] = state.copy()

    def maybe_save(self, state: ModelState) -> None:
        if self.schedule_epochs is None or state.epoch_tag in self.schedule_epochs:
            self.save(state)

    def load(self, epoch: int) -> ModelState:
        if epoch not in self._states:
            raise KeyError(f"no snapshot for epoch {epoch}; stored epochs: {self.epochs}")
        return self._states[epoch].copy()
