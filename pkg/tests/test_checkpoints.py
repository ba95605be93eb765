import json

import numpy as np
import pytest

from prunelab.checkpoints import (
    CheckpointError,
    MemoryStore,
    SnapshotStore,
    decode,
    describe,
    encode,
    load_state,
    nearest_epoch,
    save_state,
    scaled_snapshot_epochs,
)
from prunelab.model import ModelConfig, init_model

CFG = ModelConfig(hidden_dim=8, num_blocks=2)


def test_round_trip_is_bit_exact(tmp_path):
    s = init_model(CFG, 11).copy(epoch_tag=7)
    digest = save_state(tmp_path / "a.ckpt", s, "run-x")
    back = load_state(tmp_path / "a.ckpt")
    assert back.equals(s)
    assert back.epoch_tag == 7 and back.seed == 11 and back.config == CFG
    assert back.prunable_names() == s.prunable_names()
    assert len(digest) == 64
    assert decode(encode(s, "run-x"))[0] == "run-x"


def test_float32_tensors_survive():
    s = init_model(CFG, 2)
    s.params["head.weight"].values = s["head.weight"].astype(np.float32)
    _, back = decode(encode(s))
    assert back["head.weight"].dtype == np.float32 and back.equals(s)


@pytest.mark.parametrize("where", [4, 40, -20, -1])
def test_corruption_detected(where):
    data = bytearray(encode(init_model(CFG, 0)))
    data[where] ^= 0x10
    with pytest.raises(CheckpointError):
        decode(bytes(data))


def test_bad_magic():
    data = b"XXXX" + encode(init_model(CFG, 0))[4:]
    with pytest.raises(CheckpointError, match="magic"):
        decode(data)


def test_describe(tmp_path):
    save_state(tmp_path / "a.ckpt", init_model(CFG, 0))
    rows = describe(tmp_path / "a.ckpt")
    assert [r["name"] for r in rows][:2] == ["conv.weight", "conv.bias"]
    assert sum(r["size"] for r in rows) == CFG.param_count


def test_store(tmp_path):
    store = SnapshotStore(tmp_path / "snaps", "r1")
    s = init_model(CFG, 1)
    for e in (0, 3, 5):
        store.save(s.copy(epoch_tag=e))
    assert store.epochs == [0, 3, 5]
    assert store.load(3).epoch_tag == 3
    with pytest.raises(CheckpointError, match="already"):
        store.save(s.copy(epoch_tag=3))
    with pytest.raises(KeyError, match=r"\[0, 3, 5\]"):
        store.load(4)
    reopened = SnapshotStore(tmp_path / "snaps", "r1")
    assert reopened.epochs == [0, 3, 5] and reopened.digest(5) == store.digest(5)
    assert json.loads((tmp_path / "snaps" / "index.json").read_text())["run_id"] == "r1"
    with pytest.raises(CheckpointError):
        SnapshotStore(tmp_path / "snaps", "other")


def test_store_detects_tampering(tmp_path):
    store = SnapshotStore(tmp_path, "r")
    store.save(init_model(CFG, 0))
    f = tmp_path / "epoch_0000.ckpt"
    f.write_bytes(f.read_bytes()[:-1] + b"\0")
    with pytest.raises(CheckpointError):
        store.load(0)


def test_memory_store():
    m = MemoryStore([0, 2])
    s = init_model(CFG, 0)
    for e in range(4):
        m.maybe_save(s.copy(epoch_tag=e))
    assert m.epochs == [0, 2]
    loaded = m.load(2)
    loaded["conv.weight"][...] = 0
    assert m.load(2)["conv.weight"].any()  # callers get copies
    with pytest.raises(KeyError):
        m.load(1)


def test_scaled_epochs():
    assert scaled_snapshot_epochs(75) == [0, 5, 10, 20, 40, 60, 75]
    assert scaled_snapshot_epochs(40) == [0, 3, 5, 11, 21, 32, 40]
    assert nearest_epoch(20, [0, 3, 5, 11, 21, 32, 40]) == 21
    assert nearest_epoch(4, [3, 5]) == 3
