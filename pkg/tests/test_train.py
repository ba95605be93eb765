import csv

import numpy as np
import pytest

from prunelab.data import DatasetSpec, generate
from prunelab.model import ModelConfig, init_model
from prunelab.noise import AugmentPolicy, NoiseSpec
from prunelab.optim import TrainSchedule
from prunelab.prune import global_magnitude_mask, ones_mask
from prunelab.train import TelemetryCSV, evaluate, make_batches, train

CFG = ModelConfig(hidden_dim=8, num_blocks=1, conv_kernel=3)
SCHED = TrainSchedule(total_epochs=3, warmup_epochs=1, peak_lr=3e-3, batch_frames_cap=600)


@pytest.fixture(scope="module")
def data():
    return generate(DatasetSpec(num_samples=30, words_per_transcript=(1, 3), seed=4))


def test_batches_cover_dataset_once(data):
    batches = make_batches(data, 300, np.random.default_rng(0))
    seen = [x.tobytes() for b in batches for x in b.sequences]
    assert sorted(seen) == sorted(x.tobytes() for x, _ in data)
    assert all(sum(len(x) for x in b.sequences) <= 300 for b in batches)
    with pytest.raises(ValueError):
        make_batches(data, 5)


def test_runs_are_bit_identical(data):
    a = train(init_model(CFG, 0), data, SCHED)
    b = train(init_model(CFG, 0), data, SCHED)
    assert a.equals(b) and a.epoch_tag == 3


def test_all_ones_mask_changes_nothing(data):
    s0 = init_model(CFG, 0)
    a = train(s0, data, SCHED)
    b = train(s0, data, SCHED, grad_mask=ones_mask(s0))
    assert a.equals(b)


def test_input_state_untouched(data):
    s0 = init_model(CFG, 0)
    before = s0.copy()
    train(s0, data, SCHED)
    assert s0.equals(before)


def test_masked_weights_stay_zero_every_step(data):
    s0 = init_model(CFG, 1)
    mask = global_magnitude_mask(s0, 0.7)

    def check(state, step):
        for n, m in mask.items():
            assert not state[n][~m].any()

    out = train(s0, data, SCHED, grad_mask=mask, on_step=check)
    check(out, -1)


def test_loss_decreases_and_telemetry(tmp_path, data):
    path = tmp_path / "t.csv"
    train(init_model(CFG, 0), data, SCHED, telemetry=TelemetryCSV(path))
    rows = list(csv.DictReader(open(path)))
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
    assert float(rows[-1]["mean_loss"]) < float(rows[0]["mean_loss"])
    assert set(rows[0]) == {"epoch", "lr", "mean_loss", "train_wer"}


def test_resume_from_epoch(data):
    snaps = {}
    full = train(init_model(CFG, 0), data, SCHED, on_epoch_end=lambda s: snaps.setdefault(s.epoch_tag, s.copy()))
    assert sorted(snaps) == [1, 2, 3]
    assert snaps[3].equals(full)


def test_augmented_training_is_deterministic(data):
    policy = AugmentPolicy(noise=True)
    a = train(init_model(CFG, 0), data, SCHED, augment=policy, data_seed=5)
    b = train(init_model(CFG, 0), data, SCHED, augment=policy, data_seed=5)
    c = train(init_model(CFG, 0), data, SCHED, augment=policy, data_seed=6)
    assert a.equals(b) and not a.equals(c)


def test_evaluate(data):
    s = init_model(CFG, 0)
    score = evaluate(s, data)
    assert score.reference_words > 0 and 0 <= score.wer
    noisy = evaluate(s, data, noise=NoiseSpec("GN", 5), seed=1)
    assert noisy.reference_words == score.reference_words
