"""Training loop, frame-budget batching and evaluation."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Callable

import numpy as np

from .ctc import ctc_loss, greedy_decode
from .metrics import WerScore, corpus_wer
from .model import Batch, ModelState, forward, forward_backward
from .noise import AugmentPolicy, NoiseSpec, SeveritySchedule, corrupt, sample_augmentation, time_mask
from .optim import AdamW, TrainSchedule, lr_at

log = logging.getLogger(__name__)


def make_batches(dataset, frames_cap: int, rng: np.random.Generator | None = None) -> list[Batch]:
    """Greedy packing (in shuffled order when ``rng`` is given) under a frame budget."""
    order = rng.permutation(len(dataset)) if rng is not None else np.arange(len(dataset))
    batches, seqs, tgts, frames = [], [], [], 0
    for i in order.tolist():
        x, y = dataset[i]
        n = len(x)
        if n > frames_cap:
            raise ValueError(f"sample {i} has {n} frames, above batch_frames_cap={frames_cap}")
        if seqs and frames + n > frames_cap:
            batches.append(Batch(seqs, tgts))
            seqs, tgts, frames = [], [], 0
        seqs.append(x)
        tgts.append(tuple(y))
        frames += n
    if seqs:
        batches.append(Batch(seqs, tgts))
    return batches


def check_mask(state: ModelState, mask) -> None:
    if set(mask) != set(state.prunable_names()):
        raise ValueError("mask must cover exactly the prunable tensors")
    for name, m in mask.items():
        if m.shape != state[name].shape:
            raise ValueError(f"mask for {name} has shape {m.shape}, parameter has {state[name].shape}")


def augment_batch(batch: Batch, policy: AugmentPolicy, seed: list[int]) -> Batch:
    """One noise draw per step (shared by the batch), then per-sequence time masks."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    spec = sample_augmentation(policy, rng) if policy.noise else NoiseSpec()
    noise_seed = int(rng.integers(2**63))
    seqs = []
    for j, x in enumerate(batch.sequences):
        if spec.level:
            x = corrupt(x, spec, noise_seed + j, policy.severity)
        seqs.append(time_mask(x, policy, rng))
    return Batch(seqs, batch.transcripts)


class TelemetryCSV:
    """Appends ``epoch, lr, mean_loss, train_wer`` rows."""

    fields = ("epoch", "lr", "mean_loss", "train_wer")

    def __init__(self, path, tag: str | None = None):
        self.path = Path(path)
        self.tag = tag
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(self.fields + (("phase",) if tag else ()))

    def __call__(self, row: dict) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([row[k] for k in self.fields] + ([self.tag] if self.tag else []))


def train(
    state: ModelState,
    dataset,
    schedule: TrainSchedule,
    start_epoch: int = 0,
    grad_mask: dict[str, np.ndarray] | None = None,
    *,
    augment: AugmentPolicy | None = None,
    data_seed: int = 0,
    separator: int | None = None,
    on_epoch_end: Callable[[ModelState], None] | None = None,
    on_step: Callable[[ModelState, int], None] | None = None,
    telemetry: Callable[[dict], None] | None = None,
) -> ModelState:
    """Run epochs ``[start_epoch, total_epochs)`` on a copy of ``state``.

    A fresh optimizer is created per call. With ``grad_mask``, masked weights
    are set to zero up front, their gradients are zeroed before every step and
    they are re-zeroed after it, so they stay exactly 0 throughout.
    ``on_epoch_end`` receives the state tagged with the number of completed
    epochs.
    """
    if not 0 <= start_epoch <= schedule.total_epochs:
        raise ValueError(f"start_epoch {start_epoch} outside [0, {schedule.total_epochs}]")
    state = state.copy(epoch_tag=start_epoch)
    if separator is None:
        separator = state.config.alphabet_size - 1
    keep = None
    if grad_mask is not None:
        check_mask(state, grad_mask)
        keep = {n: np.asarray(m, dtype=bool) for n, m in grad_mask.items()}
        for n, m in keep.items():
            state.params[n].values = np.where(m, state[n], 0.0)
    opt = AdamW.from_schedule(schedule)
    step = 0
    for epoch in range(start_epoch, schedule.total_epochs):
        rng = np.random.default_rng(np.random.SeedSequence([data_seed, 0xE9, epoch]))
        batches = make_batches(dataset, schedule.batch_frames_cap, rng)
        losses, score = [], WerScore(0, 0, 0, 0)
        lr = 0.0
        for b, batch in enumerate(batches):
            if augment is not None:
                batch = augment_batch(batch, augment, [data_seed, 0xA7, epoch, b])
            n_seq = len(batch.sequences)

            def loss_fn(i, lp):
                loss, g = ctc_loss(lp, batch.transcripts[i])
                return loss / n_seq, g / n_seq

            total, grads, outs = forward_backward(state, batch, loss_fn)
            if keep is not None:
                for n, m in keep.items():
                    grads[n] = np.where(m, grads[n], 0.0)
            lr = lr_at(schedule, epoch + b / len(batches))
            opt.step(state, grads, lr)
            if keep is not None:
                for n, m in keep.items():
                    state[n][~m] = 0.0
            step += 1
            if on_step is not None:
                on_step(state, step)
            losses.append(total)
            score = score + corpus_wer(batch.transcripts, [greedy_decode(o) for o in outs], separator)
        state.epoch_tag = epoch + 1
        row = {
            "epoch": epoch + 1,
            "lr": lr,
            "mean_loss": float(np.mean(losses)),
            "train_wer": 100.0 * score.wer,
        }
        log.debug("epoch %(epoch)d lr %(lr).3g loss %(mean_loss).4f wer %(train_wer).2f", row)
        if telemetry is not None:
            telemetry(row)
        if on_epoch_end is not None:
            on_epoch_end(state)
    return state


def decode_dataset(state: ModelState, dataset, frames_cap: int = 8000,
                   noise: NoiseSpec | None = None, seed: int = 0,
                   severity: SeveritySchedule | None = None) -> list[list[int]]:
    hyps = []
    seqs = [x for x, _ in dataset]
    if noise is not None and noise.level:
        seqs = [corrupt(x, noise, seed + i, severity) for i, x in enumerate(seqs)]
    batches = make_batches([(x, ()) for x in seqs], frames_cap)
    for batch in batches:
        hyps.extend(greedy_decode(o) for o in forward(state, batch))
    return hyps


def evaluate(state: ModelState, dataset, separator: int | None = None, *, frames_cap: int = 8000,
             noise: NoiseSpec | None = None, seed: int = 0,
             severity: SeveritySchedule | None = None) -> WerScore:
    """Corpus WER of greedy decoding, optionally on corrupted inputs."""
    if separator is None:
        separator = state.config.alphabet_size - 1
    hyps = decode_dataset(state, dataset, frames_cap, noise, seed, severity)
    return corpus_wer([y for _, y in dataset], hyps, separator)
