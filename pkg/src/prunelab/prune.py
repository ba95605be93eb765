"""Unstructured global magnitude pruning and the recovery procedures built on it.

A mask maps every prunable tensor name to a boolean array of the same shape
(True = kept). Only weight matrices of convolutional and linear layers are
prunable.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .model import ModelState
from .optim import TrainSchedule
from .train import check_mask, train

log = logging.getLogger(__name__)

PruneMask = dict[str, np.ndarray]

RECOVERIES = ("finetune", "parp", "lth", "lrr", "rewind")
FINETUNE_EPOCHS = 10
FINETUNE_LR = 1e-5


class SnapshotSource(Protocol):
    def load(self, epoch: int) -> ModelState: ...

    @property
    def epochs(self) -> list[int]: ...


@dataclass(frozen=True)
class Naive:
    name = "naive"


@dataclass(frozen=True)
class OneShot:
    recovery: str = "lrr"
    rewind_epoch: int | None = None  # only read for recovery="rewind"

    def __post_init__(self):
        if self.recovery not in RECOVERIES:
            raise ValueError(f"unknown recovery {self.recovery!r}")
        if self.recovery == "rewind" and self.rewind_epoch is None:
            raise ValueError("recovery='rewind' needs rewind_epoch")

    @property
    def name(self) -> str:
        if self.recovery == "rewind":
            return f"rewind@{self.rewind_epoch}"
        return self.recovery


@dataclass(frozen=True)
class Iterative:
    rounds: int = 10
    recovery: str = "lrr"
    schedule: str = "linear"
    round_epochs: int = 12

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.recovery not in ("lth", "lrr"):
            raise ValueError("iterative recovery is 'lth' or 'lrr'")
        if self.schedule not in ("linear", "geometric"):
            raise ValueError("schedule is 'linear' or 'geometric'")
        if self.round_epochs < 1:
            raise ValueError("round_epochs must be >= 1")

    @property
    def name(self) -> str:
        return f"iter-{self.recovery}"


PruneMethod = Naive | OneShot | Iterative


@dataclass
class SparseModel:
    state: ModelState
    mask: PruneMask
    method: PruneMethod
    target: float
    source: str = ""
    round: int | None = None

    @property
    def sparsity(self) -> float:
        return sparsity_of(self.mask)


def prune_count(target: float, n: int) -> int:
    """``floor(target * n)`` without float round-off (0.29 * 100 -> 29, not 28)."""
    return math.floor(Fraction(target).limit_denominator(10**6) * n)


def _check_target(target: float) -> None:
    if not 0 <= target < 1:
        raise ValueError(f"target sparsity must lie in [0, 1), got {target}")


def ones_mask(state: ModelState) -> PruneMask:
    return {n: np.ones(state[n].shape, dtype=bool) for n in state.prunable_names()}


def sparsity_of(mask: PruneMask) -> float:
    total = sum(m.size for m in mask.values())
    kept = sum(int(np.count_nonzero(m)) for m in mask.values())
    return (total - kept) / total


def global_magnitude_mask(state: ModelState, target: float, existing: PruneMask | None = None) -> PruneMask:
    """Zero the ``floor(target * p)`` smallest-magnitude prunable weights, jointly
    over all prunable tensors.

    Entries already pruned in ``existing`` stay pruned and count toward the
    target. Equal magnitudes are pruned in (tensor order, flat index) order.
    """
    _check_target(target)
    names = state.prunable_names()
    mags = np.concatenate([np.abs(state[n]).ravel() for n in names])
    n_zero = prune_count(target, mags.size)
    key = mags.copy()
    if existing is not None:
        check_mask(state, existing)
        prev = np.concatenate([np.asarray(existing[n], dtype=bool).ravel() for n in names])
        already = int(mags.size - np.count_nonzero(prev))
        if n_zero < already:
            raise ValueError(
                f"target {target} is below the existing mask's sparsity {already / mags.size:.4f}"
            )
        key[~prev] = -1.0
    order = np.argsort(key, kind="stable")
    keep = np.ones(mags.size, dtype=bool)
    keep[order[:n_zero]] = False
    out, off = {}, 0
    for n in names:
        size = state[n].size
        out[n] = keep[off : off + size].reshape(state[n].shape)
        off += size
    return out


def apply_mask(state: ModelState, mask: PruneMask) -> ModelState:
    """``m * theta`` on prunable tensors (as a copy); everything else untouched."""
    check_mask(state, mask)
    out = state.copy()
    for n, m in mask.items():
        out.params[n].values = np.where(m, out[n], 0.0)
    return out


def effective_param_count(state: ModelState, mask: PruneMask) -> tuple[int, int]:
    """``(total, nonzero)`` where nonzero counts every unprunable parameter."""
    check_mask(state, mask)
    kept = sum(int(np.count_nonzero(m)) for m in mask.values())
    return state.param_count, state.param_count - state.prunable_count + kept


def naive_prune(dense: ModelState, target: float) -> SparseModel:
    mask = global_magnitude_mask(dense, target)
    return SparseModel(apply_mask(dense, mask), mask, Naive(), target)


def finetune_schedule(schedule: TrainSchedule, epochs: int = FINETUNE_EPOCHS, lr: float = FINETUNE_LR) -> TrainSchedule:
    return replace(schedule, total_epochs=epochs, warmup_epochs=0, peak_lr=lr, shape="constant")


def one_shot_prune(
    snapshots: SnapshotSource,
    target: float,
    recovery: str,
    dataset,
    schedule: TrainSchedule,
    rewind_epoch: int | None = None,
    *,
    finetune_epochs: int = FINETUNE_EPOCHS,
    finetune_lr: float = FINETUNE_LR,
    **train_kwargs,
) -> SparseModel:
    """Prune the final dense weights once, then recover.

    finetune  m*theta_T, constant small LR, pruned weights frozen
    parp      m*theta_T, same budget, pruned weights may regrow, re-pruned at the end
    lth       m*theta_0, full schedule, frozen
    lrr       m*theta_T, full schedule (LR restarted), frozen
    rewind    m*theta_t for a stored epoch t, full schedule, frozen
    """
    method = OneShot(recovery, rewind_epoch)
    epochs = sorted(snapshots.epochs)
    final = epochs[-1]
    dense = snapshots.load(final)
    mask = global_magnitude_mask(dense, target)
    if recovery in ("finetune", "parp"):
        sched = finetune_schedule(schedule, finetune_epochs, finetune_lr)
        start = apply_mask(dense, mask)
        if recovery == "finetune":
            state = train(start, dataset, sched, grad_mask=mask, **train_kwargs)
            return SparseModel(state, mask, method, target)
        grown = train(start, dataset, sched, **train_kwargs)
        final_mask = global_magnitude_mask(grown, target)
        return SparseModel(apply_mask(grown, final_mask), final_mask, method, target)

    t = {"lth": 0, "lrr": final}.get(recovery, rewind_epoch)
    if t not in epochs:
        raise KeyError(f"no snapshot for epoch {t}; stored epochs: {epochs}")
    start = apply_mask(snapshots.load(t), mask)
    state = train(start, dataset, schedule, grad_mask=mask, **train_kwargs)
    return SparseModel(state, mask, method, target)


def cumulative_sparsities(target: float, rounds: int, schedule: str = "linear") -> list[float]:
    """Per-round cumulative sparsity until ``target`` is reached.

    linear     round k removes 1/r of all prunable weights: min(k/r, target)
    geometric  round k removes 1/r of the remaining ones: 1 - (1 - 1/r)^k
    """
    _check_target(target)
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if target == 0:
        return []
    out = []
    for k in range(1, rounds + 1):
        if schedule == "linear":
            s = float(Fraction(k, rounds))
        elif schedule == "geometric":
            s = 1.0 - (1.0 - 1.0 / rounds) ** k
        else:
            raise ValueError(f"unknown iterative schedule {schedule!r}")
        if s >= target:
            out.append(target)
            return out
        out.append(s)
    raise ValueError(
        f"{schedule} schedule with {rounds} rounds reaches only {out[-1]:.4f} < target {target}"
    )


def round_schedule(schedule: TrainSchedule, round_epochs: int) -> TrainSchedule:
    """The dense schedule compressed to ``round_epochs`` (warmup scaled alike)."""
    warm = round(schedule.warmup_epochs * round_epochs / schedule.total_epochs)
    return replace(schedule, total_epochs=round_epochs, warmup_epochs=min(warm, round_epochs - 1))


def iterative_prune(
    snapshots: SnapshotSource,
    target: float,
    method: Iterative,
    dataset,
    schedule: TrainSchedule,
    *,
    on_round: Callable[[SparseModel], None] | None = None,
    resume_from: SparseModel | None = None,
    **train_kwargs,
) -> SparseModel:
    """Prune-retrain rounds with nested masks.

    Each round's mask comes from the weights retrained in the previous round
    (theta_T for the first). LRR keeps those weights and restarts the LR
    schedule; LTH resets the kept weights to theta_0. ``on_round`` sees every
    intermediate sparse model. ``resume_from`` (the result of an earlier
    round of the same chain) skips the rounds up to and including its own.
    """
    epochs = sorted(snapshots.epochs)
    ref = snapshots.load(epochs[-1])
    init = snapshots.load(0) if method.recovery == "lth" else None
    if method.recovery == "lth" and 0 not in epochs:
        raise KeyError(f"no snapshot for epoch 0; stored epochs: {epochs}")
    sched = round_schedule(schedule, method.round_epochs)
    mask = ones_mask(ref)
    result = SparseModel(ref, mask, method, 0.0, round=0)
    done = 0
    if resume_from is not None:
        check_mask(resume_from.state, resume_from.mask)
        ref, mask, result, done = resume_from.state, resume_from.mask, resume_from, resume_from.round
    for k, s in enumerate(cumulative_sparsities(target, method.rounds, method.schedule), start=1):
        if k <= done:
            continue
        mask = global_magnitude_mask(ref, s, existing=mask)
        start = apply_mask(init if init is not None else ref, mask)
        ref = train(start, dataset, sched, grad_mask=mask, **train_kwargs)
        result = SparseModel(ref, mask, method, s, round=k)
        log.info("%s round %d: sparsity %.3f", method.name, k, sparsity_of(mask))
        if on_round is not None:
            on_round(result)
    return result


_MASK_MAGIC = b"PLMK"


def save_mask(path, mask: PruneMask) -> None:
    """Bitset per tensor behind a ``name / shape`` directory (little-endian)."""
    with open(path, "wb") as f:
        f.write(_MASK_MAGIC + struct.pack("<HI", 1, len(mask)))
        for name, m in mask.items():
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", m.ndim))
            f.write(struct.pack(f"<{m.ndim}I", *m.shape))
        for m in mask.values():
            f.write(np.packbits(m.ravel(), bitorder="little").tobytes())


def load_mask(path) -> PruneMask:
    buf = Path(path).read_bytes()
    if buf[:4] != _MASK_MAGIC:
        raise ValueError(f"{path}: not a mask file")
    _, count = struct.unpack_from("<HI", buf, 4)
    off = 10
    directory = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, off)
        name = buf[off + 2 : off + 2 + ln].decode()
        off += 2 + ln
        (rank,) = struct.unpack_from("<B", buf, off)
        shape = struct.unpack_from(f"<{rank}I", buf, off + 1)
        off += 1 + 4 * rank
        directory.append((name, shape))
    out = {}
    for name, shape in directory:
        size = int(np.prod(shape))
        nbytes = (size + 7) // 8
        bits = np.unpackbits(np.frombuffer(buf, np.uint8, nbytes, off), count=size, bitorder="little")
        out[name] = bits.astype(bool).reshape(shape)
        off += nbytes
    return out
