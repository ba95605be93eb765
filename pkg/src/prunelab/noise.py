"""Feature-space corruptions at severity levels 0-10, plus training augmentation.

Seen kinds (used for augmentation): BW block-wise dropout, GB temporal Gaussian
blur, MB one-sided temporal box blur ("motion"), P temporal pixelation
(hold-every-k). Unseen kinds (evaluation only): GN additive Gaussian noise,
C contrast reduction, VC uniform scalar quantisation ("compression").
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

SEEN_KINDS = ("BW", "GB", "MB", "P")
UNSEEN_KINDS = ("GN", "C", "VC")
ALL_KINDS = SEEN_KINDS + UNSEEN_KINDS
CLEAN = "CLEAN"
MAX_LEVEL = 10


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = CLEAN
    level: int = 0

    def __post_init__(self):
        if self.kind != CLEAN and self.kind not in ALL_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0 <= self.level <= MAX_LEVEL:
            raise ValueError(f"level must lie in [0, {MAX_LEVEL}], got {self.level}")
        if (self.kind == CLEAN) != (self.level == 0):
            raise ValueError("CLEAN goes with level 0 and only with level 0")

    @classmethod
    def at(cls, kind: str, level: int) -> "NoiseSpec":
        """Like the constructor, but level 0 of any kind means clean."""
        if kind != CLEAN and kind not in ALL_KINDS:
            raise ValueError(f"unknown noise kind {kind!r}")
        return cls() if level == 0 else cls(kind, level)


@dataclass(frozen=True)
class SeveritySchedule:
    """Per-level scale factors; each corruption parameter is ``factor * level``."""

    gb_sigma: float = 0.35  # Gaussian std, frames
    mb_width: int = 1  # extra box width, frames
    p_factor: int = 1  # extra hold length, frames
    bw_blocks: int = 1  # blocks per sequence
    bw_span: int = 1  # max extra block length, frames
    bw_width: float = 0.06  # block width as a fraction of feature_dim
    gn_sigma: float = 0.02  # additive noise std; level 10 roughly doubles clean dense WER


@dataclass(frozen=True)
class AugmentPolicy:
    noise: bool = False
    seen_kinds: tuple[str, ...] = SEEN_KINDS
    include_clean: bool = True
    time_mask_max_frames: int = 10
    time_mask_rate: float = 0.02
    severity: SeveritySchedule = field(default_factory=SeveritySchedule)

    def __post_init__(self):
        object.__setattr__(self, "seen_kinds", tuple(self.seen_kinds))
        if not self.seen_kinds:
            raise ValueError("seen_kinds must be non-empty")
        for k in self.seen_kinds:
            if k not in ALL_KINDS:
                raise ValueError(f"unknown noise kind {k!r}")
        if self.time_mask_max_frames < 1 or self.time_mask_rate < 0:
            raise ValueError("time mask needs max_frames >= 1 and rate >= 0")


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed if isinstance(seed, list) else [seed]))


def contrast_factor(level: int) -> float:
    # (100 - 9 level)/100 keeps level 10 at exactly 0.1
    return (100 - 9 * level) / 100


def quantization_bins(level: int) -> int:
    return 2 ** (9 - math.ceil(level * 4 / 5))


def pixel_blocks(n_frames: int, level: int, factor: int = 1) -> np.ndarray:
    """Start frames of the pixelation blocks at ``level``.

    Blocks are about ``1 + factor*level`` frames long. Each level's starts
    are a subset of the previous level's (the nearest survivors of a regular
    grid), so the partitions nest and block-mean distortion cannot shrink
    as the level grows.
    """
    starts = np.arange(n_frames)
    for lvl in range(1, level + 1):
        grid = np.arange(0, n_frames, 1 + factor * lvl)
        pos = np.clip(np.searchsorted(starts, grid), 1, len(starts) - 1) if len(starts) > 1 else np.zeros_like(grid)
        left, right = starts[pos - 1], starts[pos]
        pick = np.where(grid - left <= right - grid, left, right) if len(starts) > 1 else starts[pos]
        starts = np.unique(np.append(pick, 0))
    return starts


def corrupt(seq: np.ndarray, spec: NoiseSpec, seed, severity: SeveritySchedule | None = None) -> np.ndarray:
    """Corrupted copy of a ``frames x features`` sequence; same shape and dtype."""
    sev = severity or SeveritySchedule()
    x = np.asarray(seq, dtype=np.float64)
    lvl = spec.level
    kind = spec.kind
    if kind != CLEAN and kind not in ALL_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}")
    if lvl == 0:
        return np.array(seq, copy=True)
    N, F = x.shape
    if kind == "GB":
        y = gaussian_filter1d(x, sigma=sev.gb_sigma * lvl, axis=0, mode="nearest")
    elif kind == "MB":
        w = 1 + sev.mb_width * lvl
        c = np.cumsum(np.vstack([np.zeros((1, F)), x]), axis=0)
        hi = np.arange(1, N + 1)
        lo = np.maximum(hi - w, 0)
        y = (c[hi] - c[lo]) / (hi - lo)[:, None]
    elif kind == "P":
        starts = pixel_blocks(N, lvl, sev.p_factor)
        sums = np.add.reduceat(x.astype(np.float64), starts, axis=0)
        sizes = np.diff(np.append(starts, N))
        y = np.repeat(sums / sizes[:, None], sizes, axis=0)
    elif kind == "BW":
        rng = _rng([seed, 0xB1])
        y = x.copy()
        width = max(1, int(round(sev.bw_width * lvl * F)))
        for _ in range(sev.bw_blocks * lvl):
            span = int(rng.integers(1, 2 + sev.bw_span * lvl))
            t0 = int(rng.integers(0, N))
            f0 = int(rng.integers(0, max(1, F - width + 1)))
            y[t0 : t0 + span, f0 : f0 + width] = 0.0
    elif kind == "GN":
        rng = _rng([seed, 0x6A])
        y = x + sev.gn_sigma * lvl * rng.standard_normal(x.shape)
    elif kind == "C":
        mu = x.mean()
        y = (x - mu) * contrast_factor(lvl) + mu
    else:  # VC
        bins = quantization_bins(lvl)
        lo, hi = x.min(), x.max()
        if hi == lo:
            y = x.copy()
        else:
            step = (hi - lo) / bins
            idx = np.minimum(np.floor((x - lo) / step), bins - 1)
            y = lo + (idx + 0.5) * step
    return y.astype(np.asarray(seq).dtype)


def sample_augmentation(policy: AugmentPolicy, rng: np.random.Generator) -> NoiseSpec:
    """Uniform over the seen kinds (plus clean); level uniform on 1..10."""
    choices = list(policy.seen_kinds) + ([CLEAN] if policy.include_clean else [])
    kind = choices[int(rng.integers(len(choices)))]
    if kind == CLEAN:
        return NoiseSpec()
    return NoiseSpec(kind, int(rng.integers(1, MAX_LEVEL + 1)))


def time_mask_spans(n_frames: int, policy: AugmentPolicy, rng: np.random.Generator) -> list[tuple[int, int]]:
    """``floor(rate * N)`` half-open spans, each 1..max_frames long (clipped to N)."""
    spans = []
    for _ in range(int(math.floor(policy.time_mask_rate * n_frames))):
        length = min(int(rng.integers(1, policy.time_mask_max_frames + 1)), n_frames)
        start = int(rng.integers(0, n_frames - length + 1))
        spans.append((start, start + length))
    return spans


def time_mask(seq: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    out = np.array(seq, copy=True)
    for a, b in time_mask_spans(len(out), policy, rng):
        out[a:b] = 0
    return out
