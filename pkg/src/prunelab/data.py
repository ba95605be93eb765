"""Deterministic synthetic (feature sequence, transcript) corpus.

Each grapheme id owns a fixed random prototype vector. A sample is a
transcript of words joined by a separator token; every token is emitted as its
prototype repeated for a random number of frames, the frames next to a segment
boundary are blended a quarter of the way toward the neighbouring prototype,
and i.i.d. Gaussian jitter is added. Features are stored as float32.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

Sample = tuple[np.ndarray, tuple[int, ...]]

BLEND = 0.25
_MAGIC = b"PLDS"
_VERSION = 1
_HEADER = struct.Struct("<4sHIHHHHHHHHHddQ")


@dataclass(frozen=True)
class DatasetSpec:
    num_samples: int = 2200
    alphabet_size: int = 13
    word_separator_token: int = 12
    words_per_transcript: tuple[int, int] = (3, 8)
    tokens_per_word: tuple[int, int] = (1, 4)
    frames_per_token: tuple[int, int] = (2, 6)
    feature_dim: int = 12
    emission_noise_std: float = 0.3
    prototype_scale: float = 0.45  # prototype entries ~ N(0, scale^2); sets class separation
    seed: int = 0

    def __post_init__(self):
        # yaml/json round trips hand back lists
        for name in ("words_per_transcript", "tokens_per_word", "frames_per_token"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        for name in ("words_per_transcript", "tokens_per_word", "frames_per_token"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 1 <= min <= max, got {(lo, hi)}")
        if self.num_samples < 1:
            raise ValueError("num_samples must be positive")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if not 1 <= self.word_separator_token < self.alphabet_size:
            raise ValueError("word_separator_token must be a non-blank id below alphabet_size")
        need = 2 if self.tokens_per_word[1] > 1 else 1
        if self.alphabet_size - 2 < need:
            raise ValueError("alphabet too small to draw words without adjacent repeats")
        if self.emission_noise_std < 0:
            raise ValueError("emission_noise_std must be non-negative")
        if self.prototype_scale <= 0:
            raise ValueError("prototype_scale must be positive")

    @property
    def word_tokens(self) -> list[int]:
        return [k for k in range(1, self.alphabet_size) if k != self.word_separator_token]


def prototypes(spec: DatasetSpec) -> np.ndarray:
    """``(alphabet_size, feature_dim)`` prototype table; row 0 (blank) is unused."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x9B07]))
    return spec.prototype_scale * rng.standard_normal((spec.alphabet_size, spec.feature_dim))


def _draw_transcript(spec: DatasetSpec, rng: np.random.Generator) -> tuple[int, ...]:
    letters = spec.word_tokens
    n_words = int(rng.integers(spec.words_per_transcript[0], spec.words_per_transcript[1] + 1))
    out: list[int] = []
    for w in range(n_words):
        if w:
            out.append(spec.word_separator_token)
        n_tok = int(rng.integers(spec.tokens_per_word[0], spec.tokens_per_word[1] + 1))
        prev = -1
        for _ in range(n_tok):
            choices = [k for k in letters if k != prev]
            prev = choices[int(rng.integers(len(choices)))]
            out.append(prev)
    return tuple(out)


def render(tokens, durations, protos: np.ndarray) -> np.ndarray:
    """Noise-free frames for ``tokens`` held for ``durations`` frames each."""
    segs = []
    last = len(tokens) - 1
    for i, (tok, d) in enumerate(zip(tokens, durations)):
        cur = protos[tok]
        seg = np.repeat(cur[None, :], d, axis=0)
        if i > 0:
            seg[0] += BLEND * (protos[tokens[i - 1]] - cur)
        if i < last:
            seg[-1] += BLEND * (protos[tokens[i + 1]] - cur)
        segs.append(seg)
    return np.concatenate(segs, axis=0)


def generate_sample(spec: DatasetSpec, index: int, protos: np.ndarray | None = None) -> Sample:
    if protos is None:
        protos = prototypes(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5A3, index]))
    tokens = _draw_transcript(spec, rng)
    lo, hi = spec.frames_per_token
    durations = rng.integers(lo, hi + 1, size=len(tokens))
    frames = render(tokens, durations, protos)
    if spec.emission_noise_std > 0:
        frames = frames + spec.emission_noise_std * rng.standard_normal(frames.shape)
    return frames.astype(np.float32), tokens


def generate(spec: DatasetSpec) -> list[Sample]:
    """The full corpus; sample ``i`` depends only on ``(spec, i)``."""
    protos = prototypes(spec)
    return [generate_sample(spec, i, protos) for i in range(spec.num_samples)]


def split(dataset: list[Sample], train_fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Deterministic disjoint partition into ``round(fraction * n)`` train samples and the rest."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(dataset)
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5911])).permutation(n)
    n_train = int(round(train_fraction * n))
    train_idx = sorted(perm[:n_train].tolist())
    test_idx = sorted(perm[n_train:].tolist())
    return [dataset[i] for i in train_idx], [dataset[i] for i in test_idx]


def nearest_prototype_decode(frames: np.ndarray, protos: np.ndarray) -> list[int]:
    """Framewise nearest non-blank prototype, repeats merged (no blank model)."""
    d = ((frames[:, None, :] - protos[None, 1:, :]) ** 2).sum(axis=2)
    best = (np.argmin(d, axis=1) + 1).tolist()
    return [k for i, k in enumerate(best) if i == 0 or k != best[i - 1]]


def save_dataset(path, spec: DatasetSpec, dataset: list[Sample]) -> None:
    """Little-endian flat file: header with the spec fields, then per-sample
    ``N (u32), N*F float32, L (u16), L uint16 tokens``."""
    with open(path, "wb") as f:
        f.write(
            _HEADER.pack(
                _MAGIC, _VERSION, spec.num_samples, spec.alphabet_size, spec.word_separator_token,
                *spec.words_per_transcript, *spec.tokens_per_word, *spec.frames_per_token,
                spec.feature_dim, spec.emission_noise_std, spec.prototype_scale, spec.seed,
            )
        )
        f.write(struct.pack("<I", len(dataset)))
        for frames, tokens in dataset:
            f.write(struct.pack("<I", frames.shape[0]))
            f.write(np.asarray(frames, dtype="<f4").tobytes())
            f.write(struct.pack("<H", len(tokens)))
            f.write(np.asarray(tokens, dtype="<u2").tobytes())


def load_dataset(path) -> tuple[DatasetSpec, list[Sample]]:
    buf = Path(path).read_bytes()
    fields = _HEADER.unpack_from(buf, 0)
    if fields[0] != _MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    if fields[1] != _VERSION:
        raise ValueError(f"{path}: unsupported dataset version {fields[1]}")
    (_, _, n, alpha, sep, w0, w1, t0, t1, f0, f1, fdim, noise, scale, seed) = fields
    spec = DatasetSpec(n, alpha, sep, (w0, w1), (t0, t1), (f0, f1), fdim, noise, scale, seed)
    off = _HEADER.size
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out = []
    for _ in range(count):
        (N,) = struct.unpack_from("<I", buf, off)
        off += 4
        frames = np.frombuffer(buf, dtype="<f4", count=N * fdim, offset=off).reshape(N, fdim)
        off += 4 * N * fdim
        (L,) = struct.unpack_from("<H", buf, off)
        off += 2
        tokens = tuple(int(t) for t in np.frombuffer(buf, dtype="<u2", count=L, offset=off))
        off += 2 * L
        out.append((frames.astype(np.float32), tokens))
    return spec, out


def spec_dict(spec: DatasetSpec) -> dict:
    d = asdict(spec)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d
