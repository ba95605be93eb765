"""A small prunable CTC sequence model with a hand-written backward pass.

Architecture (all layers act per frame except the convolution)::

    conv1d(feature_dim -> hidden_dim, kernel=conv_kernel, stride 1, same padding)
    num_blocks x [ linear(hidden -> 2*hidden) -> GLU -> residual add -> layer norm ]
    linear(hidden -> alphabet_size) -> log_softmax

Weight matrices of the convolution and the linear layers are prunable; biases
and layer-norm parameters are not.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 12
    hidden_dim: int = 20
    num_blocks: int = 2
    alphabet_size: int = 13
    conv_kernel: int = 3

    def __post_init__(self):
        for name in ("feature_dim", "hidden_dim", "num_blocks", "alphabet_size", "conv_kernel"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if self.alphabet_size < 2:
            raise ValueError("alphabet_size must include blank plus at least one grapheme")

    def param_shapes(self) -> dict[str, tuple[tuple[int, ...], bool]]:
        """Ordered ``name -> (shape, prunable)`` for every parameter tensor."""
        F, H, A, K = self.feature_dim, self.hidden_dim, self.alphabet_size, self.conv_kernel
        shapes = {
            "conv.weight": ((H, F, K), True),
            "conv.bias": ((H,), False),
        }
        for i in range(self.num_blocks):
            shapes[f"blocks.{i}.linear.weight"] = ((2 * H, H), True)
            shapes[f"blocks.{i}.linear.bias"] = ((2 * H,), False)
            shapes[f"blocks.{i}.norm.weight"] = ((H,), False)
            shapes[f"blocks.{i}.norm.bias"] = ((H,), False)
        shapes["head.weight"] = ((A, H), True)
        shapes["head.bias"] = ((A,), False)
        return shapes

    @property
    def param_count(self) -> int:
        F, H, A, K = self.feature_dim, self.hidden_dim, self.alphabet_size, self.conv_kernel
        return H * F * K + H + self.num_blocks * (2 * H * H + 2 * H + 2 * H) + A * H + A

    @classmethod
    def from_shapes(cls, shapes: dict[str, tuple[int, ...]]) -> "ModelConfig":
        H, F, K = shapes["conv.weight"]
        A = shapes["head.weight"][0]
        nb = sum(1 for n in shapes if n.endswith(".linear.weight"))
        return cls(feature_dim=F, hidden_dim=H, num_blocks=nb, alphabet_size=A, conv_kernel=K)


@dataclass
class ParamTensor:
    name: str
    values: np.ndarray
    prunable: bool

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size


@dataclass
class ModelState:
    """Named parameter tensors (insertion-ordered) plus the epoch they belong to."""

    params: dict[str, ParamTensor]
    epoch_tag: int = 0
    seed: int = 0
    config: ModelConfig = field(default=None)

    def __post_init__(self):
        if self.config is None:
            self.config = ModelConfig.from_shapes({n: p.shape for n, p in self.params.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].values

    def names(self) -> list[str]:
        return list(self.params)

    def prunable_names(self) -> list[str]:
        return [n for n, p in self.params.items() if p.prunable]

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def prunable_count(self) -> int:
        return sum(p.size for p in self.params.values() if p.prunable)

    def copy(self, epoch_tag: int | None = None) -> "ModelState":
        return ModelState(
            {n: ParamTensor(n, p.values.copy(), p.prunable) for n, p in self.params.items()},
            self.epoch_tag if epoch_tag is None else epoch_tag,
            self.seed,
            self.config,
        )

    def equals(self, other: "ModelState") -> bool:
        """Bit-level equality of every tensor and of the metadata."""
        if self.names() != other.names() or self.epoch_tag != other.epoch_tag:
            return False
        return all(
            a.prunable == b.prunable
            and a.values.dtype == b.values.dtype
            and a.values.shape == b.values.shape
            and a.values.tobytes() == b.values.tobytes()
            for a, b in zip(self.params.values(), other.params.values())
        )


def init_model(config: ModelConfig, seed: int) -> ModelState:
    """Weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)); biases 0; norm gains 1."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A17]))
    params = {}
    for name, (shape, prunable) in config.param_shapes().items():
        if prunable:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(1.0 / fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("norm.weight"):
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        params[name] = ParamTensor(name, values.astype(np.float64), prunable)
    return ModelState(params, epoch_tag=0, seed=seed, config=config)


@dataclass
class Batch:
    sequences: list[np.ndarray]
    transcripts: list[tuple[int, ...]]

    @property
    def frames(self) -> int:
        return sum(len(s) for s in self.sequences)


def _pack(sequences: Sequence[np.ndarray], feature_dim: int, pad: int):
    """Concatenate sequences with ``pad`` zero frames around each one.

    Returns the flat buffer, the row of every real frame in it, and the
    per-sequence lengths. A convolution over the buffer then sees exactly the
    zero padding it would see on each sequence alone.
    """
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    for s in sequences:
        if s.ndim != 2 or s.shape[1] != feature_dim:
            raise ValueError(f"expected frames x {feature_dim} features, got shape {s.shape}")
    starts = pad + np.concatenate([[0], np.cumsum(lengths + pad)[:-1]])
    x = np.zeros((int(lengths.sum() + pad * (len(lengths) + 1)), feature_dim))
    for s, a in zip(sequences, starts):
        x[a : a + len(s)] = s
    rows = np.concatenate([np.arange(a, a + n) for a, n in zip(starts, lengths)])
    return x, rows, lengths


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _forward(state: ModelState, x: np.ndarray, rows: np.ndarray):
    """Forward over the packed buffer; outputs only for the real frames."""
    cfg = state.config
    F = x.shape[1]
    K, H = cfg.conv_kernel, cfg.hidden_dim
    # window j covers buffer rows j .. j+K-1, centred on j + K//2
    cols = sliding_window_view(x, K, axis=0)[rows - K // 2].reshape(len(rows), F * K)
    h = cols @ state["conv.weight"].reshape(H, F * K).T + state["conv.bias"]
    cache = {"cols": cols, "blocks": []}
    for i in range(cfg.num_blocks):
        p = f"blocks.{i}."
        z = h @ state[p + "linear.weight"].T + state[p + "linear.bias"]
        a, g = z[:, :H], z[:, H:]
        sg = _sigmoid(g)
        y = h + a * sg
        mu = y.mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(y.var(axis=1, keepdims=True) + LN_EPS)
        yhat = (y - mu) * inv
        cache["blocks"].append((h, a, sg, yhat, inv))
        h = yhat * state[p + "norm.weight"] + state[p + "norm.bias"]
    cache["h"] = h
    logits = h @ state["head.weight"].T + state["head.bias"]
    m = logits.max(axis=1, keepdims=True)
    logprobs = logits - (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))
    cache["logprobs"] = logprobs
    return logprobs, cache


def _backward(state: ModelState, cache, dlogprobs: np.ndarray) -> dict[str, np.ndarray]:
    cfg = state.config
    H, F, K = cfg.hidden_dim, cfg.feature_dim, cfg.conv_kernel
    g = dlogprobs.reshape(-1, cfg.alphabet_size)
    probs = np.exp(cache["logprobs"])
    dlogits = g - probs * g.sum(axis=1, keepdims=True)
    grads = {
        "head.weight": dlogits.T @ cache["h"],
        "head.bias": dlogits.sum(axis=0),
    }
    dh = dlogits @ state["head.weight"]
    for i in reversed(range(cfg.num_blocks)):
        p = f"blocks.{i}."
        h_in, a, sg, yhat, inv = cache["blocks"][i]
        grads[p + "norm.weight"] = (dh * yhat).sum(axis=0)
        grads[p + "norm.bias"] = dh.sum(axis=0)
        dyhat = dh * state[p + "norm.weight"]
        dy = inv * (
            dyhat
            - dyhat.mean(axis=1, keepdims=True)
            - yhat * (dyhat * yhat).mean(axis=1, keepdims=True)
        )
        dz = np.concatenate([dy * sg, dy * a * sg * (1.0 - sg)], axis=1)
        grads[p + "linear.weight"] = dz.T @ h_in
        grads[p + "linear.bias"] = dz.sum(axis=0)
        dh = dy + dz @ state[p + "linear.weight"]
    grads["conv.weight"] = (dh.T @ cache["cols"]).reshape(H, F, K)
    grads["conv.bias"] = dh.sum(axis=0)
    return {n: grads[n] for n in state.names()}


def _split(flat: np.ndarray, lengths) -> list[np.ndarray]:
    return np.split(flat, np.cumsum(lengths)[:-1])


def forward(state: ModelState, batch: Batch) -> list[np.ndarray]:
    """Per-frame log-probabilities, one ``(frames, alphabet_size)`` array per sequence."""
    x, rows, lengths = _pack(batch.sequences, state.config.feature_dim, state.config.conv_kernel // 2)
    out, _ = _forward(state, x, rows)
    return _split(out, lengths)


def backward(state: ModelState, batch: Batch, upstream: Sequence[np.ndarray]) -> dict[str, np.ndarray]:
    """Gradient of ``sum_i <upstream_i, forward(batch)_i>`` w.r.t. every parameter."""
    x, rows, lengths = _pack(batch.sequences, state.config.feature_dim, state.config.conv_kernel // 2)
    _, cache = _forward(state, x, rows)
    A = state.config.alphabet_size
    if len(upstream) != len(lengths):
        raise ValueError("one upstream gradient per sequence is required")
    for i, (n, u) in enumerate(zip(lengths, upstream)):
        if u.shape != (n, A):
            raise ValueError(f"upstream gradient {i} has shape {u.shape}, expected {(int(n), A)}")
    return _backward(state, cache, np.concatenate(upstream, axis=0))


def forward_backward(state: ModelState, batch: Batch, loss_fn):
    """One pass: ``loss_fn(i, logprobs_i) -> (loss_i, dloss_i)`` per sequence.

    Returns ``(total_loss, grads, per-sequence logprobs)``.
    """
    x, rows, lengths = _pack(batch.sequences, state.config.feature_dim, state.config.conv_kernel // 2)
    out, cache = _forward(state, x, rows)
    outs = _split(out, lengths)
    d = np.empty_like(out)
    total = 0.0
    off = 0
    for i, (n, lp) in enumerate(zip(lengths, outs)):
        loss, g = loss_fn(i, lp)
        total += loss
        d[off : off + n] = g
        off += n
    return total, _backward(state, cache, d), outs
