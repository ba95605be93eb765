"""CTC loss (forward-backward in log space) and greedy decoding.

The blank symbol is always id 0. Log-probabilities are clamped at ``NEG_INF``
so that -inf never enters the recursions.
"""

import numpy as np
from numba import njit

BLANK = 0
NEG_INF = -1e30
_NEG_CUTOFF = -1e29


class CTCInfeasibleError(ValueError):
    """Raised when a target cannot be aligned to the given number of frames."""


@njit(cache=True)
def _logaddexp(a, b):
    if a < b:
        a, b = b, a
    if b < _NEG_CUTOFF:
        return a
    return a + np.log1p(np.exp(b - a))


@njit(cache=True)
def _ctc_kernel(logprobs, target):
    T = logprobs.shape[0]
    A = logprobs.shape[1]
    S = 2 * target.shape[0] + 1
    ext = np.zeros(S, dtype=np.int64)
    for i in range(target.shape[0]):
        ext[2 * i + 1] = target[i]

    alpha = np.full((T, S), NEG_INF)
    beta = np.full((T, S), NEG_INF)

    alpha[0, 0] = logprobs[0, 0]
    if S > 1:
        alpha[0, 1] = logprobs[0, ext[1]]
    # only states that can be reached from the start and still finish by T
    for t in range(1, T):
        for s in range(max(0, S - 2 * (T - t)), min(S, 2 * t + 2)):
            a = alpha[t - 1, s]
            if s >= 1:
                a = _logaddexp(a, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != 0 and ext[s] != ext[s - 2]:
                a = _logaddexp(a, alpha[t - 1, s - 2])
            if a > _NEG_CUTOFF:
                alpha[t, s] = a + logprobs[t, ext[s]]

    beta[T - 1, S - 1] = logprobs[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = logprobs[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        for s in range(max(0, S - 2 * (T - t)), min(S, 2 * t + 2)):
            b = beta[t + 1, s]
            if s + 1 < S:
                b = _logaddexp(b, beta[t + 1, s + 1])
            if s + 2 < S and ext[s] != 0 and ext[s] != ext[s + 2]:
                b = _logaddexp(b, beta[t + 1, s + 2])
            if b > _NEG_CUTOFF:
                beta[t, s] = b + logprobs[t, ext[s]]

    loglik = alpha[T - 1, S - 1]
    if S > 1:
        loglik = _logaddexp(loglik, alpha[T - 1, S - 2])

    # d(-log P)/d logprobs[t, k] = -sum_{s: ext[s]=k} alpha*beta / (y_tk * P)
    occ = np.full((T, A), NEG_INF)
    for t in range(T):
        for s in range(max(0, S - 2 * (T - t)), min(S, 2 * t + 2)):
            ab = alpha[t, s] + beta[t, s]
            if ab > _NEG_CUTOFF:
                k = ext[s]
                occ[t, k] = _logaddexp(occ[t, k], ab - logprobs[t, k])
    grad = np.zeros((T, A))
    for t in range(T):
        for k in range(A):
            if occ[t, k] > _NEG_CUTOFF:
                grad[t, k] = -np.exp(occ[t, k] - loglik)
    return -loglik, grad


def min_frames(target) -> int:
    """Smallest frame count able to emit ``target`` (one blank per adjacent repeat)."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss(logprobs, target):
    """Negative log-likelihood of ``target`` under per-frame ``logprobs``.

    Returns ``(loss, grad)`` where ``grad`` is the exact gradient of the loss
    with respect to ``logprobs`` (frames x alphabet), treating every entry as
    a free variable.
    """
    logprobs = np.asarray(logprobs, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.int64).reshape(-1)
    if logprobs.ndim != 2:
        raise ValueError(f"logprobs must be 2-D, got shape {logprobs.shape}")
    if tgt.size == 0:
        raise ValueError("empty target")
    if np.any(tgt == BLANK) or np.any(tgt < 0) or np.any(tgt >= logprobs.shape[1]):
        raise ValueError("target tokens must lie in [1, alphabet_size - 1]")
    need = min_frames(tgt)
    if logprobs.shape[0] < need:
        raise CTCInfeasibleError(
            f"target of length {tgt.size} needs {need} frames, got {logprobs.shape[0]}"
        )
    lp = np.maximum(logprobs, NEG_INF)
    loss, grad = _ctc_kernel(np.ascontiguousarray(lp), tgt)
    return float(loss), grad


def greedy_decode(logprobs) -> list[int]:
    """Best-path decoding: framewise argmax, merge repeats, drop blanks.

    ``np.argmax`` returns the first maximum, so ties go to the lower token id.
    """
    best = np.argmax(np.asarray(logprobs), axis=-1)
    out = []
    prev = -1
    for k in best.tolist():
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out
