"""Independent reference implementations used only by the tests."""

import itertools
from functools import lru_cache

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path


@lru_cache(maxsize=None)
def _paths(frames: int, alphabet: int):
    paths = np.array(list(itertools.product(range(alphabet), repeat=frames)), dtype=np.int64)
    labels = []
    for p in paths.tolist():
        out, prev = [], -1
        for k in p:
            if k != prev and k != 0:
                out.append(k)
            prev = k
        labels.append(tuple(out))
    return paths, labels


def ctc_brute_force(logprobs: np.ndarray, target) -> float:
    """-log of the summed probability of every frame-level path that collapses to ``target``."""
    T, A = logprobs.shape
    paths, labels = _paths(T, A)
    target = tuple(target)
    hits = np.array([lab == target for lab in labels])
    if not hits.any():
        return np.inf
    scores = logprobs[np.arange(T)[None, :], paths[hits]].sum(axis=1)
    m = scores.max()
    return -(m + np.log(np.exp(scores - m).sum()))


def edit_distance_recursive(a, b) -> int:
    """Plain exponential recursion (no memo)."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(
        edit_distance_recursive(a[1:], b[1:]) + (a[0] != b[0]),
        edit_distance_recursive(a[1:], b) + 1,
        edit_distance_recursive(a, b[1:]) + 1,
    )


def all_strings(alphabet: int, max_len: int) -> list[tuple[int, ...]]:
    out = []
    for n in range(max_len + 1):
        out.extend(itertools.product(range(alphabet), repeat=n))
    return out


def edit_distance_graph(alphabet: int, max_len: int):
    """All-pairs edit distances by breadth-first search over the graph whose nodes
    are the strings of length <= max_len and whose edges are single edits.

    Deletions can always be done first and insertions last, so a shortest edit
    script between two strings never passes through a longer string than the
    longer endpoint; the graph restricted to max_len is therefore exact.
    """
    strings = all_strings(alphabet, max_len)
    index = {s: i for i, s in enumerate(strings)}
    rows, cols = [], []
    for s, i in index.items():
        for p in range(len(s)):
            rows.append(i)
            cols.append(index[s[:p] + s[p + 1 :]])
            for c in range(alphabet):
                if c != s[p]:
                    rows.append(i)
                    cols.append(index[s[:p] + (c,) + s[p + 1 :]])
        if len(s) < max_len:
            for p in range(len(s) + 1):
                for c in range(alphabet):
                    rows.append(i)
                    cols.append(index[s[:p] + (c,) + s[p:]])
    g = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(strings), len(strings)))
    dist = shortest_path(g, method="D", unweighted=True, directed=False)
    return strings, dist.astype(np.int64)


def magnitude_mask_sort_oracle(flat_weights: np.ndarray, target: float) -> np.ndarray:
    """Keep-vector from a full lexicographic sort on (|w|, index)."""
    n = flat_weights.size
    n_zero = int(np.floor(round(target * n, 9)))
    order = sorted(range(n), key=lambda i: (abs(flat_weights[i]), i))
    keep = np.ones(n, dtype=bool)
    keep[order[:n_zero]] = False
    return keep


def central_difference(f, x: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def magnitude_mask_lexsort_oracle(flat_weights: np.ndarray, target: float) -> np.ndarray:
    """Same contract as :func:`magnitude_mask_sort_oracle`, vectorized for large inputs:
    an explicit two-key sort on (|w|, index) instead of relying on sort stability."""
    n = flat_weights.size
    n_zero = int(np.floor(round(target * n, 9)))
    order = np.lexsort((np.arange(n), np.abs(flat_weights)))
    keep = np.ones(n, dtype=bool)
    keep[order[:n_zero]] = False
    return keep
