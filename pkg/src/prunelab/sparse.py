"""CSR storage for pruned weight matrices, a CSR mat-vec kernel and a small
benchmark harness comparing it against the dense product.

Both kernels accumulate each output row left to right over column index.
Masked entries contribute exact zeros to the dense sum, so the two paths
produce bit-identical results (up to the sign of zero) and their checksums
can be compared directly.
"""

from __future__ import annotations

import csv
import hashlib
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

WARMUP = 3


@dataclass
class CsrMatrix:
    rows: int
    cols: int
    row_offsets: np.ndarray  # int64, len rows + 1
    col_indices: np.ndarray  # int64, sorted within each row
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.row_offsets[-1])

    def validate(self) -> None:
        ro, ci = self.row_offsets, self.col_indices
        if len(ro) != self.rows + 1 or ro[0] != 0 or (np.diff(ro) < 0).any():
            raise ValueError("row_offsets must start at 0, be nondecreasing and have rows+1 entries")
        if len(ci) != self.nnz or len(self.values) != self.nnz:
            raise ValueError("col_indices/values length must equal nnz")
        if self.nnz and (ci.min() < 0 or ci.max() >= self.cols):
            raise ValueError("column index out of range")
        for r in range(self.rows):
            if (np.diff(ci[ro[r] : ro[r + 1]]) <= 0).any():
                raise ValueError(f"columns of row {r} are not strictly increasing")

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols), dtype=self.values.dtype)
        row_of = np.repeat(np.arange(self.rows), np.diff(self.row_offsets))
        out[row_of, self.col_indices] = self.values
        return out


def to_csr(weight: np.ndarray, mask: np.ndarray) -> CsrMatrix:
    """Keep exactly the entries where ``mask`` is true, zeros included."""
    weight = np.asarray(weight)
    mask = np.asarray(mask, dtype=bool)
    if weight.ndim != 2 or weight.shape != mask.shape:
        raise ValueError(f"weight {weight.shape} and mask {mask.shape} must be equal 2-D shapes")
    rows, cols = np.nonzero(mask)  # row-major, so columns come out sorted per row
    offsets = np.zeros(weight.shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=weight.shape[0]), out=offsets[1:])
    return CsrMatrix(weight.shape[0], weight.shape[1], offsets, cols.astype(np.int64), weight[rows, cols].copy())


@numba.njit(cache=True)
def _spmv_kernel(row_offsets, col_indices, values, x, y):
    for r in range(len(row_offsets) - 1):
        acc = 0.0
        for j in range(row_offsets[r], row_offsets[r + 1]):
            acc += values[j] * x[col_indices[j]]
        y[r] = acc


@numba.njit(cache=True)
def _dense_kernel(w, x, y):
    rows, cols = w.shape
    for r in range(rows):
        acc = 0.0
        for c in range(cols):
            acc += w[r, c] * x[c]
        y[r] = acc


def spmv(csr: CsrMatrix, x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) != csr.cols:
        raise ValueError(f"x has shape {x.shape}, expected ({csr.cols},)")
    y = np.empty(csr.rows)
    _spmv_kernel(csr.row_offsets, csr.col_indices, np.asarray(csr.values, dtype=np.float64), x, y)
    return y


def dense_mv(weight: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Reference dense product with the same summation order as :func:`spmv`."""
    w = np.ascontiguousarray(weight, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) != w.shape[1]:
        raise ValueError(f"x has shape {x.shape}, expected ({w.shape[1]},)")
    y = np.empty(w.shape[0])
    _dense_kernel(w, x, y)
    return y


def checksum(y: np.ndarray) -> str:
    return hashlib.blake2b((np.asarray(y, dtype=np.float64) + 0.0).tobytes(), digest_size=8).hexdigest()


@dataclass(frozen=True)
class BenchReport:
    size: int
    sparsity: float
    dense_ns: float
    sparse_ns: float
    speedup: float
    checksum: str


def random_instance(n: int, sparsity: float, rng: np.random.Generator):
    """Square ``n x n`` weight with exactly ``floor(sparsity * n^2)`` masked entries."""
    w = rng.standard_normal((n, n))
    mask = np.ones(n * n, dtype=bool)
    mask[rng.permutation(n * n)[: int(sparsity * n * n)]] = False
    return w, mask.reshape(n, n), rng.standard_normal(n)


def _median_ns(fn, repetitions: int, inner: int) -> float:
    for _ in range(WARMUP):
        fn()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        for _ in range(inner):
            fn()
        times.append((time.perf_counter_ns() - t0) / inner)
    return float(statistics.median(times))


def bench(sizes, sparsities, repetitions: int = 20, seed: int = 0) -> list[BenchReport]:
    """Median single-thread timings of dense vs CSR mat-vec per (size, sparsity)."""
    out = []
    for n in sizes:
        if n < 64:
            raise ValueError(f"benchmark sizes must be >= 64, got {n}")
        inner = max(1, (1 << 20) // (n * n))
        for s in sparsities:
            rng = np.random.default_rng(np.random.SeedSequence([seed, n, int(round(s * 1e6))]))
            w, mask, x = random_instance(n, s, rng)
            dense_w = np.where(mask, w, 0.0)
            csr = to_csr(w, mask)
            yd, ys = dense_mv(dense_w, x), spmv(csr, x)
            cd, cs = checksum(yd), checksum(ys)
            if cd != cs:
                raise AssertionError(f"dense/sparse outputs differ at n={n}, sparsity={s}")
            d_ns = _median_ns(lambda: dense_mv(dense_w, x), repetitions, inner)
            s_ns = _median_ns(lambda: spmv(csr, x), repetitions, inner)
            out.append(BenchReport(n, s, d_ns, s_ns, d_ns / s_ns, cs))
    return out


def write_bench_csv(path, reports: list[BenchReport]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["size", "sparsity", "dense_ns", "sparse_ns", "speedup"])
        for r in reports:
            w.writerow([r.size, r.sparsity, f"{r.dense_ns:.1f}", f"{r.sparse_ns:.1f}", f"{r.speedup:.4f}"])
