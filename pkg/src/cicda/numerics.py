"""Dense linear algebra, seeded random streams and small scalar helpers.

All arrays are float64 numpy arrays.  Random numbers come from numpy's PCG64
bit generator, seeded through ``numpy.random.SeedSequence`` so that a given
(seed, key...) tuple produces the same stream on every platform.
"""
from __future__ import annotations

import math
import zlib
from typing import Sequence

import numpy as np

from .errors import EmptyInput, ShapeMismatch, SingularMatrix

Rng = np.random.Generator


def _key_to_int(key: int | str) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def make_rng(seed: int, *keys: int | str) -> Rng:
    """Return a PCG64 generator for ``seed`` and an optional substream path.

    Substreams are independent of each other, so adding a domain or a method
    never reshuffles the draws of the others.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def gaussian_matrix(rng: Rng, rows: int, cols: int, mean: float = 0.0, sd: float = 1.0) -> np.ndarray:
    if sd < 0:
        raise ValueError("sd must be non-negative")
    return mean + sd * rng.standard_normal((rows, cols))


def solve_linear_system(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a @ x = b`` by Gaussian elimination with partial pivoting.

    Raises SingularMatrix when a pivot falls below 1e-12 times the largest
    initial row norm.
    """
    a = np.array(a, dtype=np.float64)
    b = np.array(b, dtype=np.float64).reshape(-1)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise ShapeMismatch(f"expected a square matrix, got shape {a.shape}")
    if b.shape[0] != n:
        raise ShapeMismatch(f"right-hand side has length {b.shape[0]}, expected {n}")
    scale = float(np.max(np.linalg.norm(a, axis=1))) if n else 0.0
    tol = 1e-12 * scale
    if n and scale == 0.0:
        raise SingularMatrix("matrix is identically zero")

    for k in range(n):
        piv = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[piv, k]) <= tol:
            raise SingularMatrix(f"pivot {k} has magnitude {abs(a[piv, k]):.3e} <= {tol:.3e}")
        if piv != k:
            a[[k, piv]] = a[[piv, k]]
            b[[k, piv]] = b[[piv, k]]
        factors = a[k + 1:, k] / a[k, k]
        a[k + 1:, k:] -= np.outer(factors, a[k, k:])
        b[k + 1:] -= factors * b[k]

    x = np.zeros(n)
    for k in range(n - 1, -1, -1):
        x[k] = (b[k] - a[k, k + 1:] @ x[k + 1:]) / a[k, k]
    return x


def softmax(scores: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, with max subtraction.

    The normalizer sums the sorted exponentials so that the result does not
    depend on the order of the classes, bit for bit.
    """
    s = np.asarray(scores, dtype=np.float64)
    z = s - np.max(s, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(np.sort(e, axis=-1), axis=-1, keepdims=True)


def log_softmax(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    z = s - np.max(s, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.sort(np.exp(z), axis=-1), axis=-1, keepdims=True))


def quantile(values: Sequence[float] | np.ndarray, alpha: float) -> float:
    """Lower empirical quantile: the ceil(alpha*n)-th smallest value (minimum at 0)."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise EmptyInput("quantile of an empty vector")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    k = max(math.ceil(alpha * v.size), 1)
    return float(v[k - 1])


def pairwise_sq_distances(z: np.ndarray) -> np.ndarray:
    # explicit differences: exact zeros for duplicate rows, unlike the Gram trick
    diff = z[:, None, :] - z[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def median_pair_indices(d: np.ndarray) -> tuple[float, list[tuple[int, int, float]]]:
    """Median of the off-diagonal upper-triangle entries of ``d``.

    Returns the median together with the (i, j, share) pairs it is made of,
    share being 1 for an odd number of pairs and 1/2 each otherwise.  Used to
    differentiate the median bandwidth.
    """
    iu, ju = np.triu_indices(d.shape[0], k=1)
    vals = d[iu, ju]
    if vals.size == 0:
        raise EmptyInput("need at least two rows for pairwise distances")
    mid = vals.size // 2
    if vals.size % 2:
        k = np.argpartition(vals, mid)[mid]
        return float(vals[k]), [(int(iu[k]), int(ju[k]), 1.0)]
    order = np.argpartition(vals, [mid - 1, mid])
    k1, k2 = order[mid - 1], order[mid]
    med = 0.5 * (vals[k1] + vals[k2])
    return float(med), [(int(iu[k1]), int(ju[k1]), 0.5), (int(iu[k2]), int(ju[k2]), 0.5)]


def median_pairwise_sq_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Median squared Euclidean distance over distinct pairs of pooled rows.

    Falls back to 1.0 when the median is zero, which keeps a Gaussian kernel
    bandwidth usable on degenerate inputs.
    """
    z = np.vstack([np.atleast_2d(x), np.atleast_2d(y)]).astype(np.float64)
    med, _ = median_pair_indices(pairwise_sq_distances(z))
    return med if med > 0.0 else 1.0
