"""Dense kernels shared by every scoring path.

Everything here works in float64 and is a pure function of its inputs.
"""

from __future__ import annotations

import math

import numpy as np

# Householder columns whose trailing norm falls below this are treated as
# linearly dependent and dropped from the basis.
DROP_TOL = 1e-12

# Residuals at or below this fraction of the key norm count as exactly in-span.
IN_SPAN_RTOL = 1e-10

# Guard for ceil() on products such as 0.07 * 100 == 7.000000000000001.
_CEIL_SLACK = 1e-9


def robust_ceil(x: float) -> int:
    """Ceiling that ignores binary round-off just above an integer."""
    return int(math.ceil(x - _CEIL_SLACK))


def budget_count(gamma: float, n: int) -> int:
    """Number of tokens kept for budget fraction ``gamma`` out of ``n``."""
    return min(n, robust_ceil(gamma * n))


def standardize(v, epsilon: float = 1e-8) -> np.ndarray:
    """Return ``(v - mean) / (std + epsilon)`` with the population std."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty vector")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    mu = v.mean()
    sigma = np.sqrt(np.mean((v - mu) ** 2))
    return (v - mu) / (sigma + epsilon)


def softmax_temp(v, tau: float) -> np.ndarray:
    """Numerically stable ``softmax(v / tau)``."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    z = np.asarray(v, dtype=np.float64) / tau
    if z.size == 0:
        return z
    z = np.exp(z - z.max())
    return z / z.sum()


def thin_qr(m, r: int, tol: float = DROP_TOL) -> np.ndarray:
    """Orthonormal basis for the span of the leading ``r`` columns of ``m``.

    ``m`` is ``d x cols``. Householder reflections are applied to the first
    ``min(r, d, cols)`` columns in order, without pivoting. A column whose
    remaining norm is below ``tol`` contributes no direction, so the result
    can have fewer than ``r`` columns (zero columns for an all-zero input).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("thin_qr expects a 2-D matrix")
    d, cols = m.shape
    if cols < 1:
        raise ValueError("thin_qr needs at least one column")
    if r < 1:
        raise ValueError("rank must be >= 1")
    r_eff = min(r, d, cols)
    a = m[:, :r_eff].copy()
    reflectors: list[np.ndarray] = []
    row = 0
    for c in range(r_eff):
        if row >= d:
            break
        x = a[row:, c]
        norm = np.linalg.norm(x)
        if norm < tol:
            continue
        v = x.copy()
        v[0] += math.copysign(norm, x[0]) if x[0] != 0 else norm
        v /= np.linalg.norm(v)
        a[row:, c:] -= 2.0 * np.outer(v, v @ a[row:, c:])
        reflectors.append(v)
        row += 1
    k = len(reflectors)
    q = np.eye(d, k)
    for j in range(k - 1, -1, -1):
        v = reflectors[j]
        q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])
    return q


def project_residual_norms(keys, q) -> np.ndarray:
    """Row norms of ``keys - (keys @ q) @ q.T``.

    ``keys`` is ``m x d`` and ``q`` is ``d x k`` with orthonormal columns.
    """
    keys = np.asarray(keys, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if keys.ndim != 2 or q.ndim != 2 or keys.shape[1] != q.shape[0]:
        raise ValueError(
            f"shape mismatch: keys {keys.shape} vs basis {q.shape}")
    residual = keys - (keys @ q) @ q.T
    return np.linalg.norm(residual, axis=1)


def nearest_rank_percentile(v, q: float) -> float:
    """Lower nearest-rank order statistic: sorted(v)[ceil(q*m) - 1]."""
    v = np.asarray(v, dtype=np.float64)
    m = v.size
    if m == 0:
        raise ValueError("no previous-frame tokens")
    idx = min(max(robust_ceil(q * m) - 1, 0), m - 1)
    return float(np.sort(v, kind="stable")[idx])


def top_k_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties to the lower index, ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    if k < 0:
        raise ValueError("k must be non-negative")
    k = min(k, scores.size)
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])
