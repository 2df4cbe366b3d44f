"""Pure-numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_compiled`` with the same
signature and results (up to float rounding for the fused row kernels).
"""

from __future__ import annotations

import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


def layer_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    """Returns (out, xhat, inv_std) for rows along the last axis."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, xhat, inv


def layer_norm_backward(g: np.ndarray, xhat: np.ndarray, inv: np.ndarray, gamma: np.ndarray):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    n = xhat.shape[-1]
    gxhat = g * gamma
    gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
    lead = tuple(range(g.ndim - 1))
    return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)


def gelu_forward(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def gelu_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    th = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
    return g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)


def scatter_add_rows(n_rows: int, ids: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """out[ids[i]] += rows[i]; out has ``n_rows`` rows."""
    flat_ids = ids.reshape(-1)
    flat = rows.reshape(flat_ids.size, -1)
    out = np.zeros((n_rows, flat.shape[1]), dtype=rows.dtype)
    if flat_ids.size:
        order = np.argsort(flat_ids, kind="stable")
        sorted_ids = flat_ids[order]
        starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
        out[sorted_ids[starts]] = np.add.reduceat(flat[order], starts, axis=0)
    return out


def assign_nearest(X: np.ndarray, C: np.ndarray):
    """Nearest center per row by squared Euclidean distance; ties -> lowest index.

    Distances are screened with the BLAS expansion and near-ties are settled
    with exact differences, so the tie rule holds exactly.
    """
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    xx = (X * X).sum(axis=1)
    cc = (C * C).sum(axis=1)
    d = xx[:, None] - 2.0 * (X @ C.T) + cc[None, :]
    best = d.min(axis=1)
    slack = 1e-9 * (xx + cc.max() + 1.0)
    near = d <= (best + slack)[:, None]
    labels = np.argmax(near, axis=1)
    multi = np.flatnonzero(near.sum(axis=1) > 1)
    for i in multi:
        cand = np.flatnonzero(near[i])
        exact = ((C[cand] - X[i]) ** 2).sum(axis=1)
        labels[i] = cand[int(np.argmin(exact))]
    dist = ((X - C[labels]) ** 2).sum(axis=1)
    return labels.astype(np.int64), dist


def accumulate_centers(X: np.ndarray, labels: np.ndarray, k: int):
    """Per-cluster coordinate sums and member counts."""
    X = np.asarray(X, dtype=np.float64)
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    sums = np.zeros((k, X.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, X)
    return sums, counts


def count_ranks(scores: np.ndarray, targets: np.ndarray, skip_first: bool = True) -> np.ndarray:
    """1-based rank of each target under descending score; ties -> lower item id first."""
    scores = np.asarray(scores)
    rows = np.arange(scores.shape[0])
    ts = scores[rows, targets][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    ahead = (scores > ts) | ((scores == ts) & (ids < targets[:, None]))
    if skip_first:
        ahead[:, 0] = False
    return 1 + ahead.sum(axis=1)


def all_finite(arr: np.ndarray) -> bool:
    return bool(np.isfinite(arr).all())


def hartigan_refine(X: np.ndarray, labels: np.ndarray, k: int, max_pass: int = 100):
    """Single-point moves that strictly lower the SSE (Hartigan's rule).

    A point leaves cluster a for b when n_b/(n_b+1)·|x-c_b|² is below
    n_a/(n_a-1)·|x-c_a|². Returns (centers, labels, moves).
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.array(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros((k, X.shape[1]))
    np.add.at(sums, labels, X)
    centers = sums / np.maximum(counts, 1.0)[:, None]
    moves = 0
    for _ in range(max_pass):
        moved = False
        for i in range(X.shape[0]):
            a = labels[i]
            if counts[a] <= 1:
                continue
            d = ((centers - X[i]) ** 2).sum(axis=1)
            remove = counts[a] / (counts[a] - 1.0) * d[a]
            add = counts / (counts + 1.0) * d
            add[a] = np.inf
            b = int(np.argmin(add))
            if add[b] < remove * (1.0 - 1e-12):
                sums[a] -= X[i]
                counts[a] -= 1.0
                centers[a] = sums[a] / counts[a]
                sums[b] += X[i]
                counts[b] += 1.0
                centers[b] = sums[b] / counts[b]
                labels[i] = b
                moved = True
                moves += 1
        if not moved:
            break
    exact = np.zeros((k, X.shape[1]))
    np.add.at(exact, labels, X)
    return exact / np.maximum(counts, 1.0)[:, None], labels, moves
