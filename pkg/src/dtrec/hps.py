"""Hierarchical process supervision: coarse-to-fine prototype targets.

Item embeddings are clustered at a granularity that grows with the reasoning
step; each reasoning state is pulled toward the item distribution of its
nearest cluster center.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import numerics as nx
from .backbone import ReasoningTrace
from .data import PAD


@dataclass(frozen=True)
class GranularitySchedule:
    k0: int = 10
    k_upper: int = 3000
    alpha: float = 0.5
    steps: int = 3
    constant: bool = False  # ablation: every step uses k0

    def __post_init__(self):
        if not 1 <= self.k0 <= self.k_upper:
            raise ValueError("need 1 <= k0 <= k_upper")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def schedule_k(sched: GranularitySchedule, t: int, n_items: int | None = None) -> int:
    """Cluster count for reasoning step ``t`` (1-based), rounded and clamped."""
    if not 1 <= t <= sched.steps:
        raise ValueError(f"step {t} outside [1, {sched.steps}]")
    cap = sched.k_upper if n_items is None else min(sched.k_upper, n_items)
    if sched.constant:
        return min(sched.k0, cap)
    raw = sched.k_upper - (sched.k_upper - sched.k0) * math.exp(-sched.alpha * (t - 1))
    return int(min(max(round(raw), sched.k0), cap))


# --------------------------------------------------------------------------
# k-means


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    closest = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # every remaining point coincides with a center
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(remaining))
        chosen.append(idx)
        closest = np.minimum(closest, ((X - X[idx]) ** 2).sum(axis=1))
    return X[chosen].copy()


def sse(X: np.ndarray, centers: np.ndarray, labels: np.ndarray) -> float:
    return float(((X - centers[labels]) ** 2).sum())


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    sse: float
    n_iter: int
    history: list[float] = field(default_factory=list)


def lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int = 100, tol: float = 1e-4) -> KMeansResult:
    """Lloyd iterations from the given centers; empty clusters take the farthest point."""
    centers = centers.copy()
    k = centers.shape[0]
    history = []
    labels, dist = kernels.assign_nearest(X, centers)
    for it in range(1, max_iter + 1):
        sums, counts = kernels.accumulate_centers(X, labels, k)
        new = centers.copy()
        nonempty = counts > 0
        new[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            far = int(np.argmax(dist))
            new[j] = X[far]
            dist[far] = 0.0
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        labels, dist = kernels.assign_nearest(X, centers)
        history.append(float(dist.sum()))
        if shift < tol:
            break
    return KMeansResult(centers, labels, float(dist.sum()), it, history)


def hartigan(X: np.ndarray, result: KMeansResult, max_pass: int = 100) -> KMeansResult:
    """Polish a Lloyd fixed point with single-point moves; SSE never goes up."""
    k = result.centers.shape[0]
    centers, _, moves = kernels.hartigan_refine(X, result.labels, k, max_pass)
    if moves == 0:
        return result
    labels, dist = kernels.assign_nearest(X, centers)
    total = float(dist.sum())
    return KMeansResult(centers, labels, total, result.n_iter, result.history + [total])


def fit_prototypes(E: np.ndarray, k: int, seed: int = 0, n_init: int = 10,
                   max_iter: int = 100, tol: float = 1e-4) -> np.ndarray:
    """K-means++ seeded Lloyd plus Hartigan moves; keeps the lowest-SSE of ``n_init`` restarts."""
    return fit_kmeans(E, k, seed, n_init, max_iter, tol).centers


def fit_kmeans(E: np.ndarray, k: int, seed: int = 0, n_init: int = 10,
               max_iter: int = 100, tol: float = 1e-4, refine: bool = True) -> KMeansResult:
    X = np.asarray(E, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"cannot fit {k} clusters to {n} points")
    if k == n:
        labels = np.arange(n)
        return KMeansResult(X.copy(), labels, 0.0, 0, [0.0])
    rng = np.random.default_rng(np.random.SeedSequence([seed, k, 0xC1]))
    best = None
    for _ in range(n_init):
        res = lloyd(X, kmeans_plusplus(X, k, rng), max_iter, tol)
        if refine:
            res = hartigan(X, res)
        if best is None or res.sse < best.sse:
            best = res
    return best


# --------------------------------------------------------------------------
# prototype index


@dataclass
class PrototypeIndex:
    centers: list[np.ndarray]  # step t lives at centers[t - 1]
    ks: list[int]
    snapshot_hash: str = ""
    epoch: int = -1

    def level(self, t: int) -> np.ndarray:
        if not 1 <= t <= len(self.centers):
            raise ValueError(f"no prototypes fitted for step {t}")
        return self.centers[t - 1]


def _hash_array(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()[:16]


def build_index(E: np.ndarray, sched: GranularitySchedule, seed: int = 0, epoch: int = -1,
                n_init: int = 4) -> PrototypeIndex:
    E = np.asarray(E)
    ks = [schedule_k(sched, t, E.shape[0]) for t in range(1, sched.steps + 1)]
    fits: dict[int, np.ndarray] = {}
    for k in ks:
        if k not in fits:
            fits[k] = fit_prototypes(E, k, seed=seed, n_init=n_init).astype(np.float32)
    return PrototypeIndex([fits[k] for k in ks], ks, _hash_array(E), epoch)


def refresh_index(model, sched: GranularitySchedule, epoch: int, seed: int, n_init: int = 4) -> PrototypeIndex:
    """Refit every level on a detached snapshot of the item table."""
    return build_index(model.item_embeddings(), sched, seed=seed * 1000 + epoch, epoch=epoch, n_init=n_init)


def nearest_prototype(r: np.ndarray, index: PrototypeIndex, t: int) -> np.ndarray:
    """Closest center to ``r`` at step ``t``; ties go to the lowest index."""
    return index.level(t)[nearest_prototype_ids(np.atleast_2d(r), index.level(t))[0]]


def nearest_prototype_ids(R: np.ndarray, centers: np.ndarray) -> np.ndarray:
    labels, _ = kernels.assign_nearest(np.asarray(R, dtype=np.float64), np.asarray(centers, dtype=np.float64))
    return labels


def prototype_distribution(p: np.ndarray, E: np.ndarray) -> np.ndarray:
    """softmax(p · Eᵀ) over the full item table (row 0 = padding, masked). No gradient."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    logits = p @ np.asarray(E, dtype=np.float64).T
    logits[:, PAD] = -np.inf
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def prototype_targets(trace: ReasoningTrace, index: PrototypeIndex, E: np.ndarray,
                      include_step0: bool = True) -> dict[int, np.ndarray]:
    """Soft targets ŷ_p^(t) per step; step 0 borrows the coarsest level."""
    out = {}
    for t in range(0 if include_step0 else 1, trace.n_steps + 1):
        centers = index.level(max(t, 1))
        r = trace.states[t].data
        ids = nearest_prototype_ids(r, centers)
        out[t] = prototype_distribution(centers[ids], E).astype(trace.log_probs[t].dtype)
    return out


def prototype_loss(trace: ReasoningTrace, index: PrototypeIndex, E: np.ndarray | None = None,
                   include_step0: bool = True, targets: dict[int, np.ndarray] | None = None) -> nx.Tensor:
    """Batch mean of Σ_t CE(ŷ_p^(t), ŷ^(t)); gradients reach r_t only through ŷ^(t)."""
    if targets is None:
        if E is None:
            raise ValueError("need the item table or precomputed targets")
        targets = prototype_targets(trace, index, E, include_step0)
    batch = trace.log_probs[0].shape[0]
    total = None
    for t, dist in targets.items():
        term = nx.soft_cross_entropy(dist, trace.log_probs[t], reduction="sum")
        total = term if total is None else total + term
    return total * (1.0 / batch)


def warmup_weight(epoch: int, full_weight: float, ramp_epochs: int = 10) -> float:
    if ramp_epochs <= 0:
        return full_weight
    return full_weight * min(1.0, max(epoch, 0) / ramp_epochs)
