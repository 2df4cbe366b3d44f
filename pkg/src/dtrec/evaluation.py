"""Full-ranking metrics, reasoning cost and trajectory export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .arh import HaltPolicy
from .data import SplitView, make_batches
from .hps import PrototypeIndex, nearest_prototype_ids

CUTOFFS = (10, 20)


def recall_at_k(rank, k: int):
    return (np.asarray(rank) <= k).astype(np.float64)


def ndcg_at_k(rank, k: int):
    rank = np.asarray(rank, dtype=np.float64)
    return np.where(rank <= k, 1.0 / np.log2(rank + 1.0), 0.0)


def rank_items(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target among all real items (padding column skipped)."""
    return kernels.count_ranks(np.ascontiguousarray(scores), np.asarray(targets, dtype=np.int64))


def rank_target(model, items: np.ndarray, targets: np.ndarray, policy: HaltPolicy | None = None):
    scores, exits, _ = model.infer(items, policy)
    return rank_items(scores, targets), exits


def cost_ratio(exit_steps, max_steps: int) -> float:
    """Average reasoning steps taken over the fixed budget, in percent."""
    exit_steps = np.asarray(exit_steps, dtype=np.float64)
    if max_steps <= 0 or exit_steps.size == 0:
        return 100.0
    return 100.0 * float(exit_steps.mean()) / max_steps


def length_groups(lengths, n_groups: int = 5) -> np.ndarray:
    """Equal-size quantile groups 0..n_groups-1 by history length (0 = shortest)."""
    lengths = np.asarray(lengths)
    order = np.argsort(lengths, kind="stable")
    groups = np.empty(len(lengths), dtype=np.int64)
    for g, chunk in enumerate(np.array_split(order, n_groups)):
        groups[chunk] = g
    return groups


def steps_by_length_group(lengths, exit_steps, n_groups: int = 5) -> list[dict]:
    groups = length_groups(lengths, n_groups)
    exit_steps = np.asarray(exit_steps, dtype=np.float64)
    lengths = np.asarray(lengths)
    rows = []
    for g in range(n_groups):
        m = groups == g
        rows.append({
            "group": f"G{g + 1}",
            "users": int(m.sum()),
            "min_length": int(lengths[m].min()) if m.any() else 0,
            "max_length": int(lengths[m].max()) if m.any() else 0,
            "mean_exit_step": float(exit_steps[m].mean()) if m.any() else float("nan"),
        })
    return rows


@dataclass
class MetricsReport:
    variant: str
    seed: int
    recall: dict[str, float]
    ndcg: dict[str, float]
    cost_ratio: float
    mean_exit_step: float
    max_steps: int
    users: int
    group_exit_steps: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @property
    def ndcg10(self) -> float:
        return self.ndcg["10"]


@dataclass
class EvalResult:
    report: MetricsReport
    ranks: np.ndarray
    exit_steps: np.ndarray
    lengths: np.ndarray
    users: np.ndarray
    targets: np.ndarray


def evaluate(model, view: SplitView, policy: HaltPolicy | None = None, batch_size: int = 512,
             max_len: int | None = None, seed: int = 0, n_groups: int = 5) -> EvalResult:
    max_len = max_len or model.config.max_len
    ranks, exits, lengths, users, targets = [], [], [], [], []
    for batch in make_batches(view, batch_size, max_len):
        r, e = rank_target(model, batch.items, batch.targets, policy)
        ranks.append(r)
        exits.append(e)
        lengths.append(batch.lengths)
        users.append(batch.users)
        targets.append(batch.targets)
    ranks = np.concatenate(ranks)
    exits = np.concatenate(exits)
    lengths = np.concatenate(lengths)
    max_steps = model.steps if policy is None else min(model.steps, policy.max_steps)
    report = MetricsReport(
        variant=model.variant.name,
        seed=seed,
        recall={str(k): float(recall_at_k(ranks, k).mean()) for k in CUTOFFS},
        ndcg={str(k): float(ndcg_at_k(ranks, k).mean()) for k in CUTOFFS},
        cost_ratio=cost_ratio(exits, max_steps),
        mean_exit_step=float(exits.mean()),
        max_steps=max_steps,
        users=int(len(ranks)),
        group_exit_steps=steps_by_length_group(lengths, exits, n_groups),
    )
    return EvalResult(report, ranks, exits, lengths, np.concatenate(users), np.concatenate(targets))


def write_exits(result: EvalResult, path: str | Path, user_ids=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "length", "exit_step"])
        for u, n, e in zip(result.users, result.lengths, result.exit_steps):
            w.writerow([user_ids[u] if user_ids is not None else int(u), int(n), int(e)])


def spearman(x, y) -> float:
    """Spearman rank correlation (average ranks for ties); 0 when either side is constant."""
    from scipy.stats import spearmanr

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    rho = spearmanr(x, y).statistic
    return float(rho) if not math.isnan(rho) else 0.0


def export_trajectories(model, view: SplitView, index: PrototypeIndex | None, path: str | Path,
                        policy: HaltPolicy | None = None, batch_size: int = 512, user_ids=None,
                        limit: int | None = None) -> int:
    """CSV of every reasoning state: user, step, components, prototype id, target."""
    d = model.config.d_model
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "step"] + [f"r{i}" for i in range(d)] + ["assigned_prototype_id", "target_item_id"])
        for batch in make_batches(view, batch_size, model.config.max_len):
            model.train(False)
            trace = model.trace(batch.items)
            for t, state in enumerate(trace.states):
                r = state.data
                if index is not None and index.centers:
                    proto = nearest_prototype_ids(r, index.level(max(t, 1)))
                else:
                    proto = np.full(len(r), -1)
                for b in range(len(r)):
                    u = batch.users[b]
                    w.writerow([user_ids[u] if user_ids is not None else int(u), t]
                               + [f"{v:.6g}" for v in r[b]] + [int(proto[b]), int(batch.targets[b])])
                    rows += 1
            if limit is not None and rows >= limit:
                break
    return rows
