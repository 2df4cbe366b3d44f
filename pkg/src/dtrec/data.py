"""Interaction logs, leave-one-out views, padded batches and synthetic data."""

from __future__ import annotations

import csv
import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PAD = 0
MIN_INTERACTIONS = 5


class ParseError(ValueError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


class DatasetError(ValueError):
    pass


@dataclass
class InteractionDataset:
    """Per-user chronological item sequences with dense item ids in [1, n_items]."""

    sequences: list[np.ndarray]
    user_ids: list[str]
    item_ids: list[str]  # raw id of dense item i is item_ids[i - 1]
    timestamps: list[np.ndarray] | None = None
    item_leaf: np.ndarray | None = None  # indexed by dense id; entry 0 unused
    item_category: np.ndarray | None = None
    user_shift_prob: np.ndarray | None = None

    @property
    def n_users(self) -> int:
        return len(self.sequences)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_interactions(self) -> int:
        return int(sum(len(s) for s in self.sequences))

    def stats(self) -> dict:
        n_u, n_i, n = self.n_users, self.n_items, self.n_interactions
        sparsity = 1.0 - n / (n_u * n_i) if n_u and n_i else 1.0
        return {"users": n_u, "items": n_i, "interactions": n, "sparsity": sparsity}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for raw in self.item_ids:
            h.update(raw.encode() + b"\0")
        for uid, seq in zip(self.user_ids, self.sequences):
            h.update(uid.encode() + b"\0")
            h.update(np.asarray(seq, dtype=np.int64).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SplitView:
    """Evaluation-style view: one (history, target) pair per user."""

    name: str
    users: np.ndarray
    histories: tuple[np.ndarray, ...]
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)


@dataclass(frozen=True)
class Batch:
    items: np.ndarray  # [B, L], left padded with PAD
    lengths: np.ndarray  # [B]
    targets: np.ndarray  # [B]
    users: np.ndarray  # [B]

    def __len__(self) -> int:
        return len(self.targets)


def _k_core(rows: list[tuple[str, str, float, int]], k: int) -> list[tuple[str, str, float, int]]:
    while True:
        users = Counter(r[0] for r in rows)
        items = Counter(r[1] for r in rows)
        kept = [r for r in rows if users[r[0]] >= k and items[r[1]] >= k]
        if len(kept) == len(rows):
            return kept
        rows = kept


def build_dataset(rows: Sequence[tuple[str, str, float]], core: int = MIN_INTERACTIONS) -> InteractionDataset:
    indexed = [(u, i, float(ts), n) for n, (u, i, ts) in enumerate(rows)]
    indexed = _k_core(indexed, core)
    if not indexed:
        raise DatasetError("no interactions left after k-core filtering")
    item_raw = sorted({r[1] for r in indexed})
    item_map = {raw: n + 1 for n, raw in enumerate(item_raw)}
    per_user: dict[str, list[tuple[float, int, int]]] = {}
    for u, i, ts, n in indexed:
        per_user.setdefault(u, []).append((ts, n, item_map[i]))
    user_ids = sorted(per_user)
    sequences, stamps = [], []
    for u in user_ids:
        events = sorted(per_user[u])  # timestamp, then file order
        sequences.append(np.array([e[2] for e in events], dtype=np.int64))
        stamps.append(np.array([e[0] for e in events], dtype=np.float64))
    return InteractionDataset(sequences, user_ids, item_raw, stamps)


def read_tsv(path: str | Path) -> list[tuple[str, str, float]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, line_no, f"expected 3 tab-separated fields, got {len(parts)}")
            user, item, ts = parts
            if not user or not item:
                raise ParseError(path, line_no, "empty user or item id")
            try:
                stamp = float(ts)
            except ValueError:
                raise ParseError(path, line_no, f"bad timestamp {ts!r}") from None
            rows.append((user, item, stamp))
    return rows


def load_interactions(path: str | Path, fmt: str = "tsv", core: int = MIN_INTERACTIONS) -> InteractionDataset:
    if fmt != "tsv":
        raise ValueError(f"unsupported format {fmt!r}")
    ds = build_dataset(read_tsv(path), core=core)
    labels = Path(str(path) + ".labels")
    if labels.exists():
        _attach_labels(ds, labels)
    read_user_shift(path, ds)
    return ds


def _attach_labels(ds: InteractionDataset, path: Path) -> None:
    leaf = np.full(ds.n_items + 1, -1, dtype=np.int64)
    cat = np.full(ds.n_items + 1, -1, dtype=np.int64)
    dense = {raw: n + 1 for n, raw in enumerate(ds.item_ids)}
    with open(path, encoding="utf-8") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if row and row[0] in dense:
                leaf[dense[row[0]]] = int(row[1])
                cat[dense[row[0]]] = int(row[2])
    ds.item_leaf, ds.item_category = leaf, cat


def leave_one_out_split(ds: InteractionDataset) -> tuple[SplitView, SplitView, SplitView]:
    """Train keeps all but the last two items; valid/test hold out one each."""
    users, train_h, valid_h, test_h = [], [], [], []
    train_t, valid_t, test_t = [], [], []
    for u, seq in enumerate(ds.sequences):
        if len(seq) < MIN_INTERACTIONS:
            raise DatasetError(f"user {ds.user_ids[u]} has {len(seq)} < {MIN_INTERACTIONS} interactions")
        users.append(u)
        train_h.append(seq[:-3])
        train_t.append(seq[-3])
        valid_h.append(seq[:-2])
        valid_t.append(seq[-2])
        test_h.append(seq[:-1])
        test_t.append(seq[-1])
    users_arr = np.array(users, dtype=np.int64)
    return (
        SplitView("train", users_arr, tuple(train_h), np.array(train_t, dtype=np.int64)),
        SplitView("valid", users_arr, tuple(valid_h), np.array(valid_t, dtype=np.int64)),
        SplitView("test", users_arr, tuple(test_h), np.array(test_t, dtype=np.int64)),
    )


def training_instances(train: SplitView, per_user: int | None = None, min_history: int = 1) -> SplitView:
    """Expand the train view into (prefix, next item) pairs.

    ``per_user`` keeps only the most recent cut points of each user; ``None``
    keeps every cut point with at least ``min_history`` visible items.
    """
    users, hists, targets = [], [], []
    for u, h, t in zip(train.users, train.histories, train.targets):
        seq = np.append(h, t)
        cuts = range(min_history, len(seq))
        if per_user is not None:
            cuts = cuts[-per_user:]
        for c in cuts:
            users.append(u)
            hists.append(seq[:c])
            targets.append(seq[c])
    return SplitView("train", np.array(users, dtype=np.int64), tuple(hists), np.array(targets, dtype=np.int64))


def pad_histories(histories: Sequence[np.ndarray], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Left-pad to the longest (truncated) history; truncation keeps the most recent items."""
    lengths = np.array([min(len(h), max_len) for h in histories], dtype=np.int64)
    width = max(int(lengths.max()) if len(lengths) else 1, 1)
    items = np.zeros((len(histories), width), dtype=np.int64)
    for row, (h, n) in enumerate(zip(histories, lengths)):
        if n:
            items[row, width - n:] = h[len(h) - n:]
    return items, lengths


def make_batches(view: SplitView, batch_size: int, max_len: int = 50, seed: int | None = None,
                 epoch: int = 0) -> Iterator[Batch]:
    """Yield padded batches; ``seed=None`` keeps view order, otherwise shuffles deterministically."""
    order = np.arange(len(view))
    if seed is not None:
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0x5EED]))
        order = rng.permutation(len(view))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        items, lengths = pad_histories([view.histories[i] for i in idx], max_len)
        yield Batch(items, lengths, view.targets[idx], view.users[idx])


# --------------------------------------------------------------------------
# synthetic hierarchical data


@dataclass
class SyntheticTaxonomy:
    """Category tree whose leaves partition the item set.

    Each user follows a latent leaf; between consecutive interactions the leaf
    is re-drawn with probability ``shift_prob``. The re-draw is uniform over
    siblings under the same parent (``"sibling"``) or over all leaves
    (``"cross"``), so it can land on the current leaf again.
    """

    branching: tuple[int, ...] = (4, 4, 4)
    items_per_leaf: int = 10
    shift_prob: float = 0.2
    shift_scope: str = "cross"
    item_skew: float = 1.0
    # optional mixture of (fraction of users, shift_prob); overrides shift_prob
    shift_mixture: tuple[tuple[float, float], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.branching or any(b < 1 for b in self.branching):
            raise ValueError("branching factors must be positive")
        if self.items_per_leaf < 1:
            raise ValueError("items_per_leaf must be positive")
        if self.shift_scope not in ("sibling", "cross"):
            raise ValueError(f"unknown shift scope {self.shift_scope!r}")
        for _, p in self.shift_mixture or ((1.0, self.shift_prob),):
            if not 0.0 <= p <= 1.0:
                raise ValueError("shift probability outside [0, 1]")

    @property
    def n_leaves(self) -> int:
        return int(np.prod(self.branching))

    @property
    def n_items(self) -> int:
        return self.n_leaves * self.items_per_leaf

    @property
    def n_categories(self) -> int:
        return self.branching[0]

    def leaf_of(self, item: np.ndarray) -> np.ndarray:
        return (np.asarray(item) - 1) // self.items_per_leaf

    def category_of_leaf(self, leaf: np.ndarray) -> np.ndarray:
        return np.asarray(leaf) // (self.n_leaves // self.branching[0])

    def parent_of_leaf(self, leaf: np.ndarray) -> np.ndarray:
        return np.asarray(leaf) // self.branching[-1]


def generate_synthetic(tax: SyntheticTaxonomy, users: int, len_range: tuple[int, int] = (8, 40),
                       seed: int = 0) -> InteractionDataset:
    lo, hi = len_range
    if lo < MIN_INTERACTIONS or hi < lo:
        raise ValueError(f"len_range must satisfy {MIN_INTERACTIONS} <= lo <= hi")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    n_leaves, per_leaf = tax.n_leaves, tax.items_per_leaf
    sib = tax.branching[-1]
    popularity = 1.0 / np.arange(1, per_leaf + 1) ** tax.item_skew
    popularity /= popularity.sum()

    mixture = tax.shift_mixture or ((1.0, tax.shift_prob),)
    fractions = np.array([f for f, _ in mixture], dtype=np.float64)
    counts = np.floor(fractions / fractions.sum() * users).astype(int)
    counts[-1] = users - counts[:-1].sum()
    shift = np.concatenate([np.full(c, p) for c, (_, p) in zip(counts, mixture)])

    sequences = []
    for u in range(users):
        n = int(rng.integers(lo, hi + 1))
        leaf = int(rng.integers(n_leaves))
        moves = rng.random(n) < shift[u]
        redraws = rng.integers(n_leaves if tax.shift_scope == "cross" else sib, size=n)
        offsets = rng.choice(per_leaf, size=n, p=popularity)
        leaves = np.empty(n, dtype=np.int64)
        for pos in range(n):
            if pos and moves[pos]:
                if tax.shift_scope == "cross":
                    leaf = int(redraws[pos])
                else:
                    leaf = (leaf // sib) * sib + int(redraws[pos])
            leaves[pos] = leaf
        sequences.append(1 + leaves * per_leaf + offsets)

    item_ids = [str(i) for i in range(1, tax.n_items + 1)]
    leaf_of = np.concatenate([[-1], tax.leaf_of(np.arange(1, tax.n_items + 1))])
    cat_of = np.concatenate([[-1], tax.category_of_leaf(leaf_of[1:])])
    return InteractionDataset(
        sequences=sequences,
        user_ids=[f"u{u}" for u in range(users)],
        item_ids=item_ids,
        timestamps=[np.arange(len(s), dtype=np.float64) for s in sequences],
        item_leaf=leaf_of,
        item_category=cat_of,
        user_shift_prob=shift,
    )


def write_tsv(ds: InteractionDataset, path: str | Path) -> None:
    """Write interactions as TSV plus a ``.labels`` sidecar when labels are known."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for uid, seq, ts in zip(ds.user_ids, ds.sequences, ds.timestamps or [None] * ds.n_users):
            stamps = ts if ts is not None else np.arange(len(seq))
            for item, stamp in zip(seq, stamps):
                fh.write(f"{uid}\t{ds.item_ids[item - 1]}\t{int(stamp)}\n")
    if ds.item_leaf is not None:
        with open(str(path) + ".labels", "w", encoding="utf-8", newline="") as fh:
            for dense in range(1, ds.n_items + 1):
                fh.write(f"{ds.item_ids[dense - 1]}\t{ds.item_leaf[dense]}\t{ds.item_category[dense]}\n")
    if ds.user_shift_prob is not None:
        with open(str(path) + ".users", "w", encoding="utf-8", newline="") as fh:
            for uid, p in zip(ds.user_ids, ds.user_shift_prob):
                fh.write(f"{uid}\t{float(p)!r}\n")


def read_user_shift(path: str | Path, ds: InteractionDataset) -> None:
    side = Path(str(path) + ".users")
    if not side.exists():
        return
    probs = {}
    with open(side, encoding="utf-8") as fh:
        for line in fh:
            uid, p = line.rstrip("\n").split("\t")
            probs[uid] = float(p)
    ds.user_shift_prob = np.array([probs.get(u, np.nan) for u in ds.user_ids])
