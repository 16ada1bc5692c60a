"""Bipartite rating graphs: ingestion, pruning, splitting, synthesis.

A graph holds users, items, integer ratings in [1, L], and a per-user
label. Graphs are immutable; every transformation returns a new one.
Edge CSV format: header ``user_id,item_id,rating,label`` where the label
column repeats the user's label on each of their rows.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError

LABEL_NORMAL = "normal"
LABEL_FAKE = "fake"
LABEL_INJECTED = "injected"

_LABELS = (LABEL_NORMAL, LABEL_FAKE, LABEL_INJECTED)
_CSV_HEADER = ["user_id", "item_id", "rating", "label"]


def _round_half_up(x):
    return int(np.floor(x + 0.5))


@dataclass(frozen=True, eq=False)
class RatingGraph:
    """Immutable bipartite rating graph.

    user_ids / item_ids fix the index spaces; edges are parallel arrays
    of user index, item index, and integer rating. labels[i] is the
    label of user i.
    """

    user_ids: tuple
    item_ids: tuple
    labels: tuple
    edge_users: np.ndarray
    edge_items: np.ndarray
    edge_ratings: np.ndarray
    L: int = 5
    _features: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "edge_users", np.asarray(self.edge_users, dtype=np.int64))
        object.__setattr__(self, "edge_items", np.asarray(self.edge_items, dtype=np.int64))
        object.__setattr__(self, "edge_ratings", np.asarray(self.edge_ratings, dtype=np.int64))
        n, m = len(self.user_ids), len(self.item_ids)
        if len(self.labels) != n:
            raise ValidationError(f"{len(self.labels)} labels for {n} users")
        for lab in self.labels:
            if lab not in _LABELS:
                raise ValidationError(f"unknown user label {lab!r}")
        if not (self.edge_users.shape == self.edge_items.shape == self.edge_ratings.shape):
            raise ValidationError("edge arrays have mismatched lengths")
        if self.n_edges:
            if self.edge_users.min() < 0 or (n and self.edge_users.max() >= n) or (n == 0):
                raise ValidationError("edge references a user index out of range")
            if self.edge_items.min() < 0 or (m and self.edge_items.max() >= m) or (m == 0):
                raise ValidationError("edge references an item index out of range")
            if self.edge_ratings.min() < 1 or self.edge_ratings.max() > self.L:
                raise ValidationError(
                    f"rating outside [1, {self.L}]: "
                    f"saw [{self.edge_ratings.min()}, {self.edge_ratings.max()}]"
                )
            key = self.edge_users * m + self.edge_items
            if np.unique(key).size != key.size:
                raise ValidationError("duplicate (user, item) edge")
        if self.L < 2:
            raise ValidationError(f"L must be at least 2, got {self.L}")

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_items(self):
        return len(self.item_ids)

    @property
    def n_edges(self):
        return int(self.edge_users.shape[0])

    @property
    def features(self):
        """Per-user behavioral features, computed once on first access."""
        if self._features is None:
            object.__setattr__(self, "_features", user_features(self))
        return self._features

    def user_index(self, user_id):
        try:
            return self.user_ids.index(user_id)
        except ValueError:
            raise ValidationError(f"unknown user id {user_id!r}")

    def item_index(self, item_id):
        try:
            return self.item_ids.index(item_id)
        except ValueError:
            raise ValidationError(f"unknown item id {item_id!r}")

    def user_degrees(self):
        return np.bincount(self.edge_users, minlength=self.n_users)

    def item_degrees(self):
        return np.bincount(self.edge_items, minlength=self.n_items)

    def label_array(self):
        return np.array(self.labels, dtype=object)

    def replace_edges(self, edge_users, edge_items, edge_ratings):
        return RatingGraph(
            self.user_ids, self.item_ids, self.labels,
            edge_users, edge_items, edge_ratings, self.L,
        )

    def extend_with_users(self, new_user_ids, new_label, edges):
        """Append users (all sharing new_label) plus their edges.

        edges is a list of (local_user_index, item_index, rating) where
        local_user_index counts within new_user_ids.
        """
        for uid in new_user_ids:
            if uid in self.user_ids:
                raise ValidationError(f"user id {uid!r} already present")
        base = self.n_users
        eu = list(self.edge_users) + [base + e[0] for e in edges]
        ei = list(self.edge_items) + [e[1] for e in edges]
        er = list(self.edge_ratings) + [e[2] for e in edges]
        return RatingGraph(
            self.user_ids + tuple(new_user_ids),
            self.item_ids,
            self.labels + tuple([new_label] * len(new_user_ids)),
            np.array(eu, dtype=np.int64),
            np.array(ei, dtype=np.int64),
            np.array(er, dtype=np.int64),
            self.L,
        )


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    """Train graph plus held-out (user_idx, item_idx, rating) triples.

    Indices refer to the train graph's user/item tables, which are the
    same tables as the input graph's (no re-indexing on split).
    """

    train: RatingGraph
    test_users: np.ndarray
    test_items: np.ndarray
    test_ratings: np.ndarray

    def test_triples(self):
        g = self.train
        return [
            (g.user_ids[u], g.item_ids[i], int(r))
            for u, i, r in zip(self.test_users, self.test_items, self.test_ratings)
        ]


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int
    n_items: int
    n_fake: int
    density: float
    rating_bias: tuple = (2.0, 4.5)
    L: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_users <= 0 or self.n_items <= 0 or self.n_fake < 0:
            raise ValidationError("counts must be positive")
        if self.n_fake >= self.n_users:
            raise ValidationError("n_fake must leave at least one normal user")
        if self.density < 2:
            raise ValidationError("density below 2 would not survive pruning")
        lo, hi = self.rating_bias
        if not (1 <= lo <= hi <= self.L):
            raise ValidationError(f"rating_bias range {self.rating_bias} outside [1, {self.L}]")


# ---------------------------------------------------------------------------
# ingestion


def load_csv(path, L=5):
    """Parse an edge CSV into a graph.

    Duplicate (user, item) rows keep the last occurrence and raise a
    single warning with the duplicate count. A user's label must agree
    across all of their rows.
    """
    users, items = {}, {}
    labels = []
    seen = {}  # (u_idx, i_idx) -> position in edge list
    eu, ei, er = [], [], []
    dup = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != _CSV_HEADER:
            raise ParseError(f"expected header {','.join(_CSV_HEADER)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", line=lineno)
            uid, iid, rating_s, label = (c.strip() for c in row)
            try:
                rating = int(rating_s)
            except ValueError:
                raise ParseError(f"rating {rating_s!r} is not an integer", line=lineno)
            if not 1 <= rating <= L:
                raise ValidationError(f"line {lineno}: rating {rating} outside [1, {L}]")
            if label not in (LABEL_NORMAL, LABEL_FAKE):
                raise ParseError(f"label {label!r} must be normal or fake", line=lineno)
            if uid not in users:
                users[uid] = len(users)
                labels.append(label)
            elif labels[users[uid]] != label:
                raise ValidationError(
                    f"line {lineno}: user {uid!r} labeled both "
                    f"{labels[users[uid]]!r} and {label!r}"
                )
            if iid not in items:
                items[iid] = len(items)
            u, i = users[uid], items[iid]
            if (u, i) in seen:
                dup += 1
                er[seen[(u, i)]] = rating
            else:
                seen[(u, i)] = len(eu)
                eu.append(u)
                ei.append(i)
                er.append(rating)
    if dup:
        warnings.warn(f"{dup} duplicate (user, item) rows; kept the last occurrence of each")
    return RatingGraph(
        tuple(users), tuple(items), tuple(labels),
        np.array(eu, dtype=np.int64), np.array(ei, dtype=np.int64),
        np.array(er, dtype=np.int64), L,
    )


def save_csv(graph, path):
    """Write the edge CSV. Injected users have no place in this format."""
    for lab in graph.labels:
        if lab == LABEL_INJECTED:
            raise ValidationError("cannot serialize injected users to the edge CSV")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for u, i, r in zip(graph.edge_users, graph.edge_items, graph.edge_ratings):
            writer.writerow([graph.user_ids[u], graph.item_ids[i], int(r), graph.labels[u]])


# ---------------------------------------------------------------------------
# preprocessing


def prune_min_degree(graph, min_records=2):
    """Peel users and items with fewer than min_records edges to a fixed point.

    Removal cascades: dropping a node drops its edges, which can push
    neighbors below the threshold. The fixed point of this monotone
    peeling does not depend on removal order.
    """
    if min_records < 1:
        raise ValidationError(f"min_records must be at least 1, got {min_records}")
    keep_u = np.ones(graph.n_users, dtype=bool)
    keep_i = np.ones(graph.n_items, dtype=bool)
    eu, ei, er = graph.edge_users, graph.edge_items, graph.edge_ratings
    while True:
        mask = keep_u[eu] & keep_i[ei] if eu.size else np.zeros(0, dtype=bool)
        du = np.bincount(eu[mask], minlength=graph.n_users)
        di = np.bincount(ei[mask], minlength=graph.n_items)
        drop_u = keep_u & (du < min_records)
        drop_i = keep_i & (di < min_records)
        if not drop_u.any() and not drop_i.any():
            break
        keep_u &= ~drop_u
        keep_i &= ~drop_i
    new_u = np.cumsum(keep_u) - 1
    new_i = np.cumsum(keep_i) - 1
    mask = keep_u[eu] & keep_i[ei] if eu.size else np.zeros(0, dtype=bool)
    return RatingGraph(
        tuple(uid for uid, k in zip(graph.user_ids, keep_u) if k),
        tuple(iid for iid, k in zip(graph.item_ids, keep_i) if k),
        tuple(lab for lab, k in zip(graph.labels, keep_u) if k),
        new_u[eu[mask]], new_i[ei[mask]], er[mask], graph.L,
    )


def split(graph, test_frac=0.2, seed=0):
    """Hold out round(test_frac x |normal-user edges|) edges for testing.

    Sampling is global and uniform over normal users' edges; fake users'
    edges all stay in train.
    """
    if not 0 < test_frac < 1:
        raise ValidationError(f"test_frac must lie strictly in (0, 1), got {test_frac}")
    labels = graph.label_array()
    normal_edge = labels[graph.edge_users] == LABEL_NORMAL
    pool = np.nonzero(normal_edge)[0]
    if pool.size == 0:
        raise ValidationError("no edges from normal users to split")
    n_test = _round_half_up(test_frac * pool.size)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(pool, size=n_test, replace=False)
    test_mask = np.zeros(graph.n_edges, dtype=bool)
    test_mask[chosen] = True
    train = graph.replace_edges(
        graph.edge_users[~test_mask], graph.edge_items[~test_mask],
        graph.edge_ratings[~test_mask],
    )
    order = np.sort(chosen)
    return DatasetSplit(
        train,
        graph.edge_users[order].copy(),
        graph.edge_items[order].copy(),
        graph.edge_ratings[order].copy(),
    )


# ---------------------------------------------------------------------------
# synthesis


def synthesize(spec):
    """Generate a graph with planted low-rank rating structure.

    Normal users rate clamp(round(b_i + taste_u . factor_i + noise), 1, L)
    over items drawn with a mild popularity skew; inherent fake users pick
    items and ratings near-uniformly at random. Every user gets at least
    2 edges so pruning keeps most of the graph.
    """
    rng = np.random.default_rng(spec.seed)
    n, m, L = spec.n_users, spec.n_items, spec.L
    lo, hi = spec.rating_bias
    bias = rng.uniform(lo, hi, size=m)
    taste = rng.normal(0.0, 0.5, size=(n, 2))
    factor = rng.normal(0.0, 0.5, size=(m, 2))
    pop = rng.normal(0.0, 0.7, size=m)
    pop = np.exp(pop - pop.max())
    pop /= pop.sum()

    fake = np.zeros(n, dtype=bool)
    if spec.n_fake:
        fake[rng.choice(n, size=spec.n_fake, replace=False)] = True

    eu, ei, er = [], [], []
    for u in range(n):
        k = min(m, max(2, int(rng.poisson(spec.density))))
        if fake[u]:
            chosen = rng.choice(m, size=k, replace=False)
            ratings = rng.integers(1, L + 1, size=k)
        else:
            chosen = rng.choice(m, size=k, replace=False, p=pop)
            raw = bias[chosen] + factor[chosen] @ taste[u] + rng.normal(0.0, 0.25, size=k)
            ratings = np.clip(np.rint(raw), 1, L).astype(np.int64)
        eu.extend([u] * k)
        ei.extend(chosen.tolist())
        er.extend(ratings.tolist())

    labels = tuple(LABEL_FAKE if fake[u] else LABEL_NORMAL for u in range(n))
    return RatingGraph(
        tuple(f"u{u:04d}" for u in range(n)),
        tuple(f"i{i:04d}" for i in range(m)),
        labels,
        np.array(eu, dtype=np.int64), np.array(ei, dtype=np.int64),
        np.array(er, dtype=np.int64), L,
    )


# ---------------------------------------------------------------------------
# features and candidates


def user_features(graph):
    """Five behavior statistics per user, min-max scaled to [0, 1].

    Raw vector: [degree, mean rating, rating variance, fraction of
    ratings at L, fraction at 1]. Degenerate scaling (constant column)
    maps to 0. Users with no edges get all-zero raw statistics.
    """
    if graph.n_users == 0:
        raise ValidationError("user_features on a graph with no users")
    n = graph.n_users
    deg = np.bincount(graph.edge_users, minlength=n).astype(np.float64)
    s1 = np.bincount(graph.edge_users, weights=graph.edge_ratings, minlength=n)
    s2 = np.bincount(graph.edge_users, weights=graph.edge_ratings.astype(np.float64) ** 2, minlength=n)
    top = np.bincount(graph.edge_users, weights=(graph.edge_ratings == graph.L).astype(np.float64), minlength=n)
    bot = np.bincount(graph.edge_users, weights=(graph.edge_ratings == 1).astype(np.float64), minlength=n)
    safe = np.maximum(deg, 1.0)
    mean = s1 / safe
    var = np.maximum(s2 / safe - mean**2, 0.0)
    raw = np.stack([deg, mean, var, top / safe, bot / safe], axis=1)
    lo = raw.min(axis=0)
    span = raw.max(axis=0) - lo
    out = np.zeros_like(raw)
    nz = span > 0
    out[:, nz] = (raw[:, nz] - lo[nz]) / span[nz]
    return out


def candidate_items(graph, targets, hops=2):
    """Items within `hops` bipartite hops of any target item.

    Each edge traversal is one hop, so target -> rater -> co-rated item
    is 2 hops. hops=0 returns exactly the target set. Targets are item
    ids and are always included.
    """
    if hops < 0:
        raise ValidationError(f"hops must be non-negative, got {hops}")
    target_idx = {graph.item_index(t) for t in targets}
    items_by_user = [[] for _ in range(graph.n_users)]
    users_by_item = [[] for _ in range(graph.n_items)]
    for u, i in zip(graph.edge_users, graph.edge_items):
        items_by_user[u].append(i)
        users_by_item[i].append(u)
    found_items = set(target_idx)
    frontier_items = set(target_idx)
    seen_users = set()
    remaining = hops
    while remaining >= 2 and frontier_items:
        next_users = set()
        for i in frontier_items:
            next_users.update(users_by_item[i])
        next_users -= seen_users
        seen_users |= next_users
        next_items = set()
        for u in next_users:
            next_items.update(items_by_user[u])
        frontier_items = next_items - found_items
        found_items |= next_items
        remaining -= 2
    return {graph.item_ids[i] for i in found_items}
