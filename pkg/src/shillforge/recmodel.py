"""Rating-aware graph-convolutional recommender.

One bipartite aggregation round with per-rating-level message transforms,
then an MLP rating head bounded to [1, L]. The same forward pass accepts
either a discrete graph or a relaxed one, where injected users carry a
continuous distribution over rating levels for every candidate item;
that distribution is the differentiable handle attack code optimizes.

Items aggregate messages from their raters and users aggregate messages
from their rated items, sharing the level transforms across directions.
Injected relaxed users therefore reach real users' predictions through
the item representations (a 2-hop path), which is what makes candidate
shrinking around the targets meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractViolation, TrainingError, ValidationError
from .graphdata import RatingGraph

CHECKPOINT_VERSION = "shillforge-ckpt-v1"


@dataclass(frozen=True)
class ModelConfig:
    """Victim model sizes shared by attack and experiment drivers."""

    d: int = 16
    d_h: int = 32
    det_hidden: int = 16
    fraud_weight: float = 1.0

    def __post_init__(self):
        if min(self.d, self.d_h, self.det_hidden) <= 0:
            raise ValidationError("model dimensions must be positive")
        if self.fraud_weight < 0:
            raise ValidationError("fraud_weight must be non-negative")


@dataclass
class RecModelParams:
    """Recommender parameters; every field except fraud_weight is a Tensor."""

    item_emb: Tensor          # (n_items, d)
    user_proj: Tensor         # (feature_dim, d)
    level_transforms: list    # L tensors of (d, d)
    self_transform: Tensor    # (d, d)
    mlp_w1: Tensor            # (2d, d_h)
    mlp_b1: Tensor            # (d_h,)
    mlp_w2: Tensor            # (d_h, 1)
    mlp_b2: Tensor            # (1,)
    fraud_weight: float = 1.0

    def __post_init__(self):
        for t in self.tensors():
            if not np.all(np.isfinite(t.values)):
                raise ValidationError("non-finite recommender parameter")
        d = self.item_emb.shape[1]
        for w in self.level_transforms:
            if w.shape != (d, d):
                raise ValidationError(f"level transform shape {w.shape}, expected {(d, d)}")

    @property
    def d(self):
        return self.item_emb.shape[1]

    @property
    def L(self):
        return len(self.level_transforms)

    def tensors(self):
        return [self.item_emb, self.user_proj, *self.level_transforms,
                self.self_transform, self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]

    def named_arrays(self):
        out = {"item_emb": self.item_emb.values, "user_proj": self.user_proj.values,
               "self_transform": self.self_transform.values,
               "mlp_w1": self.mlp_w1.values, "mlp_b1": self.mlp_b1.values,
               "mlp_w2": self.mlp_w2.values, "mlp_b2": self.mlp_b2.values}
        for l, w in enumerate(self.level_transforms):
            out[f"level_{l + 1}"] = w.values
        return out

    def clone(self):
        return RecModelParams(
            Tensor(self.item_emb.values.copy(), requires_grad=True),
            Tensor(self.user_proj.values.copy(), requires_grad=True),
            [Tensor(w.values.copy(), requires_grad=True) for w in self.level_transforms],
            Tensor(self.self_transform.values.copy(), requires_grad=True),
            Tensor(self.mlp_w1.values.copy(), requires_grad=True),
            Tensor(self.mlp_b1.values.copy(), requires_grad=True),
            Tensor(self.mlp_w2.values.copy(), requires_grad=True),
            Tensor(self.mlp_b2.values.copy(), requires_grad=True),
            self.fraud_weight,
        )

    def snapshot(self):
        """Detached numpy copies, for checkpoint trajectories."""
        return {k: v.copy() for k, v in self.named_arrays().items()}

    def load_snapshot(self, arrays):
        for name, t in zip(
            ["item_emb", "user_proj"]
            + [f"level_{l + 1}" for l in range(self.L)]
            + ["self_transform", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"],
            self.tensors(),
        ):
            t.values = arrays[name].copy()


def _glorot(rng, shape):
    if len(shape) == 1:
        fan_in, fan_out = shape[0], 1
    else:
        fan_in, fan_out = shape
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)


def init_params(n_items, feature_dim, d=16, d_h=32, L=5, seed=0, fraud_weight=1.0):
    """Glorot-uniform init, one draw sequence per seed."""
    if min(n_items, feature_dim, d, d_h, L) <= 0:
        raise ValidationError("all dimensions must be positive")
    rng = np.random.default_rng(seed)
    return RecModelParams(
        item_emb=_glorot(rng, (n_items, d)),
        user_proj=_glorot(rng, (feature_dim, d)),
        level_transforms=[_glorot(rng, (d, d)) for _ in range(L)],
        self_transform=_glorot(rng, (d, d)),
        mlp_w1=_glorot(rng, (2 * d, d_h)),
        mlp_b1=_glorot(rng, (d_h,)),
        mlp_w2=_glorot(rng, (d_h, 1)),
        mlp_b2=_glorot(rng, (1,)),
        fraud_weight=fraud_weight,
    )


@dataclass(frozen=True, eq=False)
class RelaxedGraph:
    """A discrete base graph plus injected users described by a rating tensor.

    tensor has shape (n_injected, n_candidates, L); row (u, v) is a
    distribution over the L rating levels for candidate item v. Injected
    user features are recomputed from the tensor on every encode, scaled
    with the base population's feature bounds.
    """

    base: RatingGraph
    injected_ids: tuple
    tensor: Tensor                 # (p, k, L)
    candidates: np.ndarray         # (k,) item indices into base

    def __post_init__(self):
        object.__setattr__(self, "candidates", np.asarray(self.candidates, dtype=np.int64))
        p, k, L = self.tensor.shape
        if p != len(self.injected_ids):
            raise ValidationError(f"{p} tensor rows for {len(self.injected_ids)} injected users")
        if L != self.base.L:
            raise ValidationError(f"tensor has {L} levels, graph has {self.base.L}")
        if self.candidates.size != k:
            raise ValidationError("candidate count does not match tensor")
        if self.candidates.size and (
            self.candidates.min() < 0 or self.candidates.max() >= self.base.n_items
        ):
            raise ValidationError("candidate index outside the base item table")
        v = self.tensor.values
        if v.min() < -1e-12 or v.max() > 1 + 1e-12:
            raise ValidationError("tensor entries must lie in [0, 1]")
        if np.abs(v.sum(axis=2) - 1.0).max() > 1e-6:
            raise ValidationError("tensor rows must sum to 1")

    @property
    def n_injected(self):
        return len(self.injected_ids)


def _raw_user_stats(edge_users, edge_ratings, n_users, L):
    deg = np.bincount(edge_users, minlength=n_users).astype(np.float64)
    s1 = np.bincount(edge_users, weights=edge_ratings, minlength=n_users)
    s2 = np.bincount(edge_users, weights=np.asarray(edge_ratings, dtype=np.float64) ** 2,
                     minlength=n_users)
    top = np.bincount(edge_users, weights=(edge_ratings == L).astype(np.float64),
                      minlength=n_users)
    bot = np.bincount(edge_users, weights=(edge_ratings == 1).astype(np.float64),
                      minlength=n_users)
    safe = np.maximum(deg, 1.0)
    mean = s1 / safe
    var = np.maximum(s2 / safe - mean**2, 0.0)
    return np.stack([deg, mean, var, top / safe, bot / safe], axis=1)


def feature_scaler(graph):
    """(lo, span) of the raw per-user stats; the min-max scaling bounds."""
    raw = _raw_user_stats(graph.edge_users, graph.edge_ratings, graph.n_users, graph.L)
    lo = raw.min(axis=0)
    span = raw.max(axis=0) - lo
    return lo, span


def _scale_stats(raw, lo, span):
    out = np.zeros_like(raw)
    nz = span > 0
    out[:, nz] = (raw[:, nz] - lo[nz]) / span[nz]
    return np.clip(out, 0.0, 1.0)


def relaxed_injected_features(relaxed, lo=None, span=None):
    """Expected behavior statistics of injected users under the tensor.

    Every candidate counts as one (soft) rating, so the degree statistic
    is the candidate count; level fractions are tensor means. Scaled with
    the base graph's bounds so injected rows are comparable to real ones.
    """
    if lo is None or span is None:
        lo, span = feature_scaler(relaxed.base)
    v = relaxed.tensor.values
    p, k, L = v.shape
    levels = np.arange(1, L + 1, dtype=np.float64)
    expect = v @ levels                       # (p, k) expected rating per pair
    raw = np.stack([
        np.full(p, float(k)),
        expect.mean(axis=1),
        expect.var(axis=1),
        v[:, :, L - 1].mean(axis=1),
        v[:, :, 0].mean(axis=1),
    ], axis=1)
    return _scale_stats(raw, lo, span)


def _level_adjacency(graph):
    mats = np.zeros((graph.L, graph.n_users, graph.n_items))
    mats[graph.edge_ratings - 1, graph.edge_users, graph.edge_items] = 1.0
    return mats


def _inv(counts):
    return np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)


def embed(graph, params, features=None, injected_features=None):
    """Forward pass; returns (user embeddings Z, item embeddings H).

    graph may be a RatingGraph or a RelaxedGraph. For a RelaxedGraph the
    returned Z stacks base users first, injected users after. features
    overrides the per-user input features of base users. Injected users'
    features come from injected_features when given, else are recomputed
    from the current tensor values; either way they are constants to the
    tape (the attack refreshes them once per epoch, not per step).
    """
    relaxed = isinstance(graph, RelaxedGraph)
    base = graph.base if relaxed else graph
    if base.n_users == 0 or base.n_items == 0:
        raise ValidationError("embed on an empty graph")
    if params.item_emb.shape[0] != base.n_items:
        raise ContractViolation(
            f"params built for {params.item_emb.shape[0]} items, graph has {base.n_items}")
    X = base.features if features is None else np.asarray(features, dtype=np.float64)
    L, n, m = base.L, base.n_users, base.n_items

    A = _level_adjacency(base)
    deg_u = A.sum(axis=(0, 2))               # (n,)
    deg_v = A.sum(axis=(0, 1))               # (m,)

    F = ag.matmul(Tensor(X), params.user_proj)            # (n, d)

    if relaxed:
        if injected_features is None:
            X_inj = relaxed_injected_features(graph)
        else:
            X_inj = np.asarray(injected_features, dtype=np.float64)
        F_inj = ag.matmul(Tensor(X_inj), params.user_proj)  # (p, d)
        p, k = graph.n_injected, graph.candidates.size
        deg_v = deg_v.copy()
        deg_v[graph.candidates] += p

    # --- item side: aggregate rater messages into the embedding table
    msg_v = None
    for l in range(L):
        part = ag.matmul(ag.matmul(Tensor(A[l].T), F), params.level_transforms[l])
        msg_v = part if msg_v is None else msg_v + part
    if relaxed and k:
        rel_v = None
        for l in range(L):
            sl = ag.transpose2d(ag.slice_last(graph.tensor, l))        # (k, p)
            part = ag.matmul(ag.matmul(sl, F_inj), params.level_transforms[l])
            rel_v = part if rel_v is None else rel_v + part
        msg_v = msg_v + ag.scatter_rows(rel_v, graph.candidates, m)
    self_v = ag.matmul(Tensor(A.sum(axis=0).T), F)
    if relaxed and k:
        # every injected user carries total weight 1 toward each candidate
        tot_inj = ag.matmul(Tensor(np.ones((k, p))), F_inj)
        self_v = self_v + ag.scatter_rows(tot_inj, graph.candidates, m)
    self_v = ag.matmul(self_v, params.self_transform)
    inv_v = Tensor(_inv(deg_v)[:, None])
    H = ag.relu(params.item_emb + inv_v * msg_v + inv_v * self_v)      # (m, d)

    # --- user side: aggregate item messages
    msg_u = None
    for l in range(L):
        part = ag.matmul(ag.matmul(Tensor(A[l]), H), params.level_transforms[l])
        msg_u = part if msg_u is None else msg_u + part
    self_u = ag.matmul(ag.matmul(Tensor(A.sum(axis=0)), H), params.self_transform)
    inv_u = Tensor(_inv(deg_u)[:, None])
    Z = ag.relu(F + inv_u * msg_u + inv_u * self_u)                    # (n, d)

    if not relaxed:
        return Z, H

    H_cand = ag.gather(H, graph.candidates, axis=0)                    # (k, d)
    msg_inj = None
    for l in range(L):
        part = ag.matmul(ag.matmul(ag.slice_last(graph.tensor, l), H_cand),
                         params.level_transforms[l])
        msg_inj = part if msg_inj is None else msg_inj + part
    self_inj = ag.matmul(ag.matmul(Tensor(np.ones((p, k))), H_cand), params.self_transform)
    inv_k = 1.0 / k if k else 0.0
    Z_inj = ag.relu(F_inj + ag.scale(msg_inj + self_inj, inv_k))
    return ag.concat([Z, Z_inj], axis=0), H


def _mlp_rating(pairs, params, L):
    h = ag.relu(ag.matmul(pairs, params.mlp_w1) + params.mlp_b1)
    out = ag.matmul(h, params.mlp_w2) + params.mlp_b2                  # (*, 1)
    return ag.scale(ag.sigmoid(out), float(L - 1)) + Tensor(np.ones(1))


def predict_edges(Z, H, params, edge_users, edge_items, L):
    """Predicted rating per (user, item) pair, shape (E,), values in [1, L]."""
    zu = ag.gather(Z, np.asarray(edge_users, dtype=np.int64), axis=0)
    zv = ag.gather(H, np.asarray(edge_items, dtype=np.int64), axis=0)
    r = _mlp_rating(ag.concat([zu, zv], axis=1), params, L)
    return ag.reshape(r, (len(edge_users),))


def predict_rating(z_u, z_v, params, L=5):
    """Single-pair rating from two embedding rows."""
    zu = z_u if isinstance(z_u, Tensor) else Tensor(z_u)
    zv = z_v if isinstance(z_v, Tensor) else Tensor(z_v)
    pair = ag.concat([ag.reshape(zu, (1, zu.shape[-1])),
                      ag.reshape(zv, (1, zv.shape[-1]))], axis=1)
    return ag.reshape(_mlp_rating(pair, params, L), (1,))


def predict_all(Z, H, params, L):
    """All (user, item) predicted ratings as an (n, m) tensor."""
    n, m = Z.shape[0], H.shape[0]
    iu = np.repeat(np.arange(n), m)
    iv = np.tile(np.arange(m), n)
    r = predict_edges(Z, H, params, iu, iv, L)
    return ag.reshape(r, (n, m))


def joint_loss(graph, params, detector_weights, fraud_loss=None, features=None,
               injected_features=None, precomputed=None):
    """Detector-weighted rating loss plus the weighted fraudster term.

    detector_weights is a per-user Tensor of P[user is normal], indexed
    like the embedding output (base users then injected users for a
    RelaxedGraph). Relaxed pairs contribute their expected squared error
    under the level distribution, weighted like one edge each.
    """
    w_vals = detector_weights.values
    if w_vals.min() < -1e-9 or w_vals.max() > 1 + 1e-9:
        raise ContractViolation(
            f"detector weights outside [0, 1]: [{w_vals.min():g}, {w_vals.max():g}]")
    relaxed = isinstance(graph, RelaxedGraph)
    base = graph.base if relaxed else graph
    if precomputed is None:
        Z, H = embed(graph, params, features=features, injected_features=injected_features)
    else:
        Z, H = precomputed
    L = base.L

    total = None
    n_terms = base.n_edges
    if base.n_edges:
        r_pred = predict_edges(Z, H, params, base.edge_users, base.edge_items, L)
        err = r_pred - Tensor(base.edge_ratings.astype(np.float64))
        w_edge = ag.gather(detector_weights, base.edge_users, axis=0)
        total = ag.reduce_sum(w_edge * err * err)

    if relaxed and graph.n_injected and graph.candidates.size:
        p, k = graph.n_injected, graph.candidates.size
        iu = np.repeat(np.arange(p) + base.n_users, k)
        iv = np.tile(graph.candidates, p)
        r_pred = predict_edges(Z, H, params, iu, iv, L)       # (p*k,)
        r_mat = ag.reshape(r_pred, (p, k))
        sq = None
        for l in range(L):
            diff = r_mat - Tensor(np.full((p, k), float(l + 1)))
            part = ag.slice_last(graph.tensor, l) * diff * diff
            sq = part if sq is None else sq + part            # expected sq error
        w_inj = ag.reshape(
            ag.gather(detector_weights, np.arange(p) + base.n_users, axis=0), (p, 1))
        rel_term = ag.reduce_sum(w_inj * sq)
        total = rel_term if total is None else total + rel_term
        n_terms += p * k

    if n_terms == 0:
        raise ValidationError("joint_loss on a graph with no edges")
    loss = ag.scale(total, 1.0 / n_terms)
    if fraud_loss is not None:
        loss = loss + ag.scale(fraud_loss, params.fraud_weight)
    return loss


def train_step(params, graph, lr, detector=None, features=None, injected_features=None):
    """One full-batch gradient-descent step on the joint loss.

    detector, when given, is a callable (Z, H) -> (weights, fraud_loss)
    evaluated inside the step's tape; its parameter tensors are updated
    too if it exposes .tensors(). Returns the loss value.
    """
    if lr < 0:
        raise ValidationError(f"learning rate must be non-negative, got {lr}")
    with ag.Tape() as tape:
        Z, H = embed(graph, params, features=features, injected_features=injected_features)
        if detector is None:
            n = Z.shape[0]
            weights, fraud = Tensor(np.ones(n)), None
        else:
            weights, fraud = detector(Z, H)
        loss = joint_loss(graph, params, weights, fraud_loss=fraud,
                          features=features, precomputed=(Z, H))
    if not np.isfinite(loss.values).all():
        raise TrainingError(f"non-finite training loss: {loss.values}")
    grads = ag.backward(tape, loss)
    targets = list(params.tensors())
    if detector is not None and hasattr(detector, "tensors"):
        targets += list(detector.tensors())
    for t in targets:
        g = grads.get(t)
        if g is not None:
            t.values = t.values - lr * g
    return float(loss.values)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params, path):
    arrays = params.named_arrays()
    with open(path, "wb") as fh:  # keep the exact filename, no .npz suffixing
        np.savez(fh, __format__=np.array(CHECKPOINT_VERSION),
                 __fraud_weight__=np.array(params.fraud_weight), **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        if "__format__" not in data or str(data["__format__"]) != CHECKPOINT_VERSION:
            raise ValidationError(f"not a {CHECKPOINT_VERSION} checkpoint: {path}")
        levels = sorted((k for k in data.files if k.startswith("level_")),
                        key=lambda k: int(k.split("_")[1]))
        return RecModelParams(
            item_emb=Tensor(data["item_emb"], requires_grad=True),
            user_proj=Tensor(data["user_proj"], requires_grad=True),
            level_transforms=[Tensor(data[k], requires_grad=True) for k in levels],
            self_transform=Tensor(data["self_transform"], requires_grad=True),
            mlp_w1=Tensor(data["mlp_w1"], requires_grad=True),
            mlp_b1=Tensor(data["mlp_b1"], requires_grad=True),
            mlp_w2=Tensor(data["mlp_w2"], requires_grad=True),
            mlp_b2=Tensor(data["mlp_b2"], requires_grad=True),
            fraud_weight=float(data["__fraud_weight__"]),
        )
