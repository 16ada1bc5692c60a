"""Profile-injection attacks against the joint recommender.

MetaC relaxes each injected user's ratings into a distribution over
levels for every candidate item, alternates victim training with
meta-gradient steps on that tensor (summing first-order adversarial
gradients over the recorded parameter trajectory), projects back onto
the simplex, and finally discretizes to concrete rating profiles.

Random, Average, and Popular are the classic heuristic baselines; they
force the targets to the top rating, MetaC does not (configurable).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import detect as dt
from . import graphdata as gd
from . import recmodel as rm
from . import training as tr
from .autograd import Tensor
from .errors import AttackError, ContractViolation, ParseError, ValidationError

_PROFILE_HEADER = ["fake_user_id", "item_id", "rating"]


@dataclass
class RatingTensor:
    """Relaxed rating distributions for the injected users.

    values has shape (n_injected, n_candidates, L); candidates maps the
    second axis to item indices, item_ids to their external ids.
    """

    values: np.ndarray
    candidates: np.ndarray
    item_ids: tuple
    injected_ids: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.candidates = np.asarray(self.candidates, dtype=np.int64)
        p, k, L = self.values.shape
        if k != self.candidates.size or k != len(self.item_ids):
            raise ValidationError("candidate axis does not match the index map")
        if p != len(self.injected_ids):
            raise ValidationError("user axis does not match injected ids")

    def check_normalized(self, tol=1e-6):
        v = self.values
        if v.min() < -tol or v.max() > 1 + tol:
            raise ValidationError("tensor entries outside [0, 1]")
        if np.abs(v.sum(axis=2) - 1.0).max() > tol:
            raise ValidationError("tensor rows must sum to 1")


@dataclass(frozen=True)
class AttackConfig:
    n_injected: int | None = None      # None -> ceil(power * |U|)
    power: float = 0.01
    budget: int = 15                   # B, ratings per injected user
    targets: tuple = ()                # item ids
    k1: int = 100
    k2: int = 1
    epochs: int = 50                   # T_train
    eta1: float = 0.01
    eta2: float = 1.0
    seed: int = 0
    force_targets: bool = False        # baselines force; MetaC does not
    candidate_threshold: int = 500     # 2-hop shrinking above this many items
    candidate_hops: int = 2
    global_minmax: bool = True
    steps_per_epoch_detector: int = 0  # reserved

    def __post_init__(self):
        if self.n_injected is not None and self.n_injected < 1:
            raise ValidationError("n_injected must be at least 1")
        if self.power <= 0:
            raise ValidationError("attack power must be positive")
        if self.budget < 1:
            raise ValidationError("budget must be at least 1")
        if min(self.k1, self.k2, self.epochs + 1) < 1:
            raise ValidationError("k1, k2 must be >= 1 and epochs >= 0")

    def resolve_count(self, n_users):
        return self.n_injected if self.n_injected is not None else max(
            1, math.ceil(self.power * n_users))


@dataclass
class InjectedProfile:
    user_id: str
    items: list  # of (item_id, rating)

    def __post_init__(self):
        seen = set()
        for item_id, rating in self.items:
            if item_id in seen:
                raise ValidationError(f"{self.user_id} rates {item_id!r} twice")
            seen.add(item_id)
            if int(rating) != rating or rating < 1:
                raise ValidationError(f"bad rating {rating!r} for {item_id!r}")


def _derive_seed(seed, tag):
    return int(np.random.SeedSequence([int(seed), int(tag)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# tensor construction and projection


def init_tensor(n_fake, candidates, item_ids, L, seed=0):
    """Near-uniform start: 1/L plus +-0.01 noise, rows re-normalized."""
    if n_fake < 1 or len(candidates) < 1:
        raise ValidationError("need at least one injected user and candidate")
    rng = np.random.default_rng(seed)
    v = np.full((n_fake, len(candidates), L), 1.0 / L)
    v = v + rng.uniform(-0.01, 0.01, size=v.shape)
    v = np.clip(v, 0.0, None)
    v /= v.sum(axis=2, keepdims=True)
    return RatingTensor(v, np.asarray(candidates), tuple(item_ids),
                        tuple(f"atk{j:04d}" for j in range(n_fake)))


def project_normalize(values, L=None, global_minmax=True):
    """Clip, min-max, then per-row sum normalization.

    The min-max runs over all entries by default (per-row behind the
    flag). A fully constant tensor degenerates to uniform rows; so does
    any all-zero row after the min-max.
    """
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValidationError("projection input must be finite")
    L = v.shape[2] if L is None else L
    v = np.clip(v, 0.0, 1.0)
    if global_minmax:
        lo, hi = v.min(), v.max()
        if hi - lo < 1e-300:
            return np.full_like(v, 1.0 / L)
        v = (v - lo) / (hi - lo)
    else:
        lo = v.min(axis=2, keepdims=True)
        hi = v.max(axis=2, keepdims=True)
        flat = (hi - lo) < 1e-300
        v = np.where(flat, 1.0 / L, (v - lo) / np.where(flat, 1.0, hi - lo))
    sums = v.sum(axis=2, keepdims=True)
    zero = sums < 1e-300
    v = np.where(zero, 1.0 / L, v / np.where(zero, 1.0, sums))
    return v


# ---------------------------------------------------------------------------
# adversarial objective


def adv_loss(predictions, targets, users):
    """Negative log soft-max mass the listed users put on the targets.

    predictions is an (n, m) tensor of predicted ratings; the soft-max
    runs per user over all m items. Lower is better for the attacker.
    """
    users = np.asarray(users, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    rows = ag.gather(predictions, users, axis=0)        # (|U|, m)
    probs = ag.softmax(rows, temperature=1.0)
    cols = ag.gather(probs, targets, axis=1)            # (|U|, |T|)
    return ag.scale(ag.reduce_sum(ag.log(cols)), -1.0)


def meta_gradient(relaxed, params, trajectory, targets, users, injected_features=None):
    """Sum of adversarial gradients w.r.t. the tensor along the trajectory.

    Each checkpoint is loaded into params, the adversarial loss is
    evaluated at those fixed parameters, and its first-order gradient
    toward the rating tensor is accumulated; parameter updates are not
    differentiated through. params is restored before returning.
    """
    if not trajectory:
        raise ContractViolation("meta_gradient needs a non-empty trajectory")
    saved = params.snapshot()
    total = np.zeros_like(relaxed.tensor.values)
    try:
        for snap in trajectory:
            params.load_snapshot(snap)
            with ag.Tape() as tape:
                Z, H = rm.embed(relaxed, params, injected_features=injected_features)
                preds = rm.predict_all(
                    ag.gather(Z, np.asarray(users, dtype=np.int64), axis=0), H,
                    params, relaxed.base.L)
                loss = adv_loss(preds, targets, np.arange(len(users)))
            grads = ag.backward(tape, loss)
            g = grads.get(relaxed.tensor)
            if g is None:
                raise ContractViolation("tensor unreachable from the adversarial loss")
            total += g
    finally:
        params.load_snapshot(saved)
    return total


# ---------------------------------------------------------------------------
# MetaC

def _candidate_set(graph, target_ids, cfg):
    if graph.n_items > cfg.candidate_threshold:
        cand_ids = gd.candidate_items(graph, target_ids, hops=cfg.candidate_hops)
    else:
        cand_ids = set(graph.item_ids)
    cand_ids |= set(target_ids)
    idx = np.array(sorted(graph.item_index(i) for i in cand_ids), dtype=np.int64)
    return idx, tuple(graph.item_ids[i] for i in idx)


def metac_optimize(graph, attack_cfg, model_cfg=None, log=None):
    """Alternating victim training and tensor meta-updates.

    Returns the optimized RatingTensor. The victim is trained in
    cross-entropy mode with injected users labeled normal (the attacker
    controls their observed labels). Divergence raises AttackError
    carrying the last finite tensor.
    """
    model_cfg = model_cfg or rm.ModelConfig()
    if not attack_cfg.targets:
        raise ValidationError("attack needs at least one target item")
    target_idx = np.array(sorted(graph.item_index(t) for t in attack_cfg.targets),
                          dtype=np.int64)
    cand_idx, cand_ids = _candidate_set(graph, attack_cfg.targets, attack_cfg)
    n_inj = attack_cfg.resolve_count(graph.n_users)
    tensor = init_tensor(n_inj, cand_idx, cand_ids, graph.L,
                         seed=_derive_seed(attack_cfg.seed, 1))

    relaxed = rm.RelaxedGraph(graph, tensor.injected_ids,
                              Tensor(tensor.values, requires_grad=True), cand_idx)
    rec = rm.init_params(graph.n_items, graph.features.shape[1], d=model_cfg.d,
                         d_h=model_cfg.d_h, L=graph.L,
                         seed=_derive_seed(attack_cfg.seed, 2),
                         fraud_weight=model_cfg.fraud_weight)
    det = dt.init_detector(model_cfg.d + 2, hidden=model_cfg.det_hidden,
                           temperature=1.0, seed=_derive_seed(attack_cfg.seed, 3))
    labels = np.array([lab == gd.LABEL_FAKE for lab in graph.labels]
                      + [False] * n_inj)
    trainer = tr.Trainer(relaxed, rec, det, mode="graphrfi", labels_fake=labels,
                         seed=_derive_seed(attack_cfg.seed, 4))
    victim_users = np.array(
        [u for u, lab in enumerate(graph.labels) if lab == gd.LABEL_NORMAL],
        dtype=np.int64)

    def _log_loss():
        if log is None:
            return
        with ag.Tape():
            Z, H = rm.embed(relaxed, rec,
                            injected_features=trainer.injected_features)
            preds = rm.predict_all(ag.gather(Z, victim_users, axis=0), H,
                                   rec, graph.L)
            log.append(float(adv_loss(preds, target_idx,
                                      np.arange(victim_users.size)).values))

    last_good = tensor.values.copy()
    _log_loss()
    for epoch in range(attack_cfg.epochs):
        trainer.injected_features = rm.relaxed_injected_features(relaxed)
        trajectory = [rec.snapshot()]
        try:
            for _ in range(attack_cfg.k1 - 1):
                trainer.step(attack_cfg.eta1)
                trajectory.append(rec.snapshot())
            for _ in range(attack_cfg.k2):
                grad = meta_gradient(relaxed, rec, trajectory, target_idx,
                                     victim_users,
                                     injected_features=trainer.injected_features)
                if not np.all(np.isfinite(grad)):
                    raise AttackError("non-finite meta-gradient",
                                      last_tensor=last_good)
                relaxed.tensor.values = project_normalize(
                    relaxed.tensor.values - attack_cfg.eta2 * grad, graph.L,
                    global_minmax=attack_cfg.global_minmax)
        except (AttackError, ValidationError):
            raise
        except Exception as exc:  # training blow-ups carry the last tensor out
            raise AttackError(f"attack diverged at epoch {epoch}: {exc}",
                              last_tensor=last_good)
        last_good = relaxed.tensor.values.copy()
        _log_loss()
    tensor.values = relaxed.tensor.values.copy()
    tensor.check_normalized()
    return tensor


def discretize(tensor, B, force_targets=(), L_max=None):
    """Top-B most-confident argmax ratings per injected user.

    Ties in confidence break toward the smaller item id. force_targets
    (item ids) are rated at the top level first and charged against the
    budget; MetaC leaves this empty.
    """
    if B < 1:
        raise ValidationError("budget must be at least 1")
    p, k, L = tensor.values.shape
    top = L_max or L
    profiles = []
    if k < B:
        warnings.warn(f"only {k} candidates for budget {B}; taking all")
    for j in range(p):
        rows = tensor.values[j]
        levels = rows.argmax(axis=1)
        conf = rows.max(axis=1)
        order = sorted(range(k), key=lambda c: (-conf[c], tensor.item_ids[c]))
        picked = []
        chosen = set()
        for t in force_targets:
            picked.append((t, top))
            chosen.add(t)
        for c in order:
            if len(picked) >= B:
                break
            item = tensor.item_ids[c]
            if item in chosen:
                continue
            picked.append((item, int(levels[c]) + 1))
            chosen.add(item)
        profiles.append(InjectedProfile(tensor.injected_ids[j], picked))
    return profiles


# ---------------------------------------------------------------------------
# heuristic baselines


def _filler_pool(graph, exclude):
    return [i for i in range(graph.n_items) if graph.item_ids[i] not in exclude]


def _sample_ratings(rng, mu, sigma, size, L):
    return np.clip(np.rint(rng.normal(mu, sigma, size=size)), 1, L).astype(int)


def _check_budget(cfg):
    if cfg.budget < len(cfg.targets):
        raise ValidationError(
            f"budget {cfg.budget} cannot cover {len(cfg.targets)} targets")


def random_attack(graph, cfg):
    """Targets at the top level, fillers from the global rating statistics."""
    _check_budget(cfg)
    rng = np.random.default_rng(_derive_seed(cfg.seed, 10))
    mu = float(graph.edge_ratings.mean())
    sigma = float(graph.edge_ratings.std())
    pool = _filler_pool(graph, set(cfg.targets))
    n_fill = min(cfg.budget - len(cfg.targets), len(pool))
    profiles = []
    for j in range(cfg.resolve_count(graph.n_users)):
        items = [(t, graph.L) for t in cfg.targets]
        fillers = rng.choice(len(pool), size=n_fill, replace=False)
        ratings = _sample_ratings(rng, mu, sigma, n_fill, graph.L)
        items += [(graph.item_ids[pool[c]], int(r)) for c, r in zip(fillers, ratings)]
        profiles.append(InjectedProfile(f"atk{j:04d}", items))
    return profiles


def average_attack(graph, cfg):
    """Like random_attack with per-item mean/deviation for the fillers."""
    _check_budget(cfg)
    rng = np.random.default_rng(_derive_seed(cfg.seed, 11))
    sums = np.bincount(graph.edge_items, weights=graph.edge_ratings,
                       minlength=graph.n_items)
    sq = np.bincount(graph.edge_items, weights=graph.edge_ratings.astype(float) ** 2,
                     minlength=graph.n_items)
    deg = np.bincount(graph.edge_items, minlength=graph.n_items)
    global_mu = float(graph.edge_ratings.mean())
    safe = np.maximum(deg, 1)
    mu_v = np.where(deg > 0, sums / safe, global_mu)
    var_v = np.maximum(sq / safe - (sums / safe) ** 2, 0.0)
    sigma_v = np.where(deg > 1, np.sqrt(var_v), 0.0)  # single rating -> sigma 0
    pool = _filler_pool(graph, set(cfg.targets))
    n_fill = min(cfg.budget - len(cfg.targets), len(pool))
    profiles = []
    for j in range(cfg.resolve_count(graph.n_users)):
        items = [(t, graph.L) for t in cfg.targets]
        fillers = rng.choice(len(pool), size=n_fill, replace=False)
        for c in fillers:
            v = pool[c]
            r = _sample_ratings(rng, mu_v[v], sigma_v[v], 1, graph.L)[0]
            items.append((graph.item_ids[v], int(r)))
        profiles.append(InjectedProfile(f"atk{j:04d}", items))
    return profiles


def popular_attack(graph, cfg, popular_frac=0.3):
    """A slice of the filler budget goes to top-degree items at the top level."""
    _check_budget(cfg)
    rng = np.random.default_rng(_derive_seed(cfg.seed, 12))
    mu = float(graph.edge_ratings.mean())
    sigma = float(graph.edge_ratings.std())
    deg = np.bincount(graph.edge_items, minlength=graph.n_items)
    budget_fill = cfg.budget - len(cfg.targets)
    n_pop = int(round(popular_frac * budget_fill))
    order = sorted(range(graph.n_items),
                   key=lambda i: (-deg[i], graph.item_ids[i]))
    popular = [graph.item_ids[i] for i in order
               if graph.item_ids[i] not in set(cfg.targets)][:n_pop]
    pool = _filler_pool(graph, set(cfg.targets) | set(popular))
    n_rand = min(budget_fill - len(popular), len(pool))
    profiles = []
    for j in range(cfg.resolve_count(graph.n_users)):
        items = [(t, graph.L) for t in cfg.targets]
        items += [(v, graph.L) for v in popular]
        fillers = rng.choice(len(pool), size=n_rand, replace=False)
        ratings = _sample_ratings(rng, mu, sigma, n_rand, graph.L)
        items += [(graph.item_ids[pool[c]], int(r)) for c, r in zip(fillers, ratings)]
        profiles.append(InjectedProfile(f"atk{j:04d}", items))
    return profiles


def run_attack(method, graph, cfg, model_cfg=None, log=None):
    """Dispatch by name; metac optimizes, the rest sample directly."""
    if method == "metac":
        tensor = metac_optimize(graph, cfg, model_cfg, log=log)
        force = tuple(cfg.targets) if cfg.force_targets else ()
        return discretize(tensor, cfg.budget, force_targets=force, L_max=graph.L)
    if method == "random":
        return random_attack(graph, cfg)
    if method == "average":
        return average_attack(graph, cfg)
    if method == "popular":
        return popular_attack(graph, cfg)
    raise ValidationError(f"unknown attack method {method!r}")


# ---------------------------------------------------------------------------
# profile IO and graph injection


def save_profiles(profiles, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_PROFILE_HEADER)
        for prof in profiles:
            for item_id, rating in prof.items:
                writer.writerow([prof.user_id, item_id, int(rating)])


def load_profiles(path):
    by_user = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != _PROFILE_HEADER:
            raise ParseError(f"expected header {','.join(_PROFILE_HEADER)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line=lineno)
            uid, iid, rating_s = (c.strip() for c in row)
            try:
                rating = int(rating_s)
            except ValueError:
                raise ParseError(f"rating {rating_s!r} is not an integer", line=lineno)
            by_user.setdefault(uid, []).append((iid, rating))
    return [InjectedProfile(uid, items) for uid, items in by_user.items()]


def inject_profiles(graph, profiles):
    """Extend the graph with the injected users' discrete edges."""
    ids = [p.user_id for p in profiles]
    edges = []
    for j, prof in enumerate(profiles):
        for item_id, rating in prof.items:
            edges.append((j, graph.item_index(item_id), rating))
    return graph.extend_with_users(ids, gd.LABEL_INJECTED, edges)
