"""Seeded end-to-end experiments: attacks, defenses, metrics, reports.

The per-seed pipeline builds and prunes a graph, splits off a test set,
trains a clean victim for baseline numbers, injects an attack, assigns
user types under the detection fraction tau, applies a defense, retrains
while logging anomaly-score trajectories, and measures hit ratios and
RMSE. Reports aggregate per-seed records into means and deviations.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import enum
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import attack as atk
from . import detect as dt
from . import graphdata as gd
from . import recmodel as rm
from . import training as tr
from .errors import ShillforgeError, ValidationError

ATTACKS = ("none", "metac", "random", "average", "popular")
DEFENSES = ("none", "pdr", "remove_anomaly", "adv_training")

REPORT_SCHEMA = "report-v1"
TRAJECTORY_HEADER = ["epoch", "user_id", "user_type", "q_fake"]


class UserType(enum.Enum):
    I = "I"      # inherent normal
    II = "II"    # inherent fake
    III = "III"  # injected, labeled fake
    IV = "IV"    # injected, labeled normal


_TAGS = {"data": 1, "split": 2, "targets": 3, "attack": 4, "types": 5,
         "rec": 6, "det": 7, "trainer": 8}


def _derive(seed, tag):
    return int(np.random.SeedSequence([int(seed), _TAGS[tag]]).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    source: object                     # SyntheticSpec or a ratings CSV path
    attack: str = "none"
    defense: str = "none"
    tau: float = 0.3
    k_list: tuple = (10, 50)
    power: float = 0.01
    seeds: tuple = (1, 2, 3, 4, 5)
    n_targets: int = 5
    median_degree_targets: bool = True
    budget: int = 15
    attack_k1: int = 100
    attack_k2: int = 1
    attack_epochs: int = 50
    eta1: float = 0.01
    eta2: float = 1.0
    force_targets: bool = False
    train_epochs: int = 12
    steps_per_epoch: int = 10
    lr: float = 0.05
    test_frac: float = 0.1
    min_degree: int = 2
    holdout_frac: float = 0.1
    adv_noise: float = 0.1
    adv_pretrain_epochs: int = 2
    model: rm.ModelConfig = field(default_factory=rm.ModelConfig)
    defense_cfg: dt.DefenseConfig = field(default_factory=dt.DefenseConfig)

    def __post_init__(self):
        if self.attack not in ATTACKS:
            raise ValidationError(f"unknown attack {self.attack!r}")
        if self.defense not in DEFENSES:
            raise ValidationError(f"unknown defense {self.defense!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValidationError(f"tau must lie in [0, 1], got {self.tau}")
        if self.attack != "none" and self.power <= 0:
            raise ValidationError("attack power must be positive under attack")
        if not self.seeds:
            raise ValidationError("need at least one seed")
        if any(k < 1 for k in self.k_list) or not self.k_list:
            raise ValidationError("every k must be >= 1")
        if self.n_targets < 1 or self.budget < 1:
            raise ValidationError("n_targets and budget must be >= 1")
        if min(self.train_epochs, self.steps_per_epoch) < 1:
            raise ValidationError("training schedule must be >= 1")


@dataclass
class ExperimentReport:
    config: dict
    records: list
    failures: list
    aggregate: dict
    schema: str = REPORT_SCHEMA
    raw_trajectories: dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        return {
            "schema": self.schema,
            "config": self.config,
            "seeds": self.records,
            "failures": self.failures,
            "aggregate": self.aggregate,
        }

    def to_json(self):
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, indent=2) + "\n"


def _jsonable(obj):
    """Plain-JSON view with floats rounded to 6 decimal places."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, UserType):
        return obj.value
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return round(float(obj), 6)
    return obj


def atomic_write(path, text):
    """Write via a sibling temp file and rename, so readers never see halves."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# metrics


def item_id_ranks(graph):
    """rank[i] = position of item i when all item ids are sorted ascending."""
    order = sorted(range(graph.n_items), key=lambda i: graph.item_ids[i])
    rank = np.empty(graph.n_items, dtype=np.int64)
    rank[np.array(order)] = np.arange(graph.n_items)
    return rank


def hit_ratio(pred, rated, users, item, k, id_rank=None):
    """Fraction of users whose top-k unrated items include the given item.

    pred is an (n, m) score matrix and rated an (n, m) bool mask of
    training edges; ties in score break toward the smaller item id via
    id_rank. A user who already rated the item cannot hit it.
    """
    users = np.asarray(users, dtype=np.int64)
    if k < 1:
        raise ValidationError("k must be >= 1")
    if users.size == 0:
        raise ValidationError("hit_ratio needs at least one user")
    m = pred.shape[1]
    if not 0 <= item < m:
        raise ValidationError(f"item index {item} out of range")
    id_rank = np.arange(m) if id_rank is None else np.asarray(id_rank)
    rows = pred[users]
    target = rows[:, item:item + 1]
    ahead = (rows > target) | ((rows == target) & (id_rank[None, :] < id_rank[item]))
    ahead &= ~rated[users]
    hit = (ahead.sum(axis=1) < k) & ~rated[users, item]
    return float(hit.mean())


def rmse(pred, split_):
    err = pred[split_.test_users, split_.test_items] - split_.test_ratings
    return float(np.sqrt(np.mean(err ** 2)))


# ---------------------------------------------------------------------------
# user types and defenses


def assign_user_types(graph, tau, seed=0):
    """Type array per user; a tau fraction of injected users becomes III."""
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must lie in [0, 1], got {tau}")
    types = np.empty(graph.n_users, dtype=object)
    injected = []
    for u, lab in enumerate(graph.labels):
        if lab == gd.LABEL_NORMAL:
            types[u] = UserType.I
        elif lab == gd.LABEL_FAKE:
            types[u] = UserType.II
        else:
            types[u] = UserType.IV
            injected.append(u)
    if injected:
        n_caught = gd._round_half_up(tau * len(injected))
        rng = np.random.default_rng(seed)
        caught = rng.choice(len(injected), size=n_caught, replace=False)
        for c in caught:
            types[injected[c]] = UserType.III
    return types


def remove_anomaly_defense(graph, types):
    """Drop the Type III users and their edges; everyone else stays."""
    keep = np.array([t is not UserType.III for t in types])
    if keep.all():
        return graph
    remap = np.full(graph.n_users, -1, dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    emask = keep[graph.edge_users]
    return gd.RatingGraph(
        tuple(uid for uid, k in zip(graph.user_ids, keep) if k),
        graph.item_ids,
        tuple(lab for lab, k in zip(graph.labels, keep) if k),
        remap[graph.edge_users[emask]],
        graph.edge_items[emask],
        graph.edge_ratings[emask],
        graph.L,
    )


def observed_labels(types):
    """Bool fake-labels the detector trains on: II and III read as fake."""
    return np.array([t in (UserType.II, UserType.III) for t in types])


# ---------------------------------------------------------------------------
# experiment pipeline


class _StageFailure(ShillforgeError):
    def __init__(self, stage, error):
        super().__init__(f"{stage}: {error}")
        self.stage = stage
        self.error = error


def _defense_mode(cfg):
    """(training mode, adversarial noise) implementing the defense."""
    if cfg.defense == "pdr":
        return "pdr", 0.0
    if cfg.defense == "adv_training":
        return "graphrfi", cfg.adv_noise
    return "graphrfi", 0.0


def _build_graph(cfg, seed):
    if isinstance(cfg.source, gd.SyntheticSpec):
        spec = dataclasses.replace(cfg.source, seed=_derive(seed, "data"))
        graph = gd.synthesize(spec)
    else:
        graph = gd.load_csv(str(cfg.source))
    return gd.prune_min_degree(graph, cfg.min_degree)


def pick_targets(graph, n_targets, seed, median_only=True):
    """n_targets items, by default sampled among degree >= median."""
    deg = graph.item_degrees()
    if median_only:
        med = np.median(deg)
        pool = [i for i in range(graph.n_items) if deg[i] >= med]
    else:
        pool = list(range(graph.n_items))
    rng = np.random.default_rng(_derive(seed, "targets"))
    pick = rng.choice(len(pool), size=min(n_targets, len(pool)), replace=False)
    return tuple(sorted(graph.item_ids[pool[c]] for c in pick))


def _make_trainer(graph, labels_fake, cfg, mode, noise, seed):
    rec = rm.init_params(graph.n_items, graph.features.shape[1], d=cfg.model.d,
                         d_h=cfg.model.d_h, L=graph.L, seed=_derive(seed, "rec"),
                         fraud_weight=cfg.model.fraud_weight)
    det = dt.init_detector(cfg.model.d + 2, hidden=cfg.model.det_hidden,
                           temperature=cfg.defense_cfg.temperature
                           if mode == "pdr" else 1.0,
                           seed=_derive(seed, "det"))
    return tr.Trainer(graph, rec, det, mode=mode, labels_fake=labels_fake,
                      defense_cfg=cfg.defense_cfg, holdout_frac=cfg.holdout_frac,
                      seed=_derive(seed, "trainer"), adv_noise=noise,
                      adv_pretrain_epochs=cfg.adv_pretrain_epochs)


def _evaluate(trainer, split_, targets, cfg, graph):
    pred = trainer.predicted_matrix()
    rated = np.zeros(pred.shape, dtype=bool)
    rated[graph.edge_users, graph.edge_items] = True
    users = np.array([u for u, lab in enumerate(split_.train.labels)
                      if lab == gd.LABEL_NORMAL], dtype=np.int64)
    ranks = item_id_ranks(split_.train)
    hr = {}
    for k in cfg.k_list:
        per_target = {t: hit_ratio(pred, rated, users, split_.train.item_index(t),
                                   k, ranks) for t in targets}
        hr[str(k)] = {"per_target": per_target,
                      "mean": float(np.mean(list(per_target.values())))}
    return {"hr": hr, "rmse": rmse(pred, split_)}


def _type_trajectories(types, score_log):
    out = {}
    arr = np.array([t.value for t in types])
    for t in UserType:
        mask = arr == t.value
        out[t.value] = [float(scores[mask].mean()) if mask.any() else None
                        for scores in score_log]
    return out


def run_seed(cfg, seed):
    """One seed of the pipeline; returns (record, raw trajectory data)."""
    stage = "data"
    try:
        graph = _build_graph(cfg, seed)
        split_ = gd.split(graph, cfg.test_frac, seed=_derive(seed, "split"))
        train_g = split_.train
        targets = pick_targets(train_g, cfg.n_targets, seed,
                               median_only=cfg.median_degree_targets)
        mode, noise = _defense_mode(cfg)

        stage = "clean_train"
        clean_labels = np.array([lab == gd.LABEL_FAKE for lab in train_g.labels])
        clean = _make_trainer(train_g, clean_labels, cfg, mode, noise, seed)
        clean.train(cfg.train_epochs, cfg.steps_per_epoch, cfg.lr)
        pre = _evaluate(clean, split_, targets, cfg, train_g)

        stage = "attack"
        if cfg.attack == "none":
            profiles = []
            poisoned = train_g
        else:
            acfg = atk.AttackConfig(
                power=cfg.power, budget=cfg.budget, targets=targets,
                k1=cfg.attack_k1, k2=cfg.attack_k2, epochs=cfg.attack_epochs,
                eta1=cfg.eta1, eta2=cfg.eta2, seed=_derive(seed, "attack"),
                force_targets=cfg.force_targets)
            profiles = atk.run_attack(cfg.attack, train_g, acfg, cfg.model)
            poisoned = atk.inject_profiles(train_g, profiles)

        stage = "defense"
        types = assign_user_types(poisoned, cfg.tau, seed=_derive(seed, "types"))
        defended = poisoned
        if cfg.defense == "remove_anomaly":
            defended = remove_anomaly_defense(poisoned, types)
            types = types[np.array([t is not UserType.III for t in types])]

        stage = "retrain"
        retrained = _make_trainer(defended, observed_labels(types), cfg, mode,
                                  noise, seed)
        retrained.train(cfg.train_epochs, cfg.steps_per_epoch, cfg.lr)

        stage = "evaluate"
        post = _evaluate(retrained, split_, targets, cfg, defended)
        record = {
            "seed": seed,
            "targets": list(targets),
            "n_injected": sum(1 for lab in poisoned.labels
                              if lab == gd.LABEL_INJECTED),
            "pre": pre,
            "post": post,
            "auc": list(retrained.auc_log),
            "trajectory": _type_trajectories(types, retrained.score_log),
        }
        raw = {"user_ids": defended.user_ids, "types": types,
               "score_log": retrained.score_log, "rec_params": retrained.rec}
        return record, raw
    except Exception as exc:
        raise _StageFailure(stage, exc)


def _aggregate(records, cfg):
    if not records:
        return {}
    out = {}
    for phase in ("pre", "post"):
        for k in cfg.k_list:
            vals = np.array([r[phase]["hr"][str(k)]["mean"] for r in records])
            out[f"hr{k}_{phase}"] = {"mean": float(vals.mean()),
                                     "std": float(vals.std())}
        vals = np.array([r[phase]["rmse"] for r in records])
        out[f"rmse_{phase}"] = {"mean": float(vals.mean()),
                                "std": float(vals.std())}
    return out


def _seed_worker(cfg, seed):
    try:
        record, raw = run_seed(cfg, seed)
        return ("ok", record, raw)
    except _StageFailure as fail:
        return ("fail", fail.stage, str(fail.error))


def run_experiment(cfg, jobs=1):
    """All seeds; aborted seeds are recorded, the rest aggregate.

    jobs > 1 runs seeds in worker processes; results are always folded
    in seed order, so the report does not depend on scheduling.
    """
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_seed_worker, cfg, s) for s in cfg.seeds]
            results = [f.result() for f in futures]
    else:
        results = [_seed_worker(cfg, s) for s in cfg.seeds]
    records, failures, raws = [], [], {}
    for seed, res in zip(cfg.seeds, results):
        if res[0] == "ok":
            records.append(res[1])
            raws[seed] = res[2]
        else:
            failures.append({"seed": seed, "stage": res[1], "error": res[2]})
    if not records:
        raise ShillforgeError(
            f"every seed failed; first: {failures[0]['stage']}: "
            f"{failures[0]['error']}")
    return ExperimentReport(config=config_dict(cfg), records=records,
                            failures=failures, aggregate=_aggregate(records, cfg),
                            raw_trajectories=raws)


def config_dict(cfg):
    out = dataclasses.asdict(cfg)
    if isinstance(cfg.source, gd.SyntheticSpec):
        out["source"] = dataclasses.asdict(cfg.source)
    else:
        out["source"] = str(cfg.source)
    return out


def _kwargs_for(cls, data, section):
    valid = {f.name for f in dataclasses.fields(cls)}
    extra = sorted(set(data) - valid)
    if extra:
        raise ValidationError(f"unknown {section} keys: {', '.join(extra)}")
    return dict(data)


def config_from_dict(data):
    """Inverse of config_dict; unknown keys raise with their names."""
    d = dict(data)
    if "source" not in d:
        raise ValidationError("config needs a data source")
    src = d.pop("source")
    if isinstance(src, dict):
        kw = _kwargs_for(gd.SyntheticSpec, src, "data")
        if "rating_bias" in kw:
            kw["rating_bias"] = tuple(kw["rating_bias"])
        source = gd.SyntheticSpec(**kw)
    else:
        source = str(src)
    model = rm.ModelConfig(**_kwargs_for(rm.ModelConfig,
                                         d.pop("model", {}), "model"))
    defense_cfg = dt.DefenseConfig(**_kwargs_for(dt.DefenseConfig,
                                                 d.pop("defense_cfg", {}),
                                                 "defense"))
    rest = _kwargs_for(ExperimentConfig, d, "experiment")
    for key in ("k_list", "seeds"):
        if key in rest:
            rest[key] = tuple(rest[key])
    return ExperimentConfig(source=source, model=model,
                            defense_cfg=defense_cfg, **rest)


def write_trajectory_csv(path, raw):
    """One row per (epoch, user): epoch,user_id,user_type,q_fake."""
    lines = [",".join(TRAJECTORY_HEADER)]
    for epoch, scores in enumerate(raw["score_log"]):
        for u, uid in enumerate(raw["user_ids"]):
            lines.append(f"{epoch},{uid},{raw['types'][u].value},{scores[u]:.6f}")
    atomic_write(path, "\n".join(lines) + "\n")
