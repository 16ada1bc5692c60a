import json
import re

import numpy as np
import pytest

from shillforge import evalrun as ev
from shillforge import graphdata as gd
from shillforge.errors import ShillforgeError, ValidationError
from shillforge.evalrun import UserType


def small_cfg(**kw):
    base = dict(
        source=gd.SyntheticSpec(30, 12, 2, 3.0, seed=0),
        attack="random", defense="none", tau=0.5, k_list=(3,), power=0.1,
        seeds=(1, 2), n_targets=2, budget=4, train_epochs=2,
        steps_per_epoch=2, lr=0.05, test_frac=0.15,
    )
    base.update(kw)
    import shillforge.recmodel as rm
    base.setdefault("model", rm.ModelConfig(d=4, d_h=4, det_hidden=4))
    return ev.ExperimentConfig(**base)


def injected_graph(n=10, m=6, n_inj=4, seed=0):
    g = gd.synthesize(gd.SyntheticSpec(n, m, 2, 3.0, seed=seed))
    edges = [(j, j % g.n_items, 5) for j in range(n_inj)]
    edges += [(j, (j + 1) % g.n_items, 4) for j in range(n_inj)]
    return g.extend_with_users([f"atk{j:04d}" for j in range(n_inj)],
                               gd.LABEL_INJECTED, edges)


# --- hit_ratio -------------------------------------------------------------------


def test_hit_ratio_item_first_for_everyone():
    pred = np.array([[5.0, 1.0, 2.0], [4.0, 0.0, 1.0]])
    rated = np.zeros((2, 3), dtype=bool)
    assert ev.hit_ratio(pred, rated, [0, 1], 0, 1) == 1.0


def test_hit_ratio_half():
    pred = np.array([[5.0, 1.0], [1.0, 5.0]])
    rated = np.zeros((2, 2), dtype=bool)
    assert ev.hit_ratio(pred, rated, [0, 1], 0, 1) == 0.5


def test_hit_ratio_monotone_in_k():
    rng = np.random.default_rng(0)
    pred = rng.normal(size=(6, 9))
    rated = rng.random((6, 9)) < 0.3
    users = np.arange(6)
    vals = [ev.hit_ratio(pred, rated, users, 4, k) for k in range(1, 10)]
    assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))


def test_hit_ratio_excludes_rated_target():
    pred = np.array([[9.0, 1.0]])
    rated = np.array([[True, False]])
    assert ev.hit_ratio(pred, rated, [0], 0, 1) == 0.0


def test_hit_ratio_rated_items_do_not_compete():
    # top item is rated, so the target wins the only unrated slot
    pred = np.array([[9.0, 5.0, 1.0]])
    rated = np.array([[True, False, False]])
    assert ev.hit_ratio(pred, rated, [0], 1, 1) == 1.0


def test_hit_ratio_tie_breaks_by_item_id_rank():
    pred = np.array([[2.0, 2.0]])
    rated = np.zeros((1, 2), dtype=bool)
    assert ev.hit_ratio(pred, rated, [0], 1, 1, id_rank=np.array([1, 0])) == 1.0
    assert ev.hit_ratio(pred, rated, [0], 1, 1, id_rank=np.array([0, 1])) == 0.0


def test_hit_ratio_k_beyond_unrated_uses_all():
    pred = np.array([[3.0, 2.0, 1.0]])
    rated = np.array([[False, True, True]])
    assert ev.hit_ratio(pred, rated, [0], 0, 50) == 1.0


def test_hit_ratio_validates_inputs():
    pred = np.zeros((2, 2))
    rated = np.zeros((2, 2), dtype=bool)
    with pytest.raises(ValidationError):
        ev.hit_ratio(pred, rated, [0], 0, 0)
    with pytest.raises(ValidationError):
        ev.hit_ratio(pred, rated, [], 0, 1)
    with pytest.raises(ValidationError):
        ev.hit_ratio(pred, rated, [0], 5, 1)


def _oracle_hr(pred, rated, users, item, k, id_rank):
    hits = 0
    for u in users:
        cand = [v for v in range(pred.shape[1]) if not rated[u, v]]
        cand.sort(key=lambda v: (-pred[u, v], id_rank[v]))
        hits += item in cand[:k]
    return hits / len(users)


@pytest.mark.parametrize("seed", range(20))
def test_hit_ratio_matches_full_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 60))
    m = int(rng.integers(4, 25))
    pred = np.round(rng.normal(size=(n, m)) * 2) / 2  # quantized: forces ties
    rated = rng.random((n, m)) < 0.25
    id_rank = rng.permutation(m)
    users = rng.choice(n, size=max(1, n // 2), replace=False)
    item = int(rng.integers(m))
    for k in (1, 3, 7):
        got = ev.hit_ratio(pred, rated, users, item, k, id_rank)
        want = _oracle_hr(pred, rated, users, item, k, id_rank)
        assert got == pytest.approx(want, abs=1e-12)


# --- user types -----------------------------------------------------------------


def test_assign_types_tau_one_catches_all():
    g = injected_graph(n_inj=5)
    types = ev.assign_user_types(g, 1.0, seed=0)
    injected = [t for t, lab in zip(types, g.labels) if lab == gd.LABEL_INJECTED]
    assert all(t is UserType.III for t in injected)


def test_assign_types_third_of_ten():
    g = injected_graph(n_inj=10, n=12, m=8)
    types = ev.assign_user_types(g, 0.3, seed=1)
    counts = {t: sum(1 for x in types if x is t) for t in UserType}
    assert counts[UserType.III] == 3
    assert counts[UserType.IV] == 7
    assert counts[UserType.I] + counts[UserType.II] == 12
    assert sum(counts.values()) == g.n_users


def test_assign_types_inherent_users_keep_labels():
    g = injected_graph(n_inj=3)
    types = ev.assign_user_types(g, 0.5, seed=2)
    for t, lab in zip(types, g.labels):
        if lab == gd.LABEL_NORMAL:
            assert t is UserType.I
        elif lab == gd.LABEL_FAKE:
            assert t is UserType.II
        else:
            assert t in (UserType.III, UserType.IV)


def test_assign_types_deterministic():
    g = injected_graph(n_inj=6)
    a = ev.assign_user_types(g, 0.5, seed=5)
    b = ev.assign_user_types(g, 0.5, seed=5)
    assert all(x is y for x, y in zip(a, b))
    c = ev.assign_user_types(g, 0.5, seed=6)
    assert any(x is not y for x, y in zip(a, c))


def test_assign_types_rejects_bad_tau():
    with pytest.raises(ValidationError):
        ev.assign_user_types(injected_graph(), 1.5)


# --- remove_anomaly_defense -------------------------------------------------------


def test_remove_anomaly_tau_zero_is_noop():
    g = injected_graph(n_inj=4)
    types = ev.assign_user_types(g, 0.0, seed=0)
    assert ev.remove_anomaly_defense(g, types) is g


def test_remove_anomaly_tau_one_removes_all_injected():
    g = injected_graph(n_inj=4)
    types = ev.assign_user_types(g, 1.0, seed=0)
    out = ev.remove_anomaly_defense(g, types)
    assert out.n_users == g.n_users - 4
    assert all(lab != gd.LABEL_INJECTED for lab in out.labels)


def test_remove_anomaly_edge_bookkeeping():
    g = injected_graph(n_inj=6)
    types = ev.assign_user_types(g, 0.5, seed=3)
    out = ev.remove_anomaly_defense(g, types)
    removed = [u for u, t in enumerate(types) if t is UserType.III]
    lost = int(g.user_degrees()[removed].sum())
    assert out.n_edges == g.n_edges - lost
    kept_ids = [uid for uid, t in zip(g.user_ids, types) if t is not UserType.III]
    assert list(out.user_ids) == kept_ids


# --- experiment runner ------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValidationError):
        small_cfg(attack="nuke")
    with pytest.raises(ValidationError):
        small_cfg(defense="firewall")
    with pytest.raises(ValidationError):
        small_cfg(tau=1.2)
    with pytest.raises(ValidationError):
        small_cfg(attack="random", power=0.0)
    with pytest.raises(ValidationError):
        small_cfg(seeds=())
    with pytest.raises(ValidationError):
        small_cfg(k_list=(0,))


def test_run_experiment_attack_none_pre_equals_post():
    report = ev.run_experiment(small_cfg(attack="none", power=0.01))
    for rec in report.records:
        assert rec["pre"] == rec["post"]


def test_run_experiment_deterministic_bytes():
    cfg = small_cfg()
    a = ev.run_experiment(cfg).to_json()
    b = ev.run_experiment(cfg).to_json()
    assert a == b


def test_run_experiment_report_shape():
    cfg = small_cfg()
    report = ev.run_experiment(cfg)
    data = json.loads(report.to_json())
    assert data["schema"] == "report-v1"
    assert len(data["seeds"]) == 2
    for rec in data["seeds"]:
        assert rec["n_injected"] >= 1
        for phase in ("pre", "post"):
            hr = rec[phase]["hr"]["3"]
            assert 0.0 <= hr["mean"] <= 1.0
            assert len(rec["targets"]) == 2
        assert len(rec["auc"]) == cfg.train_epochs
        for curve in rec["trajectory"].values():
            assert curve is None or len(curve) == cfg.train_epochs


def test_report_floats_have_at_most_six_decimals():
    text = ev.run_experiment(small_cfg()).to_json()
    assert not re.findall(r"\d+\.\d{7,}", text)


def test_aggregate_matches_records():
    report = ev.run_experiment(small_cfg())
    vals = np.array([r["post"]["hr"]["3"]["mean"] for r in report.records])
    agg = report.aggregate["hr3_post"]
    assert agg["mean"] == pytest.approx(float(vals.mean()), abs=1e-12)
    assert agg["std"] == pytest.approx(float(vals.std()), abs=1e-12)


def test_partial_seed_failure_recorded(monkeypatch):
    real = ev.run_seed

    def flaky(cfg, seed):
        if seed == 2:
            raise ev._StageFailure("attack", RuntimeError("boom"))
        return real(cfg, seed)

    monkeypatch.setattr(ev, "run_seed", flaky)
    report = ev.run_experiment(small_cfg())
    assert [r["seed"] for r in report.records] == [1]
    assert report.failures == [{"seed": 2, "stage": "attack", "error": "boom"}]


def test_all_seeds_failing_raises():
    cfg = small_cfg(source="/nonexistent/ratings.csv")
    with pytest.raises(ShillforgeError):
        ev.run_experiment(cfg)


def test_remove_anomaly_pipeline_runs():
    report = ev.run_experiment(small_cfg(defense="remove_anomaly", seeds=(1,)))
    rec = report.records[0]
    assert rec["trajectory"]["III"][0] is None  # removed before retraining
    assert rec["n_injected"] >= 1


def test_adv_training_pipeline_runs():
    report = ev.run_experiment(
        small_cfg(defense="adv_training", seeds=(1,), adv_pretrain_epochs=1))
    assert report.records


def test_pdr_pipeline_runs():
    report = ev.run_experiment(small_cfg(defense="pdr", seeds=(1,)))
    assert report.records[0]["trajectory"]["IV"] is not None


def test_metac_pipeline_smoke():
    cfg = small_cfg(attack="metac", seeds=(1,), attack_k1=2, attack_epochs=1,
                    eta1=0.05)
    report = ev.run_experiment(cfg)
    assert report.records[0]["n_injected"] >= 1


def test_trajectory_csv_every_user_every_epoch(tmp_path):
    cfg = small_cfg(seeds=(1,))
    report = ev.run_experiment(cfg)
    raw = report.raw_trajectories[1]
    path = tmp_path / "traj.csv"
    ev.write_trajectory_csv(path, raw)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "epoch,user_id,user_type,q_fake"
    rows = [ln.split(",") for ln in lines[1:]]
    n_users = len(raw["user_ids"])
    assert len(rows) == cfg.train_epochs * n_users
    seen = {(r[0], r[1]) for r in rows}
    assert len(seen) == len(rows)  # every pair exactly once
    for r in rows:
        assert r[2] in {"I", "II", "III", "IV"}
        assert 0.0 <= float(r[3]) <= 1.0


def test_pick_targets_median_filter_and_determinism():
    g = gd.synthesize(gd.SyntheticSpec(25, 10, 1, 3.0, seed=4))
    a = ev.pick_targets(g, 2, 7)
    b = ev.pick_targets(g, 2, 7)
    assert a == b and len(a) == 2
    deg = g.item_degrees()
    med = np.median(deg)
    for t in a:
        assert deg[g.item_index(t)] >= med
    wide = ev.pick_targets(g, 10, 7, median_only=False)
    assert len(wide) == 10
