"""Command-line front end: synth, attack, run, eval.

Configuration is TOML with sections mirroring the module configs
([data], [experiment], [model], [defense]); `--set key=value` overrides
individual entries. Every run writes a manifest with the fully resolved
configuration so that re-running the manifest reproduces the report
byte for byte. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # 3.10 fallback
    import tomli as tomllib

from . import __version__
from . import attack as atk
from . import evalrun as ev
from . import graphdata as gd
from . import recmodel as rm
from .errors import (AttackError, ContractViolation, ParseError,
                     ShillforgeError, ValidationError)

MANIFEST_SCHEMA = "manifest-v1"


class UsageError(Exception):
    pass


def _atomic_file(path, writer):
    """writer(tmp_path) then rename, so failures never leave partial files."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# config plumbing


def _parse_literal(text):
    low = text.strip()
    if low.lower() in ("true", "false"):
        return low.lower() == "true"
    for cast in (int, float):
        try:
            return cast(low)
        except ValueError:
            pass
    if low.startswith("[") and low.endswith("]"):
        inner = low[1:-1].strip()
        return [] if not inner else [_parse_literal(p) for p in inner.split(",")]
    return low


def apply_overrides(raw, pairs):
    """--set entries: `key=value` into [experiment], `section.key=value` anywhere."""
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        key = key.strip()
        section = "experiment"
        if "." in key:
            section, key = key.split(".", 1)
        raw.setdefault(section, {})[key] = _parse_literal(value)
    return raw


def config_from_toml(raw):
    """Map the sectioned TOML dict onto an ExperimentConfig."""
    known = {"data", "experiment", "model", "defense"}
    extra = sorted(set(raw) - known)
    if extra:
        raise ValidationError(f"unknown config sections: {', '.join(extra)}")
    data = dict(raw.get("data", {}))
    if "csv" in data:
        if len(data) > 1:
            rest = sorted(set(data) - {"csv"})
            raise ValidationError(f"data.csv excludes other data keys: {rest}")
        source = data["csv"]
    else:
        source = data
    merged = dict(raw.get("experiment", {}))
    merged["source"] = source
    merged["model"] = dict(raw.get("model", {}))
    merged["defense_cfg"] = dict(raw.get("defense", {}))
    try:
        return ev.config_from_dict(merged)
    except TypeError as exc:  # badly typed value reaching a constructor
        raise ValidationError(str(exc))


def _env_seeds(cfg):
    env = os.environ.get("SHILLFORGE_SEED")
    if not env:
        return cfg
    try:
        seeds = tuple(int(s) for s in env.replace(",", " ").split())
    except ValueError:
        raise UsageError(f"SHILLFORGE_SEED must be integers, got {env!r}")
    if not seeds:
        raise UsageError("SHILLFORGE_SEED is set but empty")
    return dataclasses.replace(cfg, seeds=seeds)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    spec = gd.SyntheticSpec(args.users, args.items, args.fake, args.density,
                            rating_bias=(args.rating_lo, args.rating_hi),
                            L=args.levels, seed=args.seed)
    graph = gd.synthesize(spec)
    _atomic_file(args.output, lambda p: gd.save_csv(graph, p))
    print(f"wrote {graph.n_users} users, {graph.n_items} items, "
          f"{graph.n_edges} ratings to {args.output}")
    return 0


def _resolve_targets(graph, args):
    if args.targets:
        targets = tuple(t.strip() for t in args.targets.split(",") if t.strip())
        for t in targets:
            graph.item_index(t)  # unknown id raises
        return targets
    return ev.pick_targets(graph, args.n_targets, args.seed)


def cmd_attack(args):
    graph = gd.load_csv(args.input)
    targets = _resolve_targets(graph, args)
    cfg = atk.AttackConfig(
        n_injected=args.n_injected, power=args.power, budget=args.budget,
        targets=targets, k1=args.k1, k2=args.k2, epochs=args.epochs,
        eta1=args.eta1, eta2=args.eta2, seed=args.seed,
        force_targets=args.force_targets)
    log = []
    profiles = atk.run_attack(args.method, graph, cfg, rm.ModelConfig(), log=log)
    _atomic_file(args.output, lambda p: atk.save_profiles(profiles, p))
    if args.loss_log:
        lines = ["epoch,adv_loss"] + [f"{e},{v:.6f}" for e, v in enumerate(log)]
        ev.atomic_write(args.loss_log, "\n".join(lines) + "\n")
    n_edges = sum(len(p.items) for p in profiles)
    print(f"{args.method}: {len(profiles)} injected users, {n_edges} ratings "
          f"-> {args.output}")
    return 0


def _load_run_config(args):
    if args.manifest:
        with open(args.manifest, encoding="utf-8") as fh:
            try:
                manifest = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"manifest is not valid JSON: {exc}")
        if manifest.get("schema") != MANIFEST_SCHEMA:
            raise ValidationError(
                f"not a run manifest: schema {manifest.get('schema')!r}")
        try:
            return ev.config_from_dict(manifest["config"])
        except (TypeError, KeyError) as exc:
            raise ValidationError(f"manifest config invalid: {exc}")
    if not args.config:
        raise UsageError("run needs a config file or --manifest")
    with open(args.config, "rb") as fh:
        raw = tomllib.load(fh)
    apply_overrides(raw, args.set or [])
    return config_from_toml(raw)


def cmd_run(args):
    cfg = _env_seeds(_load_run_config(args))
    report = ev.run_experiment(cfg, jobs=args.jobs)
    out = args.out_dir
    os.makedirs(out, exist_ok=True)
    report_path = os.path.join(out, "report.json")
    ev.atomic_write(report_path, report.to_json())
    artifacts = {"report": report_path, "trajectories": {}, "checkpoints": {}}
    for seed, raw in report.raw_trajectories.items():
        tpath = os.path.join(out, f"trajectory_seed{seed}.csv")
        ev.write_trajectory_csv(tpath, raw)
        cpath = os.path.join(out, f"checkpoint_seed{seed}.npz")
        _atomic_file(cpath, lambda p, params=raw["rec_params"]:
                     rm.save_checkpoint(params, p))
        artifacts["trajectories"][str(seed)] = tpath
        artifacts["checkpoints"][str(seed)] = cpath
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "version": __version__,
        "config": ev.config_dict(cfg),
        "seeds": list(cfg.seeds),
        "artifacts": artifacts,
    }
    manifest_path = os.path.join(out, "manifest.json")
    ev.atomic_write(manifest_path,
                    json.dumps(ev._jsonable(manifest), sort_keys=True,
                               indent=2) + "\n")
    failed = {f["seed"] for f in report.failures}
    note = f" ({len(failed)} seed(s) failed)" if failed else ""
    print(f"report: {report_path}{note}")
    print(f"manifest: {manifest_path}")
    return 0


def cmd_eval(args):
    graph = gd.load_csv(args.graph)
    if args.profiles:
        graph = atk.inject_profiles(graph, atk.load_profiles(args.profiles))
    params = rm.load_checkpoint(args.checkpoint)
    targets = tuple(t.strip() for t in args.targets.split(",") if t.strip())
    ks = tuple(int(k) for k in args.k.split(","))
    Z, H = rm.embed(graph, params)
    pred = rm.predict_all(Z, H, params, graph.L).values
    rated = np.zeros(pred.shape, dtype=bool)
    rated[graph.edge_users, graph.edge_items] = True
    users = np.array([u for u, lab in enumerate(graph.labels)
                      if lab == gd.LABEL_NORMAL], dtype=np.int64)
    ranks = ev.item_id_ranks(graph)
    hr = {}
    for k in ks:
        per_target = {t: ev.hit_ratio(pred, rated, users, graph.item_index(t),
                                      k, ranks) for t in targets}
        hr[str(k)] = {"per_target": per_target,
                      "mean": float(np.mean(list(per_target.values())))}
    metrics = {"targets": list(targets), "n_users_evaluated": int(users.size),
               "hr": hr}
    ev.atomic_write(args.output,
                    json.dumps(ev._jsonable(metrics), sort_keys=True,
                               indent=2) + "\n")
    print(f"metrics: {args.output}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="shillforge",
        description="Poisoning attacks and defenses for a graph recommender "
                    "with integrated fraud detection.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic ratings CSV")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--fake", type=int, default=0, help="inherent fake users")
    p.add_argument("--density", type=float, default=6.0)
    p.add_argument("--levels", type=int, default=5)
    p.add_argument("--rating-lo", type=float, default=2.0)
    p.add_argument("--rating-hi", type=float, default=4.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("attack", help="run an attack, write injected profiles")
    p.add_argument("-i", "--input", required=True, help="ratings CSV")
    p.add_argument("--method", required=True,
                   choices=["metac", "random", "average", "popular"])
    p.add_argument("--power", type=float, default=0.01)
    p.add_argument("--n-injected", type=int, default=None)
    p.add_argument("--budget", type=int, default=15)
    p.add_argument("--targets", default=None, help="comma-separated item ids")
    p.add_argument("--n-targets", type=int, default=5)
    p.add_argument("--k1", type=int, default=100)
    p.add_argument("--k2", type=int, default=1)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--eta1", type=float, default=0.01)
    p.add_argument("--eta2", type=float, default=1.0)
    p.add_argument("--force-targets", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True, help="profiles CSV")
    p.add_argument("--loss-log", default=None, help="adv-loss CSV (metac)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("run", help="full experiment: report + trajectories")
    p.add_argument("config", nargs="?", help="TOML config")
    p.add_argument("--manifest", default=None,
                   help="re-run a saved manifest instead of a config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry (section.key=value)")
    p.add_argument("-o", "--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel worker processes across seeds")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="recompute hit ratios from artifacts")
    p.add_argument("--graph", required=True, help="ratings CSV")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--profiles", default=None, help="injected profiles CSV")
    p.add_argument("--targets", required=True, help="comma-separated item ids")
    p.add_argument("--k", default="10,50")
    p.add_argument("-o", "--output", required=True, help="metrics JSON")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ValidationError, ParseError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return 2
    except ShillforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
