"""Command line entry point: ``python -m hgarn <command> ...``.

Exit status is 0 on success, 2 for bad usage or unusable input files and
1 for anything else.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .dataset import Dataset, DatasetError, load_dataset, parse_checkins, prepare, save_dataset
from .evaluation import evaluate, markov_fit, markov_ranker, model_ranker
from .hiergraph import HierarchicalGraph, build_graph, export_csv, load_graph, save_graph
from .model import HGARN, GraphMasks, ModelConfig
from .synth import InfeasibleSpec, SynthSpec, synth_cycles, synth_generate, write_jsonl
from .tensor import load_tensors, save_tensors
from .training import TrainingError, train

log = logging.getLogger("hgarn")

SWEEP_PARAMS = ("d_h_km", "w_c", "lambda_r")
LAYERS = ("loc", "lc", "act")


class InputError(Exception):
    """Unusable input: missing file, wrong format, hash mismatch."""


# --------------------------------------------------------------------------
# helpers


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return cfg.with_overrides(overrides)


def _out(args, default: str) -> Path:
    path = Path(args.out or default)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"no such file: {p}")
    return p


def _load_dataset(path) -> Dataset:
    return load_dataset(_need(path))


def _load_graph(path, ds: Dataset) -> HierarchicalGraph:
    try:
        graph = load_graph(_need(path))
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise InputError(str(exc)) from exc
    if graph.dataset_hash and graph.dataset_hash != ds.content_hash():
        raise InputError(f"graph {path} was built from a different dataset bundle")
    return graph


def _load_checkpoint(path) -> tuple[HGARN, dict]:
    manifest = Path(str(path) + ".json") if not str(path).endswith(".json") else Path(path)
    _need(manifest)
    try:
        state, meta = load_tensors(path)
        model = HGARN(ModelConfig.from_dict(meta["model_config"]), seed=0)
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise InputError(f"bad checkpoint {path}: {exc}") from exc
    return model, meta


def _check_compatible(meta: dict, ds: Dataset, graph: HierarchicalGraph | None) -> None:
    if meta.get("dataset_hash") != ds.content_hash():
        raise InputError("checkpoint was trained on a different dataset bundle")
    if graph is not None and meta.get("graph_hash") != graph.content_hash():
        raise InputError("checkpoint was trained with a different graph")


def _fit(cfg: RunConfig, ds: Dataset, graph: HierarchicalGraph, log_path=None):
    model = HGARN(cfg.model_config(ds.n_users, ds.n_activities, ds.n_locations,
                                   ds.n_hour_slots, ds.n_weekdays), seed=cfg.seed)
    result = train(ds, graph, model, cfg.train_settings(), log_path=log_path)
    model.load_state_dict(result.best_state)
    return model, result


def _print_stats(stats: dict) -> None:
    rows = [("users", stats["users"]), ("activities", stats["activities"]),
            ("locations", stats["locations"]), ("trajectories", stats["trajectories"]),
            ("  train / test", f"{stats['train_trajectories']} / {stats['test_trajectories']}"),
            ("check-ins in trajectories", stats["records"])]
    if stats["recurring_share"] is not None:
        rows.append(("recurring / explorative",
                     f"{stats['recurring_share']:.1%} / {stats['explorative_share']:.1%}"))
    if stats["test_recurring_share"] is not None:
        rows.append(("  test only", f"{stats['test_recurring_share']:.1%} / "
                                    f"{stats['test_explorative_share']:.1%}"))
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")


def _metric_row(report) -> dict:
    row = {}
    for setting, m in report.metrics.items():
        if m is None:
            continue
        for kind, short in (("recall", "R"), ("ndcg", "N")):
            for k, v in m[kind].items():
                row[f"{setting}_{short}@{k}"] = v
    return row


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.kind == "cycles":
        rows, meta = synth_cycles(users=args.users, locations=args.locations,
                                  activities=args.activities, seed=args.seed or 0)
    else:
        spec = SynthSpec(users=args.users, locations=args.locations, activities=args.activities,
                         recurring_ratio=args.ratio, trajectories_per_user=args.trajectories,
                         trajectory_len=args.length, seed=args.seed or 0)
        rows, meta = synth_generate(spec)
    out = _out(args, "synth.jsonl")
    write_jsonl(rows, out)
    meta_path = out.with_name(out.name + ".meta.json")
    meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
    print(f"wrote {len(rows)} check-ins to {out}")
    return 0


def cmd_prepare(args) -> int:
    cfg = _config(args)
    raw_path = _need(args.raw or cfg.raw_path or "")
    fmt = args.format or ("canonical_jsonl" if raw_path.suffix == ".jsonl" else cfg.raw_format)
    raw, skipped = parse_checkins(raw_path, fmt)
    ds = prepare(raw, n_hour_slots=cfg.n_hour_slots, min_count=cfg.min_count,
                 gap_hours=cfg.gap_hours, min_trajectory_len=cfg.min_trajectory_len)
    out = _out(args, "dataset.jsonl")
    digest = save_dataset(ds, out)
    if skipped:
        print(f"skipped {skipped} malformed rows")
    _print_stats(ds.statistics())
    print(f"bundle {out} (hash {digest})")
    return 0


def cmd_graph(args) -> int:
    cfg = _config(args)
    ds = _load_dataset(args.bundle)
    graph = build_graph(ds, args.dh if args.dh is not None else cfg.d_h_km)
    out = _out(args, "graph.json")
    digest = save_graph(graph, out)
    if args.csv_dir:
        export_csv(graph, args.csv_dir)
    print(f"location edges {int(graph.a_loc.sum())}, activity edges {int(graph.a_act.sum())}")
    print(f"graph {out} (hash {digest})")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _load_dataset(args.bundle)
    graph = _load_graph(args.graph, ds)
    out = _out(args, "model")
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")
    model, result = _fit(cfg, ds, graph, log_path)
    meta = {"model_config": model.config.__dict__, "run_config": cfg.to_dict(),
            "config_hash": cfg.config_hash(), "dataset_hash": ds.content_hash(),
            "graph_hash": graph.content_hash(), "best_epoch": result.best_epoch,
            "best_recall1_holdout": result.best_recall}
    save_tensors(out, model.state_dict(), meta)
    print(f"parameters {model.parameter_count()}")
    print(f"best holdout Recall@1 {result.best_recall:.4f} at epoch {result.best_epoch}")
    print(f"checkpoint {out}.json / {out}.bin, log {log_path}")
    return 0


def cmd_eval(args) -> int:
    ds = _load_dataset(args.bundle)
    if not ds.test:
        raise InputError("the bundle has no test trajectories")
    if args.mc:
        mc = markov_fit(ds.train, ds.n_locations, per_user=not args.global_mc,
                        fallback=not args.no_fallback)
        report = evaluate(markov_ranker(mc), ds.test, name="MC")
    else:
        if not (args.checkpoint and args.graph):
            raise InputError("eval needs --mc or both --checkpoint and --graph")
        model, meta = _load_checkpoint(args.checkpoint)
        graph = _load_graph(args.graph, ds)
        _check_compatible(meta, ds, graph)
        report = evaluate(model_ranker(model, graph), ds.test, name="HGARN",
                          config_hash=meta.get("config_hash"))
    out = _out(args, "report")
    out.with_name(out.name + ".json").write_text(report.to_json() + "\n", encoding="utf-8")
    out.with_name(out.name + ".csv").write_text(report.to_csv(), encoding="utf-8")
    for setting, m in report.metrics.items():
        if m is None:
            print(f"{setting:<12} (no samples)")
            continue
        cells = "  ".join(f"R@{k} {m['recall'][k]:.4f} N@{k} {m['ndcg'][k]:.4f}" for k in m["recall"])
        print(f"{setting:<12} n={report.counts[setting]:<5} {cells}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    ds = _load_dataset(args.bundle)
    grid = [float(v) for v in args.grid.split(",") if v.strip()]
    if not grid:
        raise InputError("empty grid")
    rows = []
    shared_graph = None if args.param == "d_h_km" else build_graph(ds, cfg.d_h_km)
    for value in grid:
        point = cfg.with_overrides([f"{args.param}={json.dumps(value)}"])
        graph = shared_graph or build_graph(ds, point.d_h_km)
        model, _ = _fit(point, ds, graph)
        report = evaluate(model_ranker(model, graph), ds.test, config_hash=point.config_hash())
        rows.append({"param": args.param, "value": value, **_metric_row(report)})
        print(f"{args.param}={value}: main R@5 {report.recall('main', 5):.4f}", flush=True)
    out = _out(args, "sweep.csv")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def cmd_inspect_attention(args) -> int:
    model, meta = _load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.bundle)
    graph = _load_graph(args.graph, ds)
    _check_compatible(meta, ds, graph)
    reps = model.graph_reps(GraphMasks.from_graph(graph), keep_attention=True)
    per_head = reps.attention.get(args.layer) or []
    if not per_head:
        raise InputError(f"layer {args.layer!r} is ablated in this checkpoint")
    if not 0 <= args.head < len(per_head):
        raise InputError(f"head must lie in [0, {len(per_head) - 1}]")
    att = per_head[args.head]
    labels = ds.location_keys if args.layer == "loc" else None
    if args.layer == "act":
        # rows of real activities only; the virtual location-aware nodes follow them
        att = att[:ds.n_activities]
        labels = ds.activity_names
    out = _out(args, f"attention_{args.layer}_{args.head}.csv")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for i, row in enumerate(att):
            w.writerow(([labels[i]] if labels else []) + [repr(float(x)) for x in row])
    sums = att.sum(axis=1)
    print(f"{att.shape[0]}x{att.shape[1]} matrix, row sums in "
          f"[{sums.min():.12f}, {sums.max():.12f}] -> {out}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--out", help="output path (or prefix)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="config override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hgarn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic check-in corpus")
    p.add_argument("--kind", choices=("routine", "cycles"), default="routine")
    p.add_argument("--users", type=int, default=20)
    p.add_argument("--locations", type=int, default=60)
    p.add_argument("--activities", type=int, default=6)
    p.add_argument("--ratio", type=float, default=0.859, help="recurring share of targets")
    p.add_argument("--trajectories", type=int, default=20, help="trajectories per user")
    p.add_argument("--length", type=int, default=5, help="records per trajectory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", parents=[common], help="raw check-ins -> dataset bundle")
    p.add_argument("raw", nargs="?", help="raw file (defaults to raw_path in the config)")
    p.add_argument("--format", choices=("foursquare_tsv", "canonical_jsonl"))
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("graph", parents=[common], help="dataset bundle -> graph bundle")
    p.add_argument("bundle")
    p.add_argument("--dh", type=float, help="distance threshold in km")
    p.add_argument("--csv-dir", help="also dump every matrix as CSV here")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("bundle")
    p.add_argument("graph")
    p.add_argument("--log", help="JSONL training log (default <out>.log.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint or the MC baseline")
    p.add_argument("bundle")
    p.add_argument("--checkpoint")
    p.add_argument("--graph")
    p.add_argument("--mc", action="store_true", help="first-order Markov chain baseline")
    p.add_argument("--no-fallback", action="store_true", help="MC: no popularity fill")
    p.add_argument("--global", dest="global_mc", action="store_true",
                   help="MC: pool transitions over all users")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="retrain over a grid of one parameter")
    p.add_argument("bundle")
    p.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    p.add_argument("--grid", required=True, help="comma separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect-attention", parents=[common], help="dump one attention head")
    p.add_argument("checkpoint")
    p.add_argument("bundle")
    p.add_argument("graph")
    p.add_argument("--layer", choices=LAYERS, default="act")
    p.add_argument("--head", type=int, default=0)
    p.set_defaults(func=cmd_inspect_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError, DatasetError, InfeasibleSpec) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
