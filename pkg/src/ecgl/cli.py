"""Command line entry point: ``python -m ecgl {run,gen,bench,validate}``.

Options may come from a JSON config file (``--config``); flags given on the
command line override it. ``ECGL_OUTPUT_DIR`` overrides the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .continual_driver import METHODS, REGIMES, RegimeConfig, run_continual
from .efficient_learner import TrainConfig
from .evaluation import MetricError, format_speedup, mean_std, timing_report, timing_table_csv
from .graph_store import DatasetError, generate_sbm, load_dataset, save_dataset
from .replay_sampler import ImportanceConfig

logger = logging.getLogger("ecgl")

DEFAULTS = {
    "dataset": None,
    "sbm_tasks": 4,
    "sbm_classes_per_task": 2,
    "sbm_nodes_per_class": 100,
    "sbm_p_intra": 0.05,
    "sbm_p_inter": 0.01,
    "sbm_p_intertask": 0.002,
    "sbm_feature_dim": 16,
    "sbm_feature_shift": 3.0,
    "sbm_seed": 0,
    "method": "ecgl",
    "regime": "task_il",
    "budget": None,  # None -> scaled by graph size
    "diversity_ratio": 0.25,
    "replay_lambda": 1.0,
    "epochs": 200,
    "learning_rate": 0.1,
    "weight_decay": 5e-4,
    "hidden": [256],
    "optimizer": "gd",
    "batch_size": None,
    "damping": 0.85,
    "gamma": None,
    "exact_importance": False,
    "include_prior_edges": False,
    "seeds": [0, 1, 2, 3, 4],
    "output_dir": "runs",
    "debug_dump": False,
}

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class ConfigError(ValueError):
    pass


def default_budget(num_nodes: int) -> int:
    """Replay budget per task by graph scale: 1000 / 3000 / 5000 nodes."""
    if num_nodes <= 50_000:
        return 1000
    if num_nodes <= 200_000:
        return 3000
    return 5000


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).replace(" ", "").split(",") if v != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_data_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--dataset", help="dataset file; a synthetic SBM is generated when omitted")
    g.add_argument("--sbm-tasks", type=int)
    g.add_argument("--sbm-classes-per-task", type=int)
    g.add_argument("--sbm-nodes-per-class", type=int)
    g.add_argument("--sbm-p-intra", type=float)
    g.add_argument("--sbm-p-inter", type=float)
    g.add_argument("--sbm-p-intertask", type=float)
    g.add_argument("--sbm-feature-dim", type=int)
    g.add_argument("--sbm-feature-shift", type=float)
    g.add_argument("--sbm-seed", type=int)


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option values; flags override it")
    g = p.add_argument_group("model")
    g.add_argument("--regime", choices=REGIMES)
    g.add_argument("--budget", type=int, help="replay nodes per task")
    g.add_argument("--diversity-ratio", type=float)
    g.add_argument("--lambda", dest="replay_lambda", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", dest="learning_rate", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--hidden", type=_int_list, help="hidden layer sizes, e.g. 256 or 128,64")
    g.add_argument("--optimizer", choices=("gd", "adam"))
    g.add_argument("--batch-size", type=int)
    g.add_argument("--damping", type=float)
    g.add_argument("--gamma", type=float)
    g.add_argument("--exact-importance", action="store_const", const=True)
    g.add_argument("--include-prior-edges", action="store_const", const=True)
    g.add_argument("--seeds", type=_int_list)
    g.add_argument("--output-dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecgl", description="Efficient continual graph learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run continual training for every seed")
    _add_data_args(run)
    _add_model_args(run)
    run.add_argument("--method", choices=METHODS)
    run.add_argument("--debug-dump", action="store_const", const=True,
                     help="write per-task selection CSVs")

    gen = sub.add_parser("gen", help="write a synthetic SBM dataset file")
    _add_data_args(gen)
    gen.add_argument("--config")
    gen.add_argument("--out", required=True)

    bench = sub.add_parser("bench", help="time ecgl against the message-passing trainer")
    _add_data_args(bench)
    _add_model_args(bench)

    val = sub.add_parser("validate", help="lint a dataset file")
    val.add_argument("path")
    return parser


def resolve_options(args: argparse.Namespace) -> dict:
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from None
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        opts.update(data)
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            opts[key] = value
    env = os.environ.get("ECGL_OUTPUT_DIR")
    if env:
        opts["output_dir"] = env
    if not opts["seeds"]:
        raise ConfigError("at least one seed is required")
    return opts


def load_data(opts: dict):
    if opts["dataset"]:
        return load_dataset(opts["dataset"])
    try:
        return generate_sbm(
            opts["sbm_tasks"], opts["sbm_classes_per_task"], opts["sbm_nodes_per_class"],
            opts["sbm_p_intra"], opts["sbm_p_inter"], opts["sbm_p_intertask"],
            opts["sbm_feature_dim"], opts["sbm_feature_shift"], opts["sbm_seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def regime_config(opts: dict, num_nodes: int, seed: int) -> RegimeConfig:
    budget = opts["budget"] if opts["budget"] is not None else default_budget(num_nodes)
    try:
        return RegimeConfig(
            regime=opts["regime"],
            sample_budget=budget,
            diversity_ratio=opts["diversity_ratio"],
            importance=ImportanceConfig(
                damping_d=opts["damping"],
                rbf_gamma=opts["gamma"],
                use_taylor_surrogate=not opts["exact_importance"],
            ),
            train=TrainConfig(
                epochs=opts["epochs"],
                learning_rate=opts["learning_rate"],
                weight_decay=opts["weight_decay"],
                replay_lambda=opts["replay_lambda"],
                seed=seed,
                hidden_dims=tuple(opts["hidden"]),
                optimizer=opts["optimizer"],
                batch_size=opts["batch_size"],
            ),
            include_prior_edges=bool(opts["include_prior_edges"]),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def _output_dir(opts: dict) -> Path:
    out = Path(opts["output_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="")


def aggregate(records: dict[int, dict]) -> dict:
    """Mean and population std of AA/AF across per-seed RunRecord dicts."""
    seeds = sorted(records)
    num_tasks = len(records[seeds[0]]["average_accuracy"])
    per_task = []
    for i in range(num_tasks):
        aa = [records[s]["average_accuracy"][i] for s in seeds]
        af = [records[s]["average_forgetting"][i] for s in seeds]
        aa_m, aa_s = mean_std(aa)
        row = {"task": i, "aa_mean": aa_m, "aa_std": aa_s, "af_mean": None, "af_std": None}
        if all(v is not None for v in af):
            row["af_mean"], row["af_std"] = mean_std(af)
        per_task.append(row)
    return {"seeds": seeds, "final": per_task[-1], "per_task": per_task}


def cmd_run(opts: dict) -> int:
    graph, tasks = load_data(opts)
    out = _output_dir(opts)
    method = opts["method"]
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    echo = regime_config(opts, graph.num_nodes, opts["seeds"][0])
    print(
        f"method={method} regime={echo.regime} budget={echo.sample_budget} "
        f"diversity_ratio={echo.diversity_ratio} lambda={echo.train.replay_lambda} "
        f"seeds={','.join(map(str, opts['seeds']))}"
    )
    records, train_ms, infer_ms = {}, {}, {}
    for seed in opts["seeds"]:
        cfg = regime_config(opts, graph.num_nodes, seed)
        debug = out / f"selection_seed{seed}" if opts["debug_dump"] else None
        if debug is not None:
            debug.mkdir(exist_ok=True)
        rec = run_continual(graph, tasks, cfg, method, debug_dir=debug)
        d = rec.to_dict(include_timings=False)
        d["seed"] = seed
        records[seed] = d
        _write(out / f"run_seed{seed}.json", json.dumps(d, sort_keys=True, indent=2) + "\n")
        _write(out / f"performance_seed{seed}.csv", rec.performance.to_csv())
        _write(out / f"timing_seed{seed}.json", json.dumps(rec.timings, sort_keys=True, indent=2) + "\n")
        train_ms[f"seed{seed}"] = [v for t in rec.timings for v in t["train_epoch_ms"]]
        infer_ms[f"seed{seed}"] = [t["inference_ms"] for t in rec.timings]
        final = d["average_accuracy"][-1]
        af = d["average_forgetting"][-1]
        print(f"seed {seed}: AA={100 * final:.2f}%" + ("" if af is None else f" AF={100 * af:.2f}%"))
    agg = aggregate(records)
    _write(out / "aggregate.json", json.dumps(agg, sort_keys=True, indent=2) + "\n")
    _write(out / "timing.csv", timing_table_csv(train_ms, infer_ms))
    f = agg["final"]
    msg = f"AA {100 * f['aa_mean']:.2f}±{100 * f['aa_std']:.2f}%"
    if f["af_mean"] is not None:
        msg += f"  AF {100 * f['af_mean']:.2f}±{100 * f['af_std']:.2f}%"
    print(msg)
    return 0


def cmd_gen(opts: dict, out_path: str) -> int:
    graph, tasks = load_data({**opts, "dataset": None})
    try:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        save_dataset(out_path, graph, tasks)
    except OSError as exc:
        raise ConfigError(f"cannot write {out_path}: {exc}") from None
    print(f"wrote {out_path}: {graph.num_nodes} nodes, {graph.num_edges // 2} edges, "
          f"{len(tasks)} tasks, {tasks.num_classes} classes")
    return 0


def cmd_bench(opts: dict) -> int:
    graph, tasks = load_data(opts)
    out = _output_dir(opts)
    seed = opts["seeds"][0]
    cfg = regime_config(opts, graph.num_nodes, seed)
    train_ms, infer_ms, sample_ms = {}, {}, {}
    for method in ("ecgl", "ecgl_gcn_trainer"):
        rec = run_continual(graph, tasks, cfg, method)
        train_ms[method] = [v for t in rec.timings for v in t["train_epoch_ms"]]
        infer_ms[method] = [t["inference_ms"] for t in rec.timings]
        sample_ms[method] = [t["sampling_ms"] for t in rec.timings]
    table = timing_table_csv(train_ms, infer_ms)
    _write(out / "bench_timing.csv", table)
    summary = {
        "num_nodes": graph.num_nodes,
        "num_edges": graph.num_edges,
        "epochs": cfg.train.epochs,
        "seed": seed,
        "train_speedup": timing_report(train_ms).speedup,
        "inference_speedup": timing_report(infer_ms).speedup,
        "sampling_ms": sample_ms,
    }
    _write(out / "bench_summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(table, end="")
    print(f"training speedup: {format_speedup(summary['train_speedup'])}")
    return 0


def cmd_validate(path: str) -> int:
    graph, tasks = load_dataset(path)
    print(f"{path}: ok ({graph.num_nodes} nodes, {graph.num_edges} stored edges, "
          f"{len(tasks)} tasks, {tasks.num_classes} classes)")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "validate":
            return cmd_validate(args.path)
        opts = resolve_options(args)
        if args.command == "run":
            return cmd_run(opts)
        if args.command == "gen":
            return cmd_gen(opts, args.out)
        return cmd_bench(opts)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, OSError) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, MetricError, np.linalg.LinAlgError) as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
