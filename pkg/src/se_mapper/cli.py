"""Command-line entry point: train, map, finetune, validate, compare, gen.

Exit codes: 0 success, 1 validation failure, 2 usage or configuration
error, 3 dead-end mapping.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import baselines, plots
from .config import ConfigError, RunConfig, echo_config, load_run_config, with_seed
from .device import (
    DeviceConfig,
    mapping_to_json,
    parse_mapping,
    recompute_timing,
    validate_mapping,
)
from .env import run_episode
from .ir_graph import GraphGenParams, IRFormatError, parse_ir, random_graph, serialize_ir, validate_graph
from .models import ActorCritic, CheckpointMismatchError, ModelConfig, load_checkpoint, rollout_policy
from .ppo import TrainConfig, finetune, train

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_USAGE = 2
EXIT_DEAD_END = 3


def _load_graph(path: str):
    g = parse_ir(Path(path).read_text())
    problems = validate_graph(g)
    if problems:
        raise IRFormatError(f"{path}: " + "; ".join(problems))
    return g


def _apply_device_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for flag, field_name in (
        ("tiles", "num_tiles"),
        ("slots", "num_slots"),
        ("ii", "ii"),
        ("exec_latency", "exec_latency"),
        ("reach_limit", "reach_limit"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field_name] = value
    if overrides:
        cfg = dataclasses.replace(cfg, device=dataclasses.replace(cfg.device, **overrides))
    return cfg


def _apply_train_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for flag, field_name in (
        ("epochs", "epochs"),
        ("episodes_per_iter", "episodes_per_iter"),
        ("workers", "workers"),
        ("checkpoint_every", "checkpoint_every"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field_name] = value
    if getattr(args, "no_mask", False):
        overrides["mask_actions"] = False
    if getattr(args, "random_order", False):
        overrides["topological"] = False
    if getattr(args, "track_time", False):
        overrides["track_time"] = True
    if overrides:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **overrides))
    return cfg


def _effective_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = with_seed(cfg, args.seed)
    cfg = _apply_device_flags(cfg, args)
    cfg = _apply_train_flags(cfg, args)
    return cfg


def _model_config(cfg: RunConfig, args: argparse.Namespace) -> ModelConfig:
    model_args = dict(cfg.model)
    if getattr(args, "no_gga", False):
        model_args["use_gga"] = False
    return ModelConfig(action_dim=cfg.device.action_dim, **model_args)


def cmd_train(args: argparse.Namespace) -> int:
    try:
        cfg = _effective_config(args)
        model_cfg = _model_config(cfg, args)
        graph_paths = list(args.graphs) or list(cfg.graphs)
        if not graph_paths:
            raise ConfigError("no graphs given (positional arguments or paths.graphs)")
        out_dir = Path(args.out or cfg.out_dir or "")
        if not str(out_dir):
            raise ConfigError("no output directory given (--out or paths.out_dir)")
        graphs = [_load_graph(p) for p in graph_paths]
    except (ConfigError, IRFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    result = train(graphs, cfg.device, cfg.train, model_cfg, out_dir)
    (out_dir / "effective_config.yaml").write_text(echo_config(cfg))
    plots.save_reward_curve(result.metrics, out_dir / "reward_curve.png")
    print(f"trained {len(graphs)} graph(s) for {len(result.metrics)} iterations")
    print(f"best return {result.best_return:.3f}, best cycles {result.best_cycles}")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_map(args: argparse.Namespace) -> int:
    try:
        cfg = _effective_config(args)
        policy, _ = load_checkpoint(args.checkpoint, expect_action_dim=cfg.device.action_dim)
        g = _load_graph(args.graph)
        pins: dict[int, tuple[int, int]] = {}
        if args.partial:
            doc = json.loads(Path(args.partial).read_text())
            pins = {int(n): (int(e["tile"]), int(e["slot"])) for n, e in doc.items()}
    except (ConfigError, IRFormatError, CheckpointMismatchError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        episode = run_episode(
            rollout_policy(policy, deterministic=True), g, cfg.device, cfg.seed, pins=pins
        )
    except ValueError as exc:
        # A pinned placement violated a constraint.
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    text = mapping_to_json(cfg.device, g, episode.state, dead_end=not episode.complete)
    Path(args.out).write_text(text)
    if not episode.complete:
        print(f"dead end: partial mapping written to {args.out}", file=sys.stderr)
        return EXIT_DEAD_END
    print(f"mapped {g.num_nodes} nodes, total cycles {episode.cycles}")
    print(f"mapping written to {args.out}")
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    try:
        cfg = _effective_config(args)
        g = _load_graph(args.graph)
        out_dir = Path(args.out or cfg.out_dir or "")
        if not str(out_dir):
            raise ConfigError("no output directory given (--out or paths.out_dir)")
        result = finetune(args.checkpoint, g, cfg.device, cfg.train, out_dir)
    except (ConfigError, IRFormatError, CheckpointMismatchError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    (out_dir / "effective_config.yaml").write_text(echo_config(cfg))
    plots.save_reward_curve(result.metrics, out_dir / "reward_curve.png")
    print(f"finetuned for {len(result.metrics)} iterations")
    print(
        f"first-iteration best return {result.first_iter_best_return:.3f}, "
        f"final best return {result.best_return:.3f}, best cycles {result.best_cycles}"
    )
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        g = _load_graph(args.graph)
        device_cfg, placements = parse_mapping(Path(args.mapping).read_text())
    except (IRFormatError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report = validate_mapping(device_cfg, g, placements)
    for violation in report.violations:
        print(f"violation: {violation}")
    if report.ok:
        for node in sorted(report.fire_cycle):
            print(
                f"node {node}: fire {report.fire_cycle[node]}, ready {report.ready_time[node]}"
            )
        print(f"total cycles: {report.total_cycles}")
        print("mapping is valid")
        return EXIT_OK
    return EXIT_VALIDATION


def cmd_compare(args: argparse.Namespace) -> int:
    try:
        cfg = _effective_config(args)
        graphs = [(_load_graph(p), p) for p in args.graphs]
        out_dir = Path(args.out or cfg.out_dir or "compare_out")
    except (ConfigError, IRFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out_dir.mkdir(parents=True, exist_ok=True)

    methods = ("rl_gga", "rl_mlp", "sa", "greedy", "brute_force")
    rows: list[dict[str, object]] = []
    for gi, (g, path) in enumerate(graphs):
        row: dict[str, object] = {"graph": g.name or path, "nodes": g.num_nodes}
        curves: dict[str, tuple[list[float], list[float]]] = {}
        for label, use_gga in (("rl_gga", True), ("rl_mlp", False)):
            try:
                model_cfg = _model_config(cfg, args)
                model_cfg = dataclasses.replace(model_cfg, use_gga=use_gga)
                result = train(
                    [g], cfg.device, cfg.train, model_cfg, out_dir / f"{label}_g{gi}"
                )
                row[label] = result.best_cycles
                curves[label] = (
                    [m["iter"] for m in result.metrics],
                    [m["best_return"] for m in result.metrics],
                )
                if label == "rl_gga" and args.dump_attention:
                    attn = result.policy.attention_for(g)
                    plots.save_attention_heatmap(
                        attn, out_dir / f"attention_g{gi}.png", title=g.name
                    )
                    np.savetxt(out_dir / f"attention_g{gi}.csv", attn, delimiter=",")
            except Exception as exc:  # noqa: BLE001 - per-method failures land in the table
                print(f"{label} failed on {g.name}: {exc}", file=sys.stderr)
                row[label] = ""
        try:
            sa_result = baselines.simulated_annealing(g, cfg.device, cfg.sa)
            row["sa"] = int(sa_result.best_objective)
            with open(out_dir / f"sa_trace_g{gi}.csv", "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=("step", "temperature", "objective", "best"))
                writer.writeheader()
                writer.writerows(sa_result.trace)
            sa_state = recompute_timing(cfg.device, g, sa_result.best_assignment)
            (out_dir / f"sa_mapping_g{gi}.json").write_text(
                mapping_to_json(cfg.device, g, sa_state)
            )
        except Exception as exc:  # noqa: BLE001
            print(f"sa failed on {g.name}: {exc}", file=sys.stderr)
            row["sa"] = ""
        try:
            state = baselines.greedy_schedule(g, cfg.device)
            row["greedy"] = max(state.ready_time.values())
        except Exception as exc:  # noqa: BLE001
            print(f"greedy failed on {g.name}: {exc}", file=sys.stderr)
            row["greedy"] = ""
        try:
            cycles, _ = baselines.brute_force_optimal(g, cfg.device)
            row["brute_force"] = cycles
        except baselines.SearchBudgetError:
            row["brute_force"] = ""
        except Exception as exc:  # noqa: BLE001
            print(f"brute force failed on {g.name}: {exc}", file=sys.stderr)
            row["brute_force"] = ""
        if curves:
            plots.save_return_curves(
                curves, out_dir / f"returns_g{gi}.png", title=g.name or path
            )
        rows.append(row)

    with open(out_dir / "compare.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("graph", "nodes", *methods))
        writer.writeheader()
        writer.writerows(rows)
    plots.save_cycles_vs_nodes(rows, methods, out_dir / "cycles_vs_nodes.png")
    (out_dir / "effective_config.yaml").write_text(echo_config(cfg))

    header = f"{'graph':<20} {'nodes':>5} " + " ".join(f"{m:>11}" for m in methods)
    print(header)
    for row in rows:
        cells = " ".join(f"{str(row[m]):>11}" for m in methods)
        print(f"{str(row['graph'])[:20]:<20} {row['nodes']:>5} {cells}")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_gen(args: argparse.Namespace) -> int:
    try:
        cfg = _effective_config(args)
        params = GraphGenParams(
            edge_prob=args.edge_prob, mem_frac=args.mem_frac, mem_group_size=args.mem_group_size
        )
        g = random_graph(args.nodes, args.seed if args.seed is not None else cfg.seed, params)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    Path(args.out).write_text(serialize_ir(g))
    print(f"wrote {g.num_nodes}-node graph to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="se-mapper",
        description="Map dataflow instruction graphs onto a tiled streaming-engine array.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, *, train_flags: bool = False) -> None:
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--tiles", type=int, dest="tiles", help="device tile count")
        p.add_argument("--slots", type=int, dest="slots", help="slots per tile")
        p.add_argument("--ii", type=int, help="initiation interval")
        p.add_argument("--exec-latency", type=int, dest="exec_latency")
        p.add_argument("--reach-limit", type=int, dest="reach_limit")
        if train_flags:
            p.add_argument("--epochs", type=int, help="training iterations")
            p.add_argument("--episodes-per-iter", type=int, dest="episodes_per_iter")
            p.add_argument("--workers", type=int, help="rollout workers")
            p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
            p.add_argument("--no-gga", action="store_true", help="baseline MLP mode")
            p.add_argument("--no-mask", action="store_true", help="negative-reward mode")
            p.add_argument("--random-order", action="store_true", help="shuffled node iteration")
            p.add_argument("--track-time", action="store_true", help="record wall time in metrics")

    p_train = sub.add_parser("train", help="train a placement policy")
    common(p_train, train_flags=True)
    p_train.add_argument("graphs", nargs="*", help="IR JSON files")
    p_train.add_argument("--out", help="output directory")
    p_train.set_defaults(func=cmd_train)

    p_map = sub.add_parser("map", help="greedy-decode a mapping from a checkpoint")
    common(p_map)
    p_map.add_argument("--checkpoint", required=True)
    p_map.add_argument("--graph", required=True)
    p_map.add_argument("--out", required=True, help="mapping JSON output path")
    p_map.add_argument("--partial", help="JSON of pre-placed nodes to keep verbatim")
    p_map.set_defaults(func=cmd_map)

    p_ft = sub.add_parser("finetune", help="continue training a checkpoint on one graph")
    common(p_ft, train_flags=True)
    p_ft.add_argument("--checkpoint", required=True)
    p_ft.add_argument("--graph", required=True)
    p_ft.add_argument("--out", help="output directory")
    p_ft.set_defaults(func=cmd_finetune)

    p_val = sub.add_parser("validate", help="check a mapping against a graph")
    p_val.add_argument("--graph", required=True)
    p_val.add_argument("--mapping", required=True)
    p_val.set_defaults(func=cmd_validate)

    p_cmp = sub.add_parser("compare", help="benchmark RL variants against baselines")
    common(p_cmp, train_flags=True)
    p_cmp.add_argument("graphs", nargs="+", help="IR JSON files")
    p_cmp.add_argument("--out", help="output directory")
    p_cmp.add_argument("--dump-attention", action="store_true", dest="dump_attention")
    p_cmp.set_defaults(func=cmd_compare)

    p_gen = sub.add_parser("gen", help="emit a random IR graph")
    p_gen.add_argument("--nodes", type=int, required=True)
    p_gen.add_argument("--seed", type=int)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--edge-prob", type=float, default=0.5, dest="edge_prob")
    p_gen.add_argument("--mem-frac", type=float, default=0.2, dest="mem_frac")
    p_gen.add_argument("--mem-group-size", type=int, default=2, dest="mem_group_size")
    p_gen.add_argument("--config", help="YAML run configuration")
    p_gen.set_defaults(func=cmd_gen)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
