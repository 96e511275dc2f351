"""Clipped-surrogate policy optimization over placement episodes: rollout
collection, discounted returns, advantages, and the update loop."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .device import DeviceConfig, mapping_to_json, recompute_timing, validate_mapping
from .env import NO_ACTION, EpisodeResult, run_episode
from .ir_graph import IRGraph, validate_graph
from .models import ActorCritic, ModelConfig, rollout_policy, save_checkpoint

METRICS_COLUMNS = ("iter", "episodes", "mean_return", "best_return", "best_cycles", "wall_time_s")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    episodes_per_iter: int = 4
    clip_eps: float = 0.2
    discount: float = 0.99
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    update_epochs: int = 4
    entropy_coef: float = 0.01
    minibatch_size: int = 64
    seed: int = 0
    normalize_advantages: bool = True
    use_gae: bool = False
    gae_lambda: float = 0.95
    mask_actions: bool = True
    topological: bool = True
    workers: int = 1
    checkpoint_every: int = 0  # 0: checkpoint only at the end
    track_time: bool = False  # keep wall_time_s at 0.0 so logs stay reproducible

    def __post_init__(self) -> None:
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not 0 < self.discount <= 1:
            raise ValueError("discount must lie in (0, 1]")
        if self.workers < 1 or self.episodes_per_iter < 1 or self.epochs < 1:
            raise ValueError("epochs, episodes_per_iter and workers must be >= 1")


@dataclass
class EpisodeMeta:
    start: int
    end: int
    graph_idx: int
    complete: bool
    cycles: int | None
    raw_return: float
    canonical_return: float
    assignment: dict[int, tuple[int, int]]


@dataclass
class RolloutBuffer:
    """Flat per-step storage plus episode boundaries; returns and advantages
    are filled in by compute_returns_advantages."""

    graphs: list[IRGraph]
    action_dim: int
    dyn_vecs: list[np.ndarray] = field(default_factory=list)
    current_nodes: list[int] = field(default_factory=list)
    graph_idx: list[int] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    log_probs_old: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    values_old: list[float] = field(default_factory=list)
    episodes: list[EpisodeMeta] = field(default_factory=list)
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.actions)

    def add_episode(self, graph_idx: int, result: EpisodeResult) -> None:
        start = len(self)
        g = self.graphs[graph_idx]
        for rec in result.trajectory:
            scalar = (rec.current_node + 1) / g.num_nodes
            self.dyn_vecs.append(
                np.concatenate([rec.ts_occupancy, [scalar]]).astype(np.float32)
            )
            self.current_nodes.append(rec.current_node)
            self.graph_idx.append(graph_idx)
            self.masks.append(np.asarray(rec.mask, dtype=np.int8))
            self.actions.append(rec.action)
            self.log_probs_old.append(rec.log_prob)
            self.rewards.append(rec.reward)
            self.values_old.append(rec.value)
        self.episodes.append(
            EpisodeMeta(
                start=start,
                end=len(self),
                graph_idx=graph_idx,
                complete=result.complete,
                cycles=result.cycles,
                raw_return=result.episode_return,
                canonical_return=result.canonical_return,
                assignment=dict(result.state.assignment),
            )
        )

    def audit(self) -> None:
        """Every stored action must be valid under its stored mask."""
        for i, action in enumerate(self.actions):
            if action != NO_ACTION and not self.masks[i][action]:
                raise ValueError(f"buffer step {i}: action {action} violates its mask")


def compute_returns_advantages(
    buffer: RolloutBuffer,
    discount: float,
    *,
    normalize: bool = True,
    use_gae: bool = False,
    gae_lambda: float = 0.95,
) -> RolloutBuffer:
    """Discounted suffix returns within each episode and advantages
    return - value; optionally GAE and per-batch normalization."""
    n = len(buffer)
    returns = np.zeros(n, dtype=np.float64)
    advantages = np.zeros(n, dtype=np.float64)
    rewards = np.asarray(buffer.rewards, dtype=np.float64)
    values = np.asarray(buffer.values_old, dtype=np.float64)
    for ep in buffer.episodes:
        acc = 0.0
        for t in range(ep.end - 1, ep.start - 1, -1):
            acc = rewards[t] + discount * acc
            returns[t] = acc
        if use_gae:
            gae = 0.0
            for t in range(ep.end - 1, ep.start - 1, -1):
                next_value = values[t + 1] if t + 1 < ep.end else 0.0
                delta = rewards[t] + discount * next_value - values[t]
                gae = delta + discount * gae_lambda * gae
                advantages[t] = gae
        else:
            advantages[ep.start : ep.end] = returns[ep.start : ep.end] - values[ep.start : ep.end]
    if normalize and n > 0:
        std = advantages.std()
        advantages = (advantages - advantages.mean()) / (std + 1e-8)
    buffer.returns = returns
    buffer.advantages = advantages
    return buffer


def collect_rollouts(
    ac: ActorCritic,
    graphs: Sequence[IRGraph],
    cfg: DeviceConfig,
    n_episodes: int,
    *,
    base_seed: int = 0,
    iteration: int = 0,
    mask_actions: bool = True,
    topological: bool = True,
    workers: int = 1,
) -> RolloutBuffer:
    """Run episodes round-robin over the graph collection.

    Episode seeds depend only on (base_seed, iteration, episode index), so
    buffers are identical for any worker count.
    """
    buffer = RolloutBuffer(graphs=list(graphs), action_dim=cfg.action_dim)
    policy = rollout_policy(ac)

    def one(ep: int) -> EpisodeResult:
        seed = int(
            np.random.SeedSequence(entropy=base_seed, spawn_key=(iteration, ep)).generate_state(1)[0]
        )
        return run_episode(
            policy,
            graphs[ep % len(graphs)],
            cfg,
            seed,
            enforce_mask=mask_actions,
            random_order=not topological,
        )

    if workers <= 1:
        results = [one(ep) for ep in range(n_episodes)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(n_episodes)))
    for ep, result in enumerate(results):
        buffer.add_episode(ep % len(graphs), result)
    return buffer


def clipped_objective_terms(
    ratio: torch.Tensor, advantage: torch.Tensor, clip_eps: float
) -> torch.Tensor:
    """Per-step surrogate min(ratio * A, g(eps, A)) with
    g(eps, A) = (1 + eps) A for A >= 0 and (1 - eps) A otherwise."""
    g = torch.where(advantage >= 0, (1 + clip_eps) * advantage, (1 - clip_eps) * advantage)
    return torch.min(ratio * advantage, g)


def ppo_update(
    ac: ActorCritic,
    buffer: RolloutBuffer,
    train_cfg: TrainConfig,
    *,
    opt_actor: torch.optim.Optimizer | None = None,
    opt_critic: torch.optim.Optimizer | None = None,
    shuffle_seed: int = 0,
) -> dict[str, float]:
    """Clipped-surrogate ascent on the actor and value regression on the
    critic over minibatches of the buffer.  Dead-end steps carry no action
    and are excluded; their penalty still flows through the returns."""
    if buffer.returns is None or buffer.advantages is None:
        raise ValueError("call compute_returns_advantages before ppo_update")
    if opt_actor is None:
        opt_actor = torch.optim.Adam(ac.actor.parameters(), lr=train_cfg.lr_actor)
    if opt_critic is None:
        opt_critic = torch.optim.Adam(ac.critic.parameters(), lr=train_cfg.lr_critic)

    rows = np.asarray(
        [i for i, a in enumerate(buffer.actions) if a != NO_ACTION], dtype=np.int64
    )
    if rows.size == 0:
        return {"actor_loss": 0.0, "critic_loss": 0.0, "entropy": 0.0, "clip_fraction": 0.0}

    dyn = torch.as_tensor(np.stack([buffer.dyn_vecs[i] for i in rows]))
    cur = torch.as_tensor(np.asarray([buffer.current_nodes[i] for i in rows]), dtype=torch.long)
    gidx = torch.as_tensor(np.asarray([buffer.graph_idx[i] for i in rows]), dtype=torch.long)
    masks = torch.as_tensor(np.stack([buffer.masks[i] for i in rows]))
    actions = torch.as_tensor(np.asarray([buffer.actions[i] for i in rows]), dtype=torch.long)
    logp_old = torch.as_tensor(np.asarray([buffer.log_probs_old[i] for i in rows]))
    returns = torch.as_tensor(buffer.returns[rows], dtype=torch.float32)
    advantages = torch.as_tensor(buffer.advantages[rows], dtype=torch.float32)

    gen = torch.Generator().manual_seed(shuffle_seed)
    n = rows.size
    stats = {"actor_loss": 0.0, "critic_loss": 0.0, "entropy": 0.0, "clip_fraction": 0.0}
    batches = 0
    for _ in range(train_cfg.update_epochs):
        perm = torch.randperm(n, generator=gen)
        for lo in range(0, n, train_cfg.minibatch_size):
            mb = perm[lo : lo + train_cfg.minibatch_size]
            logp, entropy, values = ac.evaluate_actions(
                buffer.graphs, gidx[mb], cur[mb], dyn[mb], masks[mb], actions[mb]
            )
            ratio = torch.exp(logp - logp_old[mb])
            surrogate = clipped_objective_terms(ratio, advantages[mb], train_cfg.clip_eps)
            actor_loss = -surrogate.mean() - train_cfg.entropy_coef * entropy.mean()
            critic_loss = ((values - returns[mb]) ** 2).mean()
            if not (torch.isfinite(actor_loss) and torch.isfinite(critic_loss)):
                raise RuntimeError(
                    "non-finite loss: "
                    f"actor={float(actor_loss)} critic={float(critic_loss)} "
                    f"ratio range=({float(ratio.min())},{float(ratio.max())})"
                )
            opt_actor.zero_grad()
            actor_loss.backward()
            opt_actor.step()
            opt_critic.zero_grad()
            critic_loss.backward()
            opt_critic.step()

            with torch.no_grad():
                clipped = ((ratio - 1.0).abs() > train_cfg.clip_eps).float().mean()
            stats["actor_loss"] += float(actor_loss.detach())
            stats["critic_loss"] += float(critic_loss.detach())
            stats["entropy"] += float(entropy.detach().mean())
            stats["clip_fraction"] += float(clipped)
            batches += 1
    for key in stats:
        stats[key] /= max(batches, 1)
    return stats


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint_path: Path
    metrics_path: Path
    metrics: list[dict[str, object]]
    best_return: float
    best_cycles: int | None
    best_assignments: dict[int, dict[int, tuple[int, int]]]
    first_iter_best_return: float
    policy: ActorCritic


def train(
    graphs: Sequence[IRGraph],
    device_cfg: DeviceConfig,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    out_dir: str | Path,
    *,
    policy: ActorCritic | None = None,
    stop_at_cycles: int | None = None,
    stop_at_return: float | None = None,
) -> TrainResult:
    """Outer training loop: collect, compute targets, update, log.

    Writes metrics.csv, checkpoint.pt and one best_mapping JSON per trained
    graph into out_dir.  Fully seed-deterministic in single-worker mode.
    """
    for g in graphs:
        problems = validate_graph(g)
        if problems:
            raise ValueError(f"graph {g.name!r} invalid: " + "; ".join(problems))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(train_cfg.seed)
    ac = policy if policy is not None else ActorCritic(model_cfg)
    opt_actor = torch.optim.Adam(ac.actor.parameters(), lr=train_cfg.lr_actor)
    opt_critic = torch.optim.Adam(ac.critic.parameters(), lr=train_cfg.lr_critic)

    metrics: list[dict[str, object]] = []
    best_return = -np.inf
    best_cycles: int | None = None
    best_assignments: dict[int, dict[int, tuple[int, int]]] = {}
    best_cycles_per_graph: dict[int, int] = {}
    first_iter_best = -np.inf
    t0 = time.perf_counter()

    for iteration in range(train_cfg.epochs):
        buffer = collect_rollouts(
            ac,
            graphs,
            device_cfg,
            train_cfg.episodes_per_iter,
            base_seed=train_cfg.seed,
            iteration=iteration,
            mask_actions=train_cfg.mask_actions,
            topological=train_cfg.topological,
            workers=train_cfg.workers,
        )
        compute_returns_advantages(
            buffer,
            train_cfg.discount,
            normalize=train_cfg.normalize_advantages,
            use_gae=train_cfg.use_gae,
            gae_lambda=train_cfg.gae_lambda,
        )
        ppo_update(
            ac,
            buffer,
            train_cfg,
            opt_actor=opt_actor,
            opt_critic=opt_critic,
            shuffle_seed=train_cfg.seed * 1_000_003 + iteration,
        )

        ep_returns = [ep.canonical_return for ep in buffer.episodes]
        best_return = max(best_return, max(ep_returns))
        if iteration == 0:
            first_iter_best = max(ep_returns)
        for ep in buffer.episodes:
            if ep.complete and ep.cycles is not None:
                prior = best_cycles_per_graph.get(ep.graph_idx)
                if prior is None or ep.cycles < prior:
                    if not train_cfg.topological:
                        # Out-of-order placement checks reach against placed
                        # predecessors only; drop candidates a full replay
                        # rejects.
                        placements = {
                            n: {"tile": t, "slot": s}
                            for n, (t, s) in ep.assignment.items()
                        }
                        if not validate_mapping(
                            device_cfg, graphs[ep.graph_idx], placements
                        ).ok:
                            continue
                    best_cycles_per_graph[ep.graph_idx] = ep.cycles
                    best_assignments[ep.graph_idx] = ep.assignment
        best_cycles = min(best_cycles_per_graph.values()) if best_cycles_per_graph else None

        elapsed = time.perf_counter() - t0 if train_cfg.track_time else 0.0
        metrics.append(
            {
                "iter": iteration,
                "episodes": (iteration + 1) * train_cfg.episodes_per_iter,
                "mean_return": float(np.mean(ep_returns)),
                "best_return": float(best_return),
                "best_cycles": "" if best_cycles is None else best_cycles,
                "wall_time_s": round(elapsed, 3),
            }
        )
        if train_cfg.checkpoint_every and (iteration + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_iter{iteration + 1:06d}.pt", ac, iteration + 1)
        if stop_at_cycles is not None and best_cycles is not None and best_cycles <= stop_at_cycles:
            break
        if stop_at_return is not None and best_return >= stop_at_return:
            break

    metrics_path = out_dir / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        writer.writerows(metrics)

    checkpoint_path = out_dir / "checkpoint.pt"
    save_checkpoint(checkpoint_path, ac, len(metrics))

    for gi, assignment in best_assignments.items():
        g = graphs[gi]
        state = recompute_timing(device_cfg, g, assignment)
        name = "best_mapping.json" if len(graphs) == 1 else f"best_mapping_g{gi}.json"
        (out_dir / name).write_text(mapping_to_json(device_cfg, g, state))

    return TrainResult(
        out_dir=out_dir,
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
        metrics=metrics,
        best_return=float(best_return),
        best_cycles=best_cycles,
        best_assignments=best_assignments,
        first_iter_best_return=float(first_iter_best),
        policy=ac,
    )


def finetune(
    checkpoint_path: str | Path,
    graph: IRGraph,
    device_cfg: DeviceConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path,
) -> TrainResult:
    """Continue training a checkpointed policy on a single target graph."""
    from .models import load_checkpoint

    ac, _ = load_checkpoint(checkpoint_path, expect_action_dim=device_cfg.action_dim)
    return train(
        [graph],
        device_cfg,
        train_cfg,
        ac.cfg,
        out_dir,
        policy=ac,
    )
