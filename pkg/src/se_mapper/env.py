"""Episode logic: iterate nodes, build observations, apply placements,
emit rewards."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .device import (
    DeviceConfig,
    PlacementState,
    mapping_return,
    place_node,
    recompute_timing,
    total_cycles,
    valid_action_mask,
)
from .ir_graph import IRGraph, topological_order, validate_graph

NO_ACTION = -1
"""Action sentinel for dead-end steps, where the policy never sampled."""


@dataclass(frozen=True)
class Observation:
    """Dynamic state fed to the policy.  The graph itself is static per
    episode and embedded by the model, completing the full state vector of
    size num_tiles * num_slots + embedding_width + 1."""

    ts_occupancy: np.ndarray  # length num_tiles * num_slots, entries in [0, 1]
    current_node: int
    graph: IRGraph

    def dynamic_vector(self) -> np.ndarray:
        """Occupancy plus the normalized id of the node being placed."""
        scalar = (self.current_node + 1) / self.graph.num_nodes
        return np.concatenate([self.ts_occupancy, [scalar]]).astype(np.float32)


@dataclass
class StepResult:
    observation: Observation | None
    reward: float
    done: bool
    info: dict[str, Any]


@dataclass
class StepRecord:
    """One trajectory entry, shaped for the rollout buffer."""

    ts_occupancy: np.ndarray
    current_node: int
    mask: np.ndarray
    action: int
    log_prob: float
    value: float
    reward: float


class MappingEnv:
    """Places one node per step onto the modeled device.

    In the default mode nodes are visited in topological order and actions
    come from the valid-action mask.  Two training ablations are supported:
    ``enforce_mask=False`` samples over the full action space and terminates
    with the dead-end penalty on an invalid pick, and ``random_order=True``
    visits nodes in a seeded shuffle, firing ahead of unplaced predecessors
    and repairing all fire cycles at the end of the episode.
    """

    def __init__(
        self,
        g: IRGraph,
        cfg: DeviceConfig,
        seed: int = 0,
        *,
        enforce_mask: bool = True,
        random_order: bool = False,
    ):
        violations = validate_graph(g)
        if violations:
            raise ValueError("invalid graph: " + "; ".join(violations))
        self.g = g
        self.cfg = cfg
        self.seed = seed
        self.enforce_mask = enforce_mask
        self.random_order = random_order
        self._order: list[int] = []
        self._pos = 0
        self._mask_pos = -1
        self._mask: np.ndarray | None = None
        self.state = PlacementState.empty()
        self.done = True
        self.dead_end = False

    def reset(self) -> Observation:
        self._order = topological_order(self.g)
        if self.random_order:
            rng = np.random.default_rng(self.seed)
            self._order = [int(i) for i in rng.permutation(self.g.num_nodes)]
        self._pos = 0
        self._mask_pos = -1
        self.state = PlacementState.empty()
        self.done = False
        self.dead_end = False
        return self._observe()

    @property
    def current_node(self) -> int:
        return self._order[self._pos]

    def _observe(self) -> Observation:
        occ = np.zeros(self.cfg.action_dim, dtype=np.float32)
        for node, (tile, slot) in self.state.assignment.items():
            occ[self.cfg.action_index(tile, slot)] = (node + 1) / self.g.num_nodes
        return Observation(ts_occupancy=occ, current_node=self.current_node, graph=self.g)

    def action_mask(self) -> np.ndarray:
        """Constraint mask for the node about to be placed (cached per step)."""
        if self._mask_pos != self._pos:
            self._mask = valid_action_mask(self.cfg, self.state, self.g, self.current_node)
            self._mask_pos = self._pos
        assert self._mask is not None
        return self._mask

    def sample_mask(self) -> np.ndarray:
        """Mask handed to the policy: all ones when masking is disabled."""
        if self.enforce_mask:
            return self.action_mask()
        return np.ones(self.cfg.action_dim, dtype=np.int8)

    def step(self, action: tuple[int, int] | int) -> StepResult:
        if self.done:
            raise RuntimeError("episode is done; call reset()")
        if isinstance(action, tuple):
            tile, slot = action
        else:
            tile, slot = self.cfg.action_of(int(action))
        node = self.current_node
        mask = self.action_mask()

        invalid = not mask.any() or not mask[self.cfg.action_index(tile, slot)]
        if invalid:
            if mask.any() and self.enforce_mask:
                raise ValueError(f"action ({tile},{slot}) for node {node} is masked out")
            self.done = True
            self.dead_end = True
            return StepResult(
                observation=None,
                reward=-self.cfg.lambda_penalty,
                done=True,
                info={"fire_cycle": None, "ready_time": None, "dead_end": True},
            )

        self.state = place_node(
            self.cfg, self.state, self.g, node, tile, slot,
            allow_unplaced_preds=self.random_order,
        )
        t_node = self.state.ready_time[node]
        placed_pred_ready = [
            self.state.ready_time[p]
            for p in self.g.predecessors[node]
            if self.state.is_placed(p)
        ]
        t_pred = max(placed_pred_ready, default=0)
        reward = -(t_node - t_pred)

        self._pos += 1
        self.done = self._pos >= self.g.num_nodes
        return StepResult(
            observation=None if self.done else self._observe(),
            reward=float(reward),
            done=self.done,
            info={"fire_cycle": self.state.fire_cycle[node], "ready_time": t_node, "dead_end": False},
        )

    def is_complete(self) -> bool:
        return all(self.state.is_placed(n.id) for n in self.g.nodes)

    def final_state(self) -> PlacementState:
        """Mapping after the episode; random-order runs are re-timed so fire
        cycles honor every predecessor."""
        if self.random_order and self.is_complete():
            return recompute_timing(self.cfg, self.g, self.state.assignment)
        return self.state

    def canonical_return(self, raw_return: float) -> float:
        """Episode return comparable across iteration-order modes: recomputed
        from repaired timing for complete mappings, the raw penalized sum
        otherwise."""
        if self.is_complete():
            return mapping_return(self.cfg, self.g, self.state.assignment)
        return raw_return


@dataclass
class EpisodeResult:
    trajectory: list[StepRecord]
    episode_return: float
    canonical_return: float
    state: PlacementState
    complete: bool
    cycles: int | None


PolicyFn = Callable[[Observation, np.ndarray, np.random.Generator], tuple[int, float, float]]
"""(observation, mask, rng) -> (action index, log_prob, value estimate)."""


def run_episode(
    policy: PolicyFn,
    g: IRGraph,
    cfg: DeviceConfig,
    seed: int = 0,
    *,
    enforce_mask: bool = True,
    random_order: bool = False,
    pins: dict[int, tuple[int, int]] | None = None,
) -> EpisodeResult:
    """Roll one full episode, recording per-step data for training.

    ``pins`` forces specific nodes onto given tile-slices verbatim; pinned
    steps are not recorded in the trajectory.  A masked dead end stores a
    record with action NO_ACTION, since no sampling occurs there.
    """
    env = MappingEnv(g, cfg, seed, enforce_mask=enforce_mask, random_order=random_order)
    obs = env.reset()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    trajectory: list[StepRecord] = []
    total = 0.0
    while not env.done:
        node = env.current_node
        if pins and node in pins:
            result = env.step(pins[node])
            total += result.reward
            if result.observation is not None:
                obs = result.observation
            continue
        mask = env.sample_mask()
        if env.enforce_mask and not mask.any():
            result = env.step(0)
            trajectory.append(
                StepRecord(
                    ts_occupancy=obs.ts_occupancy,
                    current_node=node,
                    mask=mask,
                    action=NO_ACTION,
                    log_prob=0.0,
                    value=0.0,
                    reward=result.reward,
                )
            )
            total += result.reward
            break
        action, log_prob, value = policy(obs, mask, rng)
        result = env.step(int(action))
        trajectory.append(
            StepRecord(
                ts_occupancy=obs.ts_occupancy,
                current_node=node,
                mask=mask,
                action=int(action),
                log_prob=log_prob,
                value=value,
                reward=result.reward,
            )
        )
        total += result.reward
        if result.observation is not None:
            obs = result.observation

    final = env.final_state()
    complete = env.is_complete()
    cycles = total_cycles(cfg, final, g) if complete else None
    return EpisodeResult(
        trajectory=trajectory,
        episode_return=total,
        canonical_return=env.canonical_return(total),
        state=final,
        complete=complete,
        cycles=cycles,
    )
