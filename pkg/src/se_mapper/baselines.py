"""Non-learning reference optimizers: a greedy list scheduler, simulated
annealing over mask-valid reassignments, and an exhaustive brute-force
oracle for small instances."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .device import (
    DeviceConfig,
    PlacementState,
    earliest_fire,
    mapping_return,
    place_node,
    recompute_timing,
    total_cycles,
    valid_action_mask,
    within_reach,
)
from .ir_graph import IRGraph, topological_order


class GreedyDeadEndError(RuntimeError):
    """The greedy scheduler ran out of valid tile-slices."""


class InfeasibleInstanceError(RuntimeError):
    """No feasible complete assignment was found within the retry budget."""


class SearchBudgetError(RuntimeError):
    """Brute-force state space exceeds the configured limit."""


@dataclass(frozen=True)
class SAConfig:
    initial_temperature: float = 10.0
    cooling: float = 0.995
    steps: int = 2000
    seed: int = 0
    restarts: int = 10

    def __post_init__(self) -> None:
        if self.initial_temperature <= 0:
            raise ValueError("initial_temperature must be positive")
        if not 0 < self.cooling < 1:
            raise ValueError("cooling must lie in (0, 1)")


@dataclass(frozen=True)
class SearchLimits:
    max_states: int = 2_000_000


def greedy_schedule(g: IRGraph, cfg: DeviceConfig) -> PlacementState:
    """Topological list scheduling: each node takes the mask-valid slice
    with the earliest fire cycle, ties to the lowest tile then slot."""
    state = PlacementState.empty()
    for node in topological_order(g):
        mask = valid_action_mask(cfg, state, g, node)
        best: tuple[int, int, int] | None = None  # (fire, tile, slot)
        for idx in np.flatnonzero(mask):
            tile, slot = cfg.action_of(int(idx))
            fire = earliest_fire(cfg, state, g, node, tile, slot)
            if best is None or (fire, tile, slot) < best:
                best = (fire, tile, slot)
        if best is None:
            raise GreedyDeadEndError(f"no valid tile-slice for node {node}")
        state = place_node(cfg, state, g, node, best[1], best[2])
    return state


def _random_feasible(g: IRGraph, cfg: DeviceConfig, rng: np.random.Generator) -> PlacementState | None:
    state = PlacementState.empty()
    for node in topological_order(g):
        choices = np.flatnonzero(valid_action_mask(cfg, state, g, node))
        if choices.size == 0:
            return None
        tile, slot = cfg.action_of(int(rng.choice(choices)))
        state = place_node(cfg, state, g, node, tile, slot)
    return state


def score_assignment(
    cfg: DeviceConfig,
    g: IRGraph,
    assignment: Mapping[int, tuple[int, int]],
    *,
    objective: str = "cycles",
) -> float:
    """Objective value to minimize.  Partial assignments are penalized by
    lambda on top of the cycles accumulated so far."""
    if len(assignment) < g.num_nodes:
        placed_ready = 0
        if assignment:
            sub = {n: ts for n, ts in assignment.items()}
            # Time only what is placed; unplaced predecessors contribute 0.
            view = PlacementState.empty()
            for node in topological_order(g):
                if node not in sub:
                    continue
                tile, slot = sub[node]
                view = place_node(cfg, view, g, node, tile, slot, allow_unplaced_preds=True)
            placed_ready = max(view.ready_time.values(), default=0)
        return placed_ready + cfg.lambda_penalty
    if objective == "cycles":
        state = recompute_timing(cfg, g, assignment)
        return float(total_cycles(cfg, state, g))
    if objective == "return":
        return -mapping_return(cfg, g, assignment)
    raise ValueError(f"unknown objective {objective!r}")


def _reassign_candidates(
    cfg: DeviceConfig,
    g: IRGraph,
    assignment: Mapping[int, tuple[int, int]],
    node: int,
) -> list[tuple[int, int]]:
    """Mask-valid slices for moving one node while the rest stay put."""
    taken = {ts for n, ts in assignment.items() if n != node}
    partner_tiles = {assignment[p][0] for p in g.memory_partners(node) if p in assignment}
    start_tiles: set[int] = set()
    if node in g.sdf_start_nodes:
        start_tiles = {
            assignment[s][0] for s in g.sdf_start_nodes if s != node and s in assignment
        }
    sibling_tiles = {assignment[s][0] for s in g.siblings[node] if s in assignment}
    neighbor_tiles = [
        assignment[p][0] for p in (*g.predecessors[node], *g.successors[node]) if p in assignment
    ]
    out: list[tuple[int, int]] = []
    for tile in range(cfg.num_tiles):
        if partner_tiles and {tile} != partner_tiles:
            continue
        if tile in start_tiles or tile in sibling_tiles:
            continue
        if any(not within_reach(cfg, nt, tile) for nt in neighbor_tiles):
            continue
        for slot in range(cfg.ii):
            if (tile, slot) not in taken:
                out.append((tile, slot))
    return out


@dataclass
class SAResult:
    best_assignment: dict[int, tuple[int, int]]
    best_objective: float
    trace: list[dict[str, float]] = field(default_factory=list)


def simulated_annealing(
    g: IRGraph,
    cfg: DeviceConfig,
    sa_cfg: SAConfig,
    *,
    objective: str = "cycles",
) -> SAResult:
    """Greedy-initialized annealing: each step reassigns one random node to
    a random mask-valid slice and accepts worse states with probability
    exp(-delta / temperature) under geometric cooling."""
    rng = np.random.default_rng(sa_cfg.seed)
    try:
        state = greedy_schedule(g, cfg)
    except GreedyDeadEndError:
        state = None
        for _ in range(sa_cfg.restarts):
            state = _random_feasible(g, cfg, rng)
            if state is not None:
                break
        if state is None:
            raise InfeasibleInstanceError(
                f"no feasible initial assignment for {g.name!r} after {sa_cfg.restarts} restarts"
            )

    assignment = dict(state.assignment)
    current_obj = score_assignment(cfg, g, assignment, objective=objective)
    best_assignment = dict(assignment)
    best_obj = current_obj
    temperature = sa_cfg.initial_temperature
    trace: list[dict[str, float]] = [
        {"step": 0, "temperature": temperature, "objective": current_obj, "best": best_obj}
    ]

    for step in range(1, sa_cfg.steps + 1):
        node = int(rng.integers(0, g.num_nodes))
        candidates = _reassign_candidates(cfg, g, assignment, node)
        if candidates:
            tile, slot = candidates[int(rng.integers(0, len(candidates)))]
            proposal = dict(assignment)
            proposal[node] = (tile, slot)
            prop_obj = score_assignment(cfg, g, proposal, objective=objective)
            delta = prop_obj - current_obj
            if delta <= 0 or rng.random() < math.exp(-delta / temperature):
                assignment = proposal
                current_obj = prop_obj
                if current_obj < best_obj:
                    best_obj = current_obj
                    best_assignment = dict(assignment)
        temperature *= sa_cfg.cooling
        trace.append(
            {"step": step, "temperature": temperature, "objective": current_obj, "best": best_obj}
        )
    return SAResult(best_assignment=best_assignment, best_objective=best_obj, trace=trace)


def brute_force_optimal(
    g: IRGraph,
    cfg: DeviceConfig,
    limits: SearchLimits = SearchLimits(),
) -> tuple[int, dict[int, tuple[int, int]]]:
    """Exhaustive depth-first search over mask-valid placements in
    topological order; prunes branches whose partial latest-ready time
    already matches or exceeds the incumbent, which cannot change the
    optimum."""
    per_node_actions = cfg.num_tiles * cfg.ii
    estimate = per_node_actions ** g.num_nodes
    if estimate > limits.max_states:
        raise SearchBudgetError(
            f"estimated {estimate} states exceeds limit {limits.max_states}"
        )
    order = topological_order(g)
    best: dict[str, object] = {"cycles": None, "assignment": None}

    def dfs(depth: int, state: PlacementState, max_ready: int) -> None:
        if best["cycles"] is not None and max_ready >= best["cycles"]:
            return
        if depth == len(order):
            best["cycles"] = max_ready
            best["assignment"] = dict(state.assignment)
            return
        node = order[depth]
        mask = valid_action_mask(cfg, state, g, node)
        for idx in np.flatnonzero(mask):
            tile, slot = cfg.action_of(int(idx))
            nxt = place_node(cfg, state, g, node, tile, slot)
            dfs(depth + 1, nxt, max(max_ready, nxt.ready_time[node]))

    dfs(0, PlacementState.empty(), 0)
    if best["cycles"] is None:
        raise InfeasibleInstanceError(f"no feasible mapping exists for {g.name!r}")
    return int(best["cycles"]), dict(best["assignment"])  # type: ignore[arg-type]
