"""Streaming-engine device model: tiles, spoke slots, hop latencies,
modulo firing, placement constraints and cycle accounting.

Timing convention, used everywhere: a value produced by a node firing at
cycle c on tile t is usable on tile t' from cycle c + exec_latency +
|t - t'| - 1, i.e. the fabric transfer overlaps the producer's final
execution cycle.  A node assigned slot s may only fire on cycles c with
c mod ii == s.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .ir_graph import IRGraph, topological_order


class InvalidPlacementError(ValueError):
    """Placement rejected; message names the violated constraint."""


class IncompletePlacementError(ValueError):
    """An operation requiring a complete mapping saw unplaced nodes."""


@dataclass(frozen=True)
class DeviceConfig:
    num_tiles: int = 16
    num_slots: int = 6
    ii: int = 3
    exec_latency: int = 3
    reach_limit: int | None = None
    lambda_penalty: float = 100.0

    def __post_init__(self) -> None:
        if self.num_tiles < 1:
            raise ValueError("num_tiles must be >= 1")
        if not (1 <= self.ii <= self.num_slots):
            raise ValueError(f"ii must satisfy 1 <= ii <= num_slots, got ii={self.ii}")
        if self.exec_latency < 1:
            raise ValueError("exec_latency must be >= 1")
        if self.lambda_penalty <= 0:
            raise ValueError("lambda_penalty must be positive")

    @property
    def action_dim(self) -> int:
        return self.num_tiles * self.num_slots

    def action_index(self, tile: int, slot: int) -> int:
        return tile * self.num_slots + slot

    def action_of(self, index: int) -> tuple[int, int]:
        return divmod(index, self.num_slots)


@dataclass(frozen=True)
class PlacementState:
    """Immutable partial mapping; place_node returns a new state."""

    assignment: dict[int, tuple[int, int]] = field(default_factory=dict)
    fire_cycle: dict[int, int] = field(default_factory=dict)
    ready_time: dict[int, int] = field(default_factory=dict)
    occupied: frozenset[tuple[int, int]] = frozenset()

    @classmethod
    def empty(cls) -> "PlacementState":
        return cls()

    def tile_of(self, node: int) -> int:
        return self.assignment[node][0]

    def is_placed(self, node: int) -> bool:
        return node in self.assignment


def hop_latency(cfg: DeviceConfig, src_tile: int, dst_tile: int) -> int:
    """Fabric transfer cost in cycles: the tile distance, 0 for the
    same-tile feedback path."""
    for t in (src_tile, dst_tile):
        if not 0 <= t < cfg.num_tiles:
            raise ValueError(f"tile {t} out of range 0..{cfg.num_tiles - 1}")
    return abs(dst_tile - src_tile)


def within_reach(cfg: DeviceConfig, src_tile: int, dst_tile: int) -> bool:
    """False when a configured reach limit forbids this tile pair."""
    if cfg.reach_limit is None:
        return True
    return abs(dst_tile - src_tile) <= cfg.reach_limit


def earliest_fire(
    cfg: DeviceConfig,
    state: PlacementState,
    g: IRGraph,
    node: int,
    tile: int,
    slot: int,
) -> int:
    """Earliest legal fire cycle for node at (tile, slot) given its placed
    predecessors.  Raises if any predecessor is unplaced."""
    for p in g.predecessors[node]:
        if not state.is_placed(p):
            raise IncompletePlacementError(
                f"predecessor {p} of node {node} is not placed"
            )
    return _earliest_fire_partial(cfg, state, g, node, tile, slot)


def _earliest_fire_partial(
    cfg: DeviceConfig,
    state: PlacementState,
    g: IRGraph,
    node: int,
    tile: int,
    slot: int,
) -> int:
    """Like earliest_fire but ignores unplaced predecessors (arrival 0)."""
    if not 0 <= slot < cfg.ii:
        raise ValueError(f"slot {slot} out of range 0..{cfg.ii - 1}")
    bound = 0
    for p in g.predecessors[node]:
        if state.is_placed(p):
            arrival = (
                state.fire_cycle[p]
                + cfg.exec_latency
                + hop_latency(cfg, state.tile_of(p), tile)
                - 1
            )
            bound = max(bound, arrival)
    remainder = bound % cfg.ii
    return bound + (slot - remainder) % cfg.ii


@dataclass(frozen=True)
class _PlacementContext:
    """Per-(state, node) constraint summary shared by mask and placement."""

    required_tiles: frozenset[int] | None  # None: unconstrained by tile memory
    start_tiles: frozenset[int]
    sibling_tiles: frozenset[int]
    pred_tiles: tuple[int, ...]


def _placement_context(state: PlacementState, g: IRGraph, node: int) -> _PlacementContext:
    required: set[int] | None = None
    partner_tiles = {
        state.tile_of(p) for p in g.memory_partners(node) if state.is_placed(p)
    }
    if partner_tiles:
        # All variable-sharing partners must sit on one tile with this node;
        # disagreeing partners leave no legal tile at all.
        required = partner_tiles if len(partner_tiles) == 1 else set()

    start_tiles: set[int] = set()
    if node in g.sdf_start_nodes:
        start_tiles = {
            state.tile_of(s) for s in g.sdf_start_nodes if s != node and state.is_placed(s)
        }
    sibling_tiles = {
        state.tile_of(s) for s in g.siblings[node] if state.is_placed(s)
    }
    pred_tiles = tuple(
        state.tile_of(p) for p in g.predecessors[node] if state.is_placed(p)
    )
    return _PlacementContext(
        required_tiles=frozenset(required) if required is not None else None,
        start_tiles=frozenset(start_tiles),
        sibling_tiles=frozenset(sibling_tiles),
        pred_tiles=pred_tiles,
    )


def _rejection_reason(
    cfg: DeviceConfig,
    state: PlacementState,
    ctx: _PlacementContext,
    tile: int,
    slot: int,
) -> str | None:
    if not 0 <= tile < cfg.num_tiles:
        return f"tile {tile} not on the device"
    if not 0 <= slot < cfg.num_slots or slot >= cfg.ii:
        return f"slot out of range: slot {slot} >= ii {cfg.ii}"
    if (tile, slot) in state.occupied:
        return f"tile-slice ({tile},{slot}) already occupied"
    if ctx.required_tiles is not None and tile not in ctx.required_tiles:
        return (
            f"constraint 1: shared tile-memory variables require tile(s) "
            f"{sorted(ctx.required_tiles) or 'none'}"
        )
    if tile in ctx.start_tiles:
        return f"constraint 2: tile {tile} already hosts an SDF-start node"
    if tile in ctx.sibling_tiles:
        return f"constraint 3: tile {tile} already hosts a sibling node"
    for pt in ctx.pred_tiles:
        if not within_reach(cfg, pt, tile):
            return (
                f"predecessor on tile {pt} is beyond reach limit "
                f"{cfg.reach_limit} of tile {tile}"
            )
    return None


def valid_action_mask(
    cfg: DeviceConfig,
    state: PlacementState,
    g: IRGraph,
    node: int,
) -> np.ndarray:
    """Binary vector over tile-slices; 1 where placing node violates nothing.

    An all-zero mask is a legal outcome (dead end, handled by the reward).
    """
    ctx = _placement_context(state, g, node)
    mask = np.zeros(cfg.action_dim, dtype=np.int8)
    for tile in range(cfg.num_tiles):
        for slot in range(cfg.ii):
            if _rejection_reason(cfg, state, ctx, tile, slot) is None:
                mask[cfg.action_index(tile, slot)] = 1
    return mask


def placement_reason(
    cfg: DeviceConfig,
    state: PlacementState,
    g: IRGraph,
    node: int,
    tile: int,
    slot: int,
) -> str | None:
    """Why (tile, slot) is invalid for node, or None when it is allowed."""
    return _rejection_reason(cfg, state, _placement_context(state, g, node), tile, slot)


def place_node(
    cfg: DeviceConfig,
    state: PlacementState,
    g: IRGraph,
    node: int,
    tile: int,
    slot: int,
    *,
    allow_unplaced_preds: bool = False,
) -> PlacementState:
    """Extend the mapping with node at (tile, slot); the input state is
    unchanged.  Rejects masked-out placements, naming the constraint."""
    if state.is_placed(node):
        raise InvalidPlacementError(f"node {node} is already placed")
    reason = placement_reason(cfg, state, g, node, tile, slot)
    if reason is not None:
        raise InvalidPlacementError(f"invalid placement of node {node}: {reason}")
    if allow_unplaced_preds:
        fire = _earliest_fire_partial(cfg, state, g, node, tile, slot)
    else:
        fire = earliest_fire(cfg, state, g, node, tile, slot)
    assignment = dict(state.assignment)
    fire_cycle = dict(state.fire_cycle)
    ready_time = dict(state.ready_time)
    assignment[node] = (tile, slot)
    fire_cycle[node] = fire
    ready_time[node] = fire + cfg.exec_latency
    return PlacementState(
        assignment=assignment,
        fire_cycle=fire_cycle,
        ready_time=ready_time,
        occupied=state.occupied | {(tile, slot)},
    )


def total_cycles(cfg: DeviceConfig, state: PlacementState, g: IRGraph) -> int:
    """Clock cycles to run all nodes: the latest ready time."""
    missing = [n.id for n in g.nodes if not state.is_placed(n.id)]
    if missing:
        raise IncompletePlacementError(f"unplaced nodes: {missing}")
    return max(state.ready_time[n.id] for n in g.nodes)


def recompute_timing(
    cfg: DeviceConfig,
    g: IRGraph,
    assignment: Mapping[int, tuple[int, int]],
) -> PlacementState:
    """Fire/ready times implied by a complete assignment, ignoring any
    stored times.  Used to repair out-of-order placements and to score
    externally produced mappings."""
    missing = [n.id for n in g.nodes if n.id not in assignment]
    if missing:
        raise IncompletePlacementError(f"unplaced nodes: {missing}")
    done: dict[int, tuple[int, int]] = {}
    fire_cycle: dict[int, int] = {}
    ready_time: dict[int, int] = {}
    view = PlacementState(assignment=done, fire_cycle=fire_cycle, ready_time=ready_time)
    for node in topological_order(g):
        tile, slot = assignment[node]
        fire = _earliest_fire_partial(cfg, view, g, node, tile, slot)
        done[node] = (tile, slot)
        fire_cycle[node] = fire
        ready_time[node] = fire + cfg.exec_latency
    return PlacementState(
        assignment=dict(assignment),
        fire_cycle=dict(fire_cycle),
        ready_time=dict(ready_time),
        occupied=frozenset(assignment.values()),
    )


def mapping_return(
    cfg: DeviceConfig,
    g: IRGraph,
    assignment: Mapping[int, tuple[int, int]],
) -> float:
    """Episode return a mapping would earn: for each node, minus the gap
    between its ready time and its latest predecessor's (0 for sources)."""
    state = recompute_timing(cfg, g, assignment)
    total = 0.0
    for node in range(g.num_nodes):
        preds = g.predecessors[node]
        t_pred = max((state.ready_time[p] for p in preds), default=0)
        total -= state.ready_time[node] - t_pred
    return total


@dataclass
class MappingReport:
    violations: list[str]
    fire_cycle: dict[int, int]
    ready_time: dict[int, int]
    total_cycles: int | None

    @property
    def ok(self) -> bool:
        return not self.violations


def mapping_to_json(
    cfg: DeviceConfig,
    g: IRGraph,
    state: PlacementState,
    *,
    dead_end: bool = False,
) -> str:
    """Canonical mapping document; placements may be partial on dead ends."""
    cycles = None
    if all(state.is_placed(n.id) for n in g.nodes):
        cycles = total_cycles(cfg, state, g)
    doc = {
        "device": {
            "num_tiles": cfg.num_tiles,
            "num_slots": cfg.num_slots,
            "ii": cfg.ii,
            "exec_latency": cfg.exec_latency,
        },
        "placements": {
            str(node): {
                "tile": tile,
                "slot": slot,
                "fire_cycle": state.fire_cycle[node],
            }
            for node, (tile, slot) in state.assignment.items()
        },
        "total_cycles": cycles,
        "dead_end": dead_end,
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def parse_mapping(text: str) -> tuple[DeviceConfig, dict[int, dict[str, int]]]:
    doc = json.loads(text)
    dev = doc["device"]
    cfg = DeviceConfig(
        num_tiles=int(dev["num_tiles"]),
        num_slots=int(dev["num_slots"]),
        ii=int(dev["ii"]),
        exec_latency=int(dev["exec_latency"]),
    )
    placements = {
        int(node): {k: int(v) for k, v in entry.items()}
        for node, entry in doc["placements"].items()
    }
    return cfg, placements


def validate_mapping(
    cfg: DeviceConfig,
    g: IRGraph,
    placements: Mapping[int, Mapping[str, int]],
) -> MappingReport:
    """Replay a mapping in topological order, re-checking every constraint
    and recomputing fire cycles.  Returns a report instead of raising."""
    violations: list[str] = []
    unknown = sorted(set(placements) - {n.id for n in g.nodes})
    if unknown:
        violations.append(f"placements reference unknown nodes: {unknown}")
    missing = sorted(n.id for n in g.nodes if n.id not in placements)
    if missing:
        violations.append(f"unplaced nodes: {missing}")
    if violations:
        return MappingReport(violations, {}, {}, None)

    assignment: dict[int, tuple[int, int]] = {}
    fire_cycle: dict[int, int] = {}
    ready_time: dict[int, int] = {}
    view = PlacementState(assignment=assignment, fire_cycle=fire_cycle, ready_time=ready_time)
    for node in topological_order(g):
        entry = placements[node]
        tile, slot = entry["tile"], entry["slot"]
        occupied = (tile, slot) in assignment.values()
        snapshot = PlacementState(
            assignment=assignment,
            fire_cycle=fire_cycle,
            ready_time=ready_time,
            occupied=frozenset(assignment.values()),
        )
        reason = _rejection_reason(
            cfg, snapshot, _placement_context(view, g, node), tile, slot
        )
        if reason is not None:
            violations.append(f"node {node}: {reason}")
        if not (0 <= slot < cfg.ii and 0 <= tile < cfg.num_tiles) or occupied:
            # Untimeable placement; descendants are timed from what exists.
            continue
        fire = _earliest_fire_partial(cfg, view, g, node, tile, slot)
        assignment[node] = (tile, slot)
        fire_cycle[node] = fire
        ready_time[node] = fire + cfg.exec_latency
        declared = entry.get("fire_cycle")
        if declared is not None and declared != fire:
            violations.append(
                f"node {node}: fire-cycle inconsistency: declared {declared}, "
                f"earliest legal is {fire}"
            )
    cycles = None
    if not violations and len(assignment) == g.num_nodes:
        cycles = max(ready_time.values())
    return MappingReport(violations, dict(fire_cycle), dict(ready_time), cycles)
