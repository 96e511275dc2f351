"""Instruction-graph representation, validation, features and workload generation.

A program is a DAG of instruction nodes.  Each weakly connected component is
one synchronous-dataflow (SDF) subgraph; nodes carry the tile-memory variable
names they need resident during execution.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

NODE_FEATURE_NAMES = (
    "in_degree",
    "out_degree",
    "topological_depth",
    "is_sdf_start",
    "sibling_count",
    "memory_group_code",
)


class IRFormatError(ValueError):
    """Malformed IR document; message carries the JSON path of the offender."""


class CycleError(ValueError):
    """Raised when a directed cycle prevents topological ordering."""


@dataclass(frozen=True)
class InstructionNode:
    id: int
    opcode: str
    sdf_id: int
    tile_memory_vars: frozenset[str] = frozenset()


@dataclass(frozen=True)
class IRGraph:
    name: str
    nodes: tuple[InstructionNode, ...]
    edges: tuple[tuple[int, int], ...]

    @classmethod
    def build(
        cls,
        name: str,
        nodes: Sequence[tuple[int, str, Iterable[str]]],
        edges: Sequence[tuple[int, int]],
    ) -> "IRGraph":
        """Construct a graph from (id, opcode, vars) triples, deriving sdf ids.

        The component labels are assigned in order of each component's
        smallest node id, so they are stable under re-serialization.
        """
        ids = [n[0] for n in nodes]
        comp = _weak_components(ids, edges)
        built = tuple(
            InstructionNode(
                id=nid,
                opcode=opcode,
                sdf_id=comp.get(nid, 0),
                tile_memory_vars=frozenset(tile_vars),
            )
            for nid, opcode, tile_vars in sorted(nodes, key=lambda t: t[0])
        )
        return cls(
            name=name, nodes=built, edges=tuple(sorted((int(u), int(v)) for u, v in edges))
        )

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @cached_property
    def predecessors(self) -> tuple[tuple[int, ...], ...]:
        preds: list[list[int]] = [[] for _ in self.nodes]
        for u, v in self.edges:
            if 0 <= v < len(preds) and 0 <= u < len(preds):
                preds[v].append(u)
        return tuple(tuple(sorted(p)) for p in preds)

    @cached_property
    def successors(self) -> tuple[tuple[int, ...], ...]:
        succs: list[list[int]] = [[] for _ in self.nodes]
        for u, v in self.edges:
            if 0 <= u < len(succs) and 0 <= v < len(succs):
                succs[u].append(v)
        return tuple(tuple(sorted(s)) for s in succs)

    @cached_property
    def siblings(self) -> tuple[frozenset[int], ...]:
        """For each node, the set of distinct other nodes sharing a direct predecessor."""
        sib: list[set[int]] = [set() for _ in self.nodes]
        for children in self.successors:
            for a in children:
                for b in children:
                    if a != b:
                        sib[a].add(b)
        return tuple(frozenset(s) for s in sib)

    @cached_property
    def sdf_start_nodes(self) -> frozenset[int]:
        """In-degree-0 nodes; each one can initiate work for its SDF."""
        return frozenset(n.id for n, p in zip(self.nodes, self.predecessors) if not p)

    @cached_property
    def memory_groups(self) -> tuple[int, ...]:
        """Colocation group code per node: transitive closure of the
        shares-a-variable relation, 0 for nodes without tile-memory vars.
        Groups are numbered from 1 in order of their smallest member id."""
        parent = list(range(self.num_nodes))

        def find(x: int) -> int:
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        var_owner: dict[str, int] = {}
        for node in self.nodes:
            for var in node.tile_memory_vars:
                if var in var_owner:
                    ra, rb = find(var_owner[var]), find(node.id)
                    if ra != rb:
                        parent[rb] = ra
                else:
                    var_owner[var] = node.id

        codes = [0] * self.num_nodes
        next_code = 1
        root_code: dict[int, int] = {}
        for node in self.nodes:
            if not node.tile_memory_vars:
                continue
            root = find(node.id)
            if root not in root_code:
                root_code[root] = next_code
                next_code += 1
            codes[node.id] = root_code[root]
        return tuple(codes)

    def memory_partners(self, node_id: int) -> frozenset[int]:
        """Other nodes directly sharing at least one tile-memory var with node_id."""
        mine = self.nodes[node_id].tile_memory_vars
        if not mine:
            return frozenset()
        return frozenset(
            n.id for n in self.nodes if n.id != node_id and mine & n.tile_memory_vars
        )


def _weak_components(ids: Sequence[int], edges: Sequence[tuple[int, int]]) -> dict[int, int]:
    parent = {i: i for i in ids}

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v in edges:
        if u in parent and v in parent:
            ru, rv = find(u), find(v)
            if ru != rv:
                parent[rv] = ru
    label: dict[int, int] = {}
    comp: dict[int, int] = {}
    for i in sorted(ids):
        root = find(i)
        if root not in label:
            label[root] = len(label)
        comp[i] = label[root]
    return comp


def validate_graph(g: IRGraph) -> list[str]:
    """Return a list of human-readable invariant violations; empty means valid.

    Beyond structural well-formedness, flags colocation conflicts: nodes
    forced onto one tile by shared tile-memory vars must not contain a
    sibling pair or two SDF-start nodes, or no placement can satisfy all
    hardware constraints at once.
    """
    violations: list[str] = []
    n = g.num_nodes
    ids = [node.id for node in g.nodes]
    if sorted(ids) != list(range(n)):
        violations.append(f"node ids must be the contiguous range 0..{n - 1}, got {sorted(ids)}")
        return violations

    seen_edges: set[tuple[int, int]] = set()
    for k, (u, v) in enumerate(g.edges):
        if u == v:
            violations.append(f"edges[{k}]: self-edge ({u},{v})")
        if not (0 <= u < n) or not (0 <= v < n):
            violations.append(f"edges[{k}]: endpoint out of range ({u},{v})")
            continue
        if (u, v) in seen_edges:
            violations.append(f"edges[{k}]: duplicate edge ({u},{v})")
        seen_edges.add((u, v))

    if violations:
        return violations

    try:
        topological_order(g)
    except CycleError as exc:
        violations.append(str(exc))

    comp = _weak_components(ids, g.edges)
    for node in g.nodes:
        if node.sdf_id != comp[node.id]:
            violations.append(
                f"nodes[{node.id}]: sdf_id {node.sdf_id} does not match component {comp[node.id]}"
            )

    groups: dict[int, list[int]] = {}
    for nid, code in enumerate(g.memory_groups):
        if code:
            groups.setdefault(code, []).append(nid)
    starts = g.sdf_start_nodes
    for code, members in sorted(groups.items()):
        for i, a in enumerate(members):
            for b in members[i + 1 :]:
                if b in g.siblings[a]:
                    violations.append(
                        f"colocation conflict: nodes {a} and {b} share tile-memory "
                        f"group {code} but are siblings"
                    )
                if a in starts and b in starts:
                    violations.append(
                        f"colocation conflict: nodes {a} and {b} share tile-memory "
                        f"group {code} but both start an SDF"
                    )
    return violations


def topological_order(g: IRGraph) -> list[int]:
    """Kahn's algorithm with ascending-id tie-break for determinism."""
    import heapq

    indeg = [len(p) for p in g.predecessors]
    ready = [i for i, d in enumerate(indeg) if d == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        u = heapq.heappop(ready)
        order.append(u)
        for v in g.successors[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(ready, v)
    if len(order) != g.num_nodes:
        cycle = _find_cycle(g, set(order))
        raise CycleError(f"graph contains a directed cycle: {' -> '.join(map(str, cycle))}")
    return order


def _find_cycle(g: IRGraph, done: set[int]) -> list[int]:
    # Walk predecessors among unresolved nodes until one repeats.
    start = min(i for i in range(g.num_nodes) if i not in done)
    seen: list[int] = []
    cur = start
    while cur not in seen:
        seen.append(cur)
        cur = next(p for p in g.predecessors[cur] if p not in done)
    return seen[seen.index(cur) :] + [cur]


def node_features(g: IRGraph) -> np.ndarray:
    """Static per-node feature matrix of shape (num_nodes, 6).

    Columns: in degree, out degree, longest-path depth from any source,
    SDF-start flag, sibling count, tile-memory colocation group code.
    """
    n = g.num_nodes
    order = topological_order(g)
    depth = [0] * n
    for u in order:
        for v in g.successors[u]:
            depth[v] = max(depth[v], depth[u] + 1)
    starts = g.sdf_start_nodes
    groups = g.memory_groups
    feats = np.zeros((n, len(NODE_FEATURE_NAMES)), dtype=np.float64)
    for i in range(n):
        feats[i] = (
            len(g.predecessors[i]),
            len(g.successors[i]),
            depth[i],
            1.0 if i in starts else 0.0,
            len(g.siblings[i]),
            groups[i],
        )
    return feats


@dataclass(frozen=True)
class GraphGenParams:
    """Knobs for the layered random-workload generator."""

    num_layers: int | None = None  # default: round(sqrt(num_nodes))
    edge_prob: float = 0.5
    mem_frac: float = 0.2
    mem_group_size: int = 2
    max_retries: int = 20


def random_graph(num_nodes: int, seed: int, params: GraphGenParams = GraphGenParams()) -> IRGraph:
    """Seeded layered-DAG generator.

    Nodes are partitioned into roughly sqrt(num_nodes) layers and edges run
    only from earlier to later layers, mimicking pipelined dataflow shapes.
    A fraction of nodes receives shared tile-memory variables, skipping any
    grouping that would create a colocation conflict.
    """
    if num_nodes < 1:
        raise ValueError("num_nodes must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(num_nodes,)))

    n_layers = params.num_layers or max(1, round(math.sqrt(num_nodes)))
    n_layers = min(n_layers, num_nodes)
    layer_of = list(range(n_layers)) + [int(rng.integers(0, n_layers)) for _ in range(num_nodes - n_layers)]
    # Node ids ascend with layer so edges always point id-upward.
    order = sorted(range(num_nodes), key=lambda i: layer_of[i])
    layers: list[list[int]] = [[] for _ in range(n_layers)]
    for new_id, old in enumerate(order):
        layers[layer_of[old]].append(new_id)

    opcodes = ("add", "sub", "mul", "shl", "cmp", "mov")
    edges: list[tuple[int, int]] = []
    for li in range(1, n_layers):
        for v in layers[li]:
            attached = False
            for u in layers[li - 1]:
                if rng.random() < params.edge_prob:
                    edges.append((u, v))
                    attached = True
            if not attached:
                u = int(rng.choice(layers[li - 1]))
                edges.append((u, v))

    nodes = [(i, opcodes[int(rng.integers(0, len(opcodes)))], []) for i in range(num_nodes)]
    g = IRGraph.build("", nodes, edges)

    n_groups = int(round(params.mem_frac * num_nodes / max(params.mem_group_size, 1)))
    var_sets: dict[int, set[str]] = {}
    for gi in range(n_groups):
        placed = _try_memory_group(g, rng, params, var_name=f"m{gi}", taken=var_sets)
        if not placed:
            log.warning(
                "random_graph(seed=%d): dropped tile-memory group %d after %d retries",
                seed, gi, params.max_retries,
            )

    final_nodes = [
        (i, nodes[i][1], sorted(var_sets.get(i, set()))) for i in range(num_nodes)
    ]
    return IRGraph.build(f"random-n{num_nodes}-s{seed}", final_nodes, edges)


def _try_memory_group(
    g: IRGraph,
    rng: np.random.Generator,
    params: GraphGenParams,
    var_name: str,
    taken: dict[int, set[str]],
) -> bool:
    starts = g.sdf_start_nodes
    size = min(params.mem_group_size, g.num_nodes)
    for _ in range(params.max_retries):
        members = [int(i) for i in rng.choice(g.num_nodes, size=size, replace=False)]
        ok = True
        for i, a in enumerate(members):
            for b in members[i + 1 :]:
                if b in g.siblings[a] or (a in starts and b in starts):
                    ok = False
        # Keep existing groups disjoint so conflicts cannot arise transitively.
        if ok and not any(m in taken for m in members):
            for m in members:
                taken.setdefault(m, set()).add(var_name)
            return True
    return False


_TOP_KEYS = {"name", "nodes", "edges"}
_NODE_KEYS = {"id", "opcode", "tile_memory_vars"}


def parse_ir(text: str) -> IRGraph:
    """Parse the canonical IR JSON document; errors carry the JSON path."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise IRFormatError(f"$: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise IRFormatError("$: document must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise IRFormatError(f"$: unknown key {sorted(unknown)[0]!r}")
    for key in _TOP_KEYS:
        if key not in doc:
            raise IRFormatError(f"$: missing key {key!r}")
    if not isinstance(doc["name"], str):
        raise IRFormatError("$.name: must be a string")
    if not isinstance(doc["nodes"], list) or not isinstance(doc["edges"], list):
        raise IRFormatError("$.nodes and $.edges must be arrays")

    nodes: list[tuple[int, str, list[str]]] = []
    for i, item in enumerate(doc["nodes"]):
        if not isinstance(item, dict):
            raise IRFormatError(f"$.nodes[{i}]: must be an object")
        unknown = set(item) - _NODE_KEYS
        if unknown:
            raise IRFormatError(f"$.nodes[{i}]: unknown key {sorted(unknown)[0]!r}")
        missing = _NODE_KEYS - set(item)
        if missing:
            raise IRFormatError(f"$.nodes[{i}]: missing key {sorted(missing)[0]!r}")
        if not isinstance(item["id"], int) or isinstance(item["id"], bool):
            raise IRFormatError(f"$.nodes[{i}].id: must be an integer")
        if not isinstance(item["opcode"], str):
            raise IRFormatError(f"$.nodes[{i}].opcode: must be a string")
        tvars = item["tile_memory_vars"]
        if not isinstance(tvars, list) or not all(isinstance(v, str) for v in tvars):
            raise IRFormatError(f"$.nodes[{i}].tile_memory_vars: must be an array of strings")
        nodes.append((item["id"], item["opcode"], tvars))

    valid_ids = {nid for nid, _, _ in nodes}
    edges: list[tuple[int, int]] = []
    for k, pair in enumerate(doc["edges"]):
        if (
            not isinstance(pair, list)
            or len(pair) != 2
            or not all(isinstance(x, int) and not isinstance(x, bool) for x in pair)
        ):
            raise IRFormatError(f"$.edges[{k}]: must be a pair of integers")
        u, v = pair
        if u not in valid_ids or v not in valid_ids:
            raise IRFormatError(f"$.edges[{k}]: references unknown node id {u if u not in valid_ids else v}")
        edges.append((u, v))

    g = IRGraph.build(doc["name"], nodes, edges)
    violations = validate_graph(g)
    if violations:
        raise IRFormatError("$: invariant violations: " + "; ".join(violations))
    return g


def serialize_ir(g: IRGraph) -> str:
    """Canonical JSON serialization: sorted keys, id-sorted nodes, sorted edges."""
    doc = {
        "name": g.name,
        "nodes": [
            {
                "id": node.id,
                "opcode": node.opcode,
                "tile_memory_vars": sorted(node.tile_memory_vars),
            }
            for node in sorted(g.nodes, key=lambda n: n.id)
        ],
        "edges": [list(e) for e in sorted(g.edges)],
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
