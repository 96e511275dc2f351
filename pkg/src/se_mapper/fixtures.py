"""Hand-built workload graphs used across tests, demos and benchmarks."""

from __future__ import annotations

from .ir_graph import IRGraph


def distance_calc() -> IRGraph:
    """Euclidean distance kernel (square root omitted): three coordinate
    deltas are squared and summed.  One SDF of eight instructions; each
    subtraction reads its coordinate pair from tile memory."""
    nodes = [
        (0, "sub", ["x", "x0"]),
        (1, "sub", ["y", "y0"]),
        (2, "sub", ["z", "z0"]),
        (3, "mul", []),
        (4, "mul", []),
        (5, "mul", []),
        (6, "add", []),
        (7, "add", []),
    ]
    edges = [(0, 3), (1, 4), (2, 5), (3, 6), (4, 6), (5, 7), (6, 7)]
    return IRGraph.build("distance-calc", nodes, edges)


def fft_like() -> IRGraph:
    """Approximation of an FFT inner-loop workload: four independent SDF
    components (index generation, butterfly upper and lower halves,
    store/combine), twenty nodes total.  Twiddle factors, address bases,
    accumulators and store pointers live in tile memory, pinning each pair
    of users to a shared tile; these colocation groups are what make the
    placement space sparse."""
    nodes = [
        # SDF 0: index/address generation, 5 nodes
        (0, "add", ["stride"]),
        (1, "shl", ["idx_base"]),
        (2, "add", ["stride"]),
        (3, "and", []),
        (4, "or", ["idx_base"]),
        # SDF 1: butterfly upper half, 6 nodes
        (5, "mov", []),
        (6, "mul", ["tw_re"]),
        (7, "mul", ["tw_im"]),
        (8, "sub", ["tw_im"]),
        (9, "add", []),
        (10, "mov", ["tw_re"]),
        # SDF 2: butterfly lower half, 5 nodes
        (11, "mov", []),
        (12, "mov", ["base2"]),
        (13, "mul", ["acc2"]),
        (14, "sub", ["base2"]),
        (15, "add", ["acc2"]),
        # SDF 3: store/combine, 4 nodes
        (16, "add", []),
        (17, "cmp", ["out_ptr"]),
        (18, "and", []),
        (19, "mov", ["out_ptr"]),
    ]
    edges = [
        # SDF 0: pipeline with one fan-out/fan-in pair
        (0, 1), (1, 2), (1, 3), (2, 4), (3, 4),
        # SDF 1: one source fans into two multiplies that feed sub and add
        (5, 6), (5, 7), (6, 8), (7, 8), (6, 9), (7, 9), (8, 10), (9, 10),
        # SDF 2: two sources merge, then a short tail
        (11, 13), (12, 13), (13, 14), (14, 15),
        # SDF 3: straight pipeline
        (16, 17), (17, 18), (18, 19),
    ]
    return IRGraph.build("fft-like", nodes, edges)
