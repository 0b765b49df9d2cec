"""Typed multi-scale patch graphs.

A graph covers one image tiled into a ``grid_rows x grid_cols`` grid. Every
grid location holds one node per magnification; nodes of the same scale are
joined to their 4-connected neighbors and nodes at the same location are
joined across scales. Edge types are ordered pairs of scales.

Node indices follow a fixed layout used by every dense feature matrix in the
package: scales in the order S5, S10, S20, and row-major within a scale.
"""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp


class Scale(enum.IntEnum):
    S5 = 5
    S10 = 10
    S20 = 20

    def __str__(self) -> str:
        return str(self.value)


SCALES = (Scale.S5, Scale.S10, Scale.S20)


@dataclass(frozen=True, order=True)
class Relation:
    """Directed edge type ``src -> dst`` between node scales."""

    src: Scale
    dst: Scale

    @property
    def is_neighbor(self) -> bool:
        return self.src == self.dst

    def __str__(self) -> str:
        return f"({self.src},{self.dst})"


ALL_RELATIONS = tuple(Relation(a, b) for a in SCALES for b in SCALES)
NEIGHBOR_RELATIONS = tuple(r for r in ALL_RELATIONS if r.is_neighbor)
SCALE_RELATIONS = tuple(r for r in ALL_RELATIONS if not r.is_neighbor)


@dataclass(frozen=True, order=True)
class NodeRef:
    scale: Scale
    row: int
    col: int


class GraphKind(enum.Enum):
    FULL = "Full"
    SINGLE_SCALE = "SingleScale"
    GLOBAL_EDGES = "GlobalEdges"
    NO_SCALE_EDGES = "NoScaleEdges"


@dataclass(frozen=True)
class GraphVariant:
    kind: GraphKind = GraphKind.FULL
    scale: Scale | None = None

    def __post_init__(self):
        if (self.kind is GraphKind.SINGLE_SCALE) != (self.scale is not None):
            raise ValueError("a scale is required for, and only for, SingleScale graphs")

    @classmethod
    def full(cls) -> GraphVariant:
        return cls(GraphKind.FULL)

    @classmethod
    def single(cls, scale: Scale | int) -> GraphVariant:
        return cls(GraphKind.SINGLE_SCALE, Scale(scale))

    @classmethod
    def global_edges(cls) -> GraphVariant:
        return cls(GraphKind.GLOBAL_EDGES)

    @classmethod
    def no_scale_edges(cls) -> GraphVariant:
        return cls(GraphKind.NO_SCALE_EDGES)

    @property
    def scales(self) -> tuple[Scale, ...]:
        if self.kind is GraphKind.SINGLE_SCALE:
            return (self.scale,)
        return SCALES

    def __str__(self) -> str:
        if self.kind is GraphKind.SINGLE_SCALE:
            return f"SingleScale({self.scale})"
        return self.kind.value


def _grid_neighbor_pairs(rows: int, cols: int) -> list[tuple[int, int]]:
    """Directed 4-connected (src, dst) pairs of row-major grid positions."""
    pairs = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    pairs.append((rr * cols + cc, i))
    return pairs


def _grid_global_pairs(rows: int, cols: int) -> list[tuple[int, int]]:
    """Pairs whose center distance is strictly below half the largest distance."""
    yy, xx = np.divmod(np.arange(rows * cols), cols)
    dist = np.hypot(yy[:, None] - yy[None, :], xx[:, None] - xx[None, :])
    threshold = 0.5 * dist.max()
    mask = dist < threshold
    np.fill_diagonal(mask, False)
    dst, src = np.nonzero(mask)
    return sorted(zip(src.tolist(), dst.tolist()), key=lambda p: (p[1], p[0]))


@dataclass(frozen=True, eq=False)
class MultiScaleGraph:
    """Immutable typed graph over one patch grid.

    ``edges`` maps a relation to an ``(E, 2)`` integer array of directed
    ``(src, dst)`` node indices, sorted by ``(dst, src)``.
    """

    grid_rows: int
    grid_cols: int
    variant: GraphVariant
    edges: dict[Relation, np.ndarray] = field(repr=False)

    @property
    def scales(self) -> tuple[Scale, ...]:
        return self.variant.scales

    @property
    def n_locations(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def n_nodes(self) -> int:
        return len(self.scales) * self.n_locations

    @property
    def relations(self) -> tuple[Relation, ...]:
        return tuple(self.edges)

    def node_index(self, node: NodeRef) -> int:
        if node.scale not in self.scales:
            raise IndexError(f"scale {node.scale} is not part of this {self.variant} graph")
        if not (0 <= node.row < self.grid_rows and 0 <= node.col < self.grid_cols):
            raise IndexError(
                f"node ({node.row},{node.col}) outside {self.grid_rows}x{self.grid_cols} grid"
            )
        s = self.scales.index(node.scale)
        return s * self.n_locations + node.row * self.grid_cols + node.col

    def node_ref(self, index: int) -> NodeRef:
        if not 0 <= index < self.n_nodes:
            raise IndexError(f"node index {index} out of range [0, {self.n_nodes})")
        s, loc = divmod(index, self.n_locations)
        r, c = divmod(loc, self.grid_cols)
        return NodeRef(self.scales[s], r, c)

    def nodes(self) -> list[NodeRef]:
        return [self.node_ref(i) for i in range(self.n_nodes)]

    def edge_list(self, relation: Relation) -> list[tuple[NodeRef, NodeRef]]:
        arr = self.edges.get(relation)
        if arr is None:
            return []
        return [(self.node_ref(int(s)), self.node_ref(int(d))) for s, d in arr]

    def n_edges(self, relations=None) -> int:
        relations = self.relations if relations is None else relations
        return sum(len(self.edges.get(r, ())) for r in relations)

    def scale_block(self, scale: Scale) -> slice:
        """Row slice of ``scale`` nodes in the node ordering."""
        s = self.scales.index(scale)
        return slice(s * self.n_locations, (s + 1) * self.n_locations)

    def aggregation(self, relation: Relation) -> sp.csr_matrix:
        """Row-normalized in-neighbor matrix: ``A[i, j] = 1/|N_r(i)|``."""
        dst, src, w = self.mean_coo((relation,))
        return sp.csr_matrix((w, (dst, src)), shape=(self.n_nodes, self.n_nodes))

    def union_aggregation(self, relations) -> sp.csr_matrix:
        """Relation-blind mean over in-neighbors from any of ``relations``."""
        dst, src, w = self.mean_coo(tuple(relations))
        return sp.csr_matrix((w, (dst, src)), shape=(self.n_nodes, self.n_nodes))

    def mean_coo(self, relations: tuple[Relation, ...]):
        """``(dst, src, weight)`` triplets of the in-neighbor mean over ``relations``."""
        cache = self._coo_cache
        if relations not in cache:
            arrs = [self.edges[r] for r in relations if r in self.edges]
            arr = np.concatenate(arrs) if arrs else np.zeros((0, 2), dtype=np.int64)
            src, dst = arr[:, 0], arr[:, 1]
            deg = np.bincount(dst, minlength=self.n_nodes).astype(np.float64)
            cache[relations] = (dst, src, 1.0 / deg[dst])
        return cache[relations]

    def local_coo(self, relation: Relation):
        """Like :meth:`mean_coo` for one relation, with indices local to each scale block."""
        key = ("local", relation)
        cache = self._coo_cache
        if key not in cache:
            dst, src, w = self.mean_coo((relation,))
            n_loc = self.n_locations
            cache[key] = (dst % n_loc, src % n_loc, w)
        return cache[key]

    @cached_property
    def _coo_cache(self) -> dict:
        return {}

    def to_records(self) -> list[dict]:
        """Debug export: one record per relation with ordered src/dst indices."""
        return [
            {
                "relation": [int(r.src), int(r.dst)],
                "src": self.edges[r][:, 0].tolist(),
                "dst": self.edges[r][:, 1].tolist(),
            }
            for r in self.relations
        ]

    def to_json(self) -> str:
        return json.dumps(
            {
                "grid_rows": self.grid_rows,
                "grid_cols": self.grid_cols,
                "variant": str(self.variant),
                "relations": self.to_records(),
            },
            separators=(",", ":"),
        )


def build_graph(grid_rows: int, grid_cols: int, variant: GraphVariant | None = None) -> MultiScaleGraph:
    if variant is None:
        variant = GraphVariant.full()
    if grid_rows < 1 or grid_cols < 1:
        raise ValueError(f"grid must be at least 1x1, got {grid_rows}x{grid_cols}")
    n_loc = grid_rows * grid_cols
    scales = variant.scales

    if variant.kind is GraphKind.GLOBAL_EDGES:
        local = _grid_global_pairs(grid_rows, grid_cols)
    else:
        local = sorted(_grid_neighbor_pairs(grid_rows, grid_cols), key=lambda p: (p[1], p[0]))
    local_arr = np.array(local, dtype=np.int64).reshape(-1, 2)

    edges: dict[Relation, np.ndarray] = {}
    for s_idx, s in enumerate(scales):
        edges[Relation(s, s)] = local_arr + s_idx * n_loc

    if len(scales) > 1 and variant.kind is not GraphKind.NO_SCALE_EDGES:
        loc = np.arange(n_loc, dtype=np.int64)
        for a, b in itertools.permutations(range(len(scales)), 2):
            edges[Relation(scales[a], scales[b])] = np.stack([loc + a * n_loc, loc + b * n_loc], axis=1)

    for arr in edges.values():
        arr.setflags(write=False)
    ordered = {r: edges[r] for r in ALL_RELATIONS if r in edges}
    return MultiScaleGraph(grid_rows, grid_cols, variant, ordered)


def neighbors(graph: MultiScaleGraph, node: NodeRef, relation: Relation) -> list[NodeRef]:
    """In-neighbors ``j`` with an edge ``j -> node`` of the given relation."""
    i = graph.node_index(node)
    arr = graph.edges.get(relation)
    if arr is None:
        return []
    src = np.sort(arr[arr[:, 1] == i, 0])
    return [graph.node_ref(int(j)) for j in src]


def khop(graph: MultiScaleGraph, node: NodeRef, relations, k: int) -> set[NodeRef]:
    """Nodes reachable from ``node`` in at most ``k`` hops along ``relations``."""
    if k < 0:
        raise ValueError("k must be non-negative")
    start = graph.node_index(node)
    out_adj: dict[int, list[int]] = {}
    for r in relations:
        for s, d in graph.edges.get(r, ()):
            out_adj.setdefault(int(s), []).append(int(d))
    seen = {start}
    frontier = {start}
    for _ in range(k):
        frontier = {d for s in frontier for d in out_adj.get(s, ())} - seen
        if not frontier:
            break
        seen |= frontier
    seen.discard(start)
    return {graph.node_ref(i) for i in seen}
