"""Region graphs, coefficient-level fusion graphs, and connected components.

Region ids and coefficient (flat) indices are 1-based throughout this module;
edges are stored canonically as (larger, smaller) pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


def _canonical_edges(edges) -> tuple[tuple[int, int], ...]:
    out = set()
    for a, b in edges:
        a, b = int(a), int(b)
        if a == b:
            raise ValueError(f"self-loop on vertex {a}")
        out.add((max(a, b), min(a, b)))
    return tuple(sorted(out))


@dataclass(frozen=True)
class RegionGraph:
    """Undirected adjacency graph over regions 1..m_regions."""

    m_regions: int
    edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.m_regions < 1:
            raise ValueError("m_regions must be >= 1")
        object.__setattr__(self, "edges", _canonical_edges(self.edges))
        for a, b in self.edges:
            if not (1 <= b < a <= self.m_regions):
                raise ValueError(f"edge ({a},{b}) out of range 1..{self.m_regions}")

    def neighbors(self, m: int) -> list[int]:
        out = [b for a, b in self.edges if a == m] + [a for a, b in self.edges if b == m]
        return sorted(out)

    def to_json(self) -> str:
        return json.dumps(
            {"m_regions": self.m_regions, "edges": [list(e) for e in self.edges]}
        )

    @classmethod
    def from_json(cls, text: str) -> "RegionGraph":
        obj = json.loads(text)
        return cls(int(obj["m_regions"]), tuple((int(a), int(b)) for a, b in obj["edges"]))


@dataclass(frozen=True)
class CoefficientGraph:
    """Coefficient-level penalty graph: one vertex per (region, variable) pair.

    Flat index of (region m, variable j) is (m-1)*p_tilde + j; an edge joins two
    flat indices iff they carry the same variable and their regions are adjacent.
    """

    m_regions: int
    p_tilde: int
    edges: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "edges", _canonical_edges(self.edges))

    @property
    def p_vertices(self) -> int:
        return self.m_regions * self.p_tilde

    def flat_index(self, m: int, j: int) -> int:
        if not (1 <= m <= self.m_regions and 1 <= j <= self.p_tilde):
            raise ValueError(f"(region {m}, variable {j}) out of range")
        return (m - 1) * self.p_tilde + j

    def region_of(self, flat: int) -> int:
        return (flat - 1) // self.p_tilde + 1

    def variable_of(self, flat: int) -> int:
        return (flat - 1) % self.p_tilde + 1


def build_coefficient_graph(rg: RegionGraph, p_tilde: int) -> CoefficientGraph:
    """Expand a region graph into the coefficient graph with p = M*p_tilde vertices."""
    if p_tilde < 1:
        raise ValueError("p_tilde must be >= 1")
    edges = []
    for m_hi, m_lo in rg.edges:
        for j in range(1, p_tilde + 1):
            edges.append(((m_hi - 1) * p_tilde + j, (m_lo - 1) * p_tilde + j))
    return CoefficientGraph(rg.m_regions, p_tilde, tuple(edges))


@dataclass(frozen=True)
class Partition:
    """Disjoint blocks covering a vertex subset; optional one value per block.

    Blocks are sorted by smallest member and each block's representative is its
    smallest vertex (fixes the arbitrary-representative choice deterministically).
    """

    blocks: tuple[tuple[int, ...], ...]
    values: tuple[float, ...] | None = None

    def __post_init__(self):
        seen = set()
        for b in self.blocks:
            for v in b:
                if v in seen:
                    raise ValueError(f"vertex {v} appears in two blocks")
                seen.add(v)
        if self.values is not None and len(self.values) != len(self.blocks):
            raise ValueError("one value per block required")

    @property
    def representatives(self) -> tuple[int, ...]:
        return tuple(b[0] for b in self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)


def connected_components(vertices, edges) -> Partition:
    """Connected components of (vertices, edges); isolated vertices are singletons."""
    verts = sorted(int(v) for v in vertices)
    vset = set(verts)
    parent = {v: v for v in verts}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for a, b in edges:
        a, b = int(a), int(b)
        if a not in vset or b not in vset:
            raise ValueError(f"edge ({a},{b}) has an endpoint outside the vertex set")
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    groups: dict[int, list[int]] = {}
    for v in verts:
        groups.setdefault(find(v), []).append(v)
    blocks = tuple(tuple(sorted(g)) for _, g in sorted(groups.items()))
    return Partition(blocks)


def path_graph(m: int) -> RegionGraph:
    return RegionGraph(m, tuple((i + 1, i) for i in range(1, m)))


def cycle_graph(m: int) -> RegionGraph:
    edges = [(i + 1, i) for i in range(1, m)] + [(m, 1)]
    return RegionGraph(m, tuple(edges))


def star_graph(m: int, center: int = 1) -> RegionGraph:
    edges = [(max(center, i), min(center, i)) for i in range(1, m + 1) if i != center]
    return RegionGraph(m, tuple(edges))


def lattice_graph(rows: int, cols: int) -> RegionGraph:
    """Grid graph, vertices numbered row-major starting at 1."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c + 1
            if c + 1 < cols:
                edges.append((v + 1, v))
            if r + 1 < rows:
                edges.append((v + cols, v))
    return RegionGraph(rows * cols, tuple(edges))


# Fixed simulation topologies for Cases 1-8 (M matches the experiment tables;
# the concrete shapes are configurable everywhere downstream).
def standard_topology(case_id: int) -> RegionGraph:
    if case_id == 1:
        return path_graph(3)
    if case_id == 2:
        return path_graph(5)
    if case_id == 3:
        return cycle_graph(5)
    if case_id == 4:
        return star_graph(5, center=1)
    if case_id == 5:
        return path_graph(50)
    if case_id in (6, 7, 8):
        return lattice_graph(6, 6)
    raise ValueError(f"unknown case id {case_id!r}")
