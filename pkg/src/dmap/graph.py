"""Areal adjacency graphs: construction from edge lists or polygon vertex rings."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

__all__ = [
    "ArealGraph",
    "load_edge_list",
    "derive_queen_adjacency",
    "connected_components",
]


class GraphError(ValueError):
    """Invalid graph input (self-loops, unknown units, malformed records)."""


@dataclass(frozen=True)
class ArealGraph:
    """Undirected contiguity graph over a fixed, ordered set of areal units.

    Unit order is fixed at construction (lexicographic by identifier for the
    file loaders) and is the index space for every downstream matrix.
    """

    unit_ids: tuple[str, ...]
    edges: frozenset[tuple[int, int]]  # each pair (i, j) stored with i < j
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.unit_ids)) != len(self.unit_ids):
            raise GraphError("duplicate unit identifiers")
        n = len(self.unit_ids)
        for i, j in self.edges:
            if i == j:
                raise GraphError(f"self-loop on unit index {i}")
            if not (0 <= i < j < n):
                raise GraphError(f"edge ({i}, {j}) out of range for n={n}")
        object.__setattr__(self, "_index", {u: k for k, u in enumerate(self.unit_ids)})

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    def index_of(self, unit_id: str) -> int:
        try:
            return self._index[unit_id]
        except KeyError:
            raise GraphError(f"unknown unit identifier {unit_id!r}") from None

    def neighbors(self, i: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return sorted(out)

    def degree(self, i: int) -> int:
        return sum(1 for a, b in self.edges if a == i or b == i)


def _normalize_edge(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


def load_edge_list(source, universe=None) -> ArealGraph:
    """Build a graph from a two-column CSV of unit identifiers.

    ``source`` is a file path, file object, or CSV text with header
    ``src,dst``.  Undirected duplicates collapse to one edge.  When
    ``universe`` (an iterable of unit ids) is given, every endpoint must
    belong to it and the graph covers the whole universe, isolated units
    included; otherwise units are exactly those seen in the file.
    """
    if hasattr(source, "read"):
        fh = source
        close = False
    elif isinstance(source, str) and "\n" in source:
        fh = io.StringIO(source)
        close = False
    else:
        fh = open(source, "r", encoding="utf-8", newline="")
        close = True
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["src", "dst"]:
            raise GraphError("edge list must start with header 'src,dst'")
        known = None if universe is None else set(universe)
        pairs = []
        for rownum, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 2:
                raise GraphError(f"row {rownum}: expected two columns")
            a, b = row[0].strip(), row[1].strip()
            if a == b:
                raise GraphError(f"row {rownum}: self-loop on unit {a!r}")
            if known is not None:
                for u in (a, b):
                    if u not in known:
                        raise GraphError(f"row {rownum}: unknown unit identifier {u!r}")
            pairs.append((a, b))
    finally:
        if close:
            fh.close()

    if known is not None:
        units = sorted(known)
    else:
        units = sorted({u for pair in pairs for u in pair})
    index = {u: k for k, u in enumerate(units)}
    edges = frozenset(_normalize_edge(index[a], index[b]) for a, b in pairs)
    return ArealGraph(unit_ids=tuple(units), edges=edges)


def _parse_polygon_file(source):
    """Yield (unit_id, [(x, y), ...]) per ring from ``unit_id; x1 y1, x2 y2, ...`` lines."""
    if hasattr(source, "read"):
        lines = source.read().splitlines()
    elif isinstance(source, str) and "\n" in source:
        lines = source.splitlines()
    else:
        with open(source, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ";" not in line:
            raise GraphError(f"line {lineno}: expected 'unit_id; x1 y1, x2 y2, ...'")
        unit_id, _, coords = line.partition(";")
        unit_id = unit_id.strip()
        if not unit_id:
            raise GraphError(f"line {lineno}: missing unit identifier")
        ring = []
        for token in coords.split(","):
            token = token.strip()
            if not token:
                continue
            parts = token.split()
            if len(parts) != 2:
                raise GraphError(f"line {lineno}: bad coordinate pair {token!r}")
            ring.append((float(parts[0]), float(parts[1])))
        yield unit_id, ring


def derive_queen_adjacency(source) -> ArealGraph:
    """Queen contiguity from polygon vertex rings: units sharing any exact
    vertex coordinate are adjacent.

    ``source`` follows the one-ring-per-line geometry format.  A unit whose
    rings carry no vertices is rejected.  Coordinates are compared exactly,
    with no snapping tolerance.
    """
    vertices_by_unit: dict[str, set[tuple[float, float]]] = {}
    for unit_id, ring in _parse_polygon_file(source):
        vertices_by_unit.setdefault(unit_id, set()).update(ring)
    if not vertices_by_unit:
        raise GraphError("no polygon records found")
    for unit_id, verts in vertices_by_unit.items():
        if not verts:
            raise GraphError(f"unit {unit_id!r} has empty geometry")

    units = sorted(vertices_by_unit)
    index = {u: k for k, u in enumerate(units)}
    owners: dict[tuple[float, float], list[int]] = {}
    for u in units:
        for v in vertices_by_unit[u]:
            owners.setdefault(v, []).append(index[u])
    edges = set()
    for holders in owners.values():
        if len(holders) < 2:
            continue
        for a in range(len(holders)):
            for b in range(a + 1, len(holders)):
                edges.add(_normalize_edge(holders[a], holders[b]))
    return ArealGraph(unit_ids=tuple(units), edges=frozenset(edges))


def connected_components(graph: ArealGraph) -> list[list[int]]:
    """Partition unit indices into connected components.

    Components are returned sorted by their smallest member index, and each
    component's members are sorted ascending.
    """
    n = graph.n_units
    adj: list[list[int]] = [[] for _ in range(n)]
    for i, j in graph.edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = [False] * n
    components = []
    for start in range(n):
        if seen[start]:
            continue
        stack = [start]
        seen[start] = True
        members = []
        while stack:
            node = stack.pop()
            members.append(node)
            for nb in adj[node]:
                if not seen[nb]:
                    seen[nb] = True
                    stack.append(nb)
        components.append(sorted(members))
    components.sort(key=lambda c: c[0])
    return components
