"""Region adjacency graphs: parsing, serialisation and the ICAR structure matrix.

The on-disk format is the plain neighbourhood listing used by INLA::

    n
    <index> <k> <nb_1> ... <nb_k>
    ...

Indices may be 0- or 1-based; they are normalised to 0-based internally.
"""
from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class GraphFormatError(ValueError):
    """Raised for malformed graph files. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Graph:
    """Undirected region adjacency with connected-component labels.

    Build instances with :func:`parse_graph`, :meth:`from_edges` or
    :meth:`lattice`; the constructor trusts its inputs.
    """

    n_regions: int
    neighbours: tuple[tuple[int, ...], ...]
    component_of: np.ndarray
    n_components: int
    metadata: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_neighbour_sets(cls, sets, metadata=None) -> "Graph":
        neighbours = tuple(tuple(sorted(s)) for s in sets)
        labels, n_comp = _bfs_components(neighbours)
        labels.setflags(write=False)
        return cls(len(neighbours), neighbours, labels, n_comp, dict(metadata or {}))

    @classmethod
    def from_edges(cls, n: int, edges) -> "Graph":
        sets = [set() for _ in range(n)]
        for i, j in edges:
            i, j = int(i), int(j)
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i}, {j}) out of range for n={n}")
            if i == j:
                continue
            sets[i].add(j)
            sets[j].add(i)
        return cls.from_neighbour_sets(sets)

    @classmethod
    def lattice(cls, nrow: int, ncol: int) -> "Graph":
        """Rook-adjacency grid, regions numbered row-major."""
        edges = []
        for r in range(nrow):
            for c in range(ncol):
                i = r * ncol + c
                if c + 1 < ncol:
                    edges.append((i, i + 1))
                if r + 1 < nrow:
                    edges.append((i, i + ncol))
        return cls.from_edges(nrow * ncol, edges)

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbours], dtype=int)

    @property
    def n_edges(self) -> int:
        return int(self.degrees.sum()) // 2

    def components(self) -> list[np.ndarray]:
        """Member indices of each component, ordered by label."""
        return [np.flatnonzero(self.component_of == c) for c in range(self.n_components)]

    def edges(self):
        for i, nb in enumerate(self.neighbours):
            for j in nb:
                if i < j:
                    yield i, j

    def permute(self, perm) -> "Graph":
        """Relabel so that new region ``k`` is old region ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return Graph.from_edges(self.n_regions, [(inv[i], inv[j]) for i, j in self.edges()])

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return self.n_regions == other.n_regions and self.neighbours == other.neighbours

    def __hash__(self):
        return hash((self.n_regions, self.neighbours))


def _bfs_components(neighbours) -> tuple[np.ndarray, int]:
    n = len(neighbours)
    labels = np.full(n, -1, dtype=int)
    n_comp = 0
    for start in range(n):
        if labels[start] >= 0:
            continue
        labels[start] = n_comp
        queue = deque([start])
        while queue:
            i = queue.popleft()
            for j in neighbours[i]:
                if labels[j] < 0:
                    labels[j] = n_comp
                    queue.append(j)
        n_comp += 1
    return labels, n_comp


def connected_components(g: Graph) -> tuple[np.ndarray, int]:
    """Breadth-first component labels, numbered by smallest member index."""
    return _bfs_components(g.neighbours)


_TOKEN = re.compile(r"\S+")


def _tokens(text: str):
    for lineno, line in enumerate(text.splitlines(), start=1):
        for m in _TOKEN.finditer(line):
            yield m.group(0), lineno


def _as_int(tok: str, lineno: int, what: str) -> int:
    try:
        value = int(tok)
    except ValueError:
        try:
            f = float(tok)
        except ValueError:
            raise GraphFormatError(f"malformed {what} {tok!r}", lineno) from None
        if not f.is_integer():
            raise GraphFormatError(f"malformed {what} {tok!r}", lineno) from None
        value = int(f)
    return value


def parse_graph(text: str | bytes) -> Graph:
    """Parse a neighbourhood listing into a validated :class:`Graph`.

    One-sided adjacency entries are mirrored; the number repaired is kept in
    ``metadata["asymmetric_entries"]``.
    """
    if isinstance(text, bytes):
        text = text.decode("ascii")
    toks = _tokens(text)
    try:
        tok, line = next(toks)
    except StopIteration:
        raise GraphFormatError("empty graph file", 1) from None
    n = _as_int(tok, line, "region count")
    if n <= 0:
        raise GraphFormatError(f"region count must be positive, got {n}", line)

    records: dict[int, tuple[list[int], int]] = {}
    while True:
        try:
            tok, line = next(toks)
        except StopIteration:
            break
        idx = _as_int(tok, line, "region index")
        if idx in records:
            raise GraphFormatError(f"duplicate record for region {idx}", line)
        try:
            tok, kline = next(toks)
        except StopIteration:
            raise GraphFormatError(f"region {idx}: missing neighbour count", line) from None
        k = _as_int(tok, kline, "neighbour count")
        if k < 0:
            raise GraphFormatError(f"region {idx}: negative neighbour count", kline)
        nbs = []
        for _ in range(k):
            try:
                tok, nline = next(toks)
            except StopIteration:
                raise GraphFormatError(
                    f"region {idx}: expected {k} neighbours, file ended", kline
                ) from None
            nbs.append(_as_int(tok, nline, "neighbour index"))
        records[idx] = (nbs, line)

    if len(records) != n:
        raise GraphFormatError(f"header declares {n} regions but {len(records)} records found", 1)

    ids = set(records)
    if 0 in ids:
        base = 0
    elif ids == set(range(1, n + 1)):
        base = 1
    else:
        base = None
    if base is None or ids != set(range(base, base + n)):
        raise GraphFormatError("region indices are neither 0..n-1 nor 1..n", 1)

    sets = [set() for _ in range(n)]
    self_loops = 0
    for idx, (nbs, line) in records.items():
        i = idx - base
        for nb in nbs:
            j = nb - base
            if not 0 <= j < n:
                raise GraphFormatError(f"region {idx}: neighbour index {nb} out of range", line)
            if j == i:
                self_loops += 1
                continue
            sets[i].add(j)

    asymmetric = 0
    for i in range(n):
        for j in list(sets[i]):
            if i not in sets[j]:
                sets[j].add(i)
                asymmetric += 1

    meta = {"index_base": base, "asymmetric_entries": asymmetric, "self_loops_dropped": self_loops}
    return Graph.from_neighbour_sets(sets, meta)


def read_graph(path) -> Graph:
    return parse_graph(Path(path).read_text())


def serialize_graph(g: Graph, index_base: int = 0) -> str:
    lines = [str(g.n_regions)]
    for i, nb in enumerate(g.neighbours):
        fields = [i + index_base, len(nb), *(j + index_base for j in nb)]
        lines.append(" ".join(map(str, fields)))
    return "\n".join(lines) + "\n"


def write_graph(g: Graph, path, index_base: int = 0) -> None:
    Path(path).write_text(serialize_graph(g, index_base))


def besag_precision(g: Graph):
    """ICAR structure matrix: degree on the diagonal, -1 for each neighbour pair."""
    from .linalg import SymSparseMatrix

    rows, cols = [], []
    for i, j in g.edges():
        rows.append(j)
        cols.append(i)
    n = g.n_regions
    diag = np.arange(n)
    r = np.concatenate([diag, np.array(rows, dtype=int)])
    c = np.concatenate([diag, np.array(cols, dtype=int)])
    v = np.concatenate([g.degrees.astype(float), -np.ones(len(rows))])
    return SymSparseMatrix(sp.csc_matrix((v, (r, c)), shape=(n, n)))
