"""Series hierarchies, the summing matrix, and bottom-up / top-down reconciliation."""
from __future__ import annotations

import csv
import io
import os
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tensor import Tensor

__all__ = [
    "HierarchyError",
    "Hierarchy",
    "SummingMatrix",
    "ForecastSet",
    "build_hierarchy",
    "summing_matrix",
    "aggregate",
    "check_coherence",
    "reconcile_bottom_up",
    "reconcile_top_down",
    "historical_proportions",
    "read_hierarchy",
    "write_hierarchy",
]


class HierarchyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Hierarchy:
    """An immutable tree of series.

    ``node_ids`` lists the aggregate nodes (sorted by level, then id) followed
    by the bottom nodes (same sort). Bottom nodes are the nodes without
    children and their order is the column order of the summing matrix.
    """

    node_ids: tuple[str, ...]
    parent_of: Mapping[str, str]
    level_of: Mapping[str, int]
    bottom_ids: tuple[str, ...]
    edges: tuple[tuple[str, str], ...] = field(repr=False)

    @property
    def m(self) -> int:
        return len(self.node_ids)

    @property
    def n(self) -> int:
        return len(self.bottom_ids)

    @property
    def a(self) -> int:
        return self.m - self.n

    @property
    def aggregate_ids(self) -> tuple[str, ...]:
        return self.node_ids[: self.a]

    @property
    def top(self) -> str:
        return self.node_ids[0]

    @property
    def n_levels(self) -> int:
        return max(self.level_of.values()) + 1

    @cached_property
    def index_of(self) -> dict[str, int]:
        return {nid: i for i, nid in enumerate(self.node_ids)}

    @cached_property
    def children_of(self) -> dict[str, tuple[str, ...]]:
        kids: dict[str, list[str]] = defaultdict(list)
        for child, parent in self.edges:
            kids[parent].append(child)
        return {k: tuple(sorted(v)) for k, v in kids.items()}

    def ancestors(self, node: str) -> list[str]:
        """Ancestors of ``node`` from its parent up to the top."""
        out = []
        while node in self.parent_of:
            node = self.parent_of[node]
            out.append(node)
        return out

    def levels(self) -> np.ndarray:
        return np.array([self.level_of[nid] for nid in self.node_ids], dtype=int)

    @cached_property
    def S(self) -> "SummingMatrix":
        return summing_matrix(self)


def build_hierarchy(edges: Iterable[Sequence[str]]) -> Hierarchy:
    """Build a tree hierarchy from ``(child, parent)`` pairs."""
    pairs: list[tuple[str, str]] = []
    seen: set[tuple[str, str]] = set()
    for edge in edges:
        child, parent = (str(x).strip() for x in edge)
        if not child or not parent:
            raise HierarchyError(f"empty node id in edge {edge!r}")
        if (child, parent) not in seen:
            seen.add((child, parent))
            pairs.append((child, parent))
    if not pairs:
        raise HierarchyError("hierarchy has no edges")

    parent_of: dict[str, str] = {}
    for child, parent in pairs:
        if child == parent:
            raise HierarchyError(f"cycle detected: {child} is its own parent")
        if child in parent_of:
            raise HierarchyError(
                f"node {child!r} has several parents ({parent_of[child]!r}, {parent!r}); "
                "only trees are supported"
            )
        parent_of[child] = parent

    nodes = set(parent_of) | set(parent_of.values())
    level_of: dict[str, int] = {}
    for start in sorted(nodes):
        path = []
        node = start
        on_path: set[str] = set()
        while node not in level_of and node in parent_of:
            if node in on_path:
                raise HierarchyError(f"cycle detected through {node!r}")
            on_path.add(node)
            path.append(node)
            node = parent_of[node]
        base = level_of.get(node, 0)
        if node not in level_of:
            level_of[node] = 0
        for depth, nd in enumerate(reversed(path), start=1):
            level_of[nd] = base + depth

    roots = sorted(nd for nd in nodes if nd not in parent_of)
    if len(roots) != 1:
        raise HierarchyError(f"hierarchy must have one top node, found {len(roots)}: {roots[:5]}")

    parents = set(parent_of.values())
    bottom = sorted((nd for nd in nodes if nd not in parents), key=lambda x: (level_of[x], x))
    aggs = sorted((nd for nd in nodes if nd in parents), key=lambda x: (level_of[x], x))
    return Hierarchy(
        node_ids=tuple(aggs + bottom),
        parent_of=dict(parent_of),
        level_of=level_of,
        bottom_ids=tuple(bottom),
        edges=tuple(pairs),
    )


class SummingMatrix:
    """The {0,1} matrix mapping the n bottom series onto all m series."""

    def __init__(self, entries: np.ndarray, hierarchy: Hierarchy | None = None):
        arr = np.array(entries, dtype=np.float64)
        arr.setflags(write=False)
        self.entries = arr
        self.hierarchy = hierarchy

    @property
    def dims(self) -> tuple[int, int]:
        return self.entries.shape

    @property
    def m(self) -> int:
        return self.entries.shape[0]

    @property
    def n(self) -> int:
        return self.entries.shape[1]

    @property
    def aggregate_block(self) -> np.ndarray:
        return self.entries[: self.m - self.n]

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)

    def __repr__(self) -> str:
        return f"SummingMatrix(m={self.m}, n={self.n})"


def summing_matrix(h: Hierarchy) -> SummingMatrix:
    S = np.zeros((h.m, h.n))
    idx = h.index_of
    for j, leaf in enumerate(h.bottom_ids):
        S[idx[leaf], j] = 1.0
        for anc in h.ancestors(leaf):
            S[idx[anc], j] = 1.0
    return SummingMatrix(S, h)


@dataclass(frozen=True, eq=False)
class ForecastSet:
    """Bottom forecasts and their coherent aggregates.

    ``bottom`` is ``(..., n, H)`` and ``full`` is ``(..., m, H)``; either an
    ndarray or, inside training, a Tensor on the differentiation graph.
    """

    bottom: np.ndarray | Tensor
    full: np.ndarray | Tensor
    hierarchy: Hierarchy | None = None

    @property
    def horizon(self) -> int:
        return self.full.shape[-1]


def _S(S) -> SummingMatrix:
    if isinstance(S, Hierarchy):
        return S.S
    if isinstance(S, SummingMatrix):
        return S
    return SummingMatrix(np.asarray(S))


def aggregate(S, bottom) -> ForecastSet:
    """Aggregate bottom-level values through the summing matrix."""
    S = _S(S)
    if bottom.shape[-2] != S.n:
        raise ValueError(f"bottom has {bottom.shape[-2]} rows, summing matrix expects {S.n}")
    if isinstance(bottom, Tensor):
        full = Tensor(S.entries) @ bottom
    else:
        full = S.entries @ np.asarray(bottom, dtype=np.float64)
    return ForecastSet(bottom=bottom, full=full, hierarchy=S.hierarchy)


def check_coherence(full, S, tol: float = 1e-9) -> tuple[bool, float]:
    """Return ``(coherent, max_violation)`` for an ``(m, H)`` matrix."""
    S = _S(S)
    full = np.asarray(full.data if isinstance(full, Tensor) else full, dtype=np.float64)
    a = S.m - S.n
    if a == 0:
        return True, 0.0
    expected = S.aggregate_block @ full[..., a:, :]
    violation = float(np.max(np.abs(full[..., :a, :] - expected)))
    return violation <= tol, violation


def reconcile_bottom_up(base_forecasts, S) -> ForecastSet:
    S = _S(S)
    base = np.asarray(base_forecasts, dtype=np.float64)
    if base.ndim != 2 or base.shape[0] != S.m:
        raise ValueError(f"base forecasts must be ({S.m}, H), got {base.shape}")
    return aggregate(S, base[S.m - S.n :].copy())


def reconcile_top_down(base_top, proportions, S) -> ForecastSet:
    S = _S(S)
    top = np.asarray(base_top, dtype=np.float64).reshape(1, -1)
    p = np.asarray(proportions, dtype=np.float64).reshape(-1)
    if p.shape[0] != S.n:
        raise ValueError(f"need {S.n} proportions, got {p.shape[0]}")
    if np.any(p < 0):
        raise ValueError("proportions must be nonnegative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"proportions sum to {p.sum()!r}, not 1")
    return aggregate(S, p[:, None] * top)


def historical_proportions(bottom_history: np.ndarray) -> np.ndarray:
    """Each bottom series' share of the summed historical means."""
    means = np.asarray(bottom_history, dtype=np.float64).mean(axis=1)
    total = means.sum()
    if total <= 0:
        raise ValueError("bottom history has no positive mass to split")
    return means / total


def read_hierarchy(path: str | os.PathLike) -> Hierarchy:
    """Read a ``child,parent`` edge file (``#`` lines are comments)."""
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    rows = list(csv.reader(lines))
    if not rows or [c.strip().lower() for c in rows[0]] != ["child", "parent"]:
        raise HierarchyError(f"{path}: expected header 'child,parent'")
    edges = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise HierarchyError(f"{path}: line {lineno}: expected 2 fields, got {len(row)}")
        edges.append((row[0], row[1]))
    return build_hierarchy(edges)


def write_hierarchy(h: Hierarchy, path: str | os.PathLike | None = None) -> str:
    buf = io.StringIO()
    buf.write("child,parent\n")
    for child, parent in sorted(h.edges):
        buf.write(f"{child},{parent}\n")
    text = buf.getvalue()
    if path is not None:
        from .data import atomic_write_text

        atomic_write_text(path, text)
    return text
