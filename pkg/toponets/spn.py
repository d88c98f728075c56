"""
Sum-product network representation.

Nodes live in flat, topologically ordered arrays (children always precede
their parents). Edges are stored in CSR form: the children of node ``i`` are
``children[child_ptr[i]:child_ptr[i + 1]]`` and ``weights`` is aligned with
``children`` (product edges carry 1.0).
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from toponets.errors import SpnInputError, StructureError

logger = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-8


class NodeKind(enum.IntEnum):
    INDICATOR = 0
    SUM = 1
    PRODUCT = 2


@dataclass(frozen=True)
class VarId:
    index: int
    cardinality: int

    def __post_init__(self):
        if self.index < 0:
            raise SpnInputError(f"variable index must be non-negative, got {self.index}")
        if self.cardinality < 2:
            raise SpnInputError(f"variable {self.index}: cardinality must be >= 2")


@dataclass(frozen=True)
class Node:
    kind: NodeKind
    children: Tuple[int, ...] = ()
    weights: Tuple[float, ...] = ()
    variable: int = -1
    value: int = -1


@dataclass(frozen=True)
class ValidityReport:
    incomplete: Tuple[int, ...] = ()
    non_decomposable: Tuple[int, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.incomplete and not self.non_decomposable

    def __len__(self) -> int:
        return len(self.incomplete) + len(self.non_decomposable)


def variables_of(cardinalities: Iterable[int]) -> Tuple[VarId, ...]:
    return tuple(VarId(i, int(c)) for i, c in enumerate(cardinalities))


class Spn:
    """Immutable sum-product network over discrete variables."""

    def __init__(self, kinds, ind_var, ind_value, child_ptr, children, weights,
                 root: int, variables: Sequence[VarId]):
        self.kinds = _frozen(np.asarray(kinds, dtype=np.int8))
        self.ind_var = _frozen(np.asarray(ind_var, dtype=np.int64))
        self.ind_value = _frozen(np.asarray(ind_value, dtype=np.int64))
        self.child_ptr = _frozen(np.asarray(child_ptr, dtype=np.int64))
        self.children = _frozen(np.asarray(children, dtype=np.int64))
        self.weights = _frozen(np.asarray(weights, dtype=np.float64))
        self.root = int(root)
        self.variables = tuple(variables)
        self._valid = False
        self._scopes: Optional[List[frozenset]] = None
        self._schedules: Dict[tuple, object] = {}
        self._check_tables()

    # -- construction ---------------------------------------------------

    @classmethod
    def from_nodes(cls, nodes: Sequence[Node], root: int,
                   variables: Sequence[VarId]) -> "Spn":
        """Build from node records in any order; reorders topologically."""
        n = len(nodes)
        if not 0 <= root < n:
            raise StructureError(f"root {root} out of range")
        indegree = np.zeros(n, dtype=np.int64)
        parents: List[List[int]] = [[] for _ in range(n)]
        for i, node in enumerate(nodes):
            for c in node.children:
                if not 0 <= c < n:
                    raise StructureError(f"node {i}: dangling child id {c}")
                parents[c].append(i)
            indegree[i] = len(node.children)
        order: List[int] = [i for i in range(n) if indegree[i] == 0]
        head = 0
        while head < len(order):
            for p in parents[order[head]]:
                indegree[p] -= 1
                if indegree[p] == 0:
                    order.append(p)
            head += 1
        if len(order) != n:
            stuck = sorted(set(range(n)) - set(order))
            raise StructureError(f"cycle detected through nodes {stuck[:10]}")
        new_id = np.empty(n, dtype=np.int64)
        new_id[order] = np.arange(n)
        builder = SpnBuilder(variables)
        for i in order:
            node = nodes[i]
            remapped = [int(new_id[c]) for c in node.children]
            if node.kind == NodeKind.INDICATOR:
                builder.indicator(node.variable, node.value)
            elif node.kind == NodeKind.SUM:
                builder.sum(remapped, node.weights)
            else:
                builder.product(remapped)
        return builder.build(int(new_id[root]))

    def _check_tables(self):
        n = len(self.kinds)
        for name in ("ind_var", "ind_value"):
            if len(getattr(self, name)) != n:
                raise StructureError(f"{name} has {len(getattr(self, name))} entries for {n} nodes")
        if len(self.child_ptr) != n + 1 or self.child_ptr[0] != 0:
            raise StructureError("child_ptr must have num_nodes + 1 entries starting at 0")
        counts = np.diff(self.child_ptr)
        if np.any(counts < 0) or self.child_ptr[-1] != len(self.children):
            raise StructureError("child_ptr is not monotone over the child table")
        if len(self.weights) != len(self.children):
            raise StructureError("weights must align with children")
        if not 0 <= self.root < n:
            raise StructureError(f"root {self.root} out of range")
        if np.any((self.kinds < 0) | (self.kinds > 2)):
            bad = int(np.flatnonzero((self.kinds < 0) | (self.kinds > 2))[0])
            raise StructureError(f"node {bad}: unknown node kind")
        leaves = self.kinds == NodeKind.INDICATOR
        if np.any(counts[leaves] != 0):
            raise StructureError(f"indicator {int(np.flatnonzero(leaves & (counts != 0))[0])} has children")
        if np.any(counts[~leaves] == 0):
            raise StructureError(f"node {int(np.flatnonzero(~leaves & (counts == 0))[0])} has no children "
                                 "(leaves must be indicators)")
        parent = self.edge_parent
        if len(self.children) and (np.any(self.children < 0) or np.any(self.children >= n)):
            bad = int(parent[(self.children < 0) | (self.children >= n)][0])
            raise StructureError(f"node {bad}: dangling child id")
        if np.any(self.children >= parent):
            bad = int(parent[self.children >= parent][0])
            raise StructureError(f"node {bad}: child does not precede parent (cycle or unordered table)")
        cards = self.cardinalities
        if np.any(leaves):
            var = self.ind_var[leaves]
            if np.any((var < 0) | (var >= len(cards))):
                raise StructureError("indicator references an unknown variable")
            val = self.ind_value[leaves]
            if np.any((val < 0) | (val >= cards[var])):
                raise StructureError("indicator value outside the variable's cardinality")
        for i, v in enumerate(self.variables):
            if v.index != i:
                raise StructureError(f"variable table must be dense: position {i} holds {v.index}")
        sum_edges = self.kinds[parent] == NodeKind.SUM
        w = self.weights[sum_edges]
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise StructureError("sum weights must be finite and non-negative")

    # -- basic shape ----------------------------------------------------

    @property
    def num_nodes(self) -> int:
        return len(self.kinds)

    @property
    def num_edges(self) -> int:
        return len(self.children)

    @property
    def is_valid(self) -> bool:
        return self._valid

    @cached_property
    def cardinalities(self) -> np.ndarray:
        return _frozen(np.array([v.cardinality for v in self.variables], dtype=np.int64))

    @cached_property
    def slot_offsets(self) -> np.ndarray:
        """Offset of each variable's first value in the flat indicator table."""
        offsets = np.zeros(len(self.variables) + 1, dtype=np.int64)
        np.cumsum(self.cardinalities, out=offsets[1:])
        return _frozen(offsets)

    @property
    def num_slots(self) -> int:
        return int(self.slot_offsets[-1])

    @cached_property
    def edge_parent(self) -> np.ndarray:
        return _frozen(np.repeat(np.arange(self.num_nodes, dtype=np.int64), np.diff(self.child_ptr)))

    @cached_property
    def log_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return _frozen(np.log(self.weights))

    @cached_property
    def in_edges(self) -> Tuple[np.ndarray, np.ndarray]:
        """Reverse CSR: edge ids sorted by child, and per-node offsets."""
        order = np.argsort(self.children, kind="stable")
        ptr = np.zeros(self.num_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.children, minlength=self.num_nodes), out=ptr[1:])
        return _frozen(order), _frozen(ptr)

    @cached_property
    def leaf_nodes(self) -> np.ndarray:
        return _frozen(np.flatnonzero(self.kinds == NodeKind.INDICATOR))

    @cached_property
    def leaf_slots(self) -> np.ndarray:
        leaves = self.leaf_nodes
        return _frozen(self.slot_offsets[self.ind_var[leaves]] + self.ind_value[leaves])

    @cached_property
    def sum_nodes(self) -> np.ndarray:
        return _frozen(np.flatnonzero(self.kinds == NodeKind.SUM))

    @cached_property
    def heights(self) -> np.ndarray:
        """Longest path to a leaf; leaves have height 0."""
        n = self.num_nodes
        h = np.zeros(n, dtype=np.int64)
        internal = np.flatnonzero(self.kinds != NodeKind.INDICATOR)
        if len(internal) == 0:
            return _frozen(h)
        # leaves own no edges, so internal segments tile the child table
        segments = self.child_ptr[internal]
        while True:
            updated = 1 + np.maximum.reduceat(h[self.children], segments)
            if np.array_equal(updated, h[internal]):
                break
            h[internal] = updated
        return _frozen(h)

    @cached_property
    def reachable(self) -> np.ndarray:
        """Mask of nodes reachable from the root."""
        mask = np.zeros(self.num_nodes, dtype=bool)
        mask[self.root] = True
        heights = self.heights
        order = np.argsort(-heights, kind="stable")
        boundaries = np.flatnonzero(np.diff(heights[order])) + 1
        for level_nodes in np.split(order, boundaries):
            active = level_nodes[mask[level_nodes]]
            if len(active):
                edges, _, _ = expand_segments(self.child_ptr, active)
                mask[self.children[edges]] = True
        return _frozen(mask)

    @cached_property
    def root_variables(self) -> np.ndarray:
        leaves = self.leaf_nodes[self.reachable[self.leaf_nodes]]
        return _frozen(np.unique(self.ind_var[leaves]))

    # -- record views ---------------------------------------------------

    def node(self, i: int) -> Node:
        kind = NodeKind(int(self.kinds[i]))
        lo, hi = self.child_ptr[i], self.child_ptr[i + 1]
        if kind == NodeKind.INDICATOR:
            return Node(kind, variable=int(self.ind_var[i]), value=int(self.ind_value[i]))
        children = tuple(int(c) for c in self.children[lo:hi])
        weights = tuple(float(w) for w in self.weights[lo:hi]) if kind == NodeKind.SUM else ()
        return Node(kind, children, weights)

    @property
    def nodes(self) -> List[Node]:
        return [self.node(i) for i in range(self.num_nodes)]

    def sum_weights(self, i: int) -> np.ndarray:
        return self.weights[self.child_ptr[i]:self.child_ptr[i + 1]]

    @property
    def var_scopes(self) -> List[frozenset]:
        if self._scopes is None:
            check_validity(self)
        return self._scopes

    def with_weights(self, weights: np.ndarray) -> "Spn":
        """Copy of this network with a new edge-weight table."""
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != self.weights.shape:
            raise SpnInputError(f"expected {self.weights.shape} weights, got {weights.shape}")
        weights = np.where(self.kinds[self.edge_parent] == NodeKind.SUM, weights, 1.0)
        if np.any(~np.isfinite(weights)) or np.any(weights < 0):
            raise SpnInputError("sum weights must be finite and non-negative")
        # same structure: share tables, scopes and compiled schedules
        out = object.__new__(Spn)
        out.__dict__.update(self.__dict__)
        out.__dict__.pop("log_weights", None)
        out.weights = _frozen(weights)
        return out

    def structure_equals(self, other: "Spn") -> bool:
        return (self.root == other.root and self.variables == other.variables
                and np.array_equal(self.kinds, other.kinds)
                and np.array_equal(self.ind_var, other.ind_var)
                and np.array_equal(self.ind_value, other.ind_value)
                and np.array_equal(self.child_ptr, other.child_ptr)
                and np.array_equal(self.children, other.children))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Spn):
            return NotImplemented
        return self.structure_equals(other) and np.array_equal(self.weights, other.weights)

    __hash__ = None

    def __repr__(self) -> str:
        return (f"Spn(nodes={self.num_nodes}, edges={self.num_edges}, "
                f"variables={len(self.variables)}, root={self.root})")


# -- evidence -------------------------------------------------------------

@dataclass(frozen=True)
class Evidence:
    """Indicator masks per variable; all-true means marginalized."""

    masks: Mapping[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def observe(cls, assignment: Mapping[int, int], variables: Sequence[VarId]) -> "Evidence":
        masks = {}
        for var, value in assignment.items():
            mask = np.zeros(variables[var].cardinality, dtype=bool)
            mask[value] = True
            masks[var] = mask
        return cls(masks)

    @classmethod
    def marginal(cls, variables: Sequence[VarId]) -> "Evidence":
        return cls({v.index: np.ones(v.cardinality, dtype=bool) for v in variables})

    def merged(self, other: "Evidence") -> "Evidence":
        masks = dict(self.masks)
        masks.update(other.masks)
        return Evidence(masks)


@dataclass(frozen=True)
class MpeResult:
    assignment: Dict[int, int]
    log_score: float


def evidence_matrix(spn: Spn, evidences: Sequence[Evidence]) -> np.ndarray:
    """Stack evidence into a ``(batch, num_slots)`` boolean indicator table."""
    table = np.ones((len(evidences), spn.num_slots), dtype=bool)
    offsets, cards = spn.slot_offsets, spn.cardinalities
    required = set(int(v) for v in spn.root_variables)
    for row, evidence in enumerate(evidences):
        missing = required - set(evidence.masks)
        if missing:
            raise SpnInputError(f"evidence missing variables {sorted(missing)[:10]}")
        for var, mask in evidence.masks.items():
            if not 0 <= var < len(cards):
                raise SpnInputError(f"evidence for unknown variable {var}")
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (cards[var],):
                raise SpnInputError(f"variable {var}: mask length {mask.shape} != cardinality {cards[var]}")
            if not mask.any():
                raise SpnInputError(f"variable {var}: mask has no true entry")
            table[row, offsets[var]:offsets[var + 1]] = mask
    return table


# -- validity ---------------------------------------------------------------

def check_validity(spn: Spn) -> ValidityReport:
    """Check completeness and decomposability and cache per-node scopes.

    Scopes are interned so equal scopes share one frozenset; completeness is
    then an identity test and product unions are memoized per child-scope tuple.
    """
    interned: Dict[frozenset, frozenset] = {}
    unions: Dict[tuple, Tuple[frozenset, bool]] = {}
    var_scope = [interned.setdefault(frozenset((i,)), frozenset((i,))) for i in range(len(spn.variables))]
    scopes: List[Optional[frozenset]] = [None] * spn.num_nodes
    incomplete: List[int] = []
    non_decomposable: List[int] = []
    kinds, ptr, children = spn.kinds, spn.child_ptr, spn.children
    for i in range(spn.num_nodes):
        kind = kinds[i]
        if kind == NodeKind.INDICATOR:
            scopes[i] = var_scope[spn.ind_var[i]]
            continue
        child_scopes = [scopes[c] for c in children[ptr[i]:ptr[i + 1]]]
        if kind == NodeKind.SUM:
            first = child_scopes[0]
            if any(s is not first for s in child_scopes[1:]):
                incomplete.append(i)
                merged = frozenset().union(*child_scopes)
                scopes[i] = interned.setdefault(merged, merged)
            else:
                scopes[i] = first
            continue
        key = tuple(sorted(id(s) for s in child_scopes))
        cached = unions.get(key)
        if cached is None:
            merged = frozenset().union(*child_scopes)
            disjoint = len(merged) == sum(len(s) for s in child_scopes)
            cached = (interned.setdefault(merged, merged), disjoint)
            unions[key] = cached
        scopes[i] = cached[0]
        if not cached[1]:
            non_decomposable.append(i)
    report = ValidityReport(tuple(incomplete), tuple(non_decomposable))
    spn._scopes = scopes
    spn._valid = report.valid
    if not report.valid:
        logger.debug("validity check found %d violations", len(report))
    return report


def require_valid(spn: Spn) -> Spn:
    if not spn.is_valid:
        report = check_validity(spn)
        if not report.valid:
            raise StructureError(f"network is not valid: {len(report.incomplete)} incomplete sums, "
                                 f"{len(report.non_decomposable)} non-decomposable products")
    return spn


# -- weights ---------------------------------------------------------------

def normalize_weights(spn: Spn, floor: float = WEIGHT_FLOOR) -> Spn:
    """Rescale every sum node's weights to sum to one, with a lower floor."""
    sums = spn.sum_nodes
    if len(sums) == 0:
        return spn
    edges, starts, counts = expand_segments(spn.child_ptr, sums)
    w = spn.weights[edges]
    if np.any(w <= 0):
        bad = int(spn.edge_parent[edges][w <= 0][0])
        raise SpnInputError(f"sum node {bad} has a non-positive weight")
    w = w / np.repeat(np.add.reduceat(w, starts), counts)
    if np.any(w < floor):
        w = np.maximum(w, floor)
        w = w / np.repeat(np.add.reduceat(w, starts), counts)
    weights = spn.weights.copy()
    weights[edges] = w
    return spn.with_weights(weights)


def is_normalized(spn: Spn, tol: float = 1e-9) -> bool:
    sums = spn.sum_nodes
    if len(sums) == 0:
        return True
    edges, starts, _ = expand_segments(spn.child_ptr, sums)
    totals = np.add.reduceat(spn.weights[edges], starts)
    return bool(np.all(np.abs(totals - 1.0) <= tol))


def remove_unreachable(spn: Spn) -> Spn:
    keep = spn.reachable
    if keep.all():
        return spn
    new_id = np.full(spn.num_nodes, -1, dtype=np.int64)
    kept = np.flatnonzero(keep)
    new_id[kept] = np.arange(len(kept))
    edges, _, counts = expand_segments(spn.child_ptr, kept)
    ptr = np.zeros(len(kept) + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return Spn(spn.kinds[kept], spn.ind_var[kept], spn.ind_value[kept], ptr,
               new_id[spn.children[edges]], spn.weights[edges], int(new_id[spn.root]),
               spn.variables)


# -- builder ----------------------------------------------------------------

class SpnBuilder:
    """Incremental assembly of a topologically ordered network."""

    def __init__(self, variables: Sequence[VarId]):
        self.variables = tuple(variables)
        self._chunks: List[tuple] = []
        self._kinds: List[int] = []
        self._var: List[int] = []
        self._value: List[int] = []
        self._counts: List[int] = []
        self._children: List[int] = []
        self._weights: List[float] = []
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def _add(self, kind, var, value, children, weights) -> int:
        for c in children:
            if not 0 <= c < self._size:
                raise StructureError(f"node {self._size}: child {c} does not exist yet")
        self._kinds.append(int(kind))
        self._var.append(var)
        self._value.append(value)
        self._counts.append(len(children))
        self._children.extend(int(c) for c in children)
        self._weights.extend(float(w) for w in weights)
        self._size += 1
        return self._size - 1

    def indicator(self, variable: int, value: int) -> int:
        if not 0 <= variable < len(self.variables):
            raise StructureError(f"unknown variable {variable}")
        if not 0 <= value < self.variables[variable].cardinality:
            raise StructureError(f"variable {variable} has no value {value}")
        return self._add(NodeKind.INDICATOR, variable, value, (), ())

    def sum(self, children: Sequence[int], weights: Optional[Sequence[float]] = None) -> int:
        if not children:
            raise StructureError("sum node needs at least one child")
        if weights is None:
            weights = [1.0 / len(children)] * len(children)
        if len(weights) != len(children):
            raise StructureError("sum node weight count must equal child count")
        return self._add(NodeKind.SUM, -1, -1, children, weights)

    def product(self, children: Sequence[int]) -> int:
        if not children:
            raise StructureError("product node needs at least one child")
        return self._add(NodeKind.PRODUCT, -1, -1, children, [1.0] * len(children))

    def _flush(self):
        if not self._kinds:
            return
        self._chunks.append((
            np.asarray(self._kinds, dtype=np.int8),
            np.asarray(self._var, dtype=np.int64),
            np.asarray(self._value, dtype=np.int64),
            np.asarray(self._counts, dtype=np.int64),
            np.asarray(self._children, dtype=np.int64),
            np.asarray(self._weights, dtype=np.float64),
        ))
        self._kinds, self._var, self._value = [], [], []
        self._counts, self._children, self._weights = [], [], []

    def append_block(self, spn: Spn, start: int, stop: int,
                     outside=None,
                     var_map: Optional[np.ndarray] = None,
                     weights: Optional[np.ndarray] = None) -> int:
        """Copy nodes ``start:stop`` of ``spn``; returns the new id of ``start``.

        Children inside the block are shifted; children outside it are looked
        up in ``outside``, an array indexed by source node id or a vectorized
        function of source ids. ``var_map`` renames
        indicator variables.
        """
        self._flush()
        offset = self._size
        nodes = np.arange(start, stop, dtype=np.int64)
        edges, _, counts = expand_segments(spn.child_ptr, nodes)
        src = spn.children[edges]
        inside = src >= start
        children = np.empty_like(src)
        children[inside] = src[inside] - start + offset
        if np.any(~inside):
            if outside is None:
                raise StructureError("block references nodes outside the block without a mapping")
            mapped = outside(src[~inside]) if callable(outside) else outside[src[~inside]]
            if np.any(mapped < 0):
                raise StructureError("block references an unmapped outside node")
            children[~inside] = mapped
        ind_var = spn.ind_var[start:stop].copy()
        leaves = spn.kinds[start:stop] == NodeKind.INDICATOR
        if var_map is not None:
            ind_var[leaves] = var_map[ind_var[leaves]]
        block_weights = (spn.weights if weights is None else weights)[edges]
        self._chunks.append((spn.kinds[start:stop].copy(), ind_var, spn.ind_value[start:stop].copy(),
                             counts, children, np.asarray(block_weights, dtype=np.float64)))
        self._size += stop - start
        return offset

    def build(self, root: int) -> Spn:
        self._flush()
        if not self._chunks:
            raise StructureError("empty network")
        kinds, var, value, counts, children, weights = (np.concatenate(parts) for parts in zip(*self._chunks))
        ptr = np.zeros(len(kinds) + 1, dtype=np.int64)
        np.cumsum(counts, out=ptr[1:])
        spn = Spn(kinds, var, value, ptr, children, weights, root, self.variables)
        self._chunks = [(kinds, var, value, counts, children, weights)]
        return spn


# -- helpers ------------------------------------------------------------------

def expand_segments(ptr: np.ndarray, nodes: np.ndarray):
    """Edge indices of ``nodes`` in CSR order plus per-node starts and counts."""
    nodes = np.asarray(nodes, dtype=np.int64)
    counts = ptr[nodes + 1] - ptr[nodes]
    starts = np.cumsum(counts) - counts
    total = int(counts.sum())
    edges = np.repeat(ptr[nodes] - starts, counts) + np.arange(total, dtype=np.int64)
    return edges, starts, counts


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array
