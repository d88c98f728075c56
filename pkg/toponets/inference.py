"""
Exact inference over sum-product networks in log space.

Every pass is a sweep over a compiled level schedule: nodes are grouped by
height and kind, and each group is reduced with one segmented numpy call.
Zero probability is ``-inf``; sums use a max-shifted log-sum-exp that
ignores ``-inf`` terms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from toponets.errors import ImpossibleEvidenceError, SpnInputError
from toponets.spn import Evidence, MpeResult, NodeKind, Spn, evidence_matrix, expand_segments

logger = logging.getLogger(__name__)


@dataclass
class OpCounter:
    """Tally of work done by instrumented passes."""

    edges: int = 0
    nodes: int = 0
    passes: int = 0

    def record(self, nodes: int, edges: int) -> None:
        self.nodes += nodes
        self.edges += edges
        self.passes += 1


@dataclass(frozen=True)
class _Group:
    kind: int
    nodes: np.ndarray
    edges: np.ndarray
    children: np.ndarray
    starts: np.ndarray
    counts: np.ndarray


@dataclass(frozen=True)
class _Level:
    height: int
    nodes: np.ndarray
    groups: Tuple[_Group, ...]
    # incoming edges from scheduled parents, for the downward pass
    in_nodes: np.ndarray
    in_edges: np.ndarray
    in_starts: np.ndarray


@dataclass(frozen=True)
class Schedule:
    leaves: np.ndarray
    leaf_slots: np.ndarray
    frozen: np.ndarray
    levels: Tuple[_Level, ...]
    num_nodes: int
    num_edges: int


def compile_schedule(spn: Spn, frozen: Iterable[int] = ()) -> Schedule:
    """Level schedule of the nodes needed to compute the root.

    Nodes listed in ``frozen`` are treated as inputs whose values the caller
    supplies; nothing beneath them is scheduled unless another path needs it.
    """
    key = tuple(sorted(set(int(i) for i in frozen)))
    cached = spn._schedules.get(key)
    if cached is not None:
        return cached

    n = spn.num_nodes
    is_frozen = np.zeros(n, dtype=bool)
    is_frozen[list(key)] = True
    heights = spn.heights
    order = np.argsort(heights, kind="stable")
    boundaries = np.flatnonzero(np.diff(heights[order])) + 1
    by_height = np.split(order, boundaries)

    needed = np.zeros(n, dtype=bool)
    needed[spn.root] = True
    for level_nodes in reversed(by_height):
        active = level_nodes[needed[level_nodes] & ~is_frozen[level_nodes]]
        active = active[spn.kinds[active] != NodeKind.INDICATOR]
        if len(active):
            edges, _, _ = expand_segments(spn.child_ptr, active)
            needed[spn.children[edges]] = True

    scheduled = needed & ~is_frozen
    in_order, in_ptr = spn.in_edges
    parent = spn.edge_parent
    levels = []
    leaves = np.zeros(0, dtype=np.int64)
    total_edges = 0
    for level_nodes in by_height:
        nodes = level_nodes[scheduled[level_nodes]]
        if len(nodes) == 0:
            continue
        height = int(heights[nodes[0]])
        groups = []
        if height == 0:
            leaves = nodes
        else:
            for kind in (NodeKind.SUM, NodeKind.PRODUCT):
                members = nodes[spn.kinds[nodes] == kind]
                if len(members) == 0:
                    continue
                edges, starts, counts = expand_segments(spn.child_ptr, members)
                groups.append(_Group(int(kind), members, edges, spn.children[edges], starts, counts))
                total_edges += len(edges)
        positions, _, _ = expand_segments(in_ptr, nodes)
        incoming = in_order[positions]
        owner = spn.children[incoming]
        keep = scheduled[parent[incoming]]
        incoming, owner = incoming[keep], owner[keep]
        in_nodes, in_starts = np.unique(owner, return_index=True)
        levels.append(_Level(height, nodes, tuple(groups), in_nodes, incoming, in_starts))

    frozen_needed = np.array([i for i in key if needed[i]], dtype=np.int64)
    schedule = Schedule(
        leaves=leaves,
        leaf_slots=spn.slot_offsets[spn.ind_var[leaves]] + spn.ind_value[leaves],
        frozen=frozen_needed,
        levels=tuple(levels),
        num_nodes=int(scheduled.sum()),
        num_edges=total_edges,
    )
    spn._schedules[key] = schedule
    return schedule


# -- segment reductions -----------------------------------------------------

def segment_logsumexp(x: np.ndarray, starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Log-sum-exp of consecutive row segments of ``x``; empty mass gives -inf."""
    m = np.maximum.reduceat(x, starts, axis=0)
    shift = np.where(np.isfinite(m), m, 0.0)
    s = np.add.reduceat(np.exp(x - np.repeat(shift, counts, axis=0)), starts, axis=0)
    with np.errstate(divide="ignore"):
        return np.log(s) + shift


def log_indicators(spn: Spn, evidences: Sequence[Evidence]) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(evidence_matrix(spn, evidences).astype(np.float64))


# -- upward passes ------------------------------------------------------------

def forward(spn: Spn, log_lambda: np.ndarray, *, mode: str = "sum",
            frozen: Sequence[int] = (), fixed_values: Optional[np.ndarray] = None,
            summed: Optional[np.ndarray] = None,
            counter: Optional[OpCounter] = None) -> np.ndarray:
    """Node log-values for a batch of indicator inputs.

    ``log_lambda`` has shape ``(batch, num_slots)``. ``mode`` is ``"sum"``,
    ``"max"`` or ``"mixed"``; in mixed mode sum nodes flagged in ``summed``
    add and the rest take the weighted maximum. Returns ``(num_nodes, batch)``;
    unscheduled nodes stay ``-inf``.
    """
    log_lambda = np.atleast_2d(np.asarray(log_lambda, dtype=np.float64))
    if log_lambda.shape[1] != spn.num_slots:
        raise SpnInputError(f"expected {spn.num_slots} indicator slots, got {log_lambda.shape[1]}")
    if mode not in ("sum", "max", "mixed"):
        raise SpnInputError(f"unknown pass mode {mode!r}")
    if mode == "mixed" and summed is None:
        raise SpnInputError("mixed mode needs a summed-node mask")
    schedule = compile_schedule(spn, frozen)
    batch = log_lambda.shape[0]
    values = np.full((spn.num_nodes, batch), -np.inf)
    if len(schedule.frozen):
        if fixed_values is None:
            raise SpnInputError("frozen nodes need fixed values")
        fixed = np.asarray(fixed_values, dtype=np.float64).reshape(len(frozen), batch)
        order = {int(node): row for row, node in enumerate(frozen)}
        rows = [order[int(node)] for node in schedule.frozen]
        values[schedule.frozen] = fixed[rows]
    values[schedule.leaves] = log_lambda[:, schedule.leaf_slots].T
    log_w = spn.log_weights
    for level in schedule.levels:
        for group in level.groups:
            x = values[group.children]
            if group.kind == NodeKind.PRODUCT:
                values[group.nodes] = np.add.reduceat(x, group.starts, axis=0)
                continue
            x = x + log_w[group.edges][:, None]
            if mode == "sum":
                out = segment_logsumexp(x, group.starts, group.counts)
            elif mode == "max":
                out = np.maximum.reduceat(x, group.starts, axis=0)
            else:
                out = np.where(summed[group.nodes][:, None],
                               segment_logsumexp(x, group.starts, group.counts),
                               np.maximum.reduceat(x, group.starts, axis=0))
            values[group.nodes] = out
    if counter is not None:
        counter.record(schedule.num_nodes, schedule.num_edges)
    return values


def evaluate_batch(spn: Spn, evidences: Sequence[Evidence],
                   counter: Optional[OpCounter] = None) -> np.ndarray:
    values = forward(spn, log_indicators(spn, evidences), counter=counter)
    return values[spn.root].copy()


def evaluate(spn: Spn, evidence: Evidence, counter: Optional[OpCounter] = None) -> float:
    """Log of the network polynomial at ``evidence``."""
    return float(evaluate_batch(spn, [evidence], counter)[0])


def max_product(spn: Spn, evidences: Sequence[Evidence]) -> np.ndarray:
    """Max-product log-score of the root, weighted max at every sum node."""
    values = forward(spn, log_indicators(spn, evidences), mode="max")
    return values[spn.root].copy()


# -- downward pass -------------------------------------------------------------

def backward(spn: Spn, values: np.ndarray, seeds: Dict[int, np.ndarray], *,
             frozen: Sequence[int] = (), stop_height: int = 0,
             counter: Optional[OpCounter] = None) -> np.ndarray:
    """Log-derivatives ``log dF/dS_n`` for ``F = sum_k exp(seed_k) * S_k``.

    ``seeds`` maps node ids to per-sample log-coefficients; seeding the root
    with 0 yields ``log dS_root/dS_n``. Levels below ``stop_height`` are
    skipped and their entries stay ``-inf``.
    """
    schedule = compile_schedule(spn, frozen)
    batch = values.shape[1]
    grads = np.full((spn.num_nodes, batch), -np.inf)
    seed = np.full((spn.num_nodes, batch), -np.inf)
    for node, coef in seeds.items():
        seed[node] = coef
    contrib = np.full((spn.num_edges, batch), -np.inf)
    log_w = spn.log_weights
    touched = 0
    for level in reversed(schedule.levels):
        if level.height < stop_height:
            break
        grads[level.nodes] = seed[level.nodes]
        if len(level.in_nodes):
            counts = np.diff(np.append(level.in_starts, len(level.in_edges)))
            incoming = segment_logsumexp(contrib[level.in_edges], level.in_starts, counts)
            grads[level.in_nodes] = np.logaddexp(grads[level.in_nodes], incoming)
            touched += len(level.in_edges)
        for group in level.groups:
            g_parent = np.repeat(grads[group.nodes], group.counts, axis=0)
            if group.kind == NodeKind.SUM:
                contrib[group.edges] = g_parent + log_w[group.edges][:, None]
            else:
                contrib[group.edges] = g_parent + _product_others(values[group.children],
                                                                  group.starts, group.counts)
            touched += len(group.edges)
    if counter is not None:
        counter.record(schedule.num_nodes, touched)
    return grads


def _product_others(x: np.ndarray, starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Per edge, the log-product of the sibling values (the child's cofactor)."""
    zero = np.isneginf(x)
    finite = np.where(zero, 0.0, x)
    zero_count = np.repeat(np.add.reduceat(zero.astype(np.int64), starts, axis=0), counts, axis=0)
    finite_sum = np.repeat(np.add.reduceat(finite, starts, axis=0), counts, axis=0)
    return np.where(zero_count == 0, finite_sum - finite,
                    np.where((zero_count == 1) & zero, finite_sum, -np.inf))


def _slot_log_gradients(spn: Spn, grads: np.ndarray, schedule: Schedule) -> np.ndarray:
    """Per indicator slot, log of the summed derivative over its leaves."""
    batch = grads.shape[1]
    out = np.full((spn.num_slots, batch), -np.inf)
    if len(schedule.leaves) == 0:
        return out
    order = np.argsort(schedule.leaf_slots, kind="stable")
    slots = schedule.leaf_slots[order]
    unique, starts = np.unique(slots, return_index=True)
    counts = np.diff(np.append(starts, len(slots)))
    out[unique] = segment_logsumexp(grads[schedule.leaves[order]], starts, counts)
    return out


def marginals(spn: Spn, evidence: Evidence, counter: Optional[OpCounter] = None,
              variables: Optional[Iterable[int]] = None) -> Dict[int, np.ndarray]:
    """Posterior ``P(X = v | evidence)`` for every variable in the root scope."""
    return marginals_from_indicators(spn, log_indicators(spn, [evidence]), variables, counter)


def marginals_from_indicators(spn: Spn, log_lambda: np.ndarray, variables: Optional[Iterable[int]] = None,
                              counter: Optional[OpCounter] = None) -> Dict[int, np.ndarray]:
    """Marginals from one row of log indicator values; ``variables`` limits the output."""
    log_lambda = np.atleast_2d(log_lambda)
    values = forward(spn, log_lambda, counter=counter)
    root = values[spn.root, 0]
    if not np.isfinite(root):
        raise ImpossibleEvidenceError("evidence has zero probability")
    grads = backward(spn, values, {spn.root: np.zeros(1)}, counter=counter)
    slot_grad = _slot_log_gradients(spn, grads, compile_schedule(spn))[:, 0]
    joint = slot_grad + log_lambda[0]
    offsets = spn.slot_offsets
    result = {}
    for var in (spn.root_variables if variables is None else variables):
        lo, hi = offsets[var], offsets[var + 1]
        row = joint[lo:hi]
        result[int(var)] = np.exp(row - np.logaddexp.reduce(row))
    return result


def indicator_gradients(spn: Spn, lam: np.ndarray) -> np.ndarray:
    """``dS/d(lambda_slot)`` of the linear network polynomial at real inputs."""
    lam = np.asarray(lam, dtype=np.float64).reshape(1, -1)
    if np.any(lam < 0):
        raise SpnInputError("indicator inputs must be non-negative")
    with np.errstate(divide="ignore"):
        log_lambda = np.log(lam)
    values = forward(spn, log_lambda)
    grads = backward(spn, values, {spn.root: np.zeros(1)})
    return np.exp(_slot_log_gradients(spn, grads, compile_schedule(spn))[:, 0])


def edge_log_gradients(spn: Spn, values: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Per edge and sample, ``log(dF/dS_parent * S_child)``; the weight gradient times w."""
    return grads[spn.edge_parent] + values[spn.children]


def weight_gradients(spn: Spn, evidence: Evidence) -> np.ndarray:
    """``d log S / d w`` for every edge; product edges get zero."""
    values = forward(spn, log_indicators(spn, [evidence]))
    root = values[spn.root, 0]
    if not np.isfinite(root):
        raise ImpossibleEvidenceError("evidence has zero probability")
    grads = backward(spn, values, {spn.root: np.zeros(1)})
    out = np.exp(grads[spn.edge_parent, 0] + values[spn.children, 0] - root)
    out[spn.kinds[spn.edge_parent] != NodeKind.SUM] = 0.0
    return out


# -- max-product decoding --------------------------------------------------------

def summed_mask(spn: Spn, sum_out: Iterable[int]) -> np.ndarray:
    """Nodes whose scope lies entirely inside ``sum_out``."""
    inside = np.zeros(len(spn.variables), dtype=bool)
    inside[list(sum_out)] = True
    mask = np.zeros(spn.num_nodes, dtype=bool)
    leaves = spn.leaf_nodes
    mask[leaves] = inside[spn.ind_var[leaves]]
    for level in compile_schedule(spn).levels:
        for group in level.groups:
            mask[group.nodes] = np.logical_and.reduceat(mask[group.children], group.starts)
    return mask


def mpe(spn: Spn, evidence: Evidence, sum_out: Iterable[int] = (),
        counter: Optional[OpCounter] = None) -> MpeResult:
    """Max-product decoding of the variables not fully observed.

    Variables in ``sum_out`` are marginalized instead of maximized: every
    node whose scope lies inside them is evaluated as a plain sum and is
    not traced.
    """
    return mpe_from_indicators(spn, log_indicators(spn, [evidence]), sum_out, counter)


def mpe_from_indicators(spn: Spn, log_lambda: np.ndarray, sum_out: Iterable[int] = (),
                        counter: Optional[OpCounter] = None) -> MpeResult:
    sum_out = sorted(set(int(v) for v in sum_out))
    log_lambda = np.atleast_2d(log_lambda)
    summed = summed_mask(spn, sum_out) if sum_out else np.zeros(spn.num_nodes, dtype=bool)
    values = forward(spn, log_lambda, mode="mixed" if sum_out else "max",
                     summed=summed if sum_out else None, counter=counter)
    score = float(values[spn.root, 0])
    if not np.isfinite(score):
        raise ImpossibleEvidenceError("evidence has zero probability")

    schedule = compile_schedule(spn)
    selected = np.zeros(spn.num_nodes, dtype=bool)
    selected[spn.root] = True
    log_w = spn.log_weights
    column = values[:, 0]
    for level in reversed(schedule.levels):
        for group in level.groups:
            active = group.nodes[selected[group.nodes] & ~summed[group.nodes]]
            if len(active) == 0:
                continue
            edges, starts, counts = expand_segments(spn.child_ptr, active)
            children = spn.children[edges]
            if group.kind == NodeKind.PRODUCT:
                selected[children] = True
                continue
            x = column[children] + log_w[edges]
            best = np.repeat(np.maximum.reduceat(x, starts), counts)
            position = np.arange(len(x))
            first = np.minimum.reduceat(np.where(x == best, position, len(x)), starts)
            selected[children[first]] = True

    chosen = schedule.leaves[selected[schedule.leaves]]
    observed = np.add.reduceat((log_lambda[0] == 0.0).astype(np.int64), spn.slot_offsets[:-1])
    variables = spn.ind_var[chosen]
    keep = (observed[variables] != 1) & ~np.isin(variables, sum_out)
    assignment = {int(var): int(value) for var, value in zip(variables[keep], spn.ind_value[chosen][keep])}
    return MpeResult(assignment, score)
