"""
Pairwise Markov random field baseline over the topological graph.

Unaries are the place network's class log-likelihoods, pairwise potentials
are smoothed class co-occurrence counts over map edges, and inference is
synchronous damped loopy belief propagation in the log domain.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax, xlogy

from toponets.errors import MapError, SpnInputError
from toponets.models import BpDiagnostics
from toponets.place_model import PlaceModel, class_log_likelihoods
from toponets.semmap import SemanticMap
from toponets.toponet import ClassPrediction, NoveltyScore

logger = logging.getLogger(__name__)

UNARY_FLOOR = -50.0


@dataclass(frozen=True, eq=False)
class PairwisePotential:
    """Symmetric, strictly positive class co-occurrence matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise SpnInputError("pairwise potential must be a square matrix")
        if np.any(matrix <= 0):
            raise SpnInputError("pairwise potential entries must be positive")
        if not np.allclose(matrix, matrix.T, rtol=0, atol=1e-12):
            raise SpnInputError("pairwise potential must be symmetric")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def log_matrix(self) -> np.ndarray:
        return np.log(self.matrix)


def edge_class_counts(maps: Sequence[SemanticMap], num_classes: int) -> np.ndarray:
    counts = np.zeros((num_classes, num_classes))
    for semantic_map in maps:
        for a, b in semantic_map.edges:
            la, lb = semantic_map.labels[a], semantic_map.labels[b]
            if la is None or lb is None:
                continue
            counts[la, lb] += 1
            counts[lb, la] += 1
    return counts


def learn_pairwise(maps: Sequence[SemanticMap], num_classes: Optional[int] = None,
                   smoothing: float = 1.0) -> PairwisePotential:
    """Edge class-pair counts in both orientations plus ``smoothing``, normalized."""
    if not maps:
        raise MapError("cannot learn co-occurrences from an empty corpus")
    if smoothing <= 0:
        raise SpnInputError("smoothing pseudo-count must be positive")
    num_classes = num_classes or maps[0].catalogue.num_classes
    counts = edge_class_counts(maps, num_classes) + smoothing
    return PairwisePotential(counts / counts.sum())


@dataclass(frozen=True, eq=False)
class MrfInstance:
    node_ids: Tuple[int, ...]
    edges: np.ndarray
    unary: np.ndarray
    pairwise: PairwisePotential
    # per-node shift removed from the unaries, added back for likelihood scores
    shift: np.ndarray
    num_places: int

    @property
    def num_classes(self) -> int:
        return self.unary.shape[1]


def build_mrf(semantic_map: SemanticMap, place_model: PlaceModel, pairwise: PairwisePotential,
              floor: float = UNARY_FLOOR, unknown: str = "observe") -> MrfInstance:
    if pairwise.num_classes != place_model.num_classes:
        raise SpnInputError("pairwise potential and place model disagree on the class count")
    node_ids = tuple(semantic_map.node_ids)
    index = {n: j for j, n in enumerate(node_ids)}
    unary = np.zeros((len(node_ids), place_model.num_classes))
    shift = np.zeros(len(node_ids))
    places = semantic_map.places
    if places:
        ll = class_log_likelihoods(place_model, [semantic_map.geometry[p] for p in places], unknown)
        top = np.max(ll, axis=1)
        top = np.where(np.isfinite(top), top, 0.0)
        rows = [index[p] for p in places]
        unary[rows] = np.maximum(ll - top[:, None], floor)
        shift[rows] = top
    edges = np.array([(index[a], index[b]) for a, b in semantic_map.edges], dtype=np.int64).reshape(-1, 2)
    return MrfInstance(node_ids, edges, unary, pairwise, shift, len(places))


@dataclass(frozen=True)
class BpConfig:
    """Loopy BP schedule.

    New messages are mixed with ``damping`` of the old ones. On a tree the
    undamped schedule (``damping=0``) converges within diameter + 1
    synchronous iterations; damping slows this down geometrically.
    """

    max_iters: int = 1000
    damping: float = 0.5
    tol: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 0 or self.tol <= 0 or not 0 <= self.damping < 1:
            raise SpnInputError("need max_iters >= 0, tol > 0 and damping in [0, 1)")


@dataclass(frozen=True, eq=False)
class BpResult:
    beliefs: np.ndarray
    converged: bool
    iterations: int
    residual: float
    # log messages per directed edge, rows aligned with ``directed_edges``
    messages: np.ndarray

    @property
    def diagnostics(self) -> BpDiagnostics:
        return BpDiagnostics(converged=self.converged, iterations=self.iterations, residual=self.residual)


def directed_edges(mrf: MrfInstance) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sources, targets and the index of each directed edge's reverse."""
    e = len(mrf.edges)
    src = np.concatenate([mrf.edges[:, 0], mrf.edges[:, 1]])
    dst = np.concatenate([mrf.edges[:, 1], mrf.edges[:, 0]])
    reverse = np.concatenate([np.arange(e, 2 * e), np.arange(e)])
    return src, dst, reverse


def _incoming(messages: np.ndarray, dst: np.ndarray, n: int) -> np.ndarray:
    total = np.zeros((n, messages.shape[1]))
    np.add.at(total, dst, messages)
    return total


def loopy_bp(mrf: MrfInstance, cfg: BpConfig = BpConfig()) -> BpResult:
    """Synchronous damped sum-product; non-convergence is reported, not raised."""
    n, c = mrf.unary.shape
    src, dst, reverse = directed_edges(mrf)
    log_psi = mrf.pairwise.log_matrix
    messages = np.full((len(src), c), -np.log(c))
    residual = 0.0
    converged = True
    iterations = 0
    if len(src):
        converged = False
        for iterations in range(1, cfg.max_iters + 1):
            incoming = _incoming(messages, dst, n)
            cavity = mrf.unary[src] + incoming[src] - messages[reverse]
            update = logsumexp(cavity[:, :, None] + log_psi[None, :, :], axis=1)
            update -= logsumexp(update, axis=1, keepdims=True)
            if cfg.damping > 0:
                update = np.logaddexp(np.log1p(-cfg.damping) + update, np.log(cfg.damping) + messages)
            residual = float(np.max(np.abs(np.exp(update) - np.exp(messages))))
            messages = update
            if residual < cfg.tol:
                converged = True
                break
        if not converged:
            logger.warning("loopy BP stopped after %d iterations, residual %.3g", iterations, residual)
    beliefs = softmax(mrf.unary + _incoming(messages, dst, n), axis=1)
    return BpResult(beliefs, converged, iterations, residual, messages)


def bethe_log_partition(mrf: MrfInstance, result: BpResult) -> float:
    """Negative Bethe free energy at the BP beliefs; exact on trees."""
    n, c = mrf.unary.shape
    beliefs = result.beliefs
    theta = mrf.unary
    degree = np.bincount(mrf.edges.ravel(), minlength=n) if len(mrf.edges) else np.zeros(n, dtype=np.int64)
    node_term = np.sum(xlogy(beliefs, beliefs) - beliefs * theta, axis=1)
    free_energy = -float(np.sum((degree - 1) * node_term))
    if len(mrf.edges):
        src, dst, reverse = directed_edges(mrf)
        incoming = _incoming(result.messages, dst, n)
        e = len(mrf.edges)
        i, j = mrf.edges[:, 0], mrf.edges[:, 1]
        # cavity terms: everything entering i except from j, and vice versa
        cav_i = theta[i] + incoming[i] - result.messages[e:]
        cav_j = theta[j] + incoming[j] - result.messages[:e]
        log_psi = mrf.pairwise.log_matrix
        joint = cav_i[:, :, None] + cav_j[:, None, :] + log_psi[None]
        pair = np.exp(joint - logsumexp(joint, axis=(1, 2), keepdims=True))
        energy = theta[i][:, :, None] + theta[j][:, None, :] + log_psi[None]
        free_energy += float(np.sum(xlogy(pair, pair) - pair * energy))
    return -free_energy


@dataclass(frozen=True, eq=False)
class MrfOutputs:
    classification: Dict[int, ClassPrediction]
    placeholders: Dict[int, ClassPrediction]
    novelty: NoveltyScore
    diagnostics: BpDiagnostics


def mrf_tasks(mrf: MrfInstance, result: BpResult, semantic_map: SemanticMap,
              threshold: Optional[float] = None) -> MrfOutputs:
    """Belief argmax for both labelling tasks; Bethe ``log Z`` per place for novelty."""
    if tuple(semantic_map.node_ids) != mrf.node_ids:
        raise MapError("map nodes differ from the field's nodes")
    index = {n: j for j, n in enumerate(mrf.node_ids)}

    def predict(nodes):
        return {n: ClassPrediction(n, result.beliefs[index[n]].copy(), int(np.argmax(result.beliefs[index[n]])))
                for n in nodes}

    total = bethe_log_partition(mrf, result) + float(mrf.shift.sum())
    novelty = NoveltyScore(total, total / max(1, mrf.num_places), threshold)
    return MrfOutputs(predict(semantic_map.places), predict(semantic_map.placeholders), novelty,
                      result.diagnostics)
