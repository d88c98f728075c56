"""
Structure generation and parameter learning for sum-product networks.

Structures come from recursive random decompositions of the variable set.
Parameters are fitted by mini-batch gradient ascent with a Euclidean
projection back onto the floored probability simplex after every step, or
by EM for the generative loss.
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from toponets.errors import PruneError, SpnInputError, TrainingDivergedError
from toponets.inference import backward, compile_schedule, evaluate_batch, forward
from toponets.models import LabeledSampleRecord
from toponets.spn import (Evidence, NodeKind, Spn, SpnBuilder, VarId, check_validity, evidence_matrix,
                          expand_segments, is_normalized, remove_unreachable)

logger = logging.getLogger(__name__)


class Loss(str, enum.Enum):
    GENERATIVE = "generative"
    DISCRIMINATIVE = "discriminative"


def _from_dict(cls, data: Optional[dict]):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise SpnInputError(f"{cls.__name__}: unknown fields {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class StructureConfig:
    num_decompositions_per_level: int = 2
    num_subsets_per_decomposition: int = 2
    num_mixtures_per_scope: int = 2
    max_depth: int = 2
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("num_decompositions_per_level", "num_subsets_per_decomposition",
                     "num_mixtures_per_scope"):
            if getattr(self, name) < 1:
                raise SpnInputError(f"{name} must be >= 1")
        if self.max_depth < 0:
            raise SpnInputError("max_depth must be >= 0")

    from_dict = classmethod(_from_dict)


@dataclass(frozen=True)
class TrainConfig:
    loss: Loss = Loss.GENERATIVE
    learning_rate: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    weight_floor: float = 1e-6
    prune_threshold: float = 0.0
    optimizer: str = "gd"
    grad_chunk: int = 32
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "loss", Loss(self.loss))
        if self.learning_rate <= 0:
            raise SpnInputError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.grad_chunk < 1 or self.workers < 1:
            raise SpnInputError("epochs, batch_size, grad_chunk and workers must be positive")
        if self.weight_floor <= 0:
            raise SpnInputError("weight_floor must be positive")
        if not 0 <= self.prune_threshold < 1:
            raise SpnInputError("prune_threshold must lie in [0, 1)")
        if self.optimizer not in ("gd", "em"):
            raise SpnInputError(f"unknown optimizer {self.optimizer!r}")
        if self.optimizer == "em" and self.loss != Loss.GENERATIVE:
            raise SpnInputError("EM only applies to the generative loss")

    from_dict = classmethod(_from_dict)


@dataclass(frozen=True)
class HybridConfig:
    discriminative: TrainConfig = field(default_factory=lambda: TrainConfig(loss=Loss.DISCRIMINATIVE))
    generative: TrainConfig = field(default_factory=TrainConfig)
    warm_start_epochs: int = 3

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "HybridConfig":
        data = dict(data or {})
        disc = dict(data.pop("discriminative", {}))
        disc.setdefault("loss", Loss.DISCRIMINATIVE)
        return cls(discriminative=TrainConfig.from_dict(disc),
                   generative=TrainConfig.from_dict(data.pop("generative", {})),
                   **data)


@dataclass(frozen=True)
class LabeledSample:
    evidence: Evidence
    label: int = 0
    weight: float = 1.0

    def __post_init__(self):
        if self.label < 0:
            raise SpnInputError("label must be non-negative")
        if self.weight <= 0:
            raise SpnInputError("sample weight must be positive")


@dataclass
class TrainResult:
    spn: Spn
    trace: pd.DataFrame


@dataclass
class HybridResult:
    spn: Spn
    warm_start_trace: pd.DataFrame
    discriminative_trace: pd.DataFrame
    generative_trace: pd.DataFrame


@dataclass(frozen=True)
class LayerAnnotation:
    """Marks the discriminative bottom layer of a layered network.

    ``bottom`` flags the nodes below (and including) the per-class roots.
    """

    class_roots: Tuple[int, ...] = ()
    bottom: Optional[np.ndarray] = None
    bottom_trained: bool = False


# -- structure generation ---------------------------------------------------

class DenseGenerator:
    """Random-decomposition structure writer.

    Indicators may be shared with other generators writing into the same
    builder; singleton mixtures are shared within one generator.
    """

    def __init__(self, builder: SpnBuilder, cfg: StructureConfig,
                 rng: Optional[np.random.Generator] = None,
                 indicators: Optional[Dict[Tuple[int, int], int]] = None):
        self.builder = builder
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
        self.indicators = indicators if indicators is not None else {}
        self._singletons: Dict[int, List[int]] = {}

    def _weights(self, n: int) -> np.ndarray:
        w = self.rng.uniform(0.5, 1.5, size=n)
        return w / w.sum()

    def indicator(self, var: int, value: int) -> int:
        key = (var, value)
        if key not in self.indicators:
            self.indicators[key] = self.builder.indicator(var, value)
        return self.indicators[key]

    def singleton(self, var: int, count: int) -> List[int]:
        sums = self._singletons.setdefault(var, [])
        card = self.builder.variables[var].cardinality
        while len(sums) < count:
            leaves = [self.indicator(var, v) for v in range(card)]
            sums.append(self.builder.sum(leaves, self._weights(card)))
        return sums[:count]

    def generate(self, scope: Sequence[int], num_out: int, depth: int = 0) -> List[int]:
        scope = sorted(scope)
        if not scope:
            raise SpnInputError("cannot generate a structure over an empty scope")
        if len(scope) == 1:
            return self.singleton(scope[0], num_out)
        if depth >= self.cfg.max_depth:
            return [self.builder.product([self.singleton(v, j + 1)[j] for v in scope])
                    for j in range(num_out)]
        m = self.cfg.num_mixtures_per_scope
        parts = min(self.cfg.num_subsets_per_decomposition, len(scope))
        products = []
        for _ in range(self.cfg.num_decompositions_per_level):
            order = self.rng.permutation(scope)
            subsets = [sorted(int(v) for v in s) for s in np.array_split(order, parts)]
            outputs = [self.generate(s, m, depth + 1) for s in subsets]
            products.extend(self.builder.product([out[j] for out in outputs]) for j in range(m))
        return [self.builder.sum(products, self._weights(len(products))) for _ in range(num_out)]


def generate_dense_structure(variables: Sequence[VarId], cfg: StructureConfig = StructureConfig()) -> Spn:
    """Random dense structure over ``variables`` with a single root."""
    if not variables:
        raise SpnInputError("cannot generate a structure over no variables")
    builder = SpnBuilder(variables)
    generator = DenseGenerator(builder, cfg)
    root = generator.generate([v.index for v in variables], 1)[0]
    spn = builder.build(root)
    check_validity(spn)
    return spn


def uniform_weights(spn: Spn) -> Spn:
    """Same structure with every sum node's weights made uniform."""
    counts = np.diff(spn.child_ptr).astype(np.float64)
    weights = 1.0 / counts[spn.edge_parent]
    return spn.with_weights(weights)


# -- projection ------------------------------------------------------------------

def project_to_simplex(spn: Spn, weights: np.ndarray, nodes: np.ndarray, floor: float) -> np.ndarray:
    """Euclidean projection of each listed sum node's weights onto
    ``{w >= floor, sum(w) = 1}``; other entries are returned unchanged."""
    weights = np.array(weights, dtype=np.float64)
    counts = spn.child_ptr[nodes + 1] - spn.child_ptr[nodes]
    for fan_in in np.unique(counts):
        group = nodes[counts == fan_in]
        if fan_in * floor >= 1.0:
            raise SpnInputError(f"weight floor {floor} infeasible for fan-in {fan_in}")
        edges, _, _ = expand_segments(spn.child_ptr, group)
        block = weights[edges].reshape(len(group), fan_in) - floor
        budget = 1.0 - fan_in * floor
        weights[edges] = (_project_rows(block, budget) + floor).ravel()
    return weights


def _project_rows(v: np.ndarray, z: float) -> np.ndarray:
    k = v.shape[1]
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - z
    ok = u - css / np.arange(1, k + 1) > 0
    rho = k - 1 - np.argmax(ok[:, ::-1], axis=1)
    theta = css[np.arange(len(v)), rho] / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


# -- training ------------------------------------------------------------------

def dynamic_mask(spn: Spn, trainable: np.ndarray) -> np.ndarray:
    """Nodes whose value depends on a trainable weight."""
    mask = np.zeros(spn.num_nodes, dtype=bool)
    mask[trainable] = True
    for level in compile_schedule(spn).levels:
        for group in level.groups:
            mask[group.nodes] |= np.logical_or.reduceat(mask[group.children], group.starts)
    return mask


class _Trainer:
    def __init__(self, spn: Spn, data: Sequence[LabeledSample], cfg: TrainConfig,
                 class_roots: Sequence[int], trainable: np.ndarray):
        self.cfg = cfg
        self.spn = spn
        self.class_roots = np.asarray(class_roots, dtype=np.int64)
        self.labels = np.array([s.label for s in data], dtype=np.int64)
        self.sample_weights = np.array([s.weight for s in data], dtype=np.float64)
        if len(self.class_roots) and np.any(self.labels >= len(self.class_roots)):
            raise SpnInputError(f"label outside the {len(self.class_roots)} annotated classes")
        self.table = evidence_matrix(spn, [s.evidence for s in data])
        self.trainable = np.asarray(trainable, dtype=np.int64)
        self.edges, _, _ = expand_segments(spn.child_ptr, self.trainable)
        self.edge_parent = spn.edge_parent[self.edges]
        self.edge_child = spn.children[self.edges]
        self.stop_height = int(spn.heights[self.trainable].min())
        dynamic = dynamic_mask(spn, self.trainable)
        parent_dynamic = dynamic[spn.edge_parent]
        frontier = np.unique(spn.children[parent_dynamic & ~dynamic[spn.children]])
        self.frozen = frontier[spn.kinds[frontier] != NodeKind.INDICATOR]
        self.fixed = self._frontier_values() if len(self.frozen) else None

    def _log_lambda(self, rows: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.table[rows].astype(np.float64))

    def _frontier_values(self) -> np.ndarray:
        out = np.empty((len(self.frozen), len(self.table)))
        for lo in range(0, len(self.table), 256):
            rows = np.arange(lo, min(lo + 256, len(self.table)))
            values = forward(self.spn, self._log_lambda(rows))
            out[:, rows] = values[self.frozen]
        logger.debug("cached %d frozen sub-network values", len(self.frozen))
        return out

    def chunk(self, spn: Spn, rows: np.ndarray):
        """Weighted gradient sum, loss sum, correct count over one chunk."""
        fixed = self.fixed[:, rows] if self.fixed is not None else None
        values = forward(spn, self._log_lambda(rows), frozen=self.frozen, fixed_values=fixed)
        labels = self.labels[rows]
        sw = self.sample_weights[rows]
        correct = 0.0
        if len(self.class_roots):
            class_values = values[self.class_roots]
            correct = float(np.sum(sw * (np.argmax(class_values, axis=0) == labels)))
        if self.cfg.loss == Loss.DISCRIMINATIVE:
            norm = logsumexp(class_values, axis=0)
            own = class_values[labels, np.arange(len(rows))]
            losses = norm - own
            pos = self._edge_flow(spn, values, self._own_seeds(values, labels))
            # log p_c - log S_c is the same for every class
            neg_seeds = {int(node): -norm for node in self.class_roots}
            neg = self._edge_flow(spn, values, neg_seeds)
            per_sample = np.exp(pos) - np.exp(neg)
        else:
            if len(self.class_roots):
                objective = values[self.class_roots[labels], np.arange(len(rows))]
                seeds = self._own_seeds(values, labels)
            else:
                objective = values[spn.root]
                seeds = {spn.root: -objective}
            losses = -objective
            per_sample = np.exp(self._edge_flow(spn, values, seeds))
        grad = per_sample @ sw
        return grad, float(losses @ sw), correct

    def _own_seeds(self, values, labels):
        seeds = {}
        for c, node in enumerate(self.class_roots):
            seeds[int(node)] = np.where(labels == c, -values[node], -np.inf)
        return seeds

    def _edge_flow(self, spn, values, seeds) -> np.ndarray:
        grads = backward(spn, values, seeds, frozen=self.frozen, stop_height=self.stop_height)
        return grads[self.edge_parent] + values[self.edge_child]

    def batch(self, spn: Spn, rows: np.ndarray, pool: Optional[ThreadPoolExecutor]):
        chunks = [rows[i:i + self.cfg.grad_chunk] for i in range(0, len(rows), self.cfg.grad_chunk)]
        results = list(pool.map(lambda r: self.chunk(spn, r), chunks)) if pool else \
            [self.chunk(spn, r) for r in chunks]
        grad = np.zeros(len(self.edges))
        loss = correct = 0.0
        for g, l, c in results:
            grad += g
            loss += l
            correct += c
        return grad, loss, correct


def train(spn: Spn, data: Sequence[LabeledSample], cfg: TrainConfig = TrainConfig(), *,
          class_roots: Sequence[int] = (), trainable: Optional[Iterable[int]] = None) -> TrainResult:
    """Fit sum weights; returns the trained network and an epoch trace.

    With ``class_roots`` the generative loss is class-conditional (each
    sample scores under its own class root) and the discriminative loss is
    the cross-entropy of the softmax over the class roots. ``trainable``
    restricts updates to the listed sum nodes; the rest stay bit-identical.
    """
    if not data:
        raise SpnInputError("training data is empty")
    if cfg.loss == Loss.DISCRIMINATIVE and not len(class_roots):
        raise SpnInputError("the discriminative loss needs per-class roots")
    nodes = spn.sum_nodes if trainable is None else np.asarray(sorted(set(trainable)), dtype=np.int64)
    if len(nodes) == 0 or np.any(spn.kinds[nodes] != NodeKind.SUM):
        raise SpnInputError("trainable nodes must be a nonempty set of sum nodes")

    spn = spn.with_weights(project_to_simplex(spn, spn.weights, nodes, cfg.weight_floor))
    trainer = _Trainer(spn, data, cfg, class_roots, nodes)
    rng = np.random.default_rng(cfg.seed)
    total_weight = float(trainer.sample_weights.sum())
    rows_all = np.arange(len(data))
    records = []
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(rows_all)
            epoch_loss = epoch_correct = 0.0
            em_counts = np.zeros(len(trainer.edges))
            for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
                rows = np.sort(order[lo:lo + cfg.batch_size])
                grad, loss, correct = trainer.batch(spn, rows, pool)
                batch_weight = float(trainer.sample_weights[rows].sum())
                if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                    raise TrainingDivergedError(epoch, b, loss / batch_weight)
                epoch_loss += loss
                epoch_correct += correct
                if cfg.optimizer == "em":
                    em_counts += grad * spn.weights[trainer.edges]
                    continue
                weights = spn.weights.copy()
                weights[trainer.edges] += cfg.learning_rate * grad / batch_weight
                spn = spn.with_weights(project_to_simplex(spn, weights, nodes, cfg.weight_floor))
            if cfg.optimizer == "em":
                spn = _em_update(spn, trainer, nodes, em_counts, cfg.weight_floor)
            accuracy = epoch_correct / total_weight if len(trainer.class_roots) else float("nan")
            records.append({"epoch": epoch, "loss": epoch_loss / total_weight, "accuracy": accuracy})
            logger.debug("epoch %d loss %.6f accuracy %.4f", epoch, records[-1]["loss"], accuracy)
    finally:
        if pool is not None:
            pool.shutdown()

    if cfg.prune_threshold > 0:
        if trainable is None and not len(class_roots):
            spn = prune(spn, cfg.prune_threshold)
        else:
            logger.warning("prune_threshold ignored for a network with annotated layers")
    return TrainResult(spn, pd.DataFrame(records, columns=["epoch", "loss", "accuracy"]))


def _em_update(spn: Spn, trainer: _Trainer, nodes: np.ndarray, counts: np.ndarray, floor: float) -> Spn:
    parents = trainer.edge_parent
    _, starts = np.unique(parents, return_index=True)
    seg_counts = np.diff(np.append(starts, len(parents)))
    totals = np.repeat(np.add.reduceat(counts, starts), seg_counts)
    weights = spn.weights.copy()
    flowing = totals > 0
    weights[trainer.edges[flowing]] = counts[flowing] / totals[flowing]
    return spn.with_weights(project_to_simplex(spn, weights, nodes, floor))


# -- pruning ---------------------------------------------------------------------

@dataclass(frozen=True)
class PruneReport:
    threshold: float
    nodes_before: int
    nodes_after: int
    edges_before: int
    edges_after: int
    log_likelihood_before: float
    log_likelihood_after: float

    @property
    def degradation(self) -> float:
        return self.log_likelihood_before - self.log_likelihood_after


def prune(spn: Spn, threshold: float) -> Spn:
    """Drop sum children weighted below ``threshold``, unreachable nodes, and renormalize."""
    if not 0 <= threshold < 1:
        raise SpnInputError("prune threshold must lie in [0, 1)")
    if not is_normalized(spn):
        raise SpnInputError("prune expects a normalized network")
    parent = spn.edge_parent
    is_sum_edge = spn.kinds[parent] == NodeKind.SUM
    keep = ~is_sum_edge | (spn.weights >= threshold)
    kept_per_node = np.bincount(parent[keep], minlength=spn.num_nodes)
    empty = np.flatnonzero((spn.kinds == NodeKind.SUM) & (kept_per_node == 0))
    if len(empty):
        raise PruneError(int(empty[0]))
    ptr = np.zeros(spn.num_nodes + 1, dtype=np.int64)
    np.cumsum(kept_per_node, out=ptr[1:])
    weights = spn.weights[keep]
    kept_parent = parent[keep]
    sums = np.bincount(kept_parent, weights=weights, minlength=spn.num_nodes)
    weights = np.where(spn.kinds[kept_parent] == NodeKind.SUM, weights / sums[kept_parent], 1.0)
    pruned = Spn(spn.kinds, spn.ind_var, spn.ind_value, ptr, spn.children[keep], weights,
                 spn.root, spn.variables)
    pruned = remove_unreachable(pruned)
    check_validity(pruned)
    logger.debug("pruned %d -> %d nodes at threshold %g", spn.num_nodes, pruned.num_nodes, threshold)
    return pruned


def prune_report(spn: Spn, threshold: float, reference: Sequence[Evidence]) -> Tuple[Spn, PruneReport]:
    pruned = prune(spn, threshold)
    before = float(np.mean(evaluate_batch(spn, reference))) if reference else float("nan")
    after = float(np.mean(evaluate_batch(pruned, reference))) if reference else float("nan")
    return pruned, PruneReport(threshold, spn.num_nodes, pruned.num_nodes, spn.num_edges,
                               pruned.num_edges, before, after)


# -- hybrid training -------------------------------------------------------------

def hybrid_train(spn: Spn, annotation: Optional[LayerAnnotation], data: Sequence[LabeledSample],
                 cfg: HybridConfig = HybridConfig()) -> HybridResult:
    """Discriminative bottom (then frozen), generative top.

    The bottom phase starts with a few class-conditional generative epochs
    and is skipped when ``annotation.bottom_trained`` is set.
    """
    if annotation is None or not annotation.class_roots or annotation.bottom is None:
        raise SpnInputError("layer boundary not annotated")
    bottom = np.asarray(annotation.bottom, dtype=bool)
    if bottom.shape != (spn.num_nodes,):
        raise SpnInputError("layer annotation does not match the network")
    sums = spn.sum_nodes
    bottom_sums = sums[bottom[sums]]
    top_sums = sums[~bottom[sums]]
    empty = pd.DataFrame(columns=["epoch", "loss", "accuracy"])
    warm_trace = disc_trace = empty
    roots = annotation.class_roots

    if not annotation.bottom_trained and len(bottom_sums):
        if cfg.warm_start_epochs:
            warm_cfg = replace(cfg.discriminative, loss=Loss.GENERATIVE, epochs=cfg.warm_start_epochs,
                               prune_threshold=0.0)
            result = train(spn, data, warm_cfg, class_roots=roots, trainable=bottom_sums)
            spn, warm_trace = result.spn, result.trace
        result = train(spn, data, cfg.discriminative, class_roots=roots, trainable=bottom_sums)
        spn, disc_trace = result.spn, result.trace
        logger.info("discriminative phase: final accuracy %.4f",
                    disc_trace["accuracy"].iloc[-1] if len(disc_trace) else float("nan"))

    gen_trace = empty
    if len(top_sums):
        result = train(spn, data, cfg.generative, trainable=top_sums)
        spn, gen_trace = result.spn, result.trace
    return HybridResult(spn, warm_trace, disc_trace, gen_trace)


# -- datasets and traces ------------------------------------------------------------

def save_samples(samples: Iterable[LabeledSample], path: Union[str, Path]) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for s in samples:
            record = LabeledSampleRecord(
                evidence={int(k): [bool(x) for x in v] for k, v in s.evidence.masks.items()},
                label=s.label, weight=s.weight)
            fh.write(record.model_dump_json() + "\n")
    return path


def load_samples(path: Union[str, Path]) -> List[LabeledSample]:
    samples = []
    with Path(path).open() as fh:
        for line in fh:
            if not line.strip():
                continue
            record = LabeledSampleRecord.model_validate_json(line)
            masks = {k: np.asarray(v, dtype=bool) for k, v in record.evidence.items()}
            samples.append(LabeledSample(Evidence(masks), record.label, record.weight))
    return samples


def write_trace(trace: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    trace.to_csv(path, index=False, float_format="%.10g")
    return path
