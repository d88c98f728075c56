"""
Sub-map templates, template networks and their instantiation over whole maps.

A template network models the classes and geometry of a small connected
group of places. Each slot owns a copy of the place network's class
sub-networks (the bottom layers) joined with a class indicator; a few latent
components above capture how the slot classes co-occur. A map is covered by
N random decompositions into template-shaped parts. Every part gets a copy
of the template's top layers, parts of one decomposition are joined by a
product, and a uniform sum mixes the decompositions.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field, fields, replace
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from networkx.algorithms.isomorphism import GraphMatcher
from pydantic import ValidationError

from toponets.errors import MapError, SpnFormatError, SpnInputError, TemplateDataError, UntrainedModelError
from toponets.inference import forward, marginals_from_indicators, mpe_from_indicators
from toponets.learn import HybridConfig, LabeledSample, LayerAnnotation, TrainConfig, hybrid_train
from toponets.models import Decision, ModelManifest, NoveltyResult, PlacePrediction, TemplateEntry, TemplateShape
from toponets.place_model import (CELLS_PER_PLACE, PlaceModel, build_place_model, load_place_model,
                                  save_place_model, train_place_model)
from toponets.semmap import SemanticMap, file_sha256
from toponets.serialization import load_spn, save_spn
from toponets.spn import Evidence, Spn, SpnBuilder, VarId

logger = logging.getLogger(__name__)

VARS_PER_NODE = 1 + CELLS_PER_PLACE
MAX_DECOMPOSITION_RETRIES = 10


# -- templates ----------------------------------------------------------------------

@dataclass(frozen=True)
class SubMapTemplate:
    """A connected shape with ordered slots; ``edges`` join slot indices."""

    name: str
    slots: int
    edges: Tuple[Tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(tuple(sorted(e)) for e in self.edges))
        if self.slots < 1:
            raise SpnInputError(f"template {self.name!r} needs at least one slot")
        for a, b in self.edges:
            if a == b or not (0 <= a < self.slots and 0 <= b < self.slots):
                raise SpnInputError(f"template {self.name!r}: bad edge ({a}, {b})")
        if not nx.is_connected(self.graph):
            raise SpnInputError(f"template {self.name!r} is not connected")

    @cached_property
    def graph(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.slots))
        graph.add_edges_from(self.edges)
        return graph

    @cached_property
    def automorphisms(self) -> Tuple[Tuple[int, ...], ...]:
        matcher = GraphMatcher(self.graph, self.graph)
        return tuple(sorted(tuple(m[i] for i in range(self.slots)) for m in matcher.isomorphisms_iter()))

    def canonical(self, nodes: Sequence[int]) -> Tuple[int, ...]:
        """Lexicographically smallest equivalent slot assignment."""
        return min(tuple(int(nodes[p[i]]) for i in range(self.slots)) for p in self.automorphisms)

    def to_shape(self) -> TemplateShape:
        return TemplateShape(name=self.name, slots=self.slots, edges=list(self.edges))

    @classmethod
    def from_shape(cls, shape: TemplateShape) -> "SubMapTemplate":
        return cls(shape.name, shape.slots, tuple(tuple(e) for e in shape.edges))


SINGLE = SubMapTemplate("single", 1)
EDGE = SubMapTemplate("edge", 2, ((0, 1),))
CHAIN3 = SubMapTemplate("chain3", 3, ((0, 1), (1, 2)))
DEFAULT_TEMPLATES = (SINGLE, EDGE, CHAIN3)


# -- decomposition --------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class Part:
    template: str
    nodes: Tuple[int, ...]


@dataclass(frozen=True)
class Decomposition:
    parts: Tuple[Part, ...]

    @property
    def key(self) -> Tuple[Part, ...]:
        return tuple(sorted(self.parts))

    def __len__(self) -> int:
        return len(self.parts)


def _embed(template: SubMapTemplate, graph: nx.Graph, free: set, anchor: int,
           rng: np.random.Generator) -> Optional[Tuple[int, ...]]:
    for root_slot in rng.permutation(template.slots):
        # re-root the search so ``anchor`` may take any slot
        bfs = [(int(root_slot), None)] + [(c, p) for p, c in nx.bfs_edges(template.graph, int(root_slot))]
        assignment = {int(root_slot): anchor}
        if _extend(template, graph, free, bfs, 1, assignment, rng):
            return tuple(assignment[s] for s in range(template.slots))
    return None


def _extend(template, graph, free, bfs, position, assignment, rng) -> bool:
    if position == len(bfs):
        return True
    slot, parent = bfs[position]
    used = set(assignment.values())
    candidates = [n for n in graph.neighbors(assignment[parent]) if n in free and n not in used]
    for index in rng.permutation(len(candidates)):
        node = candidates[index]
        if all(graph.has_edge(node, assignment[other])
               for other in template.graph.neighbors(slot) if other in assignment):
            assignment[slot] = node
            if _extend(template, graph, free, bfs, position + 1, assignment, rng):
                return True
            del assignment[slot]
    return False


def decompose(semantic_map: SemanticMap, templates: Sequence[SubMapTemplate] = DEFAULT_TEMPLATES,
              seed: int = 0) -> Decomposition:
    """Random vertex partition into template-shaped parts.

    Larger templates are matched first over a shuffled vertex order; the
    single-node template covers whatever is left.
    """
    singles = [t for t in templates if t.slots == 1]
    if not singles:
        raise TemplateDataError("single", "the template set needs a single-node template")
    rng = np.random.default_rng(seed)
    graph = semantic_map.graph
    free = set(graph.nodes)
    parts = []
    for template in sorted((t for t in templates if t.slots > 1), key=lambda t: (-t.slots, t.name)):
        for anchor in rng.permutation(sorted(free)):
            anchor = int(anchor)
            if anchor not in free:
                continue
            nodes = _embed(template, graph, free, anchor, rng)
            if nodes is not None:
                parts.append(Part(template.name, template.canonical(nodes)))
                free.difference_update(nodes)
    parts.extend(Part(singles[0].name, (n,)) for n in sorted(free))
    return Decomposition(tuple(parts))


def validate_decomposition(semantic_map: SemanticMap, decomposition: Decomposition,
                           templates: Sequence[SubMapTemplate] = DEFAULT_TEMPLATES) -> List[str]:
    """Problems found in ``decomposition``; an empty list means it is valid."""
    by_name = {t.name: t for t in templates}
    graph = semantic_map.graph
    problems = []
    seen: Dict[int, int] = {}
    for k, part in enumerate(decomposition.parts):
        template = by_name.get(part.template)
        if template is None:
            problems.append(f"part {k}: unknown template {part.template!r}")
            continue
        if len(part.nodes) != template.slots:
            problems.append(f"part {k}: {len(part.nodes)} nodes for {template.slots} slots")
            continue
        for node in part.nodes:
            if node not in graph:
                problems.append(f"part {k}: node {node} is not in the map")
            elif node in seen:
                problems.append(f"part {k}: node {node} already covered by part {seen[node]}")
            else:
                seen[node] = k
        for a, b in template.edges:
            if not graph.has_edge(part.nodes[a], part.nodes[b]):
                problems.append(f"part {k}: slots {a}-{b} map to non-adjacent nodes")
    missing = set(graph.nodes) - set(seen)
    if missing:
        problems.append(f"nodes {sorted(missing)[:10]} are not covered")
    return problems


# -- template networks -------------------------------------------------------------------

@dataclass(frozen=True)
class ToponetConfig:
    num_components: Optional[int] = None
    preferred_weight: float = 0.6
    train_decompositions: int = 5
    max_parts_per_template: Optional[int] = 2000
    share_place_model: bool = True
    unknown: str = "observe"
    training: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=5, learning_rate=0.05))
    place_training: HybridConfig = field(default_factory=HybridConfig)
    seed: int = 0

    def __post_init__(self):
        if self.num_components is not None and self.num_components < 1:
            raise SpnInputError("num_components must be >= 1")
        if not 0 < self.preferred_weight < 1:
            raise SpnInputError("preferred_weight must lie in (0, 1)")
        if self.train_decompositions < 1:
            raise SpnInputError("train_decompositions must be >= 1")
        if self.unknown not in ("observe", "marginalize"):
            raise SpnInputError(f"unknown-cell policy must be 'observe' or 'marginalize', got {self.unknown!r}")

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "ToponetConfig":
        data = dict(data or {})
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise SpnInputError(f"ToponetConfig: unknown fields {sorted(unknown)}")
        if "training" in data:
            data["training"] = TrainConfig.from_dict(data["training"])
        if "place_training" in data:
            data["place_training"] = HybridConfig.from_dict(data["place_training"])
        return cls(**data)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["training"] = {**self.training.__dict__, "loss": self.training.loss.value}
        out["place_training"] = {
            "discriminative": {**self.place_training.discriminative.__dict__,
                               "loss": self.place_training.discriminative.loss.value},
            "generative": {**self.place_training.generative.__dict__,
                           "loss": self.place_training.generative.loss.value},
            "warm_start_epochs": self.place_training.warm_start_epochs,
        }
        return out


@dataclass(frozen=True, eq=False)
class TemplateSpn:
    """Template network; slot ``s`` owns nodes ``[s * block_size, (s + 1) * block_size)``.

    Variable ``s * 1177`` is slot ``s``'s class, ``s * 1177 + 1 + k`` its
    grid cell ``k``.
    """

    template: SubMapTemplate
    spn: Spn
    place_model: PlaceModel
    trained: bool = False
    samples: int = 0

    @property
    def num_classes(self) -> int:
        return self.place_model.num_classes

    @property
    def block_size(self) -> int:
        return self.place_model.spn.num_nodes - 1 + 2 * self.num_classes

    @property
    def top_start(self) -> int:
        return self.template.slots * self.block_size

    @property
    def annotation(self) -> LayerAnnotation:
        bottom = np.zeros(self.spn.num_nodes, dtype=bool)
        bottom[:self.top_start] = True
        return LayerAnnotation(tuple(self.place_model.class_roots), bottom, bottom_trained=True)


def _place_block(builder: SpnBuilder, place_model: PlaceModel, slot: int) -> List[int]:
    """Copy the place network (minus its root) for ``slot``; returns the per-class ``Ind x root`` products."""
    pm = place_model.spn
    if pm.root != pm.num_nodes - 1:
        raise SpnInputError("place network root must be its last node")
    var_map = slot * VARS_PER_NODE + 1 + np.arange(len(pm.variables), dtype=np.int64)
    start = builder.append_block(pm, 0, pm.num_nodes - 1, var_map=var_map)
    class_var = slot * VARS_PER_NODE
    indicators = [builder.indicator(class_var, c) for c in range(place_model.num_classes)]
    return [builder.product([ind, start + root]) for ind, root in zip(indicators, place_model.class_roots)]


def build_template_spn(template: SubMapTemplate, place_model: PlaceModel,
                       cfg: ToponetConfig = ToponetConfig()) -> TemplateSpn:
    """Per-slot place blocks below, ``K`` latent co-occurrence components above.

    Component ``k`` initially prefers class ``(k + s * (k // C)) % C`` at
    slot ``s``: the first ``C`` components favour equal classes, the next
    ``C`` shifted ones.
    """
    if not place_model.trained:
        raise UntrainedModelError("template networks need a trained place model")
    c = place_model.num_classes
    k_count = cfg.num_components or (c if template.slots == 1 else 2 * c)
    variables = []
    for s in range(template.slots):
        variables.append(VarId(s * VARS_PER_NODE, c))
        variables.extend(VarId(s * VARS_PER_NODE + 1 + k, 3) for k in range(CELLS_PER_PLACE))
    builder = SpnBuilder(variables)
    slot_products = [_place_block(builder, place_model, s) for s in range(template.slots)]
    other = (1.0 - cfg.preferred_weight) / (c - 1)
    components = []
    for k in range(k_count):
        slot_sums = []
        for s, products in enumerate(slot_products):
            weights = np.full(c, other)
            weights[(k + s * (k // c)) % c] = cfg.preferred_weight
            slot_sums.append(builder.sum(products, weights))
        components.append(builder.product(slot_sums))
    root = builder.sum(components, [1.0 / k_count] * k_count)
    spn = builder.build(root)
    logger.debug("template %s: %d nodes, %d edges", template.name, spn.num_nodes, spn.num_edges)
    return TemplateSpn(template, spn, place_model)


def part_evidence(semantic_map: SemanticMap, nodes: Sequence[int], unknown: str = "observe",
                  with_labels: bool = True) -> Evidence:
    """Evidence over a template's slot variables for the map nodes in slot order."""
    masks = {}
    for s, node in enumerate(nodes):
        class_var = s * VARS_PER_NODE
        num_classes = semantic_map.catalogue.num_classes
        label = semantic_map.labels[node]
        mask = np.ones(num_classes, dtype=bool)
        if with_labels and label is not None:
            mask[:] = False
            mask[label] = True
        masks[class_var] = mask
        grid = semantic_map.geometry.get(node)
        if grid is None:
            masks.update({class_var + 1 + k: np.ones(3, dtype=bool) for k in range(CELLS_PER_PLACE)})
        else:
            masks.update(grid.evidence_masks(class_var + 1, unknown))
    return Evidence(masks)


# -- the model ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ToponetModel:
    templates: Tuple[TemplateSpn, ...]
    class_names: Tuple[str, ...]
    config: ToponetConfig = field(default_factory=ToponetConfig)

    def __post_init__(self):
        if not any(t.template.slots == 1 for t in self.templates):
            raise SpnInputError("a template set needs a single-node template")
        names = [t.template.name for t in self.templates]
        if len(set(names)) != len(names):
            raise SpnInputError("template names must be unique")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def trained(self) -> bool:
        return all(t.trained for t in self.templates)

    @property
    def shapes(self) -> Tuple[SubMapTemplate, ...]:
        return tuple(t.template for t in self.templates)

    @property
    def place_model(self) -> PlaceModel:
        return self.templates[0].place_model

    def template(self, name: str) -> TemplateSpn:
        for t in self.templates:
            if t.template.name == name:
                return t
        raise TemplateDataError(name, "not in this model")


def build_toponet(place_model: PlaceModel, class_names: Sequence[str],
                  templates: Sequence[SubMapTemplate] = DEFAULT_TEMPLATES,
                  cfg: ToponetConfig = ToponetConfig()) -> ToponetModel:
    if len(class_names) != place_model.num_classes:
        raise SpnInputError("class names do not match the place model")
    return ToponetModel(tuple(build_template_spn(t, place_model, cfg) for t in templates),
                        tuple(class_names), cfg)


def collect_parts(maps: Sequence[SemanticMap], templates: Sequence[SubMapTemplate],
                  decompositions: int, seed: int) -> Dict[str, List[Tuple[int, Tuple[int, ...]]]]:
    """Distinct ``(map index, slot nodes)`` parts per template over several decompositions per map."""
    found: Dict[str, set] = {t.name: set() for t in templates}
    rng = np.random.default_rng(seed)
    for m, semantic_map in enumerate(maps):
        for _ in range(decompositions):
            for part in decompose(semantic_map, templates, int(rng.integers(2 ** 32))).parts:
                found[part.template].add((m, part.nodes))
    return {name: sorted(parts) for name, parts in found.items()}


def train_toponet(model: ToponetModel, maps: Sequence[SemanticMap],
                  cfg: Optional[ToponetConfig] = None) -> ToponetModel:
    """Fit every template's top layers on the matching parts of labeled maps.

    With ``share_place_model`` off each template first gets its own place
    network, trained on the places its parts cover.
    """
    cfg = cfg or model.config
    if not maps:
        raise SpnInputError("training corpus is empty")
    for semantic_map in maps:
        if any(semantic_map.labels[n] is None for n in semantic_map.node_ids):
            raise MapError("training maps must be fully labeled")
    parts = collect_parts(maps, model.shapes, cfg.train_decompositions, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    trained = []
    for template_spn in model.templates:
        name = template_spn.template.name
        group = parts[name]
        if not group:
            raise TemplateDataError(name)
        if cfg.max_parts_per_template and len(group) > cfg.max_parts_per_template:
            keep = np.sort(rng.choice(len(group), size=cfg.max_parts_per_template, replace=False))
            group = [group[i] for i in keep]
        if not cfg.share_place_model:
            template_spn = _own_place_model(template_spn, maps, group, cfg)
        samples = [LabeledSample(part_evidence(maps[m], nodes, cfg.unknown)) for m, nodes in group]
        result = hybrid_train(template_spn.spn, template_spn.annotation, samples,
                              HybridConfig(generative=cfg.training, warm_start_epochs=0))
        logger.info("template %s: %d parts, final loss %.4f", name, len(samples),
                    result.generative_trace["loss"].iloc[-1] if len(result.generative_trace) else float("nan"))
        trained.append(replace(template_spn, spn=result.spn, trained=True, samples=len(samples)))
    return replace(model, templates=tuple(trained), config=cfg)


def _own_place_model(template_spn: TemplateSpn, maps, group, cfg: ToponetConfig) -> TemplateSpn:
    seen = sorted({(m, node) for m, nodes in group for node in nodes})
    grids = [maps[m].geometry[node] for m, node in seen]
    labels = [maps[m].labels[node] for m, node in seen]
    fresh = build_place_model(template_spn.num_classes, template_spn.place_model.structure)
    place_model, _ = train_place_model(fresh, grids, labels, cfg.place_training)
    return build_template_spn(template_spn.template, place_model, cfg)


# -- instantiation --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class InstantiatedToponet:
    """Mixture over decompositions of one map's node set.

    Node ``node_ids[j]`` owns class variable ``j * 1177`` and grid
    variables ``j * 1177 + 1 ..``.
    """

    spn: Spn
    node_ids: Tuple[int, ...]
    num_classes: int
    decompositions: Tuple[Decomposition, ...]
    decomposition_roots: Tuple[int, ...]

    @property
    def n_decompositions(self) -> int:
        return len(self.decompositions)

    @cached_property
    def _index(self) -> Dict[int, int]:
        return {n: j for j, n in enumerate(self.node_ids)}

    def class_variable(self, node: int) -> int:
        return self._index[node] * VARS_PER_NODE

    def geometry_variables(self, node: int) -> range:
        base = self._index[node] * VARS_PER_NODE + 1
        return range(base, base + CELLS_PER_PLACE)

    @cached_property
    def binding(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per variable: owning node id, and grid cell (``-1`` for the class variable)."""
        v = np.arange(len(self.spn.variables))
        nodes = np.asarray(self.node_ids, dtype=np.int64)[v // VARS_PER_NODE]
        return nodes, (v % VARS_PER_NODE) - 1


def _distinct_decompositions(semantic_map: SemanticMap, templates, n: int, seed: int) -> List[Decomposition]:
    rng = np.random.default_rng(seed)
    seen = set()
    chosen = []
    for i in range(n):
        for attempt in range(MAX_DECOMPOSITION_RETRIES):
            decomposition = decompose(semantic_map, templates, int(rng.integers(2 ** 32)))
            if decomposition.key not in seen:
                break
        else:
            logger.warning("decomposition %d duplicates an earlier one after %d retries", i,
                           MAX_DECOMPOSITION_RETRIES)
        seen.add(decomposition.key)
        chosen.append(decomposition)
    return chosen


def instantiate(model: ToponetModel, semantic_map: SemanticMap, n_decompositions: int = 40,
                seed: int = 0) -> InstantiatedToponet:
    """Copy template top layers onto every part of ``n_decompositions`` decompositions.

    Each place gets one block per distinct place network, shared by every
    part that covers it.
    """
    if not model.trained:
        untrained = [t.template.name for t in model.templates if not t.trained]
        raise UntrainedModelError(f"templates {untrained} are not trained")
    if n_decompositions < 1:
        raise SpnInputError("need at least one decomposition")
    node_ids = tuple(semantic_map.node_ids)
    index = {n: j for j, n in enumerate(node_ids)}
    c = model.num_classes
    variables = []
    for j in range(len(node_ids)):
        variables.append(VarId(j * VARS_PER_NODE, c))
        variables.extend(VarId(j * VARS_PER_NODE + 1 + k, 3) for k in range(CELLS_PER_PLACE))
    builder = SpnBuilder(variables)
    by_name = {t.template.name: t for t in model.templates}
    blocks: Dict[Tuple[int, int], int] = {}

    def place_block(j: int, template_spn: TemplateSpn) -> int:
        key = (j, id(template_spn.place_model))
        if key not in blocks:
            var_map = np.zeros(len(template_spn.spn.variables), dtype=np.int64)
            var_map[:VARS_PER_NODE] = j * VARS_PER_NODE + np.arange(VARS_PER_NODE)
            blocks[key] = builder.append_block(template_spn.spn, 0, template_spn.block_size, var_map=var_map)
        return blocks[key]

    decompositions = _distinct_decompositions(semantic_map, model.shapes, n_decompositions, seed)
    roots = []
    for decomposition in decompositions:
        part_roots = []
        for part in decomposition.parts:
            template_spn = by_name[part.template]
            size = template_spn.block_size
            offsets = np.array([place_block(index[n], template_spn) for n in part.nodes], dtype=np.int64)
            start = builder.append_block(template_spn.spn, template_spn.top_start, template_spn.spn.num_nodes,
                                         outside=lambda ids, o=offsets, b=size: o[ids // b] + ids % b)
            part_roots.append(start + template_spn.spn.root - template_spn.top_start)
        roots.append(builder.product(part_roots))
    root = builder.sum(roots, [1.0 / len(roots)] * len(roots))
    spn = builder.build(root)
    logger.info("instantiated %d decompositions over %d nodes: %d nodes, %d edges", len(roots),
                len(node_ids), spn.num_nodes, spn.num_edges)
    return InstantiatedToponet(spn, node_ids, c, tuple(decompositions), tuple(roots))


def map_indicators(inst: InstantiatedToponet, semantic_map: SemanticMap, unknown: str = "observe",
                   clamp_labels: bool = False) -> np.ndarray:
    """One row of log indicator values: grids clamped at Places, everything else open."""
    if tuple(semantic_map.node_ids) != inst.node_ids:
        raise MapError("map nodes differ from the instantiated network's nodes")
    if unknown not in ("observe", "marginalize"):
        raise SpnInputError(f"unknown-cell policy must be 'observe' or 'marginalize', got {unknown!r}")
    spn = inst.spn
    offsets = spn.slot_offsets
    row = np.zeros(spn.num_slots)
    pick = np.where(np.eye(3, dtype=bool), 0.0, -np.inf)
    for node in semantic_map.places:
        cells = semantic_map.geometry[node].flat
        block = pick[cells]
        if unknown == "marginalize":
            block[cells == 2] = 0.0
        base = offsets[inst.class_variable(node) + 1]
        row[base:base + 3 * CELLS_PER_PLACE] = block.ravel()
    if clamp_labels:
        for node in semantic_map.node_ids:
            label = semantic_map.labels[node]
            if label is not None:
                lo = offsets[inst.class_variable(node)]
                row[lo:lo + inst.num_classes] = -np.inf
                row[lo + label] = 0.0
    return row[None, :]


# -- inference tasks ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ClassPrediction:
    node: int
    posterior: np.ndarray
    mpe_class: int

    def to_record(self) -> PlacePrediction:
        return PlacePrediction(place_id=self.node, posterior=[float(p) for p in self.posterior],
                               mpe_class=self.mpe_class)


@dataclass(frozen=True)
class NoveltyScore:
    total_ll: float
    per_place_ll: float
    threshold: Optional[float] = None

    @property
    def decision(self) -> Optional[Decision]:
        if self.threshold is None:
            return None
        return Decision.NOVEL if self.per_place_ll < self.threshold else Decision.KNOWN

    def to_record(self) -> NoveltyResult:
        return NoveltyResult(total_ll=self.total_ll, per_place_ll=self.per_place_ll,
                             threshold=self.threshold, decision=self.decision)


def _joint_classes(inst, semantic_map, sum_out, report, unknown) -> Dict[int, ClassPrediction]:
    row = map_indicators(inst, semantic_map, unknown)
    decoded = mpe_from_indicators(inst.spn, row, sum_out)
    class_vars = [inst.class_variable(n) for n in report]
    posteriors = marginals_from_indicators(inst.spn, row, class_vars)
    return {n: ClassPrediction(n, posteriors[v], decoded.assignment[v]) for n, v in zip(report, class_vars)}


def _geometry_variables(inst: InstantiatedToponet, semantic_map: SemanticMap) -> List[int]:
    return [v for node in semantic_map.node_ids for v in inst.geometry_variables(node)]


def classify_places(inst: InstantiatedToponet, semantic_map: SemanticMap,
                    unknown: str = "observe") -> Dict[int, ClassPrediction]:
    """Joint max-product classes of the Places; Placeholders are summed out entirely.

    Grid variables are summed rather than maximized, which leaves the
    clamped Places unchanged and makes each place likelihood exact.
    """
    sum_out = _geometry_variables(inst, semantic_map)
    sum_out.extend(inst.class_variable(node) for node in semantic_map.placeholders)
    return _joint_classes(inst, semantic_map, sum_out, semantic_map.places, unknown)


def infer_placeholders(inst: InstantiatedToponet, semantic_map: SemanticMap,
                       unknown: str = "observe") -> Dict[int, ClassPrediction]:
    """Joint max-product classes of Places and Placeholders, reported for Placeholders."""
    if not semantic_map.placeholders:
        return {}
    sum_out = _geometry_variables(inst, semantic_map)
    return _joint_classes(inst, semantic_map, sum_out, semantic_map.placeholders, unknown)


def novelty_score(inst: InstantiatedToponet, semantic_map: SemanticMap, threshold: Optional[float] = None,
                  unknown: str = "observe") -> NoveltyScore:
    """``log sum_y P(y, x)`` with every class marginalized, averaged over Places."""
    values = forward(inst.spn, map_indicators(inst, semantic_map, unknown))
    total = float(values[inst.spn.root, 0])
    return NoveltyScore(total, total / max(1, semantic_map.num_places), threshold)


# -- model directories ------------------------------------------------------------------------

def save_toponet(model: ToponetModel, directory: Union[str, Path]) -> ModelManifest:
    """``manifest.json``, place network directories and one SPN file per template."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "templates").mkdir(exist_ok=True)
    place_dirs: Dict[int, str] = {}
    entries = []
    for t in model.templates:
        key = id(t.place_model)
        if key not in place_dirs:
            name = "place_model" if not place_dirs else f"place_model_{t.template.name}"
            save_place_model(t.place_model, directory / name)
            place_dirs[key] = name
        path = save_spn(t.spn, directory / "templates" / f"{t.template.name}.spn")
        entries.append(TemplateEntry(shape=t.template.to_shape(), path=f"templates/{path.name}",
                                     sha256=file_sha256(path), samples=t.samples, trained=t.trained,
                                     place_model=place_dirs[key]))
    manifest = ModelManifest(
        class_setup=model.num_classes,
        class_names=list(model.class_names),
        place_model="place_model",
        place_model_sha256=file_sha256(directory / "place_model" / "place_model.spn"),
        templates=entries,
        config=json.loads(json.dumps(model.config.to_dict())),
    )
    write_manifest(manifest, directory)
    return manifest


def write_manifest(manifest: ModelManifest, directory: Union[str, Path]) -> Path:
    path = Path(directory) / "manifest.json"
    path.write_text(manifest.model_dump_json(indent=2))
    return path


def read_manifest(directory: Union[str, Path]) -> ModelManifest:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise SpnFormatError(f"{directory} has no manifest.json")
    try:
        return ModelManifest.model_validate_json(path.read_text())
    except ValidationError as exc:
        raise SpnFormatError(f"bad model manifest: {exc.errors()[0]['msg']}") from exc


def load_toponet(directory: Union[str, Path]) -> ToponetModel:
    directory = Path(directory)
    manifest = read_manifest(directory)
    place_models: Dict[str, PlaceModel] = {}
    templates = []
    for entry in manifest.templates:
        path = directory / entry.path
        if file_sha256(path) != entry.sha256:
            raise SpnFormatError(f"{entry.path}: checksum does not match the manifest")
        pm_dir = entry.place_model or manifest.place_model
        if pm_dir not in place_models:
            place_models[pm_dir] = load_place_model(directory / pm_dir)
        templates.append(TemplateSpn(SubMapTemplate.from_shape(entry.shape), load_spn(path),
                                     place_models[pm_dir], entry.trained, entry.samples))
    return ToponetModel(tuple(templates), tuple(manifest.class_names),
                        ToponetConfig.from_dict(manifest.config))


def model_digest(directory: Union[str, Path]) -> str:
    """SHA-256 over every model file, in sorted path order."""
    digest = hashlib.sha256()
    for path in sorted(p for p in Path(directory).rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(directory)).encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()
