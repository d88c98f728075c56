"""
Topological semantic maps and the synthetic office-building generator.

A map is a connected graph of Places (explored, with a polar grid) and
Placeholders (frontiers, no geometry). Labels are class indices of the
map's class catalogue, or ``None`` for latent.
"""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from pydantic import ValidationError

from toponets.errors import GridError, MapError, MapFormatError
from toponets.models import (MAP_FORMAT, MAP_SCHEMA_VERSION, CorpusEntry, CorpusManifest, MapDocument, MapNode,
                             PlaceKind)
from toponets.place_model import (NUM_VIEWS, VIEW_COLUMNS, CellState, PolarGrid, cartesian_to_polar, load_grid,
                                  save_grid)
from toponets.raytrace import (RAYS, RESOLUTION_M, RoomShape, cast_local_grid, flip_noise, place_positions,
                               render_room)

logger = logging.getLogger(__name__)

CATALOGUE_PATH = Path(__file__).parent / "data" / "classes.json"
DEFAULT_FLOORS = (4, 5, 6, 7)
SPINE_CLASS = "corridor"


# -- class catalogues -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ClassCatalogue:
    """Ordered class names of one setup and the room families behind them."""

    setup: int
    names: Tuple[str, ...]
    members: Tuple[Tuple[str, ...], ...]
    fine_frequencies: Mapping[str, float]
    shapes: Mapping[str, RoomShape]
    attach_to: Mapping[str, Tuple[str, ...]]

    @property
    def name(self) -> str:
        return f"{self.setup}-class"

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def frequencies(self) -> Dict[str, float]:
        return {name: sum(self.fine_frequencies[f] for f in group)
                for name, group in zip(self.names, self.members)}

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise MapError(f"class {name!r} is not in the {self.name} catalogue") from None

    def class_of(self, fine: str) -> int:
        for c, group in enumerate(self.members):
            if fine in group:
                return c
        raise MapError(f"room family {fine!r} is not in the {self.name} catalogue")


@lru_cache(maxsize=8)
def load_catalogue(setup: int, path: Optional[str] = None) -> ClassCatalogue:
    if setup not in (6, 10):
        raise MapError(f"class setup must be 6 or 10, got {setup}")
    data = json.loads(Path(path or CATALOGUE_PATH).read_text())
    fine = [entry["name"] for entry in data["fine"]]
    if setup == 10:
        names, members = tuple(fine), tuple((f,) for f in fine)
    else:
        names = tuple(data["merged"])
        members = tuple(tuple(group) for group in data["merged"].values())
        covered = sorted(f for group in members for f in group)
        if covered != sorted(fine):
            raise MapError("6-class merge mapping must cover every room family exactly once")
    return ClassCatalogue(
        setup=setup,
        names=names,
        members=members,
        fine_frequencies={e["name"]: float(e["frequency"]) for e in data["fine"]},
        shapes={e["name"]: RoomShape.from_dict(e["shape"]) for e in data["fine"]},
        attach_to={e["name"]: tuple(e.get("attach_to", ())) for e in data["fine"]},
    )


def catalogue_for(class_set: str) -> ClassCatalogue:
    try:
        setup = int(class_set.split("-")[0])
    except ValueError:
        raise MapError(f"unknown class set {class_set!r}") from None
    return load_catalogue(setup)


# -- maps -------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SemanticMap:
    """Immutable topological map; ``graph`` nodes carry a ``kind`` attribute."""

    graph: nx.Graph
    geometry: Mapping[int, PolarGrid]
    labels: Mapping[int, Optional[int]]
    class_set: str = "6-class"

    def __post_init__(self):
        graph = nx.freeze(nx.Graph(self.graph))
        object.__setattr__(self, "graph", graph)
        object.__setattr__(self, "geometry", dict(self.geometry))
        object.__setattr__(self, "labels", {int(n): self.labels.get(n) for n in graph.nodes})
        self._check()

    @classmethod
    def from_parts(cls, kinds: Mapping[int, PlaceKind], edges, geometry, labels,
                   class_set: str = "6-class") -> "SemanticMap":
        graph = nx.Graph()
        for node in sorted(kinds):
            graph.add_node(int(node), kind=PlaceKind(kinds[node]))
        graph.add_edges_from((int(a), int(b)) for a, b in edges)
        return cls(graph, geometry, labels, class_set)

    def _check(self):
        graph = self.graph
        if graph.number_of_nodes() == 0:
            raise MapError("map has no nodes")
        num_classes = catalogue_for(self.class_set).num_classes
        for node, data in graph.nodes(data=True):
            kind = data.get("kind")
            if kind == PlaceKind.PLACE and node not in self.geometry:
                raise MapError(f"place {node} has no geometry")
            if kind == PlaceKind.PLACEHOLDER:
                if node in self.geometry:
                    raise MapError(f"placeholder {node} carries geometry")
                if not any(graph.nodes[n]["kind"] == PlaceKind.PLACE for n in graph.neighbors(node)):
                    raise MapError(f"placeholder {node} has no place neighbor")
            elif kind != PlaceKind.PLACE:
                raise MapError(f"node {node} has no kind")
            label = self.labels[node]
            if label is not None and not 0 <= label < num_classes:
                raise MapError(f"node {node}: label {label} outside the {self.class_set} catalogue")
        extra = set(self.geometry) - set(graph.nodes)
        if extra:
            raise MapError(f"geometry for unknown nodes {sorted(extra)[:5]}")
        if not nx.is_connected(graph):
            raise MapError("map graph is not connected")

    @property
    def node_ids(self) -> List[int]:
        return sorted(self.graph.nodes)

    @property
    def places(self) -> List[int]:
        return [n for n in self.node_ids if self.kind(n) == PlaceKind.PLACE]

    @property
    def placeholders(self) -> List[int]:
        return [n for n in self.node_ids if self.kind(n) == PlaceKind.PLACEHOLDER]

    @property
    def num_places(self) -> int:
        return len(self.places)

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return sorted((min(a, b), max(a, b)) for a, b in self.graph.edges)

    @property
    def catalogue(self) -> ClassCatalogue:
        return catalogue_for(self.class_set)

    def kind(self, node: int) -> PlaceKind:
        return self.graph.nodes[node]["kind"]

    def with_geometry(self, geometry: Mapping[int, PolarGrid]) -> "SemanticMap":
        return replace(self, geometry=geometry)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SemanticMap):
            return NotImplemented
        return (self.class_set == other.class_set
                and self.node_ids == other.node_ids
                and all(self.kind(n) == other.kind(n) for n in self.node_ids)
                and self.edges == other.edges
                and dict(self.labels) == dict(other.labels)
                and self.geometry.keys() == other.geometry.keys()
                and all(self.geometry[n] == other.geometry[n] for n in self.geometry))

    __hash__ = None

    def __repr__(self) -> str:
        return (f"SemanticMap({self.class_set}, places={self.num_places}, "
                f"placeholders={len(self.placeholders)}, edges={self.graph.number_of_edges()})")


# -- generator --------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorConfig:
    floors: int = 4
    rooms_per_floor: Tuple[int, int] = (36, 52)
    places_per_room: Tuple[int, int] = (1, 4)
    corridor_topology: str = "chain"
    class_mix: Optional[Mapping[str, float]] = None
    geometry_noise: float = 0.02
    pose_jitter: float = 0.15
    class_setup: int = 6
    rays: int = RAYS
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rooms_per_floor", tuple(int(r) for r in self.rooms_per_floor))
        object.__setattr__(self, "places_per_room", tuple(int(p) for p in self.places_per_room))
        lo, hi = self.rooms_per_floor
        if not 1 <= self.floors <= len(DEFAULT_FLOORS):
            raise MapError(f"floors must lie in 1..{len(DEFAULT_FLOORS)}; pass floor numbers to generate more")
        if lo < 1 or hi < lo:
            raise MapError("need a nonempty room range")
        lo, hi = self.places_per_room
        if not 1 <= lo <= hi <= 4:
            raise MapError("places per room must lie in 1..4")
        if self.corridor_topology not in ("chain", "loop"):
            raise MapError(f"corridor topology must be 'chain' or 'loop', got {self.corridor_topology!r}")
        if not 0 <= self.geometry_noise < 0.5:
            raise MapError("geometry noise must lie in [0, 0.5)")
        if self.class_setup not in (6, 10):
            raise MapError(f"class setup must be 6 or 10, got {self.class_setup}")
        if self.class_mix is not None:
            if abs(sum(self.class_mix.values()) - 1.0) > 1e-6:
                raise MapError("class frequencies must sum to 1")
            if any(p < 0 for p in self.class_mix.values()):
                raise MapError("class frequencies must be non-negative")

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "GeneratorConfig":
        data = dict(data or {})
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise MapError(f"GeneratorConfig: unknown fields {sorted(unknown)}")
        return cls(**data)

    def family_mix(self, catalogue: ClassCatalogue) -> Tuple[List[str], np.ndarray]:
        """Room-family probabilities; a class's share is split by family frequency."""
        mix = dict(self.class_mix) if self.class_mix is not None else catalogue.frequencies
        unknown = set(mix) - set(catalogue.names)
        if unknown:
            raise MapError(f"class mix names unknown classes {sorted(unknown)}")
        families, probs = [], []
        for name, group in zip(catalogue.names, catalogue.members):
            total = sum(catalogue.fine_frequencies[f] for f in group)
            for fine in group:
                families.append(fine)
                probs.append(mix.get(name, 0.0) * catalogue.fine_frequencies[fine] / total)
        probs = np.asarray(probs)
        return families, probs / probs.sum()


def _attach_depths(catalogue: ClassCatalogue) -> Dict[str, int]:
    depth = {SPINE_CLASS: 0}
    pending = [f for f in catalogue.shapes if f != SPINE_CLASS]
    while pending:
        progress = False
        for fine in list(pending):
            known = [depth[t] for t in catalogue.attach_to[fine] if t in depth]
            if known or not catalogue.attach_to[fine]:
                depth[fine] = 1 + min(known, default=0)
                pending.remove(fine)
                progress = True
        if not progress:
            for fine in pending:
                depth[fine] = 1
            break
    return depth


def _room_grids(shape: RoomShape, count: int, cfg: GeneratorConfig,
                rng: np.random.Generator) -> List[PolarGrid]:
    room = render_room(shape, rng)
    grids = []
    for centre in place_positions(room, count, rng, cfg.pose_jitter):
        local = cast_local_grid(room.plan, centre, rays=cfg.rays)
        polar = cartesian_to_polar(local, RESOLUTION_M)
        grids.append(PolarGrid(flip_noise(polar.cells, cfg.geometry_noise, rng)))
    return grids


def generate_environment(cfg: GeneratorConfig, floor: int = 0) -> SemanticMap:
    """One fully labeled floor: a corridor spine with rooms attached."""
    catalogue = load_catalogue(cfg.class_setup)
    if SPINE_CLASS not in catalogue.shapes:
        raise MapError(f"catalogue has no {SPINE_CLASS!r} family for the spine")
    rng = np.random.default_rng([cfg.rng_seed, floor])
    families, probs = cfg.family_mix(catalogue)
    n_rooms = int(rng.integers(cfg.rooms_per_floor[0], cfg.rooms_per_floor[1] + 1))
    rooms = [families[i] for i in rng.choice(len(families), size=n_rooms, p=probs)]
    if SPINE_CLASS not in rooms:
        rooms[0] = SPINE_CLASS
    depth = _attach_depths(catalogue)
    order = sorted(range(n_rooms), key=lambda r: (depth[rooms[r]], r))

    kinds, edges, geometry, labels = {}, [], {}, {}
    room_places: Dict[int, List[int]] = {}
    spine: List[int] = []
    for r in order:
        fine = rooms[r]
        count = int(rng.integers(cfg.places_per_room[0], cfg.places_per_room[1] + 1))
        ids = list(range(len(kinds), len(kinds) + count))
        for node, grid in zip(ids, _room_grids(catalogue.shapes[fine], count, cfg, rng)):
            kinds[node] = PlaceKind.PLACE
            geometry[node] = grid
            labels[node] = catalogue.class_of(fine)
        edges.extend(zip(ids, ids[1:]))
        if fine == SPINE_CLASS:
            if spine:
                edges.append((room_places[spine[-1]][-1], ids[0]))
            spine.append(r)
        else:
            anchors = [a for a in room_places if rooms[a] in catalogue.attach_to[fine]] or spine
            anchor = anchors[int(rng.integers(len(anchors)))]
            edges.append((ids[int(rng.integers(count))],
                          room_places[anchor][int(rng.integers(len(room_places[anchor])))]))
        room_places[r] = ids
    if cfg.corridor_topology == "loop" and len(spine) >= 3:
        edges.append((room_places[spine[-1]][-1], room_places[spine[0]][0]))

    semantic_map = SemanticMap.from_parts(kinds, edges, geometry, labels, catalogue.name)
    logger.debug("floor %d: %d rooms, %r", floor, n_rooms, semantic_map)
    return semantic_map


def hide_places(semantic_map: SemanticMap, fraction: float, seed: int) -> SemanticMap:
    """Turn a random ``fraction`` of Places into Placeholders, keeping their labels.

    Each hidden node keeps at least one Place neighbor.
    """
    if not 0 <= fraction < 1:
        raise MapError("hidden fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    graph = semantic_map.graph
    places = semantic_map.places
    target = int(round(fraction * len(places)))
    hidden = set(semantic_map.placeholders)
    chosen = 0
    for node in rng.permutation(places):
        if chosen >= target:
            break
        node = int(node)
        visible = [n for n in graph.neighbors(node) if n not in hidden]
        if not visible or len(hidden) + 1 >= len(graph):
            continue
        if any(not any(m not in hidden and m != node for m in graph.neighbors(h))
               for h in graph.neighbors(node) if h in hidden):
            continue
        hidden.add(node)
        chosen += 1
    if chosen < target:
        logger.warning("hid %d of %d requested places", chosen, target)
    kinds = {n: PlaceKind.PLACEHOLDER if n in hidden else PlaceKind.PLACE for n in graph.nodes}
    geometry = {n: g for n, g in semantic_map.geometry.items() if n not in hidden}
    return SemanticMap.from_parts(kinds, semantic_map.edges, geometry, semantic_map.labels,
                                  semantic_map.class_set)


def corrupt_geometry(semantic_map: SemanticMap, fraction: float, seed: int,
                     keep_views: int = 2) -> Tuple[SemanticMap, List[int]]:
    """Make a ``fraction`` of Places ambiguous: all but ``keep_views`` views become Unknown."""
    if not 0 <= fraction <= 1 or not 0 <= keep_views <= NUM_VIEWS:
        raise MapError("bad corruption fraction or view count")
    rng = np.random.default_rng(seed)
    places = semantic_map.places
    chosen = sorted(int(p) for p in rng.choice(places, size=int(round(fraction * len(places))), replace=False))
    geometry = dict(semantic_map.geometry)
    for place in chosen:
        cells = geometry[place].cells.copy()
        for view in rng.permutation(NUM_VIEWS)[keep_views:]:
            cells[view * VIEW_COLUMNS:(view + 1) * VIEW_COLUMNS] = CellState.UNKNOWN
        geometry[place] = PolarGrid(cells, geometry[place].radius_m)
    return semantic_map.with_geometry(geometry), chosen


def crop_map(semantic_map: SemanticMap, size: int, seed: int) -> SemanticMap:
    """Connected sub-map of at most ``size`` nodes grown breadth-first from a random Place.

    Placeholders left without a Place neighbor are dropped. The rest stays
    connected: a placeholder's Places are all reached before anything two
    levels below it.
    """
    graph = semantic_map.graph
    if not 1 <= size <= len(graph):
        raise MapError(f"crop size must lie in 1..{len(graph)}")
    rng = np.random.default_rng(seed)
    places = semantic_map.places
    start = places[int(rng.integers(len(places)))]
    keep = [start]
    for _, node in nx.bfs_edges(graph, start, sort_neighbors=sorted):
        if len(keep) == size:
            break
        keep.append(node)
    keep = set(keep)
    # placeholders need a place neighbor inside the crop
    keep = {n for n in keep if semantic_map.kind(n) == PlaceKind.PLACE
            or any(m in keep and semantic_map.kind(m) == PlaceKind.PLACE for m in graph.neighbors(n))}
    kinds = {n: semantic_map.kind(n) for n in keep}
    edges = [(a, b) for a, b in semantic_map.edges if a in keep and b in keep]
    geometry = {n: g for n, g in semantic_map.geometry.items() if n in keep}
    labels = {n: semantic_map.labels[n] for n in keep}
    return SemanticMap.from_parts(kinds, edges, geometry, labels, semantic_map.class_set)


# -- exploration ------------------------------------------------------------------

def _snapshot(full: SemanticMap, explored: List[int], frontier: List[int]) -> SemanticMap:
    done = set(explored)
    nodes = done | set(frontier)
    kinds = {n: PlaceKind.PLACE if n in done else PlaceKind.PLACEHOLDER for n in nodes}
    edges = [(a, b) for a, b in full.edges if a in nodes and b in nodes and (a in done or b in done)]
    geometry = {n: full.geometry[n] for n in explored}
    labels = {n: full.labels[n] for n in nodes}
    return SemanticMap.from_parts(kinds, edges, geometry, labels, full.class_set)


def simulate_exploration(semantic_map: SemanticMap, steps: int, seed: int,
                         breadth_bias: float = 0.7) -> List[SemanticMap]:
    """Partial maps after 0..steps exploration actions.

    Each action converts one Placeholder into a Place: the oldest frontier
    node with probability ``breadth_bias``, otherwise a random one. New
    frontier Placeholders appear next to the converted node.
    """
    if semantic_map.placeholders or any(v is None for v in semantic_map.labels.values()):
        raise MapError("exploration needs a fully explored, fully labeled map")
    if steps < 0:
        raise MapError("steps must be non-negative")
    total = len(semantic_map.graph) - 1
    if steps > total:
        logger.warning("exploration truncated to %d steps (requested %d)", total, steps)
        steps = total
    rng = np.random.default_rng(seed)
    graph = semantic_map.graph
    places = semantic_map.places
    start = places[int(rng.integers(len(places)))]
    explored = [start]
    frontier = sorted(graph.neighbors(start))
    states = [_snapshot(semantic_map, explored, frontier)]
    for _ in range(steps):
        breadth = rng.random() < breadth_bias
        pick = frontier[0] if breadth else frontier[int(rng.integers(len(frontier)))]
        frontier.remove(pick)
        explored.append(pick)
        seen = set(explored) | set(frontier)
        frontier.extend(n for n in sorted(graph.neighbors(pick)) if n not in seen)
        states.append(_snapshot(semantic_map, explored, frontier))
    return states


# -- novel environments -------------------------------------------------------------

def swap_classes(semantic_map: SemanticMap, class_a: int, class_b: int) -> SemanticMap:
    """Exchange the geometry of ``class_a`` and ``class_b`` Places; labels stay.

    Places are paired in id order. When the classes differ in size the
    surplus keeps its own geometry, which keeps the swap an involution.
    """
    present = {semantic_map.labels[p] for p in semantic_map.places}
    for c in (class_a, class_b):
        if c not in present:
            raise MapError(f"class {c} does not occur among the map's places")
    if class_a == class_b:
        return semantic_map
    group_a = [p for p in semantic_map.places if semantic_map.labels[p] == class_a]
    group_b = [p for p in semantic_map.places if semantic_map.labels[p] == class_b]
    if len(group_a) != len(group_b):
        logger.warning("swap %d<->%d: %d vs %d places, %d keep their geometry", class_a, class_b,
                       len(group_a), len(group_b), abs(len(group_a) - len(group_b)))
    geometry = dict(semantic_map.geometry)
    for a, b in zip(group_a, group_b):
        geometry[a], geometry[b] = semantic_map.geometry[b], semantic_map.geometry[a]
    return semantic_map.with_geometry(geometry)


# -- map files ----------------------------------------------------------------------

def map_to_document(semantic_map: SemanticMap,
                    grid_refs: Optional[Mapping[int, str]] = None) -> MapDocument:
    nodes = []
    for n in semantic_map.node_ids:
        record = MapNode(id=n, kind=semantic_map.kind(n), label=semantic_map.labels[n])
        if n in semantic_map.geometry:
            if grid_refs and n in grid_refs:
                record.grid_ref = grid_refs[n]
            else:
                record.grid = [int(c) for c in semantic_map.geometry[n].flat]
        nodes.append(record)
    return MapDocument(class_set=semantic_map.class_set, nodes=nodes,
                       edges=[tuple(e) for e in semantic_map.edges])


def map_from_document(doc: MapDocument, base_dir: Optional[Path] = None) -> SemanticMap:
    if doc.format != MAP_FORMAT or doc.schema_version != MAP_SCHEMA_VERSION:
        raise MapFormatError(f"unsupported map file {doc.format!r} schema {doc.schema_version}",
                             schema_version=doc.schema_version)
    kinds, geometry, labels = {}, {}, {}
    for node in doc.nodes:
        if node.id in kinds:
            raise MapFormatError("duplicate node id", place_id=node.id, schema_version=doc.schema_version)
        kinds[node.id] = node.kind
        labels[node.id] = node.label
        has_grid = node.grid is not None or node.grid_ref is not None
        if node.kind == PlaceKind.PLACEHOLDER and has_grid:
            raise MapFormatError("placeholder carries geometry", place_id=node.id,
                                 schema_version=doc.schema_version)
        if node.kind == PlaceKind.PLACE and not has_grid:
            raise MapFormatError("place has no geometry", place_id=node.id, schema_version=doc.schema_version)
        try:
            if node.grid is not None:
                geometry[node.id] = PolarGrid.from_flat(node.grid)
            elif node.grid_ref is not None:
                geometry[node.id] = load_grid(Path(base_dir or ".") / node.grid_ref)
        except (GridError, OSError) as exc:
            raise MapFormatError(str(exc), place_id=node.id, schema_version=doc.schema_version) from exc
    for a, b in doc.edges:
        for end in (a, b):
            if end not in kinds:
                raise MapFormatError("edge references an unknown node", place_id=end,
                                     schema_version=doc.schema_version)
    try:
        return SemanticMap.from_parts(kinds, doc.edges, geometry, labels, doc.class_set)
    except MapError as exc:
        raise MapFormatError(str(exc), schema_version=doc.schema_version) from exc


def dumps_map(semantic_map: SemanticMap) -> bytes:
    return map_to_document(semantic_map).model_dump_json().encode("utf-8")


def loads_map(payload: Union[bytes, str], base_dir: Optional[Path] = None) -> SemanticMap:
    try:
        raw = json.loads(payload)
    except ValueError as exc:
        raise MapFormatError(f"unreadable map file: {exc}") from exc
    version = raw.get("schema_version") if isinstance(raw, dict) else None
    if version != MAP_SCHEMA_VERSION:
        raise MapFormatError(f"unsupported schema version {version!r}", schema_version=version)
    try:
        doc = MapDocument.model_validate(raw)
    except ValidationError as exc:
        error = exc.errors()[0]
        raise MapFormatError(f"{error['msg']} at {'.'.join(str(p) for p in error['loc'])}",
                             schema_version=version) from exc
    return map_from_document(doc, base_dir)


def save_map(semantic_map: SemanticMap, path: Union[str, Path], external_grids: bool = False) -> Path:
    """Write a map file; ``external_grids`` stores geometry as packed grid files beside it."""
    path = Path(path)
    refs = None
    if external_grids:
        grid_dir = path.with_name(path.stem + "_grids")
        grid_dir.mkdir(parents=True, exist_ok=True)
        refs = {}
        for node, grid in semantic_map.geometry.items():
            save_grid(grid, grid_dir / f"{node}.grid")
            refs[node] = f"{grid_dir.name}/{node}.grid"
    path.write_bytes(map_to_document(semantic_map, refs).model_dump_json().encode("utf-8"))
    return path


def load_map(path: Union[str, Path]) -> SemanticMap:
    path = Path(path)
    return loads_map(path.read_bytes(), path.parent)


# -- corpora ------------------------------------------------------------------------

def leave_one_floor_out_splits(floors: Sequence[int] = DEFAULT_FLOORS) -> List[str]:
    """``[4, 5, 6, 7]`` -> ``["567-4", "467-5", "457-6", "456-7"]``."""
    floors = list(floors)
    return ["".join(str(f) for f in floors if f != held) + f"-{held}" for held in floors]


def file_sha256(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def generate_corpus(cfg: GeneratorConfig, output_dir: Union[str, Path],
                    floors: Optional[Sequence[int]] = None, workers: int = 1) -> CorpusManifest:
    """One map file per floor plus ``manifest.json``; floors generate in parallel."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    floors = list(floors) if floors is not None else list(DEFAULT_FLOORS[:cfg.floors])
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        maps = list(pool.map(lambda f: generate_environment(cfg, f), floors))
    entries = []
    for floor, semantic_map in zip(floors, maps):
        path = save_map(semantic_map, output_dir / f"floor_{floor}.json")
        entries.append(CorpusEntry(floor=floor, path=path.name, sha256=file_sha256(path),
                                   places=semantic_map.num_places,
                                   placeholders=len(semantic_map.placeholders)))
        logger.info("floor %d: %d places", floor, semantic_map.num_places)
    manifest = CorpusManifest(class_setup=cfg.class_setup, seed=cfg.rng_seed, maps=entries,
                              splits=leave_one_floor_out_splits(floors))
    (output_dir / "manifest.json").write_text(manifest.model_dump_json(indent=2))
    return manifest


def load_corpus(directory: Union[str, Path]) -> Tuple[CorpusManifest, Dict[int, SemanticMap]]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise MapError(f"{directory} has no manifest.json")
    try:
        manifest = CorpusManifest.model_validate_json(manifest_path.read_text())
    except ValidationError as exc:
        raise MapFormatError(f"bad corpus manifest: {exc.errors()[0]['msg']}") from exc
    maps = {}
    for entry in manifest.maps:
        path = directory / entry.path
        if file_sha256(path) != entry.sha256:
            raise MapError(f"{entry.path}: checksum does not match the manifest")
        maps[entry.floor] = load_map(path)
    return manifest, maps
