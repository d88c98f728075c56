import json
from dataclasses import replace

import networkx as nx
import numpy as np
import pytest

from conftest import SMALL_GENERATOR
from toponets.errors import MapError, MapFormatError
from toponets.models import PlaceKind
from toponets.place_model import NUM_VIEWS, VIEW_COLUMNS, CellState, PolarGrid
from toponets.semmap import (GeneratorConfig, SemanticMap, corrupt_geometry, crop_map, dumps_map,
                             generate_corpus, generate_environment, hide_places, leave_one_floor_out_splits,
                             load_catalogue, load_corpus, load_map, loads_map, save_map, simulate_exploration,
                             swap_classes)


def path_map(labels=(0, 1, 0), placeholder_at=None):
    """Places on a path; optionally one trailing placeholder."""
    n = len(labels)
    kinds = {i: PlaceKind.PLACE for i in range(n)}
    geometry = {i: PolarGrid.unknown() for i in range(n)}
    edges = [(i, i + 1) for i in range(n - 1)]
    label_map = dict(enumerate(labels))
    if placeholder_at is not None:
        kinds[n] = PlaceKind.PLACEHOLDER
        edges.append((placeholder_at, n))
        label_map[n] = None
    return SemanticMap.from_parts(kinds, edges, geometry, label_map)


def test_catalogues():
    """The coarse catalogue merges every room family into six classes"""
    six, ten = load_catalogue(6), load_catalogue(10)
    assert six.num_classes == 6 and ten.num_classes == 10
    assert six.name == "6-class"
    for fine in ten.names:
        assert 0 <= six.class_of(fine) < 6
    assert six.class_of("stairs") == six.index("corridor")
    assert sum(six.frequencies.values()) == pytest.approx(1.0)
    with pytest.raises(MapError):
        load_catalogue(7)
    with pytest.raises(MapError):
        six.index("garage")


def test_generator_config_validation():
    """Out-of-range generator settings are map errors"""
    with pytest.raises(MapError):
        GeneratorConfig(places_per_room=(0, 2))
    with pytest.raises(MapError):
        GeneratorConfig(corridor_topology="ring")
    with pytest.raises(MapError):
        GeneratorConfig(class_mix={"corridor": 0.5})
    with pytest.raises(MapError, match="floors"):
        GeneratorConfig(floors=5)
    with pytest.raises(MapError, match="floors"):
        GeneratorConfig(floors=0)
    with pytest.raises(MapError, match="unknown fields"):
        GeneratorConfig.from_dict({"buildings": 2})
    assert GeneratorConfig.from_dict({"rooms_per_floor": [2, 3]}).rooms_per_floor == (2, 3)


def test_generation_is_deterministic(small_maps):
    """Same seed and floor give the same map; floors differ"""
    assert generate_environment(SMALL_GENERATOR, 0) == small_maps[0]
    assert small_maps[0] != small_maps[1]


def test_generated_maps_are_complete(small_maps):
    """Generated floors are connected, fully explored and fully labeled"""
    for semantic_map in small_maps:
        assert nx.is_connected(semantic_map.graph)
        assert semantic_map.placeholders == []
        assert all(label is not None for label in semantic_map.labels.values())
        assert semantic_map.num_places >= SMALL_GENERATOR.rooms_per_floor[0]
        assert set(semantic_map.geometry) == set(semantic_map.places)


def test_loop_topology_closes_the_spine():
    """A looped corridor adds a cycle to the room tree"""
    cfg = GeneratorConfig(floors=1, rooms_per_floor=(6, 6), places_per_room=(1, 1), rays=180,
                          class_setup=10, class_mix={"corridor": 1.0}, rng_seed=3)
    chain = generate_environment(cfg)
    loop = generate_environment(replace(cfg, corridor_topology="loop"))
    assert nx.is_tree(chain.graph)
    assert len(nx.cycle_basis(loop.graph)) == 1


def test_map_invariants():
    """Placeholder geometry, missing geometry, bad labels and disconnection are rejected"""
    grid = PolarGrid.unknown()
    with pytest.raises(MapError, match="carries geometry"):
        SemanticMap.from_parts({0: "place", 1: "placeholder"}, [(0, 1)], {0: grid, 1: grid}, {})
    with pytest.raises(MapError, match="no geometry"):
        SemanticMap.from_parts({0: "place"}, [], {}, {})
    with pytest.raises(MapError, match="outside"):
        SemanticMap.from_parts({0: "place"}, [], {0: grid}, {0: 6})
    with pytest.raises(MapError, match="not connected"):
        SemanticMap.from_parts({0: "place", 1: "place"}, [], {0: grid, 1: grid}, {})
    with pytest.raises(MapError, match="no place neighbor"):
        SemanticMap.from_parts({0: "place", 1: "placeholder", 2: "placeholder"}, [(0, 1), (1, 2)],
                               {0: grid}, {})


def test_hide_places_keeps_labels(small_maps):
    """Hidden places become placeholders with their labels intact"""
    full = small_maps[1]
    hidden = hide_places(full, 0.3, seed=4)
    assert 0 < len(hidden.placeholders) <= round(0.3 * full.num_places)
    assert hidden.num_places + len(hidden.placeholders) == full.num_places
    for node in hidden.placeholders:
        assert hidden.labels[node] == full.labels[node]
        assert node not in hidden.geometry
    with pytest.raises(MapError):
        hide_places(full, 1.0, seed=0)


def test_corrupt_geometry_blanks_views(small_maps):
    """Corrupted places keep two views; the rest become unknown"""
    full = small_maps[0]
    corrupted, chosen = corrupt_geometry(full, 0.5, seed=1)
    assert len(chosen) == round(0.5 * full.num_places)
    for place in full.places:
        cells = corrupted.geometry[place].cells
        blank = sum(np.all(cells[v * VIEW_COLUMNS:(v + 1) * VIEW_COLUMNS] == CellState.UNKNOWN)
                    for v in range(NUM_VIEWS))
        if place in chosen:
            assert blank >= NUM_VIEWS - 2
        else:
            assert corrupted.geometry[place] == full.geometry[place]
    assert corrupted.labels == full.labels


def test_crop_map(small_maps):
    """Crops are connected sub-maps of at most the requested size"""
    crop = crop_map(small_maps[0], 4, seed=2)
    assert 1 <= len(crop.graph) <= 4
    assert set(crop.node_ids) <= set(small_maps[0].node_ids)
    assert all(crop.geometry[p] == small_maps[0].geometry[p] for p in crop.places)
    with pytest.raises(MapError):
        crop_map(small_maps[0], 0, seed=2)


def test_crop_drops_stranded_placeholders(small_maps):
    """Placeholders whose places fall outside the crop go, and what remains stays connected"""
    kinds = {0: PlaceKind.PLACE, 1: PlaceKind.PLACEHOLDER, 2: PlaceKind.PLACEHOLDER, 3: PlaceKind.PLACE}
    chain = SemanticMap.from_parts(kinds, [(0, 1), (1, 2), (2, 3)], {0: PolarGrid.unknown(), 3: PolarGrid.unknown()},
                                   {0: 0, 1: None, 2: None, 3: 1})
    assert {frozenset(crop_map(chain, 3, seed=s).node_ids) for s in range(20)} == {frozenset({0, 1}),
                                                                                  frozenset({2, 3})}
    partial = hide_places(small_maps[1], 0.5, seed=4)
    for seed in range(30):
        size = min(2 + seed % 10, len(partial.graph))
        crop = crop_map(partial, size, seed)
        assert nx.is_connected(crop.graph) and len(crop.graph) <= size
        for node in crop.placeholders:
            assert any(crop.kind(m) == PlaceKind.PLACE for m in crop.graph.neighbors(node))


def test_exploration_converts_one_placeholder_per_step(small_maps):
    """Each action turns a frontier placeholder into a place"""
    steps = min(5, len(small_maps[2].graph) - 1)
    states = simulate_exploration(small_maps[2], steps, seed=0)
    assert len(states) == steps + 1
    assert states[0].num_places == 1
    for before, after in zip(states, states[1:]):
        assert after.num_places == before.num_places + 1
        assert set(before.places) < set(after.places)
    with pytest.raises(MapError, match="fully explored"):
        simulate_exploration(path_map(placeholder_at=2), 1, seed=0)


def test_swap_is_an_involution(small_maps):
    """Swapping twice restores the map; labels never move"""
    full = small_maps[0]
    present = sorted({full.labels[p] for p in full.places})
    a, b = present[0], present[-1]
    swapped = swap_classes(full, a, b)
    assert swapped.labels == full.labels
    assert swap_classes(swapped, a, b) == full
    assert swap_classes(full, a, a) is full
    absent = next(c for c in range(6) if c not in present) if len(present) < 6 else None
    if absent is not None:
        with pytest.raises(MapError):
            swap_classes(full, a, absent)


def test_swap_with_unequal_groups():
    """Surplus places keep their own geometry"""
    grids = [PolarGrid(np.full((56, 21), k % 3, dtype=np.int8)) for k in range(3)]
    semantic_map = path_map((0, 1, 0)).with_geometry(dict(enumerate(grids)))
    swapped = swap_classes(semantic_map, 0, 1)
    assert swapped.geometry[0] == grids[1]
    assert swapped.geometry[1] == grids[0]
    assert swapped.geometry[2] == grids[2]


def test_map_files(small_maps, tmp_path):
    """Maps survive inline and external-grid files"""
    partial = hide_places(small_maps[0], 0.2, seed=0)
    assert load_map(save_map(partial, tmp_path / "inline.json")) == partial
    path = save_map(partial, tmp_path / "external.json", external_grids=True)
    doc = json.loads(path.read_text())
    assert all(node["grid"] is None for node in doc["nodes"])
    assert load_map(path) == partial


def test_map_file_errors():
    """Schema versions, unreadable JSON and misplaced geometry are format errors"""
    doc = json.loads(dumps_map(path_map(placeholder_at=2)))
    with pytest.raises(MapFormatError) as err:
        loads_map(json.dumps({**doc, "schema_version": 2}))
    assert err.value.schema_version == 2
    with pytest.raises(MapFormatError):
        loads_map(b"{not json")
    bad = json.loads(json.dumps(doc))
    bad["nodes"][3]["grid"] = [0] * 1176
    with pytest.raises(MapFormatError) as err:
        loads_map(json.dumps(bad))
    assert err.value.place_id == 3
    dangling = {**doc, "edges": doc["edges"] + [[0, 9]]}
    with pytest.raises(MapFormatError) as err:
        loads_map(json.dumps(dangling))
    assert err.value.place_id == 9


def test_corpus_checksums(tmp_path):
    """Corpora list one checksummed file per floor and refuse edited files"""
    cfg = GeneratorConfig(floors=2, rooms_per_floor=(2, 3), places_per_room=(1, 2), rays=180, rng_seed=1)
    manifest = generate_corpus(cfg, tmp_path, floors=[4, 5], workers=2)
    assert [entry.floor for entry in manifest.maps] == [4, 5]
    assert manifest.splits == ["5-4", "4-5"]
    loaded_manifest, maps = load_corpus(tmp_path)
    assert loaded_manifest == manifest
    assert maps[4] == generate_environment(cfg, 4)
    target = tmp_path / manifest.maps[0].path
    target.write_bytes(target.read_bytes().replace(b'"label":0', b'"label":1', 1))
    with pytest.raises(MapError, match="checksum"):
        load_corpus(tmp_path)
    with pytest.raises(MapError, match="manifest"):
        load_corpus(tmp_path / "missing")


def test_leave_one_floor_out_splits():
    """Each split names its training floors then the held-out floor"""
    assert leave_one_floor_out_splits() == ["567-4", "467-5", "457-6", "456-7"]
