import json

import numpy as np
import pytest
from pydantic import ValidationError

from conftest import TOPONET_CONFIG
from toponets.errors import ExperimentError
from toponets.experiments import (Engines, bench_map, cmd_bench, cmd_eval, cmd_gen, cmd_swap, cmd_train, evaluate_maps,
                                  generator_config, load_config, resolve_class, split_maps)
from toponets.models import Engine, ExperimentConfig, Task
from toponets.mrf import BpConfig, learn_pairwise
from toponets.semmap import load_corpus, load_map, save_map, swap_classes
from toponets.toponet import save_toponet, write_manifest

TINY_GENERATOR = {"rooms_per_floor": [2, 3], "places_per_room": [1, 2], "rays": 180}


@pytest.fixture(scope="module")
def varied_split(small_maps):
    """The floor with the most classes is held out so swaps always find two classes."""
    order = sorted(range(len(small_maps)), key=lambda k: -len(set(small_maps[k].labels.values())))
    test = order[0]
    return [m for k, m in enumerate(small_maps) if k != test], [small_maps[test]]


def test_load_config_overrides(tmp_path):
    """File values apply first, explicit overrides win and None overrides are ignored"""
    assert load_config(seed=5, split=None).split == "456-7"
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"split": "567-4", "class_setup": 10}))
    cfg = load_config(path, class_setup=6)
    assert (cfg.split, cfg.class_setup, cfg.seed) == ("567-4", 6, 0)
    with pytest.raises(ValidationError):
        load_config(split="45-4")
    with pytest.raises(ValidationError):
        load_config(batch=3)
    with pytest.raises(ValidationError):
        load_config(class_setup=7)


def test_swap_count_defaults():
    """Ten swaps for the coarse setup, thirty for the fine one, unless set"""
    assert ExperimentConfig().swap_count == 10
    assert ExperimentConfig(class_setup=10).swap_count == 30
    assert ExperimentConfig(swaps=3).swap_count == 3


def test_generator_config_follows_the_run():
    """Class setup and seed follow the experiment; a long floor list leaves the default floor count"""
    gen = generator_config(ExperimentConfig(class_setup=10, seed=9, generator=TINY_GENERATOR))
    assert (gen.class_setup, gen.rng_seed, gen.floors) == (10, 9, 4)
    assert gen.rooms_per_floor == (2, 3)
    assert generator_config(ExperimentConfig(floors=[1, 2, 3, 4, 5, 6], split="12345-6")).floors == 4


def test_gen_refuses_non_empty_output(tmp_path):
    """An existing corpus is only replaced with force"""
    cfg = ExperimentConfig(output_dir=str(tmp_path), floors=[4, 5], split="4-5", generator=TINY_GENERATOR)
    (tmp_path / "corpus").mkdir()
    (tmp_path / "corpus" / "stale.json").write_text("{}")
    with pytest.raises(ExperimentError, match="not empty"):
        cmd_gen(cfg)
    manifest = cmd_gen(cfg, force=True, workers=2)
    assert [entry.floor for entry in manifest.maps] == [4, 5]
    loaded, maps = load_corpus(tmp_path / "corpus")
    assert loaded == manifest and set(maps) == {4, 5}


def test_split_maps(small_maps):
    """Training and test floors come from the split; gaps and setup mismatches raise"""
    maps = dict(enumerate(small_maps))
    train, test = split_maps(ExperimentConfig(split="01-2"), maps)
    assert train == small_maps[:2] and test == [small_maps[2]]
    with pytest.raises(ExperimentError, match="not in the corpus"):
        split_maps(ExperimentConfig(split="04-2"), maps)
    with pytest.raises(ExperimentError, match="setup"):
        split_maps(ExperimentConfig(split="01-2", class_setup=10), maps)


def test_resolve_class(small_maps):
    """Classes are given by index or by catalogue name"""
    semantic_map = small_maps[0]
    assert resolve_class(semantic_map, 2) == 2
    assert resolve_class(semantic_map, "3") == 3
    assert resolve_class(semantic_map, "corridor") == semantic_map.catalogue.index("corridor")


def test_swap_command(small_maps, tmp_path):
    """The swap command writes the swapped map next to the original"""
    semantic_map = small_maps[0]
    present = sorted({semantic_map.labels[p] for p in semantic_map.places})
    a, b = present[0], present[-1]
    source = save_map(semantic_map, tmp_path / "floor.json")
    out = cmd_swap(source, semantic_map.catalogue.names[a], str(b), tmp_path / "swapped.json")
    assert load_map(out) == swap_classes(semantic_map, a, b)


def test_engines_check(trained_toponet):
    """The mrf engine needs pairwise potentials and the class setups must agree"""
    engines = Engines(trained_toponet, None, BpConfig())
    engines.check(Engine.TOPONET, ExperimentConfig())
    with pytest.raises(ExperimentError, match="pairwise"):
        engines.check(Engine.MRF, ExperimentConfig())
    with pytest.raises(ExperimentError, match="classes"):
        engines.check(Engine.LOCAL, ExperimentConfig(class_setup=10))


def test_engines_load_pairwise(trained_toponet, small_maps, tmp_path):
    """Pairwise potentials stored in the manifest come back with the models"""
    pairwise = learn_pairwise(small_maps)
    manifest = save_toponet(trained_toponet, tmp_path)
    manifest.pairwise = pairwise.matrix.tolist()
    write_manifest(manifest, tmp_path)
    engines = Engines.load(tmp_path)
    np.testing.assert_allclose(engines.pairwise.matrix, pairwise.matrix)
    assert engines.model.num_classes == 6


def test_evaluate_all_engines(trained_toponet, small_maps, varied_split):
    """Every engine reports each task; the majority baseline appears once per map"""
    train_maps, test_maps = varied_split
    engines = Engines(trained_toponet, learn_pairwise(train_maps), BpConfig())
    cfg = ExperimentConfig(split="01-2", n_decompositions=2, swaps=2, placeholders=0.3)
    engine_list = [Engine.LOCAL, Engine.MRF, Engine.TOPONET]
    records, roc, timings = evaluate_maps(engines, test_maps, train_maps, cfg,
                                          [Task.CLASSIFY, Task.PLACEHOLDERS, Task.NOVELTY], engine_list)
    assert list(records.columns) == ["engine", "task", "map", "accuracy"]
    classify = records[records.task == "classify"]
    assert set(classify.engine) == {"local", "mrf", "toponet"}
    assert classify.accuracy.between(0, 1).all()
    assert (records.engine == "majority").sum() == len(test_maps)
    assert set(roc) == set(timings) == {"local", "mrf", "toponet"}
    for curve in roc.values():
        assert len(curve["known"]) == len(curve["novel"]) == cfg.swap_count * len(test_maps)
        assert 0.0 <= curve["auc"] <= 1.0
    assert "Bethe" in roc["mrf"]["note"]


def test_bench_report(trained_toponet, tmp_path):
    """Bench crops maps to the requested size and reports medians against the budget"""
    cfg = ExperimentConfig(n_decompositions=2, generator={**TINY_GENERATOR, "places_per_room": [2, 3]})
    assert bench_map(cfg, 6, seed=0).num_places == 6
    save_toponet(trained_toponet, tmp_path / "models")
    report = cmd_bench(cfg, tmp_path / "models", sizes=[6], repeats=2, output=tmp_path / "reports")
    (row,) = report["sizes"]
    assert row["size"] == 6 and len(row["times"]) == 2
    assert row["median_seconds"] > 0 and row["reference_seconds"] is None
    assert (tmp_path / "reports" / "bench.json").exists()


@pytest.mark.slow
def test_gen_train_eval_round(tmp_path):
    """A tiny corpus goes through generation, training and evaluation"""
    cfg = ExperimentConfig(
        output_dir=str(tmp_path), floors=[4, 5, 6], split="45-6", n_decompositions=2, swaps=2,
        generator={**TINY_GENERATOR, "rooms_per_floor": [3, 4]},
        structure={"num_decompositions_per_level": 1, "num_subsets_per_decomposition": 2,
                   "num_mixtures_per_scope": 1, "max_depth": 0},
        training={"place": {"discriminative": {"epochs": 2, "batch_size": 16}, "generative": {"epochs": 1},
                            "warm_start_epochs": 1},
                  "toponet": {"training": {"epochs": 1, "batch_size": 16}, "train_decompositions": 2,
                              "max_parts_per_template": TOPONET_CONFIG.max_parts_per_template}},
    )
    cmd_gen(cfg)
    models = cmd_train(cfg)
    assert (models / "manifest.json").exists()
    assert (models / "place_discriminative.csv").exists()
    report = cmd_eval(cfg, Task.CLASSIFY, Engine.LOCAL)
    assert report["split"] == "45-6"
    assert report["config"]["n_decompositions"] == 2
    out = tmp_path / "reports" / "45-6"
    assert {"report.json", "report.csv", "timings.json"} <= {p.name for p in out.iterdir()}
    assert "seconds" not in (out / "report.json").read_text()
