import numpy as np
import pytest

from toponets.learn import HybridConfig, Loss, StructureConfig, TrainConfig, generate_dense_structure
from toponets.place_model import build_place_model, train_place_model
from toponets.semmap import GeneratorConfig, generate_environment, load_catalogue
from toponets.spn import normalize_weights, variables_of
from toponets.toponet import ToponetConfig, build_toponet, train_toponet

# One factorized product per class keeps the place network around ten thousand nodes
TINY_STRUCTURE = StructureConfig(num_decompositions_per_level=1, num_subsets_per_decomposition=2,
                                 num_mixtures_per_scope=1, max_depth=0, rng_seed=0)

SMALL_GENERATOR = GeneratorConfig(floors=3, rooms_per_floor=(3, 5), places_per_room=(1, 3), rays=360,
                                  class_setup=6, rng_seed=7)

PLACE_TRAINING = HybridConfig(
    discriminative=TrainConfig(loss=Loss.DISCRIMINATIVE, epochs=3, batch_size=16, learning_rate=0.1),
    generative=TrainConfig(epochs=1, batch_size=16),
    warm_start_epochs=1,
)

TOPONET_CONFIG = ToponetConfig(training=TrainConfig(epochs=2, batch_size=16, learning_rate=0.05),
                               train_decompositions=4, max_parts_per_template=40, seed=0)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run acceptance-scale tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def random_spn(seed, num_vars=4, cardinality=3, depth=3):
    """Small valid network with random normalized weights."""
    cfg = StructureConfig(num_decompositions_per_level=2, num_subsets_per_decomposition=2,
                          num_mixtures_per_scope=2, max_depth=depth, rng_seed=seed)
    spn = generate_dense_structure(variables_of([cardinality] * num_vars), cfg)
    rng = np.random.default_rng(seed)
    return normalize_weights(spn.with_weights(rng.uniform(0.1, 1.0, size=spn.num_edges)))


@pytest.fixture(scope="session")
def catalogue():
    return load_catalogue(6)


@pytest.fixture(scope="session")
def small_maps():
    return [generate_environment(SMALL_GENERATOR, floor) for floor in range(3)]


@pytest.fixture(scope="session")
def trained_place_model(small_maps):
    grids = [m.geometry[p] for m in small_maps for p in m.places]
    labels = [m.labels[p] for m in small_maps for p in m.places]
    model, _ = train_place_model(build_place_model(6, TINY_STRUCTURE), grids, labels, PLACE_TRAINING)
    return model


@pytest.fixture(scope="session")
def trained_toponet(trained_place_model, small_maps, catalogue):
    model = build_toponet(trained_place_model, catalogue.names, cfg=TOPONET_CONFIG)
    return train_toponet(model, small_maps, TOPONET_CONFIG)
