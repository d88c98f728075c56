import numpy as np
import pandas as pd
import pytest
from scipy.special import logsumexp

from conftest import random_spn
from toponets.errors import PruneError, SpnInputError
from toponets.inference import evaluate_batch
from toponets.learn import (HybridConfig, LabeledSample, LayerAnnotation, Loss, StructureConfig, TrainConfig,
                            generate_dense_structure, hybrid_train, load_samples, project_to_simplex, prune,
                            prune_report, save_samples, train, uniform_weights, write_trace)
from toponets.spn import (Evidence, NodeKind, SpnBuilder, check_validity, is_normalized, normalize_weights,
                          variables_of)


def samples_from(spn, count, seed):
    rng = np.random.default_rng(seed)
    data = []
    for _ in range(count):
        values = {v.index: int(rng.integers(v.cardinality)) for v in spn.variables}
        values[0] = values[1]
        data.append(LabeledSample(Evidence.observe(values, spn.variables)))
    return data


def two_class_network():
    """Two class sub-networks over one ternary variable, mixed by a root."""
    b = SpnBuilder(variables_of([3]))
    leaves = [b.indicator(0, v) for v in range(3)]
    first = b.sum(leaves, [1 / 3] * 3)
    second = b.sum(leaves, [1 / 3] * 3)
    root = b.sum([first, second], [0.5, 0.5])
    spn = b.build(root)
    bottom = np.ones(spn.num_nodes, dtype=bool)
    bottom[root] = False
    return spn, LayerAnnotation((first, second), bottom)


def test_dense_structure_covers_every_variable():
    """Generated structures are valid and their root spans every variable"""
    variables = variables_of([3] * 7)
    spn = generate_dense_structure(variables, StructureConfig(max_depth=2, rng_seed=3))
    assert check_validity(spn).valid
    assert spn.var_scopes[spn.root] == frozenset(range(7))
    assert is_normalized(spn)
    with pytest.raises(SpnInputError):
        generate_dense_structure([])


def test_structure_config_validation():
    """Non-positive structure parameters and unknown keys are rejected"""
    with pytest.raises(SpnInputError):
        StructureConfig(num_mixtures_per_scope=0)
    with pytest.raises(SpnInputError, match="unknown fields"):
        StructureConfig.from_dict({"depth": 3})
    assert StructureConfig.from_dict({"max_depth": 4}).max_depth == 4


def test_train_config_validation():
    """Learning rates, floors and optimizer choices are validated"""
    with pytest.raises(SpnInputError):
        TrainConfig(learning_rate=0)
    with pytest.raises(SpnInputError):
        TrainConfig(optimizer="adam")
    with pytest.raises(SpnInputError):
        TrainConfig(optimizer="em", loss=Loss.DISCRIMINATIVE)
    assert TrainConfig.from_dict({"loss": "discriminative"}).loss == Loss.DISCRIMINATIVE
    hybrid = HybridConfig.from_dict({"generative": {"epochs": 2}})
    assert hybrid.discriminative.loss == Loss.DISCRIMINATIVE
    assert hybrid.generative.epochs == 2


def test_projection_onto_floored_simplex():
    """Projected weights sum to one per node and respect the floor"""
    spn = random_spn(0)
    rng = np.random.default_rng(0)
    raw = spn.weights + rng.normal(0, 0.5, size=spn.num_edges)
    projected = spn.with_weights(project_to_simplex(spn, raw, spn.sum_nodes, 1e-3))
    assert is_normalized(projected)
    sum_edges = spn.kinds[spn.edge_parent] == NodeKind.SUM
    assert projected.weights[sum_edges].min() >= 1e-3 - 1e-12
    # points already inside stay put
    np.testing.assert_allclose(project_to_simplex(spn, spn.weights, spn.sum_nodes, 1e-9), spn.weights)


def test_em_never_lowers_likelihood():
    """Each EM epoch increases the data log-likelihood"""
    spn = uniform_weights(random_spn(1))
    data = samples_from(spn, 60, seed=1)
    evidences = [s.evidence for s in data]
    before = evaluate_batch(spn, evidences).mean()
    one = train(spn, data, TrainConfig(optimizer="em", epochs=1)).spn
    three = train(spn, data, TrainConfig(optimizer="em", epochs=3)).spn
    after_one = evaluate_batch(one, evidences).mean()
    after_three = evaluate_batch(three, evidences).mean()
    assert after_one >= before - 1e-6
    assert after_three >= after_one - 1e-6


def test_gradient_training_improves_likelihood():
    """Projected gradient ascent on a structured dataset beats the uniform start"""
    spn = uniform_weights(random_spn(2))
    data = samples_from(spn, 80, seed=2)
    result = train(spn, data, TrainConfig(epochs=8, learning_rate=0.05, batch_size=20))
    evidences = [s.evidence for s in data]
    assert evaluate_batch(result.spn, evidences).mean() > evaluate_batch(spn, evidences).mean()
    assert list(result.trace.columns) == ["epoch", "loss", "accuracy"]
    assert len(result.trace) == 8
    assert is_normalized(result.spn)


def test_trainable_restricts_updates():
    """Sum nodes outside ``trainable`` keep bit-identical weights"""
    spn = random_spn(3)
    data = samples_from(spn, 30, seed=3)
    sums = spn.sum_nodes
    chosen = [spn.root]
    result = train(spn, data, TrainConfig(epochs=2), trainable=chosen)
    frozen_edges = np.isin(spn.edge_parent, sums) & (spn.edge_parent != spn.root)
    assert np.array_equal(result.spn.weights[frozen_edges], spn.weights[frozen_edges])
    assert not np.array_equal(result.spn.weights, spn.weights)
    with pytest.raises(SpnInputError):
        train(spn, data, TrainConfig(), trainable=[0])
    with pytest.raises(SpnInputError):
        train(spn, [], TrainConfig())


def test_discriminative_training_separates_classes():
    """Cross-entropy over class roots pushes each class toward its own values"""
    spn, annotation = two_class_network()
    data = [LabeledSample(Evidence.observe({0: 0}, spn.variables), 0)] * 10 + \
           [LabeledSample(Evidence.observe({0: 2}, spn.variables), 1)] * 10
    cfg = TrainConfig(loss=Loss.DISCRIMINATIVE, epochs=20, learning_rate=0.5, batch_size=20)
    result = train(spn, data, cfg, class_roots=annotation.class_roots,
                   trainable=[annotation.class_roots[0], annotation.class_roots[1]])
    first, second = (result.spn.sum_weights(r) for r in annotation.class_roots)
    assert first[0] > first[2]
    assert second[2] > second[0]
    assert result.trace["accuracy"].iloc[-1] == 1.0
    with pytest.raises(SpnInputError, match="per-class roots"):
        train(spn, data, cfg)


def test_hybrid_training_phases():
    """Bottom trains discriminatively, then the root mixes generatively"""
    spn, annotation = two_class_network()
    data = [LabeledSample(Evidence.observe({0: 0}, spn.variables), 0)] * 15 + \
           [LabeledSample(Evidence.observe({0: 2}, spn.variables), 1)] * 5
    cfg = HybridConfig(discriminative=TrainConfig(loss=Loss.DISCRIMINATIVE, epochs=5, learning_rate=0.5),
                       generative=TrainConfig(epochs=10, learning_rate=0.1),
                       warm_start_epochs=2)
    result = hybrid_train(spn, annotation, data, cfg)
    assert len(result.warm_start_trace) == 2
    assert len(result.discriminative_trace) == 5
    assert len(result.generative_trace) == 10
    root_weights = result.spn.sum_weights(result.spn.root)
    assert root_weights[0] > root_weights[1]


def test_hybrid_training_skips_a_trained_bottom():
    """A bottom marked as trained stays untouched"""
    spn, annotation = two_class_network()
    data = [LabeledSample(Evidence.observe({0: 1}, spn.variables), 0)] * 4
    trained = LayerAnnotation(annotation.class_roots, annotation.bottom, bottom_trained=True)
    result = hybrid_train(spn, trained, data, HybridConfig(generative=TrainConfig(epochs=1)))
    assert result.discriminative_trace.empty
    for root in annotation.class_roots:
        np.testing.assert_array_equal(result.spn.sum_weights(root), spn.sum_weights(root))
    with pytest.raises(SpnInputError, match="not annotated"):
        hybrid_train(spn, None, data)


def test_prune_drops_light_edges():
    """Edges below the threshold disappear and weights renormalize"""
    b = SpnBuilder(variables_of([3]))
    leaves = [b.indicator(0, v) for v in range(3)]
    root = b.sum(leaves, [0.7, 0.29, 0.01])
    spn = b.build(root)
    pruned = prune(spn, 0.05)
    assert pruned.num_edges == 2
    np.testing.assert_allclose(pruned.sum_weights(pruned.root), [0.7 / 0.99, 0.29 / 0.99])
    assert pruned.num_nodes == 3


def test_prune_refuses_to_empty_a_sum():
    """A sum losing every child raises with its node id"""
    b = SpnBuilder(variables_of([3]))
    leaves = [b.indicator(0, v) for v in range(3)]
    root = b.sum(leaves, [1 / 3] * 3)
    spn = b.build(root)
    with pytest.raises(PruneError) as err:
        prune(spn, 0.5)
    assert err.value.node_id == root


def test_prune_report_on_dense_network():
    """Pruning shrinks the network and reports the likelihood change"""
    spn = random_spn(6)
    weights = spn.weights.copy()
    # only mixtures over products, so every assignment stays reachable
    mixing = np.flatnonzero((spn.kinds[spn.edge_parent] == NodeKind.SUM) &
                            (spn.kinds[spn.children] != NodeKind.INDICATOR))
    weights[mixing[::3]] = 1e-4
    spn = normalize_weights(spn.with_weights(weights))
    reference = [s.evidence for s in samples_from(spn, 10, seed=6)]
    pruned, report = prune_report(spn, 1e-3, reference)
    assert report.nodes_after <= report.nodes_before
    assert report.edges_after < report.edges_before
    assert check_validity(pruned).valid
    assert np.isfinite(report.degradation)


def test_samples_and_traces_on_disk(tmp_path):
    """Datasets are JSON lines; traces are CSV with one row per epoch"""
    spn = random_spn(0)
    data = samples_from(spn, 5, seed=0)
    path = save_samples(data, tmp_path / "data.jsonl")
    loaded = load_samples(path)
    assert len(loaded) == 5
    for a, b in zip(data, loaded):
        assert a.label == b.label
        for var, mask in a.evidence.masks.items():
            np.testing.assert_array_equal(mask, b.evidence.masks[var])
    trace = train(spn, data, TrainConfig(epochs=3)).trace
    csv = write_trace(trace, tmp_path / "loss.csv")
    assert len(pd.read_csv(csv)) == 3


@pytest.mark.slow
def test_em_recovers_a_naive_bayes_mixture():
    """A three-component structure trained on mixture samples matches the true held-out likelihood"""
    rng = np.random.default_rng(11)
    prior = np.array([0.5, 0.3, 0.2])
    # component c favours value (c + v) % 3 at variable v
    tables = np.array([[np.roll([0.8, 0.15, 0.05], (c + v) % 3) for v in range(4)] for c in range(3)])

    def draw(count):
        components = rng.choice(3, size=count, p=prior)
        return np.array([[rng.choice(3, p=tables[c, v]) for v in range(4)] for c in components])

    def true_log_likelihood(rows):
        per_component = np.log(prior)[None, :] + sum(np.log(tables[:, v, rows[:, v]]).T for v in range(4))
        return logsumexp(per_component, axis=1)

    variables = variables_of([3] * 4)
    as_evidence = lambda rows: [Evidence.observe(dict(enumerate(map(int, r))), variables) for r in rows]
    train_rows, held_out = draw(3000), draw(2000)
    data = [LabeledSample(e) for e in as_evidence(train_rows)]
    cfg = TrainConfig(optimizer="em", epochs=150, batch_size=500, grad_chunk=500)
    fits = []
    for seed in range(3):
        structure = StructureConfig(num_decompositions_per_level=1, num_subsets_per_decomposition=2,
                                    num_mixtures_per_scope=3, max_depth=1, rng_seed=seed)
        fits.append(train(generate_dense_structure(variables, structure), data, cfg))
    best = min(fits, key=lambda fit: fit.trace["loss"].iloc[-1])
    learned = evaluate_batch(best.spn, as_evidence(held_out)).mean()
    assert abs(learned - true_log_likelihood(held_out).mean()) <= 0.05
