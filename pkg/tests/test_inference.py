import itertools

import numpy as np
import pytest

from conftest import random_spn
from test_spn import naive_bayes
from toponets.errors import ImpossibleEvidenceError, SpnInputError
from toponets.inference import (OpCounter, evaluate, evaluate_batch, forward, indicator_gradients, log_indicators,
                                marginals, max_product, mpe, weight_gradients)
from toponets.spn import Evidence, NodeKind


def polynomial(spn, lam, use_max=False):
    """Direct node-by-node evaluation of the network at indicator values ``lam[var][value]``."""
    values = []
    for i in range(spn.num_nodes):
        node = spn.node(i)
        if node.kind == NodeKind.INDICATOR:
            values.append(lam[node.variable][node.value])
        elif node.kind == NodeKind.SUM:
            terms = [w * values[c] for c, w in zip(node.children, node.weights)]
            values.append(max(terms) if use_max else sum(terms))
        else:
            values.append(float(np.prod([values[c] for c in node.children])))
    return values[spn.root]


def polynomial_table(spn, states, use_max=False):
    """The network at every complete assignment in ``states``, one node at a time."""
    last_use = {}
    for i in range(spn.num_nodes):
        for c in spn.node(i).children:
            last_use[c] = i
    values = {}
    for i in range(spn.num_nodes):
        node = spn.node(i)
        if node.kind == NodeKind.INDICATOR:
            values[i] = (states[:, node.variable] == node.value).astype(np.float64)
        elif node.kind == NodeKind.SUM:
            terms = [w * values[c] for c, w in zip(node.children, node.weights)]
            values[i] = np.maximum.reduce(terms) if use_max else np.sum(terms, axis=0)
        else:
            values[i] = np.prod([values[c] for c in node.children], axis=0)
        for c in set(node.children):
            if last_use[c] == i and c != spn.root:
                del values[c]
    return values[spn.root]


def one_hot(spn, assignment):
    return [[1.0 if assignment[v.index] == k else 0.0 for k in range(v.cardinality)] for v in spn.variables]


def completions(spn, fixed):
    free = [v for v in spn.variables if v.index not in fixed]
    for values in itertools.product(*(range(v.cardinality) for v in free)):
        full = dict(fixed)
        full.update({v.index: x for v, x in zip(free, values)})
        yield full


def test_evaluate_matches_enumeration():
    """Marginal evidence equals the sum of the polynomial over consistent completions"""
    for seed in range(20):
        spn = random_spn(seed)
        fixed = {0: seed % 3, 2: (seed + 1) % 3}
        expected = sum(polynomial(spn, one_hot(spn, full)) for full in completions(spn, fixed))
        evidence = Evidence.observe(fixed, spn.variables).merged(
            Evidence.marginal([v for v in spn.variables if v.index not in fixed]))
        assert evaluate(spn, evidence) == pytest.approx(np.log(expected), abs=1e-9)


@pytest.mark.parametrize("seed", range(200))
def test_passes_match_exhaustive_enumeration(seed):
    """Evaluate, marginals and mpe agree with enumeration over up to twelve ternary variables"""
    num_vars = 1 + seed % 12
    spn = random_spn(seed, num_vars=num_vars, depth=2)
    rng = np.random.default_rng(seed)
    observed = {v: int(rng.integers(3)) for v in range(num_vars) if rng.random() < 0.3}
    free = [v for v in spn.variables if v.index not in observed]
    evidence = Evidence.observe(observed, spn.variables).merged(Evidence.marginal(free))

    states = np.indices((3,) * num_vars, dtype=np.int8).reshape(num_vars, -1).T
    consistent = np.ones(len(states), dtype=bool)
    for var, value in observed.items():
        consistent &= states[:, var] == value
    states = states[consistent]
    p = polynomial_table(spn, states)
    assert evaluate(spn, evidence) == pytest.approx(np.log(p.sum()), abs=1e-9)

    posterior = marginals(spn, evidence)
    for var in range(num_vars):
        expected = np.bincount(states[:, var], weights=p, minlength=3) / p.sum()
        np.testing.assert_allclose(posterior[var], expected, atol=1e-6)

    best = polynomial_table(spn, states, use_max=True).max()
    result = mpe(spn, evidence)
    assert set(result.assignment) == {v.index for v in free}
    assert result.log_score == pytest.approx(np.log(best), abs=1e-9)
    decoded = {**result.assignment, **observed}
    assert polynomial(spn, one_hot(spn, decoded), use_max=True) == pytest.approx(best, rel=1e-9)


def test_normalized_network_sums_to_one():
    """With all variables marginalized a normalized network evaluates to log 1"""
    for seed in range(5):
        spn = random_spn(seed)
        assert evaluate(spn, Evidence.marginal(spn.variables)) == pytest.approx(0.0, abs=1e-12)


def test_subset_evidence():
    """A mask with two true values sums over exactly those values"""
    spn = naive_bayes()
    mask = Evidence({0: np.array([True, True]), 1: np.array([True, False])})
    # x1 = 0 under the mixture: 0.4 * 0.3 + 0.6 * 0.6
    assert np.exp(evaluate(spn, mask)) == pytest.approx(0.48)


def test_evaluate_batch_matches_single_calls():
    """Batched evaluation equals one call per evidence row"""
    spn = random_spn(3)
    rows = [Evidence.observe(full, spn.variables) for full in itertools.islice(completions(spn, {}), 12)]
    batch = evaluate_batch(spn, rows)
    np.testing.assert_allclose(batch, [evaluate(spn, e) for e in rows], atol=1e-12)


def test_marginals_match_enumeration():
    """Posterior marginals equal brute-force conditionals"""
    for seed in range(10):
        spn = random_spn(seed)
        fixed = {1: seed % 3}
        evidence = Evidence.observe(fixed, spn.variables).merged(
            Evidence.marginal([v for v in spn.variables if v.index != 1]))
        table = {}
        for full in completions(spn, fixed):
            table[tuple(full[v.index] for v in spn.variables)] = polynomial(spn, one_hot(spn, full))
        total = sum(table.values())
        result = marginals(spn, evidence)
        for var in range(4):
            expected = np.zeros(3)
            for key, p in table.items():
                expected[key[var]] += p / total
            np.testing.assert_allclose(result[var], expected, atol=1e-9)
        np.testing.assert_allclose(result[1], np.eye(3)[fixed[1]])


def test_naive_bayes_posterior():
    """Posterior of X1 given X0 in a two-component mixture"""
    spn = naive_bayes()
    evidence = Evidence({0: np.array([True, False]), 1: np.ones(2, dtype=bool)})
    posterior = marginals(spn, evidence)[1]
    # component posteriors 0.4 * 0.8 : 0.6 * 0.1
    c = np.array([0.32, 0.06]) / 0.38
    expected = c[0] * np.array([0.3, 0.7]) + c[1] * np.array([0.6, 0.4])
    np.testing.assert_allclose(posterior, expected, atol=1e-12)


def test_mpe_attains_brute_force_max_product():
    """The decoded assignment reaches the best max-product score"""
    for seed in range(20):
        spn = random_spn(seed)
        fixed = {3: seed % 3}
        evidence = Evidence.observe(fixed, spn.variables).merged(
            Evidence.marginal([v for v in spn.variables if v.index != 3]))
        best = max(polynomial(spn, one_hot(spn, full), use_max=True) for full in completions(spn, fixed))
        result = mpe(spn, evidence)
        assert result.log_score == pytest.approx(np.log(best), abs=1e-9)
        assert set(result.assignment) == {0, 1, 2}
        decoded = {**result.assignment, **fixed}
        assert polynomial(spn, one_hot(spn, decoded), use_max=True) == pytest.approx(best, rel=1e-9)


def test_mpe_fully_observed_has_empty_assignment():
    """Fully observed evidence leaves nothing to decode; max never exceeds sum"""
    spn = random_spn(1)
    evidence = Evidence.observe({0: 0, 1: 1, 2: 2, 3: 0}, spn.variables)
    result = mpe(spn, evidence)
    assert result.assignment == {}
    assert result.log_score <= evaluate(spn, evidence) + 1e-12


def test_mpe_sum_out_marginalizes_variables():
    """Summed-out variables are integrated rather than maximized"""
    for seed in range(10):
        spn = random_spn(seed)
        evidence = Evidence.marginal(spn.variables)
        result = mpe(spn, evidence, sum_out=[2, 3])
        assert set(result.assignment) <= {0, 1}
        assert 2 not in result.assignment and 3 not in result.assignment
        # the mixed score lies between the pure max-product and the full sum
        assert max_product(spn, [evidence])[0] - 1e-12 <= result.log_score <= 1e-12


def test_impossible_evidence():
    """Zero-probability evidence raises instead of returning -inf posteriors"""
    spn = naive_bayes().with_weights(np.array(
        [1.0, 0.0, 0.3, 0.7, 1.0, 1.0, 1.0, 0.0, 0.6, 0.4, 1.0, 1.0, 0.4, 0.6]))
    evidence = Evidence({0: np.array([False, True]), 1: np.ones(2, dtype=bool)})
    assert evaluate(spn, evidence) == -np.inf
    with pytest.raises(ImpossibleEvidenceError):
        marginals(spn, evidence)
    with pytest.raises(ImpossibleEvidenceError):
        mpe(spn, evidence)


def test_indicator_gradients_match_finite_differences():
    """Analytic indicator derivatives agree with central differences"""
    rng = np.random.default_rng(0)
    for seed in range(10):
        spn = random_spn(seed)
        lam = rng.uniform(0.2, 1.0, size=spn.num_slots)
        grads = indicator_gradients(spn, lam)
        offsets = spn.slot_offsets
        for slot in rng.choice(spn.num_slots, size=4, replace=False):
            h = 1e-6
            up, down = lam.copy(), lam.copy()
            up[slot] += h
            down[slot] -= h
            as_table = lambda x: [x[offsets[v]:offsets[v + 1]] for v in range(len(spn.variables))]
            numeric = (polynomial(spn, as_table(up)) - polynomial(spn, as_table(down))) / (2 * h)
            assert grads[slot] == pytest.approx(numeric, rel=1e-4, abs=1e-9)


def test_weight_gradients_match_finite_differences():
    """d log S / d w agrees with central differences on sum edges"""
    rng = np.random.default_rng(1)
    for seed in range(10):
        spn = random_spn(seed)
        evidence = Evidence.observe({0: 1}, spn.variables).merged(Evidence.marginal(spn.variables[1:]))
        grads = weight_gradients(spn, evidence)
        sum_edges = np.flatnonzero(spn.kinds[spn.edge_parent] == NodeKind.SUM)
        for edge in rng.choice(sum_edges, size=4, replace=False):
            h = 1e-6
            up, down = spn.weights.copy(), spn.weights.copy()
            up[edge] += h
            down[edge] -= h
            numeric = (evaluate(spn.with_weights(up), evidence) - evaluate(spn.with_weights(down), evidence)) / (2 * h)
            assert grads[edge] == pytest.approx(numeric, rel=1e-4, abs=1e-8)
        product_edges = spn.kinds[spn.edge_parent] == NodeKind.PRODUCT
        assert np.all(grads[product_edges] == 0.0)


def test_passes_touch_each_edge_once():
    """Upward pass cost is linear in the edge count"""
    spn = random_spn(4)
    counter = OpCounter()
    evaluate(spn, Evidence.marginal(spn.variables), counter)
    assert counter.edges == spn.num_edges
    assert counter.passes == 1


def test_forward_rejects_bad_inputs():
    """Wrong slot counts and unknown modes are input errors"""
    spn = naive_bayes()
    with pytest.raises(SpnInputError):
        forward(spn, np.zeros((1, 3)))
    with pytest.raises(SpnInputError):
        forward(spn, np.zeros((1, 4)), mode="median")
    with pytest.raises(SpnInputError):
        forward(spn, np.zeros((1, 4)), mode="mixed")
    assert log_indicators(spn, [Evidence.marginal(spn.variables)]).shape == (1, 4)
