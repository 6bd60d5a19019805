import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchlab import divergences as dv
from patchlab.data import generate_coupled_world, sample_dataset
from patchlab.errors import ContractError, UnsupportedCaseError
from patchlab.invariance import (FiniteJoint, HeadConfig, cdat_train, chain_rule_gap,
                                 coupled_mi_as_jsd, data_processing_gap, exact_conditional_mi,
                                 one_hot, prediction_mi_estimate, translation_divergence,
                                 variational_mi_estimate, verify_theorem1, world_joint)
from patchlab.suites import random_imperfect_translators, random_model, random_world
from patchlab.training import TrainConfig, make_model, train_model
from patchlab.translate import analytic_translators

LOG2 = math.log(2)


def constant_model(p):
    p = np.asarray(p, dtype=np.float64)
    return lambda x: np.tile(p, (len(x), 1))


def subgroup_indicator(world):
    # the subgroup block is the last coordinate, shifted to +-shift
    return lambda x: one_hot((np.asarray(x)[:, -1] > 0).astype(int), 2)


def brute_force_cmi(table, a, b, c):
    """Independent oracle: I(A;B|C) = H(A,C) + H(B,C) - H(A,B,C) - H(C) by summing entries."""
    def h(axes):
        keep = tuple(sorted(axes))
        drop = tuple(i for i in range(table.ndim) if i not in keep)
        m = table.sum(axis=drop).ravel()
        m = m[m > 0]
        return -float(np.sum(m * np.log(m)))
    return h(a + c) + h(b + c) - h(a + b + c) - (h(c) if c else 0.0)


def test_mi_examples():
    indep = np.einsum("i,j->ij", [0.3, 0.7], [0.5, 0.5])
    assert exact_conditional_mi(FiniteJoint(indep, ("a", "b")), "a", "b") == 0.0
    copy = np.diag([0.5, 0.5])
    assert exact_conditional_mi(FiniteJoint(copy, ("a", "b")), "a", "b") == pytest.approx(LOG2, abs=1e-15)
    with pytest.raises(ContractError):
        exact_conditional_mi(FiniteJoint(copy, ("a", "b")), "a", "q")
    with pytest.raises(ContractError):
        FiniteJoint(np.full((2, 2), 0.3), ("a", "b"))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), shape=st.lists(st.integers(1, 4), min_size=3, max_size=3))
def test_conditional_mi_matches_entropy_oracle(seed, shape):
    table = np.random.default_rng(seed).dirichlet(np.ones(int(np.prod(shape)))).reshape(shape)
    joint = FiniteJoint(table, ("a", "b", "c"))
    assert exact_conditional_mi(joint, "a", "b", "c") == pytest.approx(
        brute_force_cmi(table, (0,), (1,), (2,)), abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_mi_chain_rule_identity(seed):
    # I(A; B, C) = I(A; C) + I(A; B | C)
    table = np.random.default_rng(seed).dirichlet(np.ones(27) * 0.5).reshape(3, 3, 3)
    j = FiniteJoint(table, ("a", "b", "c"))
    lhs = exact_conditional_mi(j, "a", ("b", "c"))
    rhs = exact_conditional_mi(j, "a", "c") + exact_conditional_mi(j, "a", "b", "c")
    assert lhs == pytest.approx(rhs, abs=1e-10)


def test_world_joint_is_normalised():
    world = generate_coupled_world(3, 2, 4, 5, seed=1)
    joint = world_joint(random_model(world, np.random.default_rng(0)), world)
    assert joint.table.sum() == pytest.approx(1.0, abs=1e-12)
    assert joint.arity == {"cid": 12, "y": 3, "z": 2, "yhat": 3}


def test_constant_model():
    world = generate_coupled_world(2, 2, 5, 4, seed=0)
    model = constant_model([0.3, 0.7])
    mi, ej = coupled_mi_as_jsd(model, world)
    assert mi == pytest.approx(0.0, abs=1e-15) and ej == pytest.approx(0.0, abs=1e-15)
    assert chain_rule_gap(model, world) == pytest.approx(0.0, abs=1e-15)
    report = verify_theorem1(model, world, random_imperfect_translators(world, np.random.default_rng(0)))
    assert report.lhs == pytest.approx(0.0, abs=1e-15)
    assert report.slack == pytest.approx(report.rhs) and report.rhs >= 0


def test_subgroup_indicator_model():
    world = generate_coupled_world(2, 2, 5, 4, seed=0)
    model = subgroup_indicator(world)
    mi, ej = coupled_mi_as_jsd(model, world)
    assert mi == pytest.approx(LOG2, abs=1e-12) and ej == pytest.approx(LOG2, abs=1e-12)
    assert chain_rule_gap(model, world) >= -1e-12


def test_coupled_mi_dual_path_random_models():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        world = random_world(rng)
        mi, ej = coupled_mi_as_jsd(random_model(world, rng), world)
        worst = max(worst, abs(mi - ej))
    assert worst < 1e-10


def test_chain_rule_gap_random_models():
    rng = np.random.default_rng(1)
    for _ in range(30):
        world = random_world(rng, k=int(rng.integers(2, 4)))
        assert chain_rule_gap(random_model(world, rng), world) >= -1e-9


def test_translation_divergence_cases():
    x = np.array([1.0, 2.0])
    assert translation_divergence(x, [(1.0, x)]) == pytest.approx(0.0, abs=1e-15)
    assert translation_divergence(x, [(1.0, x + 1)]) == pytest.approx(LOG2, abs=1e-15)
    # point mass against a 0.6 / 0.4 mixture with the true point at 0.6
    expected = dv.jsd([[1.0, 0.0], [0.6, 0.4]])
    assert translation_divergence(x, [(0.6, x), (0.4, x + 1)]) == pytest.approx(expected, abs=1e-14)


def test_bound_equality_under_exact_translators():
    rng = np.random.default_rng(2)
    for _ in range(20):
        world = random_world(rng)
        report = verify_theorem1(random_model(world, rng), world, analytic_translators(world))
        assert abs(report.lhs - report.rhs) < 1e-10
        assert all(v == 0.0 for v in report.terms["L_CG"].values())


def test_bound_slack_random_translators():
    rng = np.random.default_rng(3)
    for _ in range(100):
        world = random_world(rng)
        model = random_model(world, rng)
        report = verify_theorem1(model, world, random_imperfect_translators(world, rng))
        assert report.slack >= -1e-9
        assert data_processing_gap(model, world, random_imperfect_translators(world, rng)) >= -1e-9


def test_bound_report_json_and_k_error():
    world = generate_coupled_world(2, 2, 3, 3, seed=0)
    report = verify_theorem1(constant_model([0.5, 0.5]), world, analytic_translators(world),
                             seeds={"trial": 4})
    assert '"trial": 4' in report.to_json()
    with pytest.raises(UnsupportedCaseError):
        verify_theorem1(constant_model([0.5, 0.5]), generate_coupled_world(2, 3, 3, 3),
                        analytic_translators(generate_coupled_world(2, 3, 3, 3)))


def test_variational_copy_of_subgroup():
    rng = np.random.default_rng(0)
    y = rng.integers(2, size=4000)
    z = rng.integers(2, size=4000)
    est = variational_mi_estimate(one_hot(z, 2) + rng.normal(0, 0.01, (4000, 2)), y, z,
                                  HeadConfig(epochs=500))
    assert est >= LOG2 - 0.05


def test_variational_independent_features():
    rng = np.random.default_rng(1)
    y = rng.integers(2, size=4000)
    z = rng.integers(2, size=4000)
    feats = np.column_stack([y, rng.normal(size=4000)])
    half = 2000
    est = variational_mi_estimate(feats[:half], y[:half], z[:half], HeadConfig(epochs=500),
                                  held_out=(feats[half:], y[half:], z[half:]))
    assert est <= 0.02


def test_variational_exact_weights_lower_bound():
    rng = np.random.default_rng(2)
    for _ in range(5):
        m, k = 3, 2
        table = rng.dirichlet(np.ones(2 * m * k)).reshape(2, m, k)
        mi = exact_conditional_mi(FiniteJoint(table, ("y", "x", "z")), "x", "z", "y")
        yy, xx, zz = np.meshgrid(range(2), range(m), range(k), indexing="ij")
        est = variational_mi_estimate(one_hot(xx.ravel(), m), yy.ravel(), zz.ravel(),
                                      HeadConfig(epochs=3000), weights=table.ravel())
        assert mi - 0.05 <= est <= mi + 1e-9


@pytest.fixture(scope="module")
def small_split():
    world = generate_coupled_world(latents_per_class=1500, input_dim=8, seed=0, class_dims=2,
                                   class_separation=2.5)
    return sample_dataset(world, 2000, 0.95, seed=0, n_test=400)


def test_cdat_zero_coefficient_equals_erm(small_split):
    cfg = TrainConfig(method="ERM", epochs=3, seed=5)
    erm = train_model(make_model(8, 2, (16,), 5), small_split, cfg.replace(hidden=(16,)))
    model, trace = cdat_train(make_model(8, 2, (16,), 5), small_split, 0.0, epochs=3,
                              config=cfg.replace(hidden=(16,)), seed=5)
    for a, b in zip(erm.model.state(), model.state()):
        assert np.array_equal(a, b)
    assert len(trace) == 3


@pytest.mark.slow
def test_cdat_reduces_prediction_mi(small_split):
    cfg = TrainConfig(method="ERM", epochs=10, seed=0, hidden=(16,))
    erm = train_model(make_model(8, 2, (16,), 0), small_split, cfg).model
    cdat, _ = cdat_train(make_model(8, 2, (16,), 0), small_split, 1.0, config=cfg)
    mi_erm = prediction_mi_estimate(erm, small_split.test, HeadConfig(epochs=300))
    mi_cdat = prediction_mi_estimate(cdat, small_split.test, HeadConfig(epochs=300))
    assert mi_cdat <= mi_erm
