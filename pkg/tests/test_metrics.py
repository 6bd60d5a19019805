import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchlab.data import Examples
from patchlab.errors import ContractError
from patchlab.invariance import one_hot
from patchlab.metrics import (EvalReport, TrialSummary, aggregate_accuracy, cell_table, percent,
                              robust_accuracy, subgroup_accuracies, subgroup_gap)

CELLS = [(0, 0), (0, 1), (1, 0), (1, 1)]


def _examples():
    y = np.array([0, 0, 0, 1, 1, 1, 1])
    z = np.array([0, 1, 1, 0, 0, 1, 1])
    return Examples(np.column_stack([y, z]).astype(float), y, z)


def test_perfect_and_constant_models():
    ex = _examples()
    perfect = lambda x: one_hot(x[:, 0].astype(int), 2)
    assert all(v == 1.0 for v in subgroup_accuracies(perfect, ex).values())
    const = lambda x: np.tile([0.9, 0.1], (len(x), 1))
    table = subgroup_accuracies(const, ex)
    assert table == {(0, 0): 1.0, (0, 1): 1.0, (1, 0): 0.0, (1, 1): 0.0}


def test_absent_cells_marked_and_skipped():
    table, sizes = cell_table([0, 1], [0, 1], [0, 0], CELLS)
    assert table[(0, 1)] is None and sizes[(0, 1)] == 0
    assert robust_accuracy(table) == 1.0
    assert subgroup_gap(table, 0) == 0.0
    with pytest.raises(ContractError):
        robust_accuracy({(0, 0): None})


def test_reference_erm_robust_accuracy():
    table = dict(zip(CELLS, [0.8696, 0.7351, 0.7147, 0.7521]))
    assert robust_accuracy(table) == pytest.approx(0.7147)
    assert percent(robust_accuracy(table)) == "71.47"
    assert subgroup_gap(table, 0) == pytest.approx(0.1345)


def test_reference_landbird_gap():
    table = {(0, 0): 0.9892, (0, 1): 0.7512}
    assert percent(subgroup_gap(table, 0)) == "23.80"


def test_simple_reductions():
    assert robust_accuracy({(0, 0): 0.4, (1, 0): 0.4}) == 0.4
    assert robust_accuracy({(0, 0): 0.3}) == 0.3
    assert subgroup_gap({(0, 0): 0.5, (0, 1): 0.5}, 0) == 0.0
    assert subgroup_gap({(0, 0): 0.5, (1, 0): 0.2}, 0) == 0.0
    assert aggregate_accuracy({(0, 0): 0.8, (0, 1): 0.6}, {(0, 0): 5, (0, 1): 5}) == pytest.approx(0.7)
    assert aggregate_accuracy({(0, 0): 0.8}, {(0, 0): 5}) == 0.8
    assert aggregate_accuracy({(0, 0): 1.0, (0, 1): 0.0}, {(0, 0): 3, (0, 1): 1}) == 0.75


@settings(max_examples=200, deadline=None)
@given(accs=st.lists(st.floats(0, 1), min_size=4, max_size=4),
       sizes=st.lists(st.integers(1, 100), min_size=4, max_size=4))
def test_reduction_ordering(accs, sizes):
    table = dict(zip(CELLS, accs))
    sz = dict(zip(CELLS, sizes))
    r, a = robust_accuracy(table), aggregate_accuracy(table, sz)
    assert r <= a + 1e-12 and a <= max(accs) + 1e-12
    for y in (0, 1):
        assert 0 <= subgroup_gap(table, y) <= 1


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_aggregate_equals_overall_accuracy(seed):
    rng = np.random.default_rng(seed)
    y, z = rng.integers(2, size=50), rng.integers(2, size=50)
    pred = rng.integers(2, size=50)
    report = EvalReport.from_predictions(pred, y, z)
    assert report.aggregate == pytest.approx(np.mean(pred == y))
    assert report.max_gap == max(report.gaps.values())
    d = report.as_dict()
    assert d["robust_acc"] == report.robust and "gap_1" in d and "acc_1_1" in d


def test_argmax_ties_go_to_lowest_class():
    ex = _examples()
    report = EvalReport.evaluate(lambda x: np.full((len(x), 2), 0.5), ex)
    assert report.cells[(0, 0)] == 1.0 and report.cells[(1, 0)] == 0.0


def test_trial_summary():
    rows = [{"robust_acc": 0.5, "mi": None}, {"robust_acc": 0.7, "mi": 0.1}]
    s = TrialSummary.from_rows(rows)
    assert s.n == 2 and "mi" not in s.mean
    assert s.std["robust_acc"] == pytest.approx(np.std([0.5, 0.7], ddof=1))
    assert s.format("robust_acc") == "60.00 (14.14)"
    assert TrialSummary.from_rows([{"a": 0.3}]).std["a"] == 0.0
    with pytest.raises(ContractError):
        TrialSummary.from_rows([])
