import gzip
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchlab.data import (DigitSource, Examples, correlation_cell_counts, generate_coupled_world,
                           mnist_correlation, parse_idx, read_idx, sample_dataset,
                           subgroup_batches, synthetic_digits, write_idx, zigzag_overlay)
from patchlab.errors import DataError, FormatError, ParameterError
from patchlab.invariance import FiniteJoint, exact_conditional_mi


def test_small_world_counting():
    world = generate_coupled_world(2, 2, 4, 4, seed=0)
    ex, prob = world.enumerate()
    assert len(ex) == 16
    assert len(np.unique(ex.x, axis=0)) == 16
    sets = {}
    for cid in ex.coupled_id:
        sets[int(cid)] = sets.get(int(cid), 0) + 1
    assert len(sets) == 8 and set(sets.values()) == {2}
    assert prob.sum() == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(2, 4), classes=st.integers(2, 3),
       dim=st.integers(1, 8))
def test_world_renderers_are_exact_and_invertible(seed, k, classes, dim):
    world = generate_coupled_world(classes, k, 3, dim, seed=seed)
    ex, _ = world.enumerate()
    assert len(np.unique(ex.x, axis=0)) == len(ex)
    for x, y, z, cid in zip(ex.x, ex.y, ex.z, ex.coupled_id):
        latent = int(cid) - int(y) * world.num_latents
        assert world.locate(x) == (int(y), int(z), latent)


def test_uniform_world_subgroup_independent_of_label():
    # I(Z; Y) = 0 and Z independent of [X] given Y by construction
    world = generate_coupled_world(2, 3, 5, 6, seed=4)
    ex, prob = world.enumerate()
    table = np.zeros((2, 3, world.num_classes * world.num_latents))
    for y, z, c, p in zip(ex.y, ex.z, ex.coupled_id, prob):
        table[y, z, c] += p
    joint = FiniteJoint(table, ("y", "z", "cid"))
    assert exact_conditional_mi(joint, "z", "y") == pytest.approx(0.0, abs=1e-14)
    assert exact_conditional_mi(joint, "z", "cid", "y") == pytest.approx(0.0, abs=1e-14)


def test_cell_counts_table4():
    # 40000 at rho=0.98: 19800 / 200 per class before the 50% validation split
    counts = correlation_cell_counts(40000, 0.98)
    assert counts == {(0, 0): 19800, (0, 1): 200, (1, 0): 200, (1, 1): 19800}
    assert correlation_cell_counts(40000, 0.0) == {c: 10000 for c in counts}
    assert correlation_cell_counts(40000, 1.0) == {(0, 0): 20000, (0, 1): 0, (1, 0): 0, (1, 1): 20000}


def test_cell_counts_errors():
    with pytest.raises(ParameterError):
        correlation_cell_counts(100, 1.5)
    with pytest.raises(ParameterError):
        correlation_cell_counts(101, 0.5)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 5000).map(lambda v: 2 * v), rho=st.floats(-1, 1))
def test_cell_counts_sum_and_balance(n, rho):
    c = correlation_cell_counts(n, rho)
    assert sum(c.values()) == n
    assert c[(0, 0)] + c[(0, 1)] == n // 2
    assert min(c.values()) >= 0


def test_sample_dataset_counts_and_disjoint_latents():
    world = generate_coupled_world(2, 2, 300, 6, seed=1)
    split = sample_dataset(world, 400, 0.5, seed=2, n_test=50)
    want = correlation_cell_counts(400, 0.5)
    total = {c: split.counts()["train"].get(c, 0) + split.counts()["validation"].get(c, 0)
             for c in want}
    assert total == want
    test_ids = set(split.test.coupled_id.tolist())
    assert not test_ids & set(split.train.coupled_id.tolist())
    assert not test_ids & set(split.validation.coupled_id.tolist())
    # every test latent appears once per subgroup
    tc = split.test.cell_counts()
    assert tc[(0, 0)] == tc[(0, 1)] == 50 and tc[(1, 0)] == tc[(1, 1)] == 50


def test_sample_dataset_is_deterministic():
    world = generate_coupled_world(2, 2, 100, 4, seed=3)
    a = sample_dataset(world, 100, 0.9, seed=7)
    b = sample_dataset(world, 100, 0.9, seed=7)
    assert np.array_equal(a.train.x, b.train.x) and np.array_equal(a.test.x, b.test.x)


def test_sample_dataset_rejects_too_few_latents():
    world = generate_coupled_world(2, 2, 10, 4, seed=3)
    with pytest.raises(ParameterError):
        sample_dataset(world, 100, 0.5)


def test_synthetic_digits_range_and_labels():
    src = synthetic_digits(500, seed=0)
    assert src.images.shape == (500, 28, 28) and src.images.dtype == np.uint8
    assert set(np.unique(src.labels)) == set(range(10))
    flat = src.images.reshape(500, -1)
    assert len(np.unique(flat, axis=0)) == 500


def test_zigzag_overlay_is_deterministic_and_brightens():
    imgs = synthetic_digits(20, seed=1).images
    a, b = zigzag_overlay(imgs), zigzag_overlay(imgs)
    assert np.array_equal(a, b)
    assert np.all(a >= imgs) and np.any(a > imgs)


def test_mnist_correlation_counts_and_pixels():
    clean = synthetic_digits(6000, seed=0)
    split = mnist_correlation(clean, 4000, 0.98, seed=0, n_test=200)
    assert split.counts()["train"] == {(0, 0): 990, (0, 1): 10, (1, 0): 10, (1, 1): 990}
    assert split.counts()["validation"] == {(0, 0): 990, (0, 1): 10, (1, 0): 10, (1, 1): 990}
    for part in (split.train, split.validation, split.test):
        assert part.x.min() >= 0.0 and part.x.max() <= 1.0
        assert np.array_equal(part.y, np.asarray(part.y) % 2)
    tc = split.test.cell_counts()
    assert tc[(0, 0)] == tc[(0, 1)] and tc[(1, 0)] == tc[(1, 1)]
    assert split.meta["synthetic_corruption"] and split.meta["synthetic_digits"]


def test_mnist_correlation_names_short_cell():
    clean = synthetic_digits(300, seed=0)
    with pytest.raises(DataError, match="even"):
        mnist_correlation(clean, 400, 0.9, seed=0)


def test_idx_round_trip(tmp_path):
    arr = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "a.idx", arr)
    assert np.array_equal(read_idx(tmp_path / "a.idx").array, arr)
    raw = (tmp_path / "a.idx").read_bytes()
    with gzip.open(tmp_path / "a.idx.gz", "wb") as fh:
        fh.write(raw)
    assert np.array_equal(read_idx(tmp_path / "a.idx.gz").array, arr)


def test_idx_headers():
    # independent construction of the reference header layout
    images = bytes([0, 0, 8, 3]) + struct.pack(">III", 5, 28, 28) + bytes(5 * 784)
    parsed = parse_idx(images)
    assert len(parsed) == 5 and parsed.array.shape == (5, 28, 28)
    labels = bytes([0, 0, 8, 1]) + struct.pack(">I", 7) + bytes(range(7))
    assert parse_idx(labels).array.tolist() == list(range(7))


@pytest.mark.parametrize("buf, offset", [
    (bytes([1, 0, 8, 1]) + struct.pack(">I", 1) + b"\0", 0),
    (bytes([0, 0, 9, 1]) + struct.pack(">I", 1) + b"\0", 2),
    (bytes([0, 0, 8, 2]) + struct.pack(">I", 1), 8),
    (bytes([0, 0, 8, 1]) + struct.pack(">I", 10) + bytes(4), 12),
])
def test_idx_errors_carry_offset(buf, offset):
    with pytest.raises(FormatError) as err:
        parse_idx(buf)
    assert err.value.offset == offset


def _examples(counts, seed=0):
    rng = np.random.default_rng(seed)
    parts = [Examples(rng.normal(size=(n, 2)), np.full(n, y), np.full(n, z))
             for (y, z), n in counts.items()]
    return Examples.concat(parts)


@settings(max_examples=40, deadline=None)
@given(sizes=st.lists(st.integers(1, 60), min_size=4, max_size=4), batch=st.integers(4, 32),
       seed=st.integers(0, 1000))
def test_batches_cover_every_cell(sizes, batch, seed):
    ex = _examples(dict(zip([(0, 0), (0, 1), (1, 0), (1, 1)], sizes)))
    batches = list(subgroup_batches(ex, batch, seed))
    seen = set()
    for b in batches:
        assert {(int(ex.y[i]), int(ex.z[i])) for i in b} == set(ex.cells())
        seen.update(int(i) for i in b)
    assert seen == set(range(len(ex)))


def test_batches_one_cell_is_plain_shuffle():
    ex = _examples({(0, 0): 25})
    batches = list(subgroup_batches(ex, 10, seed=0))
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(25))
    assert [len(b) for b in batches] == [9, 8, 8] or sum(map(len, batches)) == 25


def test_batches_unsatisfiable():
    ex = _examples({(0, 0): 5, (0, 1): 5, (1, 0): 5, (1, 1): 5})
    with pytest.raises(ParameterError):
        list(subgroup_batches(ex, 3))
