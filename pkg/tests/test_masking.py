import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitmask.errors import ConfigError
from splitmask.masking import (
    MaskPlan,
    block_mask,
    default_block_bounds,
    make_plans,
    split,
    target_count,
    uniform_mask,
)


def assert_partition(plan, expected_masked):
    a, b = split(plan)
    assert b.size == expected_masked
    assert np.intersect1d(a, b).size == 0
    np.testing.assert_array_equal(np.union1d(a, b), np.arange(plan.n))
    assert (np.diff(a) > 0).all() and (np.diff(b) > 0).all()


def test_block_mask_196_grid():
    plan = block_mask((14, 14), 0.5, 16, 75, np.random.default_rng(0))
    assert plan.num_masked == 98
    assert_partition(plan, 98)


def test_block_mask_small_grid():
    for seed in range(50):
        plan = block_mask((4, 4), 0.5, 1, 6, np.random.default_rng(seed))
        assert_partition(plan, 8)


def test_block_mask_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        block_mask((4, 4), 0.5, 17, 20, rng)
    with pytest.raises(ConfigError):
        block_mask((4, 4), 0.5, 4, 2, rng)
    with pytest.raises(ConfigError):
        block_mask((4, 4), 1.0, 1, 4, rng)


def test_block_masks_are_contiguous_more_than_uniform():
    # block plans have far fewer masked/observed neighbour boundaries than uniform ones
    rng = np.random.default_rng(1)

    def boundaries(plan):
        g = plan.as_grid()
        return (g[1:] != g[:-1]).sum() + (g[:, 1:] != g[:, :-1]).sum()

    blk = np.mean([boundaries(block_mask((14, 14), 0.5, 16, 75, rng)) for _ in range(200)])
    uni = np.mean([boundaries(uniform_mask(196, 0.5, rng, (14, 14))) for _ in range(200)])
    assert blk < 0.6 * uni


def test_block_mask_marginals_196_grid():
    rng = np.random.default_rng(2)
    counts = np.zeros(196)
    for _ in range(10_000):
        counts += block_mask((14, 14), 0.5, 16, 75, rng).masked
    marginal = counts / 10_000
    assert marginal.min() >= 0.35 and marginal.max() <= 0.65


def test_default_block_bounds():
    assert default_block_bounds(196) == (16, 75)
    assert default_block_bounds(16) == (1, 6)
    assert default_block_bounds(4) == (1, 1)


def test_uniform_mask_counts():
    assert uniform_mask(16, 0.75, np.random.default_rng(0)).num_masked == 12
    plan = uniform_mask(2, 0.5, np.random.default_rng(0))
    assert_partition(plan, 1)
    assert target_count(100, 0.29) == 29


def test_uniform_mask_marginal_inclusion():
    rng = np.random.default_rng(3)
    draws, n, ratio = 100_000, 16, 0.75
    counts = np.zeros(n)
    for _ in range(draws):
        counts += uniform_mask(n, ratio, rng).masked
    sigma = np.sqrt(draws * ratio * (1 - ratio))
    assert np.abs(counts - draws * ratio).max() < 4 * sigma


def test_split_example_and_empty_side():
    plan = MaskPlan((2, 2), np.array([False, True, False, True]))
    a, b = split(plan)
    assert a.tolist() == [0, 2] and b.tolist() == [1, 3]
    with pytest.raises(ConfigError):
        split(MaskPlan((2, 2), np.zeros(4, dtype=bool)))


@pytest.mark.parametrize("kind", ["block", "uniform"])
def test_partition_property_sweep(kind):
    rng = np.random.default_rng(4)
    for _ in range(10_000):
        plan = make_plans(kind, 1, (4, 4), 0.5, rng)[0]
        a, b = split(plan)
        assert a.size == b.size == 8
        assert np.intersect1d(a, b).size == 0 and a.size + b.size == 16


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.floats(0.05, 0.95), st.integers(0, 10_000))
def test_plans_partition_and_count_exact(rows, cols, ratio, seed):
    n = rows * cols
    rng = np.random.default_rng(seed)
    lo, hi = default_block_bounds(n)
    for plan in (block_mask((rows, cols), ratio, lo, hi, rng), uniform_mask(n, ratio, rng, (rows, cols))):
        assert plan.num_masked == target_count(n, ratio)
        assert plan.complement().num_masked == n - plan.num_masked


def test_plans_deterministic_in_seed():
    a = make_plans("block", 4, (4, 4), 0.5, np.random.default_rng(7))
    b = make_plans("block", 4, (4, 4), 0.5, np.random.default_rng(7))
    assert all((p.masked == q.masked).all() for p, q in zip(a, b))
    with pytest.raises(ConfigError):
        make_plans("checkerboard", 1, (4, 4), 0.5, np.random.default_rng(0))
