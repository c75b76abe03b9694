"""Deterministic Brownian grids: reproducibility, moments, exact coarsening."""

import math

import numpy as np
import pytest

import truncmil as tm
from truncmil.brownian import block_sums, generate_batch, total_increment


def test_regeneration_is_bit_exact():
    a = tm.generate(123, 7, 2, 1.0, 64)
    b = tm.generate(123, 7, 2, 1.0, 64)
    assert np.array_equal(a.increments, b.increments)
    assert a.dt_fine == 1.0 / 64


def test_different_paths_differ():
    a = tm.generate(123, 0, 1, 1.0, 256)
    b = tm.generate(123, 1, 1, 1.0, 256)
    assert not np.array_equal(a.increments, b.increments)


def test_streams_nearly_uncorrelated():
    n = 10**5
    a = tm.generate(9, 0, 1, 1.0, n).increments[:, 0]
    b = tm.generate(9, 1, 1, 1.0, n).increments[:, 0]
    corr = np.corrcoef(a, b)[0, 1]
    assert abs(corr) < 0.01


def test_increment_moments():
    n = 10**6
    grid = tm.generate(42, 0, 1, 1.0, n)
    x = grid.increments[:, 0]
    dt = grid.dt_fine
    se_mean = math.sqrt(dt / n)
    assert abs(x.mean()) < 4 * se_mean
    var = x.var(ddof=1)
    se_var = dt * math.sqrt(2.0 / (n - 1))
    assert abs(var - dt) < 3 * se_var
    m4 = np.mean(x**4)
    se_m4 = dt**2 * math.sqrt(96.0 / n)   # Var(X^4) = 96 dt^4 for N(0, dt)
    assert abs(m4 - 3.0 * dt**2) < 5 * se_m4


def test_generate_validation():
    with pytest.raises(ValueError):
        tm.generate(1, 0, 1, 1.0, 0)
    with pytest.raises(ValueError):
        tm.generate(1, -1, 1, 1.0, 8)
    with pytest.raises(ValueError):
        tm.generate(1, 0, 1, 0.0, 8)


def test_increments_read_only():
    grid = tm.generate(1, 0, 1, 1.0, 8)
    with pytest.raises(ValueError):
        grid.increments[0, 0] = 0.0


def test_coarsen_identity_and_total():
    grid = tm.generate(3, 2, 2, 2.0, 16)
    assert tm.coarsen(grid, 1) is grid
    full = tm.coarsen(grid, 16)
    assert full.n_fine == 1
    assert np.array_equal(full.increments[0], total_increment(grid))


def test_coarsen_exact_block_sums():
    grid = tm.generate(3, 5, 1, 1.0, 32)
    coarse = tm.coarsen(grid, 4)
    assert coarse.n_fine == 8
    assert coarse.dt_fine == pytest.approx(4 * grid.dt_fine)
    # pairwise reduction of each block, computed independently
    inc = grid.increments.reshape(8, 4)
    manual = (inc[:, 0] + inc[:, 1]) + (inc[:, 2] + inc[:, 3])
    assert np.array_equal(coarse.increments[:, 0], manual)


def test_coarsen_composes_bit_exactly():
    grid = tm.generate(17, 3, 2, 1.0, 64)
    twice = tm.coarsen(tm.coarsen(grid, 2), 2)
    direct = tm.coarsen(grid, 4)
    assert np.array_equal(twice.increments, direct.increments)
    deep = tm.coarsen(tm.coarsen(grid, 8), 4)
    assert np.array_equal(deep.increments, tm.coarsen(grid, 32).increments)


def test_total_invariant_under_coarsening():
    grid = tm.generate(8, 0, 3, 1.0, 128)
    for factor in (2, 4, 16, 128):
        coarse = tm.coarsen(grid, factor)
        assert np.array_equal(total_increment(coarse), total_increment(grid))


def test_coarsen_rejects_non_divisor():
    grid = tm.generate(1, 0, 1, 1.0, 10)
    with pytest.raises(ValueError, match="does not divide"):
        tm.coarsen(grid, 3)


def test_block_sums_odd_factor_left_to_right():
    inc = np.arange(12.0).reshape(12, 1)
    got = block_sums(inc, 3)
    expected = np.array([[3.0], [12.0], [21.0], [30.0]])
    assert np.array_equal(got, expected)


def test_generate_batch_matches_single_paths():
    batch = generate_batch(55, range(4), 2, 1.0, 16)
    assert batch.shape == (4, 16, 2)
    for p in range(4):
        single = tm.generate(55, p, 2, 1.0, 16)
        assert np.array_equal(batch[p], single.increments)
