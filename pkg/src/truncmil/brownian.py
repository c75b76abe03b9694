"""Deterministic, refinable Brownian increment grids.

Each (master_seed, path_index) pair keys an independent Philox counter-based
stream, so ensemble members can be generated in any order, on any worker, and
regenerate bit-exactly.  Gaussians come from the inverse normal CDF applied to
64-bit uniforms: the sample count per coordinate is fixed, so streams never
desynchronise.  Coarse grids are exact block sums of the fine increments,
which is what lets strong-error experiments couple coarse and fine solutions
on the same underlying path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri


@dataclass(frozen=True)
class BrownianGrid:
    m: int
    t_final: float
    n_fine: int
    dt_fine: float
    increments: np.ndarray      # (n_fine, m), N(0, dt_fine) each
    master_seed: int
    path_index: int

    def __post_init__(self) -> None:
        if self.increments.shape != (self.n_fine, self.m):
            raise ValueError("increment array shape does not match (n_fine, m)")


def generate(master_seed: int, path_index: int, m: int, t_final: float, n_fine: int) -> BrownianGrid:
    """Fill an (n_fine, m) increment grid from the (seed, path) keyed stream."""
    if n_fine < 1:
        raise ValueError("n_fine must be >= 1")
    if not t_final > 0:
        raise ValueError("t_final must be positive")
    if path_index < 0:
        raise ValueError("path_index must be nonnegative")
    dt = t_final / n_fine
    rng = np.random.Generator(np.random.Philox(key=[master_seed & (2**64 - 1), path_index]))
    raw = rng.integers(0, 2**64, size=(n_fine, m), dtype=np.uint64)
    # map to the open interval (0, 1) with a fixed 53-bit mantissa
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    increments = ndtri(u) * np.sqrt(dt)
    increments.setflags(write=False)
    return BrownianGrid(m=m, t_final=t_final, n_fine=n_fine, dt_fine=dt,
                        increments=increments, master_seed=master_seed, path_index=path_index)


def block_sums(increments: np.ndarray, factor: int) -> np.ndarray:
    """Sum adjacent blocks of `factor` rows with a fixed reduction order.

    Power-of-two factors reduce by repeated pairwise halving, so coarsening by
    2 then 2 is bit-identical to coarsening by 4 directly; any odd residual
    factor is folded left to right.
    """
    n = increments.shape[0]
    if factor < 1 or n % factor:
        raise ValueError(f"factor {factor} does not divide {n} fine steps")
    out = increments.reshape(n // factor, factor, -1)
    f = factor
    while f % 2 == 0:
        out = out[:, 0::2, :] + out[:, 1::2, :]
        f //= 2
    acc = out[:, 0, :].copy()
    for i in range(1, f):
        acc += out[:, i, :]
    return acc


def coarsen(grid: BrownianGrid, factor: int) -> BrownianGrid:
    """Exact partial-sum coarsening by an integer factor dividing n_fine."""
    if factor == 1:
        return grid
    inc = block_sums(grid.increments, factor)
    inc.setflags(write=False)
    n = grid.n_fine // factor
    return BrownianGrid(m=grid.m, t_final=grid.t_final, n_fine=n, dt_fine=grid.t_final / n,
                        increments=inc, master_seed=grid.master_seed, path_index=grid.path_index)


def total_increment(grid: BrownianGrid) -> np.ndarray:
    """B(T) per driver, reduced in the same fixed order as coarsening."""
    return block_sums(grid.increments, grid.n_fine)[0]


def generate_batch(master_seed: int, path_indices, m: int, t_final: float, n_fine: int) -> np.ndarray:
    """Stack per-path increment grids into shape (n_paths, n_fine, m)."""
    return np.stack([generate(master_seed, int(p), m, t_final, n_fine).increments
                     for p in path_indices])
