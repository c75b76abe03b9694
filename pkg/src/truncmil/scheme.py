"""Steppers and path simulation: truncated Milstein plus three baselines.

The truncated variants evaluate every coefficient at the ball-projected state;
the classical variants are the same recursions with the projection replaced by
the identity.  Iterated Ito integrals are replaced by the product correction
(dB^{j1} dB^{j2} - delta_{j1 j2} * step)/2, which is exact for a single driver
and for commutative noise; Levy areas are not sampled.

Scalar models get a vectorised fast path that steps whole ensembles
elementwise; it performs the identical floating-point operations as the
per-path driver, so the two agree bit for bit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .brownian import BrownianGrid, coarsen
from .model import SdeModel, eval_l_op, scalar_l_op
from .truncation import project, project_scalar_batch


class SchemeId(str, enum.Enum):
    truncated_milstein = "truncated_milstein"
    truncated_em = "truncated_em"
    classical_milstein = "classical_milstein"
    classical_em = "classical_em"

    @property
    def truncates(self) -> bool:
        return self in (SchemeId.truncated_milstein, SchemeId.truncated_em)

    @property
    def has_milstein_term(self) -> bool:
        return self in (SchemeId.truncated_milstein, SchemeId.classical_milstein)


@dataclass(frozen=True)
class Trajectory:
    """Knot values of the piecewise-constant step process.

    On blow-up the path is cut at the last finite state instead of propagating
    NaNs; `blew_up` records that the remaining knots are absent.
    """

    times: np.ndarray           # (k+1,), t_i = i * delta
    states: np.ndarray          # (k+1, d)
    scheme: SchemeId
    delta: float
    blew_up: bool

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


def _scalar_step(scheme: SchemeId, model: SdeModel, cfg, delta: float,
                 y: np.ndarray, dB: np.ndarray) -> np.ndarray:
    """One step for scalar models; y and dB may be whole ensembles."""
    z = project_scalar_batch(cfg, delta, y) if scheme.truncates else y
    mu = np.asarray(model.drift(z), dtype=float)
    sig = np.asarray(model.diffusion_col(z, 1), dtype=float)
    incr = mu * delta + sig * dB
    if scheme.has_milstein_term:
        incr = incr + 0.5 * scalar_l_op(model, z) * (dB * dB - delta)
    return y + incr


def _general_step(scheme: SchemeId, model: SdeModel, cfg, delta: float,
                  y: np.ndarray, dB: np.ndarray) -> np.ndarray:
    z = project(cfg, delta, y) if scheme.truncates else y
    mu = np.broadcast_to(np.asarray(model.drift(z), dtype=float), (model.d,))
    incr = mu * delta
    for j in range(1, model.m + 1):
        col = np.broadcast_to(np.asarray(model.diffusion_col(z, j), dtype=float), (model.d,))
        incr = incr + col * dB[j - 1]
    if scheme.has_milstein_term:
        for j1 in range(1, model.m + 1):
            for j2 in range(1, model.m + 1):
                w = dB[j1 - 1] * dB[j2 - 1] - (delta if j1 == j2 else 0.0)
                incr = incr + 0.5 * eval_l_op(model, z, j1, j2) * w
    return y + incr


def step(scheme: SchemeId, model: SdeModel, cfg, delta: float, y, dB) -> np.ndarray:
    """Advance one step of the chosen scheme.

    Classical variants may return non-finite values for super-linear models;
    callers treat that as a blow-up signal, not an error.
    """
    scheme = SchemeId(scheme)
    if not 0 < delta <= 1:
        raise ValueError(f"step size must lie in (0, 1], got {delta}")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    dB = np.atleast_1d(np.asarray(dB, dtype=float))
    if dB.shape != (model.m,):
        raise ValueError(f"need {model.m} Brownian increments, got shape {dB.shape}")
    if model.is_scalar:
        return _scalar_step(scheme, model, cfg, delta, y, dB)
    return _general_step(scheme, model, cfg, delta, y, dB)


def step_truncated_milstein(model: SdeModel, cfg, delta: float, y, dB) -> np.ndarray:
    out = step(SchemeId.truncated_milstein, model, cfg, delta, y, dB)
    if not np.all(np.isfinite(out)):
        raise AssertionError(
            "truncated Milstein produced a non-finite state from finite input; "
            "this indicates a bug in the coefficients or configuration")
    return out


def simulate(scheme: SchemeId, model: SdeModel, cfg, grid: BrownianGrid,
             coarsen_factor: int = 1) -> Trajectory:
    """Iterate the stepper over a (possibly coarsened) grid, recording knots."""
    scheme = SchemeId(scheme)
    g = coarsen(grid, coarsen_factor)
    delta = g.t_final / g.n_fine
    if delta > 1:
        raise ValueError(f"coarsened step size {delta} exceeds 1")
    states = np.empty((g.n_fine + 1, model.d))
    states[0] = model.initial_value
    y = model.initial_value.copy()
    blew_up = False
    k_last = g.n_fine
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(g.n_fine):
            y = step(scheme, model, cfg, delta, y, g.increments[k])
            if not np.all(np.isfinite(y)):
                blew_up = True
                k_last = k
                break
            states[k + 1] = y
    states = states[: k_last + 1]
    times = np.arange(k_last + 1) * delta
    return Trajectory(times=times, states=states, scheme=scheme, delta=delta, blew_up=blew_up)


@dataclass(frozen=True)
class EnsembleResult:
    """Vectorised scalar-model ensemble: terminal states and blow-up bookkeeping."""

    finals: np.ndarray          # (n_paths,); NaN where blown up
    alive: np.ndarray           # (n_paths,) bool, False once a path went non-finite
    blowup_step: np.ndarray     # (n_paths,) int, -1 when the path stayed finite
    states: Optional[np.ndarray] = None   # (n_paths, n_steps+1) when recorded

    @property
    def blowup_fraction(self) -> float:
        return 1.0 - float(np.mean(self.alive))


def simulate_scalar_ensemble(scheme: SchemeId, model: SdeModel, cfg,
                             increments: np.ndarray, delta: float, x0: float,
                             record: bool = False) -> EnsembleResult:
    """Step all paths of a scalar model at once.

    `increments` has shape (n_paths, n_steps).  Performs the same elementwise
    operations as per-path `simulate`, so results match it bit-exactly.
    """
    scheme = SchemeId(scheme)
    if not model.is_scalar:
        raise ValueError("ensemble fast path requires a scalar model")
    n_paths, n_steps = increments.shape
    y = np.full(n_paths, float(x0))
    alive = np.ones(n_paths, dtype=bool)
    blowup_step = np.full(n_paths, -1, dtype=np.int64)
    states = np.empty((n_paths, n_steps + 1)) if record else None
    if record:
        states[:, 0] = y
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            yn = _scalar_step(scheme, model, cfg, delta, y, increments[:, k])
            bad = alive & ~np.isfinite(yn)
            blowup_step[bad] = k
            alive &= ~bad
            y = np.where(alive, yn, 0.0)
            if record:
                states[:, k + 1] = np.where(alive, yn, np.nan)
    finals = np.where(alive, y, np.nan)
    return EnsembleResult(finals=finals, alive=alive, blowup_step=blowup_step, states=states)


def trajectory_csv_rows(traj: Trajectory):
    """Yield (t, state components...) rows for CSV export."""
    for t, s in zip(traj.times, traj.states):
        yield (t, *s)
