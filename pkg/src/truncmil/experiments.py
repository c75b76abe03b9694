"""Experiment harness: strong-error rate fits on coupled paths, step-size
condition comparison, stability constants and decay ensembles.

Strong errors are measured against a fine-grid reference simulated on the
*same* Brownian path (the reference and every coarse run consume block sums of
one fine increment grid).  The fitted slope is reported on the L^{2q}-norm
scale, i.e. the slope of log(e_i^(1/2q)) against log(step), so an order-one
scheme reads as slope one regardless of the moment exponent.

Path-level work is chunked and merged in path-index order; per-path results
depend only on the (seed, path) stream, so output is identical for any worker
count or chunking.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import brownian
from .model import KFunction, SdeModel, resolve_model
from .scheme import SchemeId, simulate, simulate_scalar_ensemble
from .truncation import TruncationConfig, dominant_rate, old_condition_threshold

_CHUNK = 256


def _batch_block_sums(inc: np.ndarray, factor: int) -> np.ndarray:
    """Row-wise block sums of (n_paths, n_steps) with the brownian reduction order."""
    n_paths, n = inc.shape
    if n % factor:
        raise ValueError(f"factor {factor} does not divide {n} steps")
    out = inc.reshape(n_paths, n // factor, factor)
    f = factor
    while f % 2 == 0:
        out = out[:, :, 0::2] + out[:, :, 1::2]
        f //= 2
    acc = out[:, :, 0].copy()
    for i in range(1, f):
        acc += out[:, :, i]
    return acc


# ---------------------------------------------------------------------------
# strong-error rate experiment


@dataclass(frozen=True)
class RateExperimentSpec:
    model_name: str
    cfg: TruncationConfig
    scheme: SchemeId
    q: float
    t_final: float
    delta_ref: float
    test_deltas: tuple
    n_paths: int
    master_seed: int
    error_at: str = "terminal"        # or "sup" over shared grid times

    def __post_init__(self) -> None:
        object.__setattr__(self, "test_deltas", tuple(float(d) for d in self.test_deltas))
        object.__setattr__(self, "scheme", SchemeId(self.scheme))
        if self.n_paths < 1:
            raise ValueError("need at least one path")
        if self.error_at not in ("terminal", "sup"):
            raise ValueError("error_at must be 'terminal' or 'sup'")
        for d in self.test_deltas:
            if not 0 < d <= 1:
                raise ValueError(f"test step {d} outside (0, 1]")
            f = d / self.delta_ref
            if abs(f - round(f)) > 1e-9 or round(f) < 1:
                raise ValueError(f"test step {d} is not an integer multiple of delta_ref")

    @property
    def n_fine(self) -> int:
        n = self.t_final / self.delta_ref
        if abs(n - round(n)) > 1e-9:
            raise ValueError("t_final must be an integer multiple of delta_ref")
        return int(round(n))

    @property
    def factors(self) -> tuple:
        out = tuple(int(round(d / self.delta_ref)) for d in self.test_deltas)
        for f in out:
            if self.n_fine % f:
                raise ValueError(f"coarsening factor {f} does not divide {self.n_fine}")
        return out


@dataclass(frozen=True)
class RateFit:
    deltas: np.ndarray
    errors: np.ndarray            # moment estimates e_i = mean |diff|^{2q}
    standard_errors: np.ndarray   # Monte-Carlo SE of each e_i
    norm_errors: np.ndarray       # e_i ** (1 / 2q)
    slope: float                  # OLS slope of log2(norm_errors) vs log2(delta)
    slope_se: float
    q: float
    n_paths: int


def fit_rate(deltas: Sequence[float], errors: Sequence[float], q: float,
             standard_errors: Optional[Sequence[float]] = None,
             n_paths: int = 0) -> RateFit:
    """Unweighted log-log regression of the L^{2q}-norm errors on the steps."""
    deltas = np.asarray(deltas, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if len(deltas) < 3:
        raise ValueError("rate fit needs at least 3 step sizes")
    if np.any(errors <= 0):
        raise ValueError("errors must be positive for a log-log fit")
    norm_errors = errors ** (1.0 / (2.0 * q))
    x = np.log2(deltas)
    y = np.log2(norm_errors)
    xc = x - x.mean()
    slope = float(np.dot(xc, y) / np.dot(xc, xc))
    resid = y - (y.mean() + slope * xc)
    dof = len(x) - 2
    s2 = float(np.dot(resid, resid)) / dof if dof > 0 else 0.0
    slope_se = math.sqrt(s2 / float(np.dot(xc, xc)))
    if standard_errors is None:
        standard_errors = np.full_like(errors, np.nan)
    return RateFit(deltas=deltas, errors=errors,
                   standard_errors=np.asarray(standard_errors, dtype=float),
                   norm_errors=norm_errors, slope=slope, slope_se=slope_se,
                   q=q, n_paths=n_paths)


def _rate_chunk(spec: RateExperimentSpec, lo: int, hi: int) -> np.ndarray:
    """Per-path error samples |diff|^{2q}, shape (hi-lo, n_test_deltas)."""
    model = resolve_model(spec.model_name)
    n_fine = spec.n_fine
    factors = spec.factors
    x0 = float(model.initial_value[0]) if model.is_scalar else None
    if model.is_scalar:
        inc = brownian.generate_batch(spec.master_seed, range(lo, hi), 1,
                                      spec.t_final, n_fine)[:, :, 0]
        record = spec.error_at == "sup"
        ref = simulate_scalar_ensemble(spec.scheme, model, spec.cfg, inc,
                                       spec.delta_ref, x0, record=record)
        if not np.all(ref.alive):
            raise RuntimeError("reference path blew up; the truncated schemes should "
                               "never blow up, so this indicates a bug or a classical "
                               "scheme used as reference")
        out = np.empty((hi - lo, len(factors)))
        for i, f in enumerate(factors):
            cinc = _batch_block_sums(inc, f)
            run = simulate_scalar_ensemble(spec.scheme, model, spec.cfg, cinc,
                                           spec.delta_ref * f, x0, record=record)
            if spec.error_at == "terminal":
                diff = np.abs(ref.finals - run.finals)
            else:
                diff = np.max(np.abs(ref.states[:, ::f] - run.states), axis=1)
            out[:, i] = diff ** (2.0 * spec.q)
        return out
    # general-dimension fallback: per-path simulate
    out = np.empty((hi - lo, len(factors)))
    for row, pidx in enumerate(range(lo, hi)):
        grid = brownian.generate(spec.master_seed, pidx, model.m, spec.t_final, n_fine)
        ref = simulate(spec.scheme, model, spec.cfg, grid)
        if ref.blew_up:
            raise RuntimeError("reference path blew up")
        for i, f in enumerate(factors):
            run = simulate(spec.scheme, model, spec.cfg, grid, coarsen_factor=f)
            if spec.error_at == "terminal":
                diff = np.linalg.norm(ref.terminal - run.terminal)
            else:
                diff = np.max(np.linalg.norm(ref.states[::f] - run.states, axis=1))
            out[row, i] = diff ** (2.0 * spec.q)
    return out


def _path_error_samples(spec: RateExperimentSpec, n_paths: int, n_workers: int) -> np.ndarray:
    bounds = [(lo, min(lo + _CHUNK, n_paths)) for lo in range(0, n_paths, _CHUNK)]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            parts = list(pool.map(_rate_chunk, [spec] * len(bounds),
                                  [b[0] for b in bounds], [b[1] for b in bounds]))
    else:
        parts = [_rate_chunk(spec, lo, hi) for lo, hi in bounds]
    return np.vstack(parts)


def run_rate_experiment(spec: RateExperimentSpec, n_workers: int = 1,
                        target_rel_se: Optional[float] = None,
                        max_paths: Optional[int] = None) -> RateFit:
    """Couple every test step to the shared fine reference and fit the slope.

    With `target_rel_se` set, the ensemble doubles (deterministically, by
    extending the path-index range) until every Monte-Carlo SE falls below
    that fraction of its error estimate or `max_paths` is reached.
    """
    n = spec.n_paths
    samples = _path_error_samples(spec, n, n_workers)
    if target_rel_se is not None:
        cap = max_paths or 16 * spec.n_paths
        while n < cap:
            err = samples.mean(axis=0)
            se = samples.std(axis=0, ddof=1) / math.sqrt(len(samples))
            if np.all(se <= target_rel_se * err):
                break
            grow = min(n, cap - n)
            extra = _path_error_samples_range(spec, n, n + grow, n_workers)
            samples = np.vstack([samples, extra])
            n += grow
    errors = samples.mean(axis=0)
    ses = samples.std(axis=0, ddof=1) / math.sqrt(len(samples))
    return fit_rate(spec.test_deltas, errors, spec.q, standard_errors=ses, n_paths=n)


def _path_error_samples_range(spec: RateExperimentSpec, lo: int, hi: int,
                              n_workers: int) -> np.ndarray:
    bounds = [(a, min(a + _CHUNK, hi)) for a in range(lo, hi, _CHUNK)]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            parts = list(pool.map(_rate_chunk, [spec] * len(bounds),
                                  [b[0] for b in bounds], [b[1] for b in bounds]))
    else:
        parts = [_rate_chunk(spec, a, b) for a, b in bounds]
    return np.vstack(parts)


# ---------------------------------------------------------------------------
# step-size condition comparison


@dataclass(frozen=True)
class StepConditionComparison:
    old_threshold: float
    new_threshold: float
    dominant_rate: float


def compare_step_conditions(cfg: TruncationConfig, q: float, p: float, r: float) -> StepConditionComparison:
    """Legacy step-size ceiling next to the relaxed result (any step in (0,1])."""
    if not p > (1.0 + r) * q:
        raise ValueError(f"need p > (1+r)q, got p={p}, q={q}, r={r}")
    return StepConditionComparison(
        old_threshold=old_condition_threshold(cfg, q, p),
        new_threshold=1.0,
        dominant_rate=dominant_rate(cfg, q, p, r),
    )


# ---------------------------------------------------------------------------
# stability constants and decay ensembles


PAPER_STABILITY_H = 25.0
PAPER_STABILITY_DELTA1 = 0.04


@dataclass(frozen=True)
class StabilityReport:
    H: float
    delta_1: float
    radius_at_one: float              # omega^{-1}(h(1))
    argmax_norm: float                # |x| where the drift/k ratio peaks
    ratio_cap_ok: bool
    paper_H: Optional[float] = None
    paper_delta_1: Optional[float] = None
    paper_discrepancy: bool = False
    decay_flags: Optional[np.ndarray] = None
    decay_fraction: Optional[float] = None
    tol_stab: Optional[float] = None
    delta: Optional[float] = None
    horizon_steps: Optional[int] = None
    recorded_magnitudes: Optional[np.ndarray] = None   # (record_paths, horizon+1)


def _directions(d: int) -> np.ndarray:
    if d == 1:
        return np.array([[1.0], [-1.0]])
    from scipy.stats import qmc
    raw = qmc.Halton(d=d, scramble=False).random(2**10)
    vec = 2.0 * raw - 1.0
    vec = vec[np.linalg.norm(vec, axis=1) > 1e-12]
    return vec / np.linalg.norm(vec, axis=1, keepdims=True)


def _golden_max(f, lo: float, hi: float, tol: float = 1e-10) -> float:
    """Golden-section search for the maximiser of f on [lo, hi]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def compute_stability_constants(model: SdeModel, cfg, k_fn: KFunction,
                                n_grid: int = 100_000, ratio_cap: float = 1e12) -> StabilityReport:
    """Grid-plus-golden search for H = sup |mu(x)|^2 / k(|x|) on the radius-one
    ball of the method, and the step ceiling derived from it.

    For the stable_quintic builtin the report also carries the published
    reference constants and flags any disagreement instead of adopting them.
    """
    radius1 = cfg.radius(1.0)
    dirs = _directions(model.d)

    def ratio(u: float) -> float:
        best = 0.0
        for e in dirs:
            mu = np.atleast_1d(np.asarray(model.drift(u * e), dtype=float))
            best = max(best, float(np.dot(mu, mu)))
        return best / float(k_fn(u))

    grid = np.logspace(-6, math.log10(radius1), n_grid)
    grid[-1] = radius1
    vals = np.array([ratio(u) for u in grid])
    if not np.all(np.isfinite(vals)) or np.max(vals) > ratio_cap:
        raise ValueError("drift/k ratio exceeds cap; the small-state boundedness "
                         "condition appears violated")
    i = int(np.argmax(vals))
    if 0 < i < len(grid) - 1:
        u_star = _golden_max(ratio, grid[i - 1], grid[i + 1])
        H = max(ratio(u_star), float(vals[i]))
    else:
        u_star = float(grid[i])
        H = float(vals[i])
    delta_1 = min(1.0, 0.5 / H if H > 0 else 1.0, 0.25 * float(k_fn(radius1)) ** 2)

    paper_H = paper_d1 = None
    discrepancy = False
    if model.name == "stable_quintic":
        paper_H, paper_d1 = PAPER_STABILITY_H, PAPER_STABILITY_DELTA1
        discrepancy = (abs(H - paper_H) > 1e-2 * paper_H
                       or abs(delta_1 - paper_d1) > 1e-2 * paper_d1)
    return StabilityReport(H=H, delta_1=delta_1, radius_at_one=radius1,
                           argmax_norm=u_star, ratio_cap_ok=True,
                           paper_H=paper_H, paper_delta_1=paper_d1,
                           paper_discrepancy=discrepancy)


def _stability_chunk(model_name: str, cfg, delta: float, horizon_steps: int,
                     tol_stab: float, master_seed: int, lo: int, hi: int,
                     record_paths: int) -> tuple:
    model = resolve_model(model_name)
    t_final = delta * horizon_steps
    inc = brownian.generate_batch(master_seed, range(lo, hi), 1, t_final, horizon_steps)[:, :, 0]
    res = simulate_scalar_ensemble(SchemeId.truncated_milstein, model, cfg, inc,
                                   delta, float(model.initial_value[0]), record=True)
    tail = max(1, horizon_steps // 10)
    mags = np.abs(res.states)
    flags = np.all(mags[:, -tail:] < tol_stab, axis=1)
    n_rec = max(0, min(record_paths - lo, hi - lo))
    recorded = mags[:n_rec] if n_rec > 0 else None
    return flags, recorded


def run_stability_ensemble(model: SdeModel, cfg, delta: float, n_paths: int,
                           horizon_steps: int, tol_stab: float,
                           master_seed: int = 0, n_workers: int = 1,
                           record_paths: int = 10,
                           constants: Optional[StabilityReport] = None) -> StabilityReport:
    """Simulate truncated-Milstein paths and report the threshold-tail decay
    fraction, the finite-horizon surrogate for almost-sure convergence to 0.

    A path counts as decayed when |Y_k| stays below tol_stab over the last
    tenth of the horizon.
    """
    if not tol_stab > 0:
        raise ValueError("tol_stab must be positive")
    if not model.is_scalar:
        raise ValueError("stability ensembles are implemented for scalar models")
    if constants is not None and delta > constants.delta_1:
        warnings.warn(f"step size {delta} exceeds the computed stability ceiling "
                      f"{constants.delta_1:.6g}; decay is not guaranteed", stacklevel=2)
    bounds = [(lo, min(lo + _CHUNK, n_paths)) for lo in range(0, n_paths, _CHUNK)]
    args = [(model.name, cfg, delta, horizon_steps, tol_stab, master_seed, lo, hi, record_paths)
            for lo, hi in bounds]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            parts = list(pool.map(_stability_chunk, *zip(*args)))
    else:
        parts = [_stability_chunk(*a) for a in args]
    flags = np.concatenate([p[0] for p in parts])
    recorded = [p[1] for p in parts if p[1] is not None]
    recorded_m = np.vstack(recorded) if recorded else None
    base = constants if constants is not None else StabilityReport(
        H=math.nan, delta_1=math.nan, radius_at_one=cfg.radius(1.0),
        argmax_norm=math.nan, ratio_cap_ok=True)
    return replace(base, decay_flags=flags, decay_fraction=float(np.mean(flags)),
                   tol_stab=tol_stab, delta=delta, horizon_steps=horizon_steps,
                   recorded_magnitudes=recorded_m)


# ---------------------------------------------------------------------------
# interpolant-gap and moment probes


@dataclass(frozen=True)
class GapProbe:
    deltas: np.ndarray
    mean_square_gaps: np.ndarray
    h_scaled: np.ndarray          # gaps / h(delta)^2
    exponent: float               # slope of log(h_scaled) vs log(delta)


def interpolant_gap_probe(model: SdeModel, cfg, deltas: Sequence[float],
                          n_paths: int, t_final: float = 1.0,
                          master_seed: int = 0) -> GapProbe:
    """Half-step gap statistic E|Y(t_k + delta/2) - Y_k|^2 over a step ladder.

    Each half step reuses the first half of the refined noise for its knot, so
    the statistic measures the within-step fluctuation of the interpolant.
    """
    if not model.is_scalar:
        raise ValueError("gap probe is implemented for scalar models")
    deltas = np.asarray(sorted(deltas, reverse=True), dtype=float)
    gaps = np.empty(len(deltas))
    x0 = float(model.initial_value[0])
    for idx, delta in enumerate(deltas):
        n = t_final / delta
        if abs(n - round(n)) > 1e-9:
            raise ValueError(f"t_final must be a multiple of delta={delta}")
        n = int(round(n))
        inc = brownian.generate_batch(master_seed, range(n_paths), 1, t_final, 2 * n)[:, :, 0]
        coarse = _batch_block_sums(inc, 2)
        res = simulate_scalar_ensemble(SchemeId.truncated_milstein, model, cfg,
                                       coarse, delta, x0, record=True)
        knots = res.states[:, :n]
        half = inc[:, 0::2]
        from .scheme import _scalar_step
        stepped = _scalar_step(SchemeId.truncated_milstein, model, cfg, delta / 2.0, knots, half)
        gaps[idx] = float(np.mean((stepped - knots) ** 2))
    h2 = np.array([cfg.h(d) ** 2 for d in deltas])
    scaled = gaps / h2
    x = np.log2(deltas)
    y = np.log2(scaled)
    xc = x - x.mean()
    exponent = float(np.dot(xc, y) / np.dot(xc, xc))
    return GapProbe(deltas=deltas, mean_square_gaps=gaps, h_scaled=scaled, exponent=exponent)


def terminal_moment_probe(model: SdeModel, cfg, deltas: Sequence[float],
                          n_paths: int, t_final: float = 1.0, power: float = 4.0,
                          master_seed: int = 0,
                          scheme: SchemeId = SchemeId.truncated_milstein) -> np.ndarray:
    """Monte-Carlo E|Y_N|^power at each step size (moment-boundedness probe)."""
    out = np.empty(len(deltas))
    x0 = float(model.initial_value[0])
    for i, delta in enumerate(deltas):
        n = int(round(t_final / delta))
        if abs(n * delta - t_final) > 1e-9:
            raise ValueError(f"t_final must be a multiple of delta={delta}")
        inc = brownian.generate_batch(master_seed, range(n_paths), 1, t_final, n)[:, :, 0]
        res = simulate_scalar_ensemble(scheme, model, cfg, inc, delta, x0)
        if not np.all(res.alive):
            raise RuntimeError("blow-up during moment probe")
        out[i] = float(np.mean(np.abs(res.finals) ** power))
    return out
