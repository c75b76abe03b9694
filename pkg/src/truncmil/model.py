"""SDE problem definitions and sampled falsifiers for the standing growth conditions.

A model bundles the drift, the diffusion columns and (optionally) the
first-order diffusion operator ``L^{j1} sigma_{j2}`` together with the state
dimension, driver count and initial value.  Conditions that quantify over all
of R^d (polynomial Lipschitz continuity, Khasminskii-type monotonicity,
dissipativity) are checked by probing quasi-random points inside a ball: a
nonpositive worst margin means "no violation found", never a proof.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np
from scipy.stats import qmc


class EvaluationError(RuntimeError):
    """A coefficient function returned a non-finite value."""

    def __init__(self, message: str, x) -> None:
        super().__init__(f"{message} at x={np.asarray(x)!r}")
        self.x = np.asarray(x, dtype=float)


@dataclass(frozen=True)
class KFunction:
    """Comparison function k(u) = c * u**gamma for the dissipativity checks.

    Restricted to the power family with c > 0 and gamma >= 1, which keeps the
    arithmetic of the stability constants exact for every builtin problem.
    """

    c: float
    gamma: float

    def __post_init__(self) -> None:
        if not self.c > 0:
            raise ValueError(f"k-function coefficient must be positive, got {self.c}")
        if not self.gamma >= 1:
            raise ValueError(f"k-function power must be >= 1, got {self.gamma}")

    def __call__(self, u):
        return self.c * np.asarray(u, dtype=float) ** self.gamma


@dataclass(frozen=True)
class SdeModel:
    """A d-dimensional SDE dx = drift(x) dt + sum_j diffusion_col(x, j) dB^j.

    ``diffusion_col(x, j)`` returns the j-th column of the diffusion matrix,
    with j running 1..m.  ``l_op(x, j1, j2)``, when supplied, evaluates
    sum_l sigma_{l,j1}(x) * d sigma_{j2}(x) / dx^l; otherwise a central
    finite-difference fallback is used.  Coefficient callables must be pure:
    deterministic, side-effect free, and safe to share across workers.  For
    scalar models (d == m == 1) they must also accept arbitrary-shape arrays
    elementwise, which the ensemble drivers rely on.
    """

    d: int
    m: int
    drift: Callable
    diffusion_col: Callable
    initial_value: np.ndarray
    polynomial_degree_r: float
    l_op: Optional[Callable] = None
    name: str = "custom"

    def __post_init__(self) -> None:
        if self.d < 1 or self.m < 1:
            raise ValueError("state dimension and driver count must be positive")
        if self.polynomial_degree_r < 0:
            raise ValueError("growth exponent r must be nonnegative")
        x0 = np.atleast_1d(np.asarray(self.initial_value, dtype=float))
        if x0.shape != (self.d,):
            raise ValueError(f"initial value must have shape ({self.d},), got {x0.shape}")
        object.__setattr__(self, "initial_value", x0)

    @property
    def is_scalar(self) -> bool:
        return self.d == 1 and self.m == 1


def _finite(v, what: str, x) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise EvaluationError(f"non-finite {what}", x)
    return v


def sigma_matrix(model: SdeModel, x) -> np.ndarray:
    """Assemble the d x m diffusion matrix from its columns."""
    x = np.asarray(x, dtype=float)
    cols = [np.broadcast_to(np.asarray(model.diffusion_col(x, j), dtype=float), (model.d,))
            for j in range(1, model.m + 1)]
    return _finite(np.column_stack(cols), "diffusion", x)


def _fd_step(x: np.ndarray) -> float:
    return max(1e-6, 1e-6 * float(np.linalg.norm(x)))


def finite_difference_l_op(model: SdeModel, x, j1: int, j2: int) -> np.ndarray:
    """Central-difference evaluation of sum_l sigma_{l,j1} d sigma_{j2}/dx^l."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    delta = _fd_step(x)
    sig_j1 = _finite(model.diffusion_col(x, j1), "diffusion", x)
    sig_j1 = np.broadcast_to(sig_j1, (model.d,))
    out = np.zeros(model.d)
    for l in range(model.d):
        e = np.zeros(model.d)
        e[l] = delta
        hi = _finite(model.diffusion_col(x + e, j2), "diffusion", x + e)
        lo = _finite(model.diffusion_col(x - e, j2), "diffusion", x - e)
        out += sig_j1[l] * (np.broadcast_to(hi, (model.d,)) - np.broadcast_to(lo, (model.d,))) / (2.0 * delta)
    return out


def eval_l_op(model: SdeModel, x, j1: int, j2: int) -> np.ndarray:
    """Evaluate L^{j1} sigma_{j2}(x), preferring the analytic callable."""
    if not (1 <= j1 <= model.m and 1 <= j2 <= model.m):
        raise ValueError(f"driver indices must lie in 1..{model.m}, got ({j1}, {j2})")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if model.l_op is not None:
        return _finite(np.broadcast_to(np.asarray(model.l_op(x, j1, j2), dtype=float), (model.d,)),
                       "L-operator", x)
    return _finite(finite_difference_l_op(model, x, j1, j2), "L-operator", x)


def scalar_l_op(model: SdeModel, z: np.ndarray) -> np.ndarray:
    """Elementwise L^1 sigma_1 for scalar models; z may have any shape."""
    if model.l_op is not None:
        return np.asarray(model.l_op(z, 1, 1), dtype=float)
    delta = np.maximum(1e-6, 1e-6 * np.abs(z))
    sig = np.asarray(model.diffusion_col(z, 1), dtype=float)
    hi = np.asarray(model.diffusion_col(z + delta, 1), dtype=float)
    lo = np.asarray(model.diffusion_col(z - delta, 1), dtype=float)
    return sig * (hi - lo) / (2.0 * delta)


# ---------------------------------------------------------------------------
# assumption falsifiers


class Assumption(str, enum.Enum):
    A2_1_polyLipschitz = "A2_1_polyLipschitz"
    A2_2_khasminskii = "A2_2_khasminskii"
    A2_3_derivGrowth = "A2_3_derivGrowth"
    A4_1_dissipative = "A4_1_dissipative"
    Eq4_2_milsteinDissipative = "Eq4_2_milsteinDissipative"
    Eq4_3_ratioBounded = "Eq4_3_ratioBounded"


@dataclass(frozen=True)
class ProbeSpec:
    """How to sample the falsifier: probe count, ball radius and constants.

    ``constants`` carries the named constants of the inequality being checked
    (K1, K2, r, lambda3, delta, cap, ...); ``k_fn`` the comparison function for
    the dissipativity checks.
    """

    n_points: int = 1000
    radius: float = 2.0
    p_bar: float = 2.0
    constants: Mapping[str, float] = field(default_factory=dict)
    k_fn: Optional[KFunction] = None

    def __post_init__(self) -> None:
        if self.n_points < 1:
            raise ValueError("need at least one probe point")
        if not self.radius > 0:
            raise ValueError("probe radius must be positive")


@dataclass(frozen=True)
class AssumptionReport:
    assumption_id: Assumption
    sampled_points: int
    worst_margin: float
    constants_used: dict

    @property
    def violated(self) -> bool:
        return self.worst_margin > 0


def _halton_ball(dim: int, n: int, radius: float) -> np.ndarray:
    """n quasi-random points inside the ball of given radius (Halton, unscrambled)."""
    sampler = qmc.Halton(d=dim, scramble=False)
    pts = np.empty((0, dim))
    while len(pts) < n:
        cand = radius * (2.0 * sampler.random(4 * n) - 1.0)
        keep = cand[np.linalg.norm(cand, axis=1) <= radius]
        pts = np.vstack([pts, keep])
    return pts[:n]


def _component_derivs(fn: Callable, x: np.ndarray, d: int) -> tuple:
    """Finite-difference gradient norm and Hessian norm of a scalar function."""
    delta = _fd_step(x)
    grad = np.zeros(d)
    hess = np.zeros((d, d))
    f0 = fn(x)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = delta
        grad[i] = (fn(x + ei) - fn(x - ei)) / (2.0 * delta)
        hess[i, i] = (fn(x + ei) - 2.0 * f0 + fn(x - ei)) / delta**2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = delta
            v = (fn(x + ei + ej) - fn(x + ei - ej) - fn(x - ei + ej) + fn(x - ei - ej)) / (4.0 * delta**2)
            hess[i, j] = hess[j, i] = v
    return float(np.linalg.norm(grad)), float(np.linalg.norm(hess))


def _l_op_double_sum(model: SdeModel, x: np.ndarray) -> np.ndarray:
    out = np.zeros(model.d)
    for j1 in range(1, model.m + 1):
        for j2 in range(1, model.m + 1):
            out += eval_l_op(model, x, j1, j2)
    return out


def check_assumption(model: SdeModel, assumption: Assumption, spec: ProbeSpec) -> AssumptionReport:
    """Probe one standing inequality and report the most-violating margin.

    A margin is (LHS - RHS) of the inequality, so worst_margin <= 0 means no
    violation was found among the sampled points.
    """
    assumption = Assumption(assumption)
    c = dict(spec.constants)
    r = float(c.get("r", model.polynomial_degree_r))
    margins = []

    if assumption in (Assumption.A2_1_polyLipschitz, Assumption.A2_2_khasminskii):
        pairs = _halton_ball(2 * model.d, spec.n_points, 1.0)
        xs = spec.radius * pairs[:, : model.d]
        ys = spec.radius * pairs[:, model.d:]
        for x, y in zip(xs, ys):
            dmu = np.linalg.norm(_finite(model.drift(x), "drift", x) - _finite(model.drift(y), "drift", y))
            dsig = np.linalg.norm(sigma_matrix(model, x) - sigma_matrix(model, y))
            if assumption is Assumption.A2_1_polyLipschitz:
                K1 = float(c.get("K1", 100.0))
                dl = max(
                    float(np.linalg.norm(eval_l_op(model, x, j1, j2) - eval_l_op(model, y, j1, j2)))
                    for j1 in range(1, model.m + 1) for j2 in range(1, model.m + 1)
                )
                lhs = max(dmu, dsig, dl)
                rhs = K1 * (1.0 + np.linalg.norm(x) ** r + np.linalg.norm(y) ** r) * np.linalg.norm(x - y)
                margins.append(lhs - rhs)
                used = {"K1": K1, "r": r}
            else:
                K2 = float(c.get("K2", 0.0))
                inner = float(np.dot(x - y, np.atleast_1d(model.drift(x)) - np.atleast_1d(model.drift(y))))
                lhs = inner + (2.0 * spec.p_bar - 1.0) * dsig**2
                margins.append(lhs - K2 * float(np.dot(x - y, x - y)))
                used = {"K2": K2, "p_bar": spec.p_bar}

    elif assumption is Assumption.A2_3_derivGrowth:
        lam3 = float(c.get("lambda3", 100.0))
        xs = _halton_ball(model.d, spec.n_points, spec.radius)
        for x in xs:
            worst = 0.0
            for l in range(model.d):
                g, h = _component_derivs(lambda v, l=l: float(np.atleast_1d(model.drift(v))[l]), x, model.d)
                worst = max(worst, g, h)
            for j in range(1, model.m + 1):
                for l in range(model.d):
                    g, h = _component_derivs(
                        lambda v, j=j, l=l: float(np.broadcast_to(
                            np.asarray(model.diffusion_col(v, j), dtype=float), (model.d,))[l]),
                        x, model.d)
                    worst = max(worst, g, h)
            margins.append(worst - lam3 * (1.0 + np.linalg.norm(x) ** (r + 1.0)))
        used = {"lambda3": lam3, "r": r}

    elif assumption in (Assumption.A4_1_dissipative, Assumption.Eq4_2_milsteinDissipative):
        if spec.k_fn is None:
            raise ValueError(f"{assumption.value} needs a k-function in the probe spec")
        xs = _halton_ball(model.d, spec.n_points, spec.radius)
        delta = float(c.get("delta", 0.0))
        if assumption is Assumption.Eq4_2_milsteinDissipative and "delta" not in c:
            raise ValueError("Eq4_2 check needs constants['delta']")
        for x in xs:
            mu = _finite(np.atleast_1d(model.drift(x)), "drift", x)
            lhs = 2.0 * float(np.dot(x, mu)) + float(np.sum(sigma_matrix(model, x) ** 2))
            if assumption is Assumption.Eq4_2_milsteinDissipative:
                lhs += 0.5 * float(np.dot(_l_op_double_sum(model, x), _l_op_double_sum(model, x))) * delta
            margins.append(lhs + float(spec.k_fn(np.linalg.norm(x))))
        used = {"k_c": spec.k_fn.c, "k_gamma": spec.k_fn.gamma}
        if assumption is Assumption.Eq4_2_milsteinDissipative:
            used["delta"] = delta

    elif assumption is Assumption.Eq4_3_ratioBounded:
        if spec.k_fn is None:
            raise ValueError("Eq4_3 check needs a k-function in the probe spec")
        cap = float(c.get("cap", 1e12))
        radii = np.logspace(-9, 0, spec.n_points) * spec.radius
        dirs = _halton_ball(model.d, max(8, 2 * model.d), 1.0)
        dirs = dirs[np.linalg.norm(dirs, axis=1) > 0]
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        for u in radii:
            for e in dirs:
                x = u * e
                mu = _finite(np.atleast_1d(model.drift(x)), "drift", x)
                margins.append(float(np.dot(mu, mu)) / float(spec.k_fn(u)) - cap)
        used = {"cap": cap, "k_c": spec.k_fn.c, "k_gamma": spec.k_fn.gamma}

    else:  # pragma: no cover
        raise ValueError(f"unknown assumption {assumption}")

    return AssumptionReport(
        assumption_id=assumption,
        sampled_points=len(margins),
        worst_margin=float(np.max(margins)),
        constants_used=used,
    )


# ---------------------------------------------------------------------------
# builtin example problems (all scalar, sigma(x) = x^2, x0 = 1, r = 4)


def _sigma_sq(x, j):
    return x * x


def _l_sigma_sq(x, j1, j2):
    # sigma sigma' = x^2 * 2x
    return 2.0 * x * x * x


def _drift_cubic_quintic(x):
    return x**3 - 4.0 * x**5


def _drift_strongly_damped(x):
    return -83.0 * x**3


def _drift_stable_quintic(x):
    return -x - 6.0 * x**3 - 4.0 * x**5


_BUILTIN_DRIFTS = {
    "cubic_quintic": _drift_cubic_quintic,
    "strongly_damped_cubic": _drift_strongly_damped,
    "stable_quintic": _drift_stable_quintic,
}


def builtin_model(name: str) -> SdeModel:
    """One of the three named scalar example problems."""
    if name not in _BUILTIN_DRIFTS:
        raise ValueError(f"unknown builtin model {name!r}; choose from {sorted(_BUILTIN_DRIFTS)}")
    return SdeModel(
        d=1,
        m=1,
        drift=_BUILTIN_DRIFTS[name],
        diffusion_col=_sigma_sq,
        l_op=_l_sigma_sq,
        initial_value=np.array([1.0]),
        polynomial_degree_r=4.0,
        name=name,
    )


BUILTIN_MODEL_NAMES = tuple(sorted(_BUILTIN_DRIFTS))


def _drift_linear(x):
    return -x


def _sigma_linear(x, j):
    return 0.1 * x


def _l_sigma_linear(x, j1, j2):
    return 0.01 * x


def lipschitz_control_model() -> SdeModel:
    """Globally Lipschitz scalar control problem mu = -x, sigma = 0.1 x.

    Well-understood dynamics used to sanity-check the harness: the classical
    Milstein scheme has clean strong order one here.
    """
    return SdeModel(d=1, m=1, drift=_drift_linear, diffusion_col=_sigma_linear,
                    l_op=_l_sigma_linear, initial_value=np.array([1.0]),
                    polynomial_degree_r=0.0, name="lipschitz_control")


_MODEL_REGISTRY = {}


def register_model(model: SdeModel) -> None:
    """Make a model addressable by name from the experiment harness.

    Coefficient callables must be module-level functions (picklable) if the
    model is to be used with a multi-process worker pool.
    """
    _MODEL_REGISTRY[model.name] = model


def resolve_model(name: str) -> SdeModel:
    if name in _BUILTIN_DRIFTS:
        return builtin_model(name)
    if name == "lipschitz_control":
        return lipschitz_control_model()
    if name in _MODEL_REGISTRY:
        return _MODEL_REGISTRY[name]
    raise ValueError(f"unknown model {name!r}")
