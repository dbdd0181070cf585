"""Hyperbox trust region with success/failure streaks, and CPO re-centering.

All coordinates here are normalized to the unit cube (rates divided by their
upper bounds).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize

log = logging.getLogger(__name__)

L_INIT = 0.8
L_MIN = 0.5**7
L_MAX = 1.6
SUCCESS_TOL = 3
CHANCE_QUANTILE = 2.0
KKT_TOL = 1e-6


def default_failure_tolerance(d: int) -> int:
    return int(min(max(d, 1), 10))


@dataclass(frozen=True)
class TrustRegionState:
    center: np.ndarray
    length: float = L_INIT
    success_count: int = 0
    failure_count: int = 0
    length_init: float = L_INIT
    length_min: float = L_MIN
    length_max: float = L_MAX
    success_tolerance: int = SUCCESS_TOL
    failure_tolerance: int = 3
    restart: bool = False

    @classmethod
    def initial(cls, center, failure_tolerance: int | None = None, **kw) -> TrustRegionState:
        center = np.asarray(center, dtype=float)
        if failure_tolerance is None:
            failure_tolerance = default_failure_tolerance(len(center))
        return cls(center=center, failure_tolerance=failure_tolerance, **kw)

    def to_dict(self) -> dict:
        return {
            "center": [float(c) for c in self.center],
            "length": self.length,
            "success_count": self.success_count,
            "failure_count": self.failure_count,
            "restart": self.restart,
        }


def update(state: TrustRegionState, improved: bool) -> TrustRegionState:
    """Advance the streak counters and resize the box.

    A full success streak doubles the side length (capped at ``length_max``),
    a full failure streak halves it. Falling below ``length_min`` resets the
    length to ``length_init`` and sets ``restart``.
    """
    succ = state.success_count + 1 if improved else 0
    fail = 0 if improved else state.failure_count + 1
    length = state.length
    if succ >= state.success_tolerance:
        length, succ = min(2.0 * length, state.length_max), 0
    elif fail >= state.failure_tolerance:
        length, fail = length / 2.0, 0
    restart = length < state.length_min
    if restart:
        length, succ, fail = state.length_init, 0, 0
    return replace(state, length=length, success_count=succ, failure_count=fail, restart=restart)


def region_bounds(state: TrustRegionState) -> tuple[np.ndarray, np.ndarray]:
    """Lower/upper corners of the box around the center, clipped to the unit cube."""
    half = state.length / 2.0
    lo = np.clip(state.center - half, 0.0, 1.0)
    hi = np.clip(state.center + half, 0.0, 1.0)
    return lo, hi


@dataclass(frozen=True)
class Incumbent:
    index: int
    x: np.ndarray
    objective: float
    max_violation: float
    feasible: bool
    violation: float


def total_violation(c) -> float:
    c = np.asarray(c, dtype=float)
    if not np.all(np.isfinite(c)):
        return math.inf
    return float(np.maximum(c, 0.0).sum())


def incumbent_update(xs, objectives, constraints) -> Incumbent:
    """Best feasible point by objective, else the least total violation.

    Ties go to the earliest evaluation.
    """
    objectives = np.asarray(objectives, dtype=float)
    if len(objectives) == 0:
        raise ValueError("no evaluated points")
    cons = [np.asarray(c, dtype=float) for c in constraints]
    feas = np.array([bool(np.all(np.isfinite(c)) and np.all(c <= 0)) for c in cons])
    if feas.any():
        cand = np.flatnonzero(feas)
        i = int(cand[np.argmax(objectives[cand])])
    else:
        i = int(np.argmin([total_violation(c) for c in cons]))
    c = cons[i]
    return Incumbent(
        index=i, x=np.asarray(xs[i], dtype=float), objective=float(objectives[i]),
        max_violation=float(np.max(c)) if np.all(np.isfinite(c)) else math.inf,
        feasible=bool(feas[i]), violation=total_violation(c),
    )


def is_improvement(new_objective, new_c, incumbent: Incumbent | None) -> bool:
    """Whether an evaluation beats the incumbent (for streak counting).

    Once a feasible point exists only feasible points with a higher objective
    count; before that any strictly smaller total violation does.
    """
    if incumbent is None:
        return True
    new_c = np.asarray(new_c, dtype=float)
    feasible = bool(np.all(np.isfinite(new_c)) and np.all(new_c <= 0))
    if incumbent.feasible:
        return feasible and new_objective > incumbent.objective
    return feasible or total_violation(new_c) < incumbent.violation


@dataclass(frozen=True)
class CpoResult:
    x: np.ndarray
    objective: float
    converged: bool
    chance_values: np.ndarray


def chance_constraint(model, quantile: float = CHANCE_QUANTILE):
    """``x -> (m(x) + q s(x), gradient)`` for a surrogate exposing ``predict_with_grad``."""

    def fn(x):
        m, dm, s, ds = model.predict_with_grad(x)
        return m + quantile * s, dm + quantile * ds

    return fn


def recenter_cpo(
    models,
    objective,
    start,
    lower=None,
    upper=None,
    quantile: float = CHANCE_QUANTILE,
    n_perturb: int = 3,
    seed: int = 0,
    perturb_scale: float = 0.1,
) -> CpoResult:
    """Maximize a known objective subject to the surrogate chance constraints.

    ``objective(x)`` returns ``(value, gradient)`` on the unit cube; each model
    must provide ``predict_with_grad``. Constraints are ``m_r(x) + quantile *
    s_r(x) <= 0``. SLSQP is started from ``start`` and ``n_perturb`` random
    perturbations of it; the best start that ends feasible wins, lowest start
    index breaking ties. With no feasible end point the start point is
    returned with ``converged=False``.
    """
    start = np.asarray(start, dtype=float)
    d = len(start)
    lower = np.zeros(d) if lower is None else np.asarray(lower, dtype=float)
    upper = np.ones(d) if upper is None else np.asarray(upper, dtype=float)
    cons_fns = [chance_constraint(m, quantile) for m in models]

    def cons_vals(x):
        return np.array([f(x)[0] for f in cons_fns])

    constraints = [
        {"type": "ineq", "fun": (lambda x, f=f: -f(x)[0]), "jac": (lambda x, f=f: -f(x)[1])}
        for f in cons_fns
    ]
    rng = np.random.default_rng(seed)
    starts = [np.clip(start, lower, upper)]
    for _ in range(n_perturb):
        starts.append(np.clip(start + rng.normal(0.0, perturb_scale, d), lower, upper))

    best = None
    for x0 in starts:
        with np.errstate(all="ignore"):
            res = optimize.minimize(
                lambda x: tuple(-v for v in _as_pair(objective(x))),
                x0, jac=True, method="SLSQP", bounds=list(zip(lower, upper)),
                constraints=constraints, options={"maxiter": 200, "ftol": 1e-10},
            )
        x = np.clip(res.x, lower, upper)
        if not np.all(np.isfinite(x)):
            continue
        cv = cons_vals(x) if cons_fns else np.zeros(0)
        if np.any(cv > KKT_TOL):
            continue
        val = float(objective(x)[0])
        if best is None or val > best[1]:
            best = (x, val, cv)
    if best is None:
        log.warning("no CPO start reached a point satisfying the chance constraints")
        x = starts[0]
        return CpoResult(x, float(objective(x)[0]), False, cons_vals(x) if cons_fns else np.zeros(0))
    return CpoResult(best[0], best[1], True, best[2])


def _as_pair(out):
    val, grad = out
    return float(val), np.asarray(grad, dtype=float)
