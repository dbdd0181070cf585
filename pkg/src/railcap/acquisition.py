"""Next-query selection for a known objective under GP-modelled constraints.

Two selectors work on candidates inside the current trust region:

* ``log_cei``: ``log f(x) + sum_r log Phi(-m_r(x) / s_r(x))``, maximized over a
  scrambled Sobol candidate set and polished by a short pattern search.
* constrained Thompson sampling: one joint posterior draw per constraint over
  the candidates; the best objective among sampled-feasible candidates, or
  the smallest sampled total violation if none is feasible.

Coordinates are on the unit cube; ``objective`` maps unit-cube points (rows)
to objective values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr
from scipy.stats import qmc

log = logging.getLogger(__name__)

STD_FLOOR = 1e-9
EPS_F = 1e-12
POLISH_BUDGET = 50


@dataclass(frozen=True)
class AcquisitionConfig:
    variant: str = "log_cei"  # or "constrained_ts"
    n_candidates: int | None = None
    polish: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("log_cei", "constrained_ts"):
            raise ValueError(f"unknown acquisition variant {self.variant!r}")
        if self.n_candidates is not None and self.n_candidates < 1:
            raise ValueError("need at least one candidate")

    def candidates_for(self, d: int) -> int:
        return self.n_candidates or min(100 * d, 5000)


def sobol_candidates(lower, upper, n: int, seed: int = 0) -> np.ndarray:
    """``n`` scrambled Sobol points mapped affinely into the box [lower, upper]."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if np.any(upper < lower):
        raise ValueError("empty region")
    sampler = qmc.Sobol(d=len(lower), scramble=True, seed=seed)
    m = int(np.ceil(np.log2(max(n, 1))))
    pts = sampler.random_base2(m)[:n]
    return np.clip(lower + pts * (upper - lower), lower, upper)


def _posterior_z(models, x):
    """Standardized feasibility margins -m/s per point (rows) and route (cols)."""
    x = np.atleast_2d(x)
    cols = []
    for mdl in models:
        post = mdl.posterior(x)
        s = np.maximum(np.sqrt(post.variance), STD_FLOOR)
        cols.append(-post.mean / s)
    return np.column_stack(cols) if cols else np.zeros((len(x), 0))


def feasibility_probability(models, x):
    """Probability that every constraint is satisfied, per point."""
    z = _posterior_z(models, x)
    p = np.prod(ndtr(z), axis=1)
    return float(p[0]) if np.ndim(x) == 1 else p


def log_feasibility(models, x):
    z = _posterior_z(models, x)
    return log_ndtr(z).sum(axis=1)


def log_cei(x, objective, models):
    """``log f(x) + sum_r log P(c_r(x) <= 0)`` per point (f clamped at EPS_F)."""
    x = np.atleast_2d(x)
    f = np.asarray(objective(x), dtype=float)
    if np.any(f <= 0):
        log.warning("objective non-positive at %d candidate(s); clamping", int((f <= 0).sum()))
    out = np.log(np.maximum(f, EPS_F)) + log_feasibility(models, x)
    return out


def cei(x, objective, models):
    """Plain product form ``f(x) * P(feasible)``."""
    x = np.atleast_2d(x)
    return np.asarray(objective(x), dtype=float) * feasibility_probability(models, x)


def _pattern_search(fun, x0, f0, lower, upper, budget: int, step: float):
    """Compass search maximizing ``fun`` inside the box; at most ``budget`` calls."""
    x, fx = x0.copy(), f0
    d = len(x)
    used = 0
    while used < budget and step > 1e-6:
        moved = False
        for i in range(d):
            for sign in (1.0, -1.0):
                if used >= budget:
                    break
                trial = x.copy()
                trial[i] = np.clip(trial[i] + sign * step, lower[i], upper[i])
                if trial[i] == x[i]:
                    continue
                ft = float(fun(trial[None, :])[0])
                used += 1
                if ft > fx:
                    x, fx, moved = trial, ft, True
                    break
        if not moved:
            step /= 2.0
    return x, fx


def optimize_log_cei(lower, upper, objective, models, config: AcquisitionConfig) -> np.ndarray:
    """Best Sobol candidate by log-CEI, optionally polished by pattern search."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    n = config.candidates_for(len(lower))
    cand = sobol_candidates(lower, upper, n, config.seed)
    vals = log_cei(cand, objective, models)
    i = int(np.argmax(vals))
    x = cand[i]
    if config.polish and n > 1:
        step = 0.1 * float(np.max(upper - lower)) if np.any(upper > lower) else 0.0
        if step > 0:
            x, _ = _pattern_search(
                lambda z: log_cei(z, objective, models), x, vals[i], lower, upper,
                POLISH_BUDGET, step,
            )
    return np.clip(x, lower, upper)


def _joint_sample(model, x, rng) -> tuple[np.ndarray, bool]:
    """One posterior draw over the rows of ``x``; falls back to marginals on failure."""
    mean, cov = model.joint_posterior(x)
    n = len(mean)
    z = rng.standard_normal(n)
    scale = max(float(np.max(np.diag(cov))), 1e-300)
    jitter = 1e-10 * scale
    while jitter <= 1e-4 * max(scale, 1.0):
        try:
            chol = np.linalg.cholesky(cov + jitter * np.eye(n))
            return mean + chol @ z, True
        except np.linalg.LinAlgError:
            jitter *= 10.0
    log.warning("joint posterior sampling failed; using independent marginals")
    return mean + np.sqrt(np.clip(np.diag(cov), 0.0, None)) * z, False


def thompson_pick(candidates, f_values, samples) -> int:
    """Index chosen from sampled constraint values (``samples``: routes x candidates)."""
    samples = np.atleast_2d(samples)
    feasible = np.all(samples <= 0, axis=0)
    if feasible.any():
        idx = np.flatnonzero(feasible)
        return int(idx[np.argmax(np.asarray(f_values)[idx])])
    violation = np.maximum(samples, 0.0).sum(axis=0)
    return int(np.argmin(violation))


def constrained_thompson_select(lower, upper, objective, models, config: AcquisitionConfig):
    """Constrained Thompson sampling over Sobol candidates in the box."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    n = config.candidates_for(len(lower))
    cand = sobol_candidates(lower, upper, n, config.seed)
    rng = np.random.default_rng(config.seed)
    samples = np.array([_joint_sample(m, cand, rng)[0] for m in models]).reshape(len(models), n)
    i = thompson_pick(cand, objective(cand), samples)
    return cand[i]


def select(lower, upper, objective, models, config: AcquisitionConfig) -> np.ndarray:
    if config.variant == "log_cei":
        return optimize_log_cei(lower, upper, objective, models, config)
    return constrained_thompson_select(lower, upper, objective, models, config)
