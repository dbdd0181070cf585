"""Penalized traffic rate assignment: objective, BO loop, static baseline, sweeps."""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from railcap import acquisition, ctmc, gp, model, trustregion

log = logging.getLogger(__name__)

VARIANTS = tuple(
    f"{a}-{m}-{t}" for a in ("EI", "TS") for m in ("C", "Exp") for t in ("TR", "CPO")
)


@dataclass(frozen=True)
class ObjectiveSpec:
    grouping: str
    target: np.ndarray
    weight: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.target, dtype=float)
        object.__setattr__(self, "target", t)
        if self.grouping not in ("by_type", "by_route"):
            raise ValueError(f"unknown grouping {self.grouping!r}")
        if np.any(t < 0) or abs(t.sum() - 1.0) > 1e-9:
            raise ValueError("target distribution must be non-negative and sum to 1")
        if self.weight < 0:
            raise ValueError("weight must be non-negative")


def objective_eval(junction: model.Junction, lam, spec: ObjectiveSpec):
    """Total rate minus the weighted squared distance to the target distribution.

    Returns ``(value, gradient)``.
    """
    lam = np.asarray(lam, dtype=float)
    total = lam.sum()
    p = model.group_distribution(junction, lam, spec.grouping)
    idx, _ = model.group_index(junction, spec.grouping)
    diff = p - spec.target
    value = total - spec.weight * float(diff @ diff)
    # d p_g / d lam_o = (1[o in g] - p_g) / total
    dpen = 2.0 * (diff[idx] - diff @ p) / total
    return float(value), 1.0 - spec.weight * dpen


def objective_values(junction: model.Junction, lams, spec: ObjectiveSpec) -> np.ndarray:
    """Objective for every row of ``lams``; NaN-free, degenerate rows give 0."""
    lams = np.atleast_2d(np.asarray(lams, dtype=float))
    idx, n_groups = model.group_index(junction, spec.grouping)
    onehot = np.zeros((junction.d, n_groups))
    onehot[np.arange(junction.d), idx] = 1.0
    total = lams.sum(axis=1)
    safe = np.where(total >= model.EPS_TOTAL, total, 1.0)
    p = (lams @ onehot) / safe[:, None]
    pen = ((p - spec.target) ** 2).sum(axis=1)
    return np.where(total >= model.EPS_TOTAL, total - spec.weight * pen, 0.0)


def request_direction(junction: model.Junction, spec: ObjectiveSpec) -> np.ndarray:
    """Per-request traffic shares realizing the target distribution exactly.

    Each group's share is split evenly over the requests in that group.
    """
    idx, n_groups = model.group_index(junction, spec.grouping)
    counts = np.bincount(idx, minlength=n_groups)
    if np.any((counts == 0) & (spec.target > 0)):
        raise ValueError("target puts weight on a group without requests")
    return spec.target[idx] / counts[idx]


def distance(junction: model.Junction, lam, spec: ObjectiveSpec) -> float:
    """Euclidean distance between realized and target distribution."""
    p = model.group_distribution(junction, lam, spec.grouping)
    return float(np.linalg.norm(p - spec.target))


@dataclass(frozen=True)
class BoConfig:
    acquisition: str = "log_cei"
    tr_mode: str = "TR"
    mean: str = "exponential"
    n_init: int = 10
    max_iterations: int = 200
    time_limit: float | None = None
    B: int = 3
    v_a: float = 0.8
    v_s: float = 0.3
    seed: int = 0
    restarts: int = 5
    n_candidates: int | None = None
    state_cap: int = ctmc.DEFAULT_STATE_CAP

    def __post_init__(self):
        if self.n_init < 2:
            raise ValueError("n_init must be >= 2")
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if self.acquisition not in ("log_cei", "constrained_ts"):
            raise ValueError(f"unknown acquisition {self.acquisition!r}")
        if self.tr_mode not in ("TR", "CPO"):
            raise ValueError(f"unknown trust region mode {self.tr_mode!r}")
        if self.mean not in ("constant", "exponential"):
            raise ValueError(f"unknown mean {self.mean!r}")

    @property
    def variant(self) -> str:
        a = "EI" if self.acquisition == "log_cei" else "TS"
        m = "C" if self.mean == "constant" else "Exp"
        return f"{a}-{m}-{self.tr_mode}"

    @classmethod
    def from_variant(cls, name: str, **kw) -> BoConfig:
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
        a, m, t = name.split("-")
        return cls(
            acquisition="log_cei" if a == "EI" else "constrained_ts",
            mean="constant" if m == "C" else "exponential",
            tr_mode=t, **kw,
        )


@dataclass
class RunHistory:
    """Append-only record of one optimization run."""

    variant: str
    seed: int
    weight: float
    records: list = field(default_factory=list)
    incumbent: trustregion.Incumbent | None = None
    status: str = "ok"

    def append(self, rec: dict) -> None:
        if rec["iteration"] != len(self.records):
            raise ValueError("iteration indices must be contiguous")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    @property
    def lams(self) -> np.ndarray:
        return np.array([r["lam"] for r in self.records])

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r["objective"] for r in self.records], dtype=float)

    @property
    def constraints(self) -> np.ndarray:
        return np.array([r["c"] for r in self.records], dtype=float)


class _Problem:
    """Junction, bounds and objective bundled in unit-cube coordinates."""

    def __init__(self, junction, ub, spec, config):
        self.junction = junction
        self.ub = np.asarray(ub, dtype=float)
        self.spec = spec
        self.config = config

    def to_rates(self, x):
        return np.asarray(x, dtype=float) * self.ub

    def f_rows(self, xs):
        return objective_values(self.junction, self.to_rates(np.atleast_2d(xs)), self.spec)

    def f_with_grad(self, x):
        val, grad = objective_eval(self.junction, self.to_rates(x), self.spec)
        return val, grad * self.ub

    def evaluate(self, x):
        lam = self.to_rates(x)
        if lam.sum() < model.EPS_TOTAL:
            return lam, 0.0, np.full(self.junction.k, math.inf), None
        f = objective_eval(self.junction, lam, self.spec)[0]
        try:
            rep = ctmc.evaluate_constraints(
                self.junction, lam, self.config.B, self.config.v_a, self.config.v_s,
                cap=self.config.state_cap,
            )
        except ctmc.CtmcError as exc:
            if isinstance(exc, ctmc.StateSpaceTooLarge):
                raise
            log.warning("constraint evaluation failed at %s: %s", lam, exc)
            return lam, f, np.full(self.junction.k, math.inf), None
        return lam, f, rep.c, rep


def _clean(values):
    return [float(v) if np.isfinite(v) else None for v in np.asarray(values, dtype=float)]


def _fit_models(xs, cs, config: BoConfig, iteration: int):
    models = []
    for r in range(cs.shape[1]):
        ok = np.isfinite(cs[:, r])
        start = gp.default_model(xs[ok], cs[ok, r], config.mean)
        models.append(
            gp.fit_hyperparameters(start, restarts=config.restarts, seed=config.seed + 7919 * iteration + r)
        )
    return models


def run_bo(
    junction: model.Junction,
    ub,
    spec: ObjectiveSpec,
    config: BoConfig,
    callback=None,
) -> RunHistory:
    """Constrained BO with a known objective on the junction's rate vector."""
    ub = np.asarray(ub, dtype=float)
    if ub.shape != (junction.d,) or np.any(ub <= 0):
        raise ValueError("upper bounds must be positive, one per request")
    prob = _Problem(junction, ub, spec, config)
    hist = RunHistory(variant=config.variant, seed=config.seed, weight=spec.weight)
    t0 = time.monotonic()
    d = junction.d
    xs, cs, fs = [], [], []
    state = None
    inc = None

    def record(x, phase, region=None, models=None, center=None):
        nonlocal inc, state
        lam, f, c, rep = prob.evaluate(x)
        improved = trustregion.is_improvement(f, c, inc)
        xs.append(np.asarray(x, dtype=float))
        cs.append(np.asarray(c, dtype=float))
        fs.append(f)
        inc = trustregion.incumbent_update(xs, fs, cs)
        if phase == "bo":
            state = trustregion.update(state, improved)
            if state.restart:
                log.info("trust region collapsed; restarting at the incumbent")
        rec = {
            "iteration": len(hist),
            "phase": phase,
            "lam": _clean(lam),
            "c": _clean(c),
            "objective": float(f),
            "feasible": bool(np.all(np.isfinite(c)) and np.all(c <= 0)),
            "max_violation": float(np.max(c)) if np.all(np.isfinite(c)) else None,
            "improved": bool(improved),
            "incumbent": inc.index,
            "incumbent_objective": inc.objective,
            "incumbent_feasible": inc.feasible,
            "elapsed": time.monotonic() - t0,
        }
        if rep is not None:
            rec["l_gi"] = _clean(rep.l_gi)
        if state is not None:
            rec["trust_region"] = state.to_dict()
        if region is not None:
            rec["region"] = {"lower": _clean(region[0]), "upper": _clean(region[1])}
        if center is not None:
            rec["center"] = _clean(center)
        if models is not None:
            rec["gp"] = [m.to_dict() for m in models]
        hist.append(rec)
        if callback is not None:
            callback(rec)

    def out_of_time():
        return config.time_limit is not None and time.monotonic() - t0 >= config.time_limit

    init = acquisition.sobol_candidates(np.zeros(d), np.ones(d), config.n_init, config.seed)
    for x in init:
        if len(hist) >= config.max_iterations or (len(hist) and out_of_time()):
            break
        record(x, "init")

    if len(hist):
        state = trustregion.TrustRegionState.initial(inc.x)
    cpo_center = None
    while len(hist) < config.max_iterations and not out_of_time():
        it = len(hist)
        models = _fit_models(np.array(xs), np.array(cs), config, it)
        center = inc.x
        if state.restart or config.tr_mode == "TR":
            cpo_center = None
        if config.tr_mode == "CPO":
            start = inc.x if cpo_center is None else cpo_center
            res = trustregion.recenter_cpo(
                models, prob.f_with_grad, start, seed=config.seed + it,
            )
            if res.converged:
                cpo_center = res.x
            center = cpo_center if cpo_center is not None else inc.x
        state = replace(state, center=np.asarray(center, dtype=float), restart=False)
        region = trustregion.region_bounds(state)
        acq = acquisition.AcquisitionConfig(
            variant=config.acquisition, n_candidates=config.n_candidates,
            seed=config.seed * 1_000_003 + it,
        )
        x = acquisition.select(region[0], region[1], prob.f_rows, models, acq)
        record(x, "bo", region=region, models=models, center=center)
    hist.incumbent = inc
    return hist


@dataclass(frozen=True)
class StaticResult:
    n_max: float
    bracket: tuple[float, float]
    binding_routes: tuple[int, ...]
    monotone: bool
    evaluations: int
    capped: bool = False


def static_capacity(
    junction: model.Junction,
    direction,
    B: int = 3,
    v_a: float = 0.8,
    v_s: float = 0.3,
    tol: float = 0.01,
    n_cap: float = 1000.0,
    evaluate=None,
) -> StaticResult:
    """Largest total rate n with every constraint satisfied along ``lam = n * direction``.

    ``evaluate(lam) -> c`` defaults to the CTMC constraint evaluation.
    """
    p = np.asarray(direction, dtype=float)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("direction must be a probability vector")
    if evaluate is None:
        def evaluate(lam):
            return ctmc.evaluate_constraints(junction, lam, B, v_a, v_s).c

    seen = {}

    def cmax(n):
        if n not in seen:
            seen[n] = np.asarray(evaluate(n * p), dtype=float)
        return float(np.max(seen[n]))

    lo, hi = 0.0, 1.0
    while cmax(hi) <= 0:
        lo = hi
        if hi >= n_cap:
            return StaticResult(n_cap, (n_cap, n_cap), (), True, len(seen), capped=True)
        hi = min(2.0 * hi, n_cap)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if cmax(mid) <= 0:
            lo = mid
        else:
            hi = mid
    ns = sorted(seen)
    vals = np.array([float(np.max(seen[n])) for n in ns])
    monotone = bool(np.all(np.diff(vals) >= -1e-9))
    if not monotone:
        log.warning("constraint not monotone along the ray; falling back to a grid scan")
        lo, hi = _grid_scan(cmax, hi, tol)
    binding = tuple(int(r) for r in np.flatnonzero(seen[hi] > 0))
    return StaticResult(lo, (lo, hi), binding, monotone, len(seen))


def _grid_scan(cmax, n_hi, tol):
    step = max(tol, n_hi / 200.0)
    grid = np.arange(step, n_hi + step, step)
    lo = 0.0
    for n in grid:
        if cmax(float(n)) > 0:
            hi = float(n)
            break
        lo = float(n)
    else:
        return lo, lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if cmax(mid) <= 0:
            lo = mid
        else:
            hi = mid
    return lo, hi


@dataclass
class SweepResult:
    histories: list
    rows: list


def summarize(junction, spec: ObjectiveSpec, hist: RunHistory, n_max: float | None) -> dict:
    inc = hist.incumbent
    row = {"weight": spec.weight, "seed": hist.seed, "variant": hist.variant, "status": hist.status}
    if inc is None:
        return row | {"total_traffic": None, "objective": None, "distance": None,
                      "delta_traffic": None, "feasible": None}
    lam = np.asarray(hist.records[inc.index]["lam"], dtype=float)
    total = float(lam.sum())
    return row | {
        "total_traffic": total,
        "objective": inc.objective,
        "distance": distance(junction, lam, spec),
        "delta_traffic": None if n_max is None else total - n_max,
        "feasible": inc.feasible,
    }


def weight_sweep(
    junction: model.Junction,
    ub,
    spec: ObjectiveSpec,
    weights,
    seeds,
    config: BoConfig,
    n_max: float | None = None,
    workers: int | None = None,
) -> SweepResult:
    """One BO run per (weight, seed); rows ordered by weight, then seed."""
    weights = list(weights)
    if not weights:
        raise ValueError("need at least one weight")
    jobs = [(w, s) for w in weights for s in seeds]
    if workers is None:
        workers = int(os.environ.get("RAILCAP_WORKERS", "1"))

    def run(job):
        w, s = job
        sp_ = replace(spec, weight=float(w))
        try:
            return sp_, run_bo(junction, ub, sp_, replace(config, seed=int(s)))
        except Exception as exc:  # isolate failing runs
            log.error("run weight=%s seed=%s failed: %s", w, s, exc)
            h = RunHistory(variant=config.variant, seed=int(s), weight=float(w), status=f"failed: {exc}")
            return sp_, h

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    rows = [summarize(junction, sp_, h, n_max) for sp_, h in results]
    return SweepResult([h for _, h in results], rows)
