import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from railcap import ctmc, solver

from conftest import mm1k_distribution, parallel_routes, single_route

LIMIT_LOCAL = 0.479 * math.exp(-1.3)


def single_route_c(n, headway=2.0, B=3):
    """Closed-form constraint of one route with pure local traffic."""
    rho = n * headway / 60.0
    pi = mm1k_distribution(rho, B + 1)
    l_mm = pi @ np.maximum(np.arange(B + 2) - 1, 0)
    c = rho ** (1 - 0.64) * 1.64 - 0.64
    return l_mm * (0.09 * c + 0.64) / 2 - LIMIT_LOCAL


def grid_max_feasible(step, hi=60.0):
    grid = np.arange(step, hi, step)
    vals = np.array([single_route_c(n) for n in grid])
    return grid[np.argmax(vals > 0) - 1]


def test_objective_examples():
    j = parallel_routes([2.0, 2.0])
    spec = solver.ObjectiveSpec("by_route", [0.5, 0.5], 5.0)
    assert solver.objective_eval(j, [30.0, 10.0], spec)[0] == pytest.approx(39.375)
    assert solver.objective_eval(j, [20.0, 20.0], spec)[0] == pytest.approx(40.0)
    free = solver.ObjectiveSpec("by_route", [0.5, 0.5], 0.0)
    assert solver.objective_eval(j, [7.0, 1.0], free)[0] == 8.0


def test_objective_values_match_scalar():
    j = parallel_routes([2.0, 3.0, 4.0])
    spec = solver.ObjectiveSpec("by_route", [0.2, 0.3, 0.5], 7.0)
    lams = np.random.default_rng(0).uniform(0, 10, (6, 3))
    vec = solver.objective_values(j, lams, spec)
    assert np.allclose(vec, [solver.objective_eval(j, lam, spec)[0] for lam in lams])


def test_objective_degenerate():
    j = parallel_routes([2.0, 2.0])
    with pytest.raises(ValueError):
        solver.objective_eval(j, [0.0, 0.0], solver.ObjectiveSpec("by_route", [0.5, 0.5], 1.0))


def test_spec_validation():
    with pytest.raises(ValueError):
        solver.ObjectiveSpec("by_route", [0.6, 0.6], 1.0)
    with pytest.raises(ValueError):
        solver.ObjectiveSpec("by_route", [0.5, 0.5], -1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 100.0))
def test_objective_gradient_fd(seed, weight):
    from railcap.scenario import load_scenario

    sc = load_scenario("small_junction")
    spec = solver.ObjectiveSpec(sc.objective.grouping, sc.objective.target, weight)
    lam = np.random.default_rng(seed).uniform(0.5, 10.0, sc.junction.d)
    _, g = solver.objective_eval(sc.junction, lam, spec)
    h = 1e-5
    fd = np.array([
        (solver.objective_eval(sc.junction, lam + h * e, spec)[0]
         - solver.objective_eval(sc.junction, lam - h * e, spec)[0]) / (2 * h)
        for e in np.eye(sc.junction.d)
    ])
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


def test_variant_names():
    assert len(solver.VARIANTS) == 8
    for name in solver.VARIANTS:
        assert solver.BoConfig.from_variant(name).variant == name
    with pytest.raises(ValueError):
        solver.BoConfig.from_variant("EI-X-TR")
    with pytest.raises(ValueError):
        solver.BoConfig(n_init=1)


def test_request_direction():
    from railcap.scenario import load_scenario

    sc = load_scenario("small_junction")
    p = solver.request_direction(sc.junction, sc.objective)
    assert p.sum() == pytest.approx(1.0)
    # each type is present on all four routes
    assert np.allclose(p[sc.junction.request_types == 2], 0.5 / 4)


def test_static_single_route_matches_scan():
    j = single_route(2.0)
    res = solver.static_capacity(j, [1.0], B=3)
    oracle = grid_max_feasible(0.01)
    assert abs(res.n_max - oracle) <= 0.01 + 1e-9
    assert res.monotone and res.binding_routes == (0,)
    assert res.bracket[1] - res.bracket[0] <= 0.01


def test_static_cap():
    j = single_route(2.0)
    res = solver.static_capacity(j, [1.0], evaluate=lambda lam: np.array([-1.0]))
    assert res.capped and res.n_max == 1000.0


def test_static_non_monotone_flagged():
    j = single_route(2.0)
    # violation shrinks up to n = 8, then jumps: not monotone along the ray
    fn = lambda lam: np.array([-0.1 * lam[0] if lam[0] <= 8 else 1.0])  # noqa: E731
    res = solver.static_capacity(j, [1.0], evaluate=fn)
    assert not res.monotone
    assert 7.9 <= res.n_max <= 8.0


def toy_config(**kw):
    base = dict(B=3, n_init=5, max_iterations=12, seed=1, restarts=2, n_candidates=128)
    return solver.BoConfig(**(base | kw))


def test_initial_design_only():
    j = parallel_routes([2.0, 2.0])
    spec = solver.ObjectiveSpec("by_route", [0.5, 0.5], 1.0)
    h = solver.run_bo(j, [20.0, 20.0], spec, toy_config(max_iterations=5))
    assert len(h) == 5
    assert all(r["phase"] == "init" for r in h.records)


@pytest.mark.parametrize("variant", ["EI-C-TR", "TS-Exp-CPO"])
def test_deterministic_histories(variant):
    j = parallel_routes([2.0, 3.0])
    spec = solver.ObjectiveSpec("by_route", [0.5, 0.5], 5.0)
    cfg = solver.BoConfig.from_variant(variant, B=2, n_init=4, max_iterations=9, seed=3, restarts=2, n_candidates=64)
    strip = lambda h: [{k: v for k, v in r.items() if k != "elapsed"} for r in h.records]  # noqa: E731
    a = solver.run_bo(j, [25.0, 25.0], spec, cfg)
    b = solver.run_bo(j, [25.0, 25.0], spec, cfg)
    assert strip(a) == strip(b)


def test_one_route_reaches_constrained_optimum():
    j = single_route(2.0)
    spec = solver.ObjectiveSpec("by_route", [1.0], 0.0)
    cfg = solver.BoConfig.from_variant("EI-Exp-TR", B=3, max_iterations=60, seed=0)
    h = solver.run_bo(j, [40.0], spec, cfg)
    oracle = grid_max_feasible(0.05)
    inc = h.incumbent
    assert inc.feasible
    assert inc.objective >= 0.95 * oracle


def test_bo_invariants():
    j = parallel_routes([2.0, 3.0, 2.5])
    ub = np.array([20.0, 15.0, 20.0])
    spec = solver.ObjectiveSpec("by_route", [0.4, 0.2, 0.4], 10.0)
    h = solver.run_bo(j, ub, spec, toy_config(max_iterations=20))
    best = -np.inf
    for r in h.records:
        lam = np.array(r["lam"])
        assert np.all(lam >= 0) and np.all(lam <= ub + 1e-12)
        if "region" in r:
            lo, hi = np.array(r["region"]["lower"]) * ub, np.array(r["region"]["upper"]) * ub
            assert np.all(lam >= lo - 1e-9) and np.all(lam <= hi + 1e-9)
        if r["incumbent_feasible"]:
            assert r["incumbent_objective"] >= best
            best = r["incumbent_objective"]
    if h.incumbent.feasible:
        lam = np.array(h.records[h.incumbent.index]["lam"])
        assert ctmc.evaluate_constraints(j, lam, 3).max_violation <= 1e-6


def test_ctmc_failure_sentinel(monkeypatch):
    j = parallel_routes([2.0, 2.0])
    spec = solver.ObjectiveSpec("by_route", [0.5, 0.5], 1.0)
    real = ctmc.evaluate_constraints
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        if calls["n"] == 3:
            raise ctmc.CtmcError("no convergence")
        return real(*a, **kw)

    monkeypatch.setattr(ctmc, "evaluate_constraints", flaky)
    h = solver.run_bo(j, [20.0, 20.0], spec, toy_config(max_iterations=8))
    assert len(h) == 8
    assert h.records[2]["c"] == [None, None] and not h.records[2]["feasible"]


def test_time_limit_stops_early():
    j = parallel_routes([2.0, 2.0])
    spec = solver.ObjectiveSpec("by_route", [0.5, 0.5], 1.0)
    h = solver.run_bo(j, [20.0, 20.0], spec, toy_config(max_iterations=500, time_limit=1e-9))
    assert len(h) == 1


def test_sweep_rows_and_isolation(monkeypatch):
    j = parallel_routes([2.0, 2.0])
    spec = solver.ObjectiveSpec("by_route", [0.5, 0.5], 1.0)
    real = solver.run_bo

    def maybe_fail(junction, ub, sp_, cfg, callback=None):
        if sp_.weight == 100.0 and cfg.seed == 1:
            raise ctmc.CtmcError("boom")
        return real(junction, ub, sp_, cfg, callback)

    monkeypatch.setattr(solver, "run_bo", maybe_fail)
    res = solver.weight_sweep(j, [20.0, 20.0], spec, [5, 100], [0, 1, 2], toy_config(max_iterations=6), n_max=10.0)
    assert len(res.rows) == 6
    assert [(r["weight"], r["seed"]) for r in res.rows] == [(w, s) for w in (5.0, 100.0) for s in (0, 1, 2)]
    failed = [r for r in res.rows if r["status"] != "ok"]
    assert len(failed) == 1 and failed[0]["total_traffic"] is None
    for r in res.rows:
        if r["status"] == "ok":
            assert r["delta_traffic"] == pytest.approx(r["total_traffic"] - 10.0)


def test_sweep_distance_shrinks_with_weight():
    j = parallel_routes([2.0, 2.0])
    spec = solver.ObjectiveSpec("by_route", [0.8, 0.2], 0.0)
    cfg = toy_config(max_iterations=10, n_init=4)
    res = solver.weight_sweep(j, [30.0, 30.0], spec, [0.0, 100.0], range(20), cfg)
    med = {w: np.median([r["distance"] for r in res.rows if r["weight"] == w]) for w in (0.0, 100.0)}
    assert med[100.0] <= med[0.0]
