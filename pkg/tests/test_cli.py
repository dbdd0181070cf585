import csv
import json

import numpy as np
import pytest

from railcap import cli, ctmc, solver
from railcap.scenario import ScenarioValidationError, load_scenario, parse_scenario

_SELF = [[5.0, 5.0, 5.0], [2.0, 2.0, 2.0], [3.0, 4.0, 3.0]]
_NONE = [[0.0] * 3] * 3
_CROSS = [[1.7] * 3, [1.0] * 3, [1.0, 1.3, 1.0]]
TABLE1 = np.block([
    [np.array(_SELF), np.array(_NONE), np.array(_SELF), np.array(_NONE)],
    [np.array(_NONE), np.array(_SELF), np.array(_CROSS), np.array(_SELF)],
    [np.array(_SELF), np.array(_CROSS), np.array(_SELF), np.array(_NONE)],
    [np.array(_NONE), np.array(_SELF), np.array(_NONE), np.array(_SELF)],
])
TABLE4 = np.array([
    [3.0, 3.0, 2.3, 0.0, 2.2, 0.0, 0.0, 0.0],
    [3.0, 3.0, 2.3, 0.0, 1.5, 0.0, 1.5, 2.2],
    [1.5, 1.5, 1.5, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 1.5, 0.0, 1.5, 1.5, 0.0],
    [1.8, 1.5, 0.0, 0.0, 1.8, 1.8, 1.5, 0.0],
    [0.0, 0.0, 0.0, 2.7, 2.7, 2.7, 2.7, 0.0],
    [0.0, 1.5, 0.0, 3.0, 1.5, 2.7, 3.0, 3.0],
    [0.0, 1.8, 0.0, 0.0, 0.0, 0.0, 1.8, 1.8],
])


def toy_doc(**over):
    doc = {
        "schema_version": 1,
        "name": "toy",
        "junction": {
            "routes": [{"name": "a"}, {"name": "b"}],
            "train_types": [{"name": "lo", "is_passenger": True}],
            "requests": [{"route": "a", "train_type": "lo"}, {"route": "b", "train_type": "lo"}],
            "headways": [[2.0, 0.0], [0.0, 2.0]],
        },
        "bounds": {"ub": 25.0},
        "objective": {"grouping": "by_route", "target": {"a": 0.5, "b": 0.5}, "weight": 5},
        "bo": {"variant": "EI-C-TR", "n_init": 4, "max_iterations": 6, "seed": 2},
    }
    doc.update(over)
    return doc


@pytest.fixture
def toy_file(tmp_path):
    path = tmp_path / "toy.json"
    path.write_text(json.dumps(toy_doc()))
    return str(path)


def test_bundled_small_junction():
    sc = load_scenario("small_junction")
    assert sc.junction.d == 12 and sc.junction.k == 4
    assert np.array_equal(sc.junction.headways, TABLE1)
    assert [sc.junction.request_name(o) for o in range(3)] == ["r1-fr", "r1-ld", "r1-lo"]
    assert sc.config.B == 5
    assert np.allclose(sc.objective.target, [0.3, 0.2, 0.5])


def test_bundled_gagny():
    sc = load_scenario("gagny")
    j = sc.junction
    assert j.d == 8 and len(j.train_types) == 1
    assert np.array_equal(j.headways, TABLE4)
    assert [r.name for r in j.routes if r.is_main] == ["r3", "r4", "r5", "r8"]
    assert sc.weights == (0, 1, 2, 5, 10, 20, 50, 100)


def test_defaults_filled():
    sc = parse_scenario(toy_doc())
    assert (sc.config.B, sc.config.v_a, sc.config.v_s) == (3, 0.8, 0.3)
    assert sc.junction.time_horizon == 60.0
    assert np.array_equal(sc.ub, [25.0, 25.0])


@pytest.mark.parametrize("mutate, path", [
    (lambda d: d["junction"].update(headways=[[2.0, 0.0]]), "$.junction.headways"),
    (lambda d: d["junction"]["requests"][1].update(route="zz"), "$.junction.requests[1].route"),
    (lambda d: d["objective"].update(target={"a": 0.7, "b": 0.7}), "$.objective.target"),
    (lambda d: d["bo"].update(variant="EI-Z-TR"), "$.bo"),
    (lambda d: d["bounds"].update(ub=[1.0]), "$.bounds.ub"),
    (lambda d: d["junction"].update(headways=[[2.0, 1.0], [0.0, 2.0]]), "$.junction"),
])
def test_validation_paths(mutate, path):
    doc = toy_doc()
    mutate(doc)
    with pytest.raises(ScenarioValidationError) as err:
        parse_scenario(doc)
    assert err.value.path == path


def test_exit_code_for_bad_scenario(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert cli.main(["validate", "--scenario", str(path)]) == 2
    assert "malformed" in capsys.readouterr().err


def test_eval_output_round_trip(toy_file, tmp_path, capsys):
    out = tmp_path / "ev"
    assert cli.main(["eval", "--scenario", toy_file, "--lam", "20,1e-3", "--out", str(out),
                     "--dump-ctmc", str(tmp_path / "chain.tsv")]) == 0
    text = capsys.readouterr().out
    assert "0.625592" in text
    doc = json.loads((out / "eval.json").read_text())
    sc = load_scenario(toy_file)
    rep = ctmc.evaluate_constraints(sc.junction, np.array([20.0, 1e-3]), 3)
    back = ctmc.QueueReport.from_dict(doc["report"])
    assert np.array_equal(back.c, rep.c) and np.array_equal(back.l_mm, rep.l_mm)
    assert (tmp_path / "chain.tsv").exists()


def test_eval_tiny_rate_all_negative(toy_file, tmp_path):
    out = tmp_path / "ev"
    assert cli.main(["eval", "--scenario", toy_file, "--lam", "1e-6,0", "--out", str(out)]) == 0
    c = json.loads((out / "eval.json").read_text())["report"]["c"]
    assert all(v < 0 for v in c)


def test_eval_wrong_dimension(toy_file):
    assert cli.main(["eval", "--scenario", toy_file, "--lam", "1,2,3"]) == 2


def test_resource_cap_exit_code(toy_file, monkeypatch):
    monkeypatch.setattr(ctmc, "DEFAULT_STATE_CAP", 3)

    def capped(*a, **kw):
        raise ctmc.StateSpaceTooLarge(99, 3)

    monkeypatch.setattr(ctmc, "evaluate_constraints", capped)
    assert cli.main(["eval", "--scenario", toy_file, "--lam", "1,1"]) == 4


def test_numerical_exit_code(toy_file, monkeypatch):
    def broken(*a, **kw):
        raise ctmc.CtmcError("residual 1e-3")

    monkeypatch.setattr(ctmc, "evaluate_constraints", broken)
    assert cli.main(["eval", "--scenario", toy_file, "--lam", "1,1"]) == 3


def test_solve_exports_and_replay(toy_file, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["solve", "--scenario", toy_file, "--max-iters", "4", "--out", str(out)]) == 0
    recs = cli.read_history(out / "history.jsonl")
    assert len(recs) == 4
    sc = load_scenario(toy_file)
    for r in recs:
        assert r["schema_version"] == 1 and r["seed"] == 2
        rep = ctmc.evaluate_constraints(sc.junction, np.array(r["lam"]), sc.config.B)
        assert np.allclose(rep.c, r["c"], atol=1e-8)
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert len(rows) == 1 and rows[0]["seed"] == "2"


def test_solve_reproducible(toy_file, tmp_path):
    for name in ("a", "b"):
        assert cli.main(["solve", "--scenario", toy_file, "--variant", "TS-Exp-TR",
                         "--seed", "9", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a/history.jsonl").read_bytes() == (tmp_path / "b/history.jsonl").read_bytes()


def test_static_command(toy_file, tmp_path, capsys):
    assert cli.main(["static", "--scenario", toy_file, "--out", str(tmp_path)]) == 0
    assert "n_max" in capsys.readouterr().out
    doc = json.loads((tmp_path / "static.json").read_text())
    assert doc["bracket"][1] - doc["bracket"][0] <= 0.01


def test_sweep_cardinality(toy_file, tmp_path):
    out = tmp_path / "sw"
    args = ["sweep", "--scenario", toy_file, "--weights", "5,100", "--seeds", "3",
            "--max-iters", "5", "--out", str(out)]
    assert cli.main(args) == 0
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert len(rows) == 6
    assert len(list(out.glob("history_*.jsonl"))) == 6
    sc = load_scenario(toy_file)
    n_max = solver.static_capacity(sc.junction, solver.request_direction(sc.junction, sc.objective)).n_max
    for r in rows:
        assert float(r["delta_traffic"]) == pytest.approx(float(r["total_traffic"]) - n_max)


def test_non_finite_values_exported_as_null():
    assert cli.dumps({"a": float("inf"), "b": [1.0, float("nan")]}) == '{"a": null, "b": [1.0, null]}'
