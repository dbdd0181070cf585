"""Scenario files: JSON documents describing a junction and an experiment."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from railcap import model, solver

SCHEMA_VERSION = 1
BUNDLED = ("small_junction", "gagny")


class ScenarioValidationError(model.ScenarioError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class Scenario:
    name: str
    junction: model.Junction
    ub: np.ndarray
    objective: solver.ObjectiveSpec
    config: solver.BoConfig
    weights: tuple[float, ...] = ()
    source: str = ""
    raw: dict = field(default_factory=dict, repr=False)

    def with_overrides(self, **kw) -> Scenario:
        """Copy with BO config fields replaced (``None`` values ignored)."""
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, config=replace(self.config, **kw))


def resolve(path_or_name: str) -> Path:
    """File path, or the path of a bundled scenario given by name."""
    p = Path(path_or_name)
    if p.exists() or path_or_name not in BUNDLED:
        return p
    return Path(str(resources.files("railcap") / "scenarios" / f"{path_or_name}.json"))


def load_scenario(path_or_name: str) -> Scenario:
    path = resolve(path_or_name)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioValidationError("<file>", f"cannot read {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioValidationError("<file>", f"malformed JSON: {exc}") from exc
    return parse_scenario(doc, source=str(path))


def _get(doc, key, path, kind=None, default=...):
    if not isinstance(doc, dict):
        raise ScenarioValidationError(path, "expected an object")
    if key not in doc:
        if default is ...:
            raise ScenarioValidationError(f"{path}.{key}", "missing")
        return default
    val = doc[key]
    if kind is not None and (not isinstance(val, kind) or (isinstance(val, bool) and kind is not bool)):
        name = kind.__name__ if isinstance(kind, type) else "number"
        raise ScenarioValidationError(f"{path}.{key}", f"expected {name}")
    return val


def _number(doc, key, path, default=...):
    return float(_get(doc, key, path, (int, float), default))


def _lookup(names: dict, name, path):
    if name not in names:
        raise ScenarioValidationError(path, f"unknown name {name!r}")
    return names[name]


def _matrix(val, d, path):
    if not isinstance(val, list) or len(val) != d:
        raise ScenarioValidationError(path, f"expected a {d}x{d} matrix")
    for i, row in enumerate(val):
        if not isinstance(row, list) or len(row) != d:
            raise ScenarioValidationError(f"{path}[{i}]", f"expected a row of length {d}")
        for j, v in enumerate(row):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ScenarioValidationError(f"{path}[{i}][{j}]", "expected a number")
    return np.array(val, dtype=float)


def parse_scenario(doc: dict, source: str = "") -> Scenario:
    """Validate a scenario document and build the in-memory objects."""
    if not isinstance(doc, dict):
        raise ScenarioValidationError("$", "expected an object")
    version = _get(doc, "schema_version", "$", int, SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ScenarioValidationError("$.schema_version", f"unsupported version {version}")
    name = _get(doc, "name", "$", str, Path(source).stem or "scenario")

    jdoc = _get(doc, "junction", "$", dict)
    routes_doc = _get(jdoc, "routes", "$.junction", list)
    types_doc = _get(jdoc, "train_types", "$.junction", list)
    req_doc = _get(jdoc, "requests", "$.junction", list)
    routes, types = [], []
    for i, r in enumerate(routes_doc):
        p = f"$.junction.routes[{i}]"
        routes.append(model.Route(i, _get(r, "name", p, str), bool(_get(r, "is_main", p, bool, False))))
    for i, t in enumerate(types_doc):
        p = f"$.junction.train_types[{i}]"
        types.append(model.TrainType(i, _get(t, "name", p, str), bool(_get(t, "is_passenger", p, bool))))
    route_ids = {r.name: r.id for r in routes}
    type_ids = {t.name: t.id for t in types}
    if len(route_ids) != len(routes):
        raise ScenarioValidationError("$.junction.routes", "duplicate route names")
    if len(type_ids) != len(types):
        raise ScenarioValidationError("$.junction.train_types", "duplicate train type names")
    requests = []
    for i, q in enumerate(req_doc):
        p = f"$.junction.requests[{i}]"
        requests.append(model.Request(
            _lookup(route_ids, _get(q, "route", p, str), f"{p}.route"),
            _lookup(type_ids, _get(q, "train_type", p, str), f"{p}.train_type"),
        ))
    d = len(requests)
    if d == 0:
        raise ScenarioValidationError("$.junction.requests", "no requests")
    headways = _matrix(_get(jdoc, "headways", "$.junction"), d, "$.junction.headways")
    conflicts = jdoc.get("conflicts")
    if conflicts is not None:
        conflicts = _matrix(conflicts, len(routes), "$.junction.conflicts").astype(bool)
    horizon = _number(jdoc, "time_horizon", "$.junction", 60.0)
    try:
        junction = model.Junction(
            routes=tuple(routes), train_types=tuple(types), requests=tuple(requests),
            headways=headways, conflicts=conflicts, time_horizon=horizon,
        )
    except model.ScenarioError as exc:
        raise ScenarioValidationError("$.junction", str(exc)) from exc

    qdoc = _get(doc, "queue", "$", dict, {})
    B = _get(qdoc, "B", "$.queue", int, 3)
    v_a = _number(qdoc, "v_A", "$.queue", 0.8)
    v_s = _number(qdoc, "v_S", "$.queue", 0.3)
    if B < 1:
        raise ScenarioValidationError("$.queue.B", "must be >= 1")
    if v_a < 0 or v_s < 0:
        raise ScenarioValidationError("$.queue", "coefficients of variation must be non-negative")

    bdoc = _get(doc, "bounds", "$", dict)
    ub = _get(bdoc, "ub", "$.bounds", (list, int, float))
    ub = np.full(d, float(ub)) if not isinstance(ub, list) else np.array(ub, dtype=float)
    if ub.shape != (d,):
        raise ScenarioValidationError("$.bounds.ub", f"expected {d} entries")
    if not np.all(np.isfinite(ub)) or np.any(ub <= 0):
        raise ScenarioValidationError("$.bounds.ub", "entries must be positive and finite")

    odoc = _get(doc, "objective", "$", dict)
    grouping = _get(odoc, "grouping", "$.objective", str)
    if grouping not in ("by_type", "by_route"):
        raise ScenarioValidationError("$.objective.grouping", "expected 'by_type' or 'by_route'")
    groups = types if grouping == "by_type" else routes
    tdoc = _get(odoc, "target", "$.objective", (dict, list))
    if isinstance(tdoc, dict):
        unknown = set(tdoc) - {g.name for g in groups}
        if unknown:
            raise ScenarioValidationError("$.objective.target", f"unknown group(s) {sorted(unknown)}")
        target = np.array([float(tdoc.get(g.name, 0.0)) for g in groups])
    else:
        target = np.array(tdoc, dtype=float)
        if target.shape != (len(groups),):
            raise ScenarioValidationError("$.objective.target", f"expected {len(groups)} entries")
    if np.any(target < 0) or abs(target.sum() - 1.0) > 1e-9:
        raise ScenarioValidationError("$.objective.target", "must be non-negative and sum to 1")
    weights = tuple(float(w) for w in _get(odoc, "weights", "$.objective", list, []))
    weight = _number(odoc, "weight", "$.objective", weights[0] if weights else 0.0)
    if weight < 0 or any(w < 0 for w in weights):
        raise ScenarioValidationError("$.objective.weight", "must be non-negative")
    spec = solver.ObjectiveSpec(grouping, target, weight)
    try:
        solver.request_direction(junction, spec)
    except ValueError as exc:
        raise ScenarioValidationError("$.objective.target", str(exc)) from exc

    bo = _get(doc, "bo", "$", dict, {})
    variant = _get(bo, "variant", "$.bo", str, "EI-Exp-TR")
    limit = bo.get("time_limit_secs")
    if limit is not None and (isinstance(limit, bool) or not isinstance(limit, (int, float)) or limit <= 0):
        raise ScenarioValidationError("$.bo.time_limit_secs", "expected a positive number or null")
    try:
        config = solver.BoConfig.from_variant(
            variant,
            n_init=_get(bo, "n_init", "$.bo", int, 10),
            max_iterations=_get(bo, "max_iterations", "$.bo", int, 200),
            time_limit=None if limit is None else float(limit),
            seed=_get(bo, "seed", "$.bo", int, 0),
            B=B, v_a=v_a, v_s=v_s,
        )
    except ValueError as exc:
        raise ScenarioValidationError("$.bo", str(exc)) from exc
    return Scenario(name, junction, ub, spec, config, weights, source, doc)
