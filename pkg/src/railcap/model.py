"""Junction domain model and the rate/occupation arithmetic built on it.

Rates are trains per hour, occupation and headway times are minutes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_TOTAL = 1e-6
EPS_ROUTE = 1e-9
MINUTES_PER_HOUR = 60.0


class ScenarioError(ValueError):
    """Raised for structurally invalid junction data."""


class DegenerateInputError(ValueError):
    """Raised when a rate assignment carries (almost) no traffic."""


@dataclass(frozen=True)
class TrainType:
    id: int
    name: str
    is_passenger: bool = True


@dataclass(frozen=True)
class Route:
    id: int
    name: str
    is_main: bool = False


@dataclass(frozen=True)
class Request:
    route: int
    train_type: int


@dataclass(frozen=True, eq=False)
class Junction:
    """Static infrastructure model: routes, train types, requests, headways.

    ``headways[o, o2]`` is the minimum headway (minutes) when request ``o2``
    follows request ``o``. ``conflicts`` is the k x k route conflict matrix;
    it is derived from the headway support when not supplied.
    """

    routes: tuple[Route, ...]
    train_types: tuple[TrainType, ...]
    requests: tuple[Request, ...]
    headways: np.ndarray
    conflicts: np.ndarray = field(default=None)
    time_horizon: float = 60.0

    def __post_init__(self):
        h = np.array(self.headways, dtype=float)
        h.setflags(write=False)
        object.__setattr__(self, "headways", h)
        _validate_ids(self.routes, "routes")
        _validate_ids(self.train_types, "train_types")
        names = [u.name for u in self.train_types]
        if len(set(names)) != len(names):
            raise ScenarioError("train_types: names must be unique")
        k, n_types = len(self.routes), len(self.train_types)
        seen = set()
        for i, req in enumerate(self.requests):
            if not 0 <= req.route < k:
                raise ScenarioError(f"requests[{i}].route: unknown route id {req.route}")
            if not 0 <= req.train_type < n_types:
                raise ScenarioError(
                    f"requests[{i}].train_type: unknown train type id {req.train_type}"
                )
            if (req.route, req.train_type) in seen:
                raise ScenarioError(f"requests[{i}]: duplicate request")
            seen.add((req.route, req.train_type))
        d = len(self.requests)
        if h.shape != (d, d):
            raise ScenarioError(f"headways: expected a {d}x{d} matrix, got shape {h.shape}")
        if not np.all(np.isfinite(h)) or np.any(h < 0):
            raise ScenarioError("headways: entries must be finite and >= 0")
        derived = derive_conflicts(h, self.requests, k)
        if self.conflicts is None:
            c = derived
        else:
            c = np.array(self.conflicts, dtype=bool)
            if c.shape != (k, k):
                raise ScenarioError(f"conflicts: expected a {k}x{k} matrix, got shape {c.shape}")
            if not np.array_equal(c, c.T):
                raise ScenarioError("conflicts: matrix must be symmetric")
            if not np.array_equal(c, derived):
                r1, r2 = np.argwhere(c != derived)[0]
                raise ScenarioError(
                    f"conflicts[{r1}][{r2}]: inconsistent with headway support"
                )
        c.setflags(write=False)
        object.__setattr__(self, "conflicts", c)

    @property
    def d(self) -> int:
        return len(self.requests)

    @property
    def k(self) -> int:
        return len(self.routes)

    @property
    def request_routes(self) -> np.ndarray:
        return np.array([q.route for q in self.requests], dtype=int)

    @property
    def request_types(self) -> np.ndarray:
        return np.array([q.train_type for q in self.requests], dtype=int)

    @property
    def passenger_mask(self) -> np.ndarray:
        """Boolean mask over requests: True where the train type carries passengers."""
        return np.array(
            [self.train_types[q.train_type].is_passenger for q in self.requests], dtype=bool
        )

    def request_conflicts(self) -> np.ndarray:
        """d x d boolean matrix, ``C[r(o), r(o')]``."""
        rr = self.request_routes
        return self.conflicts[np.ix_(rr, rr)]

    def request_name(self, o: int) -> str:
        q = self.requests[o]
        return f"{self.routes[q.route].name}-{self.train_types[q.train_type].name}"


def _validate_ids(items, label):
    for i, item in enumerate(items):
        if item.id != i:
            raise ScenarioError(f"{label}[{i}].id: ids must be dense 0..n-1, got {item.id}")
    names = [it.name for it in items]
    if len(set(names)) != len(names):
        raise ScenarioError(f"{label}: names must be unique")


def derive_conflicts(headways, requests, k: int | None = None) -> np.ndarray:
    """Route conflict matrix implied by the support of the headway table.

    Two routes conflict iff some request pair on them has a positive headway.
    Rejects tables whose support is asymmetric or that leave a request
    without a positive headway to itself.
    """
    h = np.asarray(headways, dtype=float)
    support = h > 0
    d = len(requests)
    for o in range(d):
        if not support[o, o]:
            raise ScenarioError(f"headways[{o}][{o}]: a request must conflict with itself (h > 0)")
    asym = np.argwhere(support != support.T)
    if len(asym):
        o1, o2 = asym[0]
        raise ScenarioError(
            f"headways[{o1}][{o2}]: asymmetric support "
            f"(h[{o1}][{o2}]={h[o1, o2]}, h[{o2}][{o1}]={h[o2, o1]})"
        )
    if k is None:
        k = max(q.route for q in requests) + 1
    c = np.zeros((k, k), dtype=bool)
    rr = np.array([q.route for q in requests], dtype=int)
    for o, o2 in np.argwhere(support):
        c[rr[o], rr[o2]] = True
    c[np.arange(k), np.arange(k)] = True
    return c


def request_occupation_times(junction: Junction, lam) -> np.ndarray:
    """Average occupation time b_o (minutes) of every request.

    Minimum headways to conflicting followers are weighted by the followers'
    arrival rates. Requests with no conflicting traffic get NaN (inactive).
    """
    lam = np.asarray(lam, dtype=float)
    a = junction.request_conflicts()
    num = (a * junction.headways) @ lam
    den = a.astype(float) @ lam
    out = np.full(junction.d, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def request_occupation_time(junction: Junction, lam, o: int) -> float:
    return float(request_occupation_times(junction, lam)[o])


def route_rates(junction: Junction, lam) -> np.ndarray:
    """Total arrival rate per route."""
    lam = np.asarray(lam, dtype=float)
    return np.bincount(junction.request_routes, weights=lam, minlength=junction.k)


def route_occupation_times(junction: Junction, lam) -> np.ndarray:
    """Rate-weighted average occupation time b_r (minutes); NaN on inactive routes."""
    lam = np.asarray(lam, dtype=float)
    b_o = request_occupation_times(junction, lam)
    lam_r = route_rates(junction, lam)
    weighted = np.where(lam > 0, lam * np.nan_to_num(b_o), 0.0)
    num = np.bincount(junction.request_routes, weights=weighted, minlength=junction.k)
    out = np.full(junction.k, np.nan)
    ok = lam_r >= EPS_ROUTE
    out[ok] = num[ok] / lam_r[ok]
    return out


def route_occupation_time(junction: Junction, lam, r: int) -> float:
    return float(route_occupation_times(junction, lam)[r])


def service_rates(junction: Junction, lam) -> np.ndarray:
    """Service rate mu_r = 1/b_r in trains per hour; NaN on inactive routes."""
    return MINUTES_PER_HOUR / route_occupation_times(junction, lam)


def service_rate(junction: Junction, lam, r: int) -> float:
    return float(service_rates(junction, lam)[r])


def occupation_ratios(junction: Junction, lam) -> np.ndarray:
    return route_rates(junction, lam) / service_rates(junction, lam)


def occupation_ratio(junction: Junction, lam, r: int) -> float:
    return float(occupation_ratios(junction, lam)[r])


def active_routes(junction: Junction, lam) -> np.ndarray:
    return route_rates(junction, lam) >= EPS_ROUTE


def group_index(junction: Junction, grouping: str) -> tuple[np.ndarray, int]:
    """Map each request to its group id for ``by_type`` or ``by_route``."""
    if grouping == "by_type":
        return junction.request_types, len(junction.train_types)
    if grouping == "by_route":
        return junction.request_routes, junction.k
    raise ValueError(f"unknown grouping {grouping!r}")


def group_distribution(junction: Junction, lam, grouping: str) -> np.ndarray:
    """Share of the total traffic carried by each train type or route."""
    lam = np.asarray(lam, dtype=float)
    total = lam.sum()
    if total < EPS_TOTAL:
        raise DegenerateInputError(f"total traffic {total:g} below {EPS_TOTAL:g} trains/hour")
    idx, n = group_index(junction, grouping)
    return np.bincount(idx, weights=lam, minlength=n) / total


def passenger_shares(junction: Junction, lam) -> np.ndarray:
    """Passenger fraction of each route's traffic; NaN on inactive routes."""
    lam = np.asarray(lam, dtype=float)
    lam_r = route_rates(junction, lam)
    pax = np.bincount(
        junction.request_routes, weights=lam * junction.passenger_mask, minlength=junction.k
    )
    out = np.full(junction.k, np.nan)
    ok = lam_r >= EPS_ROUTE
    out[ok] = np.clip(pax[ok] / lam_r[ok], 0.0, 1.0)
    return out


def passenger_share(junction: Junction, lam, r: int) -> float:
    share = passenger_shares(junction, lam)[r]
    if np.isnan(share):
        raise ValueError(f"route {r} is inactive; passenger share undefined")
    return float(share)


def nominal_passenger_shares(junction: Junction) -> np.ndarray:
    """Unweighted passenger fraction of the request types declared on each route.

    Used for the queue-length threshold of routes that carry no traffic.
    """
    counts = np.bincount(junction.request_routes, minlength=junction.k).astype(float)
    pax = np.bincount(
        junction.request_routes, weights=junction.passenger_mask.astype(float),
        minlength=junction.k,
    )
    return np.divide(pax, counts, out=np.ones(junction.k), where=counts > 0)
