"""Bounded-queue CTMC of a junction and the capacity constraints derived from it.

Each active route is a single server with at most ``B`` waiting requests.
Routes that conflict cannot be served at the same time. When a service
completes, queued routes are started greedily (longest queue first, lowest
route id on ties) until nothing else can start. Arrivals to a full queue are
lost.

A state is stored as one integer: route ``j`` contributes the digit
``serving_j * (B + 1) + queue_j`` in base ``2 * (B + 1)``, route 0 being the
least significant digit. States are always kept sorted by this code.

The reachable state space and the transition pattern only depend on the
conflict pattern of the active routes and on ``B``; they are cached so that
repeated evaluations only refill the rates.
"""

from __future__ import annotations

import logging
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from railcap import model

log = logging.getLogger(__name__)

DEFAULT_STATE_CAP = 20_000_000
TOL_STAT = 1e-10
RESIDUAL_TOL = 1e-9
MAX_ITER = 200_000
DIRECT_LIMIT = 20_000
_CACHE_SIZE = 3


class CtmcError(RuntimeError):
    """Numerical failure while solving the chain."""


class StateSpaceTooLarge(CtmcError):
    def __init__(self, count, cap):
        super().__init__(
            f"reachable state count {count} exceeds cap {cap}; "
            "lower the number of waiting positions B"
        )
        self.count = count
        self.cap = cap


@dataclass(frozen=True)
class QueueParams:
    """Arrival/service rates (per hour) of the routes that take part in the chain."""

    routes: np.ndarray  # junction route ids of the active routes
    arrival: np.ndarray
    service: np.ndarray
    conflicts: np.ndarray  # conflict matrix restricted to ``routes``
    B: int

    def __post_init__(self):
        if self.B < 0:
            raise ValueError("B must be >= 0")
        if np.any(np.asarray(self.arrival) <= 0) or np.any(np.asarray(self.service) <= 0):
            raise ValueError("arrival and service rates of active routes must be positive")

    @property
    def n_routes(self) -> int:
        return len(self.routes)

    @property
    def rho(self) -> np.ndarray:
        return np.asarray(self.arrival) / np.asarray(self.service)

    @property
    def rates(self) -> np.ndarray:
        """Arrival rates followed by service rates, indexed like ``ChainStructure.rate_index``."""
        return np.concatenate([np.asarray(self.arrival, float), np.asarray(self.service, float)])

    @classmethod
    def from_junction(cls, junction: model.Junction, lam, B: int) -> QueueParams:
        active = np.flatnonzero(model.active_routes(junction, lam))
        lam_r = model.route_rates(junction, lam)[active]
        mu_r = model.service_rates(junction, lam)[active]
        c = junction.conflicts[np.ix_(active, active)]
        return cls(routes=active, arrival=lam_r, service=mu_r, conflicts=c, B=B)


@dataclass(frozen=True, eq=False)
class StateSpace:
    codes: np.ndarray  # sorted int64 codes
    serving: np.ndarray  # n x k bool
    queue: np.ndarray  # n x k int8
    B: int

    def __len__(self):
        return len(self.codes)

    def index(self, codes) -> np.ndarray:
        """Positions of ``codes``; raises if any code is not in the space."""
        codes = np.asarray(codes, dtype=np.int64)
        idx = np.searchsorted(self.codes, codes)
        bad = (idx >= len(self.codes)) | (self.codes[np.minimum(idx, len(self.codes) - 1)] != codes)
        if np.any(bad):
            raise KeyError(f"{int(bad.sum())} codes are not reachable states")
        return idx


@dataclass(frozen=True, eq=False)
class ChainStructure:
    """Rate-independent transition pattern, stored as the CSR pattern of Q^T.

    Row ``i`` of Q^T lists the transitions entering state ``i``: their source
    states (``indices``) and which rate drives them (``rate_index``; ``j`` for
    an arrival on route ``j``, ``k + j`` for a completion).
    """

    space: StateSpace
    indptr: np.ndarray
    indices: np.ndarray
    rate_index: np.ndarray

    @property
    def nnz(self) -> int:
        return len(self.indices)


def _radix(n_routes: int, B: int) -> tuple[int, np.ndarray]:
    base = 2 * (B + 1)
    if n_routes * math.log2(base) >= 62:
        raise StateSpaceTooLarge(base**n_routes, DEFAULT_STATE_CAP)
    return base, base ** np.arange(n_routes, dtype=np.int64)


def encode(serving, queue, B: int) -> np.ndarray:
    serving = np.atleast_2d(serving)
    queue = np.atleast_2d(queue)
    _, weights = _radix(serving.shape[1], B)
    digits = serving.astype(np.int64) * (B + 1) + queue.astype(np.int64)
    return digits @ weights


def decode(codes, n_routes: int, B: int) -> tuple[np.ndarray, np.ndarray]:
    base, weights = _radix(n_routes, B)
    digits = (np.asarray(codes, dtype=np.int64)[:, None] // weights) % base
    return digits >= B + 1, (digits % (B + 1)).astype(np.int8)


def _blocked(serving, conflicts) -> np.ndarray:
    """Routes that conflict with at least one route in service."""
    return (serving.astype(np.int8) @ conflicts.astype(np.int8)) > 0


def dispatch(serving, queue, conflicts):
    """Start queued routes greedily until none is eligible (in place)."""
    rows = np.arange(len(serving))
    for _ in range(serving.shape[1]):
        eligible = (queue > 0) & ~serving & ~_blocked(serving, conflicts)
        has = eligible.any(axis=1)
        if not has.any():
            break
        score = np.where(eligible, queue, -1)
        pick = np.argmax(score, axis=1)
        r, j = rows[has], pick[has]
        serving[r, j] = True
        queue[r, j] -= 1
    return serving, queue


def _transitions(serving, queue, conflicts, B: int):
    """Yield ``(rate_index, source_mask, target_codes)`` for every event type."""
    k = serving.shape[1]
    c = np.asarray(conflicts, dtype=bool)
    blocked = _blocked(serving, c)
    for j in range(k):
        start = ~serving[:, j] & (queue[:, j] == 0) & ~blocked[:, j]
        enq = ~start & (queue[:, j] < B)
        mask = start | enq
        s2, q2 = serving[mask].copy(), queue[mask].copy()
        s2[start[mask], j] = True
        q2[enq[mask], j] += 1
        yield j, mask, encode(s2, q2, B)

        done = serving[:, j]
        if done.any():
            s2, q2 = serving[done].copy(), queue[done].copy()
            s2[:, j] = False
            dispatch(s2, q2, c)
            yield k + j, done, encode(s2, q2, B)


def _enumerate(conflicts, B: int, cap: int) -> StateSpace:
    k = conflicts.shape[0]
    _radix(k, B)
    frontier = np.zeros(1, dtype=np.int64)
    seen = frontier
    while len(frontier):
        s, q = decode(frontier, k, B)
        nxt = [codes for _, _, codes in _transitions(s, q, conflicts, B)]
        nxt = np.unique(np.concatenate(nxt)) if nxt else np.zeros(0, dtype=np.int64)
        frontier = nxt[~np.isin(nxt, seen, assume_unique=True)]
        seen = np.union1d(seen, frontier)
        if len(seen) > cap:
            raise StateSpaceTooLarge(len(seen), cap)
    s, q = decode(seen, k, B)
    return StateSpace(codes=seen, serving=s, queue=q, B=B)


def enumerate_states(params: QueueParams, cap: int = DEFAULT_STATE_CAP) -> StateSpace:
    """Reachable states by breadth-first closure from the all-idle state."""
    return chain_structure(params.conflicts, params.B, cap).space


def _build_structure(conflicts, B: int, cap: int) -> ChainStructure:
    space = _enumerate(conflicts, B, cap)
    n = len(space)
    src_all, dst_all, rix_all = [], [], []
    src = np.arange(n, dtype=np.int64)
    for rix, mask, codes in _transitions(space.serving, space.queue, conflicts, B):
        src_all.append(src[mask])
        dst_all.append(space.index(codes))
        rix_all.append(np.full(int(mask.sum()), rix, dtype=np.int16))
    src = np.concatenate(src_all)
    dst = np.concatenate(dst_all)
    rix = np.concatenate(rix_all)
    if np.any(src == dst):
        raise CtmcError("self-loop in transition structure")
    order = np.lexsort((src, dst))
    src, dst, rix = src[order], dst[order], rix[order]
    pair = dst * n + src
    if np.any(pair[1:] == pair[:-1]):
        raise CtmcError("parallel transitions between the same pair of states")
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(dst, minlength=n), out=indptr[1:])
    return ChainStructure(space=space, indptr=indptr, indices=src.astype(np.int32), rate_index=rix)


_structures: OrderedDict = OrderedDict()
_cache_lock = threading.Lock()


def chain_structure(conflicts, B: int, cap: int = DEFAULT_STATE_CAP) -> ChainStructure:
    """Cached :class:`ChainStructure` for a conflict pattern and queue size."""
    conflicts = np.asarray(conflicts, dtype=bool)
    key = (conflicts.shape[0], conflicts.tobytes(), int(B))
    with _cache_lock:
        hit = _structures.get(key)
        if hit is not None:
            _structures.move_to_end(key)
            if len(hit.space) > cap:
                raise StateSpaceTooLarge(len(hit.space), cap)
            return hit
        st = _build_structure(conflicts, int(B), cap)
        _structures[key] = st
        while len(_structures) > _CACHE_SIZE:
            _structures.popitem(last=False)
        return st


def clear_cache() -> None:
    with _cache_lock:
        _structures.clear()


def _transposed_generator(structure: ChainStructure, params: QueueParams):
    """Off-diagonal part of Q^T (CSR) and the exit rate of every state."""
    n = len(structure.space)
    data = params.rates[structure.rate_index]
    offt = sp.csr_matrix((data, structure.indices, structure.indptr), shape=(n, n))
    exit_rates = np.bincount(structure.indices, weights=data, minlength=n)
    return offt, exit_rates


def build_generator(space_or_structure, params: QueueParams) -> sp.csr_matrix:
    """Sparse infinitesimal generator Q (rows sum to zero)."""
    st = space_or_structure
    if isinstance(st, StateSpace):
        st = chain_structure(params.conflicts, params.B)
    offt, exit_rates = _transposed_generator(st, params)
    return (offt.T - sp.diags(exit_rates)).tocsr()


def residual(pi, gen) -> float:
    """Max-norm of pi Q."""
    return float(np.max(np.abs(gen.T @ pi))) if len(pi) else 0.0


@numba.njit(cache=True)
def _gs_sweeps(indptr, indices, data, exit_rates, pi, tol, max_iter):
    n = len(pi)
    for it in range(max_iter):
        delta = 0.0
        for i in range(n):
            acc = 0.0
            for p in range(indptr[i], indptr[i + 1]):
                acc += data[p] * pi[indices[p]]
            new = acc / exit_rates[i]
            delta += abs(new - pi[i])
            pi[i] = new
        total = pi.sum()
        for i in range(n):
            pi[i] /= total
        if delta / total < tol:
            return it + 1
    return -1


def _solve_direct(offt, exit_rates):
    n = len(exit_rates)
    a = (offt - sp.diags(exit_rates)).tolil()
    a[n - 1, :] = np.ones(n)
    b = np.zeros(n)
    b[n - 1] = 1.0
    return spla.splu(a.tocsc()).solve(b)


def _solve_power(offt, exit_rates, tol, max_iter, x0=None):
    n = len(exit_rates)
    unif = 1.05 * float(exit_rates.max())
    keep = 1.0 - exit_rates / unif
    pi = np.full(n, 1.0 / n) if x0 is None else x0 / x0.sum()
    for it in range(1, max_iter + 1):
        new = (offt @ pi) / unif + keep * pi
        new /= new.sum()
        delta = np.abs(new - pi).sum()
        pi = new
        if delta < tol:
            return pi, it
    return pi, -1


def _solve_gauss_seidel(offt, exit_rates, tol, max_iter, x0=None):
    n = len(exit_rates)
    pi = np.full(n, 1.0 / n) if x0 is None else np.array(x0 / x0.sum(), dtype=float)
    it = _gs_sweeps(offt.indptr, offt.indices, offt.data, exit_rates, pi, tol, max_iter)
    return pi, it


def _offt_residual(pi, offt, exit_rates) -> float:
    return float(np.max(np.abs(offt @ pi - exit_rates * pi)))


def _stationary(offt, exit_rates, method: str, tol: float, max_iter: int) -> np.ndarray:
    n = len(exit_rates)
    if n == 1:
        return np.ones(1)
    if method == "auto":
        method = "direct" if n <= DIRECT_LIMIT else "gauss_seidel"
    if method == "direct":
        pi = _solve_direct(offt, exit_rates)
    elif method in ("power", "gauss_seidel"):
        solve = _solve_power if method == "power" else _solve_gauss_seidel
        other = _solve_gauss_seidel if method == "power" else _solve_power
        pi, it = solve(offt, exit_rates, tol, max_iter)
        # the change-per-sweep criterion can be met before the residual is
        for _ in range(5):
            if it > 0 and _offt_residual(pi, offt, exit_rates) <= RESIDUAL_TOL:
                break
            if it < 0:
                log.info("%s did not converge in %d sweeps; switching solver", method, max_iter)
                pi, it = other(offt, exit_rates, tol, max_iter, x0=pi)
            else:
                tol /= 10.0
                pi, it = solve(offt, exit_rates, tol, max_iter, x0=pi)
    else:
        raise ValueError(f"unknown method {method!r}")
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    res = _offt_residual(pi, offt, exit_rates)
    if not np.isfinite(res) or res > RESIDUAL_TOL:
        raise CtmcError(f"stationary solve did not converge (residual {res:.3e})")
    return pi


def stationary_distribution(
    gen, method: str = "auto", tol: float = TOL_STAT, max_iter: int = MAX_ITER
) -> np.ndarray:
    """Stationary distribution of generator ``gen``: pi Q = 0, sum(pi) = 1.

    ``auto`` factorizes small chains directly and runs Gauss-Seidel sweeps
    on larger ones, falling back to uniformized power iteration.
    """
    gen = sp.csr_matrix(gen)
    exit_rates = -gen.diagonal()
    offt = (gen - sp.diags(gen.diagonal())).T.tocsr()
    offt.eliminate_zeros()
    return _stationary(offt, exit_rates, method, tol, max_iter)


def expected_queue_lengths(pi, space: StateSpace) -> np.ndarray:
    """Expected number of waiting (not in service) requests per route."""
    return np.asarray(pi) @ space.queue.astype(float)


def loss_probabilities(pi, space: StateSpace) -> np.ndarray:
    """Probability that an arrival finds its route's queue full."""
    return np.asarray(pi) @ (space.queue >= space.B).astype(float)


def hertel_factor(rho, v_a: float = 0.8, v_s: float = 0.3, servers: int = 1):
    """Hertel's gamma; the GI/GI queue length is L(M/M) / gamma."""
    rho = np.asarray(rho, dtype=float)
    c = (rho / servers) ** (1.0 - v_a**2) * (1.0 + v_a**2) - v_a**2
    denom = c * v_s**2 + v_a**2
    if np.any(denom <= 0):
        raise CtmcError(f"non-positive Hertel factor for rho={rho}, v_A={v_a}, v_S={v_s}")
    return 2.0 / denom


def hertel_scale(l_mm, rho, v_a: float = 0.8, v_s: float = 0.3, servers: int = 1):
    """Scale M/M queue lengths to GI/GI estimates."""
    if np.any(np.asarray(rho) <= 0):
        raise ValueError("occupation ratio must be positive")
    return np.asarray(l_mm, dtype=float) / hertel_factor(rho, v_a, v_s, servers)


def queue_limit(p_pt):
    """Acceptable expected queue length for a passenger share ``p_pt``."""
    p = np.asarray(p_pt, dtype=float)
    if np.any(np.isnan(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError(f"passenger share must lie in [0, 1], got {p_pt}")
    out = 0.479 * np.exp(-1.3 * p)
    return float(out) if out.ndim == 0 else out


@dataclass
class QueueReport:
    """Per-route queueing figures for one rate assignment (junction route order)."""

    arrival: np.ndarray
    service: np.ndarray
    rho: np.ndarray
    l_mm: np.ndarray
    l_gi: np.ndarray
    l_limit: np.ndarray
    c: np.ndarray
    loss: np.ndarray
    active: np.ndarray
    n_states: int

    @property
    def max_violation(self) -> float:
        return float(np.max(self.c))

    @property
    def feasible(self) -> bool:
        return bool(np.all(self.c <= 0))

    def to_dict(self) -> dict:
        def clean(a):
            return [float(v) if np.isfinite(v) else None for v in np.asarray(a, dtype=float)]

        return {
            "arrival": clean(self.arrival),
            "service": clean(self.service),
            "rho": clean(self.rho),
            "l_mm": clean(self.l_mm),
            "l_gi": clean(self.l_gi),
            "l_limit": clean(self.l_limit),
            "c": clean(self.c),
            "loss": clean(self.loss),
            "active": [bool(a) for a in self.active],
            "n_states": int(self.n_states),
        }

    @classmethod
    def from_dict(cls, data: dict) -> QueueReport:
        def arr(key):
            return np.array([np.nan if v is None else v for v in data[key]], dtype=float)

        return cls(
            arrival=arr("arrival"), service=arr("service"), rho=arr("rho"),
            l_mm=arr("l_mm"), l_gi=arr("l_gi"), l_limit=arr("l_limit"), c=arr("c"),
            loss=arr("loss"), active=np.array(data["active"], dtype=bool),
            n_states=int(data["n_states"]),
        )


@dataclass(frozen=True, eq=False)
class SolvedChain:
    params: QueueParams
    structure: ChainStructure
    pi: np.ndarray

    @property
    def space(self) -> StateSpace:
        return self.structure.space

    def generator(self) -> sp.csr_matrix:
        return build_generator(self.structure, self.params)


def solve_chain(
    params: QueueParams, method: str = "auto", cap: int = DEFAULT_STATE_CAP
) -> SolvedChain:
    st = chain_structure(params.conflicts, params.B, cap)
    offt, exit_rates = _transposed_generator(st, params)
    pi = _stationary(offt, exit_rates, method, TOL_STAT, MAX_ITER)
    return SolvedChain(params, st, pi)


def evaluate_constraints(
    junction: model.Junction,
    lam,
    B: int = 3,
    v_a: float = 0.8,
    v_s: float = 0.3,
    method: str = "auto",
    cap: int = DEFAULT_STATE_CAP,
    keep_chain: bool = False,
):
    """Constraint values c_r = L_r - L_limit,r for every route from a single chain solve.

    Routes without traffic stay out of the chain and report ``c_r = -L_limit,r``.
    Returns a :class:`QueueReport`, or ``(report, chain)`` with ``keep_chain``.
    """
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (junction.d,):
        raise ValueError(f"rate vector must have length {junction.d}, got shape {lam.shape}")
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ValueError("rates must be finite and non-negative")
    k = junction.k
    active = model.active_routes(junction, lam)
    lam_r = model.route_rates(junction, lam)
    mu_r = model.service_rates(junction, lam)
    rho = np.where(active, lam_r / np.where(active, mu_r, 1.0), 0.0)
    share = np.where(active, model.passenger_shares(junction, lam),
                     model.nominal_passenger_shares(junction))
    limit = np.asarray(queue_limit(share), dtype=float)
    l_mm = np.zeros(k)
    l_gi = np.zeros(k)
    loss = np.zeros(k)
    chain = None
    n_states = 1
    if active.any():
        params = QueueParams.from_junction(junction, lam, B)
        chain = solve_chain(params, method=method, cap=cap)
        idx = params.routes
        l_mm[idx] = expected_queue_lengths(chain.pi, chain.space)
        loss[idx] = loss_probabilities(chain.pi, chain.space)
        l_gi[idx] = hertel_scale(l_mm[idx], rho[idx], v_a, v_s)
        n_states = len(chain.space)
    report = QueueReport(
        arrival=lam_r, service=np.where(active, mu_r, np.nan), rho=rho, l_mm=l_mm,
        l_gi=l_gi, l_limit=limit, c=l_gi - limit, loss=loss, active=active,
        n_states=n_states,
    )
    return (report, chain) if keep_chain else report


def dump_chain(chain: SolvedChain, path) -> None:
    """Tab-separated dump: state code, serving flags, queue lengths, probability."""
    with open(path, "w") as fh:
        fh.write("# routes " + " ".join(str(int(r)) for r in chain.params.routes) + "\n")
        fh.write("code\tserving\tqueue\tprobability\n")
        sp_ = chain.space
        for code, s, q, p in zip(sp_.codes, sp_.serving, sp_.queue, chain.pi):
            flags = "".join("1" if x else "0" for x in s)
            fh.write(f"{code}\t{flags}\t{','.join(str(int(x)) for x in q)}\t{p:.17g}\n")
