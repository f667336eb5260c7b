"""Iterative randomized rounding with the LMP guarantee, plus its checks.

``lmp_round`` repeatedly picks a facility with probability proportional to
its current opening, closes each of its out-neighbors with probability
w/y', and opens the picked facility fully. ``potential_f`` and
``one_step_potential_check`` evaluate the per-client potential used to bound
the connection cost, and ``verify_eq1`` / ``verify_euclid_pair`` check the
inequalities that certify a given factor alpha.
"""
import itertools
import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import InputError, SizeError
from .nbrgraph import WeightedNeighborhoodGraph, build_weighted, facility_order

SNAP = 1e-12
NAIVE_CAP = 10 ** 6


def snap(y):
    y = np.array(y, dtype=float, copy=True)
    y[np.abs(y) <= SNAP] = 0.0
    y[np.abs(y - 1.0) <= SNAP] = 1.0
    return y


def fractional_mask(y):
    return (y > 0) & (y < 1)


@dataclass
class LmpRun:
    y: np.ndarray
    open: tuple
    iterations: int
    attempts: int
    trace: List[dict] = field(default_factory=list)
    happy_facility: Optional[np.ndarray] = None
    happy_cost: Optional[np.ndarray] = None
    nearest_cost: Optional[np.ndarray] = None
    capped: bool = False

    @property
    def client_cost(self):
        """Happy-connection cost, falling back to the nearest open facility."""
        if self.happy_cost is None:
            return None
        return np.where(np.isnan(self.happy_cost), self.nearest_cost, self.happy_cost)

    def dump_trace(self, fh):
        for rec in self.trace:
            fh.write(json.dumps(rec) + "\n")


def lmp_round(y, ff, rng, *, cf=None, fsets=None, p=1.0, order=None, naive=False,
              trace=False, check_drift=False, cap=NAIVE_CAP) -> LmpRun:
    """Round ``y`` to an integral opening.

    ``cf`` (facility-by-client distances) and ``fsets`` (boolean F_j
    membership, same shape) enable per-client happy-connection records.
    With ``naive`` set every draw counts as an iteration, up to ``cap``.
    """
    yp = snap(y)
    if np.any(yp < 0) or np.any(yp > 1):
        raise InputError("openings must lie in [0, 1]")
    if order is None:
        order = facility_order(ff)
    track = cf is not None and fsets is not None
    if track:
        n_clients = cf.shape[1]
        happy_fac = np.full(n_clients, -1)
        happy_cost = np.full(n_clients, np.nan)
        cf_p = cf ** p
    records = []
    iterations = attempts = 0
    capped = False
    while True:
        frac = fractional_mask(yp)
        if not frac.any():
            break
        g = build_weighted(yp, ff, order)
        w = g.w
        if check_drift:
            drift = expected_drift(g, yp)
            if abs(drift) > 1e-9:
                raise AssertionError(f"nonzero drift {drift}")
        if naive:
            cand = yp > 0
        else:
            integral = yp == 1
            reach = np.zeros_like(frac)
            reach[integral] = (w[np.ix_(integral, frac)] > 0).any(axis=1)
            cand = frac | reach
        idx = np.flatnonzero(cand)
        cum = np.cumsum(yp[idx])
        while True:
            attempts += 1
            chosen = int(idx[min(np.searchsorted(cum, rng.random() * cum[-1], side="right"), idx.size - 1)])
            targets = np.flatnonzero(w[chosen] > 0)
            targets = targets[targets != chosen]
            u = rng.random(targets.size)
            removed = targets[u < w[chosen, targets] / yp[chosen]]
            useful = frac[chosen] or removed.size > 0
            if useful or naive:
                break
        iterations += 1
        if track:
            hit = fsets[chosen] & (happy_fac < 0)
            happy_fac[hit] = chosen
            happy_cost[hit] = cf_p[chosen, hit]
        yp[removed] = 0.0
        yp[chosen] = 1.0
        if trace:
            records.append({"chosen": chosen, "removed": removed.tolist(), "y": yp.tolist()})
        if naive and iterations >= cap:
            capped = True
            break
    opened = tuple(int(i) for i in np.flatnonzero(yp == 1))
    run = LmpRun(np.asarray(y, dtype=float), opened, iterations, attempts, records, capped=capped)
    if track:
        nearest = cf[list(opened)].min(axis=0) ** p if opened else np.full(n_clients, np.inf)
        run.happy_facility = happy_fac
        run.happy_cost = happy_cost
        run.nearest_cost = nearest
    return run


def expected_drift(g: WeightedNeighborhoodGraph, yprime) -> float:
    """Expected change of |y'|_1 in one iteration of the naive process."""
    y = np.asarray(yprime, dtype=float)
    total = y.sum()
    acc = 0.0
    for src in np.flatnonzero(y > 0):
        out = g.w[src]
        acc += y[src] * ((out / y[src]) @ y - 1.0)
    return acc / total


@dataclass
class ClientState:
    S: tuple
    b: float


def potential_f(S, b, y, dist, alpha, p) -> float:
    """alpha * sum_S y_i d_i^p + (1 - y(S)) b^p, with 0 * inf = 0."""
    S = np.asarray(list(S), dtype=np.int64)
    y = np.asarray(y, dtype=float)
    dist = np.asarray(dist, dtype=float)
    ys = y[S].sum() if S.size else 0.0
    inside = alpha * float((y[S] * dist[S] ** p).sum()) if S.size else 0.0
    rest = 1.0 - ys
    if rest <= SNAP:
        return inside
    return inside + rest * float(b) ** p


def one_step_potential_check(state: ClientState, g: WeightedNeighborhoodGraph, yprime,
                             alpha, p, dist, max_facilities=8):
    """Exact expectation over one naive iteration versus the current potential.

    ``dist`` holds d(j, i) for every facility. A pick inside S connects j at
    d_i^p; any other pick opens it (so b' = min(b, d_i')) and closes members
    of S by independent coins.
    """
    y = np.asarray(yprime, dtype=float)
    if y.size > max_facilities:
        raise SizeError(f"{y.size} facilities exceed the enumeration limit {max_facilities}")
    dist = np.asarray(dist, dtype=float)
    S = tuple(sorted(int(i) for i in state.S))
    if any(y[i] <= 0 for i in S):
        raise InputError("S may only contain alive facilities")
    total = y.sum()
    lhs = 0.0
    for pick in np.flatnonzero(y > 0):
        pr = y[pick] / total
        if pick in S:
            lhs += pr * dist[pick] ** p
            continue
        b_next = min(state.b, dist[pick])
        hit = [i for i in S if g.w[pick, i] > 0]
        q = [g.w[pick, i] / y[pick] for i in hit]
        for coins in itertools.product((False, True), repeat=len(hit)):
            prob = 1.0
            gone = set()
            for i, qi, c in zip(hit, q, coins):
                prob *= qi if c else 1.0 - qi
                if c:
                    gone.add(i)
            if prob == 0.0:
                continue
            rest = [i for i in S if i not in gone]
            lhs += pr * prob * potential_f(rest, b_next, y, dist, alpha, p)
    rhs = potential_f(S, state.b, y, dist, alpha, p)
    return lhs, rhs


def eq1_sides(d_client, d_fac, y, p, alpha):
    """Both sides of the per-client certificate inequality."""
    dj = np.asarray(d_client, dtype=float)
    dd = np.asarray(d_fac, dtype=float)
    y = np.asarray(y, dtype=float)
    term = np.maximum(alpha * dj[:, None] ** p, (dj[:, None] + dd) ** p)
    lhs = float(y @ term @ y)
    rhs = float((2 * alpha - 1) * y.sum() * (y * dj ** p).sum())
    return lhs, rhs


def verify_eq1(d_client, d_fac, y, p, alpha, rel=1e-9) -> bool:
    lhs, rhs = eq1_sides(d_client, d_fac, y, p, alpha)
    return lhs <= rhs + rel * max(abs(lhs), abs(rhs))


def pair_diff(vi, vk, alpha, relaxed):
    di2 = float(vi @ vi)
    dk2 = float(vk @ vk)
    gap2 = max(di2 + dk2 - 2.0 * float(vi @ vk), 0.0)
    if relaxed:
        reach = 2 * di2 + 2 * gap2
    else:
        reach = (np.sqrt(di2) + np.sqrt(gap2)) ** 2
    return max(alpha * di2, reach) - (alpha - 0.5) * (di2 + dk2)


def euclid_pair_sides(vi, vk, alpha, relaxed=None):
    vi = np.asarray(vi, dtype=float)
    vk = np.asarray(vk, dtype=float)
    if relaxed is None:
        relaxed = alpha == 4
    lhs = pair_diff(vi, vk, alpha, relaxed) + pair_diff(vk, vi, alpha, relaxed)
    rhs = -2.0 * (alpha - 1.0) * float(vi @ vk)
    return lhs, rhs


def verify_euclid_pair(vi, vk, alpha, relaxed=None, rel=1e-9) -> bool:
    """Pairwise bound diff(i,k) + diff(k,i) <= -2(alpha-1)<v_i, v_k>, client at 0.

    alpha = 4 uses the (a+b)^2 <= 2a^2 + 2b^2 relaxation; other values use
    the exact diff.
    """
    lhs, rhs = euclid_pair_sides(vi, vk, alpha, relaxed)
    scale = float(np.dot(vi, vi) + np.dot(vk, vk))
    return lhs <= rhs + rel * max(scale, 1e-300)


def alpha_general(p):
    return (3.0 ** p + 1.0) / 2.0
