"""Neighborhood graphs: the fractional weighted graph and the Δ-copy graph.

In both, a node receives one unit of in-mass from its nearest facilities,
itself first. Ties among equal distances go to the lower facility index
(and, for copies, the lower copy index).
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleError, InputError
from .model import tol

ROOM_EPS = 1e-12


def facility_order(ff: np.ndarray) -> np.ndarray:
    """Row i lists all facilities by distance from i, i itself first."""
    key = np.array(ff, dtype=float, copy=True)
    np.fill_diagonal(key, -1.0)
    return np.argsort(key, axis=1, kind="stable")


@dataclass
class WeightedNeighborhoodGraph:
    y: np.ndarray
    w: np.ndarray  # w[source, target]

    @property
    def nodes(self):
        return np.flatnonzero(self.y > 0)

    def in_edges(self, i):
        src = np.flatnonzero(self.w[:, i] > 0)
        return [(int(s), float(self.w[s, i])) for s in src]

    def out_edges(self, i):
        dst = np.flatnonzero(self.w[i] > 0)
        return [(int(t), float(self.w[i, t])) for t in dst]

    def edge_list(self):
        src, dst = np.nonzero(self.w)
        return [(int(s), int(t), float(self.w[s, t])) for s, t in zip(src, dst)]

    def check(self):
        y, w = self.y, self.w
        alive = y > 0
        indeg = w.sum(axis=0)
        if not np.allclose(indeg[alive], 1.0, rtol=0, atol=1e-9):
            raise AssertionError("in-mass is not one at every node")
        if np.any(w[:, ~alive] != 0) or np.any(w[~alive] != 0):
            raise AssertionError("edge touches a node with zero opening")
        if not np.allclose(np.diag(w)[alive], y[alive], rtol=0, atol=1e-12):
            raise AssertionError("self-loop weight differs from the opening")
        if np.any(w > y[:, None] + 1e-12):
            raise AssertionError("edge weight exceeds its source opening")
        return True


def build_weighted(yprime, ff, order=None) -> WeightedNeighborhoodGraph:
    """Each node with positive opening takes the nearest unit of mass as in-edges."""
    y = np.asarray(yprime, dtype=float)
    if np.any(y < 0) or np.any(y > 1 + 1e-12):
        raise InputError("openings must lie in [0, 1]")
    if y.sum() < 1 - tol(1):
        raise InfeasibleError("total opening is below 1")
    if order is None:
        order = facility_order(ff)
    ys = y[order]
    before = np.cumsum(ys, axis=1) - ys
    room = 1.0 - before
    room[room <= ROOM_EPS] = 0.0
    take = np.maximum(np.minimum(ys, room), 0.0)
    take[y <= 0] = 0.0
    wt = np.zeros_like(take)
    np.put_along_axis(wt, order, take, axis=1)
    return WeightedNeighborhoodGraph(y, wt.T.copy())


@dataclass
class CopySet:
    """Facility copies as parallel arrays sorted by (facility, copy index)."""

    fac: np.ndarray
    cid: np.ndarray
    delta: int
    next_cid: dict = field(default_factory=dict)

    def __post_init__(self):
        self.fac = np.asarray(self.fac, dtype=np.int64)
        self.cid = np.asarray(self.cid, dtype=np.int64)
        self._sort()
        for f, c in zip(self.fac.tolist(), self.cid.tolist()):
            self.next_cid[f] = max(self.next_cid.get(f, 0), c + 1)

    def _sort(self):
        o = np.lexsort((self.cid, self.fac))
        self.fac = self.fac[o]
        self.cid = self.cid[o]

    def __len__(self):
        return self.fac.size

    def counts(self, n_facilities):
        return np.bincount(self.fac, minlength=n_facilities)

    def labels(self):
        return [(int(f), int(c)) for f, c in zip(self.fac, self.cid)]

    def remove(self, mask):
        keep = ~np.asarray(mask, dtype=bool)
        self.fac = self.fac[keep]
        self.cid = self.cid[keep]

    def add_fresh(self, facilities):
        """Append Δ new copies of each facility; returns how many were added."""
        new_f, new_c = [], []
        for f in facilities:
            f = int(f)
            start = self.next_cid.get(f, 0)
            new_f.extend([f] * self.delta)
            new_c.extend(range(start, start + self.delta))
            self.next_cid[f] = start + self.delta
        if new_f:
            self.fac = np.concatenate([self.fac, new_f])
            self.cid = np.concatenate([self.cid, new_c])
            self._sort()
        return len(new_f)

    def copy(self):
        return CopySet(self.fac.copy(), self.cid.copy(), self.delta, dict(self.next_cid))


def build_copies(ydoubleprime, delta: int) -> CopySet:
    y = np.asarray(ydoubleprime, dtype=float)
    if int(delta) != delta or delta < 1:
        raise InputError("delta must be a positive integer")
    scaled = y * delta
    counts = np.rint(scaled).astype(np.int64)
    if np.any(np.abs(scaled - counts) > 1e-9) or np.any(counts < 0):
        raise InputError("opening vector is not 1/delta-integral")
    fac = np.repeat(np.arange(y.size), counts)
    cid = np.concatenate([np.arange(c) for c in counts]) if counts.sum() else np.zeros(0, int)
    return CopySet(fac, cid, int(delta))


@dataclass
class CopyNeighborhoodGraph:
    fac: np.ndarray
    cid: np.ndarray
    delta: int
    adj: np.ndarray  # adj[source, target], boolean
    inn: np.ndarray  # inn[target] = its Δ sources, nearest first

    @property
    def size(self):
        return self.fac.size

    @property
    def out_degree(self):
        return self.adj.sum(axis=1)

    @property
    def in_degree(self):
        return self.adj.sum(axis=0)

    def out_neighbors(self, v):
        return np.flatnonzero(self.adj[v])

    def in_neighbors(self, v):
        return self.inn[v]

    def imbalances(self):
        return (self.delta - self.out_degree) / self.delta

    def edge_list(self):
        src, dst = np.nonzero(self.adj)
        lab = lambda v: f"{self.fac[v]}:{self.cid[v]}"
        return [(lab(s), lab(t), 1.0) for s, t in zip(src, dst)]


def build_copy_graph(copies: CopySet, ff: np.ndarray) -> CopyNeighborhoodGraph:
    n, delta = len(copies), copies.delta
    if n < delta:
        raise InfeasibleError(f"{n} copies cannot supply {delta} in-edges each")
    key = ff[np.ix_(copies.fac, copies.fac)].copy()
    np.fill_diagonal(key, -1.0)
    # columns are already in (facility, copy) order, so a stable sort breaks ties correctly
    inn = np.argsort(key, axis=1, kind="stable")[:, :delta]
    adj = np.zeros((n, n), dtype=bool)
    adj[inn, np.arange(n)[:, None]] = True
    return CopyNeighborhoodGraph(copies.fac.copy(), copies.cid.copy(), delta, adj, inn)


def imbalance(g: CopyNeighborhoodGraph, i: int) -> float:
    return (g.delta - int(g.adj[i].sum())) / g.delta


@dataclass
class ImbalancePartition:
    plus: np.ndarray
    zero: np.ndarray
    minus: np.ndarray
    imb: np.ndarray
    A: float

    def check(self, delta):
        lhs = self.imb[self.plus].sum() / delta
        rhs = -self.imb[self.minus].sum() / delta
        if abs(lhs - rhs) > 1e-9 * max(1.0, lhs):
            raise AssertionError("positive and negative imbalance do not cancel")


def partition(g: CopyNeighborhoodGraph) -> ImbalancePartition:
    # integer arithmetic keeps the sign test exact
    raw = g.delta - g.out_degree
    imb = raw / g.delta
    plus = np.flatnonzero(raw > 0)
    minus = np.flatnonzero(raw < 0)
    zero = np.flatnonzero(raw == 0)
    return ImbalancePartition(plus, zero, minus, imb, float(imb[plus].sum() / g.delta))
