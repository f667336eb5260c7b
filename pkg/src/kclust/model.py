"""Instances, metrics, solutions and the cost functions shared by every stage."""
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InfeasibleError, InputError, ValidationError

TOL = 1e-9
DENSE_LIMIT = 4096


def tol(*operands):
    """Absolute tolerance scaled by the largest operand."""
    scale = max([1.0] + [abs(float(v)) for v in operands if np.isfinite(v)])
    return TOL * scale


def leq(a, b):
    return a <= b + tol(a, b)


class MetricSpace:
    """Finite metric given by Euclidean coordinates or an explicit matrix.

    Distances are served from a dense cache when the point count is at most
    ``DENSE_LIMIT`` and computed block by block otherwise.
    """

    def __init__(self, kind: str, coords=None, matrix=None, validate: bool = True):
        if kind == "euclidean":
            if coords is None:
                raise InputError("euclidean metric needs coordinates")
            coords = np.asarray(coords, dtype=float)
            if coords.ndim != 2 or not np.all(np.isfinite(coords)):
                raise InputError("coordinates must be a finite 2-d array")
            self.coords = coords
            self.n = coords.shape[0]
            self.dim = coords.shape[1]
        elif kind == "matrix":
            if matrix is None:
                raise InputError("matrix metric needs a distance matrix")
            matrix = np.asarray(matrix, dtype=float)
            if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
                raise InputError("distance matrix must be square")
            self.coords = None
            self.n = matrix.shape[0]
            self.dim = None
            if validate:
                _validate_matrix(matrix)
        else:
            raise InputError(f"unknown metric kind {kind!r}")
        self.kind = kind
        self._matrix = matrix if kind == "matrix" else None
        self._dense = None

    @property
    def dense(self):
        if self._matrix is not None:
            return self._matrix
        if self.n > DENSE_LIMIT:
            return None
        if self._dense is None:
            self._dense = cdist(self.coords, self.coords)
        return self._dense

    def _check(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            raise InputError(f"point index out of range [0, {self.n})")
        return idx

    def pairwise(self, a, b):
        a = self._check(a)
        b = self._check(b)
        full = self.dense
        if full is not None:
            return full[np.ix_(a, b)]
        return cdist(self.coords[a], self.coords[b])

    def d(self, a, b):
        return float(self.pairwise([a], [b])[0, 0])


def _validate_matrix(m):
    if not np.all(np.isfinite(m)) or np.any(m < 0):
        raise InputError("distances must be finite and nonnegative")
    if np.any(np.diag(m) != 0):
        raise InputError("distance matrix must have a zero diagonal")
    if not np.allclose(m, m.T, rtol=0, atol=TOL * max(1.0, m.max(initial=0.0))):
        raise InputError("distance matrix must be symmetric")
    slack = TOL * max(1.0, m.max(initial=0.0))
    for b in range(m.shape[0]):
        via = m[:, b][:, None] + m[b, :][None, :]
        bad = np.argwhere(m > via + slack)
        if bad.size:
            a, c = bad[0]
            raise InputError(f"triangle inequality fails for points ({a}, {b}, {c})")


class Instance:
    """Clients and facilities as point indices into a metric, plus k and p.

    Facility indices may repeat a point; repeated points are at distance 0,
    which is how split facilities are represented.
    """

    def __init__(self, metric: MetricSpace, clients, facilities, k: int, p: float):
        self.metric = metric
        self.clients = metric._check(clients)
        self.facilities = metric._check(facilities)
        if self.clients.size == 0 or self.facilities.size == 0:
            raise InputError("clients and facilities must be nonempty")
        if int(k) != k or k < 1:
            raise InputError("k must be a positive integer")
        if k > self.facilities.size:
            raise InputError("k exceeds the number of facilities")
        if not p >= 1:
            raise InputError("p must be at least 1")
        self.k = int(k)
        self.p = float(p)

    @property
    def n_clients(self):
        return self.clients.size

    @property
    def n_facilities(self):
        return self.facilities.size

    @cached_property
    def cf(self):
        """Facility-by-client distances."""
        return self.metric.pairwise(self.facilities, self.clients)

    @cached_property
    def cf_p(self):
        return self.cf ** self.p

    @cached_property
    def ff(self):
        return self.metric.pairwise(self.facilities, self.facilities)

    @cached_property
    def cc(self):
        return self.metric.pairwise(self.clients, self.clients)

    def with_facilities(self, positions, k=None):
        """Instance over a sub-list (or repetition) of this instance's facilities."""
        positions = np.asarray(positions, dtype=np.int64)
        kk = self.k if k is None else k
        kk = min(kk, positions.size)
        return Instance(self.metric, self.clients, self.facilities[positions], kk, self.p)

    def with_k(self, k):
        return Instance(self.metric, self.clients, self.facilities, k, self.p)

    def to_dict(self):
        m = self.metric
        if m.kind == "euclidean":
            metric = {
                "kind": "euclidean",
                "dim": m.dim,
                "clients": m.coords[self.clients].tolist(),
                "facilities": m.coords[self.facilities].tolist(),
            }
        else:
            metric = {
                "kind": "matrix",
                "clients": self.clients.tolist(),
                "facilities": self.facilities.tolist(),
                "matrix": m._matrix.tolist(),
            }
        return {"p": self.p, "k": self.k, "metric": metric}

    @classmethod
    def from_dict(cls, data):
        try:
            return cls._from_dict(data)
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed instance: {exc}") from exc

    @classmethod
    def _from_dict(cls, data):
        _only(data, {"p", "k", "metric"}, "instance")
        metric = data["metric"]
        if not isinstance(metric, dict):
            raise InputError("metric must be an object")
        kind = metric.get("kind")
        if kind == "euclidean":
            _only(metric, {"kind", "dim", "clients", "facilities"}, "metric")
            cl = np.asarray(metric["clients"], dtype=float)
            fa = np.asarray(metric["facilities"], dtype=float)
            if cl.ndim != 2 or fa.ndim != 2 or cl.shape[1] != fa.shape[1]:
                raise InputError("client and facility coordinates must share a dimension")
            if "dim" in metric and metric["dim"] != cl.shape[1]:
                raise InputError("declared dim does not match coordinates")
            space = MetricSpace("euclidean", coords=np.vstack([cl, fa]))
            clients = np.arange(cl.shape[0])
            facilities = np.arange(cl.shape[0], cl.shape[0] + fa.shape[0])
        elif kind == "matrix":
            _only(metric, {"kind", "clients", "facilities", "matrix"}, "metric")
            space = MetricSpace("matrix", matrix=metric["matrix"])
            clients = metric["clients"]
            facilities = metric["facilities"]
        else:
            raise InputError(f"unknown metric kind {kind!r}")
        return cls(space, clients, facilities, data["k"], data["p"])

    def dumps(self):
        return json.dumps(self.to_dict())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


def _only(obj, allowed, what):
    if not isinstance(obj, dict):
        raise InputError(f"{what} must be an object")
    missing = {"p", "k", "metric"} - set(obj) if what == "instance" else set()
    if missing:
        raise InputError(f"{what} is missing fields {sorted(missing)}")
    extra = set(obj) - allowed
    if extra:
        raise InputError(f"{what} has unknown fields {sorted(extra)}")


def power_distance(metric: MetricSpace, a: int, b: int, p: float) -> float:
    if not p >= 1:
        raise InputError("p must be at least 1")
    return metric.d(a, b) ** p


@dataclass
class FractionalSolution:
    """Opening vector ``y`` over facilities and a dense assignment ``x[i, j]``."""

    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.x = np.asarray(self.x, dtype=float)

    def validate(self, k=None):
        y, x = self.y, self.x
        if x.ndim != 2 or x.shape[0] != y.size:
            raise ValidationError("x must have one row per facility")
        if np.any(y < -TOL) or np.any(y > 1 + TOL):
            raise ValidationError("constraint 0 <= y_i <= 1 violated")
        if np.any(x < -TOL):
            raise ValidationError("constraint x_ij >= 0 violated")
        rows = x.sum(axis=0)
        bad = np.flatnonzero(np.abs(rows - 1) > TOL * max(1, x.shape[0]))
        if bad.size:
            raise ValidationError(f"constraint sum_i x_ij = 1 violated for client {bad[0]}")
        over = np.argwhere(x > y[:, None] + TOL)
        if over.size:
            i, j = over[0]
            raise ValidationError(f"constraint x_ij <= y_i violated at ({i}, {j})")
        if k is not None and y.sum() > k + TOL * max(1, y.size):
            raise ValidationError("constraint sum_i y_i <= k violated")
        return self

    def items(self):
        for i, j in zip(*np.nonzero(self.x)):
            yield int(i), int(j), float(self.x[i, j])

    def to_dict(self, inst=None):
        out = {"y": self.y.tolist(), "x": [[i, j, v] for i, j, v in self.items()]}
        if inst is not None:
            out["objective"] = fractional_cost(inst, self)
        return out

    @classmethod
    def from_dict(cls, data, n_clients):
        y = np.asarray(data["y"], dtype=float)
        x = np.zeros((y.size, n_clients))
        for i, j, v in data["x"]:
            x[int(i), int(j)] = v
        return cls(y, x)


@dataclass
class IntegralSolution:
    open: tuple
    assignment: np.ndarray
    total_cost: float
    distances: Optional[np.ndarray] = field(default=None, repr=False)


def nearest_fill(d: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Greedy nearest-one-unit assignment for every column of ``d``.

    ``d`` is facility-by-client. Facilities are taken by ascending distance,
    ties by index, until a unit of ``y`` mass is collected; the last one
    taken may be used partially.
    """
    y = np.asarray(y, dtype=float)
    if y.sum() < 1 - tol(1):
        raise InfeasibleError(f"total opening {y.sum():.12g} is below 1")
    order = np.argsort(d, axis=0, kind="stable")
    ys = y[order]
    before = np.cumsum(ys, axis=0) - ys
    room = 1.0 - before
    room[room <= 1e-12] = 0.0
    take = np.minimum(ys, room)
    take = np.maximum(take, 0.0)
    x = np.empty_like(take)
    np.put_along_axis(x, order, take, axis=0)
    # close any residual rounding gap on the last facility used
    gap = 1.0 - x.sum(axis=0)
    if np.any(np.abs(gap) > 1e-12):
        last = np.argmax(np.where(take > 0, np.arange(take.shape[0])[:, None], -1), axis=0)
        cols = np.arange(x.shape[1])
        x[order[last, cols], cols] += gap
    return x


def fractional_cost(inst: Instance, sol: FractionalSolution) -> float:
    sol.validate()
    return float((inst.cf_p * sol.x).sum())


def client_costs(inst: Instance, sol: FractionalSolution) -> np.ndarray:
    return (inst.cf_p * sol.x).sum(axis=0)


def costs_under_opening(inst: Instance, ybar) -> np.ndarray:
    """cost_ybar(j) for every client."""
    x = nearest_fill(inst.cf, ybar)
    return (inst.cf_p * x).sum(axis=0)


def cost_under_opening(inst: Instance, j: int, ybar) -> float:
    if not 0 <= j < inst.n_clients:
        raise InputError(f"client {j} out of range")
    x = nearest_fill(inst.cf[:, [j]], ybar)
    return float((inst.cf_p[:, [j]] * x).sum())


def integral_cost(inst: Instance, open_set: Sequence[int]) -> IntegralSolution:
    opened = np.unique(np.asarray(list(open_set), dtype=np.int64))
    if opened.size == 0:
        raise InputError("open set is empty")
    if opened.min() < 0 or opened.max() >= inst.n_facilities:
        raise InputError("open facility index out of range")
    sub = inst.cf[opened]
    best = np.argmin(sub, axis=0)  # first minimum = lowest facility index
    dist = sub[best, np.arange(inst.n_clients)]
    return IntegralSolution(
        open=tuple(int(i) for i in opened),
        assignment=opened[best],
        total_cost=float((dist ** inst.p).sum()),
        distances=dist,
    )


def mass_weights(inst: Instance, y) -> np.ndarray:
    """Per-client weights of the nearest unit of ``y`` mass (facility-by-client)."""
    return nearest_fill(inst.cf, y)


def d_av(inst: Instance, sol: FractionalSolution, j: Optional[int] = None):
    w = mass_weights(inst, sol.y)
    vals = (w * inst.cf).sum(axis=0)
    return vals if j is None else float(vals[j])


def d_max(inst: Instance, sol: FractionalSolution, j: Optional[int] = None):
    w = mass_weights(inst, sol.y)
    vals = np.where(w > 0, inst.cf, -np.inf).max(axis=0)
    return vals if j is None else float(vals[j])
