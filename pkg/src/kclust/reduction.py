"""From a solution opening k + c facilities to one opening exactly k.

``reduce_to_sparse`` removes facility balls around dense facilities so that
some output instance keeps the optimum and has no dense facility left;
``solve_sparse`` either drops cheap facilities greedily or guesses which
pseudo-solution facilities sit next to optimal ones. ``pseudo_to_true``
composes the two. ``brute_force_opt`` is the exact oracle for tiny inputs.
"""
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import InputError, SizeError
from .model import Instance, IntegralSolution, integral_cost

XI = 1.0 / 3.0
ENUM_LIMIT = 10 ** 6
STATE_LIMIT = 10 ** 5
CHUNK = 4096


def brute_force_opt(inst: Instance, k: Optional[int] = None) -> IntegralSolution:
    """Exact optimum over all k-subsets; ties go to the lexicographically first."""
    k = inst.k if k is None else int(k)
    nf = inst.n_facilities
    if math.comb(nf, k) > ENUM_LIMIT:
        raise SizeError(f"C({nf}, {k}) subsets exceed the enumeration limit {ENUM_LIMIT}")
    cf_p = inst.cf_p
    best_cost, best = np.inf, None
    combos = itertools.combinations(range(nf), k)
    while True:
        block = np.array(list(itertools.islice(combos, CHUNK)), dtype=np.int64)
        if block.size == 0:
            break
        cost = cf_p[block].min(axis=1).sum(axis=1)
        m = int(np.argmin(cost))
        if cost[m] < best_cost:
            best_cost, best = float(cost[m]), block[m]
    return integral_cost(inst, best)


def solution_cost(inst: Instance, open_set) -> float:
    idx = np.asarray(sorted(set(int(i) for i in open_set)), dtype=np.int64)
    if idx.size == 0:
        return np.inf
    return float(inst.cf_p[idx].min(axis=0).sum())


def fball(inst: Instance, i: int, r: float) -> np.ndarray:
    """Facilities strictly closer than r to facility i."""
    return np.flatnonzero(inst.ff[i] < r)


def cball(inst: Instance, i: int, r: float) -> np.ndarray:
    """Clients strictly closer than r to facility i."""
    return np.flatnonzero(inst.cf[i] < r)


def dist_to_set(inst: Instance, i: int, opt) -> float:
    opt = np.asarray(list(opt), dtype=np.int64)
    if opt.size == 0:
        raise InputError("the reference solution is empty")
    return float(inst.ff[i, opt].min())


def is_dense(i: int, A: float, opt, inst: Instance, xi: float = XI) -> bool:
    d = dist_to_set(inst, i, opt)
    count = cball(inst, i, xi * d).size
    return ((1 - xi) * d) ** inst.p * count > A


def is_sparse(inst: Instance, A: float, opt, xi: float = XI) -> bool:
    return not any(is_dense(i, A, opt, inst, xi) for i in range(inst.n_facilities))


@dataclass
class SubInstance:
    """An instance over a subset of the parent's facilities."""

    kept: tuple          # parent facility indices, ascending
    instance: Instance
    removed_by: tuple = ()  # one pair sequence that produces it

    def to_parent(self, opened):
        return tuple(sorted(self.kept[int(i)] for i in opened))

    def from_parent(self, opened):
        pos = {f: n for n, f in enumerate(self.kept)}
        if not all(int(i) in pos for i in opened):
            return None
        return tuple(sorted(pos[int(i)] for i in opened))


def reduce_to_sparse(inst: Instance, t: int, state_limit: int = STATE_LIMIT) -> List[SubInstance]:
    """All facility subsets reachable by removing up to t facility balls.

    A step picks a pair (i, i') with i still present and removes every
    facility strictly closer to i than i' is. Distinct subsets are kept once;
    those with fewer than k facilities cannot hold a k-solution and are
    dropped.
    """
    if t < 0:
        raise InputError("t must be nonnegative")
    nf = inst.n_facilities
    ff = inst.ff
    full = frozenset(range(nf))
    seen = {full: ()}
    frontier = [full]
    for _ in range(min(int(t), nf)):
        nxt = []
        for cur in frontier:
            for i in sorted(cur):
                for j in range(nf):
                    r = ff[i, j]
                    if j == i or r <= 0:
                        continue
                    new = cur - frozenset(np.flatnonzero(ff[i] < r).tolist())
                    if new not in seen:
                        seen[new] = seen[cur] + ((i, j),)
                        nxt.append(new)
                        if len(seen) > state_limit:
                            raise SizeError(
                                f"more than {state_limit} reduced instances; use a smaller t")
        frontier = nxt
        if not frontier:
            break
    out = []
    for kept, seq in sorted(seen.items(), key=lambda kv: (-len(kv[0]), sorted(kv[0]))):
        if len(kept) < inst.k:
            continue
        kept = tuple(sorted(kept))
        out.append(SubInstance(kept, inst.with_facilities(list(kept)), seq))
    return out


def sparse_witnesses(subs: Sequence[SubInstance], inst: Instance, opt, opt_cost: float, t: int):
    """Outputs that contain OPT and are (opt/t)-sparse with respect to it."""
    A = opt_cost / t if t > 0 else np.inf
    good = []
    for s in subs:
        local = s.from_parent(opt)
        if local is None:
            continue
        if is_sparse(s.instance, A, local):
            good.append(s)
    return good


@dataclass
class ReductionConfig:
    delta: float
    t: int
    c: int
    A: float
    xi: float = XI
    theoretical: bool = False
    notes: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.delta < 1 / 6:
            raise InputError("delta must lie in (0, 1/6)")
        if self.t < 1:
            raise InputError("t must be a positive integer")
        if self.c < 0:
            raise InputError("c must be nonnegative")

    def blowup(self, p):
        return (2 / (self.delta * self.xi)) ** p

    def B(self, cost_T, p):
        return 2 * (self.A + cost_T / self.t) * self.blowup(p)

    def check_t(self, p):
        if self.theoretical and self.t < 2 * self.c * self.blowup(p):
            raise InputError("t is below 2c(2/(delta xi))^p")


@dataclass
class PseudoSolution:
    open: tuple
    cost: float

    @classmethod
    def of(cls, inst: Instance, opened):
        opened = tuple(sorted(set(int(i) for i in opened)))
        return cls(opened, solution_cost(inst, opened))

    def surplus(self, k):
        return len(self.open) - k


@dataclass
class SparseTrace:
    dropped: List[int]
    after_drop: tuple
    enumerated: int
    best_dv: Optional[tuple]
    B: float


def greedy_drop(inst: Instance, T: Sequence[int], B: float):
    """Drop the cheapest facility while |T'| > k and the drop costs at most B."""
    cur = list(sorted(T))
    cost = solution_cost(inst, cur)
    dropped = []
    while len(cur) > inst.k:
        trial = [solution_cost(inst, cur[:n] + cur[n + 1:]) for n in range(len(cur))]
        n = int(np.argmin(trial))
        if trial[n] > cost + B:
            break
        dropped.append(cur.pop(n))
        cost = trial[n]
    return cur, dropped


def snap_to_pseudo(inst: Instance, D, V, Tp, delta, xi=XI):
    """S_{D,V}: V plus, for each i in D, the best facility near i."""
    cf_p = inst.cf_p
    ff = inst.ff
    V = list(V)
    dV = cf_p[V].min(axis=0) if V else np.full(inst.n_clients, np.inf)
    chosen = []
    for i in D:
        others = [u for u in Tp if u != i]
        L = float(ff[i, others].min())
        cand = np.flatnonzero(ff[i] < delta * L)
        if cand.size == 0:
            chosen.append(int(i))
            continue
        near = np.flatnonzero(inst.cf[i] < xi * L)
        if near.size == 0:
            # nothing to serve nearby; the lowest-index candidate is as good as any
            chosen.append(int(cand.min()))
            continue
        score = np.minimum(cf_p[np.ix_(cand, near)], dV[near][None, :]).sum(axis=1)
        chosen.append(int(cand[int(np.argmin(score))]))
    return tuple(sorted(set(V) | set(chosen)))


def solve_sparse(inst: Instance, T, cfg: ReductionConfig, enum_limit: int = ENUM_LIMIT):
    """Turn a pseudo-solution (|T| >= k) into a k-solution.

    Returns (IntegralSolution, SparseTrace).
    """
    T = tuple(sorted(set(int(i) for i in T)))
    k, nf = inst.k, inst.n_facilities
    if len(T) < k:
        raise InputError(f"pseudo-solution has {len(T)} < k = {k} facilities")
    cfg.check_t(inst.p)
    B = cfg.B(solution_cost(inst, T), inst.p)
    Tp, dropped = greedy_drop(inst, T, B)
    if len(Tp) == k:
        return integral_cost(inst, Tp), SparseTrace(dropped, tuple(Tp), 0, None, B)
    sizes = [d for d in range(0, k + 1) if k - d < cfg.t and d <= len(Tp)]
    total = sum(math.comb(len(Tp), d) * math.comb(nf, k - d) for d in sizes)
    if total > enum_limit:
        raise SizeError(f"{total} (D, V) pairs exceed the enumeration limit {enum_limit}")
    best_cost, best, best_dv = np.inf, None, None
    for d in sizes:
        for D in itertools.combinations(Tp, d):
            for V in itertools.combinations(range(nf), k - d):
                S = snap_to_pseudo(inst, D, V, Tp, cfg.delta, cfg.xi)
                c = solution_cost(inst, S)
                if c < best_cost:
                    best_cost, best, best_dv = c, S, (D, V)
    return integral_cost(inst, best), SparseTrace(dropped, tuple(Tp), total, best_dv, B)


def sparse_cost_bound(cost_T, c, B, opt, delta, p, xi=XI):
    """max(cost(T) + cB, ((xi+delta)/(xi-delta))^p opt)."""
    return max(cost_T + c * B, ((xi + delta) / (xi - delta)) ** p * opt)


def delta_for(alpha, p, xi=XI, cap=1 / 6):
    """Largest delta with ((xi+delta)/(xi-delta))^p <= alpha, kept below 1/6."""
    r = float(alpha) ** (1.0 / p)
    d = xi * (r - 1) / (r + 1)
    return min(d, cap * (1 - 1e-9))


def t_for(alpha, eps, c, p, delta, xi=XI):
    return max(1, math.ceil((2 / (delta * xi)) ** p * 4 * alpha * c / eps))


@dataclass
class ConversionReport:
    delta: float
    t: int
    c: int
    A: float
    a_source: str
    candidates: int
    solved: int
    skipped: int
    best_kept: Optional[tuple]


def pseudo_to_true(inst: Instance, T, alpha: float, eps: float, *, opt: Optional[float] = None,
                   lower_bound: Optional[float] = None,
                   pseudo_solver: Optional[Callable[[Instance], Sequence[int]]] = None,
                   state_limit: int = STATE_LIMIT, enum_limit: int = ENUM_LIMIT):
    """Combine the sparse reduction and the sparse solver.

    ``opt`` (exact optimum) sets A = opt/t; otherwise ``lower_bound`` (for
    example the LP value) is used. For reduced instances that do not contain
    T, ``pseudo_solver`` (if given) supplies a pseudo-solution on the reduced
    instance; without it those instances are skipped.
    Returns (IntegralSolution, ConversionReport).
    """
    T = tuple(sorted(set(int(i) for i in T)))
    k = inst.k
    if len(T) < k:
        raise InputError(f"pseudo-solution has {len(T)} < k = {k} facilities")
    c = len(T) - k
    delta = delta_for(alpha, inst.p)
    if c == 0:
        return integral_cost(inst, T), ConversionReport(delta, 0, 0, 0.0, "none", 0, 0, 0, None)
    t = t_for(alpha, eps, c, inst.p, delta)
    if opt is not None:
        A, src = opt / t, "oracle"
    elif lower_bound is not None:
        A, src = lower_bound / t, "lower-bound"
    else:
        raise InputError("either opt or lower_bound is required")
    subs = reduce_to_sparse(inst, t, state_limit)
    best, best_cost, best_kept = None, np.inf, None
    solved = skipped = 0
    for s in subs:
        local = s.from_parent(T)
        if local is None:
            if pseudo_solver is None:
                skipped += 1
                continue
            local = tuple(sorted(set(int(i) for i in pseudo_solver(s.instance))))
        if len(local) <= k:
            sol_local = local
        else:
            cfg = ReductionConfig(delta, t, len(local) - k, A)
            sol, _ = solve_sparse(s.instance, local, cfg, enum_limit)
            sol_local = sol.open
        solved += 1
        opened = s.to_parent(sol_local)
        cost = solution_cost(inst, opened)
        if cost < best_cost:
            best, best_cost, best_kept = opened, cost, s.kept
    rep = ConversionReport(delta, t, c, A, src, len(subs), solved, skipped, best_kept)
    return integral_cost(inst, best), rep
