"""The standard LP relaxation, nearest-mass sets and facility splitting."""
from dataclasses import dataclass
from typing import List

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .errors import InfeasibleError, SolverError
from .model import FractionalSolution, Instance, fractional_cost, nearest_fill, tol

LEVEL_TOL = 1e-12


def solve_relaxation(inst: Instance, accuracy: float = 1e-7) -> FractionalSolution:
    """Solve min sum d^p x  s.t. sum y <= k, sum_i x_ij = 1, x_ij <= y_i.

    HiGHS does the solve; the result is then repaired so every constraint
    holds to machine precision (see ``repair``).
    """
    nf, nc = inst.n_facilities, inst.n_clients
    nx = nf * nc
    c = np.concatenate([np.zeros(nf), inst.cf_p.ravel()])

    # x is stored row-major: x[i, j] -> nf + i*nc + j
    rows = np.arange(nx)
    link = sp.hstack([
        -sp.csr_matrix((np.ones(nx), (rows, np.repeat(np.arange(nf), nc))), shape=(nx, nf)),
        sp.identity(nx, format="csr"),
    ])
    budget = sp.csr_matrix(np.concatenate([np.ones(nf), np.zeros(nx)])[None, :])
    a_ub = sp.vstack([budget, link]).tocsr()
    b_ub = np.concatenate([[inst.k], np.zeros(nx)])
    cover = sp.hstack([
        sp.csr_matrix((nc, nf)),
        sp.csr_matrix((np.ones(nx), (np.tile(np.arange(nc), nf), rows)), shape=(nc, nx)),
    ]).tocsr()
    opts = {
        "primal_feasibility_tolerance": min(1e-9, accuracy),
        "dual_feasibility_tolerance": min(1e-9, accuracy),
    }
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=cover, b_eq=np.ones(nc),
                  bounds=(0, 1), method="highs", options=opts)
    if res.status != 0:
        raise SolverError(
            f"LP solve failed: {res.message}",
            iterations=getattr(res, "nit", None),
            residuals={
                "eq": None if res.con is None else float(np.abs(res.con).max(initial=0)),
                "ub": None if res.slack is None else float(-np.minimum(res.slack, 0).min(initial=0)),
            },
        )
    sol = repair(inst, res.x[:nf])
    # repair can only lower the objective for a fixed y; a rise means trouble
    got = fractional_cost(inst, sol)
    if got > res.fun + max(accuracy * abs(res.fun), tol(res.fun) * 100):
        raise SolverError(f"repaired objective {got} exceeds solver objective {res.fun}",
                          iterations=res.nit)
    return sol


def repair(inst: Instance, y) -> FractionalSolution:
    """Project ``y`` onto the budget box and assign each client greedily.

    For fixed y the greedy nearest-unit assignment is optimal, so this never
    raises the objective and leaves every constraint exact.
    """
    y = np.clip(np.asarray(y, dtype=float), 0.0, 1.0) + 0.0  # no negative zeros
    total = y.sum()
    if total > inst.k:
        y = y * (inst.k / total)
    if y.sum() < 1:
        if y.sum() <= 0:
            raise InfeasibleError("LP returned an empty opening vector")
        y = np.minimum(y / y.sum(), 1.0)
    return FractionalSolution(y, nearest_fill(inst.cf, y))


@dataclass
class SplitMap:
    """Where each split facility came from and its share of the original y."""

    original: np.ndarray
    share: np.ndarray

    def expand(self, inst: Instance) -> Instance:
        return inst.with_facilities(self.original)

    def to_original(self, opened):
        return tuple(sorted({int(self.original[i]) for i in opened}))

    def check(self, y):
        total = np.bincount(self.original, weights=self.share, minlength=len(y))
        if not np.allclose(total, y, rtol=0, atol=LEVEL_TOL * 10):
            raise AssertionError("split shares do not sum to the original opening")


def split_for_all_or_nothing(sol: FractionalSolution, inst: Instance):
    """Split facilities so every x_ij is either 0 or the (split) y_i.

    Facility i is cut at each distinct level of x_{i,.}; client j with
    x_ij at level s is served fully by the first s pieces.
    """
    y, x = sol.y, sol.x
    original, share, cols = [], [], []
    for i in range(y.size):
        used = x[i][x[i] > LEVEL_TOL]
        levels = np.unique(used)
        if levels.size:
            keep = np.concatenate([[True], np.diff(levels) > LEVEL_TOL])
            levels = levels[keep]
        if levels.size and abs(y[i] - levels[-1]) <= LEVEL_TOL:
            levels[-1] = y[i]
        elif y[i] - (levels[-1] if levels.size else 0.0) > LEVEL_TOL:
            levels = np.append(levels, y[i])
        if levels.size == 0:
            original.append(i)
            share.append(0.0)
            cols.append(np.zeros(x.shape[1]))
            continue
        pieces = np.diff(np.concatenate([[0.0], levels]))
        # level index reached by each client (-1 when unserved)
        reach = np.full(x.shape[1], -1)
        served = x[i] > LEVEL_TOL
        reach[served] = np.abs(x[i][served][:, None] - levels[None, :]).argmin(axis=1)
        for s, piece in enumerate(pieces):
            original.append(i)
            share.append(piece)
            cols.append(np.where(reach >= s, piece, 0.0))
    split = SplitMap(np.asarray(original, dtype=np.int64), np.asarray(share))
    new = FractionalSolution(split.share.copy(), np.vstack(cols))
    # absorb float residue so each column still sums to one
    gap = 1.0 - new.x.sum(axis=0)
    for j in np.flatnonzero(np.abs(gap) > 0):
        i = int(np.flatnonzero(new.x[:, j] > 0)[-1])
        new.x[i, j] += gap[j]
        if new.x[i, j] > new.y[i]:
            new.y[i] = new.x[i, j]
            split.share[i] = new.y[i]
    return new, split


@dataclass
class NearestMassSet:
    """Per client: facilities of F_j nearest first, their mass in F_j, and d_max."""

    members: List[np.ndarray]
    mass: List[np.ndarray]
    d_max: np.ndarray
    d_av: np.ndarray

    def weights(self, n_facilities):
        w = np.zeros((n_facilities, len(self.members)))
        for j, (m, a) in enumerate(zip(self.members, self.mass)):
            w[m, j] = a
        return w


def nearest_mass_sets(sol: FractionalSolution, inst: Instance) -> NearestMassSet:
    y = sol.y
    if y.sum() < 1 - tol(1):
        raise InfeasibleError("total opening is below 1")
    w = nearest_fill(inst.cf, y)
    members, mass = [], []
    for j in range(inst.n_clients):
        idx = np.flatnonzero(w[:, j] > 0)
        order = np.lexsort((idx, inst.cf[idx, j]))
        members.append(idx[order])
        mass.append(w[idx[order], j])
    dmax = np.array([inst.cf[m, j].max() for j, m in enumerate(members)])
    dav = (w * inst.cf).sum(axis=0)
    return NearestMassSet(members, mass, dmax, dav)


def prepare(inst: Instance, accuracy: float = 1e-7):
    """LP solve followed by splitting; returns (split instance, solution, map)."""
    sol = solve_relaxation(inst, accuracy)
    split_sol, split = split_for_all_or_nothing(sol, inst)
    return split.expand(inst), split_sol, split
