"""Copy-based iterative rounding that opens k plus a constant number of facilities.

The opening vector becomes a multiset of copies, each worth 1/Δ. Every
iteration rebuilds the copy graph and runs, with equal odds, an unbalanced
update (copies whose selection would change |F'|) or a balanced update
(copies whose selection keeps |F'| fixed). Afterwards the residual
fractional opening is rounded with a weighted k-center filter.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import InfeasibleError, InvariantViolation
from .model import Instance, integral_cost, nearest_fill
from .nbrgraph import (CopyNeighborhoodGraph, CopySet, ImbalancePartition, build_copies,
                       build_copy_graph, partition)
from .preprocess import ScaleConfig

DIST_TOL = 1e-9


@dataclass
class RoundingState:
    copies: CopySet
    ff: np.ndarray
    forced: set = field(default_factory=set)
    t: int = 0
    log: List[dict] = field(default_factory=list)
    star_next: Dict[int, int] = field(default_factory=dict)

    @classmethod
    def start(cls, units, delta, ff):
        copies = build_copies(np.asarray(units) / delta, delta)
        return cls(copies, np.asarray(ff), star_next=dict(copies.next_cid))

    def is_fresh(self):
        """Copies added during the run (never part of the initial multiset)."""
        lim = np.array([self.star_next.get(int(f), 0) for f in self.copies.fac])
        return self.copies.cid >= lim

    def ybar(self, n_facilities):
        y = self.copies.counts(n_facilities) / self.copies.delta
        if self.forced:
            y[sorted(self.forced)] = 1.0
        return y


@dataclass
class Plan:
    """What one update would do; applying it is separate so tests can replay."""

    kind: str
    forced: np.ndarray
    drop: np.ndarray          # copies removed up front (forced branch or set R)
    removed: np.ndarray       # copies removed as out-neighbors of I
    opened: np.ndarray        # originals that receive Δ fresh copies
    chosen: np.ndarray        # real copies in I
    z_units: int = 0          # Δ * Z: net change in |F'| from selection
    info: dict = field(default_factory=dict)


def _empty():
    return np.zeros(0, dtype=np.int64)


def plan_unbalanced(g: CopyNeighborhoodGraph, part: ImbalancePartition, cfg: ScaleConfig,
                    rng, audit=False) -> Plan:
    delta = g.delta
    n = g.size
    A = part.A
    unbalanced = np.concatenate([part.plus, part.minus])
    if unbalanced.size == 0:
        return Plan("noop", _empty(), _empty(), _empty(), _empty(), _empty(), info={"A": A})
    if A <= cfg.force_threshold:
        forced = np.unique(g.fac[unbalanced])
        return Plan("force", forced, np.sort(unbalanced), _empty(), _empty(), _empty(),
                    z_units=0, info={"A": A})

    # heavy negative copies are forced open and taken out of the graph
    heavy = np.abs(part.imb[part.minus]) >= A * cfg.eps_c3
    R = part.minus[heavy]
    light_minus = part.minus[~heavy]
    keep = np.ones(n, dtype=bool)
    keep[R] = False
    adj = g.adj & keep[None, :]
    adj[~keep] = False
    lost = g.adj[R].sum(axis=0) if R.size else np.zeros(n, dtype=np.int64)

    # fictitious sources: per (original, missing in-degree) group of copies
    fict_out = []
    groups = {}
    for v in np.flatnonzero(keep & (lost > 0)):
        groups.setdefault((int(g.fac[v]), int(lost[v])), []).append(v)
    for (_, miss), members in sorted(groups.items()):
        for _ in range(miss):
            fict_out.append(np.asarray(members, dtype=np.int64))

    q_plus = cfg.select_prob
    q_minus = cfg.select_prob * (1 + cfg.eps_c5)
    x_plus = rng.random(part.plus.size) < q_plus
    x_minus = rng.random(light_minus.size) < q_minus
    x_fict = rng.random(len(fict_out)) < q_minus

    coords = np.concatenate([part.plus, light_minus])
    x_real = np.concatenate([x_plus, x_minus])

    def outcome(xr, xf):
        hit = np.zeros(n, dtype=bool)
        chosen = coords[xr]
        if chosen.size:
            hit |= adj[chosen].any(axis=0)
        for k in np.flatnonzero(xf):
            hit[fict_out[k]] = True
        opened = np.unique(g.fac[chosen])
        return chosen, hit, opened, delta * opened.size - int(hit.sum())

    chosen, hit, opened, z_units = outcome(x_real, x_fict)
    info = {"A": A, "R": int(R.size), "fict": len(fict_out)}

    if audit:
        indeg = adj.sum(axis=0)
        for members in fict_out:
            np.add.at(indeg, members, 1)
        info["fict_ok"] = bool(np.all(indeg[keep] == delta))
        m = coords.size + len(fict_out)
        if m:
            k = int(rng.integers(m))
            xr, xf = x_real.copy(), x_fict.copy()
            if k < coords.size:
                xr[k] = ~xr[k]
                out = int(adj[coords[k]].sum())
                kappa_units = max(abs(delta - out), delta)
            else:
                xf[k - coords.size] = ~xf[k - coords.size]
                kappa_units = int(fict_out[k - coords.size].size)
            z_flip = outcome(xr, xf)[3]
            info["lipschitz"] = {
                "coord": "fict" if k >= coords.size else "real",
                "dz_units": abs(z_flip - z_units),
                "kappa_units": kappa_units,
            }
    return Plan("unbalanced", np.unique(g.fac[R]), np.sort(R), np.flatnonzero(hit), opened,
                chosen, z_units=z_units, info=info)


def plan_balanced(g: CopyNeighborhoodGraph, part: ImbalancePartition, cfg: ScaleConfig, rng) -> Plan:
    zero = part.zero
    q = cfg.select_prob * (1 + cfg.eps_c5)
    order = rng.permutation(zero)
    coins = rng.random(order.size)
    hit = np.zeros(g.size, dtype=bool)
    taken = set()
    chosen = []
    for v, u in zip(order.tolist(), coins.tolist()):
        out = g.adj[v]
        # copies of an original already in I also count as a conflict
        if hit[out].any() or int(g.fac[v]) in taken:
            continue
        if u < q:
            chosen.append(v)
            taken.add(int(g.fac[v]))
            hit |= out
    chosen = np.asarray(sorted(chosen), dtype=np.int64)
    opened = np.unique(g.fac[chosen])
    z_units = g.delta * opened.size - int(hit.sum())
    return Plan("balanced", _empty(), _empty(), np.flatnonzero(hit), opened, chosen, z_units=z_units)


def apply_plan(state: RoundingState, plan: Plan):
    before = len(state.copies)
    state.forced.update(int(i) for i in plan.forced)
    mask = np.zeros(before, dtype=bool)
    mask[plan.drop] = True
    mask[plan.removed] = True
    state.copies.remove(mask)
    state.copies.add_fresh(plan.opened)
    rec = {"t": state.t, "kind": plan.kind, "size_before": before, "size_after": len(state.copies),
           "z_units": plan.z_units, "forced_new": [int(i) for i in plan.forced],
           "chosen": int(plan.chosen.size)}
    rec.update(plan.info)
    state.log.append(rec)
    return rec


def unbalanced_update(state: RoundingState, g, part, cfg, rng, audit=False):
    return apply_plan(state, plan_unbalanced(g, part, cfg, rng, audit))


def balanced_update(state: RoundingState, g, part, cfg, rng):
    return apply_plan(state, plan_balanced(g, part, cfg, rng))


@dataclass
class KCenterInput:
    ybar: np.ndarray
    radius: np.ndarray
    forced: tuple

    @classmethod
    def build(cls, ybar, inst: Instance, forced=()):
        return cls(np.asarray(ybar, dtype=float), cover_radius(inst, ybar), tuple(sorted(forced)))


def cover_radius(inst: Instance, ybar) -> np.ndarray:
    """Smallest r with ybar(ball(j, r)) >= 1 for every client (inf if none)."""
    ybar = np.asarray(ybar, dtype=float)
    order = np.argsort(inst.cf, axis=0, kind="stable")
    mass = np.cumsum(ybar[order], axis=0)
    ok = mass >= 1 - 1e-9
    out = np.full(inst.n_clients, np.inf)
    has = ok.any(axis=0)
    first = np.argmax(ok, axis=0)
    cols = np.arange(inst.n_clients)
    out[has] = inst.cf[order[first[has], cols[has]], cols[has]]
    return out


def iterate(state: RoundingState, cfg: ScaleConfig, rng, inst: Optional[Instance] = None,
            audit=False, T=None):
    """Run the update loop; returns (KCenterInput or ybar, log)."""
    steps = cfg.T if T is None else T
    n_fac = state.ff.shape[0]
    for _ in range(steps):
        if len(state.copies) < state.copies.delta:
            state.log.append({"t": state.t, "kind": "stop", "size_before": len(state.copies)})
            break
        g = build_copy_graph(state.copies, state.ff)
        part = partition(g)
        if rng.random() < 0.5:
            unbalanced_update(state, g, part, cfg, rng, audit)
        else:
            balanced_update(state, g, part, cfg, rng)
        state.t += 1
    ybar = state.ybar(n_fac)
    if inst is None:
        return ybar, state.log
    return KCenterInput.build(ybar, inst, state.forced), state.log


@dataclass
class FinishResult:
    solution: object
    selected: List[int]
    covered: np.ndarray
    radius: np.ndarray


def kcenter_finish(kc: KCenterInput, inst: Instance) -> FinishResult:
    y, r = kc.ybar, kc.radius
    if not np.all(np.isfinite(r)):
        raise InfeasibleError("some client has less than one unit of opening anywhere")
    full = set(np.flatnonzero(y >= 1 - 1e-9).tolist()) | set(kc.forced)
    cf, cc = inst.cf, inst.cc
    fl = sorted(full)
    covered = np.zeros(inst.n_clients, dtype=bool)
    if fl:
        covered = (cf[fl] <= r[None, :] + DIST_TOL).any(axis=0)
    pending = np.flatnonzero(~covered)
    pending = pending[np.lexsort((pending, r[pending]))]
    selected = []
    for j in pending.tolist():
        if all(cc[j, s] > r[j] + r[s] for s in selected):
            selected.append(j)
    opened = set(full)
    positive = y > 0
    for s in selected:
        cand = np.flatnonzero(positive & (cf[:, s] <= r[s] + DIST_TOL))
        opened.add(int(cand[np.lexsort((cand, cf[cand, s]))[0]]))
    sol = integral_cost(inst, sorted(opened))
    return FinishResult(sol, selected, covered, r)


def check_finish(res: FinishResult, kc: KCenterInput, inst: Instance):
    bad = []
    total = kc.ybar.sum()
    if len(res.solution.open) > int(np.ceil(total - 1e-9)):
        bad.append(f"{len(res.solution.open)} open exceeds ceil(|ybar|) = {np.ceil(total - 1e-9)}")
    missing = set(kc.forced) - set(res.solution.open)
    if missing:
        bad.append(f"forced facilities {sorted(missing)} not open")
    far = np.flatnonzero(res.solution.distances > 3 * res.radius + DIST_TOL * np.maximum(1, res.radius))
    if far.size:
        bad.append(f"clients {far.tolist()} connect beyond 3x their radius")
    sel = res.selected
    for a in range(len(sel)):
        for b in range(a + 1, len(sel)):
            if inst.cc[sel[a], sel[b]] <= res.radius[sel[a]] + res.radius[sel[b]]:
                bad.append(f"selected clients {sel[a]} and {sel[b]} have overlapping balls")
    return bad


def copy_radius(inst: Instance, units, delta) -> np.ndarray:
    """Max distance from each client to its Δ nearest initial copies."""
    w = nearest_fill(inst.cf, np.asarray(units) / delta)
    return np.where(w > 0, inst.cf, -np.inf).max(axis=0)


def f_new(dists_S, b, alpha, p, delta, eps, c5):
    """(1+eps)((alpha/Δ) sum_S d^p + (1 + 2 eps^c5 - |S|/Δ) b^p); diagnostic only."""
    d = np.asarray(dists_S, dtype=float)
    rest = 1 + 2 * eps ** c5 - d.size / delta
    tail = 0.0 if rest <= 0 or (b == np.inf and rest <= 1e-12) else rest * b ** p
    return (1 + eps) * (alpha / delta * float((d ** p).sum()) + tail)


@dataclass
class RunReport:
    seed: int
    config: dict
    forced_count: int
    final_open_count: int
    k: int
    per_client: list
    budget_used: float
    budget_ok: bool
    backup_ok: bool
    violations: list

    def to_dict(self):
        return dict(self.__dict__)


def pseudo_round(inst: Instance, units, cfg: ScaleConfig, rng, seed=0, audit=False):
    """From a 1/Δ-integral opening (given as integer units) to an integral solution.

    Runs the update loop, the k-center finish and the run-level checks.
    """
    delta = cfg.delta
    state = RoundingState.start(units, delta, inst.ff)
    kc, log = iterate(state, cfg, rng, inst=inst, audit=audit)
    fin = kcenter_finish(kc, inst)
    violations = check_finish(fin, kc, inst)
    dpp = copy_radius(inst, units, delta)
    dist = fin.solution.distances
    backup_ok = bool(np.all(dist <= 3 * dpp + DIST_TOL * np.maximum(1, dpp)))
    if not backup_ok:
        violations.append("a client connects beyond 3x its initial copy radius")
    used = len(state.forced) + max(0.0, kc.ybar.sum() - inst.k)
    report = RunReport(
        seed=seed,
        config=cfg.report(),
        forced_count=len(state.forced),
        final_open_count=len(fin.solution.open),
        k=inst.k,
        per_client=[[float(c), float(d), float(m)]
                    for c, d, m in zip(dist ** inst.p, dist, dpp)],
        budget_used=float(used),
        budget_ok=bool(used <= cfg.budget + 1e-9),
        backup_ok=backup_ok,
        violations=violations,
    )
    return fin.solution, report, state


def raise_on(report: RunReport):
    if report.violations:
        raise InvariantViolation("; ".join(report.violations))
