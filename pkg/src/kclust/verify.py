"""Property suites behind ``kclust verify`` and the acceptance tests.

Each suite takes its sample counts as arguments, draws from named seeded
streams and returns a ``SuiteResult``; nothing here raises on a failed
property.
"""
import functools
import inspect
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .harness import StatSummary, euclidean, generate_instance, graph_metric, standard_suite
from .lmp import (ClientState, alpha_general, eq1_sides, expected_drift, lmp_round, one_step_potential_check,
                  verify_euclid_pair)
from .lp import prepare, split_for_all_or_nothing
from .model import (FractionalSolution, Instance, MetricSpace, client_costs, costs_under_opening,
                    nearest_fill)
from .nbrgraph import build_copies, build_copy_graph, build_weighted, facility_order, partition
from .preprocess import (ScaleConfig, check_core_mass, check_filter, check_near_representative, check_quantized,
                         consolidate_cores, default_epsilon, filter_clients, pipage_units)
from .pseudoround import RoundingState, apply_plan, plan_balanced, plan_unbalanced, pseudo_round
from .reduction import (ReductionConfig, brute_force_opt, delta_for, pseudo_to_true, reduce_to_sparse,
                        solution_cost, solve_sparse, sparse_cost_bound, sparse_witnesses, t_for)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    checked: int
    failures: int
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: {self.checked} checked, {self.failures} failed ({self.seconds:.1f}s)"


def _timed(fn):
    @functools.wraps(fn)
    def run(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    return run


def random_opening(g, n, total):
    """Random fractional y with entries in (0, 1] summing to ``total``."""
    y = g.dirichlet(np.ones(n)) * total
    for _ in range(100):
        over = y > 1
        if not over.any():
            break
        spare = (y[over] - 1).sum()
        y[over] = 1.0
        room = ~over & (y < 1)
        y[room] += spare * y[room] / y[room].sum()
    return np.minimum(y, 1.0)


def split_random_instance(g, n_f=20, n_c=20, k=4, p=1.0, dim=2, metric="euclidean"):
    """Random opening on a random instance, split so x is all-or-nothing."""
    seed = int(g.integers(2 ** 31))
    if metric == "euclidean":
        inst = euclidean(n_c, n_f, dim, seed, k, p)
    else:
        n = max(n_f, n_c)
        inst = graph_metric(n, 0.2, seed, k, p)
    y = random_opening(g, inst.n_facilities, k)
    sol = FractionalSolution(y, nearest_fill(inst.cf, y))
    split_sol, split = split_for_all_or_nothing(sol, inst)
    return inst, split.expand(inst), split_sol


# -- lmp ----------------------------------------------------------------------

@_timed
def suite_drift(n_states=1000, n_instances=50, seed=0):
    """Expected change of |y'| is zero at reachable states."""
    per = math.ceil(n_states / n_instances)
    worst, checked, bad = 0.0, 0, 0
    for t in range(n_instances):
        g = rngmod.stream(seed, "verify-drift", t)
        n = int(g.integers(4, 13))
        inst = euclidean(1, n, 2, int(g.integers(2 ** 31)), 1)
        ff = inst.ff
        order = facility_order(ff)
        states = []
        while len(states) < per:
            y = random_opening(g, n, float(g.uniform(1, min(n, 4))))
            run = lmp_round(y, ff, g, order=order, trace=True)
            states.append(y)
            states += [np.asarray(r["y"]) for r in run.trace[:-1]]
        for y in states[:per]:
            d = expected_drift(build_weighted(y, ff, order), y)
            worst = max(worst, abs(d))
            checked += 1
            bad += abs(d) > 1e-9
    return SuiteResult("drift", bad == 0, checked, bad, {"max_abs_drift": worst})


@_timed
def suite_lmp_open(trials=20000, n_f=20, seed=0):
    """Mean open count matches |y|_1 within 4 standard errors."""
    g = rngmod.stream(seed, "verify-lmp-open", 0)
    inst = euclidean(1, n_f, 2, int(g.integers(2 ** 31)), 4)
    y = random_opening(g, n_f, 4.0)
    ff, order = inst.ff, facility_order(inst.ff)
    counts = np.array([len(lmp_round(y, ff, g, order=order).open) for _ in range(trials)])
    s = StatSummary.of("open", counts)
    gap = abs(s.mean - y.sum())
    ok = gap <= 4 * s.stderr
    return SuiteResult("lmp-open-count", ok, trials, int(not ok),
                       {"mean": s.mean, "target": float(y.sum()), "stderr": s.stderr, "gap": gap})


def lmp_client_means(inst, sol, trials, g):
    ff, order = inst.ff, facility_order(inst.ff)
    fsets = sol.x > 0
    total = np.zeros(inst.n_clients)
    sq = np.zeros(inst.n_clients)
    for _ in range(trials):
        run = lmp_round(sol.y, ff, g, cf=inst.cf, fsets=fsets, p=inst.p, order=order)
        c = run.client_cost
        total += c
        sq += c * c
    mean = total / trials
    sd = np.sqrt(np.maximum(sq / trials - mean ** 2, 0) * trials / max(trials - 1, 1))
    return mean, sd / math.sqrt(trials)


@_timed
def suite_lmp_cost(trials=20000, seed=0, cases=None):
    """Per-client mean cost is at most alpha * fractional cost * 1.02."""
    cases = cases or [("p=1 general", 1.0, "graph", 2.0),
                      ("p=2 general", 2.0, "graph", 5.0),
                      ("p=2 euclidean", 2.0, "euclidean", 11.0 / 3.0)]
    detail, bad, checked = {}, 0, 0
    for n, (name, p, metric, alpha) in enumerate(cases):
        g = rngmod.stream(seed, "verify-lmp-cost", n)
        _, inst, sol = split_random_instance(g, n_f=20, n_c=12, k=4, p=p, metric=metric)
        mean, se = lmp_client_means(inst, sol, trials, g)
        frac = client_costs(inst, sol)
        limit = alpha * frac * 1.02
        viol = mean > limit + 1e-12
        bad += int(viol.sum())
        checked += inst.n_clients
        ratio = np.where(frac > 0, mean / np.where(frac > 0, frac, 1), 0.0)
        detail[name] = {"alpha": alpha, "max_ratio": float(ratio.max()), "violations": int(viol.sum()),
                        "n_facilities_split": inst.n_facilities}
    return SuiteResult("lmp-cost", bad == 0, checked, bad, detail)


# -- certificates ---------------------------------------------------------------

def _metric_sample(g, m):
    """Client distances and facility distance matrix of a random metric sample."""
    kind = int(g.integers(3))
    if kind == 0:
        dim = int(g.integers(1, 6))
        pts = g.standard_normal((m + 1, dim)) * g.uniform(0.1, 10)
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    elif kind == 1:
        inst = graph_metric(m + 1, float(g.uniform(0.2, 0.8)), int(g.integers(2 ** 31)))
        d = inst.ff
    else:
        # uniform-ish metric: distances in [1, 2] always satisfy the triangle inequality
        d = g.uniform(1, 2, (m + 1, m + 1))
        d = np.triu(d, 1)
        d = d + d.T
    return d[0, 1:], d[1:, 1:]


def collinear_grid(p, alpha, limit=4):
    """Facility positions on a line (client at 0) over small integer grids."""
    bad, n = 0, 0
    pos = np.arange(-limit, limit + 1, dtype=float)
    weights = [0.25, 0.5, 1.0]
    for m in (1, 2, 3):
        for pts in itertools.combinations(pos, m):
            pts = np.asarray(pts)
            dj = np.abs(pts)
            dd = np.abs(pts[:, None] - pts[None])
            for w in itertools.product(weights, repeat=m):
                lhs, rhs = eq1_sides(dj, dd, np.asarray(w), p, alpha)
                n += 1
                bad += lhs > rhs + 1e-9 * max(abs(lhs), abs(rhs))
    return n, bad


@_timed
def suite_eq1(samples=10000, ps=(1, 2, 3), seed=0):
    """The per-client certificate inequality for alpha = (3^p + 1) / 2."""
    detail, bad, checked = {}, 0, 0
    for p in ps:
        alpha = alpha_general(p)
        g = rngmod.stream(seed, "verify-eq1", p)
        worst = -np.inf
        b = 0
        for _ in range(samples):
            m = int(g.integers(1, 7))
            dj, dd = _metric_sample(g, m)
            y = g.uniform(0.01, 1, m)
            lhs, rhs = eq1_sides(dj, dd, y, p, alpha)
            scale = max(abs(lhs), abs(rhs), 1e-300)
            worst = max(worst, (lhs - rhs) / scale)
            b += lhs > rhs + 1e-9 * scale
        n_grid, b_grid = collinear_grid(p, alpha)
        detail[f"p={p}"] = {"alpha": alpha, "random_violations": b, "grid_checked": n_grid,
                            "grid_violations": b_grid, "max_rel_excess": float(worst)}
        bad += b + b_grid
        checked += samples + n_grid
    return SuiteResult("eq1", bad == 0, checked, bad, detail)


@_timed
def suite_euclid(pairs=100000, seed=0):
    """Pairwise Euclidean bounds for alpha = 4 (relaxed) and alpha = 11/3."""
    g = rngmod.stream(seed, "verify-euclid", 0)
    bad = {4.0: 0, 11.0 / 3.0: 0}
    for n in range(pairs):
        dim = 2 + n % 9
        vi = g.standard_normal(dim) * g.exponential()
        vk = g.standard_normal(dim) * g.exponential()
        if n % 50 == 0:
            vk = vi * g.uniform(-2, 2)   # collinear pairs
        for alpha in bad:
            bad[alpha] += not verify_euclid_pair(vi, vk, alpha)
    special = [(np.zeros(3), np.zeros(3)), (np.zeros(3), np.ones(3)), (np.eye(3)[0], np.eye(3)[1]),
               (np.ones(3), np.ones(3)), (np.ones(3), -np.ones(3))]
    for vi, vk in special:
        for alpha in bad:
            bad[alpha] += not verify_euclid_pair(vi, vk, alpha)
    total = sum(bad.values())
    return SuiteResult("euclid-pairs", total == 0, 2 * (pairs + len(special)), total,
                       {"alpha=4": bad[4.0], "alpha=11/3": bad[11.0 / 3.0]})


@_timed
def suite_potential(states=100, seed=0, max_facilities=6):
    """One-step expectation of the potential never exceeds its current value."""
    bad, worst = 0, -np.inf
    for n in range(states):
        g = rngmod.stream(seed, "verify-potential", n)
        p = 1.0 + n % 2
        alpha = alpha_general(p)
        m = int(g.integers(2, max_facilities + 1))
        pts = g.random((m + 1, 2))
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        dist, ff = d[0, 1:], d[1:, 1:]
        y = random_opening(g, m, float(g.uniform(1, min(m, 3))))
        if n % 5 == 0:
            y[int(g.integers(m))] = 1.0
        g_ = build_weighted(y, ff)
        cand = [i for i in range(m) if y[i] > 0]
        S = [i for i in cand if g.random() < 0.6]
        while S and y[S].sum() > 1:
            S.pop()
        b = np.inf if g.random() < 0.3 else float(dist[int(g.integers(m))] + g.uniform(0, 1))
        lhs, rhs = one_step_potential_check(ClientState(tuple(S), b), g_, y, alpha, p, dist)
        if not np.isfinite(rhs):
            lhs_ok = True
        else:
            lhs_ok = lhs <= rhs + 1e-9 * max(1.0, abs(rhs))
            worst = max(worst, lhs - rhs)
        bad += not lhs_ok
    return SuiteResult("potential", bad == 0, states, bad, {"max_excess": float(worst)})


# -- pipage -------------------------------------------------------------------

def random_laminar(g, n):
    """A random laminar family over range(n) built by recursive splitting."""
    fam = []

    def grow(items, depth):
        if len(items) < 2 or depth > 3:
            return
        cut = sorted(g.choice(np.arange(1, len(items)), size=min(2, len(items) - 1), replace=False))
        parts = np.split(items, cut)
        for part in parts:
            if g.random() < 0.7 and part.size:
                fam.append(np.sort(part))
                grow(part, depth + 1)

    grow(g.permutation(n), 0)
    return fam


@_timed
def suite_pipage(runs=10000, marg_trials=50000, seed=0, g_unit=1 / 16):
    """Sum quantization, unbiased marginals and nonpositive in-ball covariance."""
    bad_q = 0
    for r in range(runs):
        g = rngmod.stream(seed, "verify-pipage", r)
        n = int(g.integers(2, 13))
        y = g.random(n) * g.uniform(0.2, 1)
        fam = random_laminar(g, n)
        units = pipage_units(y, fam, g_unit, g)
        bad_q += bool(check_quantized(y, units, fam, g_unit))

    g = rngmod.stream(seed, "verify-pipage-marginal", 0)
    n = 10
    y = g.random(n) * 0.6
    fam = [np.arange(0, 4), np.arange(0, 2), np.arange(5, 9)]
    draws = np.empty((marg_trials, n))
    for t in range(marg_trials):
        draws[t] = pipage_units(y, fam, g_unit, g) * g_unit
    mean = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / math.sqrt(marg_trials)
    z = np.abs(mean - y) / np.where(se > 0, se, np.inf)
    bad_m = int((np.abs(mean - y) > 4 * se + 1e-15).sum())
    cov_bad, cov_max = 0, -np.inf
    centered = draws - y
    for ball in fam:
        for a, b in itertools.combinations(ball.tolist(), 2):
            prod = centered[:, a] * centered[:, b]
            m, s = prod.mean(), prod.std(ddof=1) / math.sqrt(marg_trials)
            cov_max = max(cov_max, m / s if s > 0 else 0.0)
            cov_bad += m > 4 * s + 1e-15
    bad = bad_q + bad_m + cov_bad
    return SuiteResult("pipage", bad == 0, runs + n + sum(len(b) * (len(b) - 1) // 2 for b in fam), bad,
                       {"quantization_failures": bad_q, "marginal_failures": bad_m,
                        "max_marginal_z": float(z.max()), "covariance_failures": int(cov_bad),
                        "max_covariance_z": float(cov_max)})


# -- pseudo-round -----------------------------------------------------------------

def random_units(g, n, k, delta):
    u = np.floor(random_opening(g, n, k) * delta).astype(np.int64)
    while u.sum() < k * delta:
        i = int(g.integers(n))
        if u[i] < delta:
            u[i] += 1
    return u


def _random_state(g, delta=16):
    n = int(g.integers(4, 9))
    k = int(g.integers(1, 3))
    inst = euclidean(n, n, 2, int(g.integers(2 ** 31)), k)
    return inst, random_units(g, n, k, delta)


def pseudo_inputs(spec_inst, scale, g):
    split_inst, split_sol, _ = spec_inst
    filt = filter_clients(split_inst, split_sol, scale)
    y1 = consolidate_cores(split_sol.y, filt, g)
    return pipage_units(y1, filt.laminar_family(), scale.granularity, g)


@_timed
def suite_pseudo(runs=1000, balanced=10000, audits=1000, seed=0, ps=(1.0, 2.0)):
    """Structural audits and the open-count budget of the pseudo-rounding loop."""
    detail = {}
    # balanced updates leave |F'| unchanged
    bal_bad = 0
    for r in range(balanced):
        g = rngmod.stream(seed, "verify-balanced", r)
        inst, units = _random_state(g)
        copies = build_copies(units / 16, 16)
        gr = build_copy_graph(copies, inst.ff)
        part = partition(gr)
        plan = plan_balanced(gr, part, ScaleConfig(epsilon=0.25), g)
        bal_bad += plan.z_units != 0 or len(plan.removed) != 16 * len(plan.opened)
    detail["balanced_checked"] = balanced
    detail["balanced_failures"] = bal_bad

    # fictitious in-degree and bounded differences on the heavy branch
    cfg0 = ScaleConfig(epsilon=0.25, force_threshold=0.0)
    fict_bad = lip_bad = lip_n = fict_n = 0
    r = 0
    while lip_n < audits:
        g = rngmod.stream(seed, "verify-lipschitz", r)
        r += 1
        inst, units = _random_state(g)
        state = RoundingState.start(units, 16, inst.ff)
        for _ in range(20):
            if len(state.copies) < 16 or lip_n >= audits:
                break
            gr = build_copy_graph(state.copies, inst.ff)
            part = partition(gr)
            plan = plan_unbalanced(gr, part, cfg0, g, audit=True)
            if plan.kind == "unbalanced":
                fict_n += 1
                fict_bad += not plan.info["fict_ok"]
                lip = plan.info.get("lipschitz")
                if lip is not None:
                    lip_n += 1
                    lip_bad += lip["dz_units"] > lip["kappa_units"]
            apply_plan(state, plan)
    detail.update(fictitious_checked=fict_n, fictitious_failures=fict_bad,
                  lipschitz_checked=lip_n, lipschitz_failures=lip_bad)

    # full runs on the standard suite: backup distance and budget
    backup_bad, budget_ok, total = 0, 0, 0
    per_p = {}
    zs = []
    for p in ps:
        scale = ScaleConfig(epsilon=default_epsilon(p), p=p)
        suite = [(spec, prepare(inst)) for spec, inst in standard_suite(p)]
        share = runs // len(ps)
        held = 0
        for n in range(share):
            spec, prep = suite[n % len(suite)]
            g = rngmod.stream(seed, f"verify-pseudo-{spec}", n)
            units = pseudo_inputs(prep, scale, g)
            _, rep, state = pseudo_round(prep[0], units, scale, g, seed=n)
            backup_bad += not rep.backup_ok or bool(rep.violations)
            held += rep.budget_ok
            zs += [e["z_units"] / scale.delta for e in state.log if e["kind"] == "unbalanced"]
        per_p[f"p={p:g}"] = {"runs": share, "budget_held": held, "rate": held / share}
        budget_ok += held
        total += share
    rate = budget_ok / total
    detail.update(backup_failures=backup_bad, budget_rate=rate, budget_by_p=per_p,
                  unbalanced_z=StatSummary.of("Z", zs).__dict__)
    bad = bal_bad + fict_bad + lip_bad + backup_bad + (rate < 0.9)
    return SuiteResult("pseudo-round", bad == 0, balanced + fict_n + lip_n + total, bad, detail)


@_timed
def suite_z_tail(runs=500, seed=0, z_cap=None):
    """How often one heavy-branch update grows |F'| by at least the cap."""
    zs = []
    for r in range(runs):
        g = rngmod.stream(seed, "verify-z", r)
        inst, units = _random_state(g)
        cfg = ScaleConfig(epsilon=0.25, force_threshold=0.0, z_cap=z_cap)
        state = RoundingState.start(units, 16, inst.ff)
        for _ in range(20):
            if len(state.copies) < 16:
                break
            gr = build_copy_graph(state.copies, inst.ff)
            plan = plan_unbalanced(gr, partition(gr), cfg, g)
            if plan.kind == "unbalanced":
                zs.append(plan.z_units / 16)
            apply_plan(state, plan)
    zs = np.asarray(zs)
    cap = cfg.z_cap
    rate = float((zs >= cap).mean()) if zs.size else 0.0
    hist = {str(v): int(c) for v, c in zip(*np.unique(zs, return_counts=True))}
    return SuiteResult("z-tail", rate <= 0.1, int(zs.size), int(rate > 0.1),
                       {"cap": cap, "exceed_rate": rate, "distribution": hist})


def _selection_state(g, cfg, want):
    """A random copy graph whose partition has the copy classes named in ``want``."""
    while True:
        inst, units = _random_state(g, cfg.delta)
        gr = build_copy_graph(build_copies(units / cfg.delta, cfg.delta), inst.ff)
        part = partition(gr)
        if want == "zero" and part.zero.size >= 2:
            return gr, part
        if want == "unbalanced" and part.A > cfg.force_threshold and part.plus.size:
            light = np.abs(part.imb[part.minus]) < part.A * cfg.eps_c3
            if light.any():
                return gr, part


@_timed
def suite_selection(trials=4000, states=4, seed=0, max_pairs=45):
    """Per-copy selection frequencies of both update kinds against their brackets.

    Unbalanced: every selectable real copy lands in I with probability in
    [2L/Δ, 2L(1+eps^c5)/Δ] and every pair with probability at most twice the
    square of the upper end.  Balanced: each zero copy lands in I with
    probability in [q(1 - |N(v)| q), q], N(v) being the copies it conflicts with.
    """
    # c3 = 1 leaves some negative copies light so both selection rates are exercised
    ucfg = ScaleConfig(epsilon=0.25, force_threshold=0.0, c3=1)
    lo, hi = ucfg.select_prob, ucfg.select_prob * (1 + ucfg.eps_c5)
    bad = checked = 0
    worst_z = 0.0
    for s in range(states):
        g = rngmod.stream(seed, "verify-selection-unbalanced", s)
        gr, part = _selection_state(g, ucfg, "unbalanced")
        light = part.minus[np.abs(part.imb[part.minus]) < part.A * ucfg.eps_c3]
        coords = np.concatenate([part.plus, light])
        hits = np.zeros((trials, gr.size), dtype=bool)
        for t in range(trials):
            hits[t, plan_unbalanced(gr, part, ucfg, g).chosen] = True
        freq = hits[:, coords].mean(axis=0)
        se = math.sqrt(hi * (1 - hi) / trials)
        z = np.maximum(lo - freq, freq - hi) / se
        worst_z = max(worst_z, float(z.max()))
        bad += int((z > 4).sum())
        checked += coords.size
        pairs = list(itertools.combinations(coords.tolist(), 2))[:max_pairs]
        cap = 2 * hi ** 2
        for a, b in pairs:
            both = float((hits[:, a] & hits[:, b]).mean())
            bad += both > cap + 4 * math.sqrt(cap / trials)
        checked += len(pairs)

    bcfg = ScaleConfig(epsilon=0.25)
    q = bcfg.select_prob * (1 + bcfg.eps_c5)
    ratios = []
    for s in range(states):
        g = rngmod.stream(seed, "verify-selection-balanced", s)
        gr, part = _selection_state(g, bcfg, "zero")
        zero = part.zero
        counts = np.zeros(gr.size)
        for _ in range(trials):
            counts[plan_balanced(gr, part, bcfg, g).chosen] += 1
        for v in zero.tolist():
            conflicts = sum(1 for u in zero.tolist() if u != v and
                            ((gr.adj[u] & gr.adj[v]).any() or gr.fac[u] == gr.fac[v]))
            low = q * max(0.0, 1 - conflicts * q)
            f = counts[v] / trials
            se = math.sqrt(q * (1 - q) / trials)
            bad += f < low - 4 * se or f > q + 4 * se
            ratios.append(f / q)
            checked += 1
    detail = {"unbalanced_bracket": [lo, hi], "max_bracket_z": worst_z, "balanced_q": q,
              "balanced_freq_over_q": StatSummary.of("freq/q", ratios).__dict__}
    return SuiteResult("selection", bad == 0, checked, int(bad), detail)


# -- preprocessing cost measurements ---------------------------------------------------

def type3_pair(g, p=1.0):
    """Two representatives each holding a sliver of mass past the midpoint between them.

    Clients sit at 0 and ``gap``; facilities at 0 and ``gap`` carry 1 - m and a
    third facility at -far carries 2m.  With m small both clients are far from
    type 1 and their balls are cut at gap/2, so both classify as type 3.
    """
    gap = float(g.uniform(2.0, 3.0))
    far = float(g.uniform(0.55, 0.95)) * gap
    m = float(g.uniform(1e-4, 2e-3))
    pts = np.array([[0.0], [gap], [0.0], [gap], [-far]])
    inst = Instance(MetricSpace("euclidean", coords=pts), [0, 1], [2, 3, 4], 2, p)
    y = np.array([1 - m, 1 - m, 2 * m])
    return inst, FractionalSolution(y, nearest_fill(inst.cf, y))


def _nearest_other_rep(filt, inst):
    """For each type-3 client, the representative nearest to its own one."""
    reps = np.asarray(filt.reps)
    out = {}
    for j in np.flatnonzero(filt.types == 3).tolist():
        j1 = int(filt.rep_of[j])
        others = reps[reps != j1]
        if others.size:
            out[j] = int(others[np.lexsort((others, inst.cc[j1, others]))[0]])
    return out


def preprocess_means(inst, sol, filt, cfg, trials, g):
    """Monte Carlo means of per-client costs after consolidation and after pipage."""
    n, p = inst.n_clients, inst.p
    anchors = _nearest_other_rep(filt, inst)
    fam = filt.laminar_family()
    acc = {key: np.zeros(n) for key in ("cost1", "cost2", "dmax", "surrogate")}
    for _ in range(trials):
        y1 = consolidate_cores(sol.y, filt, g)
        y2 = pipage_units(y1, fam, cfg.granularity, g) * cfg.granularity
        acc["cost1"] += costs_under_opening(inst, y1)
        x2 = nearest_fill(inst.cf, y2)
        acc["cost2"] += (inst.cf_p * x2).sum(axis=0)
        acc["dmax"] += np.where(x2 > 1e-12, inst.cf, 0.0).max(axis=0) ** p
        for j, j2 in anchors.items():
            core = filt.cores[j2]
            i2 = core[np.argmax(y1[core])]
            cap = (inst.cf[i2, j] / 2) ** p
            acc["surrogate"][j] += (x2[:, j] * np.minimum(inst.cf_p[:, j], cap)).sum()
    return {key: v / trials for key, v in acc.items()}


@_timed
def suite_preprocess(trials=2000, per_p=5, type3=10, seed=0, ps=(1.0, 2.0)):
    """Deterministic filter checks plus measured cost constants of consolidation and pipage.

    The structural checks (disjoint balls, near representatives, core mass
    under the nearest-other-representative condition) decide the verdict, as
    does the constructed type-3 family actually producing type-3 clients.
    The cost ratios are measurements and are reported, not enforced.
    """
    bad = checked = 0
    c_cons, slack1, c_sur, dmax_ratio = [], [], [], []
    n_type3 = 0
    cases = []
    for p in ps:
        cases += [(p, prepare(inst)[:2]) for _, inst in standard_suite(p, n=per_p)]
    g0 = rngmod.stream(seed, "verify-type3-cases", 0)
    cases += [(1.0, type3_pair(g0)) for _ in range(type3)]
    for n, (p, (inst, sol)) in enumerate(cases):
        cfg = ScaleConfig(epsilon=default_epsilon(p), p=p)
        filt = filter_clients(inst, sol, cfg)
        problems = (check_filter(filt, inst, sol.y, cfg) + check_near_representative(filt, inst)
                    + check_core_mass(filt, inst, sol.y, cfg))
        bad += len(problems)
        checked += 1
        n_type3 += int((filt.types == 3).sum())
        g = rngmod.stream(seed, "verify-preprocess", n)
        means = preprocess_means(inst, sol, filt, cfg, trials, g)
        base = costs_under_opening(inst, sol.y)
        pe = p * cfg.epsilon
        pos = base > 1e-12
        c_cons += ((means["cost1"][pos] / base[pos] - 1) / pe).tolist()
        t1 = pos & (filt.types == 1)
        slack1 += (means["cost2"][t1] / base[t1] - 1).tolist()
        for j in np.flatnonzero(filt.types == 3).tolist():
            c_sur.append((means["surrogate"][j] / means["cost1"][j] - 1) / pe)
        p1 = means["cost1"] > 1e-12
        dmax_ratio += (means["dmax"][p1] / means["cost1"][p1] / cfg.delta).tolist()
    if type3 and n_type3 == 0:
        bad += 1
    top = lambda v: float(max(v)) if v else float("nan")  # noqa: E731
    detail = {"consolidation_C": top(c_cons), "type1_slack": top(slack1), "type3_clients": n_type3,
              "type3_surrogate_C": top(c_sur), "dmax_over_delta_cost": top(dmax_ratio)}
    return SuiteResult("preprocess", bad == 0, checked, bad, detail)


# -- reduction -----------------------------------------------------------------

def reduction_case(n):
    """Instance n of the fixed reduction suite."""
    g = rngmod.stream(0, "reduction-suite", n)
    p = 1.0 + n % 2
    k = 1 + n % 3
    c = 1 + (n // 3) % 2
    n_f = int(g.integers(max(k + c, 5), 9))
    n_c = int(g.integers(6, 13))
    if n % 4 < 2:
        inst = euclidean(n_c, n_f, 2, int(g.integers(2 ** 31)), k, p)
    else:
        base = graph_metric(max(n_f, n_c), 0.3, int(g.integers(2 ** 31)), k, p)
        inst = Instance(base.metric, np.arange(n_c), np.arange(n_f), k, p)
    return inst, c, g


def pseudo_solution(inst, c, alpha, g, opt_cost=None):
    """A (k + c)-subset of cost at most alpha * opt, drawn at random."""
    kk = min(inst.k + c, inst.n_facilities)
    opt_cost = brute_force_opt(inst).total_cost if opt_cost is None else opt_cost
    for _ in range(200):
        T = g.choice(inst.n_facilities, kk, replace=False)
        if solution_cost(inst, T) <= alpha * opt_cost:
            return tuple(sorted(int(i) for i in T))
    opt = brute_force_opt(inst).open
    rest = [i for i in range(inst.n_facilities) if i not in opt]
    return tuple(sorted(list(opt) + list(g.choice(rest, kk - inst.k, replace=False))))


@_timed
def suite_reduction(instances=50, eps=0.25, seed=0):
    """Witness existence, the sparse-solver bound and the final (alpha + eps) ratio."""
    wit_bad = bound_bad = ratio_bad = 0
    rows = []
    for n in range(instances):
        inst, c, g = reduction_case(n + seed * instances)
        alpha = alpha_general(inst.p)
        opt = brute_force_opt(inst)
        delta = delta_for(alpha, inst.p)
        t = t_for(alpha, eps, c, inst.p, delta)
        subs = reduce_to_sparse(inst, t)
        wits = sparse_witnesses(subs, inst, opt.open, opt.total_cost, t)
        wit_bad += not wits
        # sparse solver on the witness, with a pseudo-solution of that instance
        bound_ok = True
        if wits:
            w = wits[0]
            T = pseudo_solution(w.instance, c, alpha, g, opt.total_cost)
            cc = len(T) - inst.k
            cfg = ReductionConfig(delta, t, cc, opt.total_cost / t, theoretical=True)
            S, trace = solve_sparse(w.instance, T, cfg)
            cost_T = solution_cost(w.instance, T)
            bound = sparse_cost_bound(cost_T, cc, trace.B, opt.total_cost, delta, inst.p)
            bound_ok = S.total_cost <= bound * (1 + 1e-9)
        bound_bad += not bound_ok
        T = pseudo_solution(inst, c, alpha, g, opt.total_cost)

        def solver(sub, g=g):
            return pseudo_solution(sub, c, alpha, g)

        S, rep = pseudo_to_true(inst, T, alpha, eps, opt=opt.total_cost, pseudo_solver=solver)
        ratio = S.total_cost / opt.total_cost if opt.total_cost > 0 else 1.0
        ratio_bad += ratio > alpha + eps + 1e-9
        rows.append({"n_f": inst.n_facilities, "n_c": inst.n_clients, "k": inst.k, "c": c, "p": inst.p,
                     "t": t, "outputs": len(subs), "witnesses": len(wits), "ratio": ratio})
    bad = wit_bad + bound_bad + ratio_bad
    return SuiteResult("reduction", bad == 0, 3 * instances, bad,
                       {"witness_failures": wit_bad, "bound_failures": bound_bad,
                        "ratio_failures": ratio_bad, "max_ratio": max(r["ratio"] for r in rows),
                        "rows": rows})


# -- end to end ------------------------------------------------------------------

@_timed
def suite_end_to_end(per_p=6, seeds=5, ps=(1.0, 2.0), slack=0.5):
    """Best of several seeded pipeline runs is within alpha + slack of the optimum."""
    from .harness import ExperimentConfig, run_pipeline
    rows, bad = [], 0
    for p in ps:
        specs = [s for s, _ in standard_suite(p, n=per_p // 2)]
        specs += [f"euclidean:n_c=10,n_f=7,dim=2,seed={s},k=2,p={p:g}" for s in range(per_p - len(specs))]
        alpha = alpha_general(p)
        for spec in specs:
            rep = run_pipeline(ExperimentConfig(generator=spec, trials=seeds, seed=0))
            ratios = [r.get("ratio_opt", math.inf) for r in rep["trials"]]
            opens = [r.get("final_open") for r in rep["trials"]]
            best = min(ratios)
            bad += best > alpha + slack
            rows.append({"spec": spec, "alpha": alpha, "ratios": ratios, "opens": opens, "best": best,
                         "status": [r["status"] for r in rep["trials"]]})
    return SuiteResult("end-to-end", bad == 0, len(rows), bad, {"rows": rows})


SUITES = {
    "drift": suite_drift,
    "lmp-open": suite_lmp_open,
    "lmp-cost": suite_lmp_cost,
    "eq1": suite_eq1,
    "euclid": suite_euclid,
    "potential": suite_potential,
    "pipage": suite_pipage,
    "pseudo": suite_pseudo,
    "z-tail": suite_z_tail,
    "selection": suite_selection,
    "preprocess": suite_preprocess,
    "reduction": suite_reduction,
    "end-to-end": suite_end_to_end,
}

QUICK = {
    "drift": {"n_states": 200, "n_instances": 10},
    "lmp-open": {"trials": 2000},
    "lmp-cost": {"trials": 2000},
    "eq1": {"samples": 1000},
    "euclid": {"pairs": 5000},
    "potential": {"states": 50},
    "pipage": {"runs": 1000, "marg_trials": 5000},
    "pseudo": {"runs": 100, "balanced": 500, "audits": 100},
    "z-tail": {"runs": 50},
    "selection": {"trials": 500, "states": 2},
    "preprocess": {"trials": 200, "per_p": 2, "type3": 3},
    "reduction": {"instances": 5},
    "end-to-end": {"per_p": 2, "seeds": 2},
}


def parse_selector(selector: str):
    """'eq1,p=1' -> ('eq1', {'ps': (1,)}); 'all' -> every suite."""
    parts = [s.strip() for s in selector.split(",") if s.strip()]
    if not parts:
        raise ValueError("empty selector")
    name, opts = parts[0], {}
    for part in parts[1:]:
        key, _, val = part.partition("=")
        if key == "p":
            opts["ps"] = (float(val),) if name != "eq1" else (int(float(val)),)
        elif key == "seed":
            opts["seed"] = int(val)
        else:
            raise ValueError(f"unknown selector option {key!r}")
    return name, opts


def verify_suite(selector="all", quick=False):
    """Run the selected suites; returns a list of SuiteResult."""
    name, opts = parse_selector(selector)
    names = list(SUITES) if name == "all" else [name]
    out = []
    for n in names:
        if n not in SUITES:
            raise ValueError(f"unknown suite {n!r}; choose from {sorted(SUITES)} or 'all'")
        kw = dict(QUICK.get(n, {})) if quick else {}
        fn = SUITES[n]
        kw.update({k: v for k, v in opts.items() if _accepts(fn, k)})
        out.append(fn(**kw))
    return out


def _accepts(fn, key):
    target = getattr(fn, "__wrapped__", fn)
    return key in inspect.signature(target).parameters
