import numpy as np
import pytest

from kclust.errors import InvariantViolation
from kclust.harness import euclidean, standard_suite
from kclust.lp import prepare
from kclust.model import Instance, MetricSpace
from kclust.nbrgraph import build_copies, build_copy_graph, partition
from kclust.preprocess import ScaleConfig, consolidate_cores, default_epsilon, filter_clients, pipage_units
from kclust.pseudoround import (KCenterInput, RoundingState, RunReport, apply_plan, check_finish, cover_radius,
                                f_new, iterate, kcenter_finish, plan_balanced, plan_unbalanced, pseudo_round,
                                raise_on)
from kclust.verify import suite_selection


def line_ff(pos):
    x = np.asarray(pos, dtype=float)
    return np.abs(x[:, None] - x[None])


def graph_of(units, delta, pos):
    copies = build_copies(np.asarray(units) / delta, delta)
    g = build_copy_graph(copies, line_ff(pos))
    return g, partition(g)


def colocated(pos, k=1):
    pts = np.asarray(pos, dtype=float)[:, None]
    m = MetricSpace("euclidean", coords=pts)
    n = len(pos)
    return Instance(m, np.arange(n), np.arange(n), k, 1.0)


CFG = ScaleConfig(epsilon=0.25)
HEAVY = ScaleConfig(epsilon=0.25, force_threshold=0.0)


# -- unbalanced update -----------------------------------------------------------------

def test_unbalanced_noop_when_all_balanced():
    g, part = graph_of([2, 2], 2, [0, 1])
    assert part.plus.size == part.minus.size == 0
    plan = plan_unbalanced(g, part, CFG, np.random.default_rng(0))
    assert plan.kind == "noop"
    state = RoundingState.start([2, 2], 2, line_ff([0, 1]))
    apply_plan(state, plan)
    assert len(state.copies) == 4 and not state.forced


def test_unbalanced_force_branch():
    g, part = graph_of([1, 2, 1], 2, [0, 1, 2])
    assert part.A <= CFG.force_threshold
    plan = plan_unbalanced(g, part, CFG, np.random.default_rng(0))
    assert plan.kind == "force"
    unbalanced = np.concatenate([part.plus, part.minus])
    assert sorted(plan.forced.tolist()) == sorted(set(g.fac[unbalanced].tolist()))
    state = RoundingState.start([1, 2, 1], 2, line_ff([0, 1, 2]))
    apply_plan(state, plan)
    assert state.forced == {0, 1, 2}
    assert len(state.copies) == 4 - unbalanced.size


def test_heavy_negative_copy_and_fictitious_sources():
    # copies a(0) b0 b1(1) c(2), delta 2: b0 feeds a, b1, c and itself
    g, part = graph_of([1, 2, 1], 2, [0, 1, 2])
    assert part.minus.tolist() == [1]
    assert part.imb.tolist() == [0.5, -1.0, 0.0, 0.5]
    plan = plan_unbalanced(g, part, HEAVY, np.random.default_rng(3), audit=True)
    assert plan.kind == "unbalanced"
    assert plan.drop.tolist() == [1] and plan.forced.tolist() == [1]
    assert plan.info["R"] == 1 and plan.info["fict"] == 3
    assert plan.info["fict_ok"]
    lip = plan.info["lipschitz"]
    assert lip["dz_units"] <= lip["kappa_units"]


def test_fictitious_restoration_random_states():
    checked = 0
    for s in range(200):
        g_ = np.random.default_rng(s)
        inst = euclidean(1, 6, 2, s, 1)
        units = g_.integers(0, 5, 6)
        units[0] = max(units[0], 4)
        copies = build_copies(units / 4, 4)
        g = build_copy_graph(copies, inst.ff)
        part = partition(g)
        plan = plan_unbalanced(g, part, ScaleConfig(epsilon=0.25, delta=4, force_threshold=0.0), g_, audit=True)
        if plan.kind == "unbalanced":
            checked += 1
            assert plan.info["fict_ok"]
            lip = plan.info.get("lipschitz")
            if lip:
                assert lip["dz_units"] <= lip["kappa_units"]
    assert checked > 50


# -- balanced update -------------------------------------------------------------------

def test_balanced_noop_without_zero_copies():
    g, part = graph_of([1, 2, 1], 2, [0, 1, 2])
    part.zero = np.zeros(0, dtype=np.int64)
    plan = plan_balanced(g, part, CFG, np.random.default_rng(0))
    assert plan.chosen.size == 0 and plan.removed.size == 0 and plan.opened.size == 0


def test_balanced_conflicts_never_both_chosen():
    cfg = ScaleConfig(epsilon=0.25, L=0.49 * 16)
    for s in range(200):
        g_ = np.random.default_rng(s)
        inst = euclidean(1, 6, 2, s, 2)
        units = g_.integers(0, 17, 6)
        units[0] = 16
        g = build_copy_graph(build_copies(units / 16, 16), inst.ff)
        part = partition(g)
        plan = plan_balanced(g, part, cfg, g_)
        ch = plan.chosen.tolist()
        for a in range(len(ch)):
            for b in range(a + 1, len(ch)):
                assert not (g.adj[ch[a]] & g.adj[ch[b]]).any()
                assert g.fac[ch[a]] != g.fac[ch[b]]


def test_balanced_keeps_copy_count():
    for s in range(500):
        g_ = np.random.default_rng(s)
        n = int(g_.integers(3, 8))
        inst = euclidean(1, n, 2, s, 1)
        units = g_.integers(0, 17, n)
        units[0] = 16
        state = RoundingState.start(units, 16, inst.ff)
        g = build_copy_graph(state.copies, inst.ff)
        before = len(state.copies)
        rec = apply_plan(state, plan_balanced(g, partition(g), CFG, g_))
        assert rec["size_after"] == before
        assert rec["z_units"] == 0


# -- iteration -------------------------------------------------------------------------

def test_zero_iterations_keep_opening():
    units = np.array([3, 16, 5, 8])
    state = RoundingState.start(units, 16, line_ff([0, 1, 2, 3]))
    ybar, log = iterate(state, CFG, np.random.default_rng(0), T=0)
    assert ybar.tolist() == (units / 16).tolist()
    assert not state.forced and log == []


def test_integral_blocks_stay_integral():
    units = np.array([16, 0, 16, 16, 0])
    ff = line_ff([0, 1, 2, 5, 9])
    g = build_copy_graph(build_copies(units / 16, 16), ff)
    assert np.all(g.out_degree == 16)
    state = RoundingState.start(units, 16, ff)
    rng = np.random.default_rng(1)
    for _ in range(30):
        ybar, _ = iterate(state, CFG, rng, T=1)
        assert np.all((ybar == 0) | (ybar == 1))
        assert ybar.sum() == 3


def test_iterate_stops_when_copies_run_out():
    state = RoundingState.start([1], 16, np.zeros((1, 1)))
    iterate(state, CFG, np.random.default_rng(0), T=5)
    assert state.log[-1]["kind"] == "stop"


# -- k-center finish ---------------------------------------------------------------------

def test_kcenter_integral_opening():
    inst = colocated([0, 1, 5, 6], k=2)
    ybar = np.array([1.0, 0.0, 0.0, 1.0])
    kc = KCenterInput.build(ybar, inst)
    res = kcenter_finish(kc, inst)
    assert res.solution.open == (0, 3)
    assert np.all(res.solution.distances <= kc.radius + 1e-12)
    assert check_finish(res, kc, inst) == []


def test_kcenter_one_client_spread_mass():
    m = MetricSpace("euclidean", coords=np.array([[0.0], [-2.0], [2.0], [1.0]]))
    inst = Instance(m, [0], [1, 2, 3], 1, 1.0)
    ybar = np.array([0.4, 0.4, 0.2])
    kc = KCenterInput.build(ybar, inst)
    assert kc.radius[0] == pytest.approx(2.0)
    res = kcenter_finish(kc, inst)
    assert len(res.solution.open) == 1
    assert res.solution.distances[0] <= 2.0 + 1e-12


def test_kcenter_audit_on_random_residuals():
    for s in range(100):
        g_ = np.random.default_rng(s)
        inst = euclidean(10, 8, 2, s, 2)
        ybar = g_.uniform(0, 1, 8)
        ybar = np.minimum(ybar * 2.5 / ybar.sum(), 1)
        kc = KCenterInput.build(ybar, inst)
        res = kcenter_finish(kc, inst)
        assert check_finish(res, kc, inst) == []
        # selected balls are disjoint and each holds a unit of mass
        assert len(res.selected) <= int(np.floor(ybar.sum() + 1e-9))


def test_cover_radius_matches_definition():
    inst = colocated([0, 1, 3])
    r = cover_radius(inst, np.array([0.5, 0.25, 0.25]))
    # client at 1 needs radius 2 to reach the facility at 3
    assert r.tolist() == [3.0, 2.0, 3.0]


# -- whole runs -----------------------------------------------------------------------------

def run_inputs(inst, cfg, seed):
    si, sol, split = prepare(inst)
    g = np.random.default_rng(seed)
    filt = filter_clients(si, sol, cfg)
    units = pipage_units(consolidate_cores(sol.y, filt, g), filt.laminar_family(), cfg.granularity, g)
    return si, units, g


def test_pseudo_round_report_and_backup_distance():
    for p in (1.0, 2.0):
        cfg = ScaleConfig(epsilon=default_epsilon(p), p=p)
        for n, (_, inst) in enumerate(standard_suite(p, n=4)):
            si, units, g = run_inputs(inst, cfg, n)
            sol, rep, state = pseudo_round(si, units, cfg, g, seed=n)
            assert isinstance(rep, RunReport)
            assert rep.violations == [] and rep.backup_ok
            assert rep.final_open_count == len(sol.open)
            assert rep.config["delta"] == cfg.delta
            d = np.array(rep.per_client)
            assert np.all(d[:, 1] <= 3 * d[:, 2] + 1e-9)
            raise_on(rep)


def test_raise_on_violation():
    rep = RunReport(0, {}, 0, 1, 1, [], 0.0, True, False, ["bad"])
    with pytest.raises(InvariantViolation):
        raise_on(rep)


def test_f_new_value():
    # (1 + 1/4) * ((2/2) * (1 + 4) + (1 + 2*0 - 1) * 3)  with eps^c5 negligible
    got = f_new([1.0, 2.0], 3.0, 2.0, 2, 2, 0.25, 1000)
    assert got == pytest.approx(1.25 * (5.0 + 0.0))
    got = f_new([1.0], 3.0, 2.0, 1, 2, 0.25, 1000)
    assert got == pytest.approx(1.25 * (1.0 + 0.5 * 3.0))


def test_selection_frequencies_within_brackets():
    res = suite_selection(trials=1500, states=2)
    assert res.passed, res.detail
    lo, hi = res.detail["unbalanced_bracket"]
    assert lo == pytest.approx(0.1) and hi >= lo
