import numpy as np
import pytest

from kclust.errors import InputError, SizeError
from kclust.harness import euclidean, line
from kclust.lmp import alpha_general
from kclust.model import Instance, MetricSpace
from kclust.reduction import (ReductionConfig, brute_force_opt, delta_for, greedy_drop, is_dense, is_sparse,
                              pseudo_to_true, reduce_to_sparse, solution_cost, solve_sparse, sparse_cost_bound,
                              sparse_witnesses, t_for)
from oracles import brute_force


def split_points(clients, facilities, k, p=1.0):
    pts = np.asarray(list(clients) + list(facilities), dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    m = MetricSpace("euclidean", coords=pts)
    nc = len(clients)
    return Instance(m, np.arange(nc), np.arange(nc, nc + len(facilities)), k, p)


# -- brute force -----------------------------------------------------------------------

def test_brute_force_all_open():
    inst = euclidean(6, 4, 2, 1, 4, 2.0)
    sol = brute_force_opt(inst)
    assert sol.open == (0, 1, 2, 3)
    assert sol.total_cost == pytest.approx(inst.cf_p.min(axis=0).sum())


def test_brute_force_path_median():
    sol = brute_force_opt(line(3, k=1, p=1))
    assert sol.open == (1,) and sol.total_cost == pytest.approx(2.0)


def test_brute_force_k1_p2_against_enumeration():
    for seed in range(10):
        inst = euclidean(8, 6, 2, seed, 1, 2.0)
        sol = brute_force_opt(inst)
        cost, S = brute_force(inst.cf.tolist(), 1, 2.0)
        assert sol.open == S and sol.total_cost == pytest.approx(cost)
        # for k = 1, p = 2 the best candidate minimizes the distance to the centroid
        centroid = inst.metric.coords[inst.clients].mean(axis=0)
        fac = inst.metric.coords[inst.facilities]
        assert sol.open[0] == int(np.argmin(((fac - centroid) ** 2).sum(axis=1)))


def test_brute_force_matches_oracle_k2():
    for seed in range(10):
        inst = euclidean(7, 6, 2, seed, 2, 1.0 + seed % 2)
        cost, S = brute_force(inst.cf.tolist(), 2, inst.p)
        assert brute_force_opt(inst).total_cost == pytest.approx(cost, rel=1e-12)


def test_brute_force_size_limit():
    inst = euclidean(2, 40, 2, 0, 10)
    with pytest.raises(SizeError):
        brute_force_opt(inst)


# -- density -------------------------------------------------------------------------

def test_member_of_opt_is_never_dense():
    inst = euclidean(6, 5, 2, 2, 2)
    for A in (0.0, 1.0, 100.0):
        assert not is_dense(1, A, [1, 3], inst)


def test_isolated_facility_not_dense():
    inst = split_points([0.0, 0.1], [0.0, 50.0], 1)
    assert not is_dense(1, 0.0, [0], inst)


@pytest.mark.parametrize("m, D, p, A", [(3, 3.0, 1, 5.9), (3, 3.0, 1, 6.0), (2, 3.0, 2, 7.9), (2, 3.0, 2, 8.0)])
def test_cluster_density_formula(m, D, p, A):
    # m clients on facility 1, optimum at distance D
    inst = split_points([D] * m, [0.0, D], 1, p)
    want = ((2 / 3) * D) ** p * m > A
    assert is_dense(1, A, [0], inst) == want


def test_is_sparse():
    inst = split_points([3.0, 3.0, 3.0], [0.0, 3.0], 1)
    assert not is_sparse(inst, 5.9, [0])
    assert is_sparse(inst, 6.0, [0])


# -- reduction to sparse instances ----------------------------------------------------------

def test_reduce_with_t_zero_keeps_instance():
    inst = euclidean(5, 5, 2, 0, 2)
    subs = reduce_to_sparse(inst, 0)
    assert len(subs) == 1 and subs[0].kept == (0, 1, 2, 3, 4)


def test_reduce_outputs_are_subsets():
    inst = euclidean(6, 6, 2, 3, 2)
    subs = reduce_to_sparse(inst, 3)
    assert len(subs) > 1
    for s in subs:
        assert set(s.kept) <= set(range(6)) and len(s.kept) >= inst.k
        assert s.instance.n_facilities == len(s.kept)
        assert s.to_parent(range(len(s.kept))) == s.kept


def test_reduce_rejects_negative_t():
    with pytest.raises(InputError):
        reduce_to_sparse(line(3), -1)


def test_some_output_is_an_optimum_preserving_sparse_instance():
    for seed in range(5):
        inst = euclidean(8, 6, 2, seed, 2)
        opt = brute_force_opt(inst)
        t = 6
        subs = reduce_to_sparse(inst, t)
        wits = sparse_witnesses(subs, inst, opt.open, opt.total_cost, t)
        assert wits
        for w in wits:
            local = w.from_parent(opt.open)
            assert brute_force_opt(w.instance).total_cost == pytest.approx(opt.total_cost)
            assert is_sparse(w.instance, opt.total_cost / t, local)


# -- sparse solver -------------------------------------------------------------------------

def test_solve_sparse_exact_k_unchanged():
    inst = euclidean(6, 5, 2, 0, 2)
    cfg = ReductionConfig(0.1, 10, 0, 1.0)
    sol, trace = solve_sparse(inst, [1, 3], cfg)
    assert sol.open == (1, 3) and trace.dropped == []


def test_greedy_drop_removes_redundant_facility():
    inst = euclidean(8, 6, 2, 4, 2)
    opt = brute_force_opt(inst)
    extra = next(i for i in range(6) if i not in opt.open)
    T = sorted(opt.open + (extra,))
    B = 1e9
    Tp, dropped = greedy_drop(inst, T, B)
    assert len(Tp) == 2
    assert solution_cost(inst, Tp) <= solution_cost(inst, T) + B
    assert solution_cost(inst, Tp) == pytest.approx(opt.total_cost)


def test_sparse_solver_bound_with_one_extra():
    for seed in range(10):
        inst = euclidean(9, 6, 2, seed, 2, 1.0 + seed % 2)
        opt = brute_force_opt(inst)
        alpha = alpha_general(inst.p)
        delta = delta_for(alpha, inst.p)
        t = t_for(alpha, 0.25, 1, inst.p, delta)
        T = tuple(sorted(np.random.default_rng(seed).choice(6, 3, replace=False).tolist()))
        cfg = ReductionConfig(delta, t, 1, opt.total_cost / t, theoretical=True)
        sol, trace = solve_sparse(inst, T, cfg)
        bound = sparse_cost_bound(solution_cost(inst, T), 1, trace.B, opt.total_cost, delta, inst.p)
        assert len(sol.open) == 2
        assert sol.total_cost <= bound


def test_reduction_config_validation():
    with pytest.raises(InputError):
        ReductionConfig(0.2, 5, 1, 1.0)
    with pytest.raises(InputError):
        ReductionConfig(0.1, 0, 1, 1.0)
    cfg = ReductionConfig(0.1, 1, 1, 1.0, theoretical=True)
    with pytest.raises(InputError):
        cfg.check_t(1)


# -- end to end conversion ----------------------------------------------------------------

def test_delta_for_p1_alpha2():
    assert delta_for(2.0, 1) == pytest.approx(1 / 9)
    d = delta_for(5.0, 2)
    assert ((1 / 3 + d) / (1 / 3 - d)) ** 2 == pytest.approx(5.0)


def test_delta_is_capped_below_one_sixth():
    assert delta_for(100.0, 1) < 1 / 6


def test_optimal_k_solution_is_returned():
    inst = euclidean(6, 5, 2, 2, 2)
    opt = brute_force_opt(inst)
    sol, rep = pseudo_to_true(inst, opt.open, 2.0, 0.25, opt=opt.total_cost)
    assert sol.open == opt.open and rep.c == 0


def test_conversion_ratio_on_small_instances():
    for seed in range(6):
        p = 1.0 + seed % 2
        inst = euclidean(8, 6, 2, seed, 2, p)
        opt = brute_force_opt(inst)
        alpha = alpha_general(p)
        rest = [i for i in range(6) if i not in opt.open]
        T = tuple(sorted(opt.open + (rest[0],)))
        sol, rep = pseudo_to_true(inst, T, alpha, 0.25, opt=opt.total_cost)
        assert len(sol.open) == 2
        assert sol.total_cost <= (alpha + 0.25) * opt.total_cost + 1e-12
        assert rep.a_source == "oracle"


def test_conversion_needs_a_reference_value():
    inst = euclidean(6, 5, 2, 2, 2)
    with pytest.raises(InputError):
        pseudo_to_true(inst, (0, 1, 2), 2.0, 0.25)
    with pytest.raises(InputError):
        pseudo_to_true(inst, (0,), 2.0, 0.25, opt=1.0)
