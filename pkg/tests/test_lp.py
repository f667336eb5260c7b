from fractions import Fraction

import numpy as np
import pytest

import kclust.lp as lpmod
from kclust.errors import SolverError
from kclust.harness import euclidean, graph_metric, line
from kclust.lp import nearest_mass_sets, prepare, solve_relaxation, split_for_all_or_nothing
from kclust.model import (FractionalSolution, Instance, MetricSpace, client_costs, cost_under_opening,
                          fractional_cost, nearest_fill)
from oracles import clustering_lp_value


def test_k_equals_facilities_assigns_nearest():
    inst = euclidean(7, 4, 2, 3, 4, 2.0)
    sol = solve_relaxation(inst)
    assert fractional_cost(inst, sol) == pytest.approx(inst.cf_p.min(axis=0).sum(), abs=1e-9)


def test_one_client_two_facilities():
    m = MetricSpace("euclidean", coords=[[0.0], [1.0], [2.0]])
    inst = Instance(m, [0], [1, 2], 1, 1.0)
    sol = solve_relaxation(inst)
    assert sol.y.tolist() == pytest.approx([1.0, 0.0], abs=1e-9)
    assert fractional_cost(inst, sol) == pytest.approx(1.0)


def test_unit_square_matches_exact_simplex():
    pts = [(0, 0), (1, 0), (0, 1), (1, 1)]
    dp = [[(a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 for b in pts] for a in pts]
    exact = clustering_lp_value(dp, 2)
    m = MetricSpace("euclidean", coords=np.asarray(pts, dtype=float))
    inst = Instance(m, np.arange(4), np.arange(4), 2, 2.0)
    assert exact == Fraction(2)
    assert fractional_cost(inst, solve_relaxation(inst)) == pytest.approx(float(exact), abs=1e-9)


@pytest.mark.parametrize("k", [1, 2])
def test_line_matches_exact_simplex(k):
    inst = line(3, k=k, p=1)
    dp = [[int(v) for v in row] for row in inst.cf_p]
    exact = clustering_lp_value(dp, k)
    assert fractional_cost(inst, solve_relaxation(inst)) == pytest.approx(float(exact), abs=1e-9)


def test_fractional_instance_matches_exact_simplex():
    # a graph metric with a genuine integrality gap, distances made rational
    inst = graph_metric(5, 0.3, 4, 2, 1.0)
    d = np.round(inst.ff * 8) / 8
    m = MetricSpace("matrix", matrix=d)
    inst = Instance(m, np.arange(5), np.arange(5), 2, 1.0)
    dp = [[Fraction(v).limit_denominator(64) for v in row] for row in inst.cf_p]
    exact = clustering_lp_value(dp, 2)
    got = fractional_cost(inst, solve_relaxation(inst))
    assert got == pytest.approx(float(exact), abs=1e-9)


def test_solution_satisfies_constraints_exactly():
    for seed in range(5):
        inst = graph_metric(8, 0.25, seed, 2)
        sol = solve_relaxation(inst)
        sol.validate(inst.k)
        assert np.all(sol.y >= 0) and not np.any(np.signbit(sol.y))


def test_solver_failure_raises(monkeypatch):
    class Bad:
        status, message, nit, con, slack, x, fun = 4, "numerical trouble", 17, None, None, None, None

    monkeypatch.setattr(lpmod, "linprog", lambda *a, **kw: Bad())
    with pytest.raises(SolverError) as info:
        solve_relaxation(line(3))
    assert info.value.iterations == 17


# -- splitting ------------------------------------------------------------------

def test_split_identity_on_all_or_nothing():
    inst = line(3, k=3)
    sol = FractionalSolution(np.ones(3), np.eye(3))
    new, split = split_for_all_or_nothing(sol, inst)
    assert split.original.tolist() == [0, 1, 2]
    assert np.array_equal(new.x, sol.x)


def test_split_partial_assignment():
    m = MetricSpace("euclidean", coords=[[0.0], [1.0], [5.0]])
    inst = Instance(m, [0, 1], [2, 0], 1, 1.0)
    # facility 0 (at 5) serves client 0 with 0.4, facility 1 (at 0) covers the rest
    sol = FractionalSolution([1.0, 0.6], [[0.4, 1.0], [0.6, 0.0]])
    new, split = split_for_all_or_nothing(sol, inst)
    si = split.expand(inst)
    for i, j, v in new.items():
        assert v == pytest.approx(new.y[i], abs=1e-12)
    split.check(sol.y)
    assert fractional_cost(si, new) == pytest.approx(fractional_cost(inst, sol), abs=1e-12)
    assert split.share[split.original == 0].tolist() == pytest.approx([0.4, 0.6])


def test_split_preserves_client_costs(rng):
    for seed in range(10):
        inst = euclidean(6, 5, 2, seed, 2, 1.0 + seed % 2)
        y = rng.uniform(0.1, 1, 5)
        y = np.minimum(y * 2 / y.sum(), 1)
        sol = FractionalSolution(y, nearest_fill(inst.cf, y))
        new, split = split_for_all_or_nothing(sol, inst)
        si = split.expand(inst)
        assert np.allclose(client_costs(si, new), client_costs(inst, sol), rtol=0, atol=1e-12)
        x = new.x
        assert np.all((np.abs(x) <= 1e-12) | (np.abs(x - new.y[:, None]) <= 1e-12))


def test_prepare_returns_split_instance():
    inst = graph_metric(8, 0.25, 3, 2)
    si, sol, split = prepare(inst)
    assert si.n_facilities == split.original.size
    assert fractional_cost(si, sol) == pytest.approx(fractional_cost(inst, solve_relaxation(inst)), abs=1e-9)


# -- nearest mass sets ------------------------------------------------------------

def test_nearest_mass_set_integral():
    inst = line(3, k=1)
    sol = FractionalSolution([0.0, 1.0, 0.0], nearest_fill(inst.cf, np.array([0.0, 1.0, 0.0])))
    nms = nearest_mass_sets(sol, inst)
    assert all(m.tolist() == [1] for m in nms.members)


def test_nearest_mass_set_prefix():
    m = MetricSpace("euclidean", coords=[[0.0], [1.0], [2.0]])
    inst = Instance(m, [0], [1, 2], 1, 1.0)
    y = np.array([0.7, 0.7])
    nms = nearest_mass_sets(FractionalSolution(y, nearest_fill(inst.cf, y)), inst)
    assert nms.members[0].tolist() == [0, 1]
    assert nms.mass[0].tolist() == pytest.approx([0.7, 0.3])
    assert nms.d_max[0] == pytest.approx(2.0)


def test_nearest_mass_cost_identity(rng):
    for seed in range(10):
        inst = euclidean(5, 6, 2, seed, 2, 2.0)
        y = np.minimum(rng.uniform(0.1, 1, 6) * 1.5, 1)
        sol = FractionalSolution(y, nearest_fill(inst.cf, y))
        nms = nearest_mass_sets(sol, inst)
        for j in range(inst.n_clients):
            direct = float((nms.mass[j] * inst.cf_p[nms.members[j], j]).sum())
            assert cost_under_opening(inst, j, y) == pytest.approx(direct, abs=1e-12)
