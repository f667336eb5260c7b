import math

import numpy as np
import pytest

from kclust.errors import ConfigError, InputError
from kclust.harness import standard_suite
from kclust.lp import prepare
from kclust.model import FractionalSolution, Instance, MetricSpace, nearest_fill
from kclust.preprocess import (ScaleConfig, check_core_mass, check_filter, check_laminar, check_near_representative,
                               check_quantized, consolidate_cores, default_epsilon, filter_clients, pipage_round,
                               pipage_units)
from kclust.verify import preprocess_means, suite_preprocess, type3_pair


def line_instance(clients, facilities, k=1, p=1.0):
    pts = np.asarray(list(clients) + list(facilities), dtype=float)[:, None]
    m = MetricSpace("euclidean", coords=pts)
    nc = len(clients)
    return Instance(m, np.arange(nc), np.arange(nc, nc + len(facilities)), k, p)


def with_opening(inst, y):
    y = np.asarray(y, dtype=float)
    return FractionalSolution(y, nearest_fill(inst.cf, y))


class FixedDraws:
    """Stand-in generator returning a fixed sequence of uniforms."""

    def __init__(self, values):
        self.values = list(values)

    def random(self):
        return self.values.pop(0)


# -- scale config -------------------------------------------------------------------

def test_scale_defaults_p1():
    cfg = ScaleConfig(epsilon=0.25)
    assert (cfg.c1, cfg.c2, cfg.c3, cfg.c4, cfg.c5) == (12, 51, 141, 89, 13)
    assert cfg.granularity == 1 / cfg.delta
    assert cfg.select_prob == pytest.approx(0.1)
    assert cfg.overrides == {}


def test_scale_overrides_are_recorded():
    cfg = ScaleConfig(epsilon=0.25, c1=3)
    assert cfg.overrides == {"c1": 3}
    rep = cfg.report()
    assert rep["overrides"] == {"c1": 3}
    assert "granularity" in rep["theoretical"]


def test_scale_theoretical_for_p2_does_not_overflow():
    cfg = ScaleConfig(epsilon=default_epsilon(2), p=2)
    assert "e+" in cfg.theoretical()["delta"]


@pytest.mark.parametrize("kw", [{"epsilon": 0.4}, {"epsilon": 0.3}, {"epsilon": 0.25, "p": 0.5},
                                {"epsilon": 0.25, "delta": 0}, {"epsilon": 0.25, "granularity": 0.3},
                                {"epsilon": 0.25, "L": 100.0}])
def test_scale_rejects_bad_values(kw):
    with pytest.raises(ConfigError):
        ScaleConfig(**kw)


def test_default_epsilon():
    assert default_epsilon(1) == 0.25
    assert default_epsilon(2) == pytest.approx(1 / 49)


# -- filtering -----------------------------------------------------------------------

def test_filter_one_client():
    inst = line_instance([0.0], [1.0, 2.0])
    sol = with_opening(inst, [0.5, 0.5])
    res = filter_clients(inst, sol, ScaleConfig(epsilon=0.25))
    assert res.reps == [0]
    assert res.balls[0].tolist() == [0, 1]
    assert res.ball_is_fj[0]


def test_filter_two_groups():
    inst = line_instance([0.0, 0.1, 1000.0], [1.0, 1001.0], k=2)
    sol = with_opening(inst, [1.0, 1.0])
    cfg = ScaleConfig(epsilon=0.25)
    res = filter_clients(inst, sol, cfg)
    assert len(res.reps) == 2
    assert res.rep_of[0] == res.rep_of[1] != res.rep_of[2]
    assert check_filter(res, inst, sol.y, cfg) == []
    a, b = res.reps
    assert not set(res.balls[a].tolist()) & set(res.balls[b].tolist())
    assert res.types.tolist() == [1, 1, 1]


def test_filter_type_classification():
    inst = line_instance([0.0], [0.001, 10.0])
    sol = with_opening(inst, [0.999, 0.001])
    cfg = ScaleConfig(epsilon=0.25)
    res = filter_clients(inst, sol, cfg)
    assert res.d_max[0] > cfg.radius_factor * res.d_av[0]
    assert res.types[0] == 2


def test_filter_properties_on_lp_solutions():
    for p in (1.0, 2.0):
        cfg = ScaleConfig(epsilon=default_epsilon(p), p=p)
        for _, inst in standard_suite(p, n=5):
            si, sol, _ = prepare(inst)
            res = filter_clients(si, sol, cfg)
            assert check_filter(res, si, sol.y, cfg) == []
            assert check_near_representative(res, si) == []
            assert check_core_mass(res, si, sol.y, cfg) == []
            d = res.to_dict()
            assert set(d) == {"representatives", "rep_of", "balls", "cores", "types"}


# -- core consolidation ------------------------------------------------------------------

def core_instance():
    inst = line_instance([0.0], [0.0, 0.0, 1.0])
    sol = with_opening(inst, [0.3, 0.1, 0.6])
    res = filter_clients(inst, sol, ScaleConfig(epsilon=0.25))
    return inst, sol, res


def test_consolidate_single_positive_core_unchanged():
    inst = line_instance([0.0], [0.0, 1.0])
    sol = with_opening(inst, [0.5, 0.5])
    res = filter_clients(inst, sol, ScaleConfig(epsilon=0.25))
    assert res.cores[0].tolist() == [0]
    out = consolidate_cores(sol.y, res, np.random.default_rng(0))
    assert out.tolist() == sol.y.tolist()


def test_consolidate_proportional_choice():
    _, sol, res = core_instance()
    assert res.cores[0].tolist() == [0, 1]
    g = np.random.default_rng(4)
    trials = 20000
    first = 0
    for _ in range(trials):
        out = consolidate_cores(sol.y, res, g)
        assert out[:2].sum() == pytest.approx(0.4) and 0.0 in out[:2]
        first += out[0] > 0
    se = math.sqrt(0.75 * 0.25 / trials)
    assert abs(first / trials - 0.75) <= 4 * se


def test_consolidate_marginals():
    _, sol, res = core_instance()
    g = np.random.default_rng(5)
    trials = 50000
    draws = np.array([consolidate_cores(sol.y, res, g) for _ in range(trials)])
    se = draws.std(axis=0, ddof=1) / math.sqrt(trials)
    # constant coordinates only carry summation round-off
    assert np.all(np.abs(draws.mean(axis=0) - sol.y) <= 4 * se + 1e-12)


# -- pipage --------------------------------------------------------------------------------

def test_pipage_multiples_unchanged():
    y = np.array([0.25, 0.5, 0.0, 0.75])
    for s in range(20):
        out = pipage_round(y, [np.array([0, 1])], 0.25, np.random.default_rng(s))
        assert out.tolist() == y.tolist()


def test_pipage_pair_branches():
    y = np.array([0.1, 0.4])
    fam = [np.array([0, 1])]
    assert pipage_round(y, fam, 0.25, FixedDraws([0.1])).tolist() == pytest.approx([0.25, 0.25])
    assert pipage_round(y, fam, 0.25, FixedDraws([0.5])).tolist() == pytest.approx([0.0, 0.5])


def test_pipage_pair_distribution():
    y = np.array([0.1, 0.4])
    fam = [np.array([0, 1])]
    g = np.random.default_rng(8)
    trials = 20000
    out = np.array([pipage_round(y, fam, 0.25, g) for _ in range(trials)])
    assert np.allclose(out.sum(axis=1), 0.5)
    even = np.mean(np.isclose(out[:, 0], 0.25))
    assert abs(even - 0.4) <= 4 * math.sqrt(0.24 / trials)
    se = out.std(axis=0, ddof=1) / math.sqrt(trials)
    assert np.all(np.abs(out.mean(axis=0) - y) <= 4 * se)


def test_pipage_quantization_every_run():
    fam = [np.arange(0, 5), np.arange(0, 2), np.arange(6, 9)]
    for r in range(10000):
        g = np.random.default_rng(r)
        y = g.random(10) * 0.7
        units = pipage_units(y, fam, 1 / 8, g)
        assert check_quantized(y, units, fam, 1 / 8) == []


def test_pipage_rejects_crossing_sets():
    with pytest.raises(InputError, match="sets 0 and 1"):
        pipage_units(np.full(3, 0.5), [np.array([0, 1]), np.array([1, 2])], 0.25, np.random.default_rng(0))
    with pytest.raises(InputError):
        check_laminar([np.array([5])], 3)


# -- cost measurements ---------------------------------------------------------------------

def test_type3_pair_classifies_both_clients_as_type3():
    for s in range(20):
        inst, sol = type3_pair(np.random.default_rng(s))
        cfg = ScaleConfig(epsilon=0.25)
        res = filter_clients(inst, sol, cfg)
        assert res.types.tolist() == [3, 3]
        assert sorted(res.reps) == [0, 1]
        assert check_filter(res, inst, sol.y, cfg) == []
        assert check_core_mass(res, inst, sol.y, cfg) == []


def test_type3_surrogate_caps_far_mass():
    inst, sol = type3_pair(np.random.default_rng(0))
    cfg = ScaleConfig(epsilon=0.25)
    res = filter_clients(inst, sol, cfg)
    means = preprocess_means(inst, sol, res, cfg, 500, np.random.default_rng(1))
    assert np.all(means["surrogate"] <= means["cost2"] + 1e-12)
    # every core is a single facility here, so consolidation leaves the cost untouched
    assert means["cost1"] == pytest.approx((inst.cf_p * sol.x).sum(axis=0))


def test_preprocess_suite_quick():
    res = suite_preprocess(trials=200, per_p=2, type3=3)
    assert res.passed, res.detail
    assert res.detail["type3_clients"] == 6
