"""Instance generators, the seeded end-to-end pipeline and statistics.

Every random draw comes from ``rng.stream(base_seed, tag, trial)``, so a
report is a pure function of the instance, the configuration and the base
seed.
"""
import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

from . import rng as rngmod
from .errors import ConfigError, KClustError
from .lmp import alpha_general, lmp_round
from .lp import prepare, solve_relaxation
from .model import Instance, MetricSpace, fractional_cost, integral_cost
from .preprocess import ScaleConfig, consolidate_cores, default_epsilon, filter_clients, pipage_units
from .pseudoround import pseudo_round
from .reduction import brute_force_opt, pseudo_to_true

ORACLE_LIMIT = 20000


# -- generators ---------------------------------------------------------------

def euclidean(n_c=12, n_f=8, dim=2, seed=0, k=2, p=1.0):
    g = np.random.default_rng(seed)
    pts = g.random((n_c + n_f, dim))
    m = MetricSpace("euclidean", coords=pts)
    return Instance(m, np.arange(n_c), np.arange(n_c, n_c + n_f), k, p)


def graph_metric(n=8, edge_density=0.3, seed=0, k=2, p=1.0):
    """Shortest-path metric of a random connected graph with weights in [1, 2)."""
    g = np.random.default_rng(seed)
    w = np.zeros((n, n))
    upper = np.triu(g.random((n, n)) < edge_density, 1)
    w[upper] = 1 + g.random(int(upper.sum()))
    # a random spanning path keeps the graph connected
    perm = g.permutation(n)
    for a, b in zip(perm[:-1], perm[1:]):
        if w[a, b] == 0 and w[b, a] == 0:
            w[min(a, b), max(a, b)] = 1 + g.random()
    w = w + w.T
    graph = csr_matrix(w)
    assert connected_components(graph, directed=False)[0] == 1
    d = shortest_path(graph, directed=False)
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    m = MetricSpace("matrix", matrix=d)
    return Instance(m, np.arange(n), np.arange(n), k, p)


def line(n=3, k=1, p=1.0):
    pts = np.arange(n, dtype=float)[:, None]
    m = MetricSpace("euclidean", coords=pts)
    return Instance(m, np.arange(n), np.arange(n), k, p)


def clustered(centers=3, spread=0.05, seed=0, per=4, k=2, p=1.0, dim=2):
    g = np.random.default_rng(seed)
    mid = g.random((centers, dim))
    pts = np.repeat(mid, per, axis=0) + spread * g.standard_normal((centers * per, dim))
    m = MetricSpace("euclidean", coords=pts)
    n = centers * per
    return Instance(m, np.arange(n), np.arange(n), k, p)


GENERATORS = {
    "euclidean": (euclidean, {"n_c": int, "n_f": int, "dim": int, "seed": int, "k": int, "p": float}),
    "graph_metric": (graph_metric, {"n": int, "edge_density": float, "seed": int, "k": int, "p": float}),
    "line": (line, {"n": int, "k": int, "p": float}),
    "clustered": (clustered, {"centers": int, "spread": float, "seed": int, "per": int, "k": int,
                              "p": float, "dim": int}),
}


def parse_spec(spec: str):
    """'name:key=val,key=val' -> (name, kwargs)."""
    name, _, rest = spec.partition(":")
    name = name.strip()
    if name not in GENERATORS:
        raise ConfigError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}")
    types = GENERATORS[name][1]
    kwargs = {}
    for part in filter(None, (s.strip() for s in rest.split(","))):
        key, eq, val = part.partition("=")
        if not eq or key not in types:
            raise ConfigError(f"bad field {part!r} for generator {name}")
        try:
            kwargs[key] = types[key](val)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {val!r}") from exc
    return name, kwargs


def generate_instance(spec) -> Instance:
    if isinstance(spec, str):
        name, kwargs = parse_spec(spec)
    else:
        spec = dict(spec)
        name = spec.pop("name", None)
        if name not in GENERATORS:
            raise ConfigError(f"unknown generator {name!r}")
        kwargs = spec
    try:
        return GENERATORS[name][0](**kwargs)
    except KClustError as exc:
        raise ConfigError(f"generator {name}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"generator {name}: {exc}") from exc


def mixed_suite(p=1.0, n=24, seed=0):
    """A fixed mix of small instances from every generator."""
    out = []
    for s in range(n):
        kind = s % 4
        k = 2 + (s // 4) % 2
        if kind == 0:
            spec = f"euclidean:n_c=10,n_f=7,dim=2,seed={seed + s},k={k},p={p}"
        elif kind == 1:
            spec = f"graph_metric:n=8,edge_density=0.3,seed={seed + s},k={k},p={p}"
        elif kind == 2:
            spec = f"clustered:centers=3,spread=0.08,per=3,seed={seed + s},k={k},p={p}"
        else:
            spec = f"line:n={5 + (s // 4) % 4},k={k},p={p}"
        out.append((spec, generate_instance(spec)))
    return out


def has_gap(inst: Instance, rel=1e-6):
    """True when the LP optimum is strictly below the integral optimum."""
    lp = fractional_cost(inst, solve_relaxation(inst))
    return lp < brute_force_opt(inst).total_cost * (1 - rel)


def standard_suite(p=1.0, n=25, start=0):
    """The first n sparse random graph metrics (8 nodes, k = 2) whose LP has a gap.

    Random Euclidean instances of this size almost always have an integral
    LP optimum, which would leave every rounding step with nothing to do.
    """
    out = []
    s = start
    while len(out) < n:
        spec = f"graph_metric:n=8,edge_density=0.25,seed={s},k=2,p={p}"
        inst = generate_instance(spec)
        if has_gap(inst):
            out.append((spec, inst))
        s += 1
    return out


# -- statistics ---------------------------------------------------------------

@dataclass
class StatSummary:
    name: str
    n: int
    mean: float
    stdev: float
    stderr: float
    min: float
    max: float

    @classmethod
    def of(cls, name, values):
        v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=float)
        n = int(v.size)
        if n == 0:
            return cls(name, 0, math.nan, math.nan, math.nan, math.nan, math.nan)
        sd = float(v.std(ddof=1)) if n > 1 else 0.0
        return cls(name, n, float(v.mean()), sd, sd / math.sqrt(n), float(v.min()), float(v.max()))


# -- pipeline -----------------------------------------------------------------

STAGES = ("lp", "lmp", "round", "reduce")


@dataclass
class ExperimentConfig:
    instance: Optional[str] = None      # path to an instance file
    generator: Optional[str] = None     # or a generator spec
    stages: tuple = STAGES
    trials: int = 1
    seed: int = 0
    k: Optional[int] = None
    p: Optional[float] = None
    eps: float = 0.25                   # slack of the final k-solution
    scale: Dict[str, float] = field(default_factory=dict)
    oracle: bool = True
    out: Optional[str] = None

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if (self.instance is None) == (self.generator is None):
            raise ConfigError("give exactly one of an instance file or a generator spec")
        bad = set(self.stages) - set(STAGES)
        if bad:
            raise ConfigError(f"unknown stages {sorted(bad)}")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")

    def load(self) -> Instance:
        inst = Instance.load(self.instance) if self.instance else generate_instance(self.generator)
        if self.p is not None:
            inst = Instance(inst.metric, inst.clients, inst.facilities, inst.k, self.p)
        if self.k is not None:
            inst = inst.with_k(self.k)
        return inst

    def scale_config(self, p) -> ScaleConfig:
        kw = dict(self.scale)
        eps = kw.pop("epsilon", None) or default_epsilon(p)
        try:
            return ScaleConfig(epsilon=eps, p=p, **kw)
        except TypeError as exc:
            raise ConfigError(f"unknown scale setting: {exc}") from exc

    def to_dict(self):
        d = asdict(self)
        d["stages"] = list(self.stages)
        return d


def oracle_value(inst: Instance):
    if math.comb(inst.n_facilities, inst.k) > ORACLE_LIMIT:
        return None
    return brute_force_opt(inst)


def run_trial(inst: Instance, prep, cfg: ExperimentConfig, scale: ScaleConfig, trial: int, opt=None):
    """One seeded pass through the selected stages; returns a flat record."""
    split_inst, split_sol, split = prep
    lp_obj = fractional_cost(split_inst, split_sol)
    rec = {"trial": trial, "status": "ok", "lp_objective": lp_obj}
    alpha = alpha_general(inst.p)
    stage = "lmp"
    try:
        if "lmp" in cfg.stages:
            g = rngmod.stream(cfg.seed, "lmp", trial)
            run = lmp_round(split_sol.y, split_inst.ff, g, cf=split_inst.cf,
                            fsets=split_sol.x > 0, p=inst.p)
            opened = split.to_original(run.open)
            rec["lmp_open"] = len(opened)
            rec["lmp_cost"] = integral_cost(inst, opened).total_cost if opened else math.inf
            rec["lmp_ratio_lp"] = rec["lmp_cost"] / lp_obj if lp_obj > 0 else 1.0
        if "round" not in cfg.stages:
            return rec
        stage = "round"
        g = rngmod.stream(cfg.seed, "preprocess", trial)
        filt = filter_clients(split_inst, split_sol, scale)
        y1 = consolidate_cores(split_sol.y, filt, g)
        units = pipage_units(y1, filt.laminar_family(), scale.granularity, g)
        g = rngmod.stream(cfg.seed, "pseudo-round", trial)
        sol, report, _ = pseudo_round(split_inst, units, scale, g, seed=cfg.seed)
        if report.violations:
            rec["status"] = "invariant: " + "; ".join(report.violations)
            return rec
        T = split.to_original(sol.open)
        rec.update(pseudo_open=len(T), forced=report.forced_count, budget_ok=report.budget_ok,
                   budget_used=report.budget_used, pseudo_cost=integral_cost(inst, T).total_cost)
        final = T
        if "reduce" in cfg.stages and len(T) > inst.k:
            stage = "reduce"
            opt_cost = opt.total_cost if opt is not None else None
            res, conv = pseudo_to_true(inst, T, alpha, cfg.eps, opt=opt_cost,
                                       lower_bound=None if opt_cost is not None else lp_obj)
            final = res.open
            rec["reduction_A_source"] = conv.a_source
        fin = integral_cost(inst, final)
        rec.update(final_open=len(fin.open), final_cost=fin.total_cost,
                   ratio_lp=fin.total_cost / lp_obj if lp_obj > 0 else 1.0)
        if opt is not None:
            rec["ratio_opt"] = fin.total_cost / opt.total_cost if opt.total_cost > 0 else 1.0
            if "lmp_cost" in rec:
                rec["lmp_ratio_opt"] = rec["lmp_cost"] / opt.total_cost if opt.total_cost > 0 else 1.0
    except KClustError as exc:
        rec["status"] = f"{stage}: {type(exc).__name__}: {exc}"
    return rec


METRICS = ("lp_objective", "lmp_open", "lmp_cost", "lmp_ratio_lp", "lmp_ratio_opt", "pseudo_open",
           "forced", "budget_used", "final_open", "final_cost", "ratio_lp", "ratio_opt")


def run_pipeline(cfg: ExperimentConfig):
    inst = cfg.load()
    scale = cfg.scale_config(inst.p)
    t0 = time.perf_counter()
    prep = prepare(inst)
    opt = oracle_value(inst) if cfg.oracle else None
    records = [run_trial(inst, prep, cfg, scale, t, opt) for t in range(cfg.trials)]
    records.sort(key=lambda r: r["trial"])
    summary = {m: asdict(StatSummary.of(m, [r.get(m) for r in records])) for m in METRICS
               if any(m in r for r in records)}
    report = {
        "config": cfg.to_dict(),
        "scale": scale.report(),
        "instance": {"n_clients": inst.n_clients, "n_facilities": inst.n_facilities,
                     "k": inst.k, "p": inst.p},
        "oracle": None if opt is None else {"cost": opt.total_cost, "open": list(opt.open)},
        "trials": records,
        "summary": summary,
        "failed": sum(r["status"] != "ok" for r in records),
    }
    report["_elapsed"] = time.perf_counter() - t0
    return report


def records_csv(records) -> str:
    keys = []
    for r in records:
        keys += [k for k in r if k not in keys]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys)
    w.writeheader()
    for r in records:
        w.writerow(r)
    return buf.getvalue()


def write_report(report, out):
    """Summary as JSON at ``out`` and per-trial rows next to it as CSV."""
    body = {k: v for k, v in report.items() if not k.startswith("_")}
    with open(out, "w") as fh:
        json.dump(body, fh, indent=2, default=float)
    stem = out[:-5] if out.endswith(".json") else out
    with open(stem + ".csv", "w") as fh:
        fh.write(records_csv(report["trials"]))
