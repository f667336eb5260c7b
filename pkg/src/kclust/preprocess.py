"""Filtering, core consolidation and laminar pipage rounding.

Representatives are picked greedily by smallest average distance. Each
representative j gets a ball B_j (half the distance to the nearest other
representative, or F_j when that is larger) and a core B'_j of radius
eps * d_max(j). The mass of every core is moved onto one random member,
and the result is pipage-rounded to multiples of a granularity g while
every ball and the whole facility set keep their sums up to rounding.
"""
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import ConfigError, InputError
from .lp import NearestMassSet, nearest_mass_sets
from .model import FractionalSolution, Instance, tol

UNIT_SNAP = 1e-9


@dataclass
class ScaleConfig:
    """Analysis constants and the surrogate values used to actually run.

    ``delta``, ``L``, ``T``, ``force_threshold``, ``budget`` and
    ``granularity`` are surrogates; ``theoretical()`` gives what the
    analysis would prescribe for the same epsilon and p.
    """

    epsilon: float
    p: float = 1.0
    c1: Optional[int] = None
    c2: Optional[int] = None
    c3: Optional[int] = None
    c4: Optional[int] = None
    c5: Optional[int] = None
    delta: int = 16
    L: Optional[float] = None
    T: int = 200
    force_threshold: Optional[float] = None
    budget: int = 8
    granularity: Optional[float] = None
    z_cap: Optional[float] = None
    overrides: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        p, eps = self.p, self.epsilon
        if p < 1:
            raise ConfigError("p must be at least 1")
        if not 0 < eps < 1.0 / (3 * p ** 4):
            raise ConfigError(f"epsilon must lie in (0, 1/(3p^4)) = (0, {1 / (3 * p ** 4):.6g})")
        inv = 1.0 / eps
        if abs(inv - round(inv)) > 1e-9 * inv:
            raise ConfigError("1/epsilon must be an integer")
        c1 = math.ceil(12 * p * p)
        defaults = {
            "c1": c1,
            "c5": c1 + 1,
            "c2": math.ceil(48 * p * p) + 3,
            "c3": math.ceil(132 * p * p) + 9,
            "c4": math.ceil(84 * p * p) + 5,
        }
        for name, val in defaults.items():
            if getattr(self, name) is None:
                setattr(self, name, val)
            elif getattr(self, name) != val:
                self.overrides[name] = getattr(self, name)
        if int(self.delta) != self.delta or self.delta < 1:
            raise ConfigError("delta must be a positive integer")
        self.delta = int(self.delta)
        if self.L is None:
            self.L = 0.05 * self.delta
        if self.force_threshold is None:
            self.force_threshold = 4.0 * self.delta
        if self.granularity is None:
            self.granularity = 1.0 / self.delta
        if self.z_cap is None:
            self.z_cap = 2.0
        q = 2 * self.L * (1 + self.eps_c5) / self.delta
        if not 0 < q <= 1:
            raise ConfigError("2L(1+eps^c5)/delta must be a probability")
        if self.T < 0 or self.budget < 0:
            raise ConfigError("T and budget must be nonnegative")
        g = self.granularity
        if not 0 < g <= 1 or abs(1 / g - round(1 / g)) > 1e-9 / g:
            raise ConfigError("granularity must be 1/m for a positive integer m")

    @property
    def eps_c3(self):
        return self.epsilon ** self.c3

    @property
    def eps_c5(self):
        return self.epsilon ** self.c5

    @property
    def radius_factor(self):
        """1/(eps/p)^{4p}: type-1 threshold; minus 2 it is the filtering radius."""
        return (self.p / self.epsilon) ** (4 * self.p)

    @property
    def select_prob(self):
        return 2 * self.L / self.delta

    def theoretical(self):
        e = self.epsilon
        lg = math.log10(e)
        return {
            "delta": f"1/eps^{self.c1} = {_pow10(-self.c1 * lg)}",
            "L": f"eps^{self.c2} = {_pow10(self.c2 * lg)}",
            "T": f"log(1/eps)/eps^{self.c1 + self.c2} = "
                 f"{_pow10(math.log10(math.log(1 / e)) - (self.c1 + self.c2) * lg)}",
            "force_threshold": f"O(1/eps^{self.c3}) = {_pow10(-self.c3 * lg)}",
            "granularity": f"eps^{self.c1} = {_pow10(self.c1 * lg)}",
        }

    def report(self):
        d = asdict(self)
        d["theoretical"] = self.theoretical()
        return d


def _pow10(x):
    """Format 10**x without overflowing floats."""
    m = math.floor(x)
    return f"{10 ** (x - m):.3g}e{m:+d}"


def default_epsilon(p):
    return 1.0 / (math.floor(3 * p ** 4) + 1)


@dataclass
class FilterResult:
    reps: List[int]
    rep_of: np.ndarray
    balls: Dict[int, np.ndarray]
    cores: Dict[int, np.ndarray]
    ball_is_fj: Dict[int, bool]
    types: np.ndarray
    d_av: np.ndarray
    d_max: np.ndarray
    nms: NearestMassSet = field(repr=False)

    def laminar_family(self):
        return [self.balls[r] for r in self.reps if self.balls[r].size]

    def to_dict(self):
        return {
            "representatives": list(self.reps),
            "rep_of": self.rep_of.tolist(),
            "balls": {str(r): self.balls[r].tolist() for r in self.reps},
            "cores": {str(r): self.cores[r].tolist() for r in self.reps},
            "types": self.types.tolist(),
        }


def filter_clients(inst: Instance, sol: FractionalSolution, cfg: ScaleConfig) -> FilterResult:
    nms = nearest_mass_sets(sol, inst)
    dav, dmax = nms.d_av, nms.d_max
    factor = cfg.radius_factor
    cc = inst.cc
    n = inst.n_clients
    rep_of = np.full(n, -1)
    reps = []
    left = np.ones(n, dtype=bool)
    while left.any():
        cand = np.flatnonzero(left)
        star = int(cand[np.lexsort((cand, dav[cand]))[0]])
        reps.append(star)
        gone = left & (cc[:, star] <= (factor - 2) * dav)
        gone[star] = True
        rep_of[gone] = star
        left &= ~gone

    y = sol.y
    positive = y > 0
    balls, cores, is_fj = {}, {}, {}
    reps_arr = np.asarray(reps)
    for r in reps:
        others = reps_arr[reps_arr != r]
        radius = cc[r, others].min() / 2 if others.size else np.inf
        if radius < dmax[r]:
            balls[r] = np.flatnonzero(positive & (inst.cf[:, r] < radius))
            is_fj[r] = False
        else:
            balls[r] = np.sort(nms.members[r])
            is_fj[r] = True
        cores[r] = np.flatnonzero(positive & (inst.cf[:, r] <= cfg.epsilon * dmax[r]))

    types = np.empty(n, dtype=np.int64)
    for j in range(n):
        if dmax[j] <= factor * dav[j] + tol(dmax[j], factor * dav[j]):
            types[j] = 1
        elif is_fj[rep_of[j]]:
            types[j] = 2
        else:
            types[j] = 3
    return FilterResult(reps, rep_of, balls, cores, is_fj, types, dav, dmax, nms)


# the public name used throughout the docs
filter = filter_clients  # noqa: A001


def check_filter(res: FilterResult, inst: Instance, y, cfg: ScaleConfig):
    """Return a list of violated structural properties (empty when all hold)."""
    bad = []
    seen = {}
    for r in res.reps:
        for i in res.balls[r].tolist():
            if i in seen:
                bad.append(f"facility {i} lies in balls of {seen[i]} and {r}")
            seen[i] = r
        if not set(res.cores[r].tolist()) <= set(res.balls[r].tolist()):
            bad.append(f"core of {r} is not inside its ball")
        mass = y[res.balls[r]].sum()
        if not (mass > 1 / (2 - cfg.epsilon) and mass <= 1 + 1e-9):
            bad.append(f"ball of {r} has mass {mass}")
    factor = cfg.radius_factor
    for j, r in enumerate(res.rep_of):
        if res.d_av[r] > res.d_av[j] + tol(res.d_av[j]):
            bad.append(f"representative {r} of {j} has larger d_av")
        if inst.cc[j, r] > (factor - 2) * res.d_av[j] + tol(inst.cc[j, r]):
            bad.append(f"client {j} is too far from representative {r}")
    return bad


def check_near_representative(res: FilterResult, inst: Instance):
    """Clients that are not type 1 sit within 4 d_av of their representative."""
    bad = []
    for j in np.flatnonzero(res.types != 1):
        r = res.rep_of[j]
        if inst.cc[j, r] > 4 * res.d_av[j] + tol(inst.cc[j, r]):
            bad.append(int(j))
    return bad


def check_core_mass(res: FilterResult, inst: Instance, y, cfg: ScaleConfig):
    """For type-3 clients with rep j1 and nearest other rep j2: if
    d_max(j2) >= eps d_max(j1) then y(B'_{j2}) >= 1 - 4 eps^{p+1}."""
    bad = []
    reps = np.asarray(res.reps)
    eps, p = cfg.epsilon, cfg.p
    for j in np.flatnonzero(res.types == 3):
        j1 = int(res.rep_of[j])
        others = reps[reps != j1]
        if not others.size:
            continue
        j2 = int(others[np.lexsort((others, inst.cc[j1, others]))[0]])
        if res.d_max[j2] >= eps * res.d_max[j1]:
            mass = y[res.cores[j2]].sum()
            if mass < 1 - 4 * eps ** (p + 1) - 1e-9:
                bad.append((int(j), j1, j2, float(mass)))
    return bad


def consolidate_cores(y, res: FilterResult, rng) -> np.ndarray:
    """Move each core's mass onto one member drawn proportionally to y."""
    y = np.asarray(y, dtype=float)
    out = y.copy()
    for r in res.reps:
        core = res.cores[r]
        mass = y[core].sum()
        if core.size == 0 or mass <= 0:
            continue
        pick = core[min(np.searchsorted(np.cumsum(y[core]), rng.random() * mass, side="right"), core.size - 1)]
        out[core] = 0.0
        out[pick] = mass
    return out


def check_laminar(family, n):
    sets = [np.unique(np.asarray(s, dtype=np.int64)) for s in family]
    for s in sets:
        if s.size and (s.min() < 0 or s.max() >= n):
            raise InputError("laminar family refers to an unknown facility")
    for a in range(len(sets)):
        for b in range(a + 1, len(sets)):
            inter = np.intersect1d(sets[a], sets[b]).size
            if inter and inter not in (sets[a].size, sets[b].size):
                raise InputError(f"sets {a} and {b} of the family cross")
    return sets


def pipage_units(yprime, family, g, rng) -> np.ndarray:
    """Dependent rounding of y'/g to integers over a laminar family.

    Returns integer counts m_i with y''_i = m_i * g.
    """
    y = np.asarray(yprime, dtype=float)
    n = y.size
    sets = check_laminar(family, n)
    # tree over distinct nonempty sets; the whole index range is the root
    uniq = []
    for s in sets:
        if s.size and not any(np.array_equal(s, u) for u in uniq):
            uniq.append(s)
    uniq.sort(key=lambda s: (s.size, s[0]))
    z = y / g
    near = np.abs(z - np.rint(z)) <= UNIT_SNAP * np.maximum(1.0, np.abs(z))
    z[near] = np.rint(z[near])
    owner = np.full(n, -1)  # innermost set holding each facility
    for k in range(len(uniq) - 1, -1, -1):
        owner[uniq[k]] = k
    parent = []
    for k, s in enumerate(uniq):
        par = -1
        for m in range(k + 1, len(uniq)):
            if uniq[m].size > s.size and np.isin(s, uniq[m]).all():
                par = m
                break
        parent.append(par)
    carry = {k: [] for k in range(-1, len(uniq))}
    for i in range(n):
        carry[owner[i]].append(i)

    def fractional(i):
        return z[i] != np.floor(z[i])

    def settle(i):
        r = np.rint(z[i])
        if abs(z[i] - r) <= UNIT_SNAP * max(1.0, abs(r)):
            z[i] = r

    for k in list(range(len(uniq))) + [-1]:
        pool = sorted(i for i in carry[k] if fractional(i))
        while len(pool) >= 2:
            a, b = pool[0], pool[1]
            fa = z[a] - np.floor(z[a])
            fb = z[b] - np.floor(z[b])
            up = min(1 - fa, fb)   # a rises, b falls
            down = min(fa, 1 - fb)  # a falls, b rises
            if rng.random() < down / (up + down):
                z[a] += up
                z[b] -= up
            else:
                z[a] -= down
                z[b] += down
            settle(a)
            settle(b)
            pool = [i for i in pool if fractional(i)]
        if pool:
            if k >= 0:
                carry[parent[k]].append(pool[0])
            else:
                i = pool[0]
                frac = z[i] - np.floor(z[i])
                z[i] = np.floor(z[i]) + (1.0 if rng.random() < frac else 0.0)
    return np.rint(z).astype(np.int64)


def pipage_round(yprime, family, g, rng) -> np.ndarray:
    return pipage_units(yprime, family, g, rng) * g


def check_quantized(yprime, units, family, g):
    """Every set (and the whole range) lands on the floor or ceiling of y'(S)/g."""
    y = np.asarray(yprime, dtype=float)
    bad = []
    sets = [np.asarray(s, dtype=np.int64) for s in family] + [np.arange(y.size)]
    sets += [np.array([i]) for i in range(y.size)]
    for s in sets:
        target = y[s].sum() / g
        got = int(units[s].sum())
        lo = math.floor(target + UNIT_SNAP * max(1, target))
        hi = math.ceil(target - UNIT_SNAP * max(1, target))
        if got not in (lo, hi, math.floor(target), math.ceil(target)):
            bad.append((s.tolist(), target, got))
    return bad
