"""Command line entry point: ``kclust <verb> [options]``.

Exit codes: 0 success, 1 invariant violation or failed check, 2 bad
configuration or input, 3 infeasible or too large.
"""
import argparse
import json
import sys

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, InvariantViolation, KClustError
from .harness import ExperimentConfig, StatSummary, generate_instance, run_pipeline, write_report
from .lmp import alpha_general, lmp_round
from .lp import prepare, solve_relaxation, split_for_all_or_nothing
from .model import FractionalSolution, Instance, fractional_cost, integral_cost

SCALE_FLAGS = {
    "epsilon": float, "delta": int, "L": float, "T": int, "force-threshold": float,
    "budget": int, "granularity": float, "z-cap": float,
}


def _emit(obj, out):
    text = json.dumps(obj, indent=2, default=_default)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, tuple)):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _instance(args) -> Instance:
    if getattr(args, "instance", None) and getattr(args, "gen", None):
        raise ConfigError("use either --instance or --gen, not both")
    if getattr(args, "instance", None):
        inst = Instance.load(args.instance)
    elif getattr(args, "gen", None):
        inst = generate_instance(args.gen)
    else:
        raise ConfigError("an instance is required (--instance FILE or --gen SPEC)")
    if args.p is not None:
        inst = Instance(inst.metric, inst.clients, inst.facilities, inst.k, args.p)
    if args.k is not None:
        inst = inst.with_k(args.k)
    return inst


def _scale(args):
    out = {}
    for flag in SCALE_FLAGS:
        val = getattr(args, "scale_" + flag.replace("-", "_"))
        if val is not None:
            out[flag.replace("-", "_")] = val
    return out


def _add_common(sp, trials=True):
    sp.add_argument("--instance", help="instance JSON file")
    sp.add_argument("--gen", help="generator spec, e.g. euclidean:n_c=12,n_f=8,seed=1,k=2")
    sp.add_argument("--k", type=int, help="override k")
    sp.add_argument("--p", type=float, help="override p")
    sp.add_argument("--seed", type=int, default=0)
    if trials:
        sp.add_argument("--trials", type=int, default=1)
    sp.add_argument("--out", help="write the result here instead of stdout")


def _add_scale(sp):
    for flag, typ in SCALE_FLAGS.items():
        sp.add_argument(f"--scale-{flag}", type=typ, dest="scale_" + flag.replace("-", "_"),
                        help=f"surrogate {flag.replace('-', ' ')}")


def cmd_solve_lp(args):
    inst = _instance(args)
    sol = solve_relaxation(inst, args.accuracy)
    _emit(sol.to_dict(inst), args.out)
    return 0


def cmd_lmp(args):
    inst = _instance(args)
    if args.trials < 1:
        raise ConfigError("trials must be at least 1")
    if args.solution:
        with open(args.solution) as fh:
            sol = FractionalSolution.from_dict(json.load(fh), inst.n_clients)
        sol.validate(inst.k)
    else:
        sol = solve_relaxation(inst)
    split_sol, split = split_for_all_or_nothing(sol, inst)
    si = split.expand(inst)
    rows = []
    trace_fh = open(args.trace, "w") if args.trace else None
    try:
        for t in range(args.trials):
            g = rngmod.stream(args.seed, "lmp", t)
            run = lmp_round(split_sol.y, si.ff, g, cf=si.cf, fsets=split_sol.x > 0, p=inst.p,
                            trace=trace_fh is not None, check_drift=args.check_drift)
            if trace_fh:
                run.dump_trace(trace_fh)
            opened = split.to_original(run.open)
            rows.append({"trial": t, "open": list(opened), "iterations": run.iterations,
                         "cost": integral_cost(inst, opened).total_cost})
    finally:
        if trace_fh:
            trace_fh.close()
    lp = fractional_cost(si, split_sol)
    report = {
        "lp_objective": lp,
        "y_total": float(sol.y.sum()),
        "trials": rows,
        "summary": {
            "open": StatSummary.of("open", [len(r["open"]) for r in rows]).__dict__,
            "cost": StatSummary.of("cost", [r["cost"] for r in rows]).__dict__,
        },
    }
    _emit(report, args.out)
    return 0


def cmd_round(args):
    from .preprocess import ScaleConfig, consolidate_cores, default_epsilon, filter_clients, pipage_units
    from .pseudoround import pseudo_round

    inst = _instance(args)
    scale = _scale(args)
    eps = scale.pop("epsilon", None) or default_epsilon(inst.p)
    cfg = ScaleConfig(epsilon=eps, p=inst.p, **scale)
    si, sol, split = prepare(inst)
    filt = filter_clients(si, sol, cfg)
    reports = []
    bad = False
    for t in range(args.trials):
        g = rngmod.stream(args.seed, "preprocess", t)
        units = pipage_units(consolidate_cores(sol.y, filt, g), filt.laminar_family(), cfg.granularity, g)
        g = rngmod.stream(args.seed, "pseudo-round", t)
        res, rep, _ = pseudo_round(si, units, cfg, g, seed=args.seed)
        d = rep.to_dict()
        d["trial"] = t
        d["open"] = list(split.to_original(res.open))
        d["cost"] = integral_cost(inst, d["open"]).total_cost
        bad |= bool(rep.violations)
        reports.append(d)
    _emit({"runs": reports}, args.out)
    return 1 if bad else 0


def cmd_reduce(args):
    from .reduction import brute_force_opt, pseudo_to_true

    inst = _instance(args)
    try:
        T = [int(s) for s in args.open.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--open must be a comma list of facility indices: {exc}") from exc
    alpha = args.alpha if args.alpha is not None else alpha_general(inst.p)
    opt = brute_force_opt(inst).total_cost if args.oracle else None
    lower = None if opt is not None else fractional_cost(inst, solve_relaxation(inst))
    sol, rep = pseudo_to_true(inst, T, alpha, args.eps, opt=opt, lower_bound=lower)
    _emit({"open": list(sol.open), "cost": sol.total_cost, "report": rep.__dict__}, args.out)
    return 0


def cmd_pipeline(args):
    cfg = ExperimentConfig(instance=args.instance, generator=args.gen, trials=args.trials, seed=args.seed,
                           k=args.k, p=args.p, eps=args.eps, scale=_scale(args), oracle=not args.no_oracle,
                           out=args.out)
    report = run_pipeline(cfg)
    if args.out:
        write_report(report, args.out)
    else:
        _emit({k: v for k, v in report.items() if not k.startswith("_")}, None)
    return 1 if any(r["status"].startswith("invariant") for r in report["trials"]) else 0


def cmd_verify(args):
    from .verify import verify_suite

    try:
        results = verify_suite(args.selector, quick=args.quick)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for r in results:
        print(r.line())
    if args.out:
        _emit([r.__dict__ for r in results], args.out)
    return 0 if all(r.passed for r in results) else 1


def cmd_gen(args):
    inst = generate_instance(args.spec)
    if args.out:
        inst.save(args.out)
    else:
        print(inst.dumps())
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="kclust", description="LP-rounding k-median / k-means toolkit")
    sub = ap.add_subparsers(dest="verb", required=True)

    sp = sub.add_parser("solve-lp", help="solve the LP relaxation and dump the solution")
    _add_common(sp, trials=False)
    sp.add_argument("--accuracy", type=float, default=1e-7)
    sp.set_defaults(func=cmd_solve_lp)

    sp = sub.add_parser("lmp", help="run the LMP rounding on the LP solution")
    _add_common(sp)
    sp.add_argument("--solution", help="fractional solution JSON (default: solve the LP)")
    sp.add_argument("--trace", help="write per-iteration records (JSON lines) here")
    sp.add_argument("--check-drift", action="store_true", help="assert zero drift at every state")
    sp.set_defaults(func=cmd_lmp)

    sp = sub.add_parser("round", help="LP, preprocessing and pseudo-rounding")
    _add_common(sp)
    _add_scale(sp)
    sp.set_defaults(func=cmd_round)

    sp = sub.add_parser("reduce", help="turn a k + c facility solution into a k facility one")
    _add_common(sp, trials=False)
    sp.add_argument("--open", required=True, help="comma list of open facility indices")
    sp.add_argument("--eps", type=float, default=0.25)
    sp.add_argument("--alpha", type=float, help="approximation factor of the input (default (3^p+1)/2)")
    sp.add_argument("--oracle", action="store_true", help="use the brute-force optimum for A")
    sp.set_defaults(func=cmd_reduce)

    sp = sub.add_parser("pipeline", help="LP -> LMP -> pseudo-round -> reduction, with statistics")
    _add_common(sp)
    _add_scale(sp)
    sp.add_argument("--eps", type=float, default=0.25)
    sp.add_argument("--no-oracle", action="store_true", help="skip the brute-force optimum")
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("verify", help="run property suites")
    sp.add_argument("selector", nargs="?", default="all", help="suite name (or 'all'), e.g. eq1,p=1")
    sp.add_argument("--quick", action="store_true", help="reduced sample counts")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("gen", help="generate an instance file")
    sp.add_argument("spec", help="e.g. graph_metric:n=8,edge_density=0.3,seed=2,k=2")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_gen)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 1
    except KClustError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
