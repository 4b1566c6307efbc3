"""Command line front end.

Four subcommands: ``simulate`` runs relay scenarios and reports delivery
metrics, ``check`` evaluates a probability query statistically or
exactly, ``sweep`` measures delay against satellite density, and
``reach`` explores the state space (optionally exporting the chain or
verifying the unfolding).

Outputs are deterministic for fixed arguments: JSON is emitted with
sorted keys and no timestamps, so identical invocations produce
identical bytes regardless of worker count.  Wall-clock timing goes to a
``.meta.json`` sidecar next to ``--out``, never into the result itself.

Exit status: 0 on success (for ``check``: query satisfied or estimated),
1 for a violated or undecided query, 2 for configuration errors.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any

from . import deadspot, logic, semantics, sim
from .deadspot import DeadspotParams
from .errors import SpotnetError


def _load_params(args) -> DeadspotParams:
    if args.scenario is not None:
        try:
            doc = json.loads(Path(args.scenario).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise SpotnetError(f"cannot read scenario {args.scenario}: {e}") from None
        params = deadspot.params_from_json(doc)
    else:
        params = DeadspotParams()
    if getattr(args, "no_jmp", False):
        params = replace(params, jmp_enabled=False)
    if getattr(args, "grid", None) is not None:
        params = replace(params, zone_resolution=args.grid)
    params.validate()
    return params


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, float) and value != value:
        return None  # NaN has no JSON spelling
    return value


def _emit(doc: dict, out: str | None, *, started: float | None = None) -> None:
    text = json.dumps(_jsonable(doc), sort_keys=True, indent=2) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")
        if started is not None:
            meta = {"wall_seconds": time.monotonic() - started}
            Path(out + ".meta.json").write_text(
                json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8"
            )


# ---------------------------------------------------------------------------
# simulate

def _cmd_simulate(args) -> int:
    started = time.monotonic()
    params = _load_params(args)
    traces = deadspot.run_deadspot_batch(
        params,
        runs=args.runs,
        horizon=args.horizon,
        base_seed=args.seed,
        jobs=args.jobs,
    )
    metrics = deadspot.delivery_metrics(traces)
    if "mean_delay_ci" in metrics:
        metrics["mean_delay_ci"] = list(metrics["mean_delay_ci"])
    doc = {
        "command": "simulate",
        "scenario": deadspot.params_to_json(params),
        "runs": args.runs,
        "horizon": args.horizon,
        "seed": args.seed,
        "events": sum(tr.n_events for tr in traces),
        "metrics": metrics,
    }
    if args.trace is not None:
        path = args.trace
        if path.endswith(".csv"):
            sim.write_trace_csv(traces[0], path)
        else:
            sim.write_trace_bin(traces[0], path)
        doc["trace"] = path
    _emit(doc, args.out, started=started)
    return 0


# ---------------------------------------------------------------------------
# check

def _cmd_check(args) -> int:
    started = time.monotonic()
    params = _load_params(args)
    net, init = deadspot.build(params)
    query = logic.parse_formula(args.formula)
    if args.exact:
        result = logic.exact_check(net, init, query, limit=args.limit)
        method = "exact"
    else:
        factory = deadspot.tracker_factory(params) if logic.needs_tracking(query) else None
        result = logic.smc_check(
            net,
            init,
            query,
            samples=args.samples,
            horizon=args.horizon,
            gamma=args.gamma,
            seed=args.seed,
            jobs=args.jobs,
            annotator_factory=factory,
        )
        method = "smc"
    doc = {
        "command": "check",
        "method": method,
        "formula": result.formula,
        "p_hat": result.p_hat,
        "ci": list(result.ci),
        "gamma": result.gamma,
        "samples": result.samples,
        "successes": result.successes,
        "censored": result.censored,
        "verdict": result.verdict,
    }
    _emit(doc, args.out, started=started)
    return 0 if result.verdict in ("satisfied", "estimate") else 1


# ---------------------------------------------------------------------------
# sweep

def _cmd_sweep(args) -> int:
    started = time.monotonic()
    params = _load_params(args)
    try:
        levels = [int(x) for x in args.levels.split(",") if x.strip()]
    except ValueError:
        raise SpotnetError(f"bad --levels {args.levels!r}; expected comma-separated integers") from None
    result = deadspot.satellite_sweep(
        params,
        levels,
        runs=args.runs,
        horizon=args.horizon,
        base_seed=args.seed,
        jobs=args.jobs,
    )
    cols = ["n", "runs", "mean_delay", "delivered", "created", "censored", "jumps", "factor"]
    lines = [",".join(cols)]
    for row in result.rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols))
    fit = result.fit
    lines.append(f"# fit slope={fit.slope!r} intercept={fit.intercept!r} r2={fit.r2!r}")
    lines.append(f"# fit t_stat={result.t_stat!r} slope_negative={int(result.slope_negative)}")
    text = "\n".join(lines) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")
        meta = {"wall_seconds": time.monotonic() - started}
        Path(args.out + ".meta.json").write_text(
            json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8"
        )
    return 0


# ---------------------------------------------------------------------------
# reach

def _cmd_reach(args) -> int:
    started = time.monotonic()
    params = _load_params(args)
    net, init = deadspot.build(params)
    doc: dict[str, Any] = {"command": "reach"}
    if args.unfold:
        uf = semantics.unfold(net, args.limit)
        doc["unfolded_places"] = len(uf.net.places)
        doc["unfolded_transitions"] = len(uf.net.transitions)
        doc["unfolding_isomorphic"] = semantics.unfolding_isomorphic(net, init, args.limit)
    graph = semantics.reachability(net, init, args.limit)
    doc["states"] = graph.n
    doc["edges"] = len(graph.edges)
    out_degree = [0] * graph.n
    for src, _dst, _t, _b, _r in graph.edges:
        out_degree[src] += 1
    doc["deadlocks"] = sum(1 for d in out_degree if d == 0)
    if args.export is not None:
        ctmc = semantics.to_ctmc(graph)
        semantics.write_ctmc(ctmc, args.export + ".sta", args.export + ".tra")
        doc["export"] = [args.export + ".sta", args.export + ".tra"]
    _emit(doc, args.out, started=started)
    return 0


# ---------------------------------------------------------------------------
# Parser wiring.

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", help="scenario JSON file (defaults to the built-in scenario)")
    p.add_argument("--seed", type=int, default=0, help="base random seed")
    p.add_argument("--no-jmp", action="store_true", help="disable car-to-car message jumps")
    p.add_argument("--grid", type=float, help="override the zone resolution (zones per unit length)")
    p.add_argument("--out", help="write the result here instead of stdout (plus a .meta.json sidecar)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spotnet",
        description="Stochastic simulation and model checking for the dead-spot message relay.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("simulate", help="run the scenario and report delivery metrics")
    _add_common(p)
    p.add_argument("--runs", type=int, default=1, help="number of independent runs")
    p.add_argument("--horizon", type=float, default=100.0, help="simulated time per run")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--trace", help="also write the first run's trace (.csv for text, else binary)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("check", help="check a probability query")
    _add_common(p)
    p.add_argument("--formula", required=True, help='query, e.g. "P>=0.2 [ F[t<=10] bubble(3) ]"')
    p.add_argument("--exact", action="store_true", help="solve on the reachable chain instead of sampling")
    p.add_argument("--samples", type=int, default=1000, help="trajectories for the statistical check")
    p.add_argument("--gamma", type=float, default=0.99, help="confidence level of the interval")
    p.add_argument("--horizon", type=float, default=100.0, help="simulated time per trajectory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--limit", type=int, help="state limit for the exact checker")
    p.set_defaults(func=_cmd_check)

    p = sub.add_parser("sweep", help="sweep satellite density against delivery delay")
    _add_common(p)
    p.add_argument("--levels", default="1,2,3,4,5,6,7,8,9", help="satellites-per-10 levels, comma separated")
    p.add_argument("--runs", type=int, default=30, help="runs per level")
    p.add_argument("--horizon", type=float, default=100.0, help="simulated time per run")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("reach", help="explore the state space")
    _add_common(p)
    p.add_argument("--limit", type=int, help="state limit override")
    p.add_argument("--unfold", action="store_true", help="also unfold to a basic net and verify the behaviour matches")
    p.add_argument("--export", metavar="PREFIX", help="write PREFIX.sta and PREFIX.tra for the chain")
    p.set_defaults(func=_cmd_reach)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpotnetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
