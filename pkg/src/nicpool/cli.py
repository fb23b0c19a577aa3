"""``nicpool`` command line: run scenarios, plan offline, list bundled examples."""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

from .errors import ConfigError, NicPoolError
from .planner import compute_allocation, plan_replication
from .scenario import _Reader, app_library, build_app_from, bundled_scenarios, load_config, run_scenario


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _run_one(ref: str, output: Optional[str], seed: Optional[int], bin_ms: Optional[float]) -> str:
    cfg = load_config(ref).with_overrides(seed=seed, bin_ms=bin_ms)
    report = run_scenario(cfg, output)
    return report.to_json()


def _out_path(output: Optional[str], ref: str, many: bool) -> Optional[str]:
    if output is None:
        return None
    if not many:
        return output
    Path(output).mkdir(parents=True, exist_ok=True)
    return str(Path(output) / f"{Path(ref).stem}.json")


def cmd_run(args) -> int:
    refs = args.scenario
    many = len(refs) > 1
    jobs = [(r, _out_path(args.output, r, many), args.seed, args.bin_ms) for r in refs]
    if many and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            texts = list(pool.map(_run_one, *zip(*jobs)))
    else:
        texts = [_run_one(*j) for j in jobs]
    if args.output is None:
        for t in texts:
            sys.stdout.write(t)
    else:
        for (ref, out, _, _) in jobs:
            print(f"{ref}: report written to {out}", file=sys.stderr)
    return 0


def cmd_plan(args) -> int:
    L = args.latencies
    plan = plan_replication(L)
    out = {"latencies_us": L, "replication": plan.to_dict()}
    if args.target is not None:
        app = None
        if args.app is not None:
            lib = app_library()
            if args.app not in lib:
                raise ConfigError(f"unknown library app {args.app!r}")
            app = build_app_from(_Reader(lib[args.app], args.app), args.app)
            if len(app.stages) != len(L):
                raise ConfigError(f"{args.app} has {len(app.stages)} stages but {len(L)} latencies were given")
        pkt_bits = args.pkt_bytes * 8
        t = args.t if args.t is not None else min(r / x for r, x in zip(plan.R, L)) * pkt_bits / 1000.0
        lam = args.lam if args.lam is not None else pkt_bits / max(L) / 1000.0
        alloc = compute_allocation(plan, args.target, t, lam, app)
        out.update(target_gbps=args.target, t_gbps=t, lambda_gbps=lam, allocation=alloc.to_dict())
    text = json.dumps(out, sort_keys=True, indent=1) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_list(args) -> int:
    print("scenarios:")
    for name, desc in bundled_scenarios().items():
        print(f"  {name:<22} {desc}")
    print("apps:")
    for name, doc in sorted(app_library().items()):
        kinds = ", ".join(s["kind"] + (f"({s['accel']})" if s.get("accel") else "") for s in doc["stages"])
        print(f"  {name:<22} {kinds}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nicpool", description="Rack-scale SmartNIC pool simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one or more scenarios and emit JSON reports")
    run.add_argument("scenario", nargs="+", help="scenario file or bundled scenario name")
    run.add_argument("-o", "--output", help="report path (a directory when several scenarios are given)")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--bin-ms", type=float, help="override the report bin width in ms")
    run.add_argument("-j", "--jobs", type=int, default=1, help="run several scenarios in parallel")
    run.set_defaults(fn=cmd_run)

    plan = sub.add_parser("plan", help="print the replication plan and allocation for stage latencies")
    plan.add_argument("--latencies", type=_floats, required=True, help="per-stage latencies in us, e.g. 20,18,27,10")
    plan.add_argument("--target", type=float, help="throughput target in Gbps")
    plan.add_argument("--t", type=float, help="throughput of one full copy (default: derived from latencies)")
    plan.add_argument("--lambda", dest="lam", type=float,
                      help="throughput of one minimal copy (default: derived from latencies)")
    plan.add_argument("--pkt-bytes", type=int, default=1500, help="packet size for derived rates")
    plan.add_argument("--app", help="library app whose stage kinds split the resource vector")
    plan.add_argument("-o", "--output", help="write the plan here instead of stdout")
    plan.set_defaults(fn=cmd_plan)

    ls = sub.add_parser("list-examples", help="list bundled scenarios and applications")
    ls.set_defaults(fn=cmd_list)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (NicPoolError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
