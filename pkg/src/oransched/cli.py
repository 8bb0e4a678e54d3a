"""Command line entry point: ``gen``, ``schedule``, ``sweep`` and ``oracle``.

Every subcommand prints a JSON document on stdout. Failures print ``{"error": ..., "type": ...}``
and exit with status 1 (2 for usage errors).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .central import DEFAULT_RHO
from .distributed import DEFAULT_ALPHA
from .errors import SchedulerError
from .ezf import esr_and_sat
from .harness import (SCHEDULERS, ExperimentSpec, brute_force_optimum, instance_from,
                      make_instance, run_experiment, run_scheduler, tiny_instance, write_trace_csv)
from .scenario import RfConfig, load_scenario, save_scenario, scenario_summary


def _config(args) -> RfConfig:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    return RfConfig.from_dict(d)


def _instance(args):
    if args.scenario:
        scenario, channels = load_scenario(args.scenario)
        return instance_from(scenario, channels, args.seed)
    return make_instance(_config(args), args.num_ues, args.num_qos, (args.q_min, args.q_max), args.seed)


def cmd_gen(args) -> dict:
    inst = make_instance(_config(args), args.num_ues, args.num_qos, (args.q_min, args.q_max), args.seed)
    json_path, chan_path = save_scenario(args.out, inst.scenario, inst.channels)
    return {"scenario": str(json_path), "channels": str(chan_path),
            "summary": scenario_summary(inst.scenario)}


def cmd_schedule(args) -> dict:
    inst = _instance(args)
    run = run_scheduler(args.scheduler, inst, args.rho, args.alpha, args.threads)
    esr, sat = esr_and_sat(run.schedule, inst.channels, inst.cache, inst.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "schedule.json").write_text(run.schedule.to_json())
    if "trace" in run.extra:
        rows = [{"sweep": i, "objective": v} for i, v in enumerate(run.extra["trace"])]
    else:
        rows = run.extra.get("stage_traces", [])
    files = {"schedule": str(out / "schedule.json")}
    if rows:
        write_trace_csv(rows, out / "trace.csv")
        files["trace"] = str(out / "trace.csv")
    result = {"scheduler": args.scheduler, "seed": args.seed, "rho": args.rho, "alpha": args.alpha,
              "esr": esr, "sat": sat, "objective": run.objective, "wall_ms": run.wall_ms,
              "ledger": run.ledger, "files": files}
    if run.ledger is not None:
        (out / "ledger.json").write_text(json.dumps(run.ledger, indent=1))
        files["ledger"] = str(out / "ledger.json")
    (out / "result.json").write_text(json.dumps(result, indent=1))
    return result


def cmd_sweep(args) -> dict:
    spec = ExperimentSpec.from_json(args.spec)
    if args.out:
        spec.output = args.out
    res = run_experiment(spec, workers=args.workers)
    return {"records": len(res.records), "summary": res.summary, "output": spec.output}


def cmd_oracle(args) -> dict:
    if args.scenario:
        scenario, channels = load_scenario(args.scenario)
        inst = instance_from(scenario, channels, args.seed)
    else:
        inst = tiny_instance(args.seed, args.num_qos)
    opt = brute_force_optimum(inst.coeffs, inst.scenario, args.rho, inst.channels, inst.cache)
    result = {"value": opt.value, "esr": opt.esr, "sat": opt.sat, "num_schedules": opt.num_schedules,
              "schedule": json.loads(opt.schedule.to_json())}
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=1))
    return result


def _instance_flags(p, num_ues=18, num_qos=8):
    p.add_argument("--config", help="JSON file of RF config overrides")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-ues", type=int, default=num_ues)
    p.add_argument("--num-qos", type=int, default=num_qos)
    p.add_argument("--q-min", type=float, default=0.0)
    p.add_argument("--q-max", type=float, default=60.0)


class _JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": message, "type": "UsageError"}))
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _JsonArgumentParser(prog="oransched", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_JsonArgumentParser)

    p = sub.add_parser("gen", help="generate a scenario and write <out>.json + <out>.chan")
    _instance_flags(p)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("schedule", help="run one scheduler on one instance")
    _instance_flags(p)
    p.add_argument("--scenario", help="scenario JSON written by gen (overrides the generator flags)")
    p.add_argument("--scheduler", choices=sorted(SCHEDULERS), default="pcs")
    p.add_argument("--rho", type=float, default=DEFAULT_RHO)
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("sweep", help="run an ExperimentSpec JSON")
    p.add_argument("spec")
    p.add_argument("--out", help="output directory (overrides the spec)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="exhaustive optimum of a tiny instance")
    p.add_argument("--scenario", help="scenario JSON (at most 20 scheduling bits)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-qos", type=int, default=1)
    p.add_argument("--rho", type=float, default=DEFAULT_RHO)
    p.add_argument("--out", help="also write the result JSON here")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except (SchedulerError, ValueError, OSError, KeyError) as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}))
        return 1
    print(json.dumps(result, indent=1, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
