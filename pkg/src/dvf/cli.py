"""Command line front end: ``dvf train | eval | sweep | check | demo-divergence``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


from dvf import experiment, oracle


def _config_from_args(args):
    if args.config:
        with open(args.config, "rb") as fh:
            data = experiment.tomllib.load(fh)
    else:
        data = {"schema": experiment.SCHEMA_VERSION, "name": args.name or (args.preset or args.env)}
        if args.preset:
            data["preset"] = args.preset
        if args.env:
            data["env"] = {"kind": args.env}
        elif not args.preset:
            raise experiment.ConfigError("env.kind: pass --env, --preset or --config")
    if args.critic:
        data["critic"] = args.critic
    if args.seed is not None:
        data["seeds"] = args.seed
    if args.iterations is not None:
        data.setdefault("train", {})["iterations"] = args.iterations
    if args.out:
        data["output"] = args.out
    if args.name:
        data["name"] = args.name
    if getattr(args, "variable", None):
        data["sweep"] = {"variable": args.variable, "values": [float(v) for v in args.values.split(",")]}
    return experiment.parse_config(data)


def _run(args, want_sweep):
    cfg = _config_from_args(args)
    if want_sweep and cfg.sweep_variable is None:
        raise experiment.ConfigError("sweep.variable: the sweep verb needs a sweep section")
    if not want_sweep and cfg.sweep_variable is not None:
        raise experiment.ConfigError("sweep: use the sweep verb for configs with a sweep section")
    summary = experiment.run_experiment(cfg)
    print(json.dumps({"summary": str(Path(cfg.output) / cfg.name / "summary.json"), "complete": summary["complete"]}))
    return 0 if summary["complete"] else 1


def cmd_train(args):
    return _run(args, want_sweep=False)


def cmd_sweep(args):
    return _run(args, want_sweep=True)


def cmd_eval(args):
    result = experiment.evaluate(args.checkpoint, args.episodes, args.seed, ood_graph=args.ood, greedy=args.greedy)
    text = json.dumps(result, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_check(args):
    results = experiment.run_checks(inject_fault=args.inject_fault, seed=args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} residual={r.residual:.3e} {r.detail}")
    if args.out:
        rows = [{"name": r.name, "passed": r.passed, "residual": r.residual, "detail": r.detail} for r in results]
        Path(args.out).write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    return 0 if all(r.passed for r in results) else 1


def cmd_demo_divergence(args):
    local, dvf = oracle.divergence_demo(args.d, args.gamma, args.horizon)
    lines = ["T,local,dvf"] + [f"{t + 1},{lv!r},{dv!r}" for t, (lv, dv) in enumerate(zip(local.tolist(), dvf.tolist()))]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    ratio = (args.d - 1) * args.gamma
    print(f"(d-1)*gamma = {ratio:g}; local sum at T={args.horizon}: {local[-1]:.6g}; "
          f"DVF sum: {dvf[-1]:.12g} (limit {args.gamma / (1 - args.gamma):.12g})", file=sys.stderr)
    return 0


def _add_run_flags(p):
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--preset", choices=sorted(experiment.PRESETS))
    p.add_argument("--env", choices=["colouring", "firefight", "radio", "radio_edge"])
    p.add_argument("--critic", choices=["DVF", "REIN", "IA2C", "NA2C", "MAA2C"])
    p.add_argument("--seed", type=int, action="append", help="repeat for several seeds")
    p.add_argument("--iterations", type=int)
    p.add_argument("--out", help="output root directory")
    p.add_argument("--name", help="experiment name (subdirectory of the output root)")


def build_parser():
    parser = argparse.ArgumentParser(prog="dvf", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train one configuration over its seeds")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train over a swept parameter and seeds")
    _add_run_flags(p)
    p.add_argument("--variable", help="e.g. env.p_m")
    p.add_argument("--values", help="comma separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint on fresh instances")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ood", help="graph generator to test on instead of the training one")
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run the oracle property suite")
    p.add_argument("--inject-fault", choices=["column_sums"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("demo-divergence", help="local value vs DVF partial sums on a regular tree")
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--horizon", type=int, default=40)
    p.add_argument("--out")
    p.set_defaults(func=cmd_demo_divergence)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except experiment.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
