"""Command-line entry point.

Verbs:
    solve-exact   run a tabular scheme on a generated or saved MDP
    train         train one agent (moppo | ppo) on a named environment
    sweep         parameter sweep across seeds, with optional fixed budget
    plot          learning-curve image from per-run CSV files
    verify        monotone-convergence check suite on random MDPs

Config precedence: dataclass defaults, then values from --config, then
explicit CLI flags.  Every config field is exposed as a flag of the same
name with underscores dashed.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .agents import (
    MoppoConfig,
    PpoConfig,
    load_moppo_config,
    load_ppo_config,
)
from .envs import ENV_BUILDERS, RandomMdpParams, generate_random_mdp
from .harness import (
    DEFAULT_SEEDS,
    PROTOCOLS,
    EvalProtocol,
    SweepSpec,
    emit_plots,
    monotone_suite,
    run_experiment,
    run_sweep,
)
from .mdp import TabularMdp, bellman_opt
from .schemes import (
    CpiMixture,
    ExactGreedy,
    RatioClipGreedy,
    run_mosopi,
    run_mpi,
    run_pi,
    run_vi,
    shift_init,
)


def _convert_flag(default, text: str):
    """Parse a flag string using the config field's default as the type witness."""
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return None if text.lower() == "none" else float(text)
    if isinstance(default, tuple):
        return tuple(int(x) for x in text.split(",") if x)
    if default is None:
        return None if text.lower() == "none" else float(text)
    return text


def _add_config_flags(parser, *config_classes):
    seen = set()
    for config_cls in config_classes:
        for f in dataclasses.fields(config_cls):
            if f.name in seen:
                continue
            seen.add(f.name)
            flag = "--" + f.name.replace("_", "-")
            parser.add_argument(flag, dest=f.name, default=None, metavar="VALUE",
                                help=f"override config field {f.name}")


def _config_from_args(args, config_cls, loader):
    config = loader(args.config) if args.config else config_cls()
    overrides = {}
    for f in dataclasses.fields(config_cls):
        raw = getattr(args, f.name, None)
        if raw is not None:
            default = getattr(config_cls(), f.name)
            overrides[f.name] = _convert_flag(default, raw)
    return dataclasses.replace(config, **overrides) if overrides else config


def _parse_seeds(text):
    return tuple(int(s) for s in text.split(",") if s)


def _parse_values(text):
    values = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            values.append(int(part))
        except ValueError:
            values.append(float(part))
    return tuple(values)


# ---------------------------------------------------------------------------
# verbs


def _cmd_solve_exact(args) -> int:
    if args.mdp_file:
        mdp = TabularMdp.load_text(args.mdp_file)
    else:
        mdp = generate_random_mdp(RandomMdpParams(
            n_states=args.states, n_actions=args.actions,
            branching=args.branching, gamma=args.gamma, seed=args.seed))
    v0 = np.zeros(mdp.n_states)
    pi0 = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)

    if args.scheme == "pi":
        trace = run_pi(mdp, v0, max_iter=args.max_iter)
    elif args.scheme == "vi":
        trace = run_vi(mdp, v0, max_iter=args.max_iter)
    elif args.scheme == "mpi":
        trace = run_mpi(mdp, v0, m=args.m, max_iter=args.max_iter)
    else:
        rules = {
            "exact": ExactGreedy(),
            "cpi_mixture": CpiMixture(args.alpha),
            "ratio_clip": RatioClipGreedy(args.epsilon),
        }
        v0 = shift_init(mdp, pi0, v0)  # no-op for admissible starts
        trace = run_mosopi(mdp, pi0, v0, m=args.m, rule=rules[args.rule],
                           max_iter=args.max_iter)

    v_final = trace.values[-1]
    residual = float(np.max(np.abs(bellman_opt(mdp, v_final) - v_final)))
    print(f"scheme={trace.scheme} iterations={trace.n_iterations} "
          f"converged={trace.converged} optimality_residual={residual:.3e}")
    if args.out:
        trace.to_csv(args.out)
        print(f"trace written to {args.out}")
    return 0


def _cmd_train(args) -> int:
    if args.algo == "moppo":
        config = _config_from_args(args, MoppoConfig, load_moppo_config)
    else:
        config = _config_from_args(args, PpoConfig, load_ppo_config)
    protocol = EvalProtocol(kind=args.protocol, episodes=config.eval_episodes)
    result = run_experiment(config, args.env, args.algo, seeds=(args.seed,),
                            out_dir=args.out, protocol=protocol)
    if result["failures"]:
        print(f"run failed: {result['failures']}", file=sys.stderr)
        return 1
    log = result["logs"][args.seed]
    final = log.last_eval() if log.eval_series()[0].size else float("nan")
    print(f"algo={args.algo} env={args.env} seed={args.seed} "
          f"steps={len(log.rewards)} final_eval={final:.2f} halted={log.halted} "
          f"wall_clock={log.wall_clock:.1f}s")
    full = os.path.join(args.out, f"{args.algo}_{args.env}_seed{args.seed}_runlog.csv")
    log.to_csv(full)
    print(f"per-run CSV files in {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    base = _config_from_args(args, MoppoConfig, load_moppo_config)
    spec = SweepSpec(parameter=args.param, values=_parse_values(args.values),
                     base=base, seeds=_parse_seeds(args.seeds),
                     env_name=args.env, algo=args.algo,
                     fixed_budget=args.fixed_budget)
    protocol = EvalProtocol(kind=args.protocol, episodes=base.eval_episodes)
    rows = run_sweep(spec, out_dir=args.out, protocol=protocol,
                     workers=args.workers)
    failures = [r for r in rows if r["error"]]
    for value in spec.values:
        finals = [r["final_return"] for r in rows
                  if r["value"] == value and r["final_return"] != ""]
        if finals:
            print(f"{args.param}={value}: median final return "
                  f"{np.median(finals):.2f} over {len(finals)} seeds")
    if failures:
        print(f"{len(failures)} runs failed (see sweep CSV)", file=sys.stderr)
    print(f"sweep outputs in {args.out}")
    return 0


def _cmd_plot(args) -> int:
    out = emit_plots(args.csvs, args.out, title=args.title)
    print(f"plot written to {out}")
    return 0


def _cmd_verify(args) -> int:
    report = monotone_suite(n_mdps=args.mdps, m_values=_parse_values(args.m),
                            alpha=args.alpha, gamma=args.gamma,
                            max_states=args.max_states,
                            max_actions=args.max_actions,
                            iterations=args.iterations, seed=args.seed)
    print(f"checked {report['checked']} scheme runs; "
          f"{len(report['violations'])} violations")
    for line in report["violations"][:10]:
        print(f"  {line}")
    return 1 if report["violations"] else 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mosopi",
        description="Exact policy-iteration schemes and replay-based "
                    "clipped-surrogate training on desk-scale environments.")
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve-exact", help="run a tabular scheme")
    solve.add_argument("--scheme", choices=["pi", "vi", "mpi", "mosopi"],
                       default="mosopi")
    solve.add_argument("--mdp-file", default=None,
                       help="load an MDP from a text file instead of generating")
    solve.add_argument("--states", type=int, default=10)
    solve.add_argument("--actions", type=int, default=2)
    solve.add_argument("--branching", type=int, default=3)
    solve.add_argument("--gamma", type=float, default=0.9)
    solve.add_argument("--seed", type=int, default=0)
    solve.add_argument("--m", type=int, default=5)
    solve.add_argument("--rule", choices=["exact", "cpi_mixture", "ratio_clip"],
                       default="exact")
    solve.add_argument("--alpha", type=float, default=0.5)
    solve.add_argument("--epsilon", type=float, default=0.2)
    solve.add_argument("--max-iter", type=int, default=1000)
    solve.add_argument("--out", default=None, help="trace CSV path")
    solve.set_defaults(fn=_cmd_solve_exact)

    train = sub.add_parser("train", help="train one agent")
    train.add_argument("--algo", choices=["moppo", "ppo"], required=True)
    train.add_argument("--env", choices=sorted(ENV_BUILDERS), required=True)
    train.add_argument("--config", default=None, help="JSON config file")
    train.add_argument("--seed", type=int, default=DEFAULT_SEEDS[0])
    train.add_argument("--protocol", choices=list(PROTOCOLS),
                       default="mean_action_every_1000")
    train.add_argument("--out", default="runs")
    _add_config_flags(train, MoppoConfig, PpoConfig)
    train.set_defaults(fn=_cmd_train)

    sweep = sub.add_parser("sweep", help="parameter sweep across seeds")
    sweep.add_argument("--param", required=True)
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.add_argument("--fixed-budget", type=int, default=None,
                       help="hold m * q_steps at this product (m sweeps)")
    sweep.add_argument("--env", choices=sorted(ENV_BUILDERS), required=True)
    sweep.add_argument("--algo", choices=["moppo", "ppo"], default="moppo")
    sweep.add_argument("--seeds", default=",".join(str(s) for s in DEFAULT_SEEDS))
    sweep.add_argument("--config", default=None)
    sweep.add_argument("--protocol", choices=list(PROTOCOLS),
                       default="mean_action_every_1000")
    sweep.add_argument("--workers", type=int, default=1)
    sweep.add_argument("--out", default="sweeps")
    _add_config_flags(sweep, MoppoConfig)
    sweep.set_defaults(fn=_cmd_sweep)

    plot = sub.add_parser("plot", help="learning-curve image from run CSVs")
    plot.add_argument("csvs", nargs="+")
    plot.add_argument("--out", default="curve.png")
    plot.add_argument("--title", default=None)
    plot.set_defaults(fn=_cmd_plot)

    verify = sub.add_parser("verify", help="monotone-convergence suite")
    verify.add_argument("--mdps", type=int, default=100)
    verify.add_argument("--m", default="1,3,10")
    verify.add_argument("--alpha", type=float, default=0.5)
    verify.add_argument("--gamma", type=float, default=0.9)
    verify.add_argument("--max-states", type=int, default=20)
    verify.add_argument("--max-actions", type=int, default=4)
    verify.add_argument("--iterations", type=int, default=60)
    verify.add_argument("--seed", type=int, default=0)
    verify.set_defaults(fn=_cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
