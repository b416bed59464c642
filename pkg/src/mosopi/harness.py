"""Experiment driver: evaluation protocols, multi-seed experiment runs,
parameter sweeps (including the fixed-minibatch-budget variant), CSV
emission, learning-curve plots, and the monotone-convergence check suite.

Per-run CSV schema: step,eval_return,protocol,seed,algo,env.
Aggregate CSV schema: step,median_return,min_return,max_return,n_seeds,
protocol,algo,env.  Aggregates are pure functions of the per-run files.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .agents import (
    MoppoConfig,
    RunLog,
    evaluate_mean_action,
    run_moppo,
    run_ppo,
)
from .envs import make_env
from .schemes import CpiMixture, check_init, run_mosopi, run_pi, verify_convergence_chain

DEFAULT_SEEDS = (1000, 2000, 3000, 4000, 5000)
PROTOCOLS = ("mean_action_every_1000", "top10_average")
RUN_CSV_HEADER = ["step", "eval_return", "protocol", "seed", "algo", "env"]
AGGREGATE_CSV_HEADER = ["step", "median_return", "min_return", "max_return",
                        "n_seeds", "protocol", "algo", "env"]


@dataclass
class EvalProtocol:
    """Evaluation-score reporting rule.

    mean_action_every_1000 reports each mean-action evaluation score as
    is.  top10_average keeps every score seen so far and reports the mean
    of the best 10 (of all available while fewer than 10 exist), which is
    monotone nondecreasing over a run.
    """

    kind: str = "mean_action_every_1000"
    episodes: int = 5
    scores: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.kind!r}")
        if self.episodes < 1:
            raise ValueError(f"episodes must be >= 1, got {self.episodes}")

    def record(self, score: float) -> float:
        if self.kind == "mean_action_every_1000":
            return float(score)
        self.scores.append(float(score))
        best = sorted(self.scores, reverse=True)[:10]
        return float(np.mean(best))

    def fresh(self) -> "EvalProtocol":
        return EvalProtocol(self.kind, self.episodes)


def evaluate(policy, env, protocol: EvalProtocol, rng, transform=None) -> float:
    """One evaluation point: mean-action rollouts fed through the protocol."""
    score = evaluate_mean_action(policy, env, protocol.episodes, rng, transform)
    return protocol.record(score)


def protocol_series(log: RunLog, protocol: EvalProtocol):
    """Apply a fresh protocol to a run's recorded evaluation scores."""
    steps, scores = log.eval_series()
    tracker = protocol.fresh()
    return steps, np.array([tracker.record(s) for s in scores])


# ---------------------------------------------------------------------------
# running experiments


def _execute_run(task: dict) -> RunLog:
    env = make_env(task["env_name"], **task.get("env_kwargs", {}))
    if task["algo"] == "moppo":
        return run_moppo(env, task["config"], task["seed"])
    if task["algo"] == "ppo":
        return run_ppo(env, task["config"], task["seed"])
    raise ValueError(f"unknown algo {task['algo']!r}")


def _run_many(tasks, workers: int):
    """Execute run tasks, serially or in worker processes.

    Returns {index: RunLog | Exception}; a failed run never aborts the rest.
    """
    results = {}
    if workers <= 1:
        for i, task in enumerate(tasks):
            try:
                results[i] = _execute_run(task)
            except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
                results[i] = exc
        return results
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(_execute_run, task): i for i, task in enumerate(tasks)}
        for future in as_completed(futures):
            i = futures[future]
            try:
                results[i] = future.result()
            except Exception as exc:  # noqa: BLE001
                results[i] = exc
    return results


def write_run_csv(path, steps, returns, protocol_kind, seed, algo, env_name):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RUN_CSV_HEADER)
        for step, ret in zip(steps, returns):
            writer.writerow([int(step), repr(float(ret)), protocol_kind, seed,
                             algo, env_name])


def read_run_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(RUN_CSV_HEADER) - set(reader.fieldnames):
            raise ValueError(
                f"{path}: expected columns {RUN_CSV_HEADER}, got {reader.fieldnames}"
            )
        rows = list(reader)
    steps = np.array([int(r["step"]) for r in rows])
    returns = np.array([float(r["eval_return"]) for r in rows])
    meta = {k: rows[0][k] for k in ("protocol", "seed", "algo", "env")} if rows else {}
    return steps, returns, meta


def aggregate_series(series):
    """Median/min/max per step over runs; steps missing from some runs
    (early halts) aggregate over the runs that reached them."""
    if not series:
        raise ValueError("no runs to aggregate")
    per_step = {}
    for steps, returns in series:
        for step, ret in zip(steps, returns):
            per_step.setdefault(int(step), []).append(float(ret))
    steps = sorted(per_step)
    rows = [
        (s, float(np.median(per_step[s])), float(np.min(per_step[s])),
         float(np.max(per_step[s])), len(per_step[s]))
        for s in steps
    ]
    return rows


def run_experiment(config, env_name, algo, seeds=DEFAULT_SEEDS, out_dir=".",
                   protocol: EvalProtocol | None = None, env_kwargs=None,
                   workers: int = 1):
    """Run (seed x 1 config) and emit per-run CSVs plus the aggregate CSV.

    Returns a dict with per-seed logs, file paths, and any failures.
    """
    protocol = protocol or EvalProtocol()
    env_kwargs = env_kwargs or {}
    os.makedirs(out_dir, exist_ok=True)
    tasks = [
        {"env_name": env_name, "algo": algo, "config": config, "seed": seed,
         "env_kwargs": env_kwargs}
        for seed in seeds
    ]
    results = _run_many(tasks, workers)

    logs, failures, run_paths, series = {}, {}, [], []
    for i, seed in enumerate(seeds):
        outcome = results[i]
        if isinstance(outcome, Exception):
            failures[seed] = repr(outcome)
            continue
        logs[seed] = outcome
        steps, returns = protocol_series(outcome, protocol)
        series.append((steps, returns))
        path = os.path.join(out_dir, f"{algo}_{env_name}_seed{seed}.csv")
        write_run_csv(path, steps, returns, protocol.kind, seed, algo, env_name)
        run_paths.append(path)

    aggregate_path = None
    if series:
        aggregate_path = os.path.join(out_dir, f"{algo}_{env_name}_aggregate.csv")
        with open(aggregate_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(AGGREGATE_CSV_HEADER)
            for step, med, lo, hi, n in aggregate_series(series):
                writer.writerow([step, repr(med), repr(lo), repr(hi), n,
                                 protocol.kind, algo, env_name])
    return {
        "logs": logs,
        "failures": failures,
        "run_paths": run_paths,
        "aggregate_path": aggregate_path,
        "protocol": protocol.kind,
    }


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepSpec:
    """Cross product (parameter value x seed) around a base config.

    fixed_budget (only with parameter='m') rescales q_steps so that
    m * q_steps stays at the given product for every swept value.
    """

    parameter: str
    values: tuple
    base: MoppoConfig = field(default_factory=MoppoConfig)
    seeds: tuple = DEFAULT_SEEDS
    env_name: str = "pendulum"
    algo: str = "moppo"
    fixed_budget: int | None = None
    env_kwargs: dict = field(default_factory=dict)

    def __post_init__(self):
        config_fields = {f.name for f in fields(type(self.base))}
        if self.parameter not in config_fields:
            raise ValueError(
                f"parameter {self.parameter!r} is not a config field"
            )
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if self.fixed_budget is not None:
            if self.parameter != "m":
                raise ValueError("fixed_budget only applies to an m sweep")
            for v in self.values:
                if self.fixed_budget % int(v) != 0:
                    raise ValueError(
                        f"fixed budget {self.fixed_budget} not divisible by m={v}"
                    )

    def config_for(self, value):
        config = replace(self.base, **{self.parameter: value})
        if self.fixed_budget is not None:
            config = replace(config, q_steps=self.fixed_budget // int(value))
        return config


def run_sweep(spec: SweepSpec, out_dir=".", protocol: EvalProtocol | None = None,
              workers: int = 1):
    """Run the sweep grid; emits experiment CSVs per value plus a summary
    table CSV.  Individual run failures are recorded and do not stop the
    sweep.  Returns the summary rows."""
    protocol = protocol or EvalProtocol()
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for value in spec.values:
        config = spec.config_for(value)
        sub_dir = os.path.join(out_dir, f"{spec.parameter}_{value}")
        result = run_experiment(config, spec.env_name, spec.algo, spec.seeds,
                                sub_dir, protocol, spec.env_kwargs, workers)
        for seed in spec.seeds:
            if seed in result["failures"]:
                rows.append({
                    "parameter": spec.parameter, "value": value, "seed": seed,
                    "final_return": "", "halted": "",
                    "error": result["failures"][seed],
                })
            else:
                log = result["logs"][seed]
                _, returns = protocol_series(log, protocol)
                rows.append({
                    "parameter": spec.parameter, "value": value, "seed": seed,
                    "final_return": float(returns[-1]) if returns.size else "",
                    "halted": log.halted, "error": "",
                })
    summary_path = os.path.join(out_dir, f"sweep_{spec.parameter}.csv")
    with open(summary_path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["parameter", "value", "seed", "final_return",
                            "halted", "error"])
        writer.writeheader()
        writer.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# plots


def emit_plots(csv_paths, out_path, title=None):
    """Learning-curve image from per-run CSVs: median line plus a shaded
    min-max band across seeds (a single seed collapses the band onto the
    line).  Raises on an empty run list or malformed files."""
    if not csv_paths:
        raise ValueError("no CSV files given; refusing to emit an empty plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series, meta = [], {}
    for path in csv_paths:
        steps, returns, meta = read_run_csv(path)
        if steps.size == 0:
            raise ValueError(f"{path}: run contains no evaluation points")
        series.append((steps, returns))
    rows = aggregate_series(series)
    steps = np.array([r[0] for r in rows])
    median = np.array([r[1] for r in rows])
    lo = np.array([r[2] for r in rows])
    hi = np.array([r[3] for r in rows])

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.fill_between(steps, lo, hi, alpha=0.25, label="min-max over seeds")
    ax.plot(steps, median, lw=2, label="median")
    ax.set_xlim(steps.min(), max(steps.max(), steps.min() + 1))
    pad = 0.05 * max(hi.max() - lo.min(), 1e-12)
    ax.set_ylim(lo.min() - pad, hi.max() + pad)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("evaluation return")
    label = title or f"{meta.get('algo', '?')} on {meta.get('env', '?')}"
    ax.set_title(label)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


# ---------------------------------------------------------------------------
# monotone-convergence check suite


def monotone_suite(n_mdps=100, m_values=(1, 3, 10), alpha=0.5, gamma=0.9,
                   max_states=20, max_actions=4, iterations=60, seed=0):
    """Soft-greedy scheme runs over random MDPs with per-iteration monotone
    convergence assertions checked against the exact optimum.

    Returns {"checked": int, "violations": [str, ...]}; empty violations
    means every chain held with slack 1e-12.
    """
    from .envs import RandomMdpParams, generate_random_mdp

    rng = np.random.default_rng(seed)
    violations = []
    checked = 0
    for i in range(n_mdps):
        n_states = int(rng.integers(2, max_states + 1))
        params = RandomMdpParams(
            n_states=n_states,
            n_actions=int(rng.integers(2, max_actions + 1)),
            branching=int(rng.integers(1, min(3, n_states) + 1)),
            gamma=gamma,
            seed=int(rng.integers(0, 2**31)),
        )
        mdp = generate_random_mdp(params)
        v0 = np.zeros(mdp.n_states)
        pi0 = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
        assert check_init(mdp, pi0, v0)
        v_star = run_pi(mdp, v0).values[-1]
        for m in m_values:
            trace = run_mosopi(mdp, pi0, v0, rule=CpiMixture(alpha), m=m,
                               max_iter=iterations)
            problems = verify_convergence_chain(mdp, trace, v_star)
            checked += 1
            violations.extend(f"mdp {i} (m={m}): {p}" for p in problems)
    return {"checked": checked, "violations": violations}
