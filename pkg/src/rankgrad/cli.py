"""Command line entry point: ``rankgrad {train,eval,sweep,gradcheck,theory,explore-sim}``.

Exit codes: 0 success, 1 a check or run failed, 2 bad configuration or input.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import theory
from .envs import parse_env
from .harness import (GRADCHECK_LOSSES, MODEL_KINDS, ConfigError, SweepSpec, default_out_dir,
                      gradcheck_csv_text, load_config, run_experiment, run_gradcheck, run_sweep)
from .model import load_checkpoint
from .offpolicy import evaluate

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _cmd_train(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    out = Path(args.out) if args.out else default_out_dir() / f"seed{cfg.run.seed}"
    log = run_experiment(cfg, out)
    status = f"converged at step {log.converged_step}" if log.converged else "budget exhausted"
    print(f"{status}; final greedy return {log.final_return!r}; metrics in {out / 'metrics.csv'}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    spec = parse_env(args.env)
    model = load_checkpoint(args.checkpoint, c_q=args.c_q)
    res = evaluate(model, spec, args.episodes, mode=args.mode, seed=args.seed)
    print(json.dumps({"mean": res.mean, "min": res.min, "returns": res.returns.tolist()}))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    base = load_config(args.config)
    axes = {}
    for item in args.axis or []:
        key, sep, values = item.partition("=")
        if not sep:
            raise ConfigError(f"axis must look like key=v1;v2, got {item!r}")
        axes[key.strip().replace("-", "_")] = [v for v in values.split(";") if v]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    out = Path(args.out) if args.out else default_out_dir() / "sweep"
    results = run_sweep(SweepSpec(base, seeds, axes, out, args.workers))
    failed = [r for r in results if r.log.error is not None]
    for r in results:
        state = "FAILED" if r.log.error else ("converged" if r.log.converged else "budget")
        print(f"{r.variant}\tseed={r.seed}\t{state}\tfinal={r.log.final_return!r}")
    print(f"aggregate written to {out / 'aggregate.csv'}")
    return EXIT_FAIL if failed else EXIT_OK


def _cmd_gradcheck(args) -> int:
    kinds = MODEL_KINDS if args.model == "all" else (args.model,)
    trials = run_gradcheck([args.loss], kinds, args.trials, args.tol, args.seed)
    worst = max(t.report.max_rel_error for t in trials)
    failed = [t for t in trials if not t.passed]
    if args.report:
        Path(args.report).write_text(gradcheck_csv_text(trials), encoding="utf-8")
    print(f"loss={args.loss} trials={len(trials)} max_rel_error={worst:.3e} failures={len(failed)}")
    return EXIT_FAIL if failed else EXIT_OK


def _theory_result(args) -> dict:
    which = args.which
    if which == "sl-bound":
        inputs = {"gamma": args.gamma, "delta": args.delta, "hypotheses": args.hypotheses}
        result = {"n_min": theory.sl_sample_complexity(**inputs), "bound": theory.sl_sample_bound(**inputs)}
    elif which == "gen-bound":
        inputs = {"D": args.D, "eta": args.eta, "m": args.m, "T": args.T}
        result = {"lower_bound": theory.generalization_lower_bound(**inputs)}
    elif which == "rl-bound":
        inputs = {"epsilon": args.epsilon, "D": args.D, "m": args.m, "T": args.T,
                  "hypotheses": args.hypotheses, "delta": args.delta}
        result = {"n_min": theory.rl_sample_complexity(**inputs),
                  "bound": theory.rl_sample_complexity(**inputs, exact=True)}
    elif which == "explore-eff":
        inputs = {"N": args.N, "n_opt": args.n_opt, "k": args.k, "i": args.i}
        result = {"p_at_least": theory.exploration_efficiency_random(**inputs),
                  "expected": theory.expected_exploration_efficiency(args.N, args.n_opt, args.k).mean}
    else:
        inputs = {"delta_prime": args.delta_prime, "n": args.n, "k": args.k, "N": args.N, "n_opt": args.n_opt,
                  "hypotheses": args.hypotheses, "m": args.m, "T": args.T, "D": args.D}
        jb = theory.joint_bound(**inputs)
        result = {"eta": jb.eta, "lower_bound": jb.bound, "p_explore": jb.p_explore,
                  "trajectories_needed": jb.trajectories_needed}
    return {"calculator": which, "inputs": inputs, "result": result, "log_base": theory.LOG_BASE}


def _cmd_theory(args) -> int:
    try:
        payload = _theory_result(args)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        for key, value in payload["result"].items():
            print(f"{key} = {value!r}")
    return EXIT_OK


def _cmd_explore_sim(args) -> int:
    counts = theory.simulate_exploration(args.N, args.n_opt, args.k, args.replicates,
                                         np.random.default_rng(args.seed))
    print("i\tclosed_form\tempirical\tabs_diff")
    worst = 0.0
    for i in range(1, args.n_opt + 1):
        closed = theory.exploration_efficiency_random(args.N, args.n_opt, args.k, i)
        emp = float(np.mean(counts >= i))
        worst = max(worst, abs(closed - emp))
        print(f"{i}\t{closed:.6f}\t{emp:.6f}\t{abs(closed - emp):.6f}")
    est = theory.expected_exploration_efficiency(counts=counts)
    closed_e = theory.expected_exploration_efficiency(args.N, args.n_opt, args.k).mean
    print(f"E\t{closed_e:.6f}\t{est.mean:.6f}\t(se {est.stderr:.6f})")
    return EXIT_FAIL if args.tol is not None and worst > args.tol else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rankgrad", description="Ranking policy gradient toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training job from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--env", required=True)
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--c-q", type=float, default=None)
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("sweep", help="seed sweep with variant axes")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", default="0,1,2,3,4")
    s.add_argument("--axis", action="append", help="key=v1;v2 (repeatable)")
    s.add_argument("--out")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=_cmd_sweep)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--loss", choices=GRADCHECK_LOSSES, required=True)
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--model", choices=(*MODEL_KINDS, "all"), default="all")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--report", help="write a per-coordinate CSV here")
    g.set_defaults(func=_cmd_gradcheck)

    th = sub.add_parser("theory", help="closed-form calculators")
    tsub = th.add_subparsers(dest="which", required=True)
    sl = tsub.add_parser("sl-bound")
    sl.add_argument("--gamma", type=float, required=True)
    sl.add_argument("--delta", type=float, required=True)
    sl.add_argument("--hypotheses", type=int, required=True)
    gb = tsub.add_parser("gen-bound")
    gb.add_argument("--D", type=float, required=True)
    gb.add_argument("--eta", type=float, required=True)
    gb.add_argument("--m", type=int, required=True)
    gb.add_argument("--T", type=int, required=True)
    rl = tsub.add_parser("rl-bound")
    rl.add_argument("--epsilon", type=float, required=True)
    rl.add_argument("--D", type=float, required=True)
    rl.add_argument("--m", type=int, required=True)
    rl.add_argument("--T", type=int, required=True)
    rl.add_argument("--hypotheses", type=int, required=True)
    rl.add_argument("--delta", type=float, required=True)
    ee = tsub.add_parser("explore-eff")
    ee.add_argument("--N", type=int, required=True)
    ee.add_argument("--n-opt", type=int, required=True)
    ee.add_argument("--k", type=int, required=True)
    ee.add_argument("--i", type=int, default=1)
    jb = tsub.add_parser("joint-bound")
    jb.add_argument("--delta-prime", type=float, required=True)
    jb.add_argument("--n", type=int, required=True)
    jb.add_argument("--k", type=int, required=True)
    jb.add_argument("--N", type=int, required=True)
    jb.add_argument("--n-opt", type=int, required=True)
    jb.add_argument("--hypotheses", type=int, required=True)
    jb.add_argument("--m", type=int, required=True)
    jb.add_argument("--T", type=int, required=True)
    jb.add_argument("--D", type=float, required=True)
    for sp in (sl, gb, rl, ee, jb):
        sp.add_argument("--json", action="store_true")
    th.set_defaults(func=_cmd_theory)

    x = sub.add_parser("explore-sim", help="Monte Carlo check of exploration efficiency")
    x.add_argument("--N", type=int, required=True)
    x.add_argument("--n-opt", type=int, required=True)
    x.add_argument("--k", type=int, required=True)
    x.add_argument("--replicates", type=int, default=200_000)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--tol", type=float, default=None, help="exit 1 if any |closed - empirical| exceeds this")
    x.set_defaults(func=_cmd_explore_sim)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:  # config, environment, checkpoint and file errors
        print(f"rankgrad: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
