"""Command-line entry point: dataset generation, training runs, sweeps over
the toy hyperparameter grid, offline selection, oracle checks, and plot-data
export.

Exit codes: 0 success, 2 configuration error, 3 diverged run, 4 I/O error.
The RAMBO_SEED environment variable overrides the configured seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import multiprocessing as mp
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import agent as agent_mod
from . import dynmodel, loop, oracle, worlds

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

DEFAULT_GRID = ((2, 3e-4), (5, 3e-4), (5, 0.0))


@dataclass
class SweepSpec:
    env_id: str
    pairs: tuple = DEFAULT_GRID
    seeds: int = 5
    out_dir: str = "sweep"
    jobs: int = 1

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("sweep grid must be non-empty")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _write_run_outputs(out_dir: str, result: loop.RunResult) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    result.log.to_csv(os.path.join(out_dir, "runlog.csv"))
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        fh.write(result.config.to_json())
    dynmodel.save_ensemble(os.path.join(out_dir, "model.npz"), result.ensemble,
                           result.norm_stats)
    agent_mod.save_policy(os.path.join(out_dir, "policy.npz"), result.ac,
                          result.norm_stats)
    summary = loop.summarize(result)
    score = loop.final_score(result.log, result.config.eval_window)
    payload = {
        "env_id": result.config.env_id,
        "seed": result.config.seed,
        "k": result.config.k,
        "lam": result.config.lam,
        "q_avg": summary.q_avg,
        "q_var": summary.q_var,
        "heuristic": summary.heuristic,
        "final_score": score.score,
        "diverged": bool(summary.diverged),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
    return payload


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    ds = worlds.generate_dataset(args.env, args.n, seed=args.seed)
    try:
        worlds.save_dataset(ds, args.out)
    except OSError as err:
        raise CliError(f"cannot write {args.out}: {err}", EXIT_IO) from err
    print(f"wrote {len(ds)} transitions to {args.out}")
    return EXIT_OK


def _load_config(args) -> loop.RunConfig:
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = loop.RunConfig.from_json(fh.read())
        except OSError as err:
            raise CliError(f"cannot read {args.config}: {err}", EXIT_IO) from err
        except (TypeError, ValueError, KeyError) as err:
            raise CliError(f"bad config: {err}", EXIT_CONFIG) from err
    elif args.env:
        cfg = loop.toy_config(args.env)
    else:
        raise CliError("need --config or --env", EXIT_CONFIG)
    overrides = {}
    for field in ("seed", "k", "lam", "n_iter"):
        value = getattr(args, field, None)
        if value is not None:
            overrides[field] = value
    if getattr(args, "ablate_adversary", False):
        overrides["lam"] = 0.0
    if "RAMBO_SEED" in os.environ:
        overrides["seed"] = int(os.environ["RAMBO_SEED"])
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def cmd_run(args) -> int:
    cfg = _load_config(args)
    result = loop.run_rambo(cfg)
    payload = _write_run_outputs(args.out_dir, result)
    print(json.dumps(payload))
    return EXIT_DIVERGED if payload["diverged"] else EXIT_OK


def _sweep_worker(job):
    out_dir, cfg = job
    result = loop.run_rambo(cfg)
    return _write_run_outputs(out_dir, result)


def cmd_sweep(args) -> int:
    try:
        pairs = tuple((int(p.split(":")[0]), float(p.split(":")[1]))
                      for p in args.pairs.split(","))
    except (ValueError, IndexError) as err:
        raise CliError(f"bad --pairs: {err}", EXIT_CONFIG) from err
    spec = SweepSpec(env_id=args.env, pairs=pairs, seeds=args.seeds,
                     out_dir=args.out_dir, jobs=args.jobs)
    if args.base_config:
        try:
            with open(args.base_config) as fh:
                base = loop.RunConfig.from_json(fh.read())
        except OSError as err:
            raise CliError(f"cannot read {args.base_config}: {err}", EXIT_IO) from err
    else:
        base = loop.toy_config(spec.env_id)
    jobs = []
    for k, lam in spec.pairs:
        for seed in range(spec.seeds):
            cfg = dataclasses.replace(base, env_id=spec.env_id, seed=seed, k=k, lam=lam)
            if args.n_iter is not None:
                cfg = dataclasses.replace(cfg, n_iter=args.n_iter)
            run_dir = os.path.join(spec.out_dir, f"k{k}_lam{lam:g}_s{seed}")
            jobs.append((run_dir, cfg))
    if spec.jobs > 1:
        with mp.Pool(spec.jobs) as pool:
            rows = list(pool.imap(_sweep_worker, jobs))
    else:
        rows = [_sweep_worker(job) for job in jobs]
    os.makedirs(spec.out_dir, exist_ok=True)
    summary_path = os.path.join(spec.out_dir, "summary.csv")
    with open(summary_path, "w") as fh:
        fh.write("k,lam,seed,q_avg,q_var,heuristic,final_score,diverged\n")
        for r in rows:
            fh.write(f"{r['k']},{r['lam']!r},{r['seed']},{r['q_avg']!r},"
                     f"{r['q_var']!r},{r['heuristic']!r},{r['final_score']!r},"
                     f"{int(r['diverged'])}\n")
    print(f"wrote {summary_path} ({len(rows)} runs)")
    return EXIT_OK


def _read_summary(path):
    rows = []
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            for line in fh:
                vals = line.strip().split(",")
                rows.append(dict(zip(header, vals)))
    except OSError as err:
        raise CliError(f"cannot read {path}: {err}", EXIT_IO) from err
    return rows


def cmd_select(args) -> int:
    path = args.summary or os.path.join(args.dir, "summary.csv")
    rows = _read_summary(path)
    by_pair: dict = {}
    for r in rows:
        key = (int(r["k"]), float(r["lam"]))
        by_pair.setdefault(key, []).append(r)
    summaries = []
    for (k, lam), group in sorted(by_pair.items()):
        live = [g for g in group if g["diverged"] == "0"]
        cfg = loop.toy_config(args.env, k=k, lam=lam)
        if not live:
            summaries.append(loop.RunSummary(cfg, float("nan"), float("nan"), True))
            continue
        q_avg = float(np.mean([float(g["q_avg"]) for g in live]))
        q_var = float(np.mean([float(g["q_var"]) for g in live]))
        summaries.append(loop.RunSummary(cfg, q_avg, q_var, False))
    try:
        chosen = loop.offline_select(summaries)
    except ValueError as err:
        raise CliError(str(err), EXIT_CONFIG) from err
    print(json.dumps({"k": chosen.config.k, "lam": chosen.config.lam,
                      "heuristic": chosen.heuristic}))
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    passes, margins = 0, []
    for seed in range(args.seeds):
        rng = np.random.default_rng(seed)
        mdp = oracle.random_mdp(args.states, args.actions, args.gamma, rng)
        policy = oracle.random_policy(args.states, args.actions, rng)
        logging_policy = oracle.random_policy(args.states, args.actions, rng)
        s, a, sp = oracle.sample_tabular_transitions(mdp, logging_policy,
                                                     args.transitions, rng)
        res = oracle.check_prop1(mdp, s, a, sp, policy)
        passes += res.ok
        margins.append(res.margin)
    print(json.dumps({"seeds": args.seeds, "passes": passes,
                      "pass_rate": passes / args.seeds,
                      "mean_margin": float(np.mean(margins))}))
    return EXIT_OK if passes >= 0.95 * args.seeds else EXIT_CONFIG


def _load_policy_ckpt(path):
    if not path:
        raise CliError("this plot kind needs --policy <checkpoint>", EXIT_CONFIG)
    try:
        return agent_mod.load_policy(path)
    except (OSError, ValueError) as err:
        raise CliError(f"cannot load policy checkpoint {path}: {err}", EXIT_IO) from err


def cmd_plot_data(args) -> int:
    grid = np.linspace(-1.0, 1.0, args.grid_n)
    rows = []
    if args.kind == "q_slice":
        ac, stats = _load_policy_ckpt(args.policy)
        s0 = stats.apply(np.zeros(ac.state_dim)) if stats else np.zeros(ac.state_dim)
        states = np.tile(s0, (args.grid_n, 1))
        q = ac.q_min(states, grid[:, None])
        rows = [("action", "q_min")] + list(zip(grid, q))
    elif args.kind == "policy_action":
        ac, stats = _load_policy_ckpt(args.policy)
        s0 = stats.apply(np.zeros(ac.state_dim)) if stats else np.zeros(ac.state_dim)
        a = ac.actor.mean_action_np(s0[None])[0, 0]
        rows = [("mean_action",), (a,)]
    elif args.kind == "model_curve":
        if not args.model:
            raise CliError("model_curve needs --model <checkpoint>", EXIT_CONFIG)
        try:
            ens, stats = dynmodel.load_ensemble(args.model)
        except (OSError, ValueError) as err:
            raise CliError(f"cannot load model checkpoint {args.model}: {err}",
                           EXIT_IO) from err
        s0 = stats.apply(np.zeros(ens.state_dim)) if stats else np.zeros(ens.state_dim)
        states = np.tile(s0, (args.grid_n, 1))
        mus, variances = [], []
        for m in ens.elite_indices:
            mu, lv = ens.member_heads_np(m, states, grid[:, None])
            mus.append(mu[:, 0])
            variances.append(np.exp(lv[:, 0]))
        mu_mean = np.mean(mus, axis=0)
        total_var = np.mean(variances, axis=0) + np.var(mus, axis=0)
        if stats is not None:
            mu_raw = stats.invert(mu_mean[:, None])[:, 0]
            sd_raw = np.sqrt(total_var) * stats.std[0]
        else:
            mu_raw, sd_raw = mu_mean, np.sqrt(total_var)
        rows = [("action", "next_state_mean", "next_state_sd")] + list(
            zip(grid, mu_raw, sd_raw))
    else:
        raise CliError(f"unknown plot kind {args.kind!r}", EXIT_CONFIG)
    try:
        with open(args.out, "w") as fh:
            for row in rows:
                fh.write(",".join(str(v) for v in row) + "\n")
    except OSError as err:
        raise CliError(f"cannot write {args.out}: {err}", EXIT_IO) from err
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rambo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an offline dataset CSV")
    p.add_argument("env", choices=worlds.ENV_IDS)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("run", help="run one training configuration")
    p.add_argument("--config", help="RunConfig JSON path")
    p.add_argument("--env", choices=worlds.ENV_IDS)
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--n-iter", type=int, dest="n_iter")
    p.add_argument("--ablate-adversary", action="store_true",
                   help="force lam = 0 (no adversarial updates)")
    p.add_argument("--out-dir", default="run_out")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="run the (k, lam) grid over seeds")
    p.add_argument("--env", choices=worlds.ENV_IDS, required=True)
    p.add_argument("--pairs", default="2:3e-4,5:3e-4,5:0")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--n-iter", type=int, dest="n_iter")
    p.add_argument("--base-config", dest="base_config",
                   help="RunConfig JSON used as the base for every grid point")
    p.add_argument("--out-dir", default="sweep")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("select", help="offline-select a config from a sweep")
    p.add_argument("--dir", default="sweep")
    p.add_argument("--summary")
    p.add_argument("--env", choices=worlds.ENV_IDS, default="single_transition")
    p.set_defaults(fn=cmd_select)

    p = sub.add_parser("oracle-check", help="run the tabular pessimism battery")
    p.add_argument("--states", type=int, default=4)
    p.add_argument("--actions", type=int, default=2)
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--transitions", type=int, default=600)
    p.add_argument("--gamma", type=float, default=0.9)
    p.set_defaults(fn=cmd_oracle_check)

    p = sub.add_parser("plot-data", help="export plot-ready CSV series")
    p.add_argument("kind", choices=("q_slice", "model_curve", "policy_action"))
    p.add_argument("--policy", help="policy checkpoint (.npz)")
    p.add_argument("--model", help="model checkpoint (.npz)")
    p.add_argument("--grid-n", type=int, default=201, dest="grid_n")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_CONFIG if err.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except (ValueError, TypeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
