"""Training orchestrator: MLE pretraining, alternating agent/adversary
phases, metric logging, offline hyperparameter selection, and reproducible
seeding via named child streams."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import agent as agent_mod
from . import diffcore as dc
from . import dynmodel, synth, worlds

RUNLOG_COLUMNS = ("iteration", "eval_return", "q_avg", "model_mle_nll",
                  "model_adv_value", "policy_entropy", "alpha", "wall_time")

# fixed spawn order of per-consumer rng streams; isolation keeps runs that
# skip a phase (e.g. lam=0 never draws adversary batches) bit-comparable
_STREAMS = ("data", "model", "agent", "bc", "rollouts", "batches",
            "agent_noise", "adversary", "eval", "probe")


@dataclass
class RunConfig:
    """Every knob of one training run."""

    env_id: str
    seed: int = 0
    k: int = 5
    lam: float = 3e-2
    f_real: float = 0.5
    n_iter: int = 50
    agent_updates_per_iter: int = 200
    model_updates_per_iter: int = 200
    bc_init: bool = False
    bc_epochs: int = 50
    rollout_policy: str = "current"        # or "uniform_random"
    rollouts_per_iter: int = 400
    retain_iters: int = 5
    dataset_n: int = 10_000
    dataset_path: str | None = None
    batch_size: int = 256
    model_batch_size: int = 256
    actor_hidden: tuple = (64, 64)
    critic_hidden: tuple = (64, 64)
    model_hidden: tuple = (64, 64, 64)
    n_model_nets: int = 7
    n_elites: int = 5
    actor_lr: float = 1e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    init_alpha: float = 1.0
    model_lr: float = 3e-4
    gamma: float = 0.99
    tau: float = 5e-3
    target_entropy: float | None = None    # None -> -action_dim
    pretrain_max_epochs: int = 100
    pretrain_patience: int = 8
    pretrain_holdout_cap: int = 1000
    normalize_adv: bool = True
    entropy_in_value: bool = False
    agent_algo: str = "sac"                # or "combo"
    combo_beta: float = 0.2
    model_update_mode: str = "adversarial"  # or "mle_only"
    eval_episodes: int = 10
    eval_window: int = 10
    heuristic_window: int = 10
    probe_size: int = 1024
    divergence_threshold: float = 1e8

    def __post_init__(self):
        if self.lam < 0 or not (0.0 <= self.f_real <= 1.0):
            raise ValueError("need lam >= 0 and 0 <= f_real <= 1")
        if self.k < 1 or self.n_iter < 1:
            raise ValueError("need k >= 1 and n_iter >= 1")
        if self.rollout_policy not in ("current", "uniform_random"):
            raise ValueError(f"unknown rollout policy {self.rollout_policy!r}")
        if self.agent_algo not in ("sac", "combo"):
            raise ValueError(f"unknown agent algo {self.agent_algo!r}")
        if self.model_update_mode not in ("adversarial", "mle_only"):
            raise ValueError(f"unknown model update mode {self.model_update_mode!r}")
        self.actor_hidden = tuple(self.actor_hidden)
        self.critic_hidden = tuple(self.critic_hidden)
        self.model_hidden = tuple(self.model_hidden)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls(**json.loads(text))


def toy_config(env_id: str, **overrides) -> RunConfig:
    cfg = dict(env_id=env_id)
    if env_id == "illustrative":
        cfg.update(n_iter=15)
    cfg.update(overrides)
    return RunConfig(**cfg)


def toy_combo_config(env_id: str, **overrides) -> RunConfig:
    """Conservative-critic baseline: plain MLE model kept frozen after
    pretraining, critic penalty active, no adversarial updates."""
    cfg = dict(agent_algo="combo", combo_beta=0.2, lam=0.0,
               model_updates_per_iter=0)
    cfg.update(overrides)
    return toy_config(env_id, **cfg)


def benchmark_config(env_id: str, **overrides) -> RunConfig:
    """Full-size configuration: 2000 iterations with 1000/1000 updates and
    the large net sizes. Expressible for smoke testing; far beyond desk scale
    to run in full."""
    cfg = dict(
        env_id=env_id,
        n_iter=2000,
        agent_updates_per_iter=1000,
        model_updates_per_iter=1000,
        actor_hidden=(256, 256, 256),
        critic_hidden=(256, 256, 256),
        model_hidden=(200, 200, 200, 200),
        heuristic_window=100,
        bc_init=True,
    )
    cfg.update(overrides)
    return RunConfig(**cfg)


# ---------------------------------------------------------------------------
# Run log
# ---------------------------------------------------------------------------


@dataclass
class RunLog:
    rows: list = field(default_factory=list)
    q_var: float = float("nan")
    diverged: bool = False

    def append(self, **kwargs) -> None:
        self.rows.append({c: kwargs[c] for c in RUNLOG_COLUMNS})

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(RUNLOG_COLUMNS) + "\n")
            for row in self.rows:
                fh.write(",".join(repr(float(row[c])) for c in RUNLOG_COLUMNS) + "\n")

    @classmethod
    def from_csv(cls, path) -> "RunLog":
        log = cls()
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            if tuple(header) != RUNLOG_COLUMNS:
                raise ValueError(f"{path}: unexpected columns {header}")
            for line in fh:
                vals = [float(v) for v in line.strip().split(",")]
                log.append(**dict(zip(RUNLOG_COLUMNS, vals)))
        return log


class FinalScore(NamedTuple):
    score: float
    diverged: bool


def final_score(log: RunLog, eval_window: int = 10) -> FinalScore:
    """Mean evaluation return over the final window of logged iterations."""
    if not log.rows:
        return FinalScore(float("nan"), log.diverged)
    returns = log.column("eval_return")
    finite = returns[np.isfinite(returns)]
    window = finite[-eval_window:]
    return FinalScore(float(window.mean()), log.diverged)


@dataclass
class RunSummary:
    config: RunConfig
    q_avg: float
    q_var: float
    diverged: bool

    @property
    def heuristic(self) -> float:
        return self.q_avg + self.q_var


def offline_select(summaries) -> RunSummary:
    """Pick the candidate minimizing q_avg + q_var; diverged runs are
    excluded; ties break toward smaller lam, then smaller k."""
    live = [s for s in summaries if not s.diverged]
    if not live:
        raise ValueError("all candidate runs diverged")
    return min(live, key=lambda s: (s.heuristic, s.config.lam, s.config.k))


# ---------------------------------------------------------------------------
# The main loop
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    config: RunConfig
    log: RunLog
    ensemble: dynmodel.GaussianEnsemble
    ac: agent_mod.ActorCritic
    norm_stats: worlds.NormStats
    trace: list
    pretrain: dynmodel.PretrainReport


def _streams(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(_STREAMS, children)}


def _policy_sampler(config: RunConfig, ac: agent_mod.ActorCritic):
    if config.rollout_policy == "uniform_random":
        return lambda states, rng: rng.uniform(-1.0, 1.0, (len(states), ac.action_dim))
    return lambda states, rng: ac.actor.sample_np(states, rng)[0]


class _AdvCritic:
    """Advantage critic view over the agent (value at fresh policy action)."""

    def __init__(self, ac: agent_mod.ActorCritic, include_entropy: bool, rng):
        self.ac = ac
        self.include_entropy = include_entropy
        self.rng = rng

    def value_estimate(self, next_states, rng=None):
        return self.ac.value_estimate(next_states, self.rng,
                                      include_entropy=self.include_entropy)

    def q_min(self, states, actions):
        return self.ac.q_min(states, actions)


def run_rambo(config: RunConfig, progress=None) -> RunResult:
    """Execute one full training run per the alternating schedule:
    pretrain, then per iteration rollouts -> agent updates -> model updates
    -> evaluation. Deterministic given the config seed."""
    rngs = _streams(config.seed)
    trace: list = []

    if config.dataset_path:
        raw = worlds.load_dataset(config.dataset_path)
    else:
        raw = worlds.generate_dataset(config.env_id, config.dataset_n,
                                      seed=rngs["data"])
    dataset = worlds.normalize_states(raw)
    stats = dataset.normalization

    ensemble, pretrain = dynmodel.mle_pretrain(
        dataset, n_nets=config.n_model_nets, n_elites=config.n_elites,
        rng=rngs["model"], hidden=config.model_hidden, lr=config.model_lr,
        batch_size=config.model_batch_size, max_epochs=config.pretrain_max_epochs,
        patience=config.pretrain_patience, holdout_cap=config.pretrain_holdout_cap)

    ac = agent_mod.ActorCritic(
        dataset.state_dim, dataset.action_dim, actor_hidden=config.actor_hidden,
        critic_hidden=config.critic_hidden, rng=rngs["agent"], gamma=config.gamma,
        tau=config.tau, actor_lr=config.actor_lr, critic_lr=config.critic_lr,
        alpha_lr=config.alpha_lr, target_entropy=config.target_entropy,
        init_alpha=config.init_alpha)
    if config.bc_init:
        agent_mod.bc_init(ac, dataset, config.bc_epochs, rngs["bc"])

    model_opt = dc.OptimState(ensemble.params, learning_rate=config.model_lr)
    buffer = synth.SynthBuffer(
        capacity=config.rollouts_per_iter * config.k * config.retain_iters,
        state_dim=dataset.state_dim, action_dim=dataset.action_dim)
    done_fn = worlds.termination_rule(config.env_id)
    env = worlds.ToyEnv(config.env_id, rng=rngs["eval"])
    probe_idx = rngs["probe"].integers(0, len(dataset), size=min(config.probe_size, len(dataset)))
    probe_states = dataset.states[probe_idx]
    probe_actions = dataset.actions[probe_idx]
    sampler = _policy_sampler(config, ac)
    adv_critic = _AdvCritic(ac, config.entropy_in_value, rngs["adversary"])

    log = RunLog()
    for it in range(1, config.n_iter + 1):
        t0 = time.perf_counter()
        trace.append(("rollouts", it))
        roll = synth.generate_rollouts(sampler, ensemble, dataset, config.k,
                                       config.rollouts_per_iter, rngs["rollouts"], done_fn)
        buffer.add(*roll, iteration=it)

        trace.append(("agent", it))
        ent_sum = 0.0
        try:
            for _ in range(config.agent_updates_per_iter):
                batch = synth.mixed_batch(dataset, buffer, config.f_real,
                                          config.batch_size, rngs["batches"])
                if config.agent_algo == "combo":
                    real, syn = _split_batch(batch)
                    out = agent_mod.combo_update(ac, real, syn, config.combo_beta,
                                                 rngs["agent_noise"])
                else:
                    out = agent_mod.sac_update(ac, batch, rngs["agent_noise"])
                ent_sum += out["entropy"]

            trace.append(("model", it))
            mle_sum = adv_sum = 0.0
            for _ in range(config.model_updates_per_iter):
                data_batch = _dataset_batch(dataset, config.model_batch_size, rngs["batches"])
                if config.model_update_mode == "mle_only":
                    m = dynmodel.mle_update(ensemble, data_batch, model_opt)
                elif config.lam == 0.0:
                    m = dynmodel.adversarial_update(ensemble, data_batch, None, 0.0,
                                                    model_opt, adv_critic, config.gamma)
                else:
                    adv_batches = dynmodel.draw_adversary_batches(
                        ensemble, lambda s, r: ac.actor.sample_np(s, r)[0], dataset,
                        config.model_batch_size, rngs["adversary"], done_fn)
                    m = dynmodel.adversarial_update(
                        ensemble, data_batch, adv_batches, config.lam, model_opt,
                        adv_critic, config.gamma, normalize_adv=config.normalize_adv,
                        rng=rngs["adversary"])
                mle_sum += m["model_mle_nll"]
                adv_sum += m["model_adv_value"]
        except dc.NonFiniteLossError:
            log.diverged = True
            break

        trace.append(("eval", it))
        eval_return = agent_mod.evaluate(ac, env, config.eval_episodes, stats)
        q_avg = float(np.minimum.reduce([
            ac.q1.forward_np(np.concatenate([probe_states, probe_actions], axis=-1)),
            ac.q2.forward_np(np.concatenate([probe_states, probe_actions], axis=-1)),
        ]).mean())
        updates = max(config.model_updates_per_iter, 1)
        log.append(iteration=it, eval_return=eval_return, q_avg=q_avg,
                   model_mle_nll=mle_sum / updates, model_adv_value=adv_sum / updates,
                   policy_entropy=ent_sum / max(config.agent_updates_per_iter, 1),
                   alpha=ac.alpha, wall_time=time.perf_counter() - t0)
        if progress is not None:
            progress(it, log.rows[-1])
        if not np.isfinite(q_avg) or abs(q_avg) > config.divergence_threshold:
            log.diverged = True
            break

    window = log.column("q_avg")[-config.heuristic_window:] if log.rows else np.array([np.nan])
    log.q_var = float(np.var(window))
    return RunResult(config=config, log=log, ensemble=ensemble, ac=ac,
                     norm_stats=stats, trace=trace, pretrain=pretrain)


def _dataset_batch(dataset, batch_size: int, rng) -> synth.Batch:
    idx = rng.integers(0, len(dataset), size=batch_size)
    return synth.Batch(states=dataset.states[idx], actions=dataset.actions[idx],
                       rewards=dataset.rewards[idx], next_states=dataset.next_states[idx],
                       terminals=dataset.terminals[idx])


def _split_batch(batch: synth.Batch):
    real = batch.is_real
    def sel(mask):
        return synth.Batch(states=batch.states[mask], actions=batch.actions[mask],
                           rewards=batch.rewards[mask], next_states=batch.next_states[mask],
                           terminals=batch.terminals[mask])
    return sel(real), sel(~real)


def summarize(result: RunResult) -> RunSummary:
    q = result.log.column("q_avg") if result.log.rows else np.array([np.nan])
    return RunSummary(config=result.config, q_avg=float(q[-1]),
                      q_var=result.log.q_var, diverged=result.log.diverged)
