"""Soft actor-critic agent with automatic entropy tuning.

Also houses behaviour-cloning initialization of the actor, deterministic
evaluation in a raw-state environment, and the simplified conservative-critic
baseline used for toy-domain comparisons (a penalty that pushes synthetic
state-action values below real ones).
"""

from __future__ import annotations

import json

import numpy as np

from . import diffcore as dc
from .synth import Batch

_LOG_2PI = float(np.log(2.0 * np.pi))
_LOG_STD_MIN, _LOG_STD_MAX = -20.0, 2.0
_SQUASH_EPS = 1e-6


class SquashedGaussianActor:
    """tanh-squashed Gaussian policy; log densities carry the change-of-
    variables correction."""

    def __init__(self, state_dim: int, action_dim: int, hidden=(64, 64), rng=None):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.net = dc.Mlp([state_dim, *hidden, 2 * action_dim], activation="relu", rng=rng)

    @property
    def params(self):
        return self.net.params

    def _heads_np(self, states):
        out = self.net.forward_np(states)
        mu = out[..., : self.action_dim]
        log_std = np.clip(out[..., self.action_dim:], _LOG_STD_MIN, _LOG_STD_MAX)
        return mu, log_std

    def mean_action_np(self, states) -> np.ndarray:
        mu, _ = self._heads_np(states)
        return np.tanh(mu)

    def sample_np(self, states, rng):
        """Reparameterized sample and its log density (summed over dims)."""
        mu, log_std = self._heads_np(states)
        std = np.exp(log_std)
        u = mu + std * rng.standard_normal(mu.shape)
        a = np.tanh(u)
        logp = -0.5 * (((u - mu) / std) ** 2 + 2.0 * log_std + _LOG_2PI)
        logp = logp.sum(axis=-1) - np.log(1.0 - a * a + _SQUASH_EPS).sum(axis=-1)
        return a, logp

    def log_prob_np(self, states, actions) -> np.ndarray:
        a = np.clip(actions, -1.0 + _SQUASH_EPS, 1.0 - _SQUASH_EPS)
        u = np.arctanh(a)
        mu, log_std = self._heads_np(states)
        std = np.exp(log_std)
        logp = -0.5 * (((u - mu) / std) ** 2 + 2.0 * log_std + _LOG_2PI)
        return logp.sum(axis=-1) - np.log(1.0 - a * a + _SQUASH_EPS).sum(axis=-1)

    def sample_node(self, states, rng):
        """Graph-valued (action, log density) for the actor loss."""
        out = self.net.forward(states)
        mu = dc.slice_last(out, 0, self.action_dim)
        log_std = dc.clip(dc.slice_last(out, self.action_dim, 2 * self.action_dim),
                          _LOG_STD_MIN, _LOG_STD_MAX)
        eps = rng.standard_normal(mu.value.shape)
        return dc.tanh_normal(mu, log_std, eps)


class ActorCritic:
    """Actor, twin critics with target copies, and a learned temperature."""

    def __init__(self, state_dim: int, action_dim: int, actor_hidden=(64, 64),
                 critic_hidden=(64, 64), rng=None, gamma: float = 0.99,
                 tau: float = 5e-3, actor_lr: float = 1e-4, critic_lr: float = 3e-4,
                 alpha_lr: float = 3e-4, target_entropy: float | None = None,
                 init_alpha: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng()
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.gamma = gamma
        self.tau = tau
        self.target_entropy = -float(action_dim) if target_entropy is None else target_entropy
        self.actor = SquashedGaussianActor(state_dim, action_dim, actor_hidden, rng=rng)
        self.q1 = dc.Mlp([state_dim + action_dim, *critic_hidden, 1], rng=rng)
        self.q2 = dc.Mlp([state_dim + action_dim, *critic_hidden, 1], rng=rng)
        self.tq1 = dc.Mlp([state_dim + action_dim, *critic_hidden, 1], rng=rng)
        self.tq2 = dc.Mlp([state_dim + action_dim, *critic_hidden, 1], rng=rng)
        self.tq1.set_values(self.q1.get_values())
        self.tq2.set_values(self.q2.get_values())
        self.log_alpha = dc.Node(np.array(np.log(init_alpha)))
        self.actor_opt = dc.OptimState(self.actor.params, learning_rate=actor_lr)
        self.critic_opt = dc.OptimState(self.q1.params + self.q2.params, learning_rate=critic_lr)
        self.alpha_opt = dc.OptimState([self.log_alpha], learning_rate=alpha_lr)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.value))

    # advantage-critic surface used by the model's value-reduction term ------
    def q_min(self, states, actions) -> np.ndarray:
        x = np.concatenate([states, actions], axis=-1)
        return np.minimum(self.q1.forward_np(x), self.q2.forward_np(x))[..., 0]

    def value_estimate(self, states, rng, include_entropy: bool = False) -> np.ndarray:
        """Min-twin value at a freshly sampled policy action."""
        flat = states.reshape(-1, states.shape[-1])
        a, logp = self.actor.sample_np(flat, rng)
        v = self.q_min(flat, a)
        if include_entropy:
            v = v - self.alpha * logp
        return v.reshape(states.shape[:-1])

    def soft_target_update(self) -> None:
        for online, target in ((self.q1, self.tq1), (self.q2, self.tq2)):
            for po, pt in zip(online.params, target.params):
                pt.value = (1.0 - self.tau) * pt.value + self.tau * po.value

    # persistence -------------------------------------------------------------
    def get_values(self):
        vals = [self.log_alpha.value.copy()]
        for net in (self.actor.net, self.q1, self.q2, self.tq1, self.tq2):
            vals.extend(net.get_values())
        return vals

    def set_values(self, values):
        self.log_alpha.value = np.asarray(values[0], dtype=np.float64).copy()
        i = 1
        for net in (self.actor.net, self.q1, self.q2, self.tq1, self.tq2):
            k = len(net.params)
            net.set_values(values[i:i + k])
            i += k


def _critic_targets(ac: ActorCritic, batch: Batch, rng) -> np.ndarray:
    a2, logp2 = ac.actor.sample_np(batch.next_states, rng)
    x2 = np.concatenate([batch.next_states, a2], axis=-1)
    qt = np.minimum(ac.tq1.forward_np(x2), ac.tq2.forward_np(x2))[..., 0]
    not_done = 1.0 - batch.terminals.astype(np.float64)
    return batch.rewards + ac.gamma * not_done * (qt - ac.alpha * logp2)


def _update(ac: ActorCritic, batch: Batch, rng, conservative=None) -> dict:
    """One critic step, one actor step, one temperature step, soft update.

    ``conservative`` is (penalty_weight, real_mask): adds
    weight * (mean Q over synthetic rows - mean Q over real rows) to each
    critic loss.
    """
    y = dc.constant(_critic_targets(ac, batch, rng)[:, None])
    x = np.concatenate([batch.states, batch.actions], axis=-1)
    q1n = ac.q1.forward(x)
    q2n = ac.q2.forward(x)
    d1 = dc.sub(q1n, y)
    d2 = dc.sub(q2n, y)
    critic_loss = dc.add(dc.mean(dc.mul(d1, d1)), dc.mean(dc.mul(d2, d2)))
    if conservative is not None:
        beta, real_mask = conservative
        real = np.flatnonzero(real_mask)
        synth = np.flatnonzero(~real_mask)
        if len(real) and len(synth):
            gap1 = dc.sub(dc.mean(dc.take(q1n, synth, axis=0)),
                          dc.mean(dc.take(q1n, real, axis=0)))
            gap2 = dc.sub(dc.mean(dc.take(q2n, synth, axis=0)),
                          dc.mean(dc.take(q2n, real, axis=0)))
            critic_loss = dc.add(critic_loss, dc.mul(dc.add(gap1, gap2), beta))
    critic_params = ac.q1.params + ac.q2.params
    dc.adam_step(critic_params, dc.grads_of(critic_loss, critic_params), ac.critic_opt)

    a_new, logp = ac.actor.sample_node(batch.states, rng)
    xa = dc.concat([dc.constant(batch.states), a_new], axis=-1)
    qa = dc.minimum(ac.q1.forward(xa), ac.q2.forward(xa))
    actor_loss = dc.mean(dc.sub(dc.mul(logp, ac.alpha), dc.reshape(qa, (-1,))))
    dc.adam_step(ac.actor.params, dc.grads_of(actor_loss, ac.actor.params), ac.actor_opt)

    alpha_grad = np.asarray(-(np.mean(logp.value) + ac.target_entropy))
    dc.adam_step([ac.log_alpha], [alpha_grad], ac.alpha_opt)

    ac.soft_target_update()
    mean_q = float(np.minimum(q1n.value, q2n.value).mean())
    return {
        "q_loss": float(critic_loss.value),
        "pi_loss": float(actor_loss.value),
        "alpha": ac.alpha,
        "mean_q": mean_q,
        "entropy": float(-np.mean(logp.value)),
    }


def sac_update(ac: ActorCritic, batch: Batch, rng) -> dict:
    """Standard soft actor-critic step on a mixed minibatch."""
    out = _update(ac, batch, rng, conservative=None)
    if not (np.isfinite(out["q_loss"]) and np.isfinite(out["pi_loss"])):
        raise dc.NonFiniteLossError(f"non-finite update: {out}", value=out)
    return out


def combo_update(ac: ActorCritic, real_batch: Batch, synth_batch: Batch,
                 beta: float, rng) -> dict:
    """Conservative-critic variant: the critic loss is augmented with
    beta * (mean Q over synthetic rows - mean Q over real rows). beta == 0 is
    exactly a plain update on the concatenated batch."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    batch = Batch(
        states=np.concatenate([real_batch.states, synth_batch.states]),
        actions=np.concatenate([real_batch.actions, synth_batch.actions]),
        rewards=np.concatenate([real_batch.rewards, synth_batch.rewards]),
        next_states=np.concatenate([real_batch.next_states, synth_batch.next_states]),
        terminals=np.concatenate([real_batch.terminals, synth_batch.terminals]),
        is_real=np.concatenate([np.ones(len(real_batch), dtype=bool),
                                np.zeros(len(synth_batch), dtype=bool)]),
    )
    conservative = None if beta == 0.0 else (beta, batch.is_real)
    out = _update(ac, batch, rng, conservative=conservative)
    if not (np.isfinite(out["q_loss"]) and np.isfinite(out["pi_loss"])):
        raise dc.NonFiniteLossError(f"non-finite update: {out}", value=out)
    return out


def bc_init(ac: ActorCritic, dataset, epochs: int, rng, batch_size: int = 256,
            lr: float = 1e-3) -> ActorCritic:
    """Behaviour cloning: maximize actor log likelihood of dataset actions.

    Critics are untouched; epochs == 0 leaves the actor unchanged. The squash
    correction is parameter free, so only the pre-squash Gaussian term is
    optimized.
    """
    if epochs == 0:
        return ac
    opt = dc.OptimState(ac.actor.params, learning_rate=lr)
    u_all = np.arctanh(np.clip(dataset.actions, -1.0 + _SQUASH_EPS, 1.0 - _SQUASH_EPS))
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out = ac.actor.net.forward(dataset.states[idx])
            mu = dc.slice_last(out, 0, ac.action_dim)
            log_std = dc.clip(dc.slice_last(out, ac.action_dim, 2 * ac.action_dim),
                              _LOG_STD_MIN, _LOG_STD_MAX)
            z = dc.div(dc.sub(dc.constant(u_all[idx]), mu), dc.exp(log_std))
            nll = dc.mean(dc.add(dc.mul(dc.mul(z, z), 0.5), log_std))
            dc.adam_step(ac.actor.params, dc.grads_of(nll, ac.actor.params), opt)
    return ac


def evaluate(ac: ActorCritic, env, n_episodes: int, norm_stats, rng=None) -> float:
    """Mean undiscounted return of the deterministic (mean-action) policy."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    total = 0.0
    for _ in range(n_episodes):
        raw = env.reset()
        done = False
        ep = 0.0
        while not done:
            obs = norm_stats.apply(raw) if norm_stats is not None else raw
            a = ac.actor.mean_action_np(obs[None])[0]
            raw, r, done = env.step(a)
            ep += r
        total += ep
    return total / n_episodes


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_policy(path, ac: ActorCritic, norm_stats=None) -> None:
    meta = {
        "version": 1,
        "state_dim": ac.state_dim,
        "action_dim": ac.action_dim,
        "actor_hidden": ac.actor.net.layer_sizes[1:-1],
        "critic_hidden": ac.q1.layer_sizes[1:-1],
        "gamma": ac.gamma,
        "tau": ac.tau,
        "target_entropy": ac.target_entropy,
    }
    arrays = {f"param_{i}": v for i, v in enumerate(ac.get_values())}
    if norm_stats is not None:
        arrays["norm_mean"] = norm_stats.mean
        arrays["norm_std"] = norm_stats.std
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_policy(path):
    from .worlds import NormStats

    blob = np.load(path, allow_pickle=False)
    meta = json.loads(str(blob["meta"]))
    if meta.get("version") != 1:
        raise ValueError(f"unsupported policy checkpoint version {meta.get('version')}")
    ac = ActorCritic(meta["state_dim"], meta["action_dim"],
                     actor_hidden=tuple(meta["actor_hidden"]),
                     critic_hidden=tuple(meta["critic_hidden"]),
                     rng=np.random.default_rng(0), gamma=meta["gamma"], tau=meta["tau"],
                     target_entropy=meta["target_entropy"])
    n_params = sum(1 for k in blob.files if k.startswith("param_"))
    ac.set_values([blob[f"param_{i}"] for i in range(n_params)])
    stats = None
    if "norm_mean" in blob:
        stats = NormStats(mean=blob["norm_mean"], std=blob["norm_std"])
    return ac, stats
