"""Ensemble Gaussian dynamics model and its two training modes.

Each member maps (state, action) to a diagonal Gaussian over (next_state,
reward). Pretraining is plain maximum likelihood with elite selection on a
holdout split. Afterwards the elites receive combined updates: a maximum
likelihood term on real data plus a weighted policy-gradient-style term that
lowers the agent's value inside the model, estimated from synthetic
transitions as advantage-weighted log-density gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .synth import Batch

_LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# Ensemble definition
# ---------------------------------------------------------------------------


class GaussianEnsemble:
    """Stack of MLP-backed diagonal-Gaussian heads over (next_state, reward)."""

    def __init__(self, state_dim: int, action_dim: int, hidden=(64, 64, 64),
                 n_total: int = 7, n_elites: int = 5, rng=None,
                 logvar_min_init: float = -10.0, logvar_max_init: float = 0.5):
        if n_elites > n_total:
            raise ValueError("n_elites cannot exceed n_total")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.out_dim = state_dim + 1
        self.n_total = n_total
        self.n_elites = n_elites
        rng = rng if rng is not None else np.random.default_rng()
        self.net = dc.Mlp([state_dim + action_dim, *hidden, 2 * self.out_dim],
                          activation="relu", rng=rng, members=n_total)
        self.min_logvar = dc.Node(np.full((n_total, 1, self.out_dim), logvar_min_init))
        self.max_logvar = dc.Node(np.full((n_total, 1, self.out_dim), logvar_max_init))
        self.elite_indices: list[int] = list(range(n_elites))

    @property
    def params(self) -> list[dc.Node]:
        return self.net.params + [self.min_logvar, self.max_logvar]

    # numpy heads ------------------------------------------------------------
    def heads_np(self, x: np.ndarray, members=None):
        """Means and soft-bounded log-variances; x is (M,B,in) or (B,in)."""
        if members is not None:
            members = np.asarray(members)
            h = x
            for i, (w, b) in enumerate(zip(self.net.weights, self.net.biases)):
                h = h @ w.value[members] + b.value[members]
                if i < len(self.net.weights) - 1:
                    h = np.maximum(h, 0.0)
            raw = h
            min_lv = self.min_logvar.value[members]
            max_lv = self.max_logvar.value[members]
        else:
            raw = self.net.forward_np(x)
            min_lv = self.min_logvar.value
            max_lv = self.max_logvar.value
        mu = raw[..., : self.out_dim]
        lv = raw[..., self.out_dim:]
        lv = max_lv - np.logaddexp(0.0, max_lv - lv)
        lv = min_lv + np.logaddexp(0.0, lv - min_lv)
        return mu, lv

    def member_heads_np(self, member: int, states, actions):
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=-1)
        mu, lv = self.heads_np(x[None], members=[member])
        return mu[0], lv[0]

    # graph heads --------------------------------------------------------------
    def heads_node(self, x, members=None):
        h = x if isinstance(x, dc.Node) else dc.constant(x)
        weights, biases = self.net.weights, self.net.biases
        min_lv, max_lv = self.min_logvar, self.max_logvar
        if members is not None:
            weights = [dc.take(w, members, axis=0) for w in weights]
            biases = [dc.take(b, members, axis=0) for b in biases]
            min_lv = dc.take(min_lv, members, axis=0)
            max_lv = dc.take(max_lv, members, axis=0)
        last = len(weights) - 1
        for i, (w, b) in enumerate(zip(weights, biases)):
            h = dc.affine(h, w, b)
            if i < last:
                h = dc.relu(h)
        mu = dc.slice_last(h, 0, self.out_dim)
        lv = dc.slice_last(h, self.out_dim, 2 * self.out_dim)
        lv = dc.sub(max_lv, dc.softplus(dc.sub(max_lv, lv)))
        lv = dc.add(min_lv, dc.softplus(dc.sub(lv, min_lv)))
        return mu, lv

    def log_prob_node(self, states, actions, rewards, next_states, members=None) -> dc.Node:
        """Differentiable log density of (next_state, reward) targets.

        Accepts per-member stacks (M,B,·) or a single batch (B,·); returns a
        node shaped (M,B) or (B,).
        """
        x = np.concatenate([states, actions], axis=-1)
        target = np.concatenate([next_states, rewards[..., None]], axis=-1)
        mu, lv = self.heads_node(x, members=members)
        return dc.neg(dc.gaussian_nll(mu, lv, target))

    # sampling / densities (numpy) -------------------------------------------
    def log_prob(self, member: int, states, actions, rewards, next_states) -> np.ndarray:
        mu, lv = self.member_heads_np(member, states, actions)
        target = np.concatenate(
            [np.atleast_2d(next_states), np.atleast_1d(rewards).reshape(-1, 1)], axis=-1)
        diff = target - mu
        return -0.5 * np.sum(lv + _LOG_2PI + diff * diff * np.exp(-lv), axis=-1)

    def sample_next(self, member: int, states, actions, rng=None, noise=None):
        """Draw (next_state, reward) from one elite member: mean + sigma*eps."""
        if member not in self.elite_indices:
            raise ValueError(f"member {member} is not an elite")
        mu, lv = self.member_heads_np(member, states, actions)
        if noise is None:
            noise = rng.standard_normal(mu.shape)
        sample = mu + np.exp(0.5 * lv) * noise
        return sample[..., : self.state_dim], sample[..., self.state_dim]

    # persistence --------------------------------------------------------------
    def get_values(self):
        return [p.value.copy() for p in self.params]

    def set_values(self, values):
        for p, v in zip(self.params, values):
            if p.value.shape != np.asarray(v).shape:
                raise ValueError("checkpoint shape mismatch")
            p.value = np.asarray(v, dtype=np.float64).copy()


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

# weight of the regularizer that slowly tightens the learnable logvar bounds
_BOUND_REG = 0.01


def _nll_node(ensemble: GaussianEnsemble, x: np.ndarray, target: np.ndarray,
              members=None) -> dc.Node:
    """Per-member mean NLL (including the 2*pi constant) plus bound tightening."""
    mu, lv = ensemble.heads_node(x, members=members)
    per_sample = dc.gaussian_nll(mu, lv, target)  # (M,B); each member keeps its own mean
    nll = dc.mul(dc.sum_(per_sample), 1.0 / per_sample.value.shape[-1])
    min_lv, max_lv = ensemble.min_logvar, ensemble.max_logvar
    if members is not None:
        min_lv = dc.take(min_lv, members, axis=0)
        max_lv = dc.take(max_lv, members, axis=0)
    reg = dc.mul(dc.sub(dc.sum_(max_lv), dc.sum_(min_lv)), _BOUND_REG)
    return dc.add(nll, reg)


def nll_np(ensemble: GaussianEnsemble, x: np.ndarray, target: np.ndarray,
           members=None) -> np.ndarray:
    """Per-member mean NLL on a shared batch (no bound regularizer)."""
    if members is None:
        members = np.arange(ensemble.n_total)
    mu, lv = ensemble.heads_np(np.broadcast_to(x, (len(members),) + x.shape), members=members)
    diff = target - mu
    per = 0.5 * (lv + _LOG_2PI + diff * diff * np.exp(-lv))
    return per.sum(axis=-1).mean(axis=-1)


# ---------------------------------------------------------------------------
# MLE pretraining with elite selection
# ---------------------------------------------------------------------------


@dataclass
class PretrainReport:
    holdout_nll: np.ndarray     # best holdout NLL per member
    epochs_run: int
    n_holdout: int
    dead_members: list


def mle_pretrain(dataset, n_nets: int = 7, n_elites: int = 5, rng=None,
                 hidden=(64, 64, 64), lr: float = 3e-4, batch_size: int = 256,
                 max_epochs: int = 100, patience: int = 8,
                 holdout_cap: int = 1000):
    """Train an ensemble by negative log likelihood and pick the elites.

    The holdout split is min(holdout_cap, 10% of the data); training stops on
    a per-member patience over holdout NLL or at the epoch cap, and each
    member keeps its best-holdout snapshot.
    """
    rng = rng if rng is not None else np.random.default_rng()
    n = len(dataset)
    n_holdout = min(holdout_cap, max(1, n // 10))
    if n_holdout >= n:
        raise ValueError("dataset too small for a holdout split")
    perm = rng.permutation(n)
    hold_idx, train_idx = perm[:n_holdout], perm[n_holdout:]

    ens = GaussianEnsemble(dataset.state_dim, dataset.action_dim, hidden=hidden,
                           n_total=n_nets, n_elites=n_elites, rng=rng)
    x_all = np.concatenate([dataset.states, dataset.actions], axis=-1)
    y_all = np.concatenate([dataset.next_states, dataset.rewards[:, None]], axis=-1)
    x_train, y_train = x_all[train_idx], y_all[train_idx]
    x_hold, y_hold = x_all[hold_idx], y_all[hold_idx]

    optim = dc.OptimState(ens.params, learning_rate=lr)
    n_train = len(train_idx)
    best_nll = nll_np(ens, x_hold, y_hold)
    best_values = [[v[m].copy() for v in ens.get_values()] for m in range(n_nets)]
    stall = np.zeros(n_nets, dtype=int)
    alive = np.ones(n_nets, dtype=bool)
    epochs_run = 0

    for epoch in range(max_epochs):
        epochs_run = epoch + 1
        order = np.stack([rng.permutation(n_train) for _ in range(n_nets)])
        for start in range(0, n_train, batch_size):
            idx = order[:, start:start + batch_size]
            loss = _nll_node(ens, x_train[idx], y_train[idx])
            if not np.isfinite(loss.value):
                per = nll_np(ens, x_hold, y_hold)
                newly_dead = alive & ~np.isfinite(per)
                alive &= np.isfinite(per)
                if not alive.any():
                    raise dc.NonFiniteLossError("all ensemble members diverged", value=per)
                # roll dead members back to their best snapshot and freeze them
                stacked = ens.get_values()
                for m in np.flatnonzero(newly_dead):
                    for k, arr in enumerate(best_values[m]):
                        stacked[k][m] = arr
                ens.set_values(stacked)
                continue
            grads = dc.grads_of(loss, ens.params)
            if not alive.all():
                grads = [g * alive.reshape((-1,) + (1,) * (g.ndim - 1)) for g in grads]
            dc.adam_step(ens.params, grads, optim)
        hold_nll = nll_np(ens, x_hold, y_hold)
        improved = hold_nll < best_nll - 1e-6
        for m in np.flatnonzero(improved & alive):
            best_nll[m] = hold_nll[m]
            best_values[m] = [v[m].copy() for v in ens.get_values()]
            stall[m] = 0
        stall[~improved] += 1
        if np.all((stall >= patience) | ~alive):
            break

    # restore each member's best snapshot
    stacked = ens.get_values()
    for m in range(n_nets):
        for k, arr in enumerate(best_values[m]):
            stacked[k][m] = arr
    ens.set_values(stacked)

    dead = [int(m) for m in np.flatnonzero(~alive)]
    healthy = np.flatnonzero(alive)
    if len(healthy) < n_elites:
        raise RuntimeError(f"only {len(healthy)} healthy members; need {n_elites} elites")
    ranked = healthy[np.argsort(best_nll[healthy], kind="stable")]
    ens.elite_indices = sorted(int(m) for m in ranked[:n_elites])
    report = PretrainReport(holdout_nll=best_nll, epochs_run=epochs_run,
                            n_holdout=n_holdout, dead_members=dead)
    return ens, report


# ---------------------------------------------------------------------------
# Value-reduction gradient (adversarial term)
# ---------------------------------------------------------------------------


@dataclass
class AdvBatchStats:
    mean: np.ndarray
    std: np.ndarray


def _advantages(batch: Batch, critic, gamma: float, rng, use_baseline: bool,
                normalize: bool):
    v_next = critic.value_estimate(batch.next_states, rng)
    adv = batch.rewards + gamma * (1.0 - batch.terminals.astype(np.float64)) * v_next
    if use_baseline:
        adv = adv - critic.q_min(batch.states, batch.actions)
    if not np.isfinite(adv).all():
        bad = np.argwhere(~np.isfinite(adv))[0]
        raise dc.NonFiniteLossError(
            f"non-finite advantage at batch index {tuple(bad)}", value=adv)
    stats = AdvBatchStats(mean=adv.mean(axis=-1, keepdims=True),
                          std=np.maximum(adv.std(axis=-1, keepdims=True), 1e-8))
    if normalize:
        adv = (adv - stats.mean) / stats.std
    return adv, stats


def _surrogate_node(model, batch: Batch, adv: np.ndarray) -> dc.Node:
    """Advantage-weighted mean log density; its parameter gradient estimates
    the (normalized-visitation) gradient of the policy's value in the model.
    The advantage enters as a constant coefficient."""
    lp = model.log_prob_node(batch.states, batch.actions, batch.rewards, batch.next_states)
    return dc.sum_(dc.mean(dc.mul(lp, dc.constant(adv)), axis=-1))


def model_gradient_term(model, batch: Batch, critic, gamma: float,
                        normalize_adv: bool = True, use_baseline: bool = True,
                        rng=None):
    """Monte Carlo estimate of the value gradient with respect to the model
    parameters, from transitions sampled under the current policy and model.

    Returns (grads, AdvBatchStats, surrogate value). The estimator averages
    advantage * grad(log density) over the batch; when states are drawn from
    the normalized discounted visitation, the unnormalized value gradient is
    1/(1-gamma) times this quantity.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    adv, stats = _advantages(batch, critic, gamma, rng, use_baseline, normalize_adv)
    node = _surrogate_node(model, batch, adv)
    grads = dc.grads_of(node, model.params)
    return grads, stats, float(node.value)


# ---------------------------------------------------------------------------
# Adversarial update (value term + MLE anchor)
# ---------------------------------------------------------------------------


class _EliteView:
    """Differentiable-model surface restricted to the elite members."""

    def __init__(self, ensemble: GaussianEnsemble):
        self.ensemble = ensemble
        self.members = np.asarray(ensemble.elite_indices)

    @property
    def params(self):
        return self.ensemble.params

    def log_prob_node(self, states, actions, rewards, next_states):
        return self.ensemble.log_prob_node(states, actions, rewards, next_states,
                                           members=self.members)


def draw_adversary_batches(ensemble: GaussianEnsemble, policy_sampler, dataset,
                           batch_size: int, rng, done_fn) -> Batch:
    """Per-elite synthetic one-step batches: start states uniform from the
    dataset, actions from the current policy, successors from that elite."""
    elites = np.asarray(ensemble.elite_indices)
    k = len(elites)
    starts = dataset.states[rng.integers(0, len(dataset), size=k * batch_size)]
    actions = policy_sampler(starts, rng)
    mu, lv = ensemble.heads_np(
        np.concatenate([starts, actions], axis=-1).reshape(k, batch_size, -1),
        members=elites)
    sample = mu + np.exp(0.5 * lv) * rng.standard_normal(mu.shape)
    next_states = sample[..., : ensemble.state_dim]
    rewards = sample[..., ensemble.state_dim]
    terminals = done_fn(k * batch_size).reshape(k, batch_size)
    return Batch(states=starts.reshape(k, batch_size, -1),
                 actions=actions.reshape(k, batch_size, -1),
                 rewards=rewards, next_states=next_states, terminals=terminals)


def mle_loss_node(ensemble: GaussianEnsemble, x: np.ndarray, y: np.ndarray) -> dc.Node:
    """Elite-member MLE loss on a shared real-data batch."""
    members = np.asarray(ensemble.elite_indices)
    xb = np.broadcast_to(x, (len(members),) + x.shape)
    yb = np.broadcast_to(y, (len(members),) + y.shape)
    return _nll_node(ensemble, xb, yb, members=members)


def mle_update(ensemble: GaussianEnsemble, data_batch: Batch, optim) -> dict:
    """Pure continued maximum likelihood step on the elites."""
    x = np.concatenate([data_batch.states, data_batch.actions], axis=-1)
    y = np.concatenate([data_batch.next_states, data_batch.rewards[:, None]], axis=-1)
    loss = mle_loss_node(ensemble, x, y)
    grads = dc.grads_of(loss, ensemble.params)
    dc.adam_step(ensemble.params, grads, optim)
    return {"model_mle_nll": float(loss.value), "model_adv_value": 0.0}


def adversarial_update(ensemble: GaussianEnsemble, data_batch: Batch,
                       adv_batches: Batch | None, lam: float, optim, critic,
                       gamma: float, normalize_adv: bool = True, rng=None) -> dict:
    """One combined step on the elites: lam * value-reduction term plus the
    MLE anchor on real data. lam == 0 degenerates to the pure MLE step.

    Both terms share one stacked forward pass over the elites.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if lam == 0.0:
        return mle_update(ensemble, data_batch, optim)
    members = np.asarray(ensemble.elite_indices)
    k = len(members)
    adv, _ = _advantages(adv_batches, critic, gamma, rng, use_baseline=True,
                         normalize=normalize_adv)
    xs = np.concatenate([adv_batches.states, adv_batches.actions], axis=-1)
    ys = np.concatenate([adv_batches.next_states, adv_batches.rewards[..., None]], axis=-1)
    xd = np.concatenate([data_batch.states, data_batch.actions], axis=-1)
    yd = np.concatenate([data_batch.next_states, data_batch.rewards[:, None]], axis=-1)
    n_synth, n_data = xs.shape[1], xd.shape[0]
    x = np.concatenate([xs, np.broadcast_to(xd, (k,) + xd.shape)], axis=1)
    y = np.concatenate([ys, np.broadcast_to(yd, (k,) + yd.shape)], axis=1)

    mu, lv = ensemble.heads_node(x, members=members)
    nll_all = dc.gaussian_nll(mu, lv, y)  # (k, n_synth + n_data)
    logp_synth = dc.neg(dc.slice_last(nll_all, 0, n_synth))
    surrogate = dc.sum_(dc.mean(dc.mul(logp_synth, dc.constant(adv)), axis=-1))
    min_lv = dc.take(ensemble.min_logvar, members, axis=0)
    max_lv = dc.take(ensemble.max_logvar, members, axis=0)
    reg = dc.mul(dc.sub(dc.sum_(max_lv), dc.sum_(min_lv)), _BOUND_REG)
    mle = dc.add(dc.mul(dc.sum_(dc.slice_last(nll_all, n_synth, n_synth + n_data)),
                        1.0 / n_data), reg)
    loss = dc.add(dc.mul(surrogate, lam), mle)
    grads = dc.grads_of(loss, ensemble.params)
    dc.adam_step(ensemble.params, grads, optim)
    return {"model_mle_nll": float(mle.value),
            "model_adv_value": float(surrogate.value)}


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_ensemble(path, ensemble: GaussianEnsemble, norm_stats=None) -> None:
    meta = {
        "version": 1,
        "state_dim": ensemble.state_dim,
        "action_dim": ensemble.action_dim,
        "hidden": ensemble.net.layer_sizes[1:-1],
        "n_total": ensemble.n_total,
        "n_elites": ensemble.n_elites,
        "elite_indices": list(map(int, ensemble.elite_indices)),
    }
    arrays = {f"param_{i}": v for i, v in enumerate(ensemble.get_values())}
    if norm_stats is not None:
        arrays["norm_mean"] = norm_stats.mean
        arrays["norm_std"] = norm_stats.std
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_ensemble(path):
    from .worlds import NormStats

    blob = np.load(path, allow_pickle=False)
    meta = json.loads(str(blob["meta"]))
    if meta.get("version") != 1:
        raise ValueError(f"unsupported ensemble checkpoint version {meta.get('version')}")
    ens = GaussianEnsemble(meta["state_dim"], meta["action_dim"],
                           hidden=tuple(meta["hidden"]), n_total=meta["n_total"],
                           n_elites=meta["n_elites"], rng=np.random.default_rng(0))
    ens.set_values([blob[f"param_{i}"] for i in range(len(ens.params))])
    ens.elite_indices = list(meta["elite_indices"])
    stats = None
    if "norm_mean" in blob:
        stats = NormStats(mean=blob["norm_mean"], std=blob["norm_std"])
    return ens, stats
