"""Synthetic data machinery: short model rollouts branched from dataset
states, a recency-limited buffer, and mixed real/synthetic minibatches."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    is_real: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)


class SynthBuffer:
    """Ring buffer of synthetic transitions tagged by training iteration.

    Appends are chronological, so ring eviction always drops the oldest
    iteration's data first. Capacity defaults to rollouts*k*retain_iters.
    """

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminals = np.zeros(capacity, dtype=bool)
        self.tags = np.full(capacity, -1, dtype=np.int64)
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, states, actions, rewards, next_states, terminals, iteration: int) -> None:
        n = len(rewards)
        for i in range(0, n, self.capacity):
            chunk = slice(i, min(i + self.capacity, n))
            m = chunk.stop - chunk.start
            idx = (self.ptr + np.arange(m)) % self.capacity
            self.states[idx] = states[chunk]
            self.actions[idx] = actions[chunk]
            self.rewards[idx] = rewards[chunk]
            self.next_states[idx] = next_states[chunk]
            self.terminals[idx] = terminals[chunk]
            self.tags[idx] = iteration
            self.ptr = (self.ptr + m) % self.capacity
            self.size = min(self.size + m, self.capacity)

    def holds_iteration(self, iteration: int) -> bool:
        return bool(np.any(self.tags[: self.size] == iteration)) if self.size else False

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("buffer is empty")
        return rng.integers(0, self.size, size=n)


def generate_rollouts(policy_sampler, ensemble, dataset, k: int, n_starts: int,
                      rng: np.random.Generator, done_fn):
    """Simulate k-step branches in the ensemble from dataset states.

    One elite member is chosen uniformly per rollout and used for every step
    of that rollout; rollouts stop early when ``done_fn`` predicts a terminal.
    Returns stacked transition arrays.
    """
    if k < 1 or n_starts < 1:
        raise ValueError("k and n_starts must be >= 1")
    elites = np.asarray(ensemble.elite_indices)
    if len(elites) == 0:
        raise ValueError("ensemble has no elites")
    states = dataset.states[rng.integers(0, len(dataset), size=n_starts)].copy()
    members = elites[rng.integers(0, len(elites), size=n_starts)]

    out_s, out_a, out_r, out_s2, out_d = [], [], [], [], []
    active = np.arange(n_starts)
    for _ in range(k):
        if len(active) == 0:
            break
        cur = states[active]
        actions = policy_sampler(cur, rng)
        next_states = np.empty_like(cur)
        rewards = np.empty(len(active))
        noise = rng.standard_normal((len(active), dataset.state_dim + 1))
        for m in np.unique(members[active]):
            sel = members[active] == m
            s2, r = ensemble.sample_next(int(m), cur[sel], actions[sel], noise=noise[sel])
            next_states[sel] = s2
            rewards[sel] = r
        dones = done_fn(len(active))
        out_s.append(cur)
        out_a.append(actions)
        out_r.append(rewards)
        out_s2.append(next_states)
        out_d.append(dones)
        states[active] = next_states
        active = active[~dones]
    return (np.concatenate(out_s), np.concatenate(out_a), np.concatenate(out_r),
            np.concatenate(out_s2), np.concatenate(out_d))


def mixed_batch(dataset, buffer: SynthBuffer | None, f: float, batch_size: int,
                rng: np.random.Generator) -> Batch:
    """Minibatch where each slot is real with probability f, synthetic
    otherwise; uniform within each source."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not (0.0 <= f <= 1.0):
        raise ValueError("f must lie in [0, 1]")
    have_real = dataset is not None and len(dataset) > 0
    have_synth = buffer is not None and len(buffer) > 0
    if not have_real and not have_synth:
        raise ValueError("both data sources are empty")
    if f < 1.0 and not have_synth:
        log.warning("synthetic buffer empty; sampling an all-real batch")
        f = 1.0
    if f > 0.0 and not have_real:
        raise ValueError("real dataset is empty")

    real_mask = rng.random(batch_size) < f
    n_real = int(real_mask.sum())
    n_synth = batch_size - n_real

    sdim, adim = (dataset.state_dim, dataset.action_dim) if have_real else (
        buffer.states.shape[1], buffer.actions.shape[1])
    states = np.zeros((batch_size, sdim))
    actions = np.zeros((batch_size, adim))
    rewards = np.zeros(batch_size)
    next_states = np.zeros((batch_size, sdim))
    terminals = np.zeros(batch_size, dtype=bool)

    if n_real:
        idx = rng.integers(0, len(dataset), size=n_real)
        states[real_mask] = dataset.states[idx]
        actions[real_mask] = dataset.actions[idx]
        rewards[real_mask] = dataset.rewards[idx]
        next_states[real_mask] = dataset.next_states[idx]
        terminals[real_mask] = dataset.terminals[idx]
    if n_synth:
        idx = buffer.sample_indices(n_synth, rng)
        states[~real_mask] = buffer.states[idx]
        actions[~real_mask] = buffer.actions[idx]
        rewards[~real_mask] = buffer.rewards[idx]
        next_states[~real_mask] = buffer.next_states[idx]
        terminals[~real_mask] = buffer.terminals[idx]
    return Batch(states, actions, rewards, next_states, terminals, is_real=real_mask)
