"""Shared fixtures and procedures for the verification tests."""

import numpy as np

from rambo import dynmodel, oracle
from rambo.synth import Batch

# Frozen 3-state/2-action softmax model for gradient verification. Chosen so
# every logit's value gradient is large relative to its Monte Carlo standard
# error at 1e6 samples (worst 3*se/|grad| ~ 0.023).
PROP2_LOGITS = np.array([
    [[0.199968, -1.103476, 0.507568], [0.165662, 0.782297, 0.077185]],
    [[0.751786, 1.192825, -0.358668], [-0.789549, -0.25998, 0.60732]],
    [[-0.145851, 0.212112, -0.89434], [0.542696, -0.527802, -0.742518]],
])
PROP2_REWARDS = np.array([
    [0.17259, 0.112883], [0.484499, 0.898824], [0.172025, 1.392309],
])
PROP2_MU0 = np.array([0.26619, 0.492941, 0.240869])
PROP2_POLICY = np.array([
    [0.556183, 0.443817], [0.474522, 0.525478], [0.530642, 0.469358],
])
PROP2_GAMMA = 0.9


def prop2_model() -> oracle.TabularParamModel:
    return oracle.TabularParamModel(PROP2_LOGITS, PROP2_REWARDS, PROP2_MU0, PROP2_GAMMA)


def force_heads(ens, member, mu, logvar):
    """Pin one ensemble member's output by zeroing weights and setting the
    last bias; the soft bound is inverted so the post-clamp logvar equals
    ``logvar`` (which must lie strictly inside the bounds)."""
    for w in ens.net.weights:
        w.value[member] = 0.0
    for b in ens.net.biases[:-1]:
        b.value[member] = 0.0
    min_lv = ens.min_logvar.value[member, 0]
    max_lv = ens.max_logvar.value[member, 0]
    lv1 = min_lv + np.log(np.expm1(np.asarray(logvar, dtype=float) - min_lv))
    raw = max_lv - np.log(np.expm1(max_lv - lv1))
    ens.net.biases[-1].value[member, 0] = np.concatenate([np.asarray(mu, dtype=float), raw])


def prop2_mc_estimates(n_chunks: int, chunk_size: int, seed: int):
    """Chunked Monte Carlo value-gradient estimates on the frozen model.

    Returns per-chunk mean gradients (baselined and unbaselined), already
    scaled to the unnormalized-visitation convention, plus the exact critic
    pieces used.
    """
    model = prop2_model()
    mdp = model.to_mdp()
    v = oracle.value_iteration(mdp, PROP2_POLICY).v
    q = oracle.q_values(mdp, PROP2_POLICY)
    critic = oracle.TabularCritic(v, q)
    rng = np.random.default_rng(seed)
    scale = 1.0 / (1.0 - PROP2_GAMMA)
    means_b, means_u = [], []
    for _ in range(n_chunks):
        s, a, r, sp = oracle.sample_visitation_batch(model, PROP2_POLICY, chunk_size, rng)
        batch = Batch(states=s, actions=a, rewards=r, next_states=sp,
                      terminals=np.zeros(chunk_size, dtype=bool))
        gb, _, _ = dynmodel.model_gradient_term(model, batch, critic, PROP2_GAMMA,
                                                normalize_adv=False, use_baseline=True)
        gu, _, _ = dynmodel.model_gradient_term(model, batch, critic, PROP2_GAMMA,
                                                normalize_adv=False, use_baseline=False)
        means_b.append(gb[0] * scale)
        means_u.append(gu[0] * scale)
    return np.array(means_b), np.array(means_u)
