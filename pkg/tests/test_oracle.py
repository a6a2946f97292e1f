import numpy as np
import pytest

import helpers
from rambo import oracle


def uniform_policy(s, a):
    return np.full((s, a), 1.0 / a)


# ---------------------------------------------------------------------------
# value iteration (policy evaluation)
# ---------------------------------------------------------------------------


def test_self_loop_value():
    mdp = oracle.TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), np.ones(1), 0.99)
    res = oracle.value_iteration(mdp, np.ones((1, 1)))
    assert res.v0 == pytest.approx(100.0, rel=1e-10)
    assert res.residual <= 1e-12


def test_gamma_zero_value_is_expected_immediate_reward():
    rng = np.random.default_rng(0)
    mdp = oracle.random_mdp(4, 3, 0.5, rng)
    mdp = oracle.TabularMDP(mdp.T, mdp.R, mdp.mu0, 0.0)
    policy = oracle.random_policy(4, 3, rng)
    res = oracle.value_iteration(mdp, policy)
    np.testing.assert_allclose(res.v, np.einsum("sa,sa->s", policy, mdp.R), atol=1e-12)


def test_value_iteration_matches_monte_carlo():
    rng = np.random.default_rng(1)
    mdp = oracle.random_mdp(5, 3, 0.9, rng)
    policy = oracle.random_policy(5, 3, rng)
    exact = oracle.value_iteration(mdp, policy).v0
    returns = oracle.mc_policy_return(mdp, policy, 1_000_000, horizon=300,
                                      rng=np.random.default_rng(2))
    se = returns.std(ddof=1) / np.sqrt(len(returns))
    assert abs(returns.mean() - exact) < 3.0 * se


def test_residual_invariant_on_random_mdps():
    rng = np.random.default_rng(3)
    for _ in range(10):
        mdp = oracle.random_mdp(6, 2, rng.uniform(0.5, 0.99), rng)
        policy = oracle.random_policy(6, 2, rng)
        assert oracle.value_iteration(mdp, policy).residual <= 1e-12


def test_discounted_visitation_solves_flow_equation():
    rng = np.random.default_rng(4)
    mdp = oracle.random_mdp(5, 2, 0.9, rng)
    policy = oracle.random_policy(5, 2, rng)
    d = oracle.discounted_visitation(mdp, policy)
    p_pi = np.einsum("sa,sax->sx", policy, mdp.T)
    np.testing.assert_allclose(
        d, (1 - mdp.gamma) * mdp.mu0 + mdp.gamma * p_pi.T @ d, atol=1e-12)
    assert d.sum() == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# finite-difference model gradient
# ---------------------------------------------------------------------------


def test_fd_gradient_zero_for_unreachable_state_rows():
    # state 2 is unreachable: mu0 avoids it and no transition enters it
    t = np.zeros((3, 2, 3))
    t[:, :, 0] = 0.6
    t[:, :, 1] = 0.4
    logits = np.log(np.maximum(t, 1e-9))
    r = np.ones((3, 2))
    model = oracle.TabularParamModel(logits, r, np.array([0.5, 0.5, 0.0]), 0.9)
    # renormalize logits so rows are exact softmax of themselves
    grad = oracle.fd_model_gradient(model, uniform_policy(3, 2))
    np.testing.assert_allclose(grad[2], 0.0, atol=1e-9)


def test_fd_gradient_respects_state_swap_symmetry():
    # swapping states 0 and 1 leaves the model invariant
    x, y, z, w, u = 0.3, -0.2, 0.1, 0.25, -0.4
    logits = np.zeros((3, 2, 3))
    for a in range(2):
        scale = 1.0 + 0.5 * a
        logits[0, a] = np.array([x, y, z]) * scale
        logits[1, a] = np.array([y, x, z]) * scale
        logits[2, a] = np.array([w, w, u]) * scale
    rewards = np.array([[1.0, 0.3], [1.0, 0.3], [0.2, 0.7]])
    mu0 = np.array([0.4, 0.4, 0.2])
    model = oracle.TabularParamModel(logits, rewards, mu0, 0.9)
    g = oracle.fd_model_gradient(model, uniform_policy(3, 2))
    perm = [1, 0, 2]
    for a in range(2):
        np.testing.assert_allclose(g[0, a], g[1, a][perm], atol=1e-8)
        assert g[2, a, 0] == pytest.approx(g[2, a, 1], abs=1e-8)


def test_fd_gradient_step_halving_is_stable():
    model = helpers.prop2_model()
    g4 = oracle.fd_model_gradient(model, helpers.PROP2_POLICY, step=1e-4)
    g5 = oracle.fd_model_gradient(model, helpers.PROP2_POLICY, step=1e-5)
    assert np.max(np.abs(g4 - g5)) < 1e-6


# ---------------------------------------------------------------------------
# worst case over the TV ball
# ---------------------------------------------------------------------------


def _small_mdp(seed=0, gamma=0.9):
    rng = np.random.default_rng(seed)
    return oracle.random_mdp(4, 2, gamma, rng), oracle.random_policy(4, 2, rng)


def test_tv_ball_xi_zero_returns_mle_value_exactly():
    mdp, policy = _small_mdp()
    base = oracle.value_iteration(mdp, policy).v0
    res = oracle.tv_ball_worst_case(mdp, policy, 0.0)
    assert res.value == base
    np.testing.assert_array_equal(res.kernel, mdp.T)


def test_tv_ball_unconstrained_matches_exact_pessimistic_backup():
    mdp, policy = _small_mdp(seed=1)
    res = oracle.tv_ball_worst_case(mdp, policy, 1.0)
    v_pess = oracle._pessimistic_reference(mdp, policy)
    assert res.value == pytest.approx(float(mdp.mu0 @ v_pess), abs=1e-9)
    # all mass on the minimizing successor in every row
    receiver = np.argmin(v_pess)
    assert np.all(res.kernel[:, :, receiver] == pytest.approx(1.0))


def test_tv_ball_monotone_nonincreasing_in_xi():
    mdp, policy = _small_mdp(seed=2)
    values = [oracle.tv_ball_worst_case(mdp, policy, xi).value
              for xi in np.arange(0.0, 0.51, 0.01)]
    diffs = np.diff(values)
    assert np.all(diffs <= 1e-12)


def test_tv_ball_never_exceeds_nominal_value_and_bounds_order():
    for seed in range(5):
        mdp, policy = _small_mdp(seed=seed)
        nominal = oracle.value_iteration(mdp, policy).v0
        res = oracle.tv_ball_worst_case(mdp, policy, 0.05)
        assert res.value <= nominal + 1e-12
        assert res.lower_bound <= res.value + 1e-9


def test_tv_ball_kernel_is_feasible():
    mdp, policy = _small_mdp(seed=3)
    weights = np.full((4, 2), 1.0 / 8)
    xi = 0.02
    res = oracle.tv_ball_worst_case(mdp, policy, xi, weights)
    assert oracle.empirical_tv2(res.kernel, mdp.T, weights) <= xi + 1e-12
    np.testing.assert_allclose(res.kernel.sum(axis=2), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# pessimism check
# ---------------------------------------------------------------------------


def test_prop1_margin_zero_in_infinite_data_limit():
    mdp, policy = _small_mdp(seed=4)
    res = oracle.tv_ball_worst_case(mdp, policy, 0.0)
    true_value = oracle.value_iteration(mdp, policy).v0
    assert true_value - res.value == 0.0


def test_prop1_feasibility_pass_on_sampled_datasets():
    passes = 0
    for seed in range(30):
        rng = np.random.default_rng(1000 + seed)
        mdp = oracle.random_mdp(4, 2, 0.9, rng)
        policy = oracle.random_policy(4, 2, rng)
        logging_policy = oracle.random_policy(4, 2, rng)
        s, a, sp = oracle.sample_tabular_transitions(mdp, logging_policy, 600, rng)
        res = oracle.check_prop1(mdp, s, a, sp, policy)
        passes += res.ok
    assert passes >= int(0.95 * 30)


def test_prop1_flags_unvisited_rows():
    mdp, policy = _small_mdp(seed=5)
    # logging policy that never takes action 1
    logging_policy = np.zeros((4, 2))
    logging_policy[:, 0] = 1.0
    rng = np.random.default_rng(6)
    s, a, sp = oracle.sample_tabular_transitions(mdp, logging_policy, 400, rng)
    res = oracle.check_prop1(mdp, s, a, sp, policy, xi=0.01)
    assert res.n_unvisited >= 4


def test_tv_ball_rejects_negative_xi():
    mdp, policy = _small_mdp(seed=7)
    with pytest.raises(ValueError):
        oracle.tv_ball_worst_case(mdp, policy, -0.1)
