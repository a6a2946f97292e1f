import numpy as np
import pytest

import helpers
from rambo import diffcore as dc
from rambo import dynmodel, oracle, worlds
from rambo.synth import Batch


def make_ensemble(seed=0, state_dim=1, action_dim=1, **kw):
    return dynmodel.GaussianEnsemble(state_dim, action_dim,
                                     rng=np.random.default_rng(seed), **kw)


force_heads = helpers.force_heads


# ---------------------------------------------------------------------------
# log density
# ---------------------------------------------------------------------------


def test_log_prob_unit_gaussian_closed_form():
    ens = make_ensemble()
    force_heads(ens, 0, mu=np.zeros(2), logvar=np.zeros(2))
    lp = ens.log_prob(0, np.zeros((1, 1)), np.zeros((1, 1)), np.array([1.0]),
                      np.ones((1, 1)))
    assert lp[0] == pytest.approx(-(1.0 + np.log(2 * np.pi)), abs=1e-9)
    assert round(lp[0], 4) == -2.8379


def test_log_prob_peak_at_mean():
    ens = make_ensemble(seed=1)
    sigma2 = np.array([0.5, 1.2])
    force_heads(ens, 2, mu=np.array([0.3, -0.7]), logvar=np.log(sigma2))
    lp = ens.log_prob(2, np.zeros((1, 1)), np.zeros((1, 1)), np.array([-0.7]),
                      np.array([[0.3]]))
    assert lp[0] == pytest.approx(-0.5 * np.sum(np.log(2 * np.pi * sigma2)), abs=1e-9)


def test_log_prob_symmetric_targets_equal():
    ens = make_ensemble(seed=2)
    force_heads(ens, 1, mu=np.array([0.2, 0.1]), logvar=np.log(np.array([0.4, 0.9])))
    hi = ens.log_prob(1, np.zeros((1, 1)), np.zeros((1, 1)), np.array([0.1 + 0.5]),
                      np.array([[0.2 + 0.3]]))
    lo = ens.log_prob(1, np.zeros((1, 1)), np.zeros((1, 1)), np.array([0.1 - 0.5]),
                      np.array([[0.2 - 0.3]]))
    assert hi[0] == pytest.approx(lo[0], abs=1e-12)


def test_log_prob_node_matches_numpy_and_finite_differences():
    ens = make_ensemble(seed=3)
    rng = np.random.default_rng(4)
    s = rng.standard_normal((ens.n_total, 6, 1))
    a = rng.uniform(-1, 1, (ens.n_total, 6, 1))
    r = rng.standard_normal((ens.n_total, 6))
    sp = rng.standard_normal((ens.n_total, 6, 1))

    node = ens.log_prob_node(s, a, r, sp)
    for m in range(ens.n_total):
        np.testing.assert_allclose(node.value[m], ens.log_prob(m, s[m], a[m], r[m], sp[m]),
                                   atol=1e-12)

    loss = dc.mean(node)
    grads = dc.grads_of(loss, ens.params)
    step = 1e-6
    p = ens.net.weights[1]
    for idx in [(0, 0, 0), (3, 2, 5)]:
        orig = p.value[idx]
        p.value[idx] = orig + step
        hi = float(dc.mean(ens.log_prob_node(s, a, r, sp)).value)
        p.value[idx] = orig - step
        lo = float(dc.mean(ens.log_prob_node(s, a, r, sp)).value)
        p.value[idx] = orig
        fd = (hi - lo) / (2 * step)
        assert grads[2][idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def test_sample_near_mean_when_variance_at_floor():
    ens = make_ensemble(seed=5, logvar_min_init=-40.0)
    force_heads(ens, 0, mu=np.array([1.2, -0.4]), logvar=np.full(2, -18.0))
    ens.elite_indices = [0, 1, 2, 3, 4]
    s2, r = ens.sample_next(0, np.zeros((4, 1)), np.zeros((4, 1)),
                            rng=np.random.default_rng(6))
    np.testing.assert_allclose(s2[:, 0], 1.2, atol=1e-3)
    np.testing.assert_allclose(r, -0.4, atol=1e-3)


def test_sample_monte_carlo_mean_matches_head():
    ens = make_ensemble(seed=7)
    ens.elite_indices = [2]
    n = 100_000
    s = np.zeros((n, 1))
    a = np.full((n, 1), 0.3)
    mu, lv = ens.member_heads_np(2, s[:1], a[:1])
    s2, r = ens.sample_next(2, s, a, rng=np.random.default_rng(8))
    sd = np.exp(0.5 * lv[0])
    assert abs(s2.mean() - mu[0, 0]) < 3 * sd[0] / np.sqrt(n)
    assert abs(r.mean() - mu[0, 1]) < 3 * sd[1] / np.sqrt(n)


def test_sample_rejects_non_elite_member():
    ens = make_ensemble(seed=9)
    ens.elite_indices = [0, 1]
    with pytest.raises(ValueError, match="elite"):
        ens.sample_next(5, np.zeros((1, 1)), np.zeros((1, 1)),
                        rng=np.random.default_rng(0))


def test_logvar_outputs_respect_soft_bounds():
    ens = make_ensemble(seed=10)
    rng = np.random.default_rng(11)
    x = rng.standard_normal((ens.n_total, 64, 2)) * 5.0
    _, lv = ens.heads_np(x)
    assert np.all(lv <= ens.max_logvar.value + 1e-4)
    assert np.all(lv >= ens.min_logvar.value - 1e-4)


# ---------------------------------------------------------------------------
# MLE pretraining
# ---------------------------------------------------------------------------


def linear_dataset(n=2000, seed=12):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, (n, 1))
    a = rng.uniform(-1, 1, (n, 1))
    s2 = 0.9 * s + 0.1 * a
    return worlds.Dataset(s, a, s[:, 0].copy(), s2, np.zeros(n, dtype=bool))


def test_pretrain_fits_linear_dynamics():
    ds = linear_dataset()
    ens, report = dynmodel.mle_pretrain(ds, rng=np.random.default_rng(13),
                                        hidden=(32, 32), max_epochs=150, patience=12)
    x = np.concatenate([ds.states, ds.actions], axis=-1)
    target = np.concatenate([ds.next_states, ds.rewards[:, None]], axis=-1)
    mu, lv = ens.heads_np(np.broadcast_to(x, (ens.n_total,) + x.shape),
                          members=np.arange(ens.n_total))
    elite_mse = ((mu[ens.elite_indices] - target) ** 2).mean()
    assert elite_mse <= 1e-3
    assert lv[ens.elite_indices].mean() < -6.0  # deterministic data: variance at floor


def test_pretrain_selects_five_of_seven_elites():
    ds = linear_dataset(n=800, seed=14)
    ens, report = dynmodel.mle_pretrain(ds, n_nets=7, n_elites=5,
                                        rng=np.random.default_rng(15),
                                        hidden=(16, 16), max_epochs=20, patience=5)
    assert len(ens.elite_indices) == 5
    assert len(set(ens.elite_indices)) == 5
    ranked = np.argsort(report.holdout_nll)
    assert set(ens.elite_indices) == set(int(i) for i in ranked[:5])


def test_pretrain_holdout_size_rule():
    ds = linear_dataset(n=400, seed=16)
    _, report = dynmodel.mle_pretrain(ds, rng=np.random.default_rng(17),
                                      hidden=(8,), max_epochs=2, patience=1)
    assert report.n_holdout == 40  # 10% when below the 1000 cap
    big = linear_dataset(n=12_000, seed=18)
    _, report = dynmodel.mle_pretrain(big, rng=np.random.default_rng(19),
                                      hidden=(8,), max_epochs=1, patience=1)
    assert report.n_holdout == 1000


# ---------------------------------------------------------------------------
# value-reduction gradient term
# ---------------------------------------------------------------------------


class _ConstCritic:
    def __init__(self, v=0.0, q=0.0):
        self.v = v
        self.q = q

    def value_estimate(self, next_states, rng=None):
        return np.full(np.asarray(next_states).shape[:-1], self.v)

    def q_min(self, states, actions):
        return np.full(np.asarray(states).shape[:-1], self.q)


def test_identical_advantages_normalize_to_zero_gradient():
    ens = make_ensemble(seed=20)
    rng = np.random.default_rng(21)
    k = len(ens.elite_indices)
    batch = Batch(states=rng.standard_normal((k, 16, 1)),
                  actions=rng.uniform(-1, 1, (k, 16, 1)),
                  rewards=np.full((k, 16), 0.7),
                  next_states=rng.standard_normal((k, 16, 1)),
                  terminals=np.ones((k, 16), dtype=bool))
    view = dynmodel._EliteView(ens)
    grads, stats, _ = dynmodel.model_gradient_term(view, batch, _ConstCritic(),
                                                   gamma=0.99, normalize_adv=True)
    for g in grads:
        np.testing.assert_array_equal(g, 0.0)
    np.testing.assert_allclose(stats.mean, 0.7)


def test_empty_batch_rejected():
    ens = make_ensemble(seed=22)
    batch = Batch(states=np.zeros((0, 1)), actions=np.zeros((0, 1)),
                  rewards=np.zeros(0), next_states=np.zeros((0, 1)),
                  terminals=np.zeros(0, dtype=bool))
    with pytest.raises(ValueError, match="empty"):
        dynmodel.model_gradient_term(ens, batch, _ConstCritic(), 0.99)


def test_nonfinite_advantage_reports_offender():
    model = helpers.prop2_model()
    batch = Batch(states=np.array([0, 1]), actions=np.array([0, 1]),
                  rewards=np.array([0.1, np.nan]), next_states=np.array([1, 2]),
                  terminals=np.zeros(2, dtype=bool))
    v = np.zeros(3)
    q = np.zeros((3, 2))
    with pytest.raises(dc.NonFiniteLossError, match="index"):
        dynmodel.model_gradient_term(model, batch, oracle.TabularCritic(v, q), 0.9,
                                     normalize_adv=False)


def test_mc_model_gradient_matches_fd_small_sample():
    # fast version of the full verification (acceptance runs 1e6 samples)
    means_b, _ = helpers.prop2_mc_estimates(n_chunks=4, chunk_size=25_000, seed=99)
    fd = oracle.fd_model_gradient(helpers.prop2_model(), helpers.PROP2_POLICY)
    rel = np.abs(means_b.mean(axis=0) - fd) / np.abs(fd)
    assert rel.max() < 0.25


# ---------------------------------------------------------------------------
# adversarial update
# ---------------------------------------------------------------------------


def _toy_setup(seed=30):
    ds = worlds.normalize_states(worlds.gen_single_transition_dataset(600, seed=seed))
    ens, _ = dynmodel.mle_pretrain(ds, rng=np.random.default_rng(seed + 1),
                                   hidden=(16, 16), max_epochs=10, patience=3)
    return ds, ens


def _data_batch(ds, rng, n=64):
    idx = rng.integers(0, len(ds), size=n)
    return Batch(states=ds.states[idx], actions=ds.actions[idx], rewards=ds.rewards[idx],
                 next_states=ds.next_states[idx], terminals=ds.terminals[idx])


def test_lam_zero_update_is_bitwise_mle_step():
    ds, ens_a = _toy_setup()
    _, ens_b = _toy_setup()
    for pa, pb in zip(ens_a.params, ens_b.params):
        np.testing.assert_array_equal(pa.value, pb.value)
    rng = np.random.default_rng(31)
    batch = _data_batch(ds, rng)
    opt_a = dc.OptimState(ens_a.params, learning_rate=3e-4)
    opt_b = dc.OptimState(ens_b.params, learning_rate=3e-4)
    for _ in range(3):
        dynmodel.adversarial_update(ens_a, batch, None, 0.0, opt_a, _ConstCritic(), 0.99)
        dynmodel.mle_update(ens_b, batch, opt_b)
    for pa, pb in zip(ens_a.params, ens_b.params):
        np.testing.assert_array_equal(pa.value, pb.value)


def test_total_loss_at_lam_zero_equals_mle_loss_exactly():
    ds, ens = _toy_setup(seed=32)
    rng = np.random.default_rng(33)
    batch = _data_batch(ds, rng)
    x = np.concatenate([batch.states, batch.actions], axis=-1)
    y = np.concatenate([batch.next_states, batch.rewards[:, None]], axis=-1)
    mle = dynmodel.mle_loss_node(ens, x, y)
    adv_batches = dynmodel.draw_adversary_batches(
        ens, lambda s, r: r.uniform(-1, 1, (len(s), 1)), ds, 64,
        np.random.default_rng(34), worlds.termination_rule("single_transition"))
    adv, _ = dynmodel._advantages(adv_batches, _ConstCritic(), 0.99,
                                  None, use_baseline=True, normalize=True)
    surrogate = dynmodel._surrogate_node(dynmodel._EliteView(ens), adv_batches, adv)
    total = dc.add(dc.mul(surrogate, 0.0), dynmodel.mle_loss_node(ens, x, y))
    assert float(total.value) == float(mle.value)


def test_adversarial_update_moves_only_elites():
    ds, ens = _toy_setup(seed=35)
    ens.elite_indices = [0, 2, 4, 5, 6]
    frozen = [1, 3]
    before = ens.get_values()
    rng = np.random.default_rng(36)
    opt = dc.OptimState(ens.params, learning_rate=3e-4)
    for _ in range(2):
        batch = _data_batch(ds, rng)
        adv_batches = dynmodel.draw_adversary_batches(
            ens, lambda s, r: r.uniform(-1, 1, (len(s), 1)), ds, 32, rng,
            worlds.termination_rule("single_transition"))
        dynmodel.adversarial_update(ens, batch, adv_batches, 3e-2, opt,
                                    _ConstCritic(v=1.0), 0.99, rng=rng)
    after = ens.get_values()
    for b, a in zip(before, after):
        for m in frozen:
            np.testing.assert_array_equal(b[m], a[m])
        assert any(not np.array_equal(b[m], a[m]) for m in ens.elite_indices)


def test_checkpoint_round_trip(tmp_path):
    ds, ens = _toy_setup(seed=37)
    stats = ds.normalization
    path = tmp_path / "model.npz"
    dynmodel.save_ensemble(path, ens, stats)
    back, back_stats = dynmodel.load_ensemble(path)
    for pa, pb in zip(ens.params, back.params):
        np.testing.assert_array_equal(pa.value, pb.value)
    assert back.elite_indices == ens.elite_indices
    np.testing.assert_array_equal(back_stats.mean, stats.mean)
