"""Exact tabular machinery used to verify the learned-model training rules.

Provides policy evaluation on finite MDPs, finite-difference gradients of the
value with respect to softmax transition logits, and brute-force worst-case
search over a dataset-weighted squared-total-variation ball around an MLE
kernel (the pessimism check).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

_RESIDUAL_TOL = 1e-12


# ---------------------------------------------------------------------------
# Finite MDPs and policy evaluation
# ---------------------------------------------------------------------------


class TabularMDP:
    """Finite MDP: transition tensor T[s,a,s'], reward table R[s,a]."""

    def __init__(self, transitions, rewards, initial_dist, gamma: float):
        self.T = np.asarray(transitions, dtype=np.float64)
        self.R = np.asarray(rewards, dtype=np.float64)
        self.mu0 = np.asarray(initial_dist, dtype=np.float64)
        self.gamma = float(gamma)
        s, a, s2 = self.T.shape
        if s != s2 or self.R.shape != (s, a) or self.mu0.shape != (s,):
            raise ValueError("inconsistent MDP shapes")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must lie in [0, 1)")
        if np.any(self.T < -1e-15) or np.max(np.abs(self.T.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("transition rows must be distributions")
        if abs(self.mu0.sum() - 1.0) > 1e-12 or np.any(self.mu0 < -1e-15):
            raise ValueError("initial distribution must sum to 1")

    @property
    def n_states(self) -> int:
        return self.T.shape[0]

    @property
    def n_actions(self) -> int:
        return self.T.shape[1]


@dataclass
class ValueResult:
    v: np.ndarray       # V(s)
    v0: float           # sum_s mu0(s) V(s)
    residual: float


def _policy_matrices(mdp: TabularMDP, policy: np.ndarray):
    p_pi = np.einsum("sa,sax->sx", policy, mdp.T)
    r_pi = np.einsum("sa,sa->s", policy, mdp.R)
    return p_pi, r_pi


def value_iteration(mdp: TabularMDP, policy) -> ValueResult:
    """Exact policy evaluation: fixed point of V = r_pi + gamma P_pi V."""
    policy = np.asarray(policy, dtype=np.float64)
    p_pi, r_pi = _policy_matrices(mdp, policy)
    n = mdp.n_states
    v = np.linalg.solve(np.eye(n) - mdp.gamma * p_pi, r_pi)
    residual = float(np.max(np.abs(r_pi + mdp.gamma * p_pi @ v - v)))
    for _ in range(200):
        if residual <= _RESIDUAL_TOL:
            break
        v = r_pi + mdp.gamma * p_pi @ v
        residual = float(np.max(np.abs(r_pi + mdp.gamma * p_pi @ v - v)))
    return ValueResult(v=v, v0=float(mdp.mu0 @ v), residual=residual)


def q_values(mdp: TabularMDP, policy) -> np.ndarray:
    v = value_iteration(mdp, policy).v
    return mdp.R + mdp.gamma * np.einsum("sax,x->sa", mdp.T, v)


def discounted_visitation(mdp: TabularMDP, policy) -> np.ndarray:
    """Normalized discounted state visitation of a policy from mu0."""
    p_pi, _ = _policy_matrices(mdp, np.asarray(policy, dtype=np.float64))
    n = mdp.n_states
    d = np.linalg.solve(np.eye(n) - mdp.gamma * p_pi.T, (1.0 - mdp.gamma) * mdp.mu0)
    d = np.maximum(d, 0.0)
    return d / d.sum()


def mc_policy_return(mdp: TabularMDP, policy, n_episodes: int, horizon: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Per-episode discounted returns from simulating the true MDP; truncation
    bias is bounded by gamma**horizon * max|R| / (1 - gamma)."""
    policy = np.asarray(policy, dtype=np.float64)
    pol_cdf = np.cumsum(policy, axis=1)
    t_cdf = np.cumsum(mdp.T, axis=2)
    mu_cdf = np.cumsum(mdp.mu0)
    s = np.searchsorted(mu_cdf, rng.random(n_episodes), side="right")
    s = np.minimum(s, mdp.n_states - 1)
    returns = np.zeros(n_episodes)
    disc = 1.0
    for _ in range(horizon):
        a = (pol_cdf[s] < rng.random(n_episodes)[:, None]).sum(axis=1)
        returns += disc * mdp.R[s, a]
        s = (t_cdf[s, a] < rng.random(n_episodes)[:, None]).sum(axis=1)
        disc *= mdp.gamma
    return returns


# ---------------------------------------------------------------------------
# Softmax-parameterized tabular model (gradient verification target)
# ---------------------------------------------------------------------------


class TabularParamModel:
    """Transition model T(s'|s,a) = softmax over s' of logits L[s,a,:].

    The reward table is known and fixed, so densities (and their gradients)
    are over the successor state only. Exposes the same differentiable
    surface as an ensemble member: ``params`` and ``log_prob_node``.
    """

    def __init__(self, logits, rewards, initial_dist, gamma: float):
        logits = np.asarray(logits, dtype=np.float64)
        if logits.ndim != 3 or logits.shape[0] != logits.shape[2]:
            raise ValueError("logits must have shape (S, A, S)")
        if not np.isfinite(logits).all():
            raise ValueError("logits must be finite")
        self.logits = dc.Node(logits.copy())
        self.R = np.asarray(rewards, dtype=np.float64)
        self.mu0 = np.asarray(initial_dist, dtype=np.float64)
        self.gamma = float(gamma)

    @property
    def n_states(self) -> int:
        return self.logits.value.shape[0]

    @property
    def n_actions(self) -> int:
        return self.logits.value.shape[1]

    def probs(self) -> np.ndarray:
        z = self.logits.value
        z = z - z.max(axis=2, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=2, keepdims=True)

    def to_mdp(self) -> TabularMDP:
        return TabularMDP(self.probs(), self.R, self.mu0, self.gamma)

    # differentiable-model surface ------------------------------------------
    @property
    def params(self) -> list[dc.Node]:
        return [self.logits]

    def log_prob_node(self, states, actions, rewards, next_states) -> dc.Node:
        s = np.asarray(states).reshape(-1).astype(int)
        a = np.asarray(actions).reshape(-1).astype(int)
        sp = np.asarray(next_states).reshape(-1).astype(int)
        flat = dc.reshape(self.logits, (self.n_states * self.n_actions, self.n_states))
        rows = dc.take(flat, s * self.n_actions + a, axis=0)
        return dc.pick(dc.log_softmax(rows), sp)


def fd_model_gradient(model: TabularParamModel, policy, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the start-state value per logit."""
    policy = np.asarray(policy, dtype=np.float64)
    base = model.logits.value
    grad = np.zeros_like(base)
    for s in range(model.n_states):
        for a in range(model.n_actions):
            for j in range(model.n_states):
                orig = base[s, a, j]
                base[s, a, j] = orig + step
                hi = value_iteration(model.to_mdp(), policy).v0
                base[s, a, j] = orig - step
                lo = value_iteration(model.to_mdp(), policy).v0
                base[s, a, j] = orig
                grad[s, a, j] = (hi - lo) / (2.0 * step)
    return grad


def sample_visitation_batch(model: TabularParamModel, policy, n: int,
                            rng: np.random.Generator):
    """Draw (s, a, s') with s from the normalized discounted visitation of the
    policy in the model, a from the policy, and s' from the model itself.

    Returns integer arrays plus the (deterministic) rewards; a mean over such
    a batch estimates the normalized form of the value gradient, so callers
    comparing against d/d(logits) of the start-state value must scale by
    1 / (1 - gamma).
    """
    policy = np.asarray(policy, dtype=np.float64)
    mdp = model.to_mdp()
    d = discounted_visitation(mdp, policy)
    s = (np.cumsum(d) < rng.random(n)[:, None]).sum(axis=1)
    a = (np.cumsum(policy, axis=1)[s] < rng.random(n)[:, None]).sum(axis=1)
    sp = (np.cumsum(mdp.T, axis=2)[s, a] < rng.random(n)[:, None]).sum(axis=1)
    return s, a, model.R[s, a].copy(), sp


class TabularCritic:
    """Exact value/action-value lookup used as the advantage critic."""

    def __init__(self, v: np.ndarray, q: np.ndarray):
        self.v_table = np.asarray(v, dtype=np.float64)
        self.q_table = np.asarray(q, dtype=np.float64)

    def value_estimate(self, next_states, rng=None) -> np.ndarray:
        return self.v_table[np.asarray(next_states).astype(int)]

    def q_min(self, states, actions) -> np.ndarray:
        return self.q_table[np.asarray(states).astype(int), np.asarray(actions).astype(int)]


# ---------------------------------------------------------------------------
# Worst case over the dataset-weighted squared-TV ball
# ---------------------------------------------------------------------------

# fixed budget grid shared by every call; nested candidate sets across xi make
# the reported worst value non-increasing in xi by construction
_BUDGET_GRID = np.concatenate([[0.0], np.geomspace(1e-8, 1.0, 160)])


@dataclass
class WorstCaseResult:
    value: float               # best (lowest) certified-feasible value found
    kernel: np.ndarray         # transition tensor achieving it
    lower_bound: float         # exact rectangular relaxation (certified <= min)
    budget_used: float


def _worst_row(row: np.ndarray, v: np.ndarray, budget: float):
    """Move up to ``budget`` total-variation mass toward the lowest-v state,
    taking from the highest-v states first. Exact for a single-row TV cap."""
    receiver = int(np.argmin(v))
    new = row.copy()
    movable = 1.0 - row[receiver]
    amount = min(budget, movable)
    if amount <= 0.0:
        return new, 0.0
    moved = 0.0
    for donor in np.argsort(-v, kind="stable"):
        if donor == receiver:
            continue
        take = min(new[donor], amount - moved)
        if take > 0.0:
            new[donor] -= take
            new[receiver] += take
            moved += take
        if moved >= amount - 1e-15:
            break
    return new, moved


def _gain_segments(row: np.ndarray, v: np.ndarray):
    """Marginal value-reduction per unit of moved mass, best donors first."""
    receiver = int(np.argmin(v))
    segs = []
    for donor in np.argsort(-v, kind="stable"):
        if donor == receiver or row[donor] <= 0.0:
            continue
        gain = v[donor] - v[receiver]
        segs.append((row[donor], gain))
    return segs


def _row_alloc(segs, w: float, eta: float) -> float:
    """TV allocation for one row at water level eta (marginal cost 2*eta*w*t)."""
    t = 0.0
    for mass, gain in segs:
        if gain <= 0.0:
            break
        t_star = gain / (2.0 * eta * w)
        if t_star >= t + mass:
            t += mass
            continue
        t = max(t, min(t_star, t + mass))
        break
    return t


def _allocate_budgets(rows_segs, weights_flat: np.ndarray, budget: float) -> np.ndarray:
    """Waterfill TV budgets t_i maximizing total gain s.t. sum w_i t_i^2 <= budget.

    Rows with zero dataset weight are unconstrained and always move fully.
    """
    n = len(rows_segs)
    alloc = np.zeros(n)
    free = weights_flat <= 0.0
    for i in np.flatnonzero(free):
        alloc[i] = sum(m for m, g in rows_segs[i] if g > 0.0)
    constrained = np.flatnonzero(~free)
    if len(constrained) == 0 or budget <= 0.0:
        return alloc

    def fill(eta):
        return {i: _row_alloc(rows_segs[i], weights_flat[i], eta) for i in constrained}

    def usage(t_by_row):
        return sum(weights_flat[i] * t * t for i, t in t_by_row.items())

    eta_lo = 1e-12
    t_full = fill(eta_lo)
    if usage(t_full) <= budget:
        chosen = t_full
    else:
        lo, hi = eta_lo, 1e12
        for _ in range(100):
            mid = np.sqrt(lo * hi)
            if usage(fill(mid)) > budget:
                lo = mid
            else:
                hi = mid
        chosen = fill(hi)
        used = usage(chosen)
        if used > budget:  # numerical guard: shrink back inside the ball
            scale = np.sqrt(budget / used)
            chosen = {i: t * scale for i, t in chosen.items()}
    for i, t in chosen.items():
        alloc[i] = t
    return alloc


def _pessimistic_reference(mdp: TabularMDP, policy) -> np.ndarray:
    """Value when every row may put all mass on its worst successor."""
    policy = np.asarray(policy, dtype=np.float64)
    v = np.zeros(mdp.n_states)
    for _ in range(100_000):
        q = mdp.R + mdp.gamma * v.min()
        new = np.einsum("sa,sa->s", policy, q)
        if np.max(np.abs(new - v)) <= 1e-13:
            return new
        v = new
    return v


def _rectangular_lower_bound(mdp: TabularMDP, policy, xi: float,
                             weights: np.ndarray) -> float:
    """Exact robust evaluation on the rectangular superset of the TV ball:
    every visited row gets budget sqrt(xi / w), unvisited rows are free."""
    policy = np.asarray(policy, dtype=np.float64)
    s_n, a_n = mdp.n_states, mdp.n_actions
    eps = np.ones((s_n, a_n))
    pos = weights > 0.0
    eps[pos] = np.minimum(1.0, np.sqrt(xi / weights[pos]))
    v = np.zeros(s_n)
    for _ in range(200_000):
        q = np.empty((s_n, a_n))
        for s in range(s_n):
            for a in range(a_n):
                row, _ = _worst_row(mdp.T[s, a], v, eps[s, a])
                q[s, a] = mdp.R[s, a] + mdp.gamma * row @ v
        new = np.einsum("sa,sa->s", policy, q)
        if np.max(np.abs(new - v)) <= 1e-12:
            v = new
            break
        v = new
    return float(mdp.mu0 @ v)


def tv_ball_worst_case(mdp_mle: TabularMDP, policy, xi: float,
                       weights: np.ndarray | None = None) -> WorstCaseResult:
    """Approximate min of the policy value over kernels whose dataset-weighted
    squared TV distance to ``mdp_mle`` is at most xi.

    The search walks a fixed nested grid of budgets b <= xi; each candidate
    kernel moves row mass toward low-value successors under a waterfilled
    budget split and is then evaluated exactly. The returned kernel is always
    feasible; ``lower_bound`` is the certified rectangular relaxation.
    """
    if xi < 0:
        raise ValueError("xi must be >= 0")
    policy = np.asarray(policy, dtype=np.float64)
    s_n, a_n = mdp_mle.n_states, mdp_mle.n_actions
    if weights is None:
        weights = np.full((s_n, a_n), 1.0 / (s_n * a_n))
    weights = np.asarray(weights, dtype=np.float64)
    w_flat = weights.reshape(-1)

    v_mle = value_iteration(mdp_mle, policy)
    refs = [v_mle.v, _pessimistic_reference(mdp_mle, policy)]

    best_value = v_mle.v0
    best_kernel = mdp_mle.T.copy()
    best_budget = 0.0
    levels = _BUDGET_GRID[_BUDGET_GRID <= xi + 1e-15]
    for v_ref in refs:
        rows_segs = [_gain_segments(mdp_mle.T[s, a], v_ref)
                     for s in range(s_n) for a in range(a_n)]
        for b in levels:
            alloc = _allocate_budgets(rows_segs, w_flat, float(b))
            kernel = np.empty_like(mdp_mle.T)
            i = 0
            for s in range(s_n):
                for a in range(a_n):
                    kernel[s, a], _ = _worst_row(mdp_mle.T[s, a], v_ref, alloc[i])
                    i += 1
            cand = TabularMDP(kernel, mdp_mle.R, mdp_mle.mu0, mdp_mle.gamma)
            val = value_iteration(cand, policy).v0
            if val < best_value:
                best_value, best_kernel, best_budget = val, kernel, float(b)

    lb = _rectangular_lower_bound(mdp_mle, policy, xi, weights)
    return WorstCaseResult(value=float(best_value), kernel=best_kernel,
                           lower_bound=lb, budget_used=best_budget)


# ---------------------------------------------------------------------------
# Pessimism check against a true MDP
# ---------------------------------------------------------------------------


@dataclass
class Prop1Result:
    ok: bool
    margin: float
    worst_value: float
    true_value: float
    xi: float
    n_unvisited: int


def sample_tabular_transitions(mdp: TabularMDP, logging_policy, n: int,
                               rng: np.random.Generator):
    """Logging data: states uniform, actions from the logging policy,
    successors from the true kernel."""
    policy = np.asarray(logging_policy, dtype=np.float64)
    s = rng.integers(0, mdp.n_states, size=n)
    a = (np.cumsum(policy, axis=1)[s] < rng.random(n)[:, None]).sum(axis=1)
    sp = (np.cumsum(mdp.T, axis=2)[s, a] < rng.random(n)[:, None]).sum(axis=1)
    return s, a, sp


def build_mle_mdp(mdp_true: TabularMDP, s, a, sp):
    """Count-based MLE kernel plus dataset visit weights; unvisited rows fall
    back to uniform and are reported."""
    s_n, a_n = mdp_true.n_states, mdp_true.n_actions
    counts = np.zeros((s_n, a_n, s_n))
    np.add.at(counts, (s, a, sp), 1.0)
    row_counts = counts.sum(axis=2)
    t_mle = np.full_like(counts, 1.0 / s_n)
    visited = row_counts > 0
    t_mle[visited] = counts[visited] / row_counts[visited][:, None]
    weights = row_counts / row_counts.sum()
    mdp_mle = TabularMDP(t_mle, mdp_true.R, mdp_true.mu0, mdp_true.gamma)
    return mdp_mle, weights, int((~visited).sum())


def empirical_tv2(t_a: np.ndarray, t_b: np.ndarray, weights: np.ndarray) -> float:
    tv = 0.5 * np.abs(t_a - t_b).sum(axis=2)
    return float((weights * tv * tv).sum())


def check_prop1(mdp_true: TabularMDP, s, a, sp, policy,
                xi: float | None = None) -> Prop1Result:
    """Pessimism check: worst-case value over the ball around the count MLE
    must not exceed the policy's true value."""
    mdp_mle, weights, n_unvisited = build_mle_mdp(mdp_true, s, a, sp)
    if xi is None:
        xi = empirical_tv2(mdp_mle.T, mdp_true.T, weights)
    worst = tv_ball_worst_case(mdp_mle, policy, xi, weights)
    true_value = value_iteration(mdp_true, policy).v0
    margin = true_value - worst.value
    return Prop1Result(ok=bool(worst.value <= true_value + 1e-9), margin=float(margin),
                       worst_value=worst.value, true_value=float(true_value),
                       xi=float(xi), n_unvisited=n_unvisited)


def random_mdp(n_states: int, n_actions: int, gamma: float,
               rng: np.random.Generator) -> TabularMDP:
    """Dense random MDP with Dirichlet rows and uniform rewards in [0, 1]."""
    t = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    mu0 = rng.dirichlet(np.ones(n_states))
    return TabularMDP(t, r, mu0, gamma)


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator) -> np.ndarray:
    return rng.dirichlet(np.ones(n_actions), size=n_states)
