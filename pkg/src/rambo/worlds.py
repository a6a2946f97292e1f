"""Toy environments, offline dataset generation, normalization and CSV I/O.

Two 1-D continuous domains are provided:

``single_transition``
    One action from s0=0, reward equal to the sampled successor state, then
    the episode ends. Successors are band-conditional Gaussians over the
    action axis, with a deterministic fallback successor of 0.5 between bands.
    Offline data covers four narrow action intervals, one inside each band.

``illustrative``
    Fixed-horizon chain (5 steps from s0=0) whose reward is the current
    state. The successor depends only on the action: a rising line 0.5+a with
    noise inside the data cover |a|<=0.3, and the low fallback 0.5 outside it.
    Band layout is reconstructed qualitatively: out-of-cover actions lead to
    the fallback state, and the best covered action (a=0.3) leads to the
    highest successors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# ---------------------------------------------------------------------------
# Domain constants
# ---------------------------------------------------------------------------

# single_transition: (band_lo, band_hi, successor mean); sd 0.2 inside bands
STE_BANDS = (
    (-0.8, -0.65, 1.0),
    (-0.2, -0.05, 0.5),
    (0.05, 0.2, 1.25),
    (0.65, 0.8, 1.5),
)
STE_SIGMA = 0.2
STE_FALLBACK = 0.5
# action intervals covered by the offline dataset, one per band
STE_DATA_INTERVALS = ((-0.75, -0.7), (-0.15, -0.1), (0.1, 0.15), (0.7, 0.75))

ILL_COVER = 0.3       # dataset actions are uniform on [-ILL_COVER, ILL_COVER]
ILL_BASE = 0.5        # successor mean is ILL_BASE + a inside the cover
ILL_SIGMA = 0.1
ILL_FALLBACK = 0.5    # deterministic successor outside the cover
ILL_HORIZON = 5

ENV_IDS = ("single_transition", "illustrative")


# ---------------------------------------------------------------------------
# Transitions and datasets
# ---------------------------------------------------------------------------


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool

    def __post_init__(self):
        self.state = np.atleast_1d(np.asarray(self.state, dtype=np.float64))
        self.action = np.atleast_1d(np.asarray(self.action, dtype=np.float64))
        self.next_state = np.atleast_1d(np.asarray(self.next_state, dtype=np.float64))
        self.reward = float(self.reward)
        self.terminal = bool(self.terminal)
        if self.state.shape != self.next_state.shape:
            raise ValueError("state and next_state must have equal dimension")
        if not np.isfinite(self.reward):
            raise ValueError(f"non-finite reward {self.reward}")


@dataclass
class NormStats:
    """Per-dimension affine state map: x_norm = (x - mean) / std."""

    mean: np.ndarray
    std: np.ndarray
    std_floor: float = 1e-6

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std < self.std_floor):
            raise ValueError("stored std below floor")

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


class Dataset:
    """Offline transition set stored as stacked float64 arrays."""

    def __init__(self, states, actions, rewards, next_states, terminals,
                 normalization: NormStats | None = None):
        def as2d(x):
            x = np.asarray(x, dtype=np.float64)
            return x.reshape(-1, 1) if x.ndim == 1 else x

        self.states = as2d(states)
        self.actions = as2d(actions)
        self.rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
        self.next_states = as2d(next_states)
        self.terminals = np.asarray(terminals, dtype=bool).reshape(-1)
        self.normalization = normalization
        n = len(self.states)
        if not (len(self.actions) == len(self.rewards) == len(self.next_states)
                == len(self.terminals) == n):
            raise ValueError("field lengths disagree")
        if self.states.shape[1] != self.next_states.shape[1]:
            raise ValueError("state and next_state dimensions disagree")

    @classmethod
    def from_transitions(cls, transitions, state_dim: int | None = None,
                         action_dim: int | None = None) -> "Dataset":
        if not transitions:
            if state_dim is None or action_dim is None:
                raise ValueError("empty dataset needs explicit dims")
            z = np.zeros((0, state_dim))
            return cls(z, np.zeros((0, action_dim)), np.zeros(0), z.copy(), np.zeros(0, dtype=bool))
        return cls(
            np.stack([t.state for t in transitions]),
            np.stack([t.action for t in transitions]),
            np.array([t.reward for t in transitions]),
            np.stack([t.next_state for t in transitions]),
            np.array([t.terminal for t in transitions]),
        )

    def __len__(self) -> int:
        return len(self.states)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    @property
    def transitions(self) -> list[Transition]:
        return [
            Transition(self.states[i], self.actions[i], self.rewards[i],
                       self.next_states[i], self.terminals[i])
            for i in range(len(self))
        ]


def normalize_states(dataset: Dataset, std_floor: float = 1e-6) -> Dataset:
    """Normalize states and next_states by one shared per-dimension affine map.

    Statistics are taken over the union of states and next_states so that the
    map stays sane for one-step domains where the start state is constant but
    successors are not (the map must be applied to both columns).
    """
    if len(dataset) == 0:
        raise ValueError("cannot normalize an empty dataset")
    pooled = np.concatenate([dataset.states, dataset.next_states])
    mean = pooled.mean(axis=0)
    std = np.maximum(pooled.std(axis=0), std_floor)  # population std
    stats = NormStats(mean=mean, std=std, std_floor=std_floor)
    return Dataset(stats.apply(dataset.states), dataset.actions.copy(), dataset.rewards.copy(),
                   stats.apply(dataset.next_states), dataset.terminals.copy(), normalization=stats)


# ---------------------------------------------------------------------------
# Environments
# ---------------------------------------------------------------------------


def _ste_next_states(actions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized single_transition successor rule for 1-D actions."""
    a = np.asarray(actions, dtype=np.float64).reshape(-1)
    out = np.full(a.shape, STE_FALLBACK)
    noise = rng.standard_normal(a.shape)
    for lo, hi, mu in STE_BANDS:
        in_band = (a >= lo) & (a <= hi)
        out[in_band] = mu + STE_SIGMA * noise[in_band]
    return out


def _ill_next_states(actions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    a = np.asarray(actions, dtype=np.float64).reshape(-1)
    out = np.full(a.shape, ILL_FALLBACK)
    in_cover = np.abs(a) <= ILL_COVER
    out[in_cover] = ILL_BASE + a[in_cover] + ILL_SIGMA * rng.standard_normal(a.shape)[in_cover]
    return out


class ToyEnv:
    """Common harness for the 1-D toy domains; actions clamp to [-1, 1]."""

    state_dim = 1
    action_dim = 1

    def __init__(self, env_id: str, seed: int | None = None,
                 rng: np.random.Generator | None = None):
        if env_id not in ENV_IDS:
            raise ValueError(f"unknown env id {env_id!r}")
        self.env_id = env_id
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.horizon = 1 if env_id == "single_transition" else ILL_HORIZON
        self.clamp_warnings = 0
        self.state = np.zeros(1)
        self.steps = 0

    def reset(self) -> np.ndarray:
        self.state = np.zeros(1)
        self.steps = 0
        return self.state.copy()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        a = float(np.asarray(action).reshape(-1)[0])
        if a < -1.0 or a > 1.0:
            a = min(max(a, -1.0), 1.0)
            self.clamp_warnings += 1
        if self.env_id == "single_transition":
            nxt = _ste_next_states(np.array([a]), self.rng)
            reward = float(nxt[0])
            terminal = True
        else:
            reward = float(self.state[0])
            nxt = _ill_next_states(np.array([a]), self.rng)
            terminal = self.steps + 1 >= self.horizon
        self.steps += 1
        self.state = np.array([nxt[0]])
        return self.state.copy(), reward, terminal


def make_env(env_id: str, seed: int | None = None) -> ToyEnv:
    return ToyEnv(env_id, seed=seed)


def termination_rule(env_id: str):
    """Analytic terminal predictor used for synthetic model rollouts.

    single_transition episodes end after one step; the illustrative chain is
    only truncated by the rollout length, never terminated.
    """
    if env_id == "single_transition":
        return lambda n: np.ones(n, dtype=bool)
    if env_id == "illustrative":
        return lambda n: np.zeros(n, dtype=bool)
    raise ValueError(f"unknown env id {env_id!r}")


# ---------------------------------------------------------------------------
# Dataset generators
# ---------------------------------------------------------------------------


def gen_single_transition_dataset(n: int, seed: int | None = None,
                                  rng: np.random.Generator | None = None) -> Dataset:
    """Offline data: actions uniform over the four covered intervals
    (weights proportional to interval lengths), successors from the true
    band rule, reward equal to the successor, all transitions terminal."""
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = rng if rng is not None else np.random.default_rng(seed)
    lengths = np.array([hi - lo for lo, hi in STE_DATA_INTERVALS])
    if n == 0:
        return Dataset.from_transitions([], state_dim=1, action_dim=1)
    which = rng.choice(len(STE_DATA_INTERVALS), size=n, p=lengths / lengths.sum())
    lo = np.array([iv[0] for iv in STE_DATA_INTERVALS])[which]
    hi = np.array([iv[1] for iv in STE_DATA_INTERVALS])[which]
    actions = rng.uniform(lo, hi)
    next_states = _ste_next_states(actions, rng)
    return Dataset(
        states=np.zeros((n, 1)),
        actions=actions.reshape(-1, 1),
        rewards=next_states.copy(),
        next_states=next_states.reshape(-1, 1),
        terminals=np.ones(n, dtype=bool),
    )


def gen_illustrative_dataset(n: int, seed: int | None = None,
                             rng: np.random.Generator | None = None) -> Dataset:
    """Episodes of length ILL_HORIZON from s0=0 with behaviour actions
    uniform on the data cover; n is rounded up to a whole episode count."""
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = rng if rng is not None else np.random.default_rng(seed)
    if n == 0:
        return Dataset.from_transitions([], state_dim=1, action_dim=1)
    episodes = (n + ILL_HORIZON - 1) // ILL_HORIZON
    states, actions, rewards, next_states, terminals = [], [], [], [], []
    for _ in range(episodes):
        s = 0.0
        for t in range(ILL_HORIZON):
            a = rng.uniform(-ILL_COVER, ILL_COVER)
            nxt = float(_ill_next_states(np.array([a]), rng)[0])
            states.append([s])
            actions.append([a])
            rewards.append(s)
            next_states.append([nxt])
            terminals.append(t + 1 >= ILL_HORIZON)
            s = nxt
    return Dataset(states, actions, rewards, next_states, terminals)


def generate_dataset(env_id: str, n: int, seed: int | None = None) -> Dataset:
    if env_id == "single_transition":
        return gen_single_transition_dataset(n, seed=seed)
    if env_id == "illustrative":
        return gen_illustrative_dataset(n, seed=seed)
    raise ValueError(f"unknown env id {env_id!r}")


def mc_action_value(env_id: str, action: float, gamma: float, n_episodes: int,
                    seed: int | None = None) -> float:
    """Monte Carlo discounted value of playing one fixed action every step."""
    env = make_env(env_id, seed=seed)
    total = 0.0
    for _ in range(n_episodes):
        env.reset()
        ret, disc, done = 0.0, 1.0, False
        while not done:
            _, r, done = env.step(action)
            ret += disc * r
            disc *= gamma
        total += ret
    return total / n_episodes


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def _csv_header(state_dim: int, action_dim: int) -> str:
    cols = [f"s{i}" for i in range(state_dim)]
    cols += [f"a{i}" for i in range(action_dim)]
    cols.append("r")
    cols += [f"ns{i}" for i in range(state_dim)]
    cols.append("done")
    return ",".join(cols)


def save_dataset(dataset: Dataset, path) -> None:
    """Write transitions as CSV; floats use shortest round-trip decimal text."""
    with open(path, "w") as fh:
        fh.write(_csv_header(dataset.state_dim, dataset.action_dim) + "\n")
        for i in range(len(dataset)):
            vals = [*dataset.states[i], *dataset.actions[i], dataset.rewards[i],
                    *dataset.next_states[i]]
            fh.write(",".join(repr(float(v)) for v in vals))
            fh.write(f",{int(dataset.terminals[i])}\n")


class DatasetFormatError(ValueError):
    pass


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    header = lines[0].split(",")
    state_dim = sum(1 for c in header if c.startswith("s") and not c.startswith("ns"))
    action_dim = sum(1 for c in header if c.startswith("a"))
    expected = _csv_header(state_dim, action_dim).split(",")
    if header != expected or state_dim < 1:
        raise DatasetFormatError(f"{path}: line 1: bad header {lines[0]!r}")
    width = 2 * state_dim + action_dim + 2
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != width:
            raise DatasetFormatError(
                f"{path}: line {lineno}: expected {width} fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts[:-1]]
            done = int(parts[-1])
        except ValueError as err:
            raise DatasetFormatError(f"{path}: line {lineno}: {err}") from err
        rows.append((vals, done))
    n = len(rows)
    states = np.zeros((n, state_dim))
    actions = np.zeros((n, action_dim))
    rewards = np.zeros(n)
    next_states = np.zeros((n, state_dim))
    terminals = np.zeros(n, dtype=bool)
    for i, (vals, done) in enumerate(rows):
        states[i] = vals[:state_dim]
        actions[i] = vals[state_dim:state_dim + action_dim]
        rewards[i] = vals[state_dim + action_dim]
        next_states[i] = vals[state_dim + action_dim + 1:]
        terminals[i] = bool(done)
    return Dataset(states, actions, rewards, next_states, terminals)
