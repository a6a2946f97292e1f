"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Everything trained in this package (dynamics ensemble, actor, critics) is a
small fully connected net, so the graph is rebuilt per update and freed
afterwards, micrograd-style but array-valued. All arithmetic is float64 so
that finite-difference gradient checks can be tight.
"""

from __future__ import annotations

import numpy as np


class NonFiniteLossError(RuntimeError):
    """Raised when a loss (or gradient) contains NaN/Inf; carries the value."""

    def __init__(self, message: str, value=None):
        super().__init__(message)
        self.value = value


# ---------------------------------------------------------------------------
# Graph nodes
# ---------------------------------------------------------------------------


class Node:
    """One value in the computation graph.

    ``grad`` is populated by :func:`backward`; it is never mutated in place,
    so upstream gradient arrays may be shared between siblings.
    """

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward_fn=None):
        if not (isinstance(value, np.ndarray) and value.dtype == np.float64):
            value = np.asarray(value, dtype=np.float64)
        self.value = value
        self.grad = None
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)


def constant(value) -> Node:
    """Leaf node that never receives parameter updates."""
    return Node(value)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _accumulate(node: Node, g: np.ndarray) -> None:
    node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    a, b = _wrap(a), _wrap(b)
    def bw(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(g, b.value.shape))

    return Node(a.value + b.value, (a, b), bw)


def sub(a: Node, b: Node) -> Node:
    a, b = _wrap(a), _wrap(b)
    def bw(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(-g, b.value.shape))

    return Node(a.value - b.value, (a, b), bw)


def mul(a: Node, b: Node) -> Node:
    a, b = _wrap(a), _wrap(b)
    def bw(g):
        _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

    return Node(a.value * b.value, (a, b), bw)


def div(a: Node, b: Node) -> Node:
    a, b = _wrap(a), _wrap(b)
    def bw(g):
        _accumulate(a, _unbroadcast(g / b.value, a.value.shape))
        _accumulate(b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return Node(a.value / b.value, (a, b), bw)


def neg(a: Node) -> Node:
    def bw(g):
        _accumulate(a, -g)

    return Node(-a.value, (a,), bw)


def matmul(a: Node, b: Node) -> Node:
    """Matrix product; supports (B,I)@(I,O) and stacked (M,B,I)@(M,I,O)."""
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        _accumulate(a, g @ b.value.swapaxes(-1, -2))
        _accumulate(b, a.value.swapaxes(-1, -2) @ g)

    return Node(a.value @ b.value, (a, b), bw)


def affine(x: Node, w: Node, b: Node) -> Node:
    """Fused x @ w + b; bias broadcasts over the batch axes."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)

    def bw(g):
        _accumulate(x, g @ w.value.swapaxes(-1, -2))
        _accumulate(w, x.value.swapaxes(-1, -2) @ g)
        _accumulate(b, _unbroadcast(g, b.value.shape))

    return Node(x.value @ w.value + b.value, (x, w, b), bw)


def relu(a: Node) -> Node:
    mask = a.value > 0.0

    def bw(g):
        _accumulate(a, g * mask)

    return Node(np.where(mask, a.value, 0.0), (a,), bw)


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)

    def bw(g):
        _accumulate(a, g * (1.0 - t * t))

    return Node(t, (a,), bw)


def exp(a: Node) -> Node:
    e = np.exp(a.value)

    def bw(g):
        _accumulate(a, g * e)

    return Node(e, (a,), bw)


def log(a: Node) -> Node:
    def bw(g):
        _accumulate(a, g / a.value)

    return Node(np.log(a.value), (a,), bw)


def softplus(a: Node) -> Node:
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.value))

    def bw(g):
        _accumulate(a, g * sig)

    return Node(np.logaddexp(0.0, a.value), (a,), bw)


def clip(a: Node, lo: float, hi: float) -> Node:
    """Hard clamp with pass-through gradient inside the interval."""
    mask = (a.value >= lo) & (a.value <= hi)

    def bw(g):
        _accumulate(a, g * mask)

    return Node(np.clip(a.value, lo, hi), (a,), bw)


def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    in_shape = a.value.shape

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, in_shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, in_shape).copy())

    return Node(a.value.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    n = a.value.size if axis is None else a.value.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def minimum(a: Node, b: Node) -> Node:
    a, b = _wrap(a), _wrap(b)
    mask = a.value <= b.value

    def bw(g):
        _accumulate(a, _unbroadcast(g * mask, a.value.shape))
        _accumulate(b, _unbroadcast(g * ~mask, b.value.shape))

    return Node(np.where(mask, a.value, b.value), (a, b), bw)


def concat(nodes, axis: int = -1) -> Node:
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for node, start, stop in zip(nodes, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            _accumulate(node, g[tuple(idx)])

    return Node(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes), bw)


def slice_last(a: Node, start: int, stop: int) -> Node:
    def bw(g):
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        _accumulate(a, full)

    return Node(a.value[..., start:stop].copy(), (a,), bw)


def reshape(a: Node, shape) -> Node:
    in_shape = a.value.shape

    def bw(g):
        _accumulate(a, g.reshape(in_shape))

    return Node(a.value.reshape(shape), (a,), bw)


def take(a: Node, idx, axis: int = 0) -> Node:
    """Select rows/members by integer index; backward scatter-adds."""
    idx = np.asarray(idx)
    unique = len(np.unique(idx)) == len(idx)

    def bw(g):
        full = np.zeros_like(a.value)
        sel = (slice(None),) * axis + (idx,)
        if unique:
            full[sel] = g
        else:
            np.add.at(full, sel, g)
        _accumulate(a, full)

    return Node(np.take(a.value, idx, axis=axis), (a,), bw)


def pick(a: Node, col_idx) -> Node:
    """Per-row gather from a 2-D node: out[i] = a[i, col_idx[i]]."""
    col_idx = np.asarray(col_idx)
    rows = np.arange(a.value.shape[0])

    def bw(g):
        full = np.zeros_like(a.value)
        np.add.at(full, (rows, col_idx), g)
        _accumulate(a, full)

    return Node(a.value[rows, col_idx], (a,), bw)


_LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_nll(mu: Node, logvar: Node, target) -> Node:
    """Per-sample diagonal-Gaussian negative log density, summed over the
    last axis: 0.5 * sum_d [lv + log(2*pi) + (t - mu)^2 * exp(-lv)]."""
    mu, logvar = _wrap(mu), _wrap(logvar)
    t = target.value if isinstance(target, Node) else np.asarray(target, dtype=np.float64)
    diff = t - mu.value
    inv_var = np.exp(-logvar.value)
    quad = diff * diff * inv_var

    def bw(g):
        g = g[..., None]
        _accumulate(mu, -g * diff * inv_var)
        _accumulate(logvar, 0.5 * g * (1.0 - quad))

    value = 0.5 * (logvar.value + _LOG_2PI + quad).sum(axis=-1)
    return Node(value, (mu, logvar), bw)


def tanh_normal(mu: Node, log_std: Node, eps: np.ndarray):
    """Reparameterized tanh-squashed Gaussian sample and its log density.

    Returns (action, logp) nodes sharing the same parents; logp includes the
    change-of-variables correction with a 1e-6 guard inside the log.
    """
    mu, log_std = _wrap(mu), _wrap(log_std)
    std = np.exp(log_std.value)
    u = mu.value + std * eps
    a = np.tanh(u)
    guard = 1.0 + 1e-6 - a * a
    logp_val = (-0.5 * (eps * eps) - log_std.value - 0.5 * _LOG_2PI
                - np.log(guard)).sum(axis=-1)
    squash = 2.0 * a * (1.0 - a * a) / guard

    def bw_a(g):
        _accumulate(mu, g * (1.0 - a * a))
        _accumulate(log_std, g * (1.0 - a * a) * std * eps)

    def bw_logp(g):
        g = g[..., None]
        _accumulate(mu, g * squash)
        _accumulate(log_std, g * (-1.0 + squash * std * eps))

    return Node(a, (mu, log_std), bw_a), Node(logp_val, (mu, log_std), bw_logp)


def logsumexp(a: Node, axis: int = -1, keepdims: bool = True) -> Node:
    # max is treated as a constant shift; gradient is unaffected
    m = a.value.max(axis=axis, keepdims=True)
    shifted = sub(a, constant(m))
    out = add(log(sum_(exp(shifted), axis=axis, keepdims=True)), constant(m))
    if not keepdims:
        out = reshape(out, a.value.sum(axis=axis).shape)
    return out


def log_softmax(a: Node, axis: int = -1) -> Node:
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(loss: Node) -> None:
    """Propagate d(loss)/d(node) to every node reachable from ``loss``."""
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    if not np.isfinite(loss.value).all():
        raise NonFiniteLossError(f"non-finite loss: {loss.value!r}", value=loss.value)

    topo: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


def grads_of(loss: Node, params) -> list[np.ndarray]:
    """Gradient of a scalar loss for each listed parameter node."""
    zero_grad(params)
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]


# ---------------------------------------------------------------------------
# Feedforward nets
# ---------------------------------------------------------------------------

_ACTIVATIONS = {"relu": relu, "tanh": tanh}
_ACTIVATIONS_NP = {"relu": lambda x: np.maximum(x, 0.0), "tanh": np.tanh}


class Mlp:
    """Fully connected net with float64 parameters.

    ``members`` builds a stacked ensemble of identical architecture: weights
    are shaped (M, in, out) and forward expects inputs broadcastable to
    (M, B, in). Hidden activation is applied between all layers but the last.
    """

    def __init__(self, layer_sizes, activation: str = "relu", rng=None, members: int | None = None):
        if len(layer_sizes) < 2 or any(s < 1 for s in layer_sizes):
            raise ValueError(f"bad layer sizes {layer_sizes}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng()
        self.layer_sizes = list(layer_sizes)
        self.activation = activation
        self.members = members
        self.weights: list[Node] = []
        self.biases: list[Node] = []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            if members is None:
                w_shape, b_shape = (fan_in, fan_out), (fan_out,)
            else:
                w_shape, b_shape = (members, fan_in, fan_out), (members, 1, fan_out)
            self.weights.append(Node(rng.uniform(-bound, bound, size=w_shape)))
            self.biases.append(Node(rng.uniform(-bound, bound, size=b_shape)))

    @property
    def params(self) -> list[Node]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.params)

    def _check_input(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.layer_sizes[0]:
            raise ValueError(
                f"input dim {x.shape[-1]} does not match first layer size {self.layer_sizes[0]}"
            )

    def forward(self, x) -> Node:
        """Graph-building forward pass (differentiable)."""
        h = _wrap(x)
        self._check_input(h.value)
        act = _ACTIVATIONS[self.activation]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = affine(h, w, b)
            if i < last:
                h = act(h)
        return h

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass for sampling/evaluation (no graph)."""
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        act = _ACTIVATIONS_NP[self.activation]
        last = len(self.weights) - 1
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.value + b.value
            if i < last:
                h = act(h)
        return h

    def get_values(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.params]

    def set_values(self, values) -> None:
        for p, v in zip(self.params, values):
            if p.value.shape != v.shape:
                raise ValueError(f"shape mismatch {p.value.shape} vs {v.shape}")
            p.value = np.asarray(v, dtype=np.float64).copy()


# ---------------------------------------------------------------------------
# Adam optimizer
# ---------------------------------------------------------------------------


class OptimState:
    """Bias-corrected Adam state for a fixed list of parameter nodes."""

    def __init__(self, params, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        if learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]


def adam_step(params, grads, state: OptimState) -> None:
    """One Adam update, applied in place. Rejects non-finite gradients whole."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("params/grads/state length mismatch")
    for p, g in zip(params, grads):
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} does not match param {p.value.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteLossError("non-finite gradient; no update applied", value=g)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    lr = state.learning_rate
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        if lr != 0.0:
            p.value = p.value - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.epsilon)
