"""Small feed-forward networks with hand-written reverse mode, and a
tanh-squashed Gaussian policy head built on top of them.

Everything is float64 numpy. Inputs may be a single vector or a batch
(leading dimension); gradients of batched calls are summed over the batch.
"""

from __future__ import annotations

import numpy as np

from . import audit, checkpoint

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
# |u| cap before squashing; tanh(15) is still strictly below 1 in float64
PRE_SQUASH_MAX = 15.0
LOG_2PI = np.log(2.0 * np.pi)


class MlpParams:
    """Dense layers with tanh between them and identity at the output."""

    def __init__(self, sizes, seed: int = 0, owner=None, weights=None, biases=None):
        self.sizes = [int(k) for k in sizes]
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        self.owner = owner
        if weights is None:
            rng = np.random.default_rng(seed)
            weights, biases = [], []
            for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
                bound = 1.0 / np.sqrt(fan_in)
                weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
                biases.append(rng.uniform(-bound, bound, size=fan_out))
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[k], self.sizes[k + 1]) or b.shape != (self.sizes[k + 1],):
                raise ValueError(f"layer {k} shapes do not chain: {w.shape}, {b.shape}")

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def flat(self) -> np.ndarray:
        audit.touch(self.owner, "params")
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.num_params:
            raise ValueError("flat vector has wrong length")
        pos = 0
        for a in self.arrays():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    def copy(self, owner=None) -> "MlpParams":
        return MlpParams(self.sizes, owner=self.owner if owner is None else owner,
                         weights=[w.copy() for w in self.weights], biases=[b.copy() for b in self.biases])

    def zeros_like(self) -> list[np.ndarray]:
        return [np.zeros_like(a) for a in self.arrays()]

    def save(self, stem) -> None:
        arrays = {"params": self.flat()}
        checkpoint.save(stem, {"format": "decmarl.mlp/1", "sizes": self.sizes, "activation": "tanh",
                               "layout": "per layer: W (in, out) row-major, then b (out)"}, arrays)

    @classmethod
    def load(cls, stem, owner=None) -> "MlpParams":
        meta, arrays = checkpoint.load(stem)
        net = cls(meta["sizes"], owner=owner)
        net.set_flat(arrays["params"])
        return net


def _check_input(params: MlpParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.sizes[0]:
        raise ValueError(f"input width {x.shape[-1]} != {params.sizes[0]}")
    return x


def forward(params: MlpParams, x) -> np.ndarray:
    return forward_cached(params, x)[0]


def forward_cached(params: MlpParams, x):
    audit.touch(params.owner, "forward")
    h = _check_input(params, x)
    acts = [h]
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if k < last:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def backward(params: MlpParams, x, upstream, cache=None):
    """Gradients of <upstream, forward(x)>: returns (param grads in ``arrays()`` order, input grad)."""
    audit.touch(params.owner, "backward")
    if cache is None:
        _, cache = forward_cached(params, x)
    acts = cache
    g = np.asarray(upstream, dtype=float)
    if g.shape != acts[-1].shape:
        raise ValueError(f"upstream shape {g.shape} != output shape {acts[-1].shape}")
    grads = []
    for k in range(len(params.weights) - 1, -1, -1):
        h_in = acts[k]
        if h_in.ndim == 1:
            dW = np.outer(h_in, g)
            db = g.copy()
        else:
            dW = h_in.T @ g
            db = g.sum(axis=0)
        grads.append(db)
        grads.append(dW)
        g = g @ params.weights[k].T
        if k > 0:
            g = g * (1.0 - acts[k] ** 2)
    grads.reverse()
    return grads, g


class Sgd:
    """Plain SGD, optionally with heavy-ball momentum."""

    def __init__(self, params: MlpParams, lr: float, momentum: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self._vel = params.zeros_like() if momentum else None

    def step(self, grads, ascent: bool = False) -> None:
        sign = 1.0 if ascent else -1.0
        for k, (a, g) in enumerate(zip(self.params.arrays(), grads)):
            if self._vel is not None:
                self._vel[k] = self.momentum * self._vel[k] + g
                g = self._vel[k]
            a += sign * self.lr * g


def softplus(x):
    return np.logaddexp(0.0, x)


def log1m_tanh_sq(u):
    """log(1 - tanh(u)^2) without cancellation."""
    return 2.0 * (np.log(2.0) - u - softplus(-2.0 * u))


class SquashedGaussianHead:
    """Policy a = tanh(mu(s) + sigma(s) * xi), xi ~ N(0, I).

    The trunk outputs ``2 * action_dim`` numbers: the mean, then log sigma
    (clamped to ``[LOG_STD_MIN, LOG_STD_MAX]``).
    """

    def __init__(self, obs_dim: int, action_dim: int, hidden=(64, 64), seed: int = 0, owner=None, trunk=None):
        self.action_dim = int(action_dim)
        self.trunk = trunk if trunk is not None else MlpParams(
            [obs_dim, *hidden, 2 * self.action_dim], seed=seed, owner=owner)
        if self.trunk.sizes[-1] != 2 * self.action_dim:
            raise ValueError("trunk output must be twice the action dimension")

    @property
    def owner(self):
        return self.trunk.owner

    @property
    def obs_dim(self) -> int:
        return self.trunk.sizes[0]

    def distribution(self, state):
        out, cache = forward_cached(self.trunk, state)
        d = self.action_dim
        mu, raw = out[..., :d], out[..., d:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        inside = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
        return mu, log_std, inside, cache


def squash(mu, log_std, xi):
    u = np.clip(mu + np.exp(log_std) * xi, -PRE_SQUASH_MAX, PRE_SQUASH_MAX)
    return np.tanh(u), u


def sample_squashed(head: SquashedGaussianHead, state, rng: np.random.Generator, xi=None):
    """Returns (action, xi); pass ``xi`` to reuse fixed noise."""
    mu, log_std, _, _ = head.distribution(state)
    if xi is None:
        xi = rng.standard_normal(mu.shape)
    a, _ = squash(mu, log_std, xi)
    return a, xi


def _gaussian_logpdf(u, mu, log_std):
    z = (u - mu) * np.exp(-log_std)
    return -0.5 * z * z - log_std - 0.5 * LOG_2PI


def log_prob(head: SquashedGaussianHead, state, action) -> np.ndarray:
    """Density of the squashed policy at ``action`` (summed over action coordinates)."""
    a = np.asarray(action, dtype=float)
    if not (np.abs(a) < 1.0).all():
        raise ValueError("action on or outside the boundary of (-1, 1); density undefined")
    mu, log_std, _, _ = head.distribution(state)
    u = np.arctanh(a)
    return (_gaussian_logpdf(u, mu, log_std) - log1m_tanh_sq(u)).sum(axis=-1)


def log_prob_backward(head: SquashedGaussianHead, state, action):
    """Gradient of sum(log_prob) with respect to the trunk parameters."""
    a = np.asarray(action, dtype=float)
    if not (np.abs(a) < 1.0).all():
        raise ValueError("action on or outside the boundary of (-1, 1); density undefined")
    mu, log_std, inside, cache = head.distribution(state)
    u = np.arctanh(a)
    z = (u - mu) * np.exp(-log_std)
    d_mu = z * np.exp(-log_std)
    d_log_std = (z * z - 1.0) * inside
    grads, _ = backward(head.trunk, state, np.concatenate([d_mu, d_log_std], axis=-1), cache)
    return grads


def reparam_backward(head: SquashedGaussianHead, state, xi, d_action):
    """Chain ``d_action`` (dJ/da at a = f(xi, s)) back into the trunk parameters."""
    mu, log_std, inside, cache = head.distribution(state)
    std = np.exp(log_std)
    a, u = squash(mu, log_std, xi)
    unclipped = np.abs(mu + std * xi) < PRE_SQUASH_MAX
    du = np.asarray(d_action, dtype=float) * (1.0 - a * a) * unclipped
    d_mu = du
    d_log_std = du * std * xi * inside
    grads, _ = backward(head.trunk, state, np.concatenate([d_mu, d_log_std], axis=-1), cache)
    return grads


def finite_difference(fn, vec, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn`` at ``vec``."""
    vec = np.asarray(vec, dtype=float)
    out = np.zeros_like(vec)
    for k in range(vec.size):
        e = np.zeros_like(vec)
        e[k] = h
        out[k] = (fn(vec + e) - fn(vec - e)) / (2.0 * h)
    return out


def relative_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def flatten(grads) -> np.ndarray:
    return np.concatenate([np.ravel(g) for g in grads])
