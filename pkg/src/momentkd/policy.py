"""Softmax policies over next tokens.

Three parameterizations share one interface.  Each maps a prefix to a logit
vector and exposes ``vjp(p, g)``, the product of ``g`` with the Jacobian of the
logits with respect to the flat parameter vector.  Every gradient used
elsewhere is written in terms of that product, e.g. the score
``grad log pi(a|p) = vjp(p, onehot(a) - pi)``.
"""

from __future__ import annotations

import functools

import numpy as np

from .core import Dataset, Prefix, StateSpace, Task

POLICY_KINDS = ("tabular_softmax", "linear_softmax", "mlp")


class NonFiniteError(FloatingPointError):
    pass


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


class PrefixFeatures:
    """One-hot of the last ``k`` symbols of ``(x, y_1, ..)`` plus a position one-hot.

    The input symbol counts as the first symbol, so short prefixes still see it.
    Slots before the start of the sequence use a padding symbol.
    """

    def __init__(self, n_tokens: int, n_inputs: int, horizon: int, k: int = 2):
        self.n_tokens = n_tokens
        self.n_inputs = n_inputs
        self.horizon = horizon
        self.k = k
        self.slot = n_inputs + n_tokens + 1
        self.dim = k * self.slot + horizon
        self.states = StateSpace(n_tokens, n_inputs, horizon)
        self._matrix = None

    @classmethod
    def for_task(cls, task: Task, k: int = 2) -> "PrefixFeatures":
        return cls(task.n_tokens, task.n_inputs, task.horizon, k)

    def encode(self, p: Prefix) -> np.ndarray:
        v = np.zeros(self.dim)
        symbols = [p.input] + [self.n_inputs + a for a in p.generated]
        window = symbols[-self.k:]
        window = [self.slot - 1] * (self.k - len(window)) + window
        for j, s in enumerate(window):
            v[j * self.slot + s] = 1.0
        v[self.k * self.slot + p.t] = 1.0
        return v

    def __call__(self, p: Prefix) -> np.ndarray:
        return self.matrix()[self.states.index(p)]

    def matrix(self) -> np.ndarray:
        """Features of every state in canonical order (shared across instances)."""
        if self._matrix is None:
            self._matrix = _feature_matrix(self.n_tokens, self.n_inputs, self.horizon, self.k)
        return self._matrix


@functools.lru_cache(maxsize=64)
def _feature_matrix(n_tokens: int, n_inputs: int, horizon: int, k: int) -> np.ndarray:
    f = PrefixFeatures(n_tokens, n_inputs, horizon, k)
    m = np.stack([f.encode(p) for p in f.states.prefixes()])
    m.setflags(write=False)
    return m


class Policy:
    kind = ""

    def __init__(self, task: Task, values: np.ndarray):
        self.n_tokens = task.n_tokens
        self.states = task.states
        self._task_dims = (task.n_tokens, task.n_inputs, task.horizon)
        values = np.array(values, dtype=float).ravel()
        if values.shape != (self.n_params,):
            raise ValueError(f"{self.kind} expects {self.n_params} parameters, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise NonFiniteError("policy parameters must be finite")
        values.setflags(write=False)
        self.values = values
        self._table = None

    # subclasses provide: n_params, shape, logits, vjp, logits_all, _rebuild

    def action_probs(self, p: Prefix) -> np.ndarray:
        z = self.logits(p)
        if not np.all(np.isfinite(z)):
            raise NonFiniteError(f"non-finite logits at {p.encode()}")
        return softmax(z)

    def prob_table(self) -> np.ndarray:
        """Action probabilities for every state, shape ``(n_states, |V|)``."""
        if self._table is None:
            z = self.logits_all()
            if not np.all(np.isfinite(z)):
                raise NonFiniteError("non-finite logits")
            self._table = softmax(z)
            self._table.setflags(write=False)
        return self._table

    def log_prob_grad(self, p: Prefix, a: int) -> np.ndarray:
        g = -self.action_probs(p)
        g[a] += 1.0
        return self.vjp(p, g)

    def expected_score(self, p: Prefix, f: np.ndarray) -> np.ndarray:
        """``E_{y~pi(.|p)}[grad log pi(y|p) f(y)]`` summed exactly over the vocabulary."""
        pi = self.action_probs(p)
        return self.vjp(p, pi * (f - pi @ f))

    def with_values(self, values: np.ndarray) -> "Policy":
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.kind, "shape": self.shape, "values": self.values.tolist()}

    def __repr__(self):
        return f"{type(self).__name__}(n_params={self.n_params})"


class TabularSoftmaxPolicy(Policy):
    """One logit row per reachable prefix."""

    kind = "tabular_softmax"

    def __init__(self, task: Task, logits=None):
        self._n_states = task.states.size
        if logits is None:
            logits = np.zeros((self._n_states, task.n_tokens))
        super().__init__(task, logits)
        self._task = task

    @classmethod
    def from_probs(cls, task: Task, probs) -> "TabularSoftmaxPolicy":
        with np.errstate(divide="ignore"):
            logits = np.log(np.asarray(probs, dtype=float))
        return cls(task, np.maximum(logits, -745.0))

    @property
    def n_params(self) -> int:
        return self._n_states * self.n_tokens

    @property
    def shape(self) -> dict:
        return {"n_states": self._n_states, "n_tokens": self.n_tokens}

    @property
    def table(self) -> np.ndarray:
        return self.values.reshape(self._n_states, self.n_tokens)

    def logits(self, p: Prefix) -> np.ndarray:
        return self.table[self.states.index(p)]

    def logits_all(self) -> np.ndarray:
        return self.table

    def action_probs(self, p: Prefix) -> np.ndarray:
        return self.prob_table()[self.states.index(p)].copy()

    def vjp(self, p: Prefix, g: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n_params)
        i = self.states.index(p) * self.n_tokens
        out[i:i + self.n_tokens] = g
        return out

    def with_values(self, values) -> "TabularSoftmaxPolicy":
        return TabularSoftmaxPolicy(self._task, np.reshape(values, (self._n_states, self.n_tokens)))


class LinearSoftmaxPolicy(Policy):
    """Logits ``W phi(p)`` with ``W`` of shape ``(|V|, dim phi)``."""

    kind = "linear_softmax"

    def __init__(self, task: Task, values=None, k: int = 2):
        self.features = PrefixFeatures.for_task(task, k)
        if values is None:
            values = np.zeros(task.n_tokens * self.features.dim)
        self._task = task
        super().__init__(task, values)
        self._W = self.values.reshape(self.n_tokens, self.features.dim)
        self._phi_all = None

    @property
    def n_params(self) -> int:
        return self.n_tokens * self.features.dim

    @property
    def shape(self) -> dict:
        return {"n_tokens": self.n_tokens, "feature_dim": self.features.dim, "k": self.features.k}

    def logits(self, p: Prefix) -> np.ndarray:
        return self._W @ self.features(p)

    def logits_all(self) -> np.ndarray:
        return self.features.matrix() @ self._W.T

    def vjp(self, p: Prefix, g: np.ndarray) -> np.ndarray:
        return np.outer(g, self.features(p)).ravel()

    def with_values(self, values) -> "LinearSoftmaxPolicy":
        return LinearSoftmaxPolicy(self._task, values, self.features.k)


class MLPPolicy(Policy):
    """Single tanh hidden layer over prefix features.

    Flat layout: ``W1 (H, d)``, ``b1 (H)``, ``W2 (|V|, H)``, ``b2 (|V|)``.
    """

    kind = "mlp"

    def __init__(self, task: Task, values=None, hidden: int = 16, k: int = 2,
                 rng: np.random.Generator | None = None):
        self.features = PrefixFeatures.for_task(task, k)
        self.hidden = hidden
        self._task = task
        d, h, v = self.features.dim, hidden, task.n_tokens
        if values is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            values = np.concatenate([
                rng.normal(0, 1 / np.sqrt(d), h * d), np.zeros(h),
                rng.normal(0, 1 / np.sqrt(h), v * h), np.zeros(v),
            ])
        super().__init__(task, values)
        sizes = np.cumsum([h * d, h, v * h])
        w1, b1, w2, b2 = np.split(self.values, sizes)
        self._W1, self._b1 = w1.reshape(h, d), b1
        self._W2, self._b2 = w2.reshape(v, h), b2

    @property
    def n_params(self) -> int:
        d, h, v = self.features.dim, self.hidden, self.n_tokens
        return h * d + h + v * h + v

    @property
    def shape(self) -> dict:
        return {"n_tokens": self.n_tokens, "feature_dim": self.features.dim,
                "hidden": self.hidden, "k": self.features.k}

    def logits(self, p: Prefix) -> np.ndarray:
        h = np.tanh(self._W1 @ self.features(p) + self._b1)
        return self._W2 @ h + self._b2

    def logits_all(self) -> np.ndarray:
        h = np.tanh(self.features.matrix() @ self._W1.T + self._b1)
        return h @ self._W2.T + self._b2

    def vjp(self, p: Prefix, g: np.ndarray) -> np.ndarray:
        phi = self.features(p)
        h = np.tanh(self._W1 @ phi + self._b1)
        da = (self._W2.T @ g) * (1.0 - h * h)
        return np.concatenate([np.outer(da, phi).ravel(), da, np.outer(g, h).ravel(), g])

    def with_values(self, values) -> "MLPPolicy":
        return MLPPolicy(self._task, values, self.hidden, self.features.k)


def make_policy(task: Task, kind: str, rng: np.random.Generator | None = None, **kw) -> Policy:
    if kind == "tabular_softmax":
        return TabularSoftmaxPolicy(task)
    if kind == "linear_softmax":
        return LinearSoftmaxPolicy(task, k=kw.get("k", 2))
    if kind == "mlp":
        return MLPPolicy(task, hidden=kw.get("hidden", 16), k=kw.get("k", 2), rng=rng)
    raise ValueError(f"unknown policy kind {kind!r}")


def policy_from_dict(doc: dict, task: Task) -> Policy:
    kind, shape, values = doc["kind"], doc.get("shape", {}), doc["values"]
    if kind == "tabular_softmax":
        return TabularSoftmaxPolicy(task, np.reshape(values, (task.states.size, task.n_tokens)))
    if kind == "linear_softmax":
        return LinearSoftmaxPolicy(task, values, k=shape.get("k", 2))
    if kind == "mlp":
        return MLPPolicy(task, values, hidden=shape["hidden"], k=shape.get("k", 2))
    raise ValueError(f"unknown policy kind {kind!r}")


def action_probs(pol: Policy, p: Prefix) -> np.ndarray:
    return pol.action_probs(p)


def log_prob_grad(pol: Policy, p: Prefix, a: int) -> np.ndarray:
    g = pol.log_prob_grad(p, a)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError(f"non-finite score at {p.encode()}")
    return g


def log_likelihood_grad(pol: Policy, tr) -> tuple[float, np.ndarray]:
    """Log-probability of a trajectory's actions and its gradient."""
    ll, grad = 0.0, np.zeros(pol.n_params)
    for p, a in tr.prefixes():
        pi = pol.action_probs(p)
        ll += float(np.log(pi[a]))
        g = -pi
        g[a] += 1.0
        grad += pol.vjp(p, g)
    return ll, grad


def sft_train(task: Task, data: Dataset, pol: Policy, lr: float, steps: int,
              rng: np.random.Generator, batch_size: int = 16,
              momentum: float = 0.0) -> tuple[Policy, list[float]]:
    """Behavior cloning by minibatch gradient ascent on the log-likelihood.

    Returns the updated policy and the per-step mean negative log-likelihood.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if len(data) == 0:
        raise ValueError("empty dataset")
    for tr in data.pairs:
        task.check_trajectory(tr)
    theta = pol.values.copy()
    velocity = np.zeros_like(theta)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(data), size=min(batch_size, len(data)))
        total_ll, grad = 0.0, np.zeros_like(theta)
        for i in idx:
            ll, g = log_likelihood_grad(pol, data.pairs[i])
            total_ll += ll
            grad += g
        loss = -total_ll / len(idx)
        if not np.isfinite(loss):
            raise NonFiniteError("SFT loss diverged")
        losses.append(loss)
        velocity = momentum * velocity + grad / len(idx)
        theta = theta + lr * velocity
        pol = pol.with_values(theta)
    return pol, losses
