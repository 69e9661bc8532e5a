"""Parameterized critics ``f_phi(prefix, token)``.

A critic may be clipped smoothly to ``[-B, B]`` with ``B * tanh(raw / B)``;
the slope is 1 at the origin, so a zero-initialized tabular critic starts
exactly at 0 and moves at the raw learning rate.
"""

from __future__ import annotations

import numpy as np

from .core import Prefix, Task
from .policy import NonFiniteError, PrefixFeatures

CRITIC_KINDS = ("tabular", "linear_head", "mlp_head")


def default_bound(task: Task) -> float:
    """The true Q-range ``R_max * T``."""
    return task.r_max * task.horizon


class QFunction:
    kind = ""

    def __init__(self, task: Task, values, bound: float | None):
        if bound is not None and not bound > 0:
            raise ValueError("bound must be positive")
        self.bound = bound
        self.n_tokens = task.n_tokens
        self.states = task.states
        self._task = task
        values = np.array(values, dtype=float).ravel()
        if values.shape != (self.n_params,):
            raise ValueError(f"{self.kind} expects {self.n_params} parameters, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise NonFiniteError("critic parameters must be finite")
        values.setflags(write=False)
        self.values = values

    @property
    def bound_mode(self) -> str:
        return "unbounded" if self.bound is None else f"tanh_bounded({self.bound:g})"

    def _squash(self, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.bound is None:
            return raw, np.ones_like(raw)
        th = np.tanh(raw / self.bound)
        return self.bound * th, 1.0 - th * th

    def row(self, p: Prefix) -> np.ndarray:
        """``f(p, y)`` for every token ``y``."""
        out, _ = self._squash(self.raw(p))
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"non-finite critic value at {p.encode()}")
        return out

    def vjp(self, p: Prefix, w: np.ndarray) -> np.ndarray:
        """``sum_y w[y] * d f(p, y) / d phi``."""
        _, slope = self._squash(self.raw(p))
        return self.raw_vjp(p, w * slope)

    def table(self) -> np.ndarray:
        out, _ = self._squash(self.raw_all())
        return out

    def with_values(self, values) -> "QFunction":
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.kind, "shape": self.shape, "values": self.values.tolist(),
                "bound_mode": "unbounded" if self.bound is None else "tanh_bounded",
                "bound": self.bound}


class TabularQ(QFunction):
    kind = "tabular"

    def __init__(self, task: Task, values=None, bound: float | None = None):
        self._n_states = task.states.size
        if values is None:
            values = np.zeros((self._n_states, task.n_tokens))
        super().__init__(task, values, bound)
        self._table = self.values.reshape(self._n_states, self.n_tokens)

    @property
    def n_params(self) -> int:
        return self._n_states * self.n_tokens

    @property
    def shape(self) -> dict:
        return {"n_states": self._n_states, "n_tokens": self.n_tokens}

    def raw(self, p: Prefix) -> np.ndarray:
        return self._table[self.states.index(p)]

    def raw_all(self) -> np.ndarray:
        return self._table

    def raw_vjp(self, p: Prefix, w: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n_params)
        i = self.states.index(p) * self.n_tokens
        out[i:i + self.n_tokens] = w
        return out

    def with_values(self, values) -> "TabularQ":
        return TabularQ(self._task, values, self.bound)


class LinearHeadQ(QFunction):
    """``f(p, a) = <w, phi(p) (x) e_a>``: one weight row per token."""

    kind = "linear_head"

    def __init__(self, task: Task, values=None, bound: float | None = None, k: int = 2,
                 rng: np.random.Generator | None = None):
        self.features = PrefixFeatures.for_task(task, k)
        if values is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            values = rng.uniform(-0.01, 0.01, task.n_tokens * self.features.dim)
        super().__init__(task, values, bound)
        self._W = self.values.reshape(self.n_tokens, self.features.dim)

    @property
    def n_params(self) -> int:
        return self.n_tokens * self.features.dim

    @property
    def shape(self) -> dict:
        return {"n_tokens": self.n_tokens, "feature_dim": self.features.dim, "k": self.features.k}

    def feature(self, p: Prefix, a: int) -> np.ndarray:
        out = np.zeros((self.n_tokens, self.features.dim))
        out[a] = self.features(p)
        return out.ravel()

    def raw(self, p: Prefix) -> np.ndarray:
        return self._W @ self.features(p)

    def raw_all(self) -> np.ndarray:
        return self.features.matrix() @ self._W.T

    def raw_vjp(self, p: Prefix, w: np.ndarray) -> np.ndarray:
        return np.outer(w, self.features(p)).ravel()

    def with_values(self, values) -> "LinearHeadQ":
        return LinearHeadQ(self._task, values, self.bound, self.features.k)


class MLPHeadQ(QFunction):
    """Tanh hidden layer over ``phi(p) (x) e_a`` and a scalar output.

    Flat layout: ``W1 (H, |V|, d)``, ``b1 (H)``, ``w2 (H)``, ``b2 ()``.
    """

    kind = "mlp_head"

    def __init__(self, task: Task, values=None, bound: float | None = None, hidden: int = 16,
                 k: int = 2, rng: np.random.Generator | None = None):
        self.features = PrefixFeatures.for_task(task, k)
        self.hidden = hidden
        if values is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            values = rng.uniform(-0.01, 0.01, hidden * task.n_tokens * self.features.dim + 2 * hidden + 1)
        super().__init__(task, values, bound)
        h, v, d = hidden, self.n_tokens, self.features.dim
        sizes = np.cumsum([h * v * d, h, h])
        w1, b1, w2, b2 = np.split(self.values, sizes)
        self._W1 = w1.reshape(h, v, d)
        self._b1, self._w2, self._b2 = b1, w2, float(b2[0])

    @property
    def n_params(self) -> int:
        return self.hidden * self.n_tokens * self.features.dim + 2 * self.hidden + 1

    @property
    def shape(self) -> dict:
        return {"n_tokens": self.n_tokens, "feature_dim": self.features.dim,
                "hidden": self.hidden, "k": self.features.k}

    def _hidden(self, phi: np.ndarray) -> np.ndarray:
        # (|V|, H): hidden activations for every candidate token
        return np.tanh(np.einsum("hvd,d->vh", self._W1, phi) + self._b1)

    def raw(self, p: Prefix) -> np.ndarray:
        return self._hidden(self.features(p)) @ self._w2 + self._b2

    def raw_all(self) -> np.ndarray:
        phi = self.features.matrix()
        h, v, d = self._W1.shape
        pre = (phi @ self._W1.reshape(h * v, d).T).reshape(len(phi), h, v)
        h = np.tanh(pre.transpose(0, 2, 1) + self._b1)
        return h @ self._w2 + self._b2

    def raw_vjp(self, p: Prefix, w: np.ndarray) -> np.ndarray:
        phi = self.features(p)
        h = self._hidden(phi)
        da = w[:, None] * self._w2[None, :] * (1.0 - h * h)  # (|V|, H)
        d_w1 = np.einsum("vh,d->hvd", da, phi)
        return np.concatenate([d_w1.ravel(), da.sum(axis=0), w @ h, [w.sum()]])

    def with_values(self, values) -> "MLPHeadQ":
        return MLPHeadQ(self._task, values, self.bound, self.hidden, self.features.k)


def make_critic(task: Task, kind: str, bound: float | None = None,
                rng: np.random.Generator | None = None, **kw) -> QFunction:
    if kind == "tabular":
        return TabularQ(task, bound=bound)
    if kind == "linear_head":
        return LinearHeadQ(task, bound=bound, k=kw.get("k", 2), rng=rng)
    if kind == "mlp_head":
        return MLPHeadQ(task, bound=bound, hidden=kw.get("hidden", 16), k=kw.get("k", 2), rng=rng)
    raise ValueError(f"unknown critic kind {kind!r}")


def critic_from_dict(doc: dict, task: Task) -> QFunction:
    bound = doc.get("bound") if doc.get("bound_mode") == "tanh_bounded" else None
    kind, shape = doc["kind"], doc.get("shape", {})
    if kind == "tabular":
        return TabularQ(task, doc["values"], bound)
    if kind == "linear_head":
        return LinearHeadQ(task, doc["values"], bound, k=shape.get("k", 2))
    if kind == "mlp_head":
        return MLPHeadQ(task, doc["values"], bound, hidden=shape["hidden"], k=shape.get("k", 2))
    raise ValueError(f"unknown critic kind {kind!r}")


def q_eval(f: QFunction, p: Prefix, a: int) -> float:
    return float(f.row(p)[a])


def q_grad(f: QFunction, p: Prefix, a: int) -> np.ndarray:
    w = np.zeros(f.n_tokens)
    w[a] = 1.0
    g = f.vjp(p, w)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError(f"non-finite critic gradient at {p.encode()}")
    return g
