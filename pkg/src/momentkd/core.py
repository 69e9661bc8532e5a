"""Finite-horizon generation tasks.

Autoregressive generation is treated as a deterministic MDP: the state is the
prefix ``(x, y_1, ..., y_{t-1})``, the action is the next token, and the
transition appends it.  Every sequence has exactly ``horizon`` tokens.

States are laid out in a canonical order (time slice, then input symbol, then
the generated tokens read as a base-|V| number).  Within a slice the children
of the state with local index ``i`` occupy ``i * |V| + a``, which lets the
oracle propagate occupancy with plain reshapes.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterator, Sequence

import numpy as np

if TYPE_CHECKING:
    from .policy import Policy

SOURCES = ("teacher", "student", "dataset")
PROVENANCES = ("teacher_sampled", "ground_truth")


class HorizonExceeded(ValueError):
    pass


class TokenOutOfRange(ValueError):
    pass


class RewardsMissing(ValueError):
    pass


class UnknownFixture(KeyError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    input_symbols: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "input_symbols", tuple(self.input_symbols))
        if len(self.tokens) < 2:
            raise ValueError("vocabulary needs at least two tokens")
        if not self.input_symbols:
            raise ValueError("vocabulary needs at least one input symbol")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("token identifiers must be unique")
        if len(set(self.input_symbols)) != len(self.input_symbols):
            raise ValueError("input symbols must be unique")
        if set(self.tokens) & set(self.input_symbols):
            raise ValueError("input symbols must be disjoint from tokens")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def n_inputs(self) -> int:
        return len(self.input_symbols)


@dataclass(frozen=True, order=True)
class Prefix:
    """State ``y_<t+1``: an input symbol index plus the generated token indices."""

    input: int
    generated: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "generated", tuple(int(a) for a in self.generated))

    @property
    def t(self) -> int:
        return len(self.generated)

    def encode(self) -> str:
        return "/".join(str(i) for i in (self.input, *self.generated))

    @classmethod
    def decode(cls, text: str) -> "Prefix":
        parts = [int(s) for s in text.split("/")]
        return cls(parts[0], tuple(parts[1:]))


def step(p: Prefix, a: int, horizon: int, n_tokens: int) -> Prefix:
    """Deterministic transition: append token ``a`` to ``p``."""
    if p.t >= horizon:
        raise HorizonExceeded(f"prefix {p.encode()} already has {horizon} tokens")
    if not 0 <= a < n_tokens:
        raise TokenOutOfRange(f"token {a} outside 0..{n_tokens - 1}")
    return Prefix(p.input, p.generated + (int(a),))


@dataclass(frozen=True)
class Trajectory:
    input: int
    actions: tuple[int, ...]
    rewards: tuple[float, ...] | None = None
    source: str = "teacher"

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))
        if self.rewards is not None:
            object.__setattr__(self, "rewards", tuple(float(r) for r in self.rewards))
            if len(self.rewards) != len(self.actions):
                raise ValueError("rewards and actions differ in length")
        if self.source not in SOURCES:
            raise ValueError(f"unknown trajectory source {self.source!r}")

    def __len__(self) -> int:
        return len(self.actions)

    def prefixes(self) -> Iterator[tuple[Prefix, int]]:
        """Yield ``(y_<t, y_t)`` pairs in time order."""
        for t, a in enumerate(self.actions):
            yield Prefix(self.input, self.actions[:t]), a

    def to_dict(self) -> dict:
        return {
            "input": self.input,
            "actions": list(self.actions),
            "rewards": None if self.rewards is None else list(self.rewards),
            "source": self.source,
        }


def trajectory_return(tr: Trajectory) -> float:
    if tr.rewards is None:
        raise RewardsMissing("trajectory has no rewards")
    return float(sum(tr.rewards))


class StateSpace:
    """Canonical enumeration of every prefix with fewer than ``horizon`` tokens."""

    def __init__(self, n_tokens: int, n_inputs: int, horizon: int):
        if horizon < 1:
            raise ValueError("horizon must be positive")
        self.n_tokens = n_tokens
        self.n_inputs = n_inputs
        self.horizon = horizon
        # slice t holds n_inputs * V**t states
        sizes = [n_inputs * n_tokens**t for t in range(horizon)]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.size = int(self.offsets[-1])

    def __len__(self) -> int:
        return self.size

    def index(self, p: Prefix) -> int:
        t = p.t
        if t >= self.horizon:
            raise HorizonExceeded(f"prefix {p.encode()} is terminal")
        local = p.input
        for a in p.generated:
            local = local * self.n_tokens + a
        return int(self.offsets[t]) + local

    def prefix(self, index: int) -> Prefix:
        t = int(np.searchsorted(self.offsets, index, side="right")) - 1
        local = index - int(self.offsets[t])
        gen = []
        for _ in range(t):
            local, a = divmod(local, self.n_tokens)
            gen.append(a)
        return Prefix(local, tuple(reversed(gen)))

    def slice(self, t: int) -> slice:
        return slice(int(self.offsets[t]), int(self.offsets[t + 1]))

    def prefixes(self) -> Iterator[Prefix]:
        for t in range(self.horizon):
            for x in range(self.n_inputs):
                for gen in itertools.product(range(self.n_tokens), repeat=t):
                    yield Prefix(x, gen)

    def time_of(self) -> np.ndarray:
        return np.repeat(np.arange(self.horizon), np.diff(self.offsets))


@dataclass(frozen=True, eq=False)
class Task:
    """A generation MDP with a known dense reward table and a fixed teacher.

    ``rewards`` has shape ``(n_states, |V|)`` in :class:`StateSpace` order.
    """

    name: str
    vocab: Vocabulary
    horizon: int
    input_dist: np.ndarray
    rewards: np.ndarray
    teacher: "Policy | None" = None
    states: StateSpace = field(init=False, repr=False)

    def __post_init__(self):
        dist = np.asarray(self.input_dist, dtype=float)
        if dist.shape != (self.vocab.n_inputs,) or np.any(dist < 0):
            raise ValueError("input_dist must be a probability vector over input symbols")
        if abs(dist.sum() - 1.0) > 1e-12:
            raise ValueError("input_dist must sum to 1")
        states = StateSpace(self.vocab.size, self.vocab.n_inputs, self.horizon)
        rewards = np.array(self.rewards, dtype=float)
        if rewards.shape != (states.size, self.vocab.size):
            raise ValueError(
                f"reward table must have shape {(states.size, self.vocab.size)}, got {rewards.shape}"
            )
        if not np.all(np.isfinite(rewards)):
            raise ValueError("reward values must be finite")
        dist.setflags(write=False)
        rewards.setflags(write=False)
        object.__setattr__(self, "input_dist", dist)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "states", states)

    @property
    def n_tokens(self) -> int:
        return self.vocab.size

    @property
    def n_inputs(self) -> int:
        return self.vocab.n_inputs

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.rewards))) if self.rewards.size else 0.0

    @property
    def n_trajectories(self) -> int:
        return self.n_inputs * self.n_tokens**self.horizon

    def reward(self, p: Prefix, a: int) -> float:
        return float(self.rewards[self.states.index(p), a])

    def step(self, p: Prefix, a: int) -> Prefix:
        return step(p, a, self.horizon, self.n_tokens)

    def initial(self, x: int) -> Prefix:
        if not 0 <= x < self.n_inputs:
            raise ValueError(f"input {x} not in vocabulary")
        return Prefix(x)

    def with_teacher(self, teacher: "Policy") -> "Task":
        return Task(self.name, self.vocab, self.horizon, self.input_dist, self.rewards, teacher)

    def scaled(self, factor: float) -> "Task":
        return Task(self.name, self.vocab, self.horizon, self.input_dist,
                    self.rewards * factor, self.teacher)

    def check_trajectory(self, tr: Trajectory) -> None:
        if len(tr.actions) != self.horizon:
            raise ValueError(f"trajectory length {len(tr.actions)} != horizon {self.horizon}")
        if not 0 <= tr.input < self.n_inputs:
            raise ValueError(f"input {tr.input} not in vocabulary")
        if any(not 0 <= a < self.n_tokens for a in tr.actions):
            raise TokenOutOfRange("trajectory action outside the vocabulary")

    def to_dict(self) -> dict:
        doc = {
            "name": self.name,
            "vocab": {"tokens": list(self.vocab.tokens),
                      "input_symbols": list(self.vocab.input_symbols)},
            "horizon": self.horizon,
            "input_dist": self.input_dist.tolist(),
            "reward": {p.encode(): self.rewards[i].tolist()
                       for i, p in enumerate(self.states.prefixes())},
            "teacher": None if self.teacher is None else self.teacher.to_dict(),
        }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Task":
        from .policy import policy_from_dict

        vocab = Vocabulary(doc["vocab"]["tokens"], doc["vocab"]["input_symbols"])
        states = StateSpace(vocab.size, vocab.n_inputs, doc["horizon"])
        rewards = np.zeros((states.size, vocab.size))
        for key, row in doc["reward"].items():
            rewards[states.index(Prefix.decode(key))] = row
        task = cls(doc.get("name", "custom"), vocab, doc["horizon"], doc["input_dist"], rewards)
        if doc.get("teacher") is not None:
            task = task.with_teacher(policy_from_dict(doc["teacher"], task))
        return task


def save_task(task: Task, path) -> None:
    with open(path, "w") as fh:
        json.dump(task.to_dict(), fh, indent=1)


def load_task(path) -> Task:
    with open(path) as fh:
        return Task.from_dict(json.load(fh))


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; a point mass always returns its support."""
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, len(probs) - 1)


def rollout(task: Task, policy: "Policy", x: int, rng: np.random.Generator,
            source: str = "student") -> Trajectory:
    p = task.initial(x)
    actions, rewards = [], []
    for _ in range(task.horizon):
        a = sample_index(policy.action_probs(p), rng)
        actions.append(a)
        rewards.append(task.reward(p, a))
        p = task.step(p, a)
    return Trajectory(x, tuple(actions), tuple(rewards), source)


def sample_input(task: Task, rng: np.random.Generator) -> int:
    return sample_index(task.input_dist, rng)


def sample_trajectories(task: Task, policy: "Policy", n: int, seed: int,
                        source: str = "student") -> list[Trajectory]:
    """Draw ``n`` rollouts, trajectory ``i`` using its own stream ``(seed, i)``.

    The per-index streams make the result independent of how the work is split.
    """
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        out.append(rollout(task, policy, sample_input(task, rng), rng, source))
    return out


@dataclass(frozen=True)
class Dataset:
    pairs: tuple[Trajectory, ...]
    provenance: str = "teacher_sampled"

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def inputs(self) -> list[int]:
        return [tr.input for tr in self.pairs]

    def digest(self) -> str:
        blob = json.dumps([tr.to_dict() for tr in self.pairs], sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def generate_dataset(task: Task, n: int, rng: np.random.Generator) -> Dataset:
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    pairs = []
    for _ in range(n):
        x = sample_input(task, rng)
        pairs.append(rollout(task, task.teacher, x, rng, source="dataset"))
    return Dataset(tuple(pairs), "teacher_sampled")


# -- fixtures ---------------------------------------------------------------

FIXTURE_B_SEED = 20240607
FIXTURE_B_LOGIT_SCALE = 2.0


def _fixture_a() -> Task:
    from .policy import TabularSoftmaxPolicy

    vocab = Vocabulary(("a", "b"), ("x0",))
    task = Task("FIXTURE-A", vocab, 1, [1.0], [[1.0, 0.0]])
    teacher = TabularSoftmaxPolicy.from_probs(task, [[0.9, 0.1]])
    return task.with_teacher(teacher)


def _fixture_b() -> Task:
    from .policy import TabularSoftmaxPolicy

    vocab = Vocabulary(("a", "b", "c", "d"), ("x0", "x1"))
    states = StateSpace(4, 2, 3)
    rng = np.random.default_rng(FIXTURE_B_SEED)
    logits = rng.normal(0.0, FIXTURE_B_LOGIT_SCALE, size=(states.size, 4))
    rewards = np.zeros_like(logits)
    rewards[np.arange(states.size), np.argmax(logits, axis=1)] = 1.0
    task = Task("FIXTURE-B", vocab, 3, [0.5, 0.5], rewards)
    return task.with_teacher(TabularSoftmaxPolicy(task, logits))


FIXTURES = {"FIXTURE-A": _fixture_a, "FIXTURE-B": _fixture_b}


def make_fixture_task(name: str) -> Task:
    try:
        return FIXTURES[name]()
    except KeyError:
        raise UnknownFixture(name) from None


def fixture_student(task: Task) -> "Policy":
    """Default tabular student: (0.6, 0.4) on FIXTURE-A, uniform elsewhere."""
    from .policy import TabularSoftmaxPolicy

    if task.name == "FIXTURE-A":
        return TabularSoftmaxPolicy.from_probs(task, [[0.6, 0.4]])
    return TabularSoftmaxPolicy(task)


def random_task(rng: np.random.Generator, n_tokens: int, horizon: int, n_inputs: int = 1,
                logit_scale: float = 1.5, name: str = "random") -> Task:
    """Random tabular task: uniform(-1, 1) rewards and a Gaussian-logit teacher."""
    from .policy import TabularSoftmaxPolicy

    vocab = Vocabulary(tuple(f"t{i}" for i in range(n_tokens)),
                       tuple(f"x{i}" for i in range(n_inputs)))
    states = StateSpace(n_tokens, n_inputs, horizon)
    rewards = rng.uniform(-1.0, 1.0, size=(states.size, n_tokens))
    input_dist = rng.dirichlet(np.ones(n_inputs))
    input_dist = input_dist / input_dist.sum()
    task = Task(name, vocab, horizon, input_dist, rewards)
    logits = rng.normal(0.0, logit_scale, size=(states.size, n_tokens))
    return task.with_teacher(TabularSoftmaxPolicy(task, logits))


def enumerate_actions(task: Task) -> Iterator[tuple[int, tuple[int, ...]]]:
    for x in range(task.n_inputs):
        for actions in itertools.product(range(task.n_tokens), repeat=task.horizon):
            yield x, actions


def make_trajectory(task: Task, x: int, actions: Sequence[int], source: str) -> Trajectory:
    p = task.initial(x)
    rewards = []
    for a in actions:
        rewards.append(task.reward(p, a))
        p = task.step(p, a)
    return Trajectory(x, tuple(actions), tuple(rewards), source)
