"""Scalar objectives: sampled imitation-gap terms, the joint loss, step-wise
distribution distances and the moment-matching distance.

Inner expectations over the next token are summed exactly over the vocabulary.
TV is the unhalved L1 distance ``sum_y |p*(y) - p(y)|``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Task, Trajectory, rollout, sample_input

DISTANCE_KINDS = ("KL", "RKL", "JS", "TV")
ALL_KINDS = DISTANCE_KINDS + ("MM",)


def _check_horizon(tr: Trajectory, pol) -> None:
    if len(tr.actions) != pol.states.horizon:
        raise ValueError(f"trajectory length {len(tr.actions)} != horizon {pol.states.horizon}")


def u_off(tr: Trajectory, f, student) -> float:
    """``sum_t f(s_t, y_t) - E_{y ~ student(.|s_t)} f(s_t, y)`` on a teacher/dataset trajectory."""
    if tr.source not in ("teacher", "dataset"):
        raise ValueError("u_off needs a teacher or dataset trajectory")
    _check_horizon(tr, student)
    total = 0.0
    for p, a in tr.prefixes():
        q = f.row(p)
        total += q[a] - student.action_probs(p) @ q
    return float(total)


def u_on(tr: Trajectory, f, teacher) -> float:
    """``sum_t E_{y ~ teacher(.|s_t)} f(s_t, y) - f(s_t, y_t)`` on a student trajectory."""
    if tr.source != "student":
        raise ValueError("u_on needs a student trajectory")
    _check_horizon(tr, teacher)
    total = 0.0
    for p, a in tr.prefixes():
        q = f.row(p)
        total += teacher.action_probs(p) @ q - q[a]
    return float(total)


def loss(task: Task, student, f1, f2, batch_off: list[Trajectory],
         batch_on: list[Trajectory]) -> float:
    """Sampled joint objective: mean U^off over ``batch_off`` plus mean U^on over ``batch_on``."""
    if not batch_off or not batch_on:
        raise ValueError("both batches must be non-empty")
    off = np.mean([u_off(tr, f1, student) for tr in batch_off])
    on = np.mean([u_on(tr, f2, task.teacher) for tr in batch_on])
    return float(off + on)


def _kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def step_distances(kind: str, p_star: np.ndarray, p_theta: np.ndarray) -> np.ndarray:
    """Row-wise distance between teacher and student distributions.

    KL is ``KL(p* || p)``, RKL is ``KL(p || p*)``, JS uses the mixture
    ``m = (p* + p) / 2``.  A zero in the second argument where the first has
    mass gives ``inf``.
    """
    p_star = np.asarray(p_star, dtype=float)
    p_theta = np.asarray(p_theta, dtype=float)
    if kind == "TV":
        return np.abs(p_star - p_theta).sum(axis=-1)
    if kind == "KL":
        return _kl_rows(p_star, p_theta)
    if kind == "RKL":
        return _kl_rows(p_theta, p_star)
    if kind == "JS":
        m = 0.5 * (p_star + p_theta)
        return 0.5 * _kl_rows(p_star, m) + 0.5 * _kl_rows(p_theta, m)
    raise ValueError(f"unknown distance kind {kind!r}")


def step_distance(kind: str, p_star, p_theta) -> float:
    p_star, p_theta = np.asarray(p_star, dtype=float), np.asarray(p_theta, dtype=float)
    for p in (p_star, p_theta):
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("arguments must be probability vectors")
    return float(step_distances(kind, p_star, p_theta))


def step_distance_logit_grad(kind: str, p_star: np.ndarray, p_theta: np.ndarray) -> np.ndarray:
    """Gradient of the step distance w.r.t. the student's logits.

    With ``g = dM/dp`` the softmax chain rule gives ``p * (g - <p, g>)``.
    TV uses the subgradient ``sign(p - p*)``.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind == "KL":
            return p_theta - p_star
        if kind == "RKL":
            g = np.log(p_theta) - np.log(p_star) + 1.0
        elif kind == "JS":
            g = 0.5 * (np.log(p_theta) - np.log(0.5 * (p_star + p_theta)))
        elif kind == "TV":
            g = np.sign(p_theta - p_star)
        else:
            raise ValueError(f"unknown distance kind {kind!r}")
    return p_theta * (g - p_theta @ g)


def trajectory_distance(kind: str, tr: Trajectory, teacher, student) -> float:
    return float(sum(step_distance(kind, teacher.action_probs(p), student.action_probs(p))
                     for p, _ in tr.prefixes()))


def policy_distance_samples(task: Task, kind: str, mode: str, student, n_traj: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Per-trajectory summed step distances.

    For ``joint`` each sample pairs one teacher and one student trajectory.
    """
    from .oracle import normalize_mode

    mode = normalize_mode(mode)
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    out = np.zeros(n_traj)
    for i in range(n_traj):
        if mode in ("off_policy", "joint"):
            tr = rollout(task, task.teacher, sample_input(task, rng), rng, "teacher")
            out[i] += trajectory_distance(kind, tr, task.teacher, student)
        if mode in ("on_policy", "joint"):
            tr = rollout(task, student, sample_input(task, rng), rng, "student")
            out[i] += trajectory_distance(kind, tr, task.teacher, student)
    return out


def policy_distance(task: Task, kind: str, mode: str, student, n_traj: int,
                    rng: np.random.Generator) -> float:
    """Monte Carlo step-wise distance; see :func:`oracle.exact_distance` for the exact value."""
    return float(np.mean(policy_distance_samples(task, kind, mode, student, n_traj, rng)))


@dataclass(frozen=True)
class AdversarialBudget:
    """How the maximizing critic of the MM distance is found.

    ``critic_class``: ``box`` (exact vertex of ``|f| <= bound``), ``true_q``
    (the true Q function of the mode) or ``param`` (stochastic ascent on a
    ``critic_kind`` critic for ``steps`` steps at ``lr``).
    """

    critic_class: str = "box"
    bound: float = 1.0
    steps: int = 500
    lr: float = 0.5
    critic_kind: str = "tabular"


@dataclass
class MMResult:
    value: float
    critics: dict
    critic_class: str


def mm_distance(task: Task, mode: str, student, budget: AdversarialBudget = AdversarialBudget(),
                rng: np.random.Generator | None = None) -> MMResult:
    """Moment-matching distance at the (approximately) maximizing critic."""
    from . import oracle
    from .gradients import grad_phi_off, grad_phi_on
    from .qvalue import make_critic

    mode = oracle.normalize_mode(mode)
    modes = ("off_policy", "on_policy") if mode == "joint" else (mode,)
    value, critics = 0.0, {}
    for m in modes:
        if budget.critic_class == "box":
            f = oracle.box_argmax(task, m, student, bound=budget.bound)
            v = oracle.box_sup_mm(task, m, student, bound=budget.bound)
        elif budget.critic_class == "true_q":
            pol = student if m == "off_policy" else task.teacher
            f = oracle.exact_q(task, pol).critic()
            v = oracle.population_u(task, m, student, f.table())
        elif budget.critic_class == "param":
            if rng is None:
                raise ValueError("parameterized critic ascent needs an rng")
            f = make_critic(task, budget.critic_kind, budget.bound, rng)
            for _ in range(budget.steps):
                x = sample_input(task, rng)
                if m == "off_policy":
                    tr = rollout(task, task.teacher, x, rng, "teacher")
                    g = grad_phi_off(tr, student, f)
                else:
                    tr = rollout(task, student, x, rng, "student")
                    g = grad_phi_on(tr, task.teacher, f)
                new = f.values + budget.lr * g
                if not np.all(np.isfinite(new)):
                    raise FloatingPointError("non-finite critic during MM ascent")
                f = f.with_values(new)
            v = oracle.population_u(task, m, student, f.table())
        else:
            raise ValueError(f"unknown critic class {budget.critic_class!r}")
        value += v
        critics[m] = f
    return MMResult(float(value), critics, budget.critic_class)
