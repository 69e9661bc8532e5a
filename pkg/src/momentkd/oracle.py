"""Exact ground truth by exhaustive enumeration.

Two routes are kept apart on purpose.  Trajectory enumeration
(:func:`enumerate_trajectories`) walks every action sequence.  The occupancy
route (:func:`state_occupancy`) pushes state masses forward one time slice at
a time.  Tests and :func:`certify` compare one route against the other.

The oracle refuses tasks whose trajectory count exceeds ``cap``.  It never
falls back to sampling.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .core import Prefix, Task, Trajectory
from .objectives import step_distances, u_off, u_on
from .policy import Policy, TabularSoftmaxPolicy
from .qvalue import TabularQ

DEFAULT_CAP = 10**6
MODES = ("on_policy", "off_policy", "joint")


class CapExceeded(RuntimeError):
    pass


def check_cap(task: Task, cap: int = DEFAULT_CAP) -> None:
    if task.n_trajectories > cap:
        raise CapExceeded(
            f"{task.name}: {task.n_trajectories} trajectories exceed the enumeration cap {cap}")


def normalize_mode(mode: str) -> str:
    aliases = {"on": "on_policy", "off": "off_policy"}
    mode = aliases.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    return mode


def state_occupancy(task: Task, pol: Policy, cap: int = DEFAULT_CAP) -> np.ndarray:
    """Probability of visiting each state; every time slice sums to 1."""
    check_cap(task, cap)
    probs = pol.prob_table()
    rho = np.empty(task.states.size)
    rho[task.states.slice(0)] = task.input_dist
    for t in range(task.horizon - 1):
        cur, nxt = task.states.slice(t), task.states.slice(t + 1)
        rho[nxt] = (rho[cur, None] * probs[cur]).ravel()
    return rho


def enumerate_trajectories(task: Task, pol: Policy, source: str = "student",
                           cap: int = DEFAULT_CAP) -> list[tuple[float, Trajectory]]:
    """Every trajectory with its probability under ``p_x`` and ``pol``."""
    check_cap(task, cap)
    out = []
    for x in range(task.n_inputs):
        for actions in itertools.product(range(task.n_tokens), repeat=task.horizon):
            prob = float(task.input_dist[x])
            rewards = []
            p = Prefix(x)
            for a in actions:
                prob *= float(pol.action_probs(p)[a])
                rewards.append(task.reward(p, a))
                p = task.step(p, a)
            out.append((prob, Trajectory(x, actions, tuple(rewards), source)))
    return out


def exact_j(task: Task, pol: Policy, cap: int = DEFAULT_CAP) -> float:
    return float(sum(prob * sum(tr.rewards) for prob, tr in enumerate_trajectories(task, pol, cap=cap)))


def j_from_occupancy(task: Task, pol: Policy, cap: int = DEFAULT_CAP) -> float:
    rho = state_occupancy(task, pol, cap)
    return float(np.sum(rho[:, None] * pol.prob_table() * task.rewards))


@dataclass
class ExactSolution:
    task: Task = field(repr=False)
    j_value: float
    v_table: np.ndarray
    q_table: np.ndarray
    occupancy: np.ndarray  # state-action mass, shape (n_states, |V|)

    def v(self, p: Prefix) -> float:
        return float(self.v_table[self.task.states.index(p)])

    def q(self, p: Prefix, a: int) -> float:
        return float(self.q_table[self.task.states.index(p), a])

    def rho(self, p: Prefix, a: int) -> float:
        return float(self.occupancy[self.task.states.index(p), a])

    def critic(self, bound: float | None = None) -> TabularQ:
        """The Q table as an unbounded tabular critic."""
        return TabularQ(self.task, self.q_table, bound)


def exact_q(task: Task, pol: Policy, cap: int = DEFAULT_CAP) -> ExactSolution:
    """Backward induction: ``q = r + v(next)``, ``v = sum_y pi(y) q(., y)``, terminal ``v = 0``."""
    check_cap(task, cap)
    probs = pol.prob_table()
    q = task.rewards.copy()
    v = np.zeros(task.states.size)
    for t in reversed(range(task.horizon)):
        sl = task.states.slice(t)
        if t < task.horizon - 1:
            q[sl] += v[task.states.slice(t + 1)].reshape(-1, task.n_tokens)
        v[sl] = np.sum(probs[sl] * q[sl], axis=1)
    j = float(task.input_dist @ v[task.states.slice(0)])
    rho = state_occupancy(task, pol, cap)[:, None] * probs
    return ExactSolution(task, j, v, q, rho)


def exact_gap(task: Task, student: Policy, cap: int = DEFAULT_CAP) -> float:
    return exact_j(task, task.teacher, cap) - exact_j(task, student, cap)


def visiting_policy(task: Task, mode: str, student: Policy) -> Policy:
    return task.teacher if normalize_mode(mode) == "off_policy" else student


def exact_distance(task: Task, kind: str, mode: str, student: Policy,
                   cap: int = DEFAULT_CAP) -> float:
    """Occupancy-weighted step-wise distance under the mode's visiting policy."""
    mode = normalize_mode(mode)
    if mode == "joint":
        return (exact_distance(task, kind, "off_policy", student, cap)
                + exact_distance(task, kind, "on_policy", student, cap))
    rho = state_occupancy(task, visiting_policy(task, mode, student), cap)
    per_state = step_distances(kind, task.teacher.prob_table(), student.prob_table())
    visited = rho > 0
    if np.any(np.isinf(per_state[visited])):
        return float("inf")
    return float(np.sum(rho[visited] * per_state[visited]))


def population_u(task: Task, mode: str, student: Policy, critic_table: np.ndarray,
                 cap: int = DEFAULT_CAP) -> float:
    """Exact expectation of U^off (teacher trajectories) or U^on (student trajectories)."""
    mode = normalize_mode(mode)
    if mode == "joint":
        raise ValueError("population_u takes a single mode")
    rho = state_occupancy(task, visiting_policy(task, mode, student), cap)
    diff = task.teacher.prob_table() - student.prob_table()
    return float(np.sum(rho[:, None] * diff * critic_table))


def population_loss(task: Task, student: Policy, f1_table: np.ndarray, f2_table: np.ndarray,
                    cap: int = DEFAULT_CAP) -> float:
    return (population_u(task, "off_policy", student, f1_table, cap)
            + population_u(task, "on_policy", student, f2_table, cap))


def population_u_enumerated(task: Task, mode: str, student: Policy, critic,
                            cap: int = DEFAULT_CAP) -> float:
    """Same quantity as :func:`population_u`, via the per-trajectory estimators."""
    mode = normalize_mode(mode)
    if mode == "off_policy":
        trajs = enumerate_trajectories(task, task.teacher, "teacher", cap)
        return float(sum(prob * u_off(tr, critic, student) for prob, tr in trajs))
    trajs = enumerate_trajectories(task, student, "student", cap)
    return float(sum(prob * u_on(tr, critic, task.teacher) for prob, tr in trajs))


def enumerated_occupancy(task: Task, pol: Policy, cap: int = DEFAULT_CAP) -> np.ndarray:
    """State-action mass accumulated from enumerated trajectories."""
    occ = np.zeros((task.states.size, task.n_tokens))
    for prob, tr in enumerate_trajectories(task, pol, cap=cap):
        for p, a in tr.prefixes():
            occ[task.states.index(p), a] += prob
    return occ


def box_coefficients(task: Task, mode: str, student: Policy, cap: int = DEFAULT_CAP) -> np.ndarray:
    """Coefficient ``c(s, a)`` with population ``U = sum c(s, a) f(s, a)``.

    Off-policy: teacher action mass minus the student mixture at teacher-visited
    states.  On-policy: teacher mixture minus student action mass at
    student-visited states.
    """
    mode = normalize_mode(mode)
    if mode == "off_policy":
        occ = enumerated_occupancy(task, task.teacher, cap)
        return occ - occ.sum(axis=1, keepdims=True) * student.prob_table()
    if mode == "on_policy":
        occ = enumerated_occupancy(task, student, cap)
        return occ.sum(axis=1, keepdims=True) * task.teacher.prob_table() - occ
    raise ValueError("box_coefficients takes a single mode")


def box_sup_mm(task: Task, mode: str, student: Policy, cap: int = DEFAULT_CAP,
               bound: float = 1.0) -> float:
    """Supremum of the population U term over ``{f : |f| <= bound}``.

    The objective is linear in the table of ``f``, so the sup sits at the vertex
    ``f = bound * sign(c)`` and equals ``bound * sum |c|``.
    """
    mode = normalize_mode(mode)
    if mode == "joint":
        return (box_sup_mm(task, "off_policy", student, cap, bound)
                + box_sup_mm(task, "on_policy", student, cap, bound))
    return float(bound * np.sum(np.abs(box_coefficients(task, mode, student, cap))))


def box_argmax(task: Task, mode: str, student: Policy, cap: int = DEFAULT_CAP,
               bound: float = 1.0) -> TabularQ:
    return TabularQ(task, bound * np.sign(box_coefficients(task, mode, student, cap)))


def optimal_policy(task: Task, sharpness: float = 50.0) -> TabularSoftmaxPolicy:
    """Near-deterministic tabular policy greedy in the optimal Q (backward induction on r)."""
    q = task.rewards.copy()
    v = np.zeros(task.states.size)
    for t in reversed(range(task.horizon)):
        sl = task.states.slice(t)
        if t < task.horizon - 1:
            q[sl] += v[task.states.slice(t + 1)].reshape(-1, task.n_tokens)
        v[sl] = q[sl].max(axis=1)
    logits = np.zeros_like(q)
    logits[np.arange(len(q)), np.argmax(q, axis=1)] = sharpness
    return TabularSoftmaxPolicy(task, logits)


@dataclass
class Check:
    name: str
    lhs: float
    rhs: float
    relation: str  # "==" or "<="
    passed: bool

    def to_dict(self) -> dict:
        return {"name": self.name, "lhs": self.lhs, "rhs": self.rhs,
                "relation": self.relation, "passed": self.passed}


@dataclass
class CertificationReport:
    task_name: str
    reward_scale: float
    gap: float
    checks: list[Check]
    instance: dict | None = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def violations(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "task": self.task_name,
            "reward_scale": self.reward_scale,
            "gap": self.gap,
            "passed": self.passed,
            "checks": [c.to_dict() for c in self.checks],
            "violations": [c.name for c in self.violations],
            "instance": self.instance,
        }


def certify(task: Task, student: Policy, cap: int = DEFAULT_CAP, tol: float = 1e-10) -> CertificationReport:
    """Check the PDL identities and the gap <= box-sup <= TV chain, both modes.

    Rewards are first rescaled by ``1 / (R_max T)`` so that ``|Q| <= 1``.
    """
    check_cap(task, cap)
    scale = 1.0 / (task.r_max * task.horizon) if task.r_max > 0 else 1.0
    task = task.scaled(scale)
    gap = exact_gap(task, student, cap)
    q_student = exact_q(task, student, cap).critic()
    q_teacher = exact_q(task, task.teacher, cap).critic()

    def eq(name, lhs, rhs):
        return Check(name, lhs, rhs, "==", abs(lhs - rhs) <= tol)

    def le(name, lhs, rhs):
        return Check(name, lhs, rhs, "<=", lhs <= rhs + tol)

    checks = [
        eq("pdl_off", population_u_enumerated(task, "off_policy", student, q_student, cap), gap),
        eq("pdl_on", population_u_enumerated(task, "on_policy", student, q_teacher, cap), gap),
    ]
    for mode, tag in (("off_policy", "off"), ("on_policy", "on")):
        sup = box_sup_mm(task, mode, student, cap)
        tv = exact_distance(task, "TV", mode, student, cap)
        checks.append(le(f"gap_le_box_sup_{tag}", gap, sup))
        checks.append(le(f"box_sup_le_tv_{tag}", sup, tv))
        checks.append(eq(f"box_sup_eq_tv_{tag}", sup, tv))
    report = CertificationReport(task.name, scale, gap, checks)
    if not report.passed:
        report.instance = {"task": task.to_dict(), "student": student.to_dict()}
    return report
