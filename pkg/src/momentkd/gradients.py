"""Policy and critic gradients of the joint loss, plus a finite-difference harness.

Per-trajectory estimators:

* ``g_off``: ``sum_t E_{y~pi}[grad log pi(y|s_t) f1(s_t, y)]`` on a teacher trajectory
* ``g_on``: score of the whole student trajectory times ``U^on``
* ``grad_phi_off`` / ``grad_phi_on``: critic gradients of ``U^off`` / ``U^on``

The descent direction for the student is ``g_on - g_off``.

:func:`check_gradient` compares exactly-enumerated expectations of these
estimators against central differences of the population objective, which is
computed along the independent occupancy route in :mod:`oracle`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import oracle
from .core import Dataset, Task, Trajectory
from .objectives import u_on
from .policy import NonFiniteError, Policy

OBJECTIVES = ("L_wrt_theta", "L_wrt_phi1", "L_wrt_phi2", "sft_loss")


def _finite(g: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(g)):
        raise NonFiniteError(f"non-finite {what}")
    return g


def g_off(tr: Trajectory, student: Policy, f1) -> np.ndarray:
    out = np.zeros(student.n_params)
    for p, _ in tr.prefixes():
        out += student.expected_score(p, f1.row(p))
    return _finite(out, "g_off")


def trajectory_score(tr: Trajectory, pol: Policy) -> np.ndarray:
    """``grad log p(tau) = sum_t grad log pi(y_t | s_t)`` (transitions are deterministic)."""
    out = np.zeros(pol.n_params)
    for p, a in tr.prefixes():
        out += pol.log_prob_grad(p, a)
    return out


def g_on(tr: Trajectory, student: Policy, f2, teacher: Policy, baseline: float = 0.0) -> np.ndarray:
    """REINFORCE estimator of the on-policy term.

    ``baseline`` is subtracted from ``U^on`` before weighting; 0 reproduces the
    plain estimator.
    """
    weight = u_on(tr, f2, teacher) - baseline
    if weight == 0.0:
        return np.zeros(student.n_params)
    return _finite(weight * trajectory_score(tr, student), "g_on")


def grad_phi_off(tr: Trajectory, student: Policy, f1) -> np.ndarray:
    out = np.zeros(f1.n_params)
    for p, a in tr.prefixes():
        w = -student.action_probs(p)
        w[a] += 1.0
        out += f1.vjp(p, w)
    return _finite(out, "grad_phi_off")


def grad_phi_on(tr: Trajectory, teacher: Policy, f2) -> np.ndarray:
    out = np.zeros(f2.n_params)
    for p, a in tr.prefixes():
        w = teacher.action_probs(p)
        w[a] -= 1.0
        out += f2.vjp(p, w)
    return _finite(out, "grad_phi_on")


def policy_gradient(student: Policy, f1, f2, teacher: Policy, batch_off: list[Trajectory],
                    batch_on: list[Trajectory], baseline: float = 0.0) -> np.ndarray:
    """Sampled ``grad_theta L``: mean ``g_on`` minus mean ``g_off``."""
    on = sum(g_on(tr, student, f2, teacher, baseline) for tr in batch_on) / len(batch_on)
    off = sum(g_off(tr, student, f1) for tr in batch_off) / len(batch_off)
    return on - off


# -- population objectives ---------------------------------------------------

@dataclass
class PopulationObjective:
    name: str
    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    point: np.ndarray


def population_objective(name: str, task: Task, student: Policy, f1=None, f2=None,
                         dataset: Dataset | None = None,
                         cap: int = oracle.DEFAULT_CAP) -> PopulationObjective:
    """Exact objective (occupancy route) with its analytic gradient (enumerated estimators).

    ``sft_loss`` is the mean negative log-likelihood of ``dataset`` when given,
    otherwise its population counterpart under teacher trajectories.
    """
    teacher = task.teacher
    if name == "L_wrt_theta":
        f1_tab, f2_tab = f1.table(), f2.table()
        off_trajs = oracle.enumerate_trajectories(task, teacher, "teacher", cap)

        def value(theta):
            return oracle.population_loss(task, student.with_values(theta), f1_tab, f2_tab, cap)

        def grad(theta):
            pol = student.with_values(theta)
            on_trajs = oracle.enumerate_trajectories(task, pol, "student", cap)
            e_on = sum(prob * g_on(tr, pol, f2, teacher) for prob, tr in on_trajs)
            e_off = sum(prob * g_off(tr, pol, f1) for prob, tr in off_trajs)
            return e_on - e_off

        return PopulationObjective(name, value, grad, student.values.copy())

    if name == "L_wrt_phi1":
        off_trajs = oracle.enumerate_trajectories(task, teacher, "teacher", cap)

        def value(phi):
            return oracle.population_u(task, "off_policy", student, f1.with_values(phi).table(), cap)

        def grad(phi):
            f = f1.with_values(phi)
            return sum(prob * grad_phi_off(tr, student, f) for prob, tr in off_trajs)

        return PopulationObjective(name, value, grad, f1.values.copy())

    if name == "L_wrt_phi2":
        on_trajs = oracle.enumerate_trajectories(task, student, "student", cap)

        def value(phi):
            return oracle.population_u(task, "on_policy", student, f2.with_values(phi).table(), cap)

        def grad(phi):
            f = f2.with_values(phi)
            return sum(prob * grad_phi_on(tr, teacher, f) for prob, tr in on_trajs)

        return PopulationObjective(name, value, grad, f2.values.copy())

    if name == "sft_loss":
        if dataset is not None:
            weighted = [(1.0 / len(dataset), tr) for tr in dataset.pairs]
            counts = np.zeros((task.states.size, task.n_tokens))
            for w, tr in weighted:
                for p, a in tr.prefixes():
                    counts[task.states.index(p), a] += w
        else:
            weighted = oracle.enumerate_trajectories(task, teacher, "teacher", cap)
            rho = oracle.state_occupancy(task, teacher, cap)
            counts = rho[:, None] * teacher.prob_table()

        def value(theta):
            logp = np.log(student.with_values(theta).prob_table())
            return float(-np.sum(counts * logp))

        def grad(theta):
            pol = student.with_values(theta)
            return -sum(w * trajectory_score(tr, pol) for w, tr in weighted)

        return PopulationObjective(name, value, grad, student.values.copy())

    raise ValueError(f"unknown objective {name!r}")


@dataclass
class GradientReport:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_err: float
    h: float
    floor: float

    @property
    def max_abs_err(self) -> float:
        return float(np.max(np.abs(self.analytic - self.numeric), initial=0.0))

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol

    def to_dict(self) -> dict:
        return {"name": self.name, "max_rel_err": self.max_rel_err,
                "max_abs_err": self.max_abs_err, "h": self.h, "floor": self.floor,
                "analytic": self.analytic.tolist(), "numeric": self.numeric.tolist()}


def central_difference(fn: Callable[[np.ndarray], float], point: np.ndarray, h: float) -> np.ndarray:
    point = np.asarray(point, dtype=float)
    out = np.zeros_like(point)
    for i in range(point.size):
        e = np.zeros_like(point)
        e[i] = h
        out[i] = (fn(point + e) - fn(point - e)) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def check_gradient(objective: PopulationObjective, point: np.ndarray | None = None,
                   h: float = 1e-5, floor: float = 1e-4) -> GradientReport:
    """Compare the analytic gradient against central differences at ``point``.

    Components where both gradients are below ``floor`` are compared on an
    absolute scale of ``floor``; rounding in the differences is ~1e-10.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    point = objective.point if point is None else np.asarray(point, dtype=float)
    analytic = np.asarray(objective.grad(point), dtype=float)
    numeric = central_difference(objective.value, point, h)
    return GradientReport(objective.name, analytic, numeric,
                          relative_error(analytic, numeric, floor), h, floor)
