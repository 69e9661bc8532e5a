import math

import numpy as np
import pytest

from conftest import naive_distance, naive_j
from momentkd import oracle
from momentkd.core import Prefix, make_trajectory, random_task
from momentkd.objectives import (AdversarialBudget, loss, mm_distance, policy_distance,
                                 step_distance, step_distance_logit_grad, u_off, u_on)
from momentkd.policy import TabularSoftmaxPolicy
from momentkd.qvalue import TabularQ

# FIXTURE-B frozen values, computed by explicit path products in conftest
J_TEACHER_B = 2.3037543101518865
J_UNIFORM_B = 0.75
DIST_B = {  # (teacher-visited, student-visited) for the uniform student
    "TV": (3.1944590978647707, 3.285183080764253),
    "KL": (2.2430485502773507, 2.381679244823852),
    "RKL": (4.912364294933827, 5.40683004768343),
    "JS": (0.5897130088425268, 0.6310034412399907),
}
KL_A = 0.9 * math.log(0.9 / 0.6) + 0.1 * math.log(0.1 / 0.4)


def _kl(p, q):
    return sum(a * math.log(a / b) for a, b in zip(p, q))


def test_u_off_fixture_a(task_a, student_a):
    f = TabularQ(task_a, [[1.0, 0.0]])
    assert u_off(make_trajectory(task_a, 0, (0,), "teacher"), f, student_a) == pytest.approx(0.4, abs=1e-15)
    assert u_off(make_trajectory(task_a, 0, (1,), "teacher"), f, student_a) == pytest.approx(-0.6, abs=1e-15)
    assert oracle.population_u_enumerated(task_a, "off", student_a, f) == pytest.approx(0.30, abs=1e-15)


def test_u_on_fixture_a(task_a, student_a):
    f = TabularQ(task_a, [[1.0, 0.0]])
    assert oracle.population_u_enumerated(task_a, "on", student_a, f) == pytest.approx(0.30, abs=1e-15)
    with pytest.raises(ValueError):
        u_on(make_trajectory(task_a, 0, (0,), "teacher"), f, task_a.teacher)
    with pytest.raises(ValueError):
        u_off(make_trajectory(task_a, 0, (0,), "student"), f, student_a)


def test_joint_loss_fixture_a(task_a, student_a):
    f = TabularQ(task_a, [[1.0, 0.0]])
    off = [make_trajectory(task_a, 0, (0,), "teacher")] * 9 + [make_trajectory(task_a, 0, (1,), "teacher")]
    on = [make_trajectory(task_a, 0, (0,), "student")] * 6 + [make_trajectory(task_a, 0, (1,), "student")] * 4
    assert loss(task_a, student_a, f, f, off, on) == pytest.approx(0.60, abs=1e-14)
    with pytest.raises(ValueError):
        loss(task_a, student_a, f, f, [], on)


def test_step_distances_fixture_a():
    p, q = [0.9, 0.1], [0.6, 0.4]
    assert step_distance("TV", p, q) == pytest.approx(0.6, abs=1e-15)
    assert step_distance("KL", p, q) == pytest.approx(0.226289, abs=1e-6)
    assert step_distance("KL", p, q) == pytest.approx(KL_A, abs=1e-9)
    m = [0.75, 0.25]
    assert step_distance("JS", p, q) == pytest.approx(0.5 * _kl(p, m) + 0.5 * _kl(q, m), abs=1e-15)
    assert step_distance("RKL", p, q) == pytest.approx(_kl(q, p), abs=1e-15)


def test_step_distance_kl_infinite_sentinel():
    assert step_distance("KL", [0.5, 0.5], [1.0, 0.0]) == math.inf
    assert step_distance("RKL", [0.5, 0.5], [1.0, 0.0]) == pytest.approx(math.log(2))
    with pytest.raises(ValueError):
        step_distance("KL", [0.5, 0.6], [0.5, 0.5])


@pytest.mark.parametrize("kind", ["KL", "RKL", "JS", "TV"])
def test_step_distance_logit_grad(kind):
    p_star = np.array([0.5, 0.3, 0.2])
    z = np.array([0.1, -0.4, 0.7])

    def fn(z):
        q = np.exp(z - z.max())
        return step_distance(kind, p_star, q / q.sum())

    h = 1e-6
    fd = np.array([(fn(z + h * e) - fn(z - h * e)) / (2 * h) for e in np.eye(3)])
    q = np.exp(z) / np.exp(z).sum()
    np.testing.assert_allclose(step_distance_logit_grad(kind, p_star, q), fd, atol=1e-8)


def test_exact_j_and_gap(task_a, student_a, task_b, student_b):
    assert oracle.exact_j(task_a, task_a.teacher) == pytest.approx(0.9, abs=1e-15)
    assert oracle.exact_j(task_a, student_a) == pytest.approx(0.6, abs=1e-15)
    assert oracle.exact_gap(task_a, student_a) == pytest.approx(0.30, abs=1e-15)
    assert oracle.exact_j(task_b, task_b.teacher) == pytest.approx(J_TEACHER_B, abs=1e-12)
    assert oracle.j_from_occupancy(task_b, student_b) == pytest.approx(J_UNIFORM_B, abs=1e-12)


def test_exact_q_fixture_a(task_a, student_a):
    sol = oracle.exact_q(task_a, student_a)
    assert (sol.q(Prefix(0), 0), sol.q(Prefix(0), 1), sol.v(Prefix(0))) == pytest.approx((1, 0, 0.6))
    assert oracle.exact_q(task_a, task_a.teacher).v(Prefix(0)) == pytest.approx(0.9)


@pytest.mark.parametrize("kind", ["TV", "KL", "RKL", "JS"])
def test_exact_distance_fixture_b(task_b, student_b, kind):
    off, on = DIST_B[kind]
    assert oracle.exact_distance(task_b, kind, "off", student_b) == pytest.approx(off, abs=1e-12)
    assert oracle.exact_distance(task_b, kind, "on", student_b) == pytest.approx(on, abs=1e-12)
    assert oracle.exact_distance(task_b, kind, "joint", student_b) == pytest.approx(off + on, abs=1e-12)


def test_exact_distance_fixture_a(task_a, student_a):
    assert oracle.exact_distance(task_a, "TV", "off", student_a) == pytest.approx(0.6, abs=1e-15)
    assert oracle.exact_distance(task_a, "KL", "off", student_a) == pytest.approx(KL_A, abs=1e-12)


def test_mm_distance_fixture_a(task_a, student_a):
    assert mm_distance(task_a, "off", student_a).value == pytest.approx(0.6, abs=1e-15)
    assert oracle.box_sup_mm(task_a, "off", student_a) == oracle.exact_distance(task_a, "TV", "off", student_a)
    tq = mm_distance(task_a, "off", student_a, AdversarialBudget(critic_class="true_q"))
    assert tq.value == pytest.approx(0.30, abs=1e-15)


def test_mm_param_ascent_approaches_box(task_a, student_a):
    res = mm_distance(task_a, "off", student_a,
                      AdversarialBudget(critic_class="param", steps=2000, lr=0.5),
                      np.random.default_rng(0))
    assert 0.5 < res.value <= 0.6 + 1e-12


def test_box_sup_equals_tv_random(task_b):
    rng = np.random.default_rng(8)
    for _ in range(5):
        st = TabularSoftmaxPolicy(task_b, rng.normal(0, 1, (task_b.states.size, 4)))
        for mode in ("off", "on"):
            assert oracle.box_sup_mm(task_b, mode, st) == pytest.approx(
                oracle.exact_distance(task_b, "TV", mode, st), abs=1e-10)


def test_occupancy_routes_agree(task_b, student_b):
    occ = oracle.enumerated_occupancy(task_b, student_b)
    rho = oracle.state_occupancy(task_b, student_b)
    np.testing.assert_allclose(occ, rho[:, None] * student_b.prob_table(), atol=1e-14)
    for t in range(task_b.horizon):
        assert rho[task_b.states.slice(t)].sum() == pytest.approx(1.0)


def test_independent_oracle_agreement():
    rng = np.random.default_rng(21)
    for _ in range(5):
        t = random_task(rng, 3, 3, n_inputs=2)
        st = TabularSoftmaxPolicy(t, rng.normal(0, 1, (t.states.size, 3)))
        assert oracle.exact_j(t, st) == pytest.approx(naive_j(t, st), abs=1e-12)
        assert oracle.j_from_occupancy(t, st) == pytest.approx(naive_j(t, st), abs=1e-12)
        assert oracle.exact_distance(t, "JS", "on", st) == pytest.approx(
            naive_distance(t, "JS", st, st), abs=1e-12)


def test_cap_guard(task_b, student_b):
    with pytest.raises(oracle.CapExceeded):
        oracle.exact_gap(task_b, student_b, cap=100)


def test_certify_fixture_a(task_a, student_a):
    rep = oracle.certify(task_a, student_a)
    assert rep.passed and rep.violations == []
    vals = {c.name: (c.lhs, c.rhs) for c in rep.checks}
    assert vals["gap_le_box_sup_off"] == pytest.approx((0.3, 0.6))
    assert vals["box_sup_le_tv_off"] == pytest.approx((0.6, 0.6))


def test_policy_distance_monte_carlo(task_a, student_a):
    est = policy_distance(task_a, "TV", "off", student_a, 50, np.random.default_rng(0))
    assert est == pytest.approx(0.6)  # single state: every sample is exact
    with pytest.raises(ValueError):
        policy_distance(task_a, "TV", "off", student_a, 0, np.random.default_rng(0))
