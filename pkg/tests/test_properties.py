import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from momentkd import oracle
from momentkd.core import Prefix, random_task
from momentkd.objectives import step_distances
from momentkd.policy import TabularSoftmaxPolicy
from momentkd.qvalue import TabularQ

logits = st.lists(st.floats(-6, 6), min_size=2, max_size=5)


def _dist(z):
    z = np.asarray(z)
    e = np.exp(z - z.max())
    return e / e.sum()


@given(logits, st.data())
def test_js_bounded_by_ln2(z, data):
    p = _dist(z)
    q = _dist(data.draw(st.lists(st.floats(-6, 6), min_size=len(z), max_size=len(z))))
    js = float(step_distances("JS", p, q))
    assert -1e-15 <= js <= math.log(2) + 1e-12
    assert float(step_distances("TV", p, q)) <= 2 + 1e-12


@given(logits)
def test_distances_vanish_on_equal_arguments(z):
    p = _dist(z)
    for kind in ("KL", "RKL", "JS", "TV"):
        assert abs(float(step_distances(kind, p, p))) <= 1e-12


@given(logits)
def test_expected_score_is_zero(z):
    """Sum over actions of pi(a) * grad log pi(a) vanishes."""
    from momentkd.core import make_fixture_task
    task = make_fixture_task("FIXTURE-A")
    z = z[:2]
    pol = TabularSoftmaxPolicy(task, [z])
    pi = pol.action_probs(Prefix(0))
    total = sum(pi[a] * pol.log_prob_grad(Prefix(0), a) for a in range(2))
    assert np.max(np.abs(total)) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 5.0))
def test_tanh_bounded_critic_stays_in_box(seed, bound):
    task = random_task(np.random.default_rng(seed), 3, 2)
    vals = np.random.default_rng(seed).normal(0, 50, (task.states.size, 3))
    f = TabularQ(task, vals, bound)
    assert np.all(np.abs(f.table()) <= bound)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_gap_chain_on_random_tasks(seed):
    rng = np.random.default_rng(seed)
    task = random_task(rng, int(rng.integers(2, 4)), int(rng.integers(1, 4)))
    student = TabularSoftmaxPolicy(task, rng.normal(0, 1, (task.states.size, task.n_tokens)))
    rep = oracle.certify(task, student)
    assert rep.passed, rep.to_dict()["violations"]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_occupancy_slices_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    task = random_task(rng, 3, 3, n_inputs=2)
    rho = oracle.state_occupancy(task, task.teacher)
    for t in range(task.horizon):
        assert abs(rho[task.states.slice(t)].sum() - 1.0) <= 1e-12
